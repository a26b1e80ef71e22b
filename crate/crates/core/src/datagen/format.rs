//! Little-endian binary formats.
//!
//! Embedding file (`ZSLB`):
//!
//! ```text
//! magic "ZSLB" | version u32 = 1 | dim u32 | task_count u32
//! per task: class_count u32
//!   per split (train, val, test): slide_count u32
//!     per slide: id_len u16 | id bytes (UTF-8) | local_class u32 | region_count u32
//!                | patches_per_region u32
//!                | per region: region_embedding f32×dim | patches f32×(patches_per_region×dim)
//! ```
//!
//! Prototype file (`ZSLP`):
//!
//! ```text
//! magic "ZSLP" | version u32 = 1 | dim u32 | task_count u32
//! per task: class_count u32 | per class: variant_count u32 | variants f32×(variant_count×dim)
//! ```

use std::path::Path;

use super::{label_space, DataError, Region, SlideBag, TaskDataset, TaskPrototypeSpec};
use crate::primitives::{GlobalLabel, LabelSpace};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"ZSLB";
pub const PROTOTYPE_MAGIC: &[u8; 4] = b"ZSLP";
pub const FORMAT_VERSION: u32 = 1;

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Ran out of bytes at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Short {
    pub offset: usize,
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], Short> {
        if self.remaining() < n {
            return Err(Short { offset: self.pos });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], Short> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, Short> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, Short> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, Short> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, Short> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, Short> {
        let raw = self.bytes(n.checked_mul(4).ok_or(Short { offset: self.pos })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, Short> {
        let raw = self.bytes(n.checked_mul(8).ok_or(Short { offset: self.pos })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(n).map_err(|_| DataError::Consistency(format!("{what} {n} exceeds u32")))
}

fn format_err(offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Format {
        offset,
        reason: reason.into(),
    }
}

pub(crate) fn check_header(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<(), DataError> {
    let found = r
        .bytes(4)
        .map_err(|s| format_err(s.offset, "file shorter than magic"))?;
    if found != magic {
        return Err(format_err(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let at = r.offset();
    let version = r.u32().map_err(|s| format_err(s.offset, "missing version"))?;
    if version != FORMAT_VERSION {
        return Err(format_err(at, format!("unsupported version {version}")));
    }
    Ok(())
}

/// Appends one slide record, checking that every embedding has `dim` entries.
pub(crate) fn encode_slide(out: &mut Vec<u8>, bag: &SlideBag, dim: usize) -> Result<(), DataError> {
    let id = bag.slide_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| DataError::Consistency(format!("slide id {} too long", bag.slide_id)))?;
    let ppr = bag.regions.first().map_or(0, Region::patch_count);
    for region in &bag.regions {
        if region.dim() != dim {
            return Err(DataError::Consistency(format!(
                "slide {}: region dim {} differs from file dim {dim}",
                bag.slide_id,
                region.dim()
            )));
        }
        if region.patches.len() != ppr * dim {
            return Err(DataError::Consistency(format!(
                "slide {}: regions have differing patch counts",
                bag.slide_id
            )));
        }
    }
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    put_u32(out, to_u32(bag.label.local_class, "local class")?);
    put_u32(out, to_u32(bag.regions.len(), "region count")?);
    put_u32(out, to_u32(ppr, "patches per region")?);
    for region in &bag.regions {
        put_f32s(out, &region.embedding);
        put_f32s(out, &region.patches);
    }
    Ok(())
}

/// Decodes one slide record; `label_for` maps the stored local class to a
/// label. Running out of bytes reports the raw offset.
pub(crate) fn decode_slide(
    r: &mut Reader<'_>,
    dim: usize,
    label_for: impl Fn(usize) -> Option<GlobalLabel>,
) -> Result<Result<SlideBag, DataError>, Short> {
    let id_len = r.u16()? as usize;
    let id_at = r.offset();
    let id_bytes = r.bytes(id_len)?;
    let local_class = r.u32()? as usize;
    let region_count = r.u32()? as usize;
    let ppr = r.u32()? as usize;
    let mut regions = Vec::with_capacity(region_count.min(r.remaining() / 4 + 1));
    for _ in 0..region_count {
        let embedding = r.f32s(dim)?;
        let patches = r.f32s(ppr.checked_mul(dim).ok_or(Short { offset: r.offset() })?)?;
        regions.push(Region { embedding, patches });
    }
    let slide_id = match String::from_utf8(id_bytes.to_vec()) {
        Ok(s) => s,
        Err(_) => return Ok(Err(format_err(id_at, "slide id is not UTF-8"))),
    };
    let Some(label) = label_for(local_class) else {
        return Ok(Err(DataError::Consistency(format!(
            "slide {slide_id}: local class {local_class} outside its task"
        ))));
    };
    if regions.is_empty() {
        return Ok(Err(DataError::Consistency(format!("slide {slide_id} has no regions"))));
    }
    Ok(Ok(SlideBag {
        slide_id,
        label,
        regions,
    }))
}

fn sequence_dim(tasks: &[TaskDataset]) -> usize {
    tasks
        .iter()
        .flat_map(TaskDataset::all_slides)
        .next()
        .map_or(0, SlideBag::dim)
}

pub fn encode_embeddings(tasks: &[TaskDataset]) -> Result<Vec<u8>, DataError> {
    let dim = sequence_dim(tasks);
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(dim, "dim")?);
    put_u32(&mut out, to_u32(tasks.len(), "task count")?);
    for (t, task) in tasks.iter().enumerate() {
        if task.task_index != t {
            return Err(DataError::Consistency(format!(
                "task at position {t} has index {}",
                task.task_index
            )));
        }
        put_u32(&mut out, to_u32(task.class_count, "class count")?);
        for split in [&task.train, &task.val, &task.test] {
            put_u32(&mut out, to_u32(split.len(), "slide count")?);
            for bag in split {
                if bag.label.task_index != t || bag.label.local_class >= task.class_count {
                    return Err(DataError::Consistency(format!(
                        "slide {} label does not belong to task {t}",
                        bag.slide_id
                    )));
                }
                encode_slide(&mut out, bag, dim)?;
            }
        }
    }
    Ok(out)
}

pub fn decode_embeddings(buf: &[u8]) -> Result<Vec<TaskDataset>, DataError> {
    let mut r = Reader::new(buf);
    check_header(&mut r, EMBEDDING_MAGIC)?;
    let header = |s: Short| format_err(s.offset, "truncated header");
    let dim = r.u32().map_err(header)? as usize;
    let task_count = r.u32().map_err(header)? as usize;

    // Class counts come before each task's slides; the label space grows as we read.
    let mut counts = Vec::new();
    let mut tasks = Vec::new();
    for t in 0..task_count {
        let class_count = r
            .u32()
            .map_err(|s| format_err(s.offset, format!("truncated header of task {t}")))?
            as usize;
        counts.push(class_count);
        let space = LabelSpace::new(&counts);
        let mut splits: [Vec<SlideBag>; 3] = Default::default();
        for (split_idx, split) in SPLITS.iter().enumerate() {
            let n = r
                .u32()
                .map_err(|s| format_err(s.offset, format!("truncated {split} count of task {t}")))?
                as usize;
            for slide in 0..n {
                let bag = decode_slide(&mut r, dim, |c| space.label(t, c)).map_err(|s| DataError::Truncated {
                    offset: s.offset,
                    task: t,
                    split,
                    slide,
                })??;
                splits[split_idx].push(bag);
            }
        }
        let [train, val, test] = splits;
        tasks.push(TaskDataset {
            task_index: t,
            class_count,
            train,
            val,
            test,
        });
    }
    if r.remaining() != 0 {
        return Err(format_err(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    debug_assert_eq!(label_space(&tasks).task_count(), task_count);
    Ok(tasks)
}

pub fn write_embedding_file(tasks: &[TaskDataset], path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_embeddings(tasks)?)?;
    Ok(())
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<Vec<TaskDataset>, DataError> {
    decode_embeddings(&std::fs::read(path)?)
}

pub fn encode_prototypes(specs: &[TaskPrototypeSpec]) -> Result<Vec<u8>, DataError> {
    let dim = specs
        .iter()
        .flat_map(|s| s.variants.iter().flatten())
        .next()
        .map_or(0, Vec::len);
    let mut out = Vec::new();
    out.extend_from_slice(PROTOTYPE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(dim, "dim")?);
    put_u32(&mut out, to_u32(specs.len(), "task count")?);
    for spec in specs {
        put_u32(&mut out, to_u32(spec.class_count(), "class count")?);
        for variants in &spec.variants {
            put_u32(&mut out, to_u32(variants.len(), "variant count")?);
            for v in variants {
                if v.len() != dim {
                    return Err(DataError::Consistency(format!(
                        "task {}: variant dim {} differs from file dim {dim}",
                        spec.task_index,
                        v.len()
                    )));
                }
                put_f32s(&mut out, v);
            }
        }
    }
    Ok(out)
}

pub fn decode_prototypes(buf: &[u8]) -> Result<Vec<TaskPrototypeSpec>, DataError> {
    let mut r = Reader::new(buf);
    check_header(&mut r, PROTOTYPE_MAGIC)?;
    let short = |s: Short| format_err(s.offset, "truncated prototype file");
    let dim = r.u32().map_err(short)? as usize;
    let task_count = r.u32().map_err(short)? as usize;
    let mut specs = Vec::new();
    for t in 0..task_count {
        let classes = r.u32().map_err(short)? as usize;
        let mut variants = Vec::new();
        for _ in 0..classes {
            let n = r.u32().map_err(short)? as usize;
            let flat = r.f32s(n.saturating_mul(dim)).map_err(short)?;
            variants.push(flat.chunks(dim.max(1)).map(<[f32]>::to_vec).take(n).collect());
        }
        specs.push(TaskPrototypeSpec {
            task_index: t,
            variants,
        });
    }
    if r.remaining() != 0 {
        return Err(format_err(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(specs)
}

pub fn write_prototype_file(specs: &[TaskPrototypeSpec], path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_prototypes(specs)?)?;
    Ok(())
}

pub fn load_prototype_file(path: impl AsRef<Path>) -> Result<Vec<TaskPrototypeSpec>, DataError> {
    decode_prototypes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_task_sequence, synthesize_prototypes, SyntheticConfig};
    use proptest::prelude::*;

    fn config(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            dim: 5,
            regions_per_slide: 2,
            patches_per_region: 3,
            seed,
            ..SyntheticConfig::with_class_counts(&[2, 3], 4)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn embedding_round_trip(seed in any::<u64>(), sigma in 0.0f64..2.0) {
            let mut c = config(seed);
            c.patch_noise_sigma = sigma;
            c.class_separation = 0.0;
            let seq = generate_task_sequence(&c).unwrap();
            let bytes = encode_embeddings(&seq.tasks).unwrap();
            prop_assert_eq!(decode_embeddings(&bytes).unwrap(), seq.tasks.clone());
            let protos = synthesize_prototypes(&seq.class_means, &c).unwrap();
            let pbytes = encode_prototypes(&protos).unwrap();
            prop_assert_eq!(decode_prototypes(&pbytes).unwrap(), protos);
        }
    }

    #[test]
    fn file_round_trip() {
        let seq = generate_task_sequence(&config(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.zslb");
        write_embedding_file(&seq.tasks, &path).unwrap();
        assert_eq!(load_embedding_file(&path).unwrap(), seq.tasks);
    }

    #[test]
    fn altered_magic_reports_offset_zero() {
        let seq = generate_task_sequence(&config(1)).unwrap();
        let mut bytes = encode_embeddings(&seq.tasks).unwrap();
        bytes[1] = b'X';
        match decode_embeddings(&bytes) {
            Err(DataError::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_version_is_a_format_error() {
        let seq = generate_task_sequence(&config(1)).unwrap();
        let mut bytes = encode_embeddings(&seq.tasks).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_embeddings(&bytes), Err(DataError::Format { offset: 4, .. })));
    }

    #[test]
    fn truncated_final_record_names_the_slide() {
        let seq = generate_task_sequence(&config(1)).unwrap();
        let mut bytes = encode_embeddings(&seq.tasks).unwrap();
        bytes.truncate(bytes.len() - 7);
        let last_test = seq.tasks[1].test.len() - 1;
        match decode_embeddings(&bytes) {
            Err(DataError::Truncated {
                task: 1,
                split: "test",
                slide,
                ..
            }) => assert_eq!(slide, last_test),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let seq = generate_task_sequence(&config(1)).unwrap();
        let mut bytes = encode_embeddings(&seq.tasks).unwrap();
        bytes.push(0);
        assert!(matches!(decode_embeddings(&bytes), Err(DataError::Format { .. })));
    }

    #[test]
    fn mixed_dims_rejected_on_write() {
        let mut seq = generate_task_sequence(&config(1)).unwrap();
        seq.tasks[1].train[0].regions[0].embedding.push(0.0);
        assert!(matches!(
            encode_embeddings(&seq.tasks),
            Err(DataError::Consistency(_))
        ));
    }

    #[test]
    fn local_class_outside_task_rejected_on_load() {
        let seq = generate_task_sequence(&config(1)).unwrap();
        let mut bytes = encode_embeddings(&seq.tasks).unwrap();
        // First slide's local_class sits after: header(16) + class_count(4) + train count(4) + id_len(2) + id.
        let id_len = seq.tasks[0].train[0].slide_id.len();
        let at = 16 + 4 + 4 + 2 + id_len;
        bytes[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(DataError::Consistency(_))));
    }

    #[test]
    fn prototype_magic_checked() {
        let mut bytes = encode_prototypes(&[]).unwrap();
        bytes[0] = b'Q';
        assert!(matches!(decode_prototypes(&bytes), Err(DataError::Format { offset: 0, .. })));
    }
}
