//! Fixed-capacity rehearsal buffer with reservoir replacement, and its
//! snapshot file.
//!
//! Snapshot (`ZSLR`): `magic | version u32 | kind u8 | capacity u32 | seen_count u64
//! | dim u32` followed by item records until end of file. Each record starts with
//! `task_index u32 | global_id u32` and a slide record in the embedding-file
//! encoding; DER items append `logit_count u32 | logits f64×logit_count`,
//! region items are single-region slide records named after their source slide.

use std::path::Path;

use rand::Rng;

use crate::datagen::format::{
    check_header, decode_slide, encode_slide, put_f64s, put_u32, Reader, Short, FORMAT_VERSION,
};
use crate::datagen::{DataError, Region, SlideBag};
use crate::primitives::GlobalLabel;

pub const BUFFER_MAGIC: &[u8; 4] = b"ZSLR";
const KIND_DER: u8 = 1;
const KIND_REGION: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    seen_count: u64,
}

/// Where a reservoir draw put the incoming item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Append,
    Replace(usize),
    Discard,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            seen_count: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    /// Decides the fate of the next stream item: append while filling, then
    /// replace a uniform slot with probability `capacity / seen_count`.
    /// A zero-capacity buffer discards without touching `rng`.
    pub fn reservoir_slot(&mut self, rng: &mut impl Rng) -> Slot {
        if self.capacity == 0 {
            return Slot::Discard;
        }
        self.seen_count += 1;
        if self.items.len() < self.capacity {
            return Slot::Append;
        }
        let j = rng.random_range(0..self.seen_count);
        if (j as usize) < self.capacity {
            Slot::Replace(j as usize)
        } else {
            Slot::Discard
        }
    }

    /// Reservoir insertion; `make` only runs when the item is kept.
    pub fn reservoir_insert_with(&mut self, rng: &mut impl Rng, make: impl FnOnce() -> T) -> Slot {
        let slot = self.reservoir_slot(rng);
        match slot {
            Slot::Append => self.items.push(make()),
            Slot::Replace(i) => self.items[i] = make(),
            Slot::Discard => {}
        }
        debug_assert!(self.items.len() <= self.capacity);
        slot
    }

    pub fn reservoir_insert(&mut self, item: T, rng: &mut impl Rng) -> Slot {
        self.reservoir_insert_with(rng, || item)
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, rng: &mut impl Rng) -> Option<&T> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.random_range(0..self.items.len())])
        }
    }
}

/// A stored slide with the logits the model produced for it at storage time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItemDer {
    pub bag: SlideBag,
    pub stored_logits: Vec<f64>,
}

impl ReplayItemDer {
    pub fn label(&self) -> GlobalLabel {
        self.bag.label
    }
}

/// One region cut out of a finished task's slide.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBufferItem {
    pub region: Region,
    pub label: GlobalLabel,
    pub source_slide: String,
}

pub(crate) trait Codec: Sized {
    const KIND: u8;
    fn encode(&self, out: &mut Vec<u8>, dim: usize) -> Result<(), DataError>;
    fn decode(
        r: &mut Reader<'_>,
        dim: usize,
        task_index: usize,
        global_id: usize,
    ) -> Result<Result<Self, DataError>, Short>;
    fn label(&self) -> GlobalLabel;
    fn dim(&self) -> usize;
}

fn label_reader(task_index: usize, global_id: usize) -> impl Fn(usize) -> Option<GlobalLabel> {
    move |local_class| {
        Some(GlobalLabel {
            task_index,
            local_class,
            global_id,
        })
    }
}

impl Codec for ReplayItemDer {
    const KIND: u8 = KIND_DER;

    fn encode(&self, out: &mut Vec<u8>, dim: usize) -> Result<(), DataError> {
        encode_slide(out, &self.bag, dim)?;
        put_u32(out, self.stored_logits.len() as u32);
        put_f64s(out, &self.stored_logits);
        Ok(())
    }

    fn decode(
        r: &mut Reader<'_>,
        dim: usize,
        task_index: usize,
        global_id: usize,
    ) -> Result<Result<Self, DataError>, Short> {
        let bag = match decode_slide(r, dim, label_reader(task_index, global_id))? {
            Ok(b) => b,
            Err(e) => return Ok(Err(e)),
        };
        let n = r.u32()? as usize;
        let stored_logits = r.f64s(n)?;
        Ok(Ok(Self { bag, stored_logits }))
    }

    fn label(&self) -> GlobalLabel {
        self.bag.label
    }

    fn dim(&self) -> usize {
        self.bag.dim()
    }
}

impl Codec for RegionBufferItem {
    const KIND: u8 = KIND_REGION;

    fn encode(&self, out: &mut Vec<u8>, dim: usize) -> Result<(), DataError> {
        let as_slide = SlideBag {
            slide_id: self.source_slide.clone(),
            label: self.label,
            regions: vec![self.region.clone()],
        };
        encode_slide(out, &as_slide, dim)
    }

    fn decode(
        r: &mut Reader<'_>,
        dim: usize,
        task_index: usize,
        global_id: usize,
    ) -> Result<Result<Self, DataError>, Short> {
        let mut bag = match decode_slide(r, dim, label_reader(task_index, global_id))? {
            Ok(b) => b,
            Err(e) => return Ok(Err(e)),
        };
        if bag.regions.len() != 1 {
            return Ok(Err(DataError::Consistency(format!(
                "region item from {} holds {} regions",
                bag.slide_id,
                bag.regions.len()
            ))));
        }
        Ok(Ok(Self {
            region: bag.regions.pop().expect("one region"),
            label: bag.label,
            source_slide: bag.slide_id,
        }))
    }

    fn label(&self) -> GlobalLabel {
        self.label
    }

    fn dim(&self) -> usize {
        self.region.dim()
    }
}

/// Either kind of buffer, as stored in a snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub enum BufferSnapshot {
    Der(ReplayBuffer<ReplayItemDer>),
    Regions(ReplayBuffer<RegionBufferItem>),
}

impl BufferSnapshot {
    pub fn len(&self) -> usize {
        match self {
            BufferSnapshot::Der(b) => b.len(),
            BufferSnapshot::Regions(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn encode_items<T: Codec>(buffer: &ReplayBuffer<T>) -> Result<Vec<u8>, DataError> {
    let dim = buffer.items.first().map_or(0, T::dim);
    let mut out = Vec::new();
    out.extend_from_slice(BUFFER_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.push(T::KIND);
    put_u32(&mut out, buffer.capacity as u32);
    out.extend_from_slice(&buffer.seen_count.to_le_bytes());
    put_u32(&mut out, dim as u32);
    for item in &buffer.items {
        let label = item.label();
        put_u32(&mut out, label.task_index as u32);
        put_u32(&mut out, label.global_id as u32);
        item.encode(&mut out, dim)?;
    }
    Ok(out)
}

fn decode_items<T: Codec>(mut r: Reader<'_>) -> Result<ReplayBuffer<T>, DataError> {
    let short = |s: Short| DataError::Format {
        offset: s.offset,
        reason: "truncated buffer header".into(),
    };
    let capacity = r.u32().map_err(short)? as usize;
    let seen_count = r.u64().map_err(short)?;
    let dim = r.u32().map_err(short)? as usize;
    let mut items = Vec::new();
    while r.remaining() > 0 {
        let index = items.len();
        let truncated = |s: Short| DataError::Format {
            offset: s.offset,
            reason: format!("truncated buffer item {index}"),
        };
        let task_index = r.u32().map_err(truncated)? as usize;
        let global_id = r.u32().map_err(truncated)? as usize;
        items.push(T::decode(&mut r, dim, task_index, global_id).map_err(truncated)??);
    }
    if items.len() > capacity || (items.len() as u64) > seen_count {
        return Err(DataError::Consistency(format!(
            "{} items exceed capacity {capacity} or seen count {seen_count}",
            items.len()
        )));
    }
    Ok(ReplayBuffer {
        capacity,
        items,
        seen_count,
    })
}

pub fn encode_buffer(snapshot: &BufferSnapshot) -> Result<Vec<u8>, DataError> {
    match snapshot {
        BufferSnapshot::Der(b) => encode_items(b),
        BufferSnapshot::Regions(b) => encode_items(b),
    }
}

pub fn decode_buffer(buf: &[u8]) -> Result<BufferSnapshot, DataError> {
    let mut r = Reader::new(buf);
    check_header(&mut r, BUFFER_MAGIC)?;
    let at = r.offset();
    let kind = r.u8().map_err(|s| DataError::Format {
        offset: s.offset,
        reason: "missing buffer kind".into(),
    })?;
    match kind {
        KIND_DER => Ok(BufferSnapshot::Der(decode_items(r)?)),
        KIND_REGION => Ok(BufferSnapshot::Regions(decode_items(r)?)),
        other => Err(DataError::Format {
            offset: at,
            reason: format!("unknown buffer kind {other}"),
        }),
    }
}

pub fn write_buffer(snapshot: &BufferSnapshot, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, encode_buffer(snapshot)?)?;
    Ok(())
}

pub fn load_buffer(path: impl AsRef<Path>) -> Result<BufferSnapshot, DataError> {
    decode_buffer(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn fill_phase_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(5);
        for i in 0..5 {
            assert_eq!(b.reservoir_insert(i, &mut rng), Slot::Append);
        }
        assert_eq!(b.items(), &[0, 1, 2, 3, 4]);
        assert_eq!(b.seen_count(), 5);
    }

    #[test]
    fn capacity_never_exceeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::new(7);
        for i in 0..10_000 {
            b.reservoir_insert(i, &mut rng);
            assert!(b.len() <= 7);
            assert!(b.seen_count() >= b.len() as u64);
        }
    }

    #[test]
    fn zero_capacity_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::<u32>::new(0);
        assert_eq!(b.reservoir_insert(3, &mut rng), Slot::Discard);
        assert!(b.is_empty());
        assert!(b.sample(&mut rng).is_none());
    }

    #[test]
    fn retention_is_uniform() {
        // 5000 trials of a 1000-item stream into capacity 10; expected count 50 per item.
        let (trials, stream, capacity) = (5000, 1000usize, 10);
        let mut counts = vec![0u32; stream];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..trials {
            let mut b = ReplayBuffer::new(capacity);
            for i in 0..stream {
                b.reservoir_insert(i, &mut rng);
            }
            for &i in b.items() {
                counts[i] += 1;
            }
        }
        let expected = (trials * capacity) as f64 / stream as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new((stream - 1) as f64).unwrap().inverse_cdf(1.0 - 0.001);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    fn label(t: usize, c: usize, g: usize) -> GlobalLabel {
        GlobalLabel {
            task_index: t,
            local_class: c,
            global_id: g,
        }
    }

    fn region(v: f32) -> Region {
        Region {
            embedding: vec![v, v + 1.0, v + 2.0],
            patches: vec![v; 6],
        }
    }

    #[test]
    fn der_snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = ReplayBuffer::new(3);
        for i in 0..7 {
            let item = ReplayItemDer {
                bag: SlideBag {
                    slide_id: format!("s{i}"),
                    label: label(1, i % 2, 2 + i % 2),
                    regions: vec![region(i as f32), region(-(i as f32))],
                },
                stored_logits: (0..=i % 4).map(|k| k as f64 * 0.1 - 1.0 / 3.0).collect(),
            };
            b.reservoir_insert(item, &mut rng);
        }
        let snapshot = BufferSnapshot::Der(b);
        let mut bytes = encode_buffer(&snapshot).unwrap();
        assert_eq!(&bytes[..4], BUFFER_MAGIC);
        assert_eq!(decode_buffer(&bytes).unwrap(), snapshot);
        assert!(matches!(
            decode_buffer(&bytes[..bytes.len() - 3]),
            Err(DataError::Format { .. })
        ));
        bytes[8] = 7;
        assert!(matches!(decode_buffer(&bytes), Err(DataError::Format { offset: 8, .. })));
    }

    #[test]
    fn region_snapshot_round_trip_through_a_file() {
        let mut b = ReplayBuffer::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..4 {
            b.reservoir_insert(
                RegionBufferItem {
                    region: region(i as f32),
                    label: label(0, i % 2, i % 2),
                    source_slide: format!("slide-{i}"),
                },
                &mut rng,
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.zslr");
        let snapshot = BufferSnapshot::Regions(b);
        write_buffer(&snapshot, &path).unwrap();
        assert_eq!(load_buffer(&path).unwrap(), snapshot);
        let empty = BufferSnapshot::Regions(ReplayBuffer::new(9));
        assert_eq!(decode_buffer(&encode_buffer(&empty).unwrap()).unwrap(), empty);
    }
}
