//! Per-video memory: reference-frame keys shared by all objects, per-object
//! values, and per-object instance heads, with a fixed frame capacity.
//!
//! The first reference frame is pinned. When a write pushes the frame count
//! past the capacity, the oldest other frame goes, together with its value
//! rows and any head generated from it.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::instance_stream::{InstanceMemory, SegHead};
use crate::pixel_stream::PixelMemory;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What one reference frame contributes for one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry<T> {
    /// Value tokens `HW × C_v` for this object.
    pub values: Tensor<T>,
    /// `Some` when the object is present in the reference mask.
    pub head: Option<SegHead<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoState<T> {
    objects: Vec<usize>,
    capacity: usize,
    /// Video frame index of every memory frame, oldest first.
    frames: Vec<usize>,
    keys: Vec<Tensor<T>>,
    /// `[object][memory frame]`.
    entries: Vec<Vec<ObjectEntry<T>>>,
    /// Last frame written or segmented.
    pub frame_index: usize,
}

impl<T: Scalar> VideoState<T> {
    /// An empty state for the given object ids, holding at most `capacity`
    /// memory frames.
    pub fn new(objects: Vec<usize>, capacity: usize) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::Input("a video needs at least one annotated object".into()));
        }
        if capacity < 1 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        let n = objects.len();
        Ok(VideoState {
            objects,
            capacity,
            frames: Vec::new(),
            keys: Vec::new(),
            entries: (0..n).map(|_| Vec::new()).collect(),
            frame_index: 0,
        })
    }

    pub fn objects(&self) -> &[usize] {
        &self.objects
    }

    pub fn is_initialized(&self) -> bool {
        !self.frames.is_empty()
    }

    pub fn memory_frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends reference frame `frame` (keys `HW × C_k`) with one entry per
    /// object, in the order of [`VideoState::objects`], then evicts if over
    /// capacity.
    pub fn write_reference(&mut self, frame: usize, keys: Tensor<T>, entries: Vec<ObjectEntry<T>>) -> Result<()> {
        if entries.len() != self.objects.len() {
            return Err(Error::dim(
                "write_reference",
                alloc::format!("{} entries for {} objects", entries.len(), self.objects.len()),
            ));
        }
        let (rows, _) = keys.dims2("write_reference")?;
        if let Some(k0) = self.keys.first() {
            if k0.shape() != keys.shape() {
                return Err(Error::dim("write_reference", alloc::format!("keys {:?} vs {:?}", keys.shape(), k0.shape())));
            }
        }
        for e in &entries {
            if e.values.shape()[0] != rows {
                return Err(Error::dim("write_reference", alloc::format!("values {:?} for {rows} rows", e.values.shape())));
            }
        }
        self.frames.push(frame);
        self.keys.push(keys);
        for (slot, e) in self.entries.iter_mut().zip(entries) {
            slot.push(e);
        }
        self.frame_index = frame;
        while self.frames.len() > self.capacity.max(1) {
            self.evict()?;
        }
        Ok(())
    }

    /// Drops the oldest memory frame other than the first.
    pub fn evict(&mut self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Sequencing("nothing to evict besides the pinned first frame"));
        }
        self.frames.remove(1);
        self.keys.remove(1);
        for e in &mut self.entries {
            e.remove(1);
        }
        Ok(())
    }

    /// Pixel memory of object slot `obj`: all frames' keys and that
    /// object's values, stacked oldest first.
    pub fn pixel_memory(&self, obj: usize) -> Result<PixelMemory<T>> {
        if self.frames.is_empty() {
            return Ok(PixelMemory::empty());
        }
        let keys: Vec<&Tensor<T>> = self.keys.iter().collect();
        let values: Vec<&Tensor<T>> = self.entries[obj].iter().map(|e| &e.values).collect();
        PixelMemory::new(Tensor::vstack(&keys)?, Tensor::vstack(&values)?, self.frames.len())
    }

    /// Stacked keys of all memory frames.
    pub fn keys(&self) -> Result<Tensor<T>> {
        let keys: Vec<&Tensor<T>> = self.keys.iter().collect();
        if keys.is_empty() {
            return Err(Error::EmptyMemory);
        }
        Tensor::vstack(&keys)
    }

    /// Entries of object slot `obj`, oldest first.
    pub fn entries(&self, obj: usize) -> &[ObjectEntry<T>] {
        &self.entries[obj]
    }

    /// Heads of object slot `obj` as an [`InstanceMemory`].
    pub fn instance_memory(&self, obj: usize) -> InstanceMemory<T> {
        let mut mem = InstanceMemory::new();
        for head in self.entries[obj].iter().filter_map(|e| e.head.clone()) {
            mem.push(head).expect("heads are validated on creation");
        }
        mem
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance_stream::HEAD_PARAMS;

    fn entry(frame: usize, present: bool) -> ObjectEntry<f64> {
        ObjectEntry {
            values: Tensor::full(&[4, 2], frame as f64),
            head: present.then(|| SegHead {
                theta: Tensor::zeros(&[1, HEAD_PARAMS]),
                centroid: (0.0, 0.0),
                source_frame: frame,
            }),
        }
    }

    fn keys(frame: usize) -> Tensor<f64> {
        Tensor::full(&[4, 3], frame as f64)
    }

    #[test]
    fn first_write_and_absence() {
        let mut s = VideoState::new(alloc::vec![1, 2], 8).unwrap();
        assert!(!s.is_initialized());
        s.write_reference(0, keys(0), alloc::vec![entry(0, true), entry(0, true)]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.instance_memory(0).len(), 1);
        s.write_reference(5, keys(5), alloc::vec![entry(5, true), entry(5, false)]).unwrap();
        assert_eq!(s.instance_memory(0).len(), 2);
        assert_eq!(s.instance_memory(1).len(), 1);
        assert_eq!(s.pixel_memory(1).unwrap().rows(), 8);
    }

    #[test]
    fn eviction_keeps_first_frame() {
        let mut s = VideoState::new(alloc::vec![1], 3).unwrap();
        for f in [1, 5, 10, 15] {
            s.write_reference(f, keys(f), alloc::vec![entry(f, true)]).unwrap();
        }
        assert_eq!(s.memory_frames(), &[1, 10, 15]);
        assert_eq!(s.pixel_memory(0).unwrap().rows(), 3 * 4);
        let heads: Vec<usize> = s.instance_memory(0).heads().iter().map(|h| h.source_frame).collect();
        assert_eq!(heads, [1, 10, 15]);
        for f in 20..40 {
            s.write_reference(f, keys(f), alloc::vec![entry(f, f % 2 == 0)]).unwrap();
            assert_eq!(s.memory_frames()[0], 1);
            assert!(s.len() <= 3);
        }
        let mut one = VideoState::new(alloc::vec![1], 3).unwrap();
        one.write_reference(0, keys(0), alloc::vec![entry(0, true)]).unwrap();
        assert!(one.evict().is_err());
    }

    #[test]
    fn rejects_misaligned_writes() {
        let mut s = VideoState::new(alloc::vec![1], 3).unwrap();
        assert!(s.write_reference(0, keys(0), alloc::vec![]).is_err());
        s.write_reference(0, keys(0), alloc::vec![entry(0, true)]).unwrap();
        assert!(s.write_reference(1, Tensor::zeros(&[5, 3]), alloc::vec![entry(1, true)]).is_err());
        assert!(VideoState::<f64>::new(alloc::vec![], 3).is_err());
    }
}
