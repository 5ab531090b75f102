use std::collections::HashMap;
use std::sync::Arc;

use super::{DiffError, Result};

/// One named, shape-tagged segment of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl SegmentSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        SegmentSpec { name: name.into(), rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Fixed ordering of named segments; shared by every vector with this layout.
#[derive(Debug)]
pub struct ParamLayout {
    segments: Vec<SegmentSpec>,
    offsets: Vec<usize>,
    total: usize,
    index: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn new(segments: Vec<SegmentSpec>) -> Arc<Self> {
        let mut offsets = Vec::with_capacity(segments.len());
        let mut index = HashMap::with_capacity(segments.len());
        let mut total = 0;
        for (i, seg) in segments.iter().enumerate() {
            assert!(
                index.insert(seg.name.clone(), i).is_none(),
                "duplicate segment name `{}`",
                seg.name
            );
            offsets.push(total);
            total += seg.len();
        }
        Arc::new(ParamLayout { segments, offsets, total, index })
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, i: usize) -> &SegmentSpec {
        &self.segments[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn segments(&self) -> impl Iterator<Item = &SegmentSpec> {
        self.segments.iter()
    }

    /// Structural equality; cheap pointer check first.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || self.segments == other.segments
    }
}

/// Flat `f64` storage over a shared [`ParamLayout`].
#[derive(Clone, Debug)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.total_len()];
        ParamVector { layout, data }
    }

    pub fn from_flat(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(DiffError::LayoutMismatch(format!(
                "flat data length {} does not match layout length {}",
                data.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { layout, data })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let i = self
            .layout
            .position(name)
            .unwrap_or_else(|| panic!("no segment `{name}`"));
        let off = self.layout.offset(i);
        &self.data[off..off + self.layout.segment(i).len()]
    }

    pub fn segment_mut(&mut self, name: &str) -> &mut [f64] {
        let i = self
            .layout
            .position(name)
            .unwrap_or_else(|| panic!("no segment `{name}`"));
        let off = self.layout.offset(i);
        let len = self.layout.segment(i).len();
        &mut self.data[off..off + len]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout.same_as(&other.layout)
    }

    fn check_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(DiffError::LayoutMismatch(format!("{what} requires identical layouts")))
        }
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other, "dot")?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// First segment containing a non-finite entry, if any.
    pub fn first_nonfinite_segment(&self) -> Option<&str> {
        for i in 0..self.layout.num_segments() {
            let off = self.layout.offset(i);
            let seg = self.layout.segment(i);
            if self.data[off..off + seg.len()].iter().any(|v| !v.is_finite()) {
                return Some(&seg.name);
            }
        }
        None
    }

    /// FNV-1a over the little-endian bytes; used for freeze checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

impl PartialEq for ParamVector {
    fn eq(&self, other: &Self) -> bool {
        self.same_layout(other) && self.data == other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Arc<ParamLayout> {
        ParamLayout::new(vec![SegmentSpec::new("a", 2, 3), SegmentSpec::new("b", 1, 4)])
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let l = layout();
        let mut v = ParamVector::zeros(l.clone());
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = i as f64 * 0.5 - 1.0;
        }
        let flat = v.data().to_vec();
        let back = ParamVector::from_flat(l, flat).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn segment_views_align_with_offsets() {
        let l = layout();
        let mut v = ParamVector::zeros(l);
        v.segment_mut("b")[2] = 7.0;
        assert_eq!(v.data()[6 + 2], 7.0);
        assert_eq!(v.segment("a").len(), 6);
    }

    #[test]
    fn arithmetic_requires_same_layout() {
        let v = ParamVector::zeros(layout());
        let other = ParamVector::zeros(ParamLayout::new(vec![SegmentSpec::new("a", 2, 2)]));
        assert!(v.clone().add_scaled(&other, 1.0).is_err());
        assert!(v.dot(&other).is_err());
    }

    #[test]
    fn duplicate_segment_names_rejected() {
        let res = std::panic::catch_unwind(|| {
            ParamLayout::new(vec![SegmentSpec::new("x", 1, 1), SegmentSpec::new("x", 1, 1)])
        });
        assert!(res.is_err());
    }

    #[test]
    fn nonfinite_segment_is_named() {
        let mut v = ParamVector::zeros(layout());
        v.segment_mut("b")[0] = f64::NAN;
        assert_eq!(v.first_nonfinite_segment(), Some("b"));
    }
}
