//! Label maps (indexed object masks) and binary masks.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-pixel object ids; 0 is background. Matches the indexed-PNG data
/// model used by the annotation files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidShape(format!(
                "label map extents must be >= 1, got {width}x{height}"
            )));
        }
        if ids.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "label map {width}x{height} wants {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(LabelMap { width, height, ids })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// Distinct nonzero ids, ascending.
    pub fn object_ids(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        (1..=255u8).filter(|&id| seen[id as usize]).collect()
    }

    pub fn binary_mask(&self, id: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.ids.iter().map(|&v| v == id).collect(),
        }
    }

    /// 1×H×W tensor with 1.0 where the pixel carries `id`.
    pub fn to_gate_tensor(&self, id: u8) -> Tensor {
        let data = self
            .ids
            .iter()
            .map(|&v| if v == id { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[1, self.height, self.width], data).expect("label map extents")
    }
}

/// Foreground/background mask at pixel resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "mask {width}x{height} wants {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| !v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_ids_are_sparse_and_sorted() {
        let m = LabelMap::new(3, 2, vec![0, 3, 0, 1, 3, 0]).unwrap();
        assert_eq!(m.object_ids(), vec![1, 3]);
        assert_eq!(m.get(1, 0), 3);
        let b = m.binary_mask(3);
        assert_eq!(b.count(), 2);
        let g = m.to_gate_tensor(1);
        assert_eq!(g.shape(), &[1, 2, 3]);
        assert_eq!(g.data()[3], 1.0);
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(LabelMap::new(0, 2, vec![]).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
    }
}
