//! Label maps and their expansion into per-token binary layout channels.

use std::collections::BTreeSet;
use std::path::Path;

use fsn_tensor::Tensor;

use crate::error::{contract, Error, Result};
use crate::netpbm::{self, Kind, Raster};
use crate::textcond::{Binding, Prompt};

/// Pixel value for "no class": contributes no concept and no channel.
pub const UNLABELED: u8 = 255;

/// H×W raster of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || ids.len() != width * height {
            return Err(contract(format!("label map {width}x{height} with {} ids", ids.len())));
        }
        Ok(Self { width, height, ids })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self { width, height, ids: vec![class; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    /// Distinct labeled classes, ascending.
    pub fn classes(&self) -> BTreeSet<u8> {
        self.ids.iter().copied().filter(|&c| c != UNLABELED).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.ids.iter().filter(|&&c| c == class).count()
    }

    /// Boolean mask of the pixels carrying `class`.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.ids.iter().map(|&c| c == class).collect()
    }
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let r = netpbm::read(path, Kind::Gray)?;
    LabelMap::new(r.width, r.height, r.bytes)
}

pub fn save_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    netpbm::write(path, &Raster { kind: Kind::Gray, width: map.width, height: map.height, bytes: map.ids.clone() })
}

/// C×H×W binary channels, one per prompt position.
#[derive(Debug, Clone)]
pub struct ConceptLayout {
    pub channels: Tensor,
}

impl ConceptLayout {
    pub fn from_channels(channels: Tensor) -> Result<Self> {
        if channels.rank() != 3 {
            return Err(contract(format!("layout must be C x H x W, got {:?}", channels.shape())));
        }
        if channels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(contract("layout values must be 0 or 1"));
        }
        Ok(Self { channels })
    }

    /// All-ones layout: every token attends everywhere.
    pub fn ones(tokens: usize, height: usize, width: usize) -> Self {
        Self { channels: Tensor::ones(&[tokens, height, width]) }
    }

    pub fn tokens(&self) -> usize {
        self.channels.dim(0)
    }

    pub fn height(&self) -> usize {
        self.channels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.channels.dim(2)
    }

    /// Row-major H×W values of channel `k`.
    pub fn channel(&self, k: usize) -> Vec<f64> {
        let hw = self.height() * self.width();
        self.channels.data()[k * hw..(k + 1) * hw].to_vec()
    }
}

/// Channel k is the indicator of `class(k)` for concept-bound tokens and
/// all-ones for Global tokens. A concept whose class is absent from the map
/// yields an all-zero channel and a warning.
pub fn expand_layout(label_map: &LabelMap, prompt: &Prompt) -> Result<ConceptLayout> {
    let hw = label_map.width * label_map.height;
    let mut data = Vec::with_capacity(prompt.len() * hw);
    for binding in &prompt.bindings {
        match *binding {
            Binding::Global => data.extend(std::iter::repeat_n(1.0, hw)),
            Binding::Concept(class) => {
                if class == UNLABELED {
                    return Err(Error::MissingConcept(class));
                }
                let before = data.len();
                data.extend(label_map.ids.iter().map(|&c| if c == class { 1.0 } else { 0.0 }));
                if data[before..].iter().all(|&v| v == 0.0) {
                    log::warn!("class {class} is bound in the prompt but absent from the layout");
                }
            }
        }
    }
    Ok(ConceptLayout { channels: Tensor::new(data, &[prompt.len(), label_map.height, label_map.width])? })
}

/// Nearest-neighbor resize of every channel.
pub fn resize_layout(layout: &ConceptLayout, height: usize, width: usize) -> Result<ConceptLayout> {
    if (height, width) == (layout.height(), layout.width()) {
        return Ok(layout.clone());
    }
    Ok(ConceptLayout { channels: layout.channels.nearest_resize(height, width)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcond::TokenId;

    fn prompt(bindings: Vec<Binding>) -> Prompt {
        Prompt { token_ids: (0..bindings.len() as TokenId).collect(), bindings }
    }

    #[test]
    fn expand_two_by_two() {
        use Binding::*;
        let lm = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let l = expand_layout(&lm, &prompt(vec![Global, Concept(0), Concept(1), Global])).unwrap();
        assert_eq!(l.channels.shape(), &[4, 2, 2]);
        assert_eq!(l.channel(0), vec![1.0; 4]);
        assert_eq!(l.channel(1), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(l.channel(2), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(l.channel(3), vec![1.0; 4]);
    }

    #[test]
    fn shared_concept_gives_identical_channels() {
        use Binding::*;
        let lm = LabelMap::new(3, 1, vec![7, 2, 7]).unwrap();
        let l = expand_layout(&lm, &prompt(vec![Global, Concept(7), Concept(7), Concept(2)])).unwrap();
        assert_eq!(l.channel(1), l.channel(2));
    }

    #[test]
    fn single_class_channel_matches_global() {
        use Binding::*;
        let lm = LabelMap::filled(3, 3, 4);
        let l = expand_layout(&lm, &prompt(vec![Global, Concept(4), Global])).unwrap();
        assert_eq!(l.channel(1), l.channel(0));
    }

    #[test]
    fn absent_class_yields_empty_channel() {
        let lm = LabelMap::filled(2, 2, 0);
        let l = expand_layout(&lm, &prompt(vec![Binding::Global, Binding::Concept(5)])).unwrap();
        assert_eq!(l.channel(1), vec![0.0; 4]);
    }

    #[test]
    fn resize_identity_and_split() {
        let lm = LabelMap::new(4, 4, [0, 0, 1, 1].repeat(4)).unwrap();
        let l = expand_layout(&lm, &prompt(vec![Binding::Concept(0), Binding::Concept(1)])).unwrap();
        let same = resize_layout(&l, 4, 4).unwrap();
        assert_eq!(same.channels.to_vec(), l.channels.to_vec());
        let small = resize_layout(&l, 2, 2).unwrap();
        assert_eq!(small.channel(0), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(small.channel(1), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn tiny_region_can_vanish() {
        let mut ids = vec![0u8; 64];
        ids[9] = 3;
        let lm = LabelMap::new(8, 8, ids).unwrap();
        let l = expand_layout(&lm, &prompt(vec![Binding::Global, Binding::Concept(0), Binding::Concept(3)])).unwrap();
        let r = resize_layout(&l, 1, 1).unwrap();
        assert_eq!(r.channel(2), vec![0.0]);
        assert_eq!(r.channel(0), vec![1.0]);
    }

    #[test]
    fn pgm_roundtrip_and_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let lm = LabelMap::new(3, 2, vec![0, 1, 2, 2, 1, 0]).unwrap();
        save_label_map(&lm, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len() - b"P5\n3 2\n255\n".len(), 6);
        assert_eq!(load_label_map(&path).unwrap(), lm);

        std::fs::write(&path, b"P2\n1 1\n255\n0\n").unwrap();
        assert!(matches!(load_label_map(&path), Err(Error::Format(_))));
    }
}
