//! Oracle segmentation, mIoU, and region color statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{contract, Result};
use crate::layout::LabelMap;
use crate::netpbm;

fn palette_values(palette: &[(u8, [u8; 3])]) -> Vec<(u8, [f64; 3])> {
    let mut p: Vec<(u8, [f64; 3])> = palette.iter().map(|(id, rgb)| (*id, rgb.map(netpbm::from_byte))).collect();
    p.sort_by_key(|(id, _)| *id);
    p
}

fn nearest(values: &[(u8, [f64; 3])], px: [f64; 3]) -> u8 {
    let mut best = (f64::INFINITY, 0u8);
    for (id, c) in values {
        let d: f64 = (0..3).map(|k| (px[k] - c[k]).powi(2)).sum();
        if d < best.0 {
            best = (d, *id);
        }
    }
    best.1
}

/// Palette class nearest to an RGB triple in `[-1, 1]`; ties go to the
/// lowest class id.
pub fn nearest_class(rgb: [f64; 3], palette: &[(u8, [u8; 3])]) -> Result<u8> {
    if palette.is_empty() {
        return Err(contract("empty palette"));
    }
    Ok(nearest(&palette_values(palette), rgb))
}

/// Labels every pixel with its nearest palette class.
pub fn oracle_segment(image: &Image, palette: &[(u8, [u8; 3])]) -> Result<LabelMap> {
    if palette.is_empty() {
        return Err(contract("empty palette"));
    }
    let values = palette_values(palette);
    let ids = (0..image.width * image.height).map(|p| nearest(&values, image.pixel(p))).collect();
    LabelMap::new(image.width, image.height, ids)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

/// Streaming per-class intersection/union counts. Accumulators merge by
/// addition, so sharded evaluation matches a single pass exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub classes: BTreeMap<u8, ClassCounts>,
    pub correct: u64,
    pub pixels: u64,
    pub images: u64,
}

impl ConfusionAccumulator {
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(contract(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            if p == g {
                self.correct += 1;
                let c = self.classes.entry(p).or_default();
                c.intersection += 1;
                c.union += 1;
            } else {
                self.classes.entry(p).or_default().union += 1;
                self.classes.entry(g).or_default().union += 1;
            }
        }
        self.pixels += gt.ids.len() as u64;
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (id, c) in &other.classes {
            let e = self.classes.entry(*id).or_default();
            e.intersection += c.intersection;
            e.union += c.union;
        }
        self.correct += other.correct;
        self.pixels += other.pixels;
        self.images += other.images;
    }

    /// IoU of every class seen in either map.
    pub fn per_class(&self) -> BTreeMap<u8, f64> {
        self.classes
            .iter()
            .filter(|(_, c)| c.union > 0)
            .map(|(id, c)| (*id, c.intersection as f64 / c.union as f64))
            .collect()
    }

    pub fn report(&self) -> EvalReport {
        let per_class = self.per_class();
        let miou = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
        let pixel_acc = if self.pixels == 0 { 0.0 } else { self.correct as f64 / self.pixels as f64 };
        EvalReport { miou, per_class, pixel_acc, n_images: self.images as usize }
    }
}

/// Per-class IoU and their mean over classes present in either map.
#[derive(Debug, Clone, PartialEq)]
pub struct Miou {
    pub per_class: BTreeMap<u8, f64>,
    pub mean: f64,
}

pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<Miou> {
    let mut acc = ConfusionAccumulator::default();
    acc.add(pred, gt)?;
    let r = acc.report();
    Ok(Miou { per_class: r.per_class, mean: r.miou })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class: BTreeMap<u8, f64>,
    pub pixel_acc: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    pub mean: [f64; 3],
    pub variance: [f64; 3],
    pub pixels: usize,
}

impl RegionStats {
    pub fn distance(&self, other: &RegionStats) -> f64 {
        rgb_distance(self.mean, other.mean)
    }
}

pub fn rgb_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Mean and population variance of each channel over the masked pixels.
pub fn region_stats(image: &Image, mask: &[bool]) -> Result<RegionStats> {
    if mask.len() != image.width * image.height {
        return Err(contract(format!("mask of {} pixels for a {}x{} image", mask.len(), image.width, image.height)));
    }
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(p, _)| p).collect();
    if idx.is_empty() {
        return Err(contract("region statistics of an empty mask"));
    }
    let n = idx.len() as f64;
    let mut mean = [0.0; 3];
    for &p in &idx {
        let px = image.pixel(p);
        (0..3).for_each(|k| mean[k] += px[k]);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = [0.0; 3];
    for &p in &idx {
        let px = image.pixel(p);
        (0..3).for_each(|k| variance[k] += (px[k] - mean[k]).powi(2));
    }
    variance.iter_mut().for_each(|v| *v /= n);
    Ok(RegionStats { mean, variance, pixels: idx.len() })
}
