//! Procedural scenes of flat-shaded shapes, their captions, and dataset
//! manifests.
//!
//! Every (shape, color) combination is its own semantic class and owns one
//! exact RGB color, so the rendered image determines its label map.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layout::LabelMap;
use crate::netpbm::{self, Kind, Raster};
use crate::textcond::{Specials, Vocabulary};

pub const CANVAS: usize = 32;
pub const BACKGROUND: u8 = 0;
pub const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Byte levels used for "on" and "off" color components.
    fn levels(self) -> (u8, u8) {
        match self {
            Shape::Square => (255, 0),
            Shape::Circle => (213, 43),
            Shape::Triangle => (170, 85),
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta, Color::White, Color::Black];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    fn components(self) -> [bool; 3] {
        match self {
            Color::Red => [true, false, false],
            Color::Green => [false, true, false],
            Color::Blue => [false, false, true],
            Color::Yellow => [true, true, false],
            Color::Cyan => [false, true, true],
            Color::Magenta => [true, false, true],
            Color::White => [true, true, true],
            Color::Black => [false, false, false],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Combo {
    pub shape: Shape,
    pub color: Color,
}

impl Combo {
    pub fn all() -> Vec<Combo> {
        Shape::ALL.iter().flat_map(|&shape| Color::ALL.iter().map(move |&color| Combo { shape, color })).collect()
    }

    pub fn class_id(self) -> u8 {
        1 + 8 * self.shape as u8 + self.color as u8
    }

    pub fn from_class(class: u8) -> Option<Combo> {
        let k = class.checked_sub(1)?;
        let shape = *Shape::ALL.get(usize::from(k / 8))?;
        Some(Combo { shape, color: Color::ALL[usize::from(k % 8)] })
    }

    /// Flat color: the color's lit components at the shape's high level,
    /// the rest at its low level.
    pub fn rgb(self) -> [u8; 3] {
        let (hi, lo) = self.shape.levels();
        self.color.components().map(|on| if on { hi } else { lo })
    }

    pub fn words(self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }

    pub fn parse(text: &str) -> Result<Combo> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let [c, s] = words[..] else {
            return Err(contract(format!("expected \"<color> <shape>\", got {text:?}")));
        };
        let color = Color::ALL.into_iter().find(|x| x.word() == c);
        let shape = Shape::ALL.into_iter().find(|x| x.word() == s);
        match (color, shape) {
            (Some(color), Some(shape)) => Ok(Combo { shape, color }),
            _ => Err(contract(format!("unknown combo {text:?}"))),
        }
    }

    /// Parses a comma-separated list such as `"blue triangle,red circle"`.
    pub fn parse_list(text: &str) -> Result<Vec<Combo>> {
        text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(Combo::parse).collect()
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words())
    }
}

/// Class id → RGB for the background and every combo, ascending by id.
pub fn palette() -> Vec<(u8, [u8; 3])> {
    let mut p = vec![(BACKGROUND, BACKGROUND_RGB)];
    p.extend(Combo::all().into_iter().map(|c| (c.class_id(), c.rgb())));
    p.sort_by_key(|(id, _)| *id);
    p
}

/// The closed vocabulary: specials, "background", colors, shapes.
pub fn vocabulary() -> Vocabulary {
    let mut words = BTreeMap::new();
    let names = std::iter::once("background")
        .chain(Color::ALL.iter().map(|c| c.word()))
        .chain(Shape::ALL.iter().map(|s| s.word()));
    for (id, w) in (3..).zip(names) {
        words.insert(w.to_string(), id);
    }
    let mut concepts = BTreeMap::from([(BACKGROUND, "background".to_string())]);
    concepts.extend(Combo::all().into_iter().map(|c| (c.class_id(), c.words())));
    Vocabulary::new(words, concepts, Specials { pad: 0, bos: 1, eos: 2 }).expect("toy vocabulary is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub combo: Combo,
    /// Top-left corner of the bounding box.
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl SceneObject {
    /// Whether pixel `(row, col)` lies inside the shape.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as f64 + 0.5, col as f64 + 0.5);
        let (x0, y0, s) = (self.x as f64, self.y as f64, self.size as f64);
        if r < y0 || r >= y0 + s || c < x0 || c >= x0 + s {
            return false;
        }
        let (cx, cy) = (x0 + s / 2.0, y0 + s / 2.0);
        match self.combo.shape {
            Shape::Square => true,
            Shape::Circle => (r - cy).powi(2) + (c - cx).powi(2) <= (s / 2.0).powi(2),
            Shape::Triangle => (c - cx).abs() <= (r - y0) / s * (s / 2.0),
        }
    }
}

/// Objects are painted in order, later ones on top.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub combos: Vec<Combo>,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Fewest pixels an object may keep after occlusion.
    pub min_visible: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: CANVAS,
            height: CANVAS,
            combos: Combo::all(),
            max_objects: 3,
            min_size: 8,
            max_size: 16,
            min_visible: 30,
        }
    }
}

/// Samples 1..=max_objects objects with distinct combos, each keeping at
/// least `min_visible` pixels after later objects are painted over it.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<SceneSpec> {
    if cfg.combos.is_empty() {
        return Err(contract("no (shape, color) combos allowed"));
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size || cfg.max_size > cfg.width.min(cfg.height) {
        return Err(contract(format!("object sizes {}..={} do not fit the canvas", cfg.min_size, cfg.max_size)));
    }
    let want = rng.random_range(1..=cfg.max_objects.max(1));
    let mut spec = SceneSpec { width: cfg.width, height: cfg.height, objects: Vec::new() };
    const ATTEMPTS: usize = 20;
    for _ in 0..want {
        for _ in 0..ATTEMPTS {
            let combo = cfg.combos[rng.random_range(0..cfg.combos.len())];
            let size = rng.random_range(cfg.min_size..=cfg.max_size);
            let x = rng.random_range(0..=cfg.width - size);
            let y = rng.random_range(0..=cfg.height - size);
            if spec.objects.iter().any(|o| o.combo == combo) {
                continue;
            }
            spec.objects.push(SceneObject { combo, x, y, size });
            let (_, labels) = render(&spec);
            let visible = spec.objects.iter().all(|o| labels.count(o.combo.class_id()) >= cfg.min_visible);
            if visible {
                break;
            }
            spec.objects.pop();
        }
    }
    if spec.objects.is_empty() {
        // a lone object is never occluded, so this always succeeds
        let combo = cfg.combos[rng.random_range(0..cfg.combos.len())];
        spec.objects.push(SceneObject { combo, x: 0, y: 0, size: cfg.max_size });
    }
    Ok(spec)
}

/// A rendered RGB image, channel-major `[3, H, W]`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.kind != Kind::Rgb {
            return Err(contract("image raster must be RGB"));
        }
        let n = r.width * r.height;
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = netpbm::from_byte(r.bytes[3 * p + c]);
            }
        }
        Ok(Self { width: r.width, height: r.height, data })
    }

    pub fn to_raster(&self) -> Raster {
        let n = self.width * self.height;
        let mut bytes = vec![0u8; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                bytes[3 * p + c] = netpbm::to_byte(self.data[c * n + p]);
            }
        }
        Raster { kind: Kind::Rgb, width: self.width, height: self.height, bytes }
    }

    /// RGB of pixel `p` (row-major index).
    pub fn pixel(&self, p: usize) -> [f64; 3] {
        let n = self.width * self.height;
        [self.data[p], self.data[n + p], self.data[2 * n + p]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raster(&netpbm::read(path, Kind::Rgb)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        netpbm::write(path, &self.to_raster())
    }
}

/// Paints the scene over a gray background.
pub fn render(spec: &SceneSpec) -> (Image, LabelMap) {
    let (w, h) = (spec.width, spec.height);
    let mut ids = vec![BACKGROUND; w * h];
    for o in &spec.objects {
        let id = o.combo.class_id();
        let (r0, r1) = (o.y.min(h), (o.y + o.size).min(h));
        let (c0, c1) = (o.x.min(w), (o.x + o.size).min(w));
        for r in r0..r1 {
            for c in c0..c1 {
                if o.covers(r, c) {
                    ids[r * w + c] = id;
                }
            }
        }
    }
    let colors: BTreeMap<u8, [u8; 3]> = palette().into_iter().collect();
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (p, id) in ids.iter().enumerate() {
        let rgb = colors[id];
        for c in 0..3 {
            data[c * n + p] = netpbm::from_byte(rgb[c]);
        }
    }
    (Image { width: w, height: h, data }, LabelMap { width: w, height: h, ids })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionMode {
    Pretrain,
    Finetune,
}

/// Pretrain captions list objects in painting order; finetune captions are
/// the concept stack of the visible classes in ascending id order.
pub fn caption(spec: &SceneSpec, mode: CaptionMode) -> String {
    match mode {
        CaptionMode::Pretrain => spec.objects.iter().map(|o| o.combo.words()).collect::<Vec<_>>().join(" "),
        CaptionMode::Finetune => {
            let (_, labels) = render(spec);
            labels
                .classes()
                .into_iter()
                .map(|c| match Combo::from_class(c) {
                    Some(combo) => combo.words(),
                    None => "background".to_string(),
                })
                .collect::<Vec<_>>()
                .join(" ")
        }
    }
}

/// Combos named by `"<color> <shape>"` bigrams in a caption.
pub fn caption_combos(caption: &str) -> BTreeSet<Combo> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    words.windows(2).filter_map(|w| Combo::parse(&format!("{} {}", w[0], w[1])).ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

impl Split {
    pub fn caption_mode(self) -> CaptionMode {
        match self {
            Split::Pretrain => CaptionMode::Pretrain,
            Split::Finetune | Split::Test => CaptionMode::Finetune,
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub labels: String,
    pub caption: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub seed: u64,
    pub scenes: usize,
    pub holdout: Vec<Combo>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub info: DatasetInfo,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `manifest.jsonl` and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = dir.join(MANIFEST_FILE);
        std::fs::write(&m, self.to_jsonl()?).map_err(|e| Error::io(&m, e))?;
        let i = dir.join(INFO_FILE);
        std::fs::write(&i, serde_json::to_string_pretty(&self.info)?).map_err(|e| Error::io(&i, e))
    }

    /// Reads a manifest file; the info sidecar is read from the same
    /// directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Record>, _>>()?;
        let info_path = manifest.with_file_name(INFO_FILE);
        let info_text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
        Ok(Self { records, info: serde_json::from_str(&info_text)? })
    }

    /// Per split, how many records contain each combo.
    pub fn census(&self) -> BTreeMap<Split, BTreeMap<Combo, usize>> {
        let mut out: BTreeMap<Split, BTreeMap<Combo, usize>> = BTreeMap::new();
        for r in &self.records {
            let counts = out.entry(r.split).or_default();
            for c in caption_combos(&r.caption) {
                *counts.entry(c).or_default() += 1;
            }
        }
        out
    }
}

/// Drops every fine-tune record whose caption names a held-out combo.
/// Other splits are untouched.
pub fn holdout_filter(manifest: &DatasetManifest, held_out: &[Combo]) -> DatasetManifest {
    let held: BTreeSet<Combo> = held_out.iter().copied().collect();
    let records: Vec<Record> = manifest
        .records
        .iter()
        .filter(|r| r.split != Split::Finetune || caption_combos(&r.caption).is_disjoint(&held))
        .cloned()
        .collect();
    let kept: BTreeSet<Combo> =
        records.iter().filter(|r| r.split == Split::Finetune).flat_map(|r| caption_combos(&r.caption)).collect();
    let before: BTreeSet<Combo> = manifest.split(Split::Finetune).flat_map(|r| caption_combos(&r.caption)).collect();
    for shape in Shape::ALL {
        let had = before.iter().any(|c| c.shape == shape);
        if had && !kept.iter().any(|c| c.shape == shape) {
            log::warn!("holdout removes every fine-tune {} scene", shape.word());
        }
    }
    for color in Color::ALL {
        let had = before.iter().any(|c| c.color == color);
        if had && !kept.iter().any(|c| c.color == color) {
            log::warn!("holdout removes every fine-tune {} scene", color.word());
        }
    }
    let mut info = manifest.info.clone();
    info.holdout = held_out.to_vec();
    DatasetManifest { records, info }
}

/// Number of scenes reserved for the test split.
pub fn test_count(scenes: usize) -> usize {
    200.min(scenes / 10)
}

/// Split of scene `i`: the first [`test_count`] are test, the rest alternate
/// pretrain / finetune.
pub fn split_of(i: usize, scenes: usize) -> Split {
    let n_test = test_count(scenes);
    if i < n_test {
        Split::Test
    } else if (i - n_test).is_multiple_of(2) {
        Split::Pretrain
    } else {
        Split::Finetune
    }
}

/// Generates `scenes` scenes from `seed`, applies the holdout, and writes
/// images, label maps, manifest and info into `out`. Files are written only
/// for records that survive the holdout.
pub fn generate_dataset(out: &Path, scenes: usize, seed: u64, holdout: &[Combo]) -> Result<DatasetManifest> {
    use rand::SeedableRng;
    for dir in [out.to_path_buf(), out.join("images"), out.join("labels")] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = SceneConfig::default();
    let mut specs = Vec::with_capacity(scenes);
    let mut records = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let spec = gen_scene(&mut rng, &cfg)?;
        let split = split_of(i, scenes);
        records.push(Record {
            image: format!("images/{i:05}.ppm"),
            labels: format!("labels/{i:05}.pgm"),
            caption: caption(&spec, split.caption_mode()),
            split,
        });
        specs.push(spec);
    }
    let full = DatasetManifest { records, info: DatasetInfo { seed, scenes, holdout: Vec::new() } };
    let manifest = holdout_filter(&full, holdout);
    let kept: BTreeSet<&str> = manifest.records.iter().map(|r| r.image.as_str()).collect();
    for (spec, rec) in specs.iter().zip(&full.records) {
        if !kept.contains(rec.image.as_str()) {
            continue;
        }
        let (image, labels) = render(spec);
        image.save(&out.join(&rec.image))?;
        crate::layout::save_label_map(&labels, &out.join(&rec.labels))?;
    }
    manifest.save(out)?;
    Ok(manifest)
}

/// A record with its files loaded.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Image,
    pub labels: LabelMap,
    pub caption: String,
}

/// Loads every record of `split`, resolving paths against `root`.
pub fn load_split(manifest: &DatasetManifest, root: &Path, split: Split) -> Result<Vec<Example>> {
    manifest
        .split(split)
        .map(|r| {
            Ok(Example {
                image: Image::load(&root.join(&r.image))?,
                labels: crate::layout::load_label_map(&root.join(&r.labels))?,
                caption: r.caption.clone(),
            })
        })
        .collect()
}

/// Directory a manifest's relative paths are resolved against.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn class_ids_are_a_bijection() {
        let ids: BTreeSet<u8> = Combo::all().iter().map(|c| c.class_id()).collect();
        assert_eq!(ids, (1..=24).collect());
        for c in Combo::all() {
            assert_eq!(Combo::from_class(c.class_id()), Some(c));
        }
        assert_eq!(Combo::from_class(0), None);
        assert_eq!(Combo::from_class(25), None);
        let colors: BTreeSet<[u8; 3]> = palette().iter().map(|(_, c)| *c).collect();
        assert_eq!(colors.len(), 25);
    }

    #[test]
    fn seeded_scenes_repeat() {
        let cfg = SceneConfig::default();
        let a = gen_scene(&mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let b = gen_scene(&mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restricted_combos() {
        let red_square = Combo { shape: Shape::Square, color: Color::Red };
        let cfg = SceneConfig { combos: vec![red_square], ..SceneConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = gen_scene(&mut rng, &cfg).unwrap();
            assert!(!s.objects.is_empty());
            assert!(s.objects.iter().all(|o| o.combo == red_square));
        }
        assert!(gen_scene(&mut rng, &SceneConfig { combos: vec![], ..SceneConfig::default() }).is_err());
    }

    #[test]
    fn render_edge_cases() {
        let empty = SceneSpec { width: 4, height: 3, objects: vec![] };
        let (img, lm) = render(&empty);
        assert!(lm.ids.iter().all(|&c| c == BACKGROUND));
        assert!(img.data.iter().all(|&v| v == netpbm::from_byte(128)));

        let sq = Combo { shape: Shape::Square, color: Color::Green };
        let full = SceneSpec { width: 8, height: 8, objects: vec![SceneObject { combo: sq, x: 0, y: 0, size: 8 }] };
        let (img, lm) = render(&full);
        assert!(lm.ids.iter().all(|&c| c == sq.class_id()));
        assert_eq!(img.pixel(10), [-1.0, 1.0, -1.0]);
        assert_eq!(caption(&full, CaptionMode::Pretrain), "green square");
        assert_eq!(caption(&full, CaptionMode::Finetune), "green square");
    }

    #[test]
    fn later_objects_occlude() {
        let a = Combo { shape: Shape::Square, color: Color::Red };
        let b = Combo { shape: Shape::Square, color: Color::Blue };
        let spec = SceneSpec {
            width: 8,
            height: 8,
            objects: vec![SceneObject { combo: a, x: 0, y: 0, size: 6 }, SceneObject { combo: b, x: 2, y: 2, size: 6 }],
        };
        let (_, lm) = render(&spec);
        assert_eq!(lm.get(3, 3), b.class_id());
        assert_eq!(lm.get(0, 0), a.class_id());
        assert_eq!(lm.get(7, 0), BACKGROUND);
    }

    #[test]
    fn finetune_caption_orders_by_class() {
        let blue_circle = Combo { shape: Shape::Circle, color: Color::Blue };
        let red_square = Combo { shape: Shape::Square, color: Color::Red };
        let spec = SceneSpec {
            width: 16,
            height: 16,
            objects: vec![
                SceneObject { combo: blue_circle, x: 0, y: 0, size: 8 },
                SceneObject { combo: red_square, x: 8, y: 8, size: 8 },
            ],
        };
        assert_eq!(caption(&spec, CaptionMode::Pretrain), "blue circle red square");
        assert_eq!(caption(&spec, CaptionMode::Finetune), "background red square blue circle");
    }

    #[test]
    fn triangle_shape() {
        let t = SceneObject { combo: Combo { shape: Shape::Triangle, color: Color::Red }, x: 0, y: 0, size: 8 };
        let width = |r: usize| (0..8).filter(|&c| t.covers(r, c)).count();
        assert_eq!(width(0), 0);
        assert_eq!(width(7), 8);
        assert!((1..8).all(|r| width(r) >= width(r - 1)));
        assert!((0..8).all(|r| (0..8).all(|c| t.covers(r, c) == t.covers(r, 7 - c))));
    }

    #[test]
    fn vocabulary_covers_all_concepts() {
        let v = vocabulary();
        assert_eq!(v.size(), 15);
        assert_eq!(v.concepts.len(), 25);
        assert!(v.validate().is_ok());
    }

    #[test]
    fn bigram_parsing() {
        let combos = caption_combos("background red square blue circle");
        assert_eq!(combos.len(), 2);
        assert!(combos.contains(&Combo::parse("blue circle").unwrap()));
        assert!(Combo::parse("teal square").is_err());
        assert_eq!(Combo::parse_list("blue triangle, red circle").unwrap().len(), 2);
    }

    #[test]
    fn split_assignment() {
        assert_eq!(test_count(5000), 200);
        assert_eq!(split_of(0, 5000), Split::Test);
        assert_eq!(split_of(200, 5000), Split::Pretrain);
        assert_eq!(split_of(201, 5000), Split::Finetune);
        assert_eq!(test_count(0), 0);
    }
}
