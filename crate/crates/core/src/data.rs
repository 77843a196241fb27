//! Annotation and prediction files, tokenization, and the synthetic
//! referring-expression generator.
//!
//! Both file kinds are UTF-8 JSON Lines: one self-contained object per line.
//! Boxes are `[xmin, ymin, xmax, ymax]` in pixels. Readers reject invalid
//! records instead of repairing them.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, PairRecord};
use crate::model::{NormBox, MAX_TEXT_LEN};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub query: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Precomputed `G²` rows of patch features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<Vec<f64>>>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Validation { pair_id: self.pair_id.clone(), reason });
        if self.pair_id.is_empty() {
            return fail("empty pair_id".into());
        }
        if self.query.trim().is_empty() {
            return fail("empty query".into());
        }
        if self.width == 0 || self.height == 0 {
            return fail(format!("image size {}x{} must be positive", self.width, self.height));
        }
        if let Err(e) = self.bbox.validate() {
            return fail(e.to_string());
        }
        let b = &self.bbox;
        if b.xmin < 0.0 || b.ymin < 0.0 || b.xmax > self.width as f64 || b.ymax > self.height as f64 {
            return fail(format!(
                "bbox {:?} exceeds image bounds {}x{}",
                b.to_array(),
                self.width,
                self.height
            ));
        }
        if let Some(rows) = &self.patches {
            let dim = rows.first().map_or(0, Vec::len);
            if rows.is_empty() || dim == 0 || rows.iter().any(|r| r.len() != dim) {
                return fail("patch rows are empty or ragged".into());
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return fail("patch features contain non-finite values".into());
            }
        }
        Ok(())
    }

    /// Ground truth as a normalized center/size box.
    pub fn norm_box(&self) -> NormBox {
        let (w, h) = (self.width as f64, self.height as f64);
        let b = &self.bbox;
        NormBox {
            cx: (b.xmin + b.xmax) / 2.0 / w,
            cy: (b.ymin + b.ymax) / 2.0 / h,
            w: (b.xmax - b.xmin) / w,
            h: (b.ymax - b.ymin) / h,
        }
    }

    pub fn patch_tensor(&self) -> Result<Tensor> {
        let rows = self.patches.as_ref().ok_or_else(|| Error::Validation {
            pair_id: self.pair_id.clone(),
            reason: "record carries no patch features".into(),
        })?;
        Tensor::from_rows(rows)
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates an annotation file, preserving order.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (_, rec) in read_jsonl::<AnnotationRecord>(path.as_ref())? {
        rec.validate()?;
        if !seen.insert(rec.pair_id.clone()) {
            return Err(Error::Validation { pair_id: rec.pair_id, reason: "duplicate pair_id".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub pair_id: String,
    pub bbox: BBox,
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation { pair_id: id.to_string(), reason: "duplicate pair_id".into() });
        }
    }
    Ok(())
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[PredictionRecord]) -> Result<()> {
    check_unique(preds.iter().map(|p| p.pair_id.as_str()))?;
    write_jsonl(path.as_ref(), preds)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let preds: Vec<PredictionRecord> = read_jsonl(path.as_ref())?.into_iter().map(|(_, p)| p).collect();
    check_unique(preds.iter().map(|p| p.pair_id.as_str()))?;
    Ok(preds)
}

/// Pairs every annotation with its prediction. Predictions for unknown ids
/// and annotations without a prediction are both join errors.
pub fn join(annotations: &[AnnotationRecord], preds: &[PredictionRecord]) -> Result<Vec<PairRecord>> {
    check_unique(preds.iter().map(|p| p.pair_id.as_str()))?;
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let known: HashSet<&str> = annotations.iter().map(|a| a.pair_id.as_str()).collect();
    let orphans: Vec<String> =
        preds.iter().filter(|p| !known.contains(p.pair_id.as_str())).map(|p| p.pair_id.clone()).collect();
    let missing: Vec<String> = annotations
        .iter()
        .filter(|a| !by_id.contains_key(a.pair_id.as_str()))
        .map(|a| a.pair_id.clone())
        .collect();
    if !orphans.is_empty() || !missing.is_empty() {
        return Err(Error::Join { orphans, missing });
    }
    Ok(annotations
        .iter()
        .map(|a| PairRecord {
            pair_id: a.pair_id.clone(),
            image_id: a.image_id.clone(),
            query: a.query.clone(),
            gt: a.bbox,
            pred: by_id[a.pair_id.as_str()].bbox,
            category: a.category.clone(),
        })
        .collect())
}

/// Fixed words: function words, position words, and the object category
/// vocabulary of remote-sensing grounding benchmarks. Anything else hashes
/// into the remaining ids.
const RESERVED_WORDS: &[&str] = &[
    "<unk>", "the", "a", "an", "on", "of", "in", "at", "is", "there", "to", "left", "right", "top",
    "bottom", "middle", "upper", "lower", "side", "center", "airplane", "airport", "baseball",
    "basketball", "field", "court", "bridge", "chimney", "dam", "expressway", "service", "area",
    "toll", "station", "golf", "ground", "track", "harbor", "overpass", "ship", "stadium",
    "storage", "tank", "tennis", "train", "vehicle", "windmill",
];

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lower-cases, splits on non-alphanumerics and maps words to ids below
/// `vocab_size`. Never returns an empty sequence; truncates to the encoder limit.
pub fn tokenize(query: &str, vocab_size: usize) -> Vec<usize> {
    let reserved = RESERVED_WORDS.len().min(vocab_size);
    let mut ids: Vec<usize> = query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let w = w.to_lowercase();
            match RESERVED_WORDS.iter().position(|&r| r == w) {
                Some(i) if i < reserved => i,
                _ if vocab_size > reserved => reserved + (fnv1a(w.as_bytes(), 0) % (vocab_size - reserved) as u64) as usize,
                _ => 0,
            }
        })
        .take(MAX_TEXT_LEN)
        .collect();
    if ids.is_empty() {
        ids.push(0);
    }
    ids
}

/// Coarse image regions named by position words. The grid is cut into
/// thirds along each axis; each word names one of the edge-center or center
/// cells of that 3×3 layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Middle,
}

impl Position {
    pub const ALL: [Position; 5] = [Position::Left, Position::Right, Position::Top, Position::Bottom, Position::Middle];

    /// `(row third, column third)` of the region.
    fn thirds(self) -> (usize, usize) {
        match self {
            Position::Left => (1, 0),
            Position::Right => (1, 2),
            Position::Top => (0, 1),
            Position::Bottom => (2, 1),
            Position::Middle => (1, 1),
        }
    }

    pub fn contains(self, grid: usize, row: usize, col: usize) -> bool {
        let third = |i: usize| 3 * i / grid;
        (third(row), third(col)) == self.thirds()
    }

    pub fn cells(self, grid: usize) -> Vec<(usize, usize)> {
        (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))).filter(|&(r, c)| self.contains(grid, r, c)).collect()
    }

    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
            Position::Top => "top",
            Position::Bottom => "bottom",
            Position::Middle => "middle",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Position::ALL
            .into_iter()
            .find(|p| p.word() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config { field: "positions", reason: format!("unknown position `{s}`") })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub grid: usize,
    pub classes: Vec<String>,
    pub positions: Vec<Position>,
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub patch_dim: usize,
    pub cell_px: u32,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 512,
            seed: 0,
            grid: 8,
            classes: ["airplane", "ship", "vehicle", "harbor", "storage tank"].map(String::from).to_vec(),
            positions: Position::ALL.to_vec(),
            min_distractors: 2,
            max_distractors: 4,
            patch_dim: 16,
            cell_px: 32,
            noise_std: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &'static str, reason: &str| Err(Error::Config { field, reason: reason.into() });
        if self.n_samples == 0 {
            return cfg("n_samples", "must be at least 1");
        }
        if self.grid == 0 {
            return cfg("grid", "must be at least 1");
        }
        if self.classes.is_empty() || self.positions.is_empty() {
            return cfg("classes", "need at least one class and one position");
        }
        if self.classes.len() < 2 && self.positions.len() < 2 {
            return cfg("classes", "need at least 2 classes or 2 positions for discriminative queries");
        }
        if self.classes.iter().any(|c| c.trim().is_empty()) {
            return cfg("classes", "class names must be non-empty");
        }
        if self.classes.len() > self.patch_dim {
            return cfg("patch_dim", "must be at least the number of classes (one-hot class channel)");
        }
        if self.min_distractors > self.max_distractors {
            return cfg("min_distractors", "must not exceed max_distractors");
        }
        if self.cell_px == 0 {
            return cfg("cell_px", "must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return cfg("noise_std", "must be finite and non-negative");
        }
        for p in &self.positions {
            if p.cells(self.grid).is_empty() {
                return Err(Error::Generation(format!("position `{p}` has no cells on a {0}x{0} grid", self.grid)));
            }
        }
        if self.max_distractors + 1 > self.grid * self.grid {
            return Err(Error::Generation(format!(
                "{} objects do not fit on a {1}x{1} grid",
                self.max_distractors + 1,
                self.grid
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlacedObject {
    pub class: usize,
    pub row: usize,
    pub col: usize,
}

/// A generated sample with the full object layout behind its record.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub record: AnnotationRecord,
    pub target_class: usize,
    pub target_position: Position,
    /// Target first, then distractors.
    pub objects: Vec<PlacedObject>,
}

/// Generates scenes: one target and `k` distractors on the grid, with the
/// query `the <class> on the <position>` naming exactly one object.
pub fn generate_scenes(spec: &SyntheticSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config { field: "noise_std", reason: e.to_string() })?;
    let g = spec.grid;
    let all_cells: Vec<(usize, usize)> = (0..g).flat_map(|r| (0..g).map(move |c| (r, c))).collect();
    let mut scenes = Vec::with_capacity(spec.n_samples);

    for i in 0..spec.n_samples {
        let class = rng.random_range(0..spec.classes.len());
        let position = spec.positions[rng.random_range(0..spec.positions.len())];
        let region = position.cells(g);
        let (row, col) = region[rng.random_range(0..region.len())];
        let mut objects = vec![PlacedObject { class, row, col }];
        let mut occupied: BTreeSet<(usize, usize)> = [(row, col)].into_iter().collect();

        let k = rng.random_range(spec.min_distractors..=spec.max_distractors);
        for _ in 0..k {
            let dclass = rng.random_range(0..spec.classes.len());
            let allowed: Vec<(usize, usize)> = all_cells
                .iter()
                .copied()
                .filter(|&(r, c)| !occupied.contains(&(r, c)))
                .filter(|&(r, c)| dclass != class || !position.contains(g, r, c))
                .collect();
            if allowed.is_empty() {
                return Err(Error::Generation(format!(
                    "sample {i}: no free cell keeps the referent unique"
                )));
            }
            let cell = allowed[rng.random_range(0..allowed.len())];
            occupied.insert(cell);
            objects.push(PlacedObject { class: dclass, row: cell.0, col: cell.1 });
        }

        let mut patches = vec![vec![0.0; spec.patch_dim]; g * g];
        for row in patches.iter_mut() {
            for v in row.iter_mut() {
                *v = noise.sample(&mut rng);
            }
        }
        for o in &objects {
            patches[o.row * g + o.col][o.class] += 1.0;
        }

        let px = spec.cell_px as f64;
        let side = g as u32 * spec.cell_px;
        let record = AnnotationRecord {
            pair_id: format!("syn{}-{i:06}", spec.seed),
            image_id: format!("syn{}-img{i:06}", spec.seed),
            width: side,
            height: side,
            query: format!("the {} on the {}", spec.classes[class], position),
            bbox: BBox::new(col as f64 * px, row as f64 * px, (col + 1) as f64 * px, (row + 1) as f64 * px)?,
            category: Some(spec.classes[class].clone()),
            patches: Some(patches),
        };
        scenes.push(Scene { record, target_class: class, target_position: position, objects });
    }
    Ok(scenes)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<AnnotationRecord>> {
    Ok(generate_scenes(spec)?.into_iter().map(|s| s.record).collect())
}

/// Deterministic partition by `pair_id`: returns `(train, test)` with
/// `round(len · test_fraction)` records in the test split.
pub fn split_by_id(
    records: &[AnnotationRecord],
    test_fraction: f64,
    seed: u64,
) -> (Vec<AnnotationRecord>, Vec<AnnotationRecord>) {
    let n_test = ((records.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (fnv1a(records[i].pair_id.as_bytes(), seed), i));
    let test_ids: HashSet<usize> = order[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if test_ids.contains(&i) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    (train, test)
}
