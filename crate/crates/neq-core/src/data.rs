//! Dataset ingestion: IDX (ubyte) files, synthetic generators, and the
//! train / probe / test split.
//!
//! Values are held in f64 and cast to the training precision per batch.
//! Image data is kept on the k/255 grid so an IDX round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset; `shape` is the per-sample shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Samples at `indices` as one batch tensor plus labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<u32>) {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.data[i * sl..(i + 1) * sl].iter().map(|&v| T::from_f64(v)));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.shape);
        (Tensor::from_vec(&shape, data).expect("batch shape consistent"), labels)
    }

    /// The whole dataset as one tensor, in stored order.
    pub fn all_batch<T: Scalar>(&self) -> (Tensor<T>, Vec<u32>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * sl..(i + 1) * sl]);
            labels.push(self.labels[i]);
        }
        Dataset { shape: self.shape.clone(), data, labels, classes: self.classes }
    }
}

// ── IDX (ubyte) files ───────────────────────────────────────────────

fn read_u32_be(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label pair into a dataset of shape (N, 1, H, W) with
/// pixel values scaled to [0, 1].
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ipath = images_path.display().to_string();
    let mut f = std::fs::File::open(images_path).map_err(|e| Error::io(&*ipath, e))?;
    let magic = read_u32_be(&mut f, &ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!("bad image magic {magic:#010x} in {ipath}")));
    }
    let n = read_u32_be(&mut f, &ipath)? as usize;
    let h = read_u32_be(&mut f, &ipath)? as usize;
    let w = read_u32_be(&mut f, &ipath)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    f.read_exact(&mut pixels)
        .map_err(|e| Error::Dataset(format!("truncated image payload in {ipath}: {e}")))?;

    let lpath = labels_path.display().to_string();
    let mut f = std::fs::File::open(labels_path).map_err(|e| Error::io(&*lpath, e))?;
    let magic = read_u32_be(&mut f, &lpath)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Dataset(format!("bad label magic {magic:#010x} in {lpath}")));
    }
    let ln = read_u32_be(&mut f, &lpath)? as usize;
    if ln != n {
        return Err(Error::Dataset(format!("{n} images but {ln} labels")));
    }
    let mut labels_raw = vec![0u8; ln];
    f.read_exact(&mut labels_raw)
        .map_err(|e| Error::Dataset(format!("truncated label payload in {lpath}: {e}")))?;

    let labels: Vec<u32> = labels_raw.iter().map(|&l| u32::from(l)).collect();
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Dataset { shape: vec![1, h, w], data, labels, classes })
}

/// Write a (N, 1, H, W) dataset as an IDX image/label pair. Values must lie
/// on the k/255 grid in [0, 1] (the generators guarantee this), so a reload
/// is bit-exact.
pub fn save_idx_dataset(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.shape[..] else {
        return Err(Error::Dataset(format!("IDX wants (1, H, W) samples, got {:?}", ds.shape)));
    };
    if c != 1 {
        return Err(Error::Dataset(format!("IDX supports single-channel images, got {c}")));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::Dataset("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.data.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in &ds.data {
        let byte = (v * 255.0).round();
        if !(0.0..=255.0).contains(&byte) {
            return Err(Error::Dataset(format!("pixel {v} outside [0, 1]")));
        }
        img.push(byte as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));

    std::fs::File::create(images_path)
        .and_then(|mut f| f.write_all(&img))
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;
    std::fs::File::create(labels_path)
        .and_then(|mut f| f.write_all(&lab))
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    Ok(())
}

// ── Synthetic generators ────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Concentric rings rendered as single-channel images.
    Rings,
    /// Concentric rings as raw (x, y) feature vectors.
    RingsRaw,
    /// Two interleaved half-moons rendered as images.
    Moons,
    /// Two interleaved half-moons as raw (x, y) feature vectors.
    MoonsRaw,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rings" => Ok(SyntheticKind::Rings),
            "rings-raw" => Ok(SyntheticKind::RingsRaw),
            "moons" => Ok(SyntheticKind::Moons),
            "moons-raw" => Ok(SyntheticKind::MoonsRaw),
            other => Err(Error::Dataset(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub noise: f64,
    /// Fraction of samples whose label is re-drawn uniformly (irreducible
    /// disagreement; keeps gradients alive after geometric convergence).
    pub label_noise: f64,
    pub classes: usize,
    /// Image side for rendered kinds.
    pub image_size: usize,
    pub seed: u64,
}

/// Ring radii in planar units, evenly spaced in [1.2, 4.2].
fn ring_radii(classes: usize) -> Vec<f64> {
    let (lo, hi) = (1.2, 4.2);
    if classes == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..classes).map(|c| lo + (hi - lo) * c as f64 / (classes - 1) as f64).collect()
}

/// Planar sample for one labeled point.
fn sample_point(spec: &SyntheticSpec, class: usize, rng: &mut impl Rng) -> (f64, f64) {
    match spec.kind {
        SyntheticKind::Rings | SyntheticKind::RingsRaw => {
            let radii = ring_radii(spec.classes);
            let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise;
            let r = radii[class] + noise;
            (r * theta.cos(), r * theta.sin())
        }
        SyntheticKind::Moons | SyntheticKind::MoonsRaw => {
            // Two half-circles of radius 2.5, the second shifted and flipped.
            let t: f64 = rng.gen::<f64>() * std::f64::consts::PI;
            let nx: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise;
            let ny: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise;
            let r = 2.5;
            if class == 0 {
                (r * t.cos() + nx, r * t.sin() - 1.0 + ny)
            } else {
                (r - r * t.cos() + nx, 1.0 - r * t.sin() + ny)
            }
        }
    }
}

/// Deterministic synthetic dataset with balanced classes.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    match spec.kind {
        SyntheticKind::Moons | SyntheticKind::MoonsRaw => {
            if spec.classes != 2 {
                return Err(Error::Dataset("moons datasets have exactly 2 classes".into()));
            }
        }
        _ => {
            if spec.classes == 0 {
                return Err(Error::Dataset("classes must be positive".into()));
            }
        }
    }
    let rendered = matches!(spec.kind, SyntheticKind::Rings | SyntheticKind::Moons);
    if rendered && spec.image_size < 4 {
        return Err(Error::Dataset("image_size must be at least 4".into()));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(Error::Dataset(format!("label_noise {} outside [0, 1]", spec.label_noise)));
    }
    let mut rng = rng::substream(spec.seed, Stream::Data, 0);
    let shape = if rendered { vec![1, spec.image_size, spec.image_size] } else { vec![2] };
    let sl: usize = shape.iter().product();
    let mut data = Vec::with_capacity(spec.n * sl);
    let mut labels = Vec::with_capacity(spec.n);

    for i in 0..spec.n {
        // Balanced classes: round-robin assignment.
        let class = i % spec.classes;
        let (x, y) = sample_point(spec, class, &mut rng);
        if rendered {
            data.extend(render_blob(x, y, spec.image_size));
        } else {
            data.push(x);
            data.push(y);
        }
        let label = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
            rng.gen_range(0..spec.classes) as u32
        } else {
            class as u32
        };
        labels.push(label);
    }
    Ok(Dataset { shape, data, labels, classes: spec.classes })
}

/// Render a Gaussian blob at planar position (x, y) onto an image grid.
/// The plane [-5, 5]^2 maps onto the image; intensities are quantized to
/// the u8 grid so IDX round trips are exact.
fn render_blob(x: f64, y: f64, size: usize) -> Vec<f64> {
    let scale = size as f64 / 10.0;
    let px = (x + 5.0) * scale;
    let py = (y + 5.0) * scale;
    let sigma = 0.06 * size as f64;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let dx = col as f64 + 0.5 - px;
            let dy = row as f64 + 0.5 - py;
            let v = (-(dx * dx + dy * dy) * inv2s2).exp();
            let q = (v * 255.0).round().clamp(0.0, 255.0);
            out.push(q / 255.0);
        }
    }
    out
}

// ── Splitting ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Dataset,
    pub probe: Dataset,
    pub test: Dataset,
}

/// Split into disjoint train / probe / test. The probe is drawn from
/// held-out data, stratified by class where labels allow, and its order is
/// fixed thereafter. `test_fraction` of the remainder becomes the test set.
pub fn split_probe(ds: &Dataset, probe_size: usize, test_fraction: f64, seed: u64) -> Result<SplitData> {
    if probe_size == 0 {
        return Err(Error::Config { field: "probe_size".into(), message: "must be at least 1".into() });
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config {
            field: "test_fraction".into(),
            message: format!("must be in [0, 1), got {test_fraction}"),
        });
    }
    let n = ds.len();
    let test_size = ((n.saturating_sub(probe_size)) as f64 * test_fraction).floor() as usize;
    if probe_size + test_size >= n {
        return Err(Error::Config {
            field: "probe_size".into(),
            message: format!("probe {probe_size} + test {test_size} leave no training data out of {n}"),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, Stream::Split, 0));

    // Stratified probe: cycle over classes, taking the next unused sample of
    // each class from the shuffled order; fall back to any unused sample
    // when a class runs dry.
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for &i in &order {
        per_class[ds.labels[i] as usize].push(i);
    }
    let mut cursors = vec![0usize; ds.classes];
    let mut probe_idx = Vec::with_capacity(probe_size);
    let mut used = vec![false; n];
    let mut class = 0;
    let mut exhausted = 0;
    while probe_idx.len() < probe_size && exhausted < ds.classes {
        let c = class % ds.classes;
        class += 1;
        if cursors[c] < per_class[c].len() {
            let i = per_class[c][cursors[c]];
            cursors[c] += 1;
            probe_idx.push(i);
            used[i] = true;
            exhausted = 0;
        } else {
            exhausted += 1;
        }
    }
    // Classes exhausted: top up from the shuffled order.
    if probe_idx.len() < probe_size {
        for &i in &order {
            if probe_idx.len() >= probe_size {
                break;
            }
            if !used[i] {
                probe_idx.push(i);
                used[i] = true;
            }
        }
    }

    let remaining: Vec<usize> = order.iter().copied().filter(|&i| !used[i]).collect();
    let (test_idx, train_idx) = remaining.split_at(test_size);

    Ok(SplitData {
        train: ds.subset(train_idx),
        probe: ds.subset(&probe_idx),
        test: ds.subset(test_idx),
    })
}
