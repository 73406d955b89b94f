//! Dataset generation and ingestion: the up/down-wind synthetic task,
//! MNIST IDX files with mean-pool downsampling, and the three graph-noise
//! channels (additive Gaussian, missing values, neighbor permutation).
//!
//! Every generator is a pure function of its config and seed; per-sample
//! randomness comes from per-index RNG streams, so regeneration is
//! bit-identical and batching commutes with noise injection.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::tensor::Tensor;

pub const LABEL_DOWN: usize = 0;
pub const LABEL_UP: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Batched labeled signals over a fixed graph.
#[derive(Debug, Clone)]
pub struct LabeledGraphSignalSet {
    pub n: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// (B, n, C)
    pub signals: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    /// Generator name, parameters, seed, and any noise applied; enough to
    /// regenerate bit-identically.
    pub provenance: String,
}

impl LabeledGraphSignalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        let stride = self.n * self.channels;
        (
            &self.signals.data()[i * stride..(i + 1) * stride],
            self.labels[i],
        )
    }

    /// Copy a batch of samples into one (B, n, C) tensor + labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.n * self.channels;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.signals.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), self.n, self.channels], data),
            labels,
        )
    }

    /// Keep samples [start, end).
    pub fn slice(&self, start: usize, end: usize) -> LabeledGraphSignalSet {
        let stride = self.n * self.channels;
        LabeledGraphSignalSet {
            n: self.n,
            channels: self.channels,
            num_classes: self.num_classes,
            signals: Tensor::from_vec(
                &[end - start, self.n, self.channels],
                self.signals.data()[start * stride..end * stride].to_vec(),
            ),
            labels: self.labels[start..end].to_vec(),
            split: self.split,
            provenance: format!("{} slice[{start}..{end})", self.provenance),
        }
    }
}

// ---------------------------------------------------------------------------
// Up/down-wind generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpDownGraph {
    Ring,
    Chain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpDownConfig {
    pub graph: UpDownGraph,
    pub n: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub threshold: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for UpDownConfig {
    fn default() -> Self {
        Self {
            graph: UpDownGraph::Ring,
            n: 64,
            n_train: 5000,
            n_test: 5000,
            threshold: 0.1,
            std: 1.5,
            seed: 0,
        }
    }
}

/// Gaussian density at integer offset v from a bump center.
fn bump_density(offset: f64, std: f64) -> f64 {
    (-offset * offset / (2.0 * std * std)).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// One half-masked bump centered at `center`. Up keeps non-negative offsets,
/// down keeps non-positive ones; the center sits in both halves, and so does
/// the antipodal node of an even ring (it is both +n/2 and -n/2 away, which
/// keeps the two halves exact mirrors of each other). Offsets wrap on a ring
/// and truncate at chain ends.
pub fn half_bump(graph: UpDownGraph, n: usize, center: usize, label: usize, std: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (v, slot) in out.iter_mut().enumerate() {
        let (offset, keep) = match graph {
            UpDownGraph::Ring => {
                let fwd = (v + n - center) % n;
                let offset = if fwd <= n / 2 {
                    fwd as f64
                } else {
                    fwd as f64 - n as f64
                };
                let keep = if label == LABEL_UP {
                    fwd <= n / 2
                } else {
                    fwd == 0 || fwd >= n.div_ceil(2)
                };
                (offset, keep)
            }
            UpDownGraph::Chain => {
                let offset = v as f64 - center as f64;
                let keep = if label == LABEL_UP {
                    offset >= 0.0
                } else {
                    offset <= 0.0
                };
                (offset, keep)
            }
        };
        if keep {
            *slot = bump_density(offset, std);
        }
    }
    out
}

fn updown_sample(cfg: &UpDownConfig, stream: u64) -> (Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let label = if rng.random_bool(0.5) {
        LABEL_UP
    } else {
        LABEL_DOWN
    };
    let mut signal = vec![0.0; cfg.n];
    for u in 0..cfg.n {
        let p: f64 = rng.random_range(0.0..1.0);
        if p < cfg.threshold {
            let bump = half_bump(cfg.graph, cfg.n, u, label, cfg.std);
            for (s, b) in signal.iter_mut().zip(&bump) {
                *s += b;
            }
        }
    }
    (signal, label)
}

/// Generate the train/test pair. A sample keeps its label even when no node
/// fell under the bump threshold (an all-zero signal).
pub fn gen_updown(cfg: &UpDownConfig) -> (LabeledGraphSignalSet, LabeledGraphSignalSet) {
    assert!(cfg.n >= 8, "up/down generator needs n >= 8");
    let make = |count: usize, offset: u64, split: Split| {
        let mut data = Vec::with_capacity(count * cfg.n);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let (sig, label) = updown_sample(cfg, offset + i as u64);
            data.extend_from_slice(&sig);
            labels.push(label);
        }
        LabeledGraphSignalSet {
            n: cfg.n,
            channels: 1,
            num_classes: 2,
            signals: Tensor::from_vec(&[count, cfg.n, 1], data),
            labels,
            split,
            provenance: format!(
                "updown graph={:?} n={} threshold={} std={} seed={} split={:?}",
                cfg.graph, cfg.n, cfg.threshold, cfg.std, cfg.seed, split
            ),
        }
    };
    const TEST_STREAM_OFFSET: u64 = 1 << 32;
    (
        make(cfg.n_train, 0, Split::Train),
        make(cfg.n_test, TEST_STREAM_OFFSET, Split::Test),
    )
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// MNIST images (raw bytes, plus exact means after pooling) and labels.
#[derive(Debug, Clone)]
pub struct MnistData {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    /// Exact pooled values on the 0..255 scale (pooling does not round).
    pub exact: Option<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl MnistData {
    /// Pixel scaled to [0, 1].
    pub fn pixel(&self, image: usize, r: usize, c: usize) -> f64 {
        match &self.exact {
            Some(exact) => exact[(image * self.rows + r) * self.cols + c] / 255.0,
            None => self.pixels[(image * self.rows + r) * self.cols + c] as f64 / 255.0,
        }
    }
}

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| DataError::Truncated { wanted: 4, got: 0 })?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse big-endian IDX image + label streams.
pub fn load_mnist_idx<R1: Read, R2: Read>(
    images: &mut R1,
    labels: &mut R2,
) -> Result<MnistData, DataError> {
    let magic = read_u32_be(images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32_be(images)? as usize;
    let rows = read_u32_be(images)? as usize;
    let cols = read_u32_be(images)? as usize;
    let wanted = count * rows * cols;
    let mut pixels = vec![0u8; wanted];
    let mut got = 0usize;
    while got < wanted {
        match images.read(&mut pixels[got..]) {
            Ok(0) => return Err(DataError::Truncated { wanted, got }),
            Ok(k) => got += k,
            Err(e) => return Err(DataError::Io(e)),
        }
    }

    let magic = read_u32_be(labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let label_count = read_u32_be(labels)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut raw = vec![0u8; label_count];
    labels
        .read_exact(&mut raw)
        .map_err(|_| DataError::Truncated {
            wanted: label_count,
            got: 0,
        })?;
    Ok(MnistData {
        count,
        rows,
        cols,
        pixels,
        exact: None,
        labels: raw.into_iter().map(|b| b as usize).collect(),
    })
}

/// Non-overlapping factor x factor mean pooling of every image.
pub fn downsample(data: &MnistData, factor: usize) -> Result<MnistData, DataError> {
    if factor == 0 || data.rows % factor != 0 || data.cols % factor != 0 {
        return Err(DataError::BadFactor(data.rows, factor));
    }
    let (rows, cols) = (data.rows / factor, data.cols / factor);
    let mut pixels = vec![0u8; data.count * rows * cols];
    let mut exact = vec![0.0f64; data.count * rows * cols];
    for i in 0..data.count {
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0f64;
                for dr in 0..factor {
                    for dc in 0..factor {
                        let src = match &data.exact {
                            Some(e) => {
                                e[(i * data.rows + r * factor + dr) * data.cols + c * factor + dc]
                            }
                            None => data.pixels
                                [(i * data.rows + r * factor + dr) * data.cols + c * factor + dc]
                                as f64,
                        };
                        acc += src;
                    }
                }
                let mean = acc / (factor * factor) as f64;
                exact[(i * rows + r) * cols + c] = mean;
                pixels[(i * rows + r) * cols + c] = mean.round() as u8;
            }
        }
    }
    Ok(MnistData {
        count: data.count,
        rows,
        cols,
        pixels,
        exact: Some(exact),
        labels: data.labels.clone(),
    })
}

/// Convert to (B, n, 1) signals on the row-major grid, values in [0, 1].
pub fn mnist_to_signals(data: &MnistData, split: Split, provenance: &str) -> LabeledGraphSignalSet {
    let n = data.rows * data.cols;
    let values: Vec<f64> = match &data.exact {
        Some(exact) => exact.iter().map(|v| v / 255.0).collect(),
        None => data.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    };
    LabeledGraphSignalSet {
        n,
        channels: 1,
        num_classes: 10,
        signals: Tensor::from_vec(&[data.count, n, 1], values),
        labels: data.labels.clone(),
        split,
        provenance: format!(
            "{provenance} grid={}x{} split={split:?}",
            data.rows, data.cols
        ),
    }
}

// ---------------------------------------------------------------------------
// Noise channels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    Gaussian { std: f64 },
    Missing { noise_level: f64 },
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        match self.kind {
            NoiseKind::Gaussian { std } if std <= 0.0 => {
                Err(DataError::BadNoiseSpec(format!("gaussian std {std} <= 0")))
            }
            NoiseKind::Missing { noise_level }
                if !(noise_level > 0.0 && noise_level < 1.0) =>
            {
                Err(DataError::BadNoiseSpec(format!(
                    "missing noise level {noise_level} not in (0,1)"
                )))
            }
            _ => Ok(()),
        }
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Additive i.i.d. Gaussian noise per sample; values are not clipped.
/// Returns the noisy set and the mean per-sample PSNR in dB against a unit
/// peak signal: 10 log10(1 / mse).
pub fn add_gaussian_noise(
    set: &LabeledGraphSignalSet,
    std: f64,
    seed: u64,
) -> Result<(LabeledGraphSignalSet, f64), DataError> {
    NoiseSpec {
        kind: NoiseKind::Gaussian { std },
        seed,
    }
    .validate()?;
    let normal = Normal::new(0.0, std).expect("validated std");
    let stride = set.n * set.channels;
    let mut out = set.clone();
    let mut psnr_sum = 0.0;
    for i in 0..set.len() {
        let mut rng = sample_rng(seed, i as u64);
        let mut mse = 0.0;
        for v in &mut out.signals.data_mut()[i * stride..(i + 1) * stride] {
            let e: f64 = normal.sample(&mut rng);
            *v += e;
            mse += e * e;
        }
        mse /= stride as f64;
        psnr_sum += 10.0 * (1.0 / mse).log10();
    }
    out.provenance = format!("{} +gaussian(std={std},seed={seed})", set.provenance);
    Ok((out, psnr_sum / set.len() as f64))
}

/// Zero the value at nodes whose per-sample uniform draw falls below the
/// noise level.
pub fn add_missing_values(
    set: &LabeledGraphSignalSet,
    noise_level: f64,
    seed: u64,
) -> Result<LabeledGraphSignalSet, DataError> {
    NoiseSpec {
        kind: NoiseKind::Missing { noise_level },
        seed,
    }
    .validate()?;
    let stride = set.n * set.channels;
    let mut out = set.clone();
    for i in 0..set.len() {
        let mut rng = sample_rng(seed, i as u64);
        for u in 0..set.n {
            let p: f64 = rng.random_range(0.0..1.0);
            if p < noise_level {
                for c in 0..set.channels {
                    out.signals.data_mut()[i * stride + u * set.channels + c] = 0.0;
                }
            }
        }
    }
    out.provenance = format!(
        "{} +missing(level={noise_level},seed={seed})",
        set.provenance
    );
    Ok(out)
}

/// Per sample: pick one node with exactly four grid neighbors uniformly and
/// rotate its neighbors' feature values clockwise (top -> right -> bottom ->
/// left -> top). The graph itself is unchanged.
pub fn add_permutation_noise(
    set: &LabeledGraphSignalSet,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<LabeledGraphSignalSet, DataError> {
    assert_eq!(set.n, h * w, "set does not live on an {h}x{w} grid");
    if h < 3 || w < 3 {
        return Err(DataError::NoInteriorNode);
    }
    let interior: Vec<usize> = (1..h - 1)
        .flat_map(|i| (1..w - 1).map(move |j| i * w + j))
        .collect();
    let stride = set.n * set.channels;
    let c = set.channels;
    let mut out = set.clone();
    for i in 0..set.len() {
        let mut rng = sample_rng(seed, i as u64);
        let center = interior[rng.random_range(0..interior.len())];
        let top = center - w;
        let right = center + 1;
        let bottom = center + w;
        let left = center - 1;
        let base = i * stride;
        let at = |u: usize| base + u * c;
        let data = out.signals.data_mut();
        for cc in 0..c {
            let t = data[at(top) + cc];
            let r = data[at(right) + cc];
            let b = data[at(bottom) + cc];
            let l = data[at(left) + cc];
            data[at(right) + cc] = t;
            data[at(bottom) + cc] = r;
            data[at(left) + cc] = b;
            data[at(top) + cc] = l;
        }
    }
    out.provenance = format!("{} +permutation(seed={seed})", set.provenance);
    Ok(out)
}

/// Apply a noise spec; grid dims are needed for permutation noise only.
pub fn apply_noise(
    set: &LabeledGraphSignalSet,
    spec: &NoiseSpec,
    grid: Option<(usize, usize)>,
) -> Result<LabeledGraphSignalSet, DataError> {
    match spec.kind {
        NoiseKind::Gaussian { std } => Ok(add_gaussian_noise(set, std, spec.seed)?.0),
        NoiseKind::Missing { noise_level } => add_missing_values(set, noise_level, spec.seed),
        NoiseKind::Permutation => {
            let (h, w) = grid.ok_or(DataError::NoInteriorNode)?;
            add_permutation_noise(set, h, w, spec.seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Binary dataset container
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 8] = b"L3DSET01";

/// Provenance-keyed binary container: magic, provenance, split, class count,
/// shape, labels, then little-endian f64 signals.
pub fn write_dataset<W: Write>(w: &mut W, set: &LabeledGraphSignalSet) -> Result<(), DataError> {
    w.write_all(DATASET_MAGIC)?;
    let prov = set.provenance.as_bytes();
    w.write_all(&(prov.len() as u32).to_le_bytes())?;
    w.write_all(prov)?;
    w.write_all(&[match set.split {
        Split::Train => 0u8,
        Split::Test => 1u8,
    }])?;
    w.write_all(&(set.num_classes as u32).to_le_bytes())?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    w.write_all(&(set.n as u32).to_le_bytes())?;
    w.write_all(&(set.channels as u32).to_le_bytes())?;
    for &l in &set.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    for v in set.signals.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<LabeledGraphSignalSet, DataError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::BadContainer("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let prov_len = u32::from_le_bytes(b4) as usize;
    let mut prov = vec![0u8; prov_len];
    r.read_exact(&mut prov)?;
    let provenance =
        String::from_utf8(prov).map_err(|e| DataError::BadContainer(e.to_string()))?;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let split = match b1[0] {
        0 => Split::Train,
        1 => Split::Test,
        other => {
            return Err(DataError::BadContainer(format!("bad split tag {other}")));
        }
    };
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [num_classes, count, n, channels] = dims;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        labels.push(u32::from_le_bytes(b) as usize);
    }
    let mut data = Vec::with_capacity(count * n * channels);
    let mut b8 = [0u8; 8];
    for _ in 0..count * n * channels {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(LabeledGraphSignalSet {
        n,
        channels,
        num_classes,
        signals: Tensor::from_vec(&[count, n, channels], data),
        labels,
        split,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn updown_regeneration_is_bit_identical() {
        let cfg = UpDownConfig {
            n_train: 64,
            n_test: 32,
            ..UpDownConfig::default()
        };
        let (a_train, a_test) = gen_updown(&cfg);
        let (b_train, b_test) = gen_updown(&cfg);
        assert_eq!(a_train.signals.data(), b_train.signals.data());
        assert_eq!(a_train.labels, b_train.labels);
        assert_eq!(a_test.signals.data(), b_test.signals.data());
        // train and test draws differ
        assert_ne!(&a_train.signals.data()[..64], &a_test.signals.data()[..64]);
    }

    #[test]
    fn updown_class_balance() {
        for seed in [0u64, 1, 2] {
            let cfg = UpDownConfig {
                seed,
                ..UpDownConfig::default()
            };
            let (train, _) = gen_updown(&cfg);
            let ups = train.labels.iter().filter(|&&l| l == LABEL_UP).count() as f64;
            let downs = train.labels.len() as f64 - ups;
            assert!(
                (ups - downs).abs() / train.labels.len() as f64 <= 0.05,
                "seed {seed}: {ups} vs {downs}"
            );
        }
    }

    #[test]
    fn updown_signals_nonnegative_and_bounded() {
        let cfg = UpDownConfig {
            n_train: 500,
            n_test: 0,
            ..UpDownConfig::default()
        };
        let (train, _) = gen_updown(&cfg);
        let peak = bump_density(0.0, cfg.std);
        for i in 0..train.len() {
            let (sig, _) = train.sample(i);
            let bound = 64.0 * peak;
            for &v in sig {
                assert!((0.0..=bound).contains(&v));
            }
        }
    }

    #[test]
    fn updown_zero_center_sample_keeps_label() {
        // all-zero draws happen with probability 0.9^64 per sample; scan
        // enough samples to find one and check it is retained
        let cfg = UpDownConfig {
            n_train: 5000,
            n_test: 0,
            ..UpDownConfig::default()
        };
        let (train, _) = gen_updown(&cfg);
        let mut found = false;
        for i in 0..train.len() {
            let (sig, label) = train.sample(i);
            if sig.iter().all(|&v| v == 0.0) {
                assert!(label == LABEL_UP || label == LABEL_DOWN);
                found = true;
                break;
            }
        }
        assert!(found, "expected at least one all-zero sample in 5000 draws");
    }

    #[test]
    fn updown_mirror_law_exact_on_bumps() {
        // flipping an up bump around any node gives the down bump at the
        // mirrored center
        let n = 8;
        for center in 0..n {
            for flip_at in 0..n {
                let up = half_bump(UpDownGraph::Ring, n, center, LABEL_UP, 1.5);
                let mirrored_center = (2 * flip_at + n - center) % n;
                let down = half_bump(UpDownGraph::Ring, n, mirrored_center, LABEL_DOWN, 1.5);
                for v in 0..n {
                    let pv = (2 * flip_at + n - v) % n;
                    assert!(
                        (up[v] - down[pv]).abs() < 1e-15,
                        "center={center} flip={flip_at} v={v}: {} vs {}",
                        up[v],
                        down[pv]
                    );
                }
            }
        }
    }

    fn synth_idx(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&(count as u32).to_be_bytes());
        images.extend_from_slice(&(rows as u32).to_be_bytes());
        images.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count * rows * cols {
            images.push((i % 256) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(count as u32).to_be_bytes());
        for i in 0..count {
            labels.push((i % 10) as u8);
        }
        (images, labels)
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let (images, labels) = synth_idx(3, 4, 4);
        let data = load_mnist_idx(&mut images.as_slice(), &mut labels.as_slice()).unwrap();
        assert_eq!(data.count, 3);
        assert_eq!((data.rows, data.cols), (4, 4));
        assert!(data.labels.iter().all(|&l| l < 10));
        // byte 255 scales to exactly 1.0
        let mut with_peak = data.clone();
        with_peak.pixels[0] = 255;
        assert_eq!(with_peak.pixel(0, 0, 0), 1.0);
    }

    #[test]
    fn idx_error_paths() {
        let (images, labels) = synth_idx(2, 4, 4);
        let mut bad = images.clone();
        bad[3] = 0x99;
        assert!(matches!(
            load_mnist_idx(&mut bad.as_slice(), &mut labels.as_slice()),
            Err(DataError::BadMagic { .. })
        ));
        let mut short = images.clone();
        short.truncate(images.len() - 5);
        assert!(matches!(
            load_mnist_idx(&mut short.as_slice(), &mut labels.as_slice()),
            Err(DataError::Truncated { .. })
        ));
        let (_, mut labels_bad) = synth_idx(2, 4, 4);
        labels_bad[7] = 9; // claim 9 labels against 2 images
        assert!(matches!(
            load_mnist_idx(&mut images.as_slice(), &mut labels_bad.as_slice()),
            Err(DataError::CountMismatch { .. })
        ));
    }

    #[test]
    fn downsample_mean_pooling() {
        // constant image stays constant
        let mut data = MnistData {
            count: 1,
            rows: 4,
            cols: 4,
            pixels: vec![100; 16],
            exact: None,
            labels: vec![7],
        };
        let pooled = downsample(&data, 2).unwrap();
        assert_eq!((pooled.rows, pooled.cols), (2, 2));
        let set = mnist_to_signals(&pooled, Split::Train, "test");
        for &v in set.signals.data() {
            assert!((v - 100.0 / 255.0).abs() < 1e-15);
        }
        // checkerboard of 0/255 pools to exactly half
        for i in 0..16 {
            let (r, c) = (i / 4, i % 4);
            data.pixels[i] = if (r + c) % 2 == 0 { 0 } else { 255 };
        }
        let pooled = downsample(&data, 2).unwrap();
        let set = mnist_to_signals(&pooled, Split::Train, "test");
        for &v in set.signals.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        // 28 -> 7 via factor 4
        let big = MnistData {
            count: 2,
            rows: 28,
            cols: 28,
            pixels: vec![10; 2 * 28 * 28],
            exact: None,
            labels: vec![0, 1],
        };
        let small = downsample(&big, 4).unwrap();
        assert_eq!((small.rows, small.cols), (7, 7));
        assert_eq!(small.rows * small.cols, 49);
        assert!(downsample(&big, 5).is_err());
    }

    #[test]
    fn gaussian_noise_psnr_convention() {
        // unclipped additive noise: PSNR tracks 20 log10(1/std)
        let cfg = UpDownConfig {
            n_train: 300,
            n_test: 0,
            n: 49,
            ..UpDownConfig::default()
        };
        let (set, _) = gen_updown(&cfg);
        for std in [0.1, 0.2, 0.3] {
            let (noisy, psnr) = add_gaussian_noise(&set, std, 9).unwrap();
            let expect = 20.0 * (1.0 / std).log10();
            assert!(
                (psnr - expect).abs() < 0.5,
                "std={std}: psnr {psnr} vs {expect}"
            );
            assert_eq!(noisy.len(), set.len());
        }
        assert!(add_gaussian_noise(&set, 0.0, 0).is_err());
    }

    #[test]
    fn missing_values_fraction() {
        let cfg = UpDownConfig {
            n_train: 400,
            n_test: 0,
            ..UpDownConfig::default()
        };
        let (mut set, _) = gen_updown(&cfg);
        // make everything nonzero so zeros are attributable to the mask
        for v in set.signals.data_mut() {
            *v += 1.0;
        }
        for level in [0.1, 0.2, 0.3] {
            let noisy = add_missing_values(&set, level, 3).unwrap();
            let zeros = noisy.signals.data().iter().filter(|&&v| v == 0.0).count();
            let frac = zeros as f64 / noisy.signals.len() as f64;
            assert!((frac - level).abs() < 0.02, "level {level}: frac {frac}");
        }
        assert!(add_missing_values(&set, 0.0, 0).is_err());
        assert!(add_missing_values(&set, 1.0, 0).is_err());
    }

    #[test]
    fn permutation_noise_structure() {
        // 3x3: only the center qualifies; four applications are the identity
        let n = 9;
        let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let set = LabeledGraphSignalSet {
            n,
            channels: 1,
            num_classes: 2,
            signals: Tensor::from_vec(&[1, n, 1], data),
            labels: vec![0],
            split: Split::Train,
            provenance: "test".into(),
        };
        let once = add_permutation_noise(&set, 3, 3, 5).unwrap();
        // top(1) -> right(5) -> bottom(7) -> left(3) -> top
        let d = once.signals.data();
        assert_eq!(d[5], 1.0);
        assert_eq!(d[7], 5.0);
        assert_eq!(d[3], 7.0);
        assert_eq!(d[1], 3.0);
        let mut rolled = set.clone();
        for _ in 0..4 {
            rolled = add_permutation_noise(&rolled, 3, 3, 5).unwrap();
        }
        assert_eq!(rolled.signals.data(), set.signals.data());
        // constant image unchanged
        let flat = LabeledGraphSignalSet {
            signals: Tensor::from_vec(&[1, n, 1], vec![2.5; n]),
            ..set.clone()
        };
        let noisy = add_permutation_noise(&flat, 3, 3, 1).unwrap();
        assert_eq!(noisy.signals.data(), flat.signals.data());
        // 2x3 grid has no 4-neighbor node
        let small = LabeledGraphSignalSet {
            n: 6,
            signals: Tensor::from_vec(&[1, 6, 1], vec![0.0; 6]),
            ..set.clone()
        };
        assert!(matches!(
            add_permutation_noise(&small, 2, 3, 0),
            Err(DataError::NoInteriorNode)
        ));
    }

    #[test]
    fn noise_commutes_with_batching() {
        let cfg = UpDownConfig {
            n_train: 40,
            n_test: 0,
            ..UpDownConfig::default()
        };
        let (set, _) = gen_updown(&cfg);
        let (whole, _) = add_gaussian_noise(&set, 0.2, 11).unwrap();
        // per-sample streams: noising a slice at its global indices agrees
        let part = set.slice(10, 20);
        let expected = whole.slice(10, 20);
        let noisy_part = {
            let mut out = part.clone();
            let normal = Normal::new(0.0, 0.2).unwrap();
            let stride = part.n * part.channels;
            for (local, global) in (10..20).enumerate() {
                let mut rng = sample_rng(11, global as u64);
                for v in &mut out.signals.data_mut()[local * stride..(local + 1) * stride] {
                    *v += normal.sample(&mut rng);
                }
            }
            out
        };
        assert_eq!(noisy_part.signals.data(), expected.signals.data());
    }

    #[test]
    fn dataset_container_round_trip() {
        let cfg = UpDownConfig {
            n_train: 12,
            n_test: 0,
            ..UpDownConfig::default()
        };
        let (set, _) = gen_updown(&cfg);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &set).unwrap();
        let back = read_dataset(&mut buf.as_slice()).unwrap();
        assert_eq!(back.signals.data(), set.signals.data());
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.provenance, set.provenance);
        assert_eq!(back.split, set.split);
        assert!(read_dataset(&mut &buf[..4]).is_err());
    }
}
