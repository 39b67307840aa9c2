//! Dataset plumbing: synthetic generators (Gaussian blobs, concentric
//! rings), IDX-format ingestion, a fixed random subspace lift, and the
//! checkpoint binary format.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::net::{Activation, Batch, DenseLayer, NetError, Network, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset spec invalid: {0}")]
    InvalidSpec(String),
    #[error("bad IDX magic 0x{0:08x} in {1}")]
    BadMagic(u32, String),
    #[error("truncated IDX file {0}")]
    Truncated(String),
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} out of range for 10-class data")]
    BadLabel(u8),
    #[error("bad checkpoint magic")]
    CheckpointBadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    TruncatedCheckpoint,
    #[error("checkpoint arch `{arch}` does not match its {found} tensors")]
    CheckpointArchMismatch { arch: String, found: usize },
    #[error("checkpoint contains invalid UTF-8")]
    BadUtf8,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Isotropic Gaussian blobs. Class means sit `2·separation·σ` apart
    /// (for two classes) along seeded random directions from the box
    /// center; inputs are clipped to the unit box.
    Gaussians { n_classes: usize, d: usize, separation: f64, n_per_class: usize },
    /// Two concentric rings in 2-D around (0.5, 0.5), not linearly
    /// separable.
    Rings { n_per_class: usize },
    /// Big-endian IDX image/label pair, pixels scaled to [0,1].
    IdxFiles { images_path: String, labels_path: String, subset: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub seed: u64,
}

/// A 90/10 train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard deviation of the synthetic Gaussian blobs.
pub const GAUSSIAN_SIGMA: f64 = 0.05;

fn generate_gaussians(
    n_classes: usize,
    d: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>), DataError> {
    if n_classes < 2 || d < 1 || n_per_class < 1 || !(separation > 0.0) {
        return Err(DataError::InvalidSpec(format!(
            "gaussians need n_classes >= 2, d >= 1, n_per_class >= 1, separation > 0; \
             got ({n_classes}, {d}, {separation}, {n_per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class directions: a seeded unit vector and its negation for two
    // classes, independent seeded unit vectors otherwise.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    };
    if n_classes == 2 {
        let u = unit(&mut rng);
        dirs.push(u.clone());
        dirs.push(u.into_iter().map(|x| -x).collect());
    } else {
        for _ in 0..n_classes {
            dirs.push(unit(&mut rng));
        }
    }
    let n = n_classes * n_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        for j in 0..d {
            let mean = 0.5 + separation * GAUSSIAN_SIGMA * dirs[c][j];
            data.push((mean + GAUSSIAN_SIGMA * gaussian(&mut rng)).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Ok((Tensor::new(vec![n, d], data), labels))
}

/// Ring radii for the two classes (around the box center). The ratio is
/// kept above cos(0.2π) ≈ 0.809 so the best one-sided linear threshold
/// (which captures the far cap of the outer ring) stays below 60%.
pub const RING_RADII: [f64; 2] = [0.34, 0.42];
/// Radial jitter of ring samples.
pub const RING_SIGMA: f64 = 0.005;

fn generate_rings(n_per_class: usize, seed: u64) -> Result<(Tensor, Vec<usize>), DataError> {
    if n_per_class < 1 {
        return Err(DataError::InvalidSpec("rings need n_per_class >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let r = RING_RADII[c] + RING_SIGMA * gaussian(&mut rng);
        data.push((0.5 + r * theta.cos()).clamp(0.0, 1.0));
        data.push((0.5 + r * theta.sin()).clamp(0.0, 1.0));
        labels.push(c);
    }
    Ok((Tensor::new(vec![n, 2], data), labels))
}

fn split_90_10(inputs: Tensor, labels: Vec<usize>, seed: u64) -> Dataset {
    let n = labels.len();
    let all = Batch::new(inputs, labels);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5011_7e57);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_test = (n / 10).max(1).min(n.saturating_sub(1).max(1));
    let split = n - n_test;
    Dataset { train: all.select(&idx[..split]), test: all.select(&idx[split..]) }
}

/// Generate (or load) a dataset and split it 90/10, deterministically in
/// the spec's seed.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    let (inputs, labels) = match &spec.kind {
        DatasetKind::Gaussians { n_classes, d, separation, n_per_class } => {
            generate_gaussians(*n_classes, *d, *separation, *n_per_class, spec.seed)?
        }
        DatasetKind::Rings { n_per_class } => generate_rings(*n_per_class, spec.seed)?,
        DatasetKind::IdxFiles { images_path, labels_path, subset } => {
            let batch = load_idx(Path::new(images_path), Path::new(labels_path))?;
            let batch = match subset {
                Some(k) => subset_batch(&batch, *k, spec.seed),
                None => batch,
            };
            (batch.inputs, batch.labels)
        }
    };
    Ok(split_90_10(inputs, labels, spec.seed))
}

/// First `k` examples after a seeded shuffle.
pub fn subset_batch(batch: &Batch, k: usize, seed: u64) -> Batch {
    let n = batch.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b5e7);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    batch.select(&idx[..k.min(n)])
}

/// Lift a dataset into a higher dimension by a fixed seeded embedding
/// `y = 0.5 + A (x − 0.5)` with orthonormal columns of `A` (norms and
/// margins are preserved exactly; no clipping occurs for inputs within
/// l2 distance 0.5 of the center).
pub fn lift_batch(batch: &Batch, d_out: usize, seed: u64) -> Result<Batch, DataError> {
    let d_in = batch.inputs.cols();
    if d_out < d_in {
        return Err(DataError::InvalidSpec(format!(
            "lift target dimension {d_out} below input dimension {d_in}"
        )));
    }
    // Gram-Schmidt on seeded Gaussian columns.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11f7);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d_in);
    for _ in 0..d_in {
        let mut v: Vec<f64> = (0..d_out).map(|_| gaussian(&mut rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for vi in &mut v {
            *vi /= n;
        }
        cols.push(v);
    }
    let n = batch.len();
    let mut data = Vec::with_capacity(n * d_out);
    for i in 0..n {
        let x = batch.inputs.row(i);
        for j in 0..d_out {
            let mut y = 0.5;
            for (k, c) in cols.iter().enumerate() {
                y += c[j] * (x[k] - 0.5);
            }
            data.push(y.clamp(0.0, 1.0));
        }
    }
    Ok(Batch::new(Tensor::new(vec![n, d_out], data), batch.labels.clone()))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

fn be_u32(buf: &[u8], off: usize, path: &Path) -> Result<u32, DataError> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated(path.display().to_string()))
}

/// Parse a big-endian IDX image/label file pair into a batch with pixels
/// scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Batch, DataError> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic(magic, images_path.display().to_string()));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let d = rows * cols;
    let pixels = img
        .get(16..16 + n * d)
        .ok_or_else(|| DataError::Truncated(images_path.display().to_string()))?;

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic(magic, labels_path.display().to_string()));
    }
    let n_lab = be_u32(&lab, 4, labels_path)? as usize;
    if n_lab != n {
        return Err(DataError::CountMismatch { images: n, labels: n_lab });
    }
    let raw_labels = lab
        .get(8..8 + n)
        .ok_or_else(|| DataError::Truncated(labels_path.display().to_string()))?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels = raw_labels
        .iter()
        .map(|&b| if b < 10 { Ok(b as usize) } else { Err(DataError::BadLabel(b)) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Batch::new(Tensor::new(vec![n, d], data), labels))
}

const CKPT_MAGIC: &[u8; 8] = b"EATCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: String,
    pub params: Vec<Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: BTreeMap<String, String>) -> Self {
        Self {
            version: CKPT_VERSION,
            arch: net.arch_string(),
            params: net
                .layers
                .iter()
                .flat_map(|l| [l.weights.clone(), l.bias.clone()])
                .collect(),
            meta,
        }
    }

    /// Rebuild the network, verifying that the stored tensors match the
    /// architecture descriptor.
    pub fn to_network(&self) -> Result<Network, DataError> {
        let (dims, activation) = Network::parse_arch(&self.arch)?;
        let n_layers = dims.len() - 1;
        if self.params.len() != 2 * n_layers {
            return Err(DataError::CheckpointArchMismatch {
                arch: self.arch.clone(),
                found: self.params.len(),
            });
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            if w.shape != [dims[l], dims[l + 1]] || b.shape != [dims[l + 1]] {
                return Err(DataError::CheckpointArchMismatch {
                    arch: self.arch.clone(),
                    found: self.params.len(),
                });
            }
            let act = if l + 1 == n_layers { Activation::Identity } else { activation };
            layers.push(DenseLayer { weights: w.clone(), bias: b.clone(), activation: act });
        }
        Ok(Network { layers })
    }
}

fn write_bytes(out: &mut Vec<u8>, s: &[u8]) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s);
}

/// Serialize a checkpoint: magic, version, arch string, tensors
/// (dims + row-major 64-bit little-endian payload), then meta key/value
/// pairs, all length-prefixed.
pub fn save_checkpoint(
    net: &Network,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), DataError> {
    let ckpt = Checkpoint::from_network(net, meta.clone());
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    write_bytes(&mut out, ckpt.arch.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for t in &ckpt.params {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        write_bytes(&mut out, k.as_bytes());
        write_bytes(&mut out, v.as_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or(DataError::TruncatedCheckpoint)?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, DataError> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| DataError::BadUtf8)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != CKPT_MAGIC {
        return Err(DataError::CheckpointBadMagic);
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let arch = cur.string()?;
    let n_tensors = cur.u32()? as usize;
    let mut params = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.push(Tensor::new(shape, data));
    }
    let n_meta = cur.u32()? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = cur.string()?;
        let v = cur.string()?;
        meta.insert(k, v);
    }
    Ok(Checkpoint { version, arch, params, meta })
}

/// FNV-1a over the bit patterns of inputs and labels; used to freeze
/// golden fingerprints of fixed synthetic specs.
pub fn batch_fingerprint(batch: &Batch) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    };
    for &x in &batch.inputs.data {
        for b in x.to_bits().to_le_bytes() {
            eat(b);
        }
    }
    for &l in &batch.labels {
        for b in (l as u64).to_le_bytes() {
            eat(b);
        }
    }
    h
}
