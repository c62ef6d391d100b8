//! Synthetic re-identification-style datasets and the on-disk feature format.
//!
//! A dataset is a population of identities, each observed by several
//! cameras. Every identity owns a center in feature space; every camera
//! applies one fixed affine perturbation shared across identities (the
//! viewpoint/domain shift that makes cross-camera retrieval nontrivial);
//! every sample is the camera view of its identity's center plus Gaussian
//! noise. Per-identity sample counts are deliberately small so models are
//! prone to overfitting.
//!
//! The retrieval protocol splits identities (not samples) into disjoint
//! train/test sets; for each test identity one sample per camera becomes a
//! query and the rest go to the gallery.
//!
//! Samples round-trip through the `LSROFEAT` binary format:
//!
//! ```text
//! magic "LSROFEAT" (8 bytes)
//! u32 version = 1
//! u64 N (record count)
//! u32 D (feature width)
//! N × { i32 identity, i32 camera, u8 split, u8 source, D × f64 features }
//! ```
//!
//! all little-endian; split codes are train=0, query=1, gallery=2.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::labels::SourceFlag;

pub const FEATURE_MAGIC: &[u8; 8] = b"LSROFEAT";
pub const FEATURE_VERSION: u32 = 1;

/// Which evaluation role a sample plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Query),
            2 => Ok(Split::Gallery),
            _ => Err(Error::invalid(format!("unknown split code {b}"))),
        }
    }
}

/// One observation: a feature vector plus identity, camera, split and
/// provenance. Generated (outlier) samples carry identity -1 and Z=1.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub identity: i32,
    pub camera: i32,
    pub split: Split,
    pub source: SourceFlag,
}

impl Sample {
    pub fn labeled(&self) -> bool {
        self.identity >= 0
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub cameras: usize,
    /// Inclusive range of sample counts per identity per camera.
    pub samples_per_id_per_camera: (usize, usize),
    pub feature_dim: usize,
    /// Scale of identity centers.
    pub identity_spread: f64,
    /// Strength of the per-camera affine perturbation.
    pub camera_shift_scale: f64,
    /// Within-(identity, camera) Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::invalid("need at least 2 identities"));
        }
        if self.cameras < 2 {
            return Err(Error::invalid(
                "need at least 2 cameras for cross-camera retrieval",
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        let (lo, hi) = self.samples_per_id_per_camera;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!(
                "samples per identity per camera must be a non-empty positive range, got {lo}..={hi}"
            )));
        }
        Ok(())
    }

    /// Expected number of samples for a fraction of the identities; used to
    /// size generated-count grids without looking at a concrete draw.
    pub fn expected_samples(&self, identities: usize) -> usize {
        let (lo, hi) = self.samples_per_id_per_camera;
        let mean_per_cell = (lo + hi) as f64 / 2.0;
        (identities as f64 * self.cameras as f64 * mean_per_cell).round() as usize
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generate a labeled dataset according to the config.
///
/// Draw order is fixed (identity centers, then camera transforms, then
/// per-cell counts and noise), so a seed pins the dataset bit-exactly.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = crate::rng::seeded(cfg.seed);
    let d = cfg.feature_dim;

    let centers: Vec<Vec<f64>> = (0..cfg.num_identities)
        .map(|_| (0..d).map(|_| cfg.identity_spread * normal(&mut rng)).collect())
        .collect();

    // Each camera: x -> (I + s·G/sqrt(D)) x + s·b, shared across identities.
    let mut cam_mix: Vec<Vec<f64>> = Vec::with_capacity(cfg.cameras);
    let mut cam_bias: Vec<Vec<f64>> = Vec::with_capacity(cfg.cameras);
    let scale = cfg.camera_shift_scale;
    for _ in 0..cfg.cameras {
        let mut m = vec![0.0; d * d];
        for (idx, entry) in m.iter_mut().enumerate() {
            let eye = if idx / d == idx % d { 1.0 } else { 0.0 };
            *entry = eye + scale * normal(&mut rng) / (d as f64).sqrt();
        }
        cam_mix.push(m);
        cam_bias.push((0..d).map(|_| scale * normal(&mut rng)).collect());
    }

    let (lo, hi) = cfg.samples_per_id_per_camera;
    let mut samples = Vec::new();
    for (id, center) in centers.iter().enumerate() {
        for cam in 0..cfg.cameras {
            let viewed: Vec<f64> = (0..d)
                .map(|i| {
                    let mut v = cam_bias[cam][i];
                    for (j, c) in center.iter().enumerate() {
                        v += cam_mix[cam][i * d + j] * c;
                    }
                    v
                })
                .collect();
            let count = rng.random_range(lo..=hi);
            for _ in 0..count {
                let features: Vec<f64> = viewed
                    .iter()
                    .map(|v| v + cfg.noise_sigma * normal(&mut rng))
                    .collect();
                samples.push(Sample {
                    features,
                    identity: id as i32,
                    camera: cam as i32,
                    split: Split::Train,
                    source: SourceFlag::Real,
                });
            }
        }
    }
    Ok(Dataset {
        samples,
        feature_dim: d,
    })
}

/// A pool of unlabeled samples drawn from identities outside any training
/// or test set — synthetic stand-in for "real images from another dataset
/// used as outliers". Samples carry identity -1 and Z=1.
pub fn generate_heldout_pool(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let (lo, _) = cfg.samples_per_id_per_camera;
    let min_per_id = lo * cfg.cameras;
    let ids_needed = n.div_ceil(min_per_id).max(2);
    let pool_cfg = SynthConfig {
        num_identities: ids_needed,
        seed,
        ..cfg.clone()
    };
    let ds = generate_dataset(&pool_cfg)?;
    Ok(ds
        .samples
        .into_iter()
        .take(n)
        .map(|s| Sample {
            identity: -1,
            camera: -1,
            source: SourceFlag::Generated,
            ..s
        })
        .collect())
}

/// Result of the identity-level train/test split.
#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    /// Test identities seen by fewer than two cameras; their queries can
    /// have zero cross-camera matches (reported, not an error).
    pub single_camera_test_ids: Vec<i32>,
}

/// Split identities into disjoint train/test sets, then, for each test
/// identity and each camera where it appears, promote exactly one sample
/// to query and send the rest to the gallery.
pub fn split_protocol(
    ds: &Dataset,
    train_fraction_of_identities: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SplitSets> {
    let ids: BTreeSet<i32> = ds
        .samples
        .iter()
        .filter(|s| s.labeled())
        .map(|s| s.identity)
        .collect();
    let cams: BTreeSet<i32> = ds.samples.iter().map(|s| s.camera).collect();
    if cams.len() < 2 {
        return Err(Error::invalid(
            "split protocol requires at least 2 cameras",
        ));
    }
    let n = ids.len();
    let n_train = (train_fraction_of_identities * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction_of_identities} leaves an empty split over {n} identities"
        )));
    }

    let mut shuffled: Vec<i32> = ids.iter().copied().collect();
    use rand::seq::SliceRandom;
    shuffled.shuffle(rng);
    let train_ids: BTreeSet<i32> = shuffled[..n_train].iter().copied().collect();
    let test_ids: BTreeSet<i32> = shuffled[n_train..].iter().copied().collect();

    let mut train = Vec::new();
    // test id -> camera -> sample indices
    let mut by_id_cam: BTreeMap<i32, BTreeMap<i32, Vec<usize>>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if !s.labeled() {
            continue;
        }
        if train_ids.contains(&s.identity) {
            train.push(Sample {
                split: Split::Train,
                ..s.clone()
            });
        } else {
            by_id_cam
                .entry(s.identity)
                .or_default()
                .entry(s.camera)
                .or_default()
                .push(i);
        }
    }

    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut single_camera_test_ids = Vec::new();
    for (&id, cams) in &by_id_cam {
        if cams.len() < 2 {
            single_camera_test_ids.push(id);
        }
        for indices in cams.values() {
            let pick = rng.random_range(0..indices.len());
            for (pos, &idx) in indices.iter().enumerate() {
                let split = if pos == pick { Split::Query } else { Split::Gallery };
                let s = Sample {
                    split,
                    ..ds.samples[idx].clone()
                };
                if pos == pick {
                    query.push(s);
                } else {
                    gallery.push(s);
                }
            }
        }
    }
    debug_assert!(test_ids.len() == by_id_cam.len());

    Ok(SplitSets {
        train,
        query,
        gallery,
        single_camera_test_ids,
    })
}

/// Per-identity sample counts over the labeled part of a sample set.
pub fn class_histogram(samples: &[Sample]) -> BTreeMap<i32, usize> {
    let mut hist = BTreeMap::new();
    for s in samples.iter().filter(|s| s.labeled()) {
        *hist.entry(s.identity).or_insert(0) += 1;
    }
    hist
}

// ---- LSROFEAT i/o ----

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialize samples to the `LSROFEAT` format. All samples must share one
/// feature width; an empty set writes a 24-byte header with D = 0.
pub fn write_features(path: &Path, samples: &[Sample]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.features.len());
    for (i, s) in samples.iter().enumerate() {
        if s.features.len() != d {
            return Err(Error::invalid(format!(
                "sample {i} has width {} but the file width is {d}",
                s.features.len()
            )));
        }
    }
    let mut buf =
        Vec::with_capacity(24 + samples.len() * (10 + 8 * d));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.identity.to_le_bytes());
        buf.extend_from_slice(&s.camera.to_le_bytes());
        buf.push(s.split.to_byte());
        buf.push(s.source.to_byte());
        for v in &s.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.offset as u64,
                message: format!(
                    "truncated: expected {n} bytes for {what}, file has {} remaining",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            message,
        }
    }
}

/// Read samples from a `LSROFEAT` file, verifying magic, version and length.
pub fn read_features(path: &Path) -> Result<Vec<Sample>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        offset: 0,
    };
    let magic = r.take(8, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected {FEATURE_MAGIC:02x?}"),
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        });
    }
    let n = r.u64("record count")? as usize;
    let d = r.u32("feature width")? as usize;
    let expected = 24 + n * (10 + 8 * d);
    if bytes.len() != expected {
        return Err(r.fail(format!(
            "length mismatch: header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let identity = r.i32("identity")?;
        let camera = r.i32("camera")?;
        let split = Split::from_byte(r.u8("split code")?)
            .map_err(|e| r.fail(e.to_string()))?;
        let source = SourceFlag::from_byte(r.u8("source flag")?)
            .map_err(|e| r.fail(e.to_string()))?;
        let mut features = Vec::with_capacity(d);
        for _ in 0..d {
            features.push(r.f64("feature")?);
        }
        samples.push(Sample {
            features,
            identity,
            camera,
            split,
            source,
        });
    }
    Ok(samples)
}

/// Write a UTF-8 manifest of `role=path` lines.
pub fn write_manifest(path: &Path, entries: &[(String, PathBuf)]) -> Result<()> {
    let mut text = String::new();
    for (role, file) in entries {
        text.push_str(role);
        text.push('=');
        text.push_str(&file.display().to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Read a manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (role, file) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!(
                "{}: line {} is not role=path: {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        entries.push((role.trim().to_string(), PathBuf::from(file.trim())));
    }
    Ok(entries)
}
