//! Synthetic multi-domain retrieval benchmark.
//!
//! Identities live as Gaussian embeddings in a small generating space; a
//! domain applies its own seeded orthogonal rotation, scaling, per-camera
//! shifts and a mixing matrix up to feature space. Different gap seeds give
//! different mixing/rotation, which is what creates the domain gap the
//! selector has to detect.
//!
//! Dataset files: `features.bin` (magic `ADLDATA0`, u32 version, u32 N,
//! u32 feat_dim, then N×feat_dim little-endian f32) plus a `meta.csv`
//! sidecar with `sample_index,identity,camera,split` rows.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 8] = b"ADLDATA0";
const VERSION: u32 = 1;
/// Dimensionality of the generating space.
const D_GEN: usize = 32;
/// Std of the domain-level component of every camera shift.
const DOMAIN_SHIFT_STD: f64 = 1.25;
/// Std of the camera-specific component.
const CAMERA_SHIFT_STD: f64 = 0.5;
/// Fraction of identities reserved for query/gallery evaluation.
const EVAL_ID_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub cameras: usize,
    pub gap_seed: u64,
    pub noise_std: f64,
    /// Output feature width; must equal the encoder's `tokens · patch_dim`.
    pub feature_dim: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "domain".into(),
            num_identities: 50,
            samples_per_identity: 20,
            cameras: 4,
            gap_seed: 0,
            noise_std: 0.25,
            feature_dim: 128,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("bad domain name '{}'", self.name)));
        }
        if self.cameras < 2 {
            return Err(Error::Config("need at least 2 cameras".into()));
        }
        if self.samples_per_identity < 4 {
            return Err(Error::Config("need at least 4 samples per identity".into()));
        }
        if self.num_identities < 5 {
            return Err(Error::Config("need at least 5 identities".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub features: Matrix<f32>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
    pub splits: Vec<Split>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features/ids/cameras restricted to the given indices.
    pub fn subset(&self, indices: &[usize]) -> (Matrix<f32>, Vec<u32>, Vec<u32>) {
        let mut f = Matrix::zeros(indices.len(), self.features.cols());
        let mut ids = Vec::with_capacity(indices.len());
        let mut cams = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            f.row_mut(r).copy_from_slice(self.features.row(i));
            ids.push(self.identities[i]);
            cams.push(self.cameras[i]);
        }
        (f, ids, cams)
    }

    /// Union of the query and gallery samples (the "testing set").
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] != Split::Train)
            .collect()
    }

    pub fn unique_ids(&self, split: Option<Split>) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.len())
            .filter(|&i| split.map_or(true, |s| self.splits[i] == s))
            .map(|i| self.identities[i])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Check the retrieval-protocol invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.identities.len() != n || self.cameras.len() != n || self.splits.len() != n {
            return Err(Error::Format(format!(
                "metadata rows ({}, {}, {}) do not match {n} feature rows",
                self.identities.len(),
                self.cameras.len(),
                self.splits.len()
            )));
        }
        let train: std::collections::BTreeSet<u32> =
            self.unique_ids(Some(Split::Train)).into_iter().collect();
        let query = self.unique_ids(Some(Split::Query));
        let gallery: std::collections::BTreeSet<u32> =
            self.unique_ids(Some(Split::Gallery)).into_iter().collect();
        for q in &query {
            if train.contains(q) {
                return Err(Error::Protocol(format!(
                    "identity {q} appears in both train and evaluation splits"
                )));
            }
            if !gallery.contains(q) {
                return Err(Error::Protocol(format!(
                    "query identity {q} missing from the gallery"
                )));
            }
        }
        // every query must have a cross-camera gallery match
        for i in 0..n {
            if self.splits[i] != Split::Query {
                continue;
            }
            let ok = (0..n).any(|j| {
                self.splits[j] == Split::Gallery
                    && self.identities[j] == self.identities[i]
                    && self.cameras[j] != self.cameras[i]
            });
            if !ok {
                return Err(Error::Protocol(format!(
                    "query sample {i} (id {}) has no cross-camera gallery match",
                    self.identities[i]
                )));
            }
        }
        Ok(())
    }

    /// Write `features.bin` and `meta.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.len();
        let dim = self.features.cols();
        let mut buf = Vec::with_capacity(20 + 4 * n * dim);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
        for &v in self.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join("features.bin"), buf)?;

        let mut meta = String::from("sample_index,identity,camera,split\n");
        for i in 0..n {
            meta.push_str(&format!(
                "{i},{},{},{}\n",
                self.identities[i],
                self.cameras[i],
                self.splits[i].name()
            ));
        }
        std::fs::write(dir.join("meta.csv"), meta)?;
        Ok(())
    }

    /// Load a dataset saved by [`save`](Self::save); the domain name is the
    /// directory name.
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad dataset directory {}", dir.display())))?
            .to_string();

        let mut file = std::fs::File::open(dir.join("features.bin"))?;
        let mut magic = [0u8; 8];
        read_exact(&mut file, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = read_u32(&mut file)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = read_u32(&mut file)? as usize;
        let dim = read_u32(&mut file)? as usize;
        let mut data = vec![0.0f32; n * dim];
        let mut bytes = vec![0u8; 4 * n * dim];
        read_exact(&mut file, &mut bytes)?;
        for (v, chunk) in data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after dataset body".into()));
        }
        let features = Matrix::from_vec(n, dim, data)?;

        let meta = std::fs::read_to_string(dir.join("meta.csv"))?;
        let mut identities = Vec::with_capacity(n);
        let mut cameras = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);
        for (lineno, line) in meta.lines().enumerate() {
            if lineno == 0 {
                if line != "sample_index,identity,camera,split" {
                    return Err(Error::Format("bad meta.csv header".into()));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!("meta.csv line {lineno} malformed")));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("meta.csv line {lineno}: bad index")))?;
            if idx != lineno - 1 {
                return Err(Error::Format(format!(
                    "meta.csv line {lineno}: rows out of order"
                )));
            }
            identities.push(
                fields[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("meta.csv line {lineno}: bad identity")))?,
            );
            cameras.push(
                fields[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("meta.csv line {lineno}: bad camera")))?,
            );
            splits.push(Split::parse(fields[3])?);
        }
        if identities.len() != n {
            return Err(Error::Format(format!(
                "meta.csv has {} rows for {n} feature rows",
                identities.len()
            )));
        }
        let ds = Self {
            name,
            features,
            identities,
            cameras,
            splits,
        };
        ds.validate_counts_only()?;
        Ok(ds)
    }

    fn validate_counts_only(&self) -> Result<()> {
        let n = self.len();
        if self.identities.len() != n || self.cameras.len() != n || self.splits.len() != n {
            return Err(Error::Format("metadata/feature row count mismatch".into()));
        }
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated dataset file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// The seeded transform a domain applies to the generating space.
struct DomainParams {
    rotation: Matrix<f64>,
    scale: f64,
    camera_shifts: Matrix<f64>,
    mixing: Matrix<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix<f64> {
    let mut rng = rng_from_seed(seed);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    m
}

/// Modified Gram-Schmidt orthonormalization of the columns. Columns that
/// collapse (blends of two rotations can be rank-deficient) are replaced
/// with a deterministic fill and re-orthogonalized.
fn orthonormalize(m: &Matrix<f64>) -> Result<Matrix<f64>> {
    let n = m.rows();
    let mut q = m.clone();
    for j in 0..n {
        let mut attempt = 0u64;
        loop {
            for k in 0..j {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += q[(r, k)] * q[(r, j)];
                }
                for r in 0..n {
                    let sub = dot * q[(r, k)];
                    q[(r, j)] -= sub;
                }
            }
            let norm: f64 = (0..n).map(|r| q[(r, j)] * q[(r, j)]).sum::<f64>().sqrt();
            if norm >= 1e-9 {
                for r in 0..n {
                    q[(r, j)] /= norm;
                }
                break;
            }
            attempt += 1;
            if attempt > 8 {
                return Err(Error::Data(
                    "degenerate basis during orthonormalization".into(),
                ));
            }
            let fill = gaussian_matrix(n, 1, 1.0, derive_seed(0x0e7b0, &[j as u64, attempt]));
            for r in 0..n {
                q[(r, j)] = fill[(r, 0)];
            }
        }
    }
    Ok(q)
}

fn domain_params(spec: &DomainSpec) -> Result<DomainParams> {
    let seed = spec.gap_seed;
    let rotation = orthonormalize(&gaussian_matrix(D_GEN, D_GEN, 1.0, derive_seed(seed, &[1])))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[2]));
    let scale = rng.gen_range(0.7..1.4);

    // every camera shift shares a domain-level component, which gives the
    // domain a mean offset on top of its rotation/mixing signature
    let domain_shift = gaussian_matrix(1, D_GEN, DOMAIN_SHIFT_STD, derive_seed(seed, &[3]));
    let mut camera_shifts =
        gaussian_matrix(spec.cameras, D_GEN, CAMERA_SHIFT_STD, derive_seed(seed, &[4]));
    for c in 0..spec.cameras {
        for j in 0..D_GEN {
            camera_shifts[(c, j)] += domain_shift[(0, j)];
        }
    }
    let mixing = gaussian_matrix(
        spec.feature_dim,
        D_GEN,
        1.0 / (D_GEN as f64).sqrt(),
        derive_seed(seed, &[5]),
    );
    Ok(DomainParams {
        rotation,
        scale,
        camera_shifts,
        mixing,
    })
}

/// Convex blend of two domains' transforms; used to build "unseen" domains
/// that sit between seen ones.
fn blend_params(a: &DomainParams, b: &DomainParams, gamma: f64) -> Result<DomainParams> {
    if a.camera_shifts.shape() != b.camera_shifts.shape()
        || a.mixing.shape() != b.mixing.shape()
    {
        return Err(Error::Config(
            "blended domains must share cameras and feature_dim".into(),
        ));
    }
    let lerp = |x: &Matrix<f64>, y: &Matrix<f64>| -> Matrix<f64> {
        let mut out = x.scale(gamma);
        out.add_scaled(y, 1.0 - gamma).expect("same shape");
        out
    };
    Ok(DomainParams {
        rotation: orthonormalize(&lerp(&a.rotation, &b.rotation))?,
        scale: gamma * a.scale + (1.0 - gamma) * b.scale,
        camera_shifts: lerp(&a.camera_shifts, &b.camera_shifts),
        mixing: lerp(&a.mixing, &b.mixing),
    })
}

fn generate_with_params(
    spec: &DomainSpec,
    params: &DomainParams,
    id_offset: u32,
) -> Result<DomainDataset> {
    spec.validate()?;
    let n = spec.num_identities * spec.samples_per_identity;
    let dim = spec.feature_dim;

    let embeddings = gaussian_matrix(
        spec.num_identities,
        D_GEN,
        1.0,
        derive_seed(spec.gap_seed, &[6]),
    );
    let mut noise_rng = rng_from_seed(derive_seed(spec.gap_seed, &[7]));

    // evaluation identities: seeded choice of 20%
    let n_eval = ((spec.num_identities as f64) * EVAL_ID_FRACTION).round().max(1.0) as usize;
    let mut id_order: Vec<usize> = (0..spec.num_identities).collect();
    id_order.shuffle(&mut rng_from_seed(derive_seed(spec.gap_seed, &[8])));
    let eval_ids: std::collections::BTreeSet<usize> =
        id_order[..n_eval].iter().copied().collect();

    let mut features = Matrix::zeros(n, dim);
    let mut identities = Vec::with_capacity(n);
    let mut cameras = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut z = vec![0.0f64; D_GEN];
    let mut y = vec![0.0f64; D_GEN];

    let mut row = 0;
    for id_idx in 0..spec.num_identities {
        let query_cam = (id_idx % spec.cameras) as u32;
        for k in 0..spec.samples_per_identity {
            let cam = (k % spec.cameras) as u32;
            let id_row = embeddings.row(id_idx);
            let cam_row = params.camera_shifts.row(cam as usize);
            for (zj, (&e, &c)) in z.iter_mut().zip(id_row.iter().zip(cam_row)) {
                let noise: f64 = noise_rng.sample(StandardNormal);
                *zj = e + c + noise * spec.noise_std;
            }
            // y = scale · R · z
            for (i, yi) in y.iter_mut().enumerate() {
                let acc: f64 = params.rotation.row(i).iter().zip(&z).map(|(&r, &v)| r * v).sum();
                *yi = params.scale * acc;
            }
            // x = M · y
            let out = features.row_mut(row);
            for (i, o) in out.iter_mut().enumerate() {
                let acc: f64 = params.mixing.row(i).iter().zip(&y).map(|(&m, &v)| m * v).sum();
                *o = acc as f32;
            }
            identities.push(id_offset + id_idx as u32);
            cameras.push(cam);
            splits.push(if eval_ids.contains(&id_idx) {
                if cam == query_cam {
                    Split::Query
                } else {
                    Split::Gallery
                }
            } else {
                Split::Train
            });
            row += 1;
        }
    }

    let ds = DomainDataset {
        name: spec.name.clone(),
        features,
        identities,
        cameras,
        splits,
    };
    ds.validate()?;
    check_camera_vs_identity_spread(&ds)?;
    Ok(ds)
}

/// Generate one domain. Identity labels start at `id_offset` so that
/// domains generated with increasing offsets never share labels.
pub fn generate_domain(spec: &DomainSpec, id_offset: u32) -> Result<DomainDataset> {
    let params = domain_params(spec)?;
    generate_with_params(spec, &params, id_offset)
}

/// Generate a domain whose transform is the convex blend of two other
/// specs' transforms (fresh identities from `spec.gap_seed`).
pub fn generate_blended_domain(
    spec: &DomainSpec,
    parent_a: &DomainSpec,
    parent_b: &DomainSpec,
    gamma: f64,
    id_offset: u32,
) -> Result<DomainDataset> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("blend gamma {gamma} outside [0,1]")));
    }
    let pa = domain_params(parent_a)?;
    let pb = domain_params(parent_b)?;
    let params = blend_params(&pa, &pb, gamma)?;
    generate_with_params(spec, &params, id_offset)
}

/// Mean within-identity cross-camera squared distance must stay below the
/// mean cross-identity squared distance; aborts generation otherwise.
fn check_camera_vs_identity_spread(ds: &DomainDataset) -> Result<()> {
    let n = ds.len().min(400);
    let mut within = (0.0f64, 0usize);
    let mut across = (0.0f64, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = ds
                .features
                .row(i)
                .iter()
                .zip(ds.features.row(j))
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            if ds.identities[i] == ds.identities[j] && ds.cameras[i] != ds.cameras[j] {
                within.0 += d2;
                within.1 += 1;
            } else if ds.identities[i] != ds.identities[j] {
                across.0 += d2;
                across.1 += 1;
            }
        }
    }
    if within.1 == 0 || across.1 == 0 {
        return Err(Error::Data("spread check found no comparable pairs".into()));
    }
    let within_mean = within.0 / within.1 as f64;
    let across_mean = across.0 / across.1 as f64;
    if within_mean >= across_mean {
        return Err(Error::Data(format!(
            "camera spread {within_mean:.3} exceeds identity spread {across_mean:.3}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{w2_distance, GaussianStats};

    fn spec(name: &str, seed: u64) -> DomainSpec {
        DomainSpec {
            name: name.into(),
            num_identities: 12,
            samples_per_identity: 8,
            cameras: 4,
            gap_seed: seed,
            noise_std: 0.25,
            feature_dim: 48,
        }
    }

    #[test]
    fn zero_noise_collapses_within_camera() {
        let mut s = spec("a", 3);
        s.noise_std = 0.0;
        let ds = generate_domain(&s, 0).unwrap();
        // samples of one identity under one camera are identical
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                if ds.identities[i] == ds.identities[j] && ds.cameras[i] == ds.cameras[j] {
                    assert_eq!(ds.features.row(i), ds.features.row(j));
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_files_byte_identical() {
        let s = spec("b", 9);
        let d1 = generate_domain(&s, 100).unwrap();
        let d2 = generate_domain(&s, 100).unwrap();
        assert_eq!(d1, d2);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("x");
        let p2 = dir.path().join("y");
        d1.save(&p1).unwrap();
        d2.save(&p2).unwrap();
        assert_eq!(
            std::fs::read(p1.join("features.bin")).unwrap(),
            std::fs::read(p2.join("features.bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(p1.join("meta.csv")).unwrap(),
            std::fs::read(p2.join("meta.csv")).unwrap()
        );
    }

    #[test]
    fn domains_are_farther_apart_than_split_halves() {
        // enough samples per half that the covariance estimate is stable
        let mut sa = spec("a", 11);
        sa.samples_per_identity = 20;
        sa.feature_dim = 32;
        let mut sb = spec("b", 222);
        sb.samples_per_identity = 20;
        sb.feature_dim = 32;
        let a = generate_domain(&sa, 0).unwrap();
        let b = generate_domain(&sb, 1000).unwrap();
        let fit_rows = |ds: &DomainDataset, take_even: Option<bool>| {
            let rows: Vec<usize> = (0..ds.len())
                .filter(|&i| take_even.map_or(true, |even| (i % 2 == 0) == even))
                .collect();
            let (f, _, _) = ds.subset(&rows);
            GaussianStats::fit(&f.cast::<f64>()).unwrap()
        };
        let sa = fit_rows(&a, None);
        let sb = fit_rows(&b, None);
        let gap = w2_distance(&sa, &sb).unwrap();
        let half1 = fit_rows(&a, Some(true));
        let half2 = fit_rows(&a, Some(false));
        let within = w2_distance(&half1, &half2).unwrap();
        assert!(
            gap > 10.0 * within,
            "domain gap {gap} not >> split-half {within}"
        );
    }

    #[test]
    fn identity_labels_disjoint_across_offset_domains() {
        let a = generate_domain(&spec("a", 1), 0).unwrap();
        let b = generate_domain(&spec("b", 2), a.unique_ids(None).len() as u32).unwrap();
        let ids_a: std::collections::BTreeSet<u32> = a.unique_ids(None).into_iter().collect();
        let ids_b: std::collections::BTreeSet<u32> = b.unique_ids(None).into_iter().collect();
        assert!(ids_a.is_disjoint(&ids_b));
    }

    #[test]
    fn roundtrip_and_corruption() {
        let ds = generate_domain(&spec("round", 5), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round");
        ds.save(&path).unwrap();
        let loaded = DomainDataset::load(&path).unwrap();
        assert_eq!(ds, loaded);

        // truncated body
        let bin = path.join("features.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(DomainDataset::load(&path), Err(Error::Format(_))));
        std::fs::write(&bin, &bytes).unwrap();

        // meta/features row mismatch
        let meta = path.join("meta.csv");
        let text = std::fs::read_to_string(&meta).unwrap();
        let shorter: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
        std::fs::write(&meta, shorter.join("\n") + "\n").unwrap();
        assert!(matches!(DomainDataset::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn blended_domain_sits_between_parents() {
        let sa = spec("pa", 31);
        let sb = spec("pb", 77);
        let mut su = spec("unseen", 555);
        su.gap_seed = 555;
        let a = generate_domain(&sa, 0).unwrap();
        let b = generate_domain(&sb, 100).unwrap();
        let u = generate_blended_domain(&su, &sa, &sb, 0.5, 200).unwrap();
        let fit = |ds: &DomainDataset| {
            GaussianStats::fit(&ds.features.cast::<f64>()).unwrap()
        };
        let (fa, fb, fu) = (fit(&a), fit(&b), fit(&u));
        let dua = w2_distance(&fu, &fa).unwrap();
        let dub = w2_distance(&fu, &fb).unwrap();
        let dab = w2_distance(&fa, &fb).unwrap();
        // the blend is closer to each parent than the parents are to each other
        assert!(dua < dab, "{dua} vs {dab}");
        assert!(dub < dab, "{dub} vs {dab}");
    }

    #[test]
    fn protocol_invariants_validated() {
        let ds = generate_domain(&spec("v", 8), 0).unwrap();
        ds.validate().unwrap();
        let mut broken = ds.clone();
        // move a query identity into train
        let qi = broken.indices_of(Split::Query)[0];
        broken.splits[qi] = Split::Train;
        assert!(broken.validate().is_err());
    }
}
