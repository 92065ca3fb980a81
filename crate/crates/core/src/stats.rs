//! Per-domain Gaussian feature statistics and the 2-Wasserstein distance
//! between them.
//!
//! One `GaussianStats` per learned domain is all the auto-selector keeps
//! around; no samples are ever stored.

use crate::error::{Error, Result};
use crate::numerics::{singular_values, sqrtm_psd, Matrix};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 8] = b"ADLSTATS";
const VERSION: u32 = 1;
/// Fallback ridge applied only when the exact square-root path reports a
/// non-PSD operand (degenerate covariance estimates).
const COV_RIDGE: f64 = 1e-6;

/// Mean and covariance of a feature distribution, with the sample count
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    dim: usize,
    count: u64,
    mean: Vec<f64>,
    cov: Matrix<f64>,
}

impl GaussianStats {
    /// Fit mean and unbiased (N−1) covariance to feature rows.
    pub fn fit(features: &Matrix<f64>) -> Result<Self> {
        let n = features.rows();
        let dim = features.cols();
        if n < 2 {
            return Err(Error::InsufficientSamples(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        if dim == 0 {
            return Err(Error::Dim("features have zero dimension".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }

        let nf = n as f64;
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(features.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= nf;
        }

        let mut cov = Matrix::zeros(dim, dim);
        let mut centered = vec![0.0; dim];
        for r in 0..n {
            for (c, (&x, &m)) in centered.iter_mut().zip(features.row(r).iter().zip(&mean)) {
                *c = x - m;
            }
            for i in 0..dim {
                let ci = centered[i];
                let row = cov.row_mut(i);
                for j in i..dim {
                    row[j] += ci * centered[j];
                }
            }
        }
        let denom = nf - 1.0;
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(Self {
            dim,
            count: n as u64,
            mean,
            cov,
        })
    }

    pub fn from_parts(mean: Vec<f64>, cov: Matrix<f64>, count: u64) -> Result<Self> {
        let dim = mean.len();
        if cov.shape() != (dim, dim) {
            return Err(Error::Dim(format!(
                "mean has dim {dim} but covariance is {}x{}",
                cov.rows(),
                cov.cols()
            )));
        }
        if count < 2 {
            return Err(Error::InsufficientSamples(
                "stats require count >= 2".into(),
            ));
        }
        Ok(Self {
            dim,
            count,
            mean,
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix<f64> {
        &self.cov
    }

    /// Serialize: magic, u32 version, u32 dim, u64 count, dim f64 means,
    /// dim² f64 covariance entries (row-major), all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + 8 * (self.dim + self.dim * self.dim));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.count.to_le_bytes());
        for &m in &self.mean {
            buf.extend_from_slice(&m.to_le_bytes());
        }
        for &c in self.cov.data() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        read_exact(&mut file, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad stats magic in {}",
                path.display()
            )));
        }
        let version = read_u32(&mut file)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported stats version {version}")));
        }
        let dim = read_u32(&mut file)? as usize;
        if dim == 0 {
            return Err(Error::Format("stats dim is zero".into()));
        }
        let count = read_u64(&mut file)?;
        let mut mean = vec![0.0; dim];
        for m in &mut mean {
            *m = read_f64(&mut file)?;
        }
        let mut cov_data = vec![0.0; dim * dim];
        for c in &mut cov_data {
            *c = read_f64(&mut file)?;
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after stats body".into()));
        }
        let cov = Matrix::from_vec(dim, dim, cov_data)?;
        Self::from_parts(mean, cov, count)
    }

    /// On-disk size in bytes for a given dimension.
    pub fn file_size_bytes(dim: usize) -> usize {
        24 + 8 * (dim + dim * dim)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated stats file".into())
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

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2·√(Σa Σb))`.
///
/// The cross term uses the symmetric equivalent `Tr(√(Σa^{1/2} Σb Σa^{1/2}))`,
/// evaluated as the nuclear norm `Σσ(Σa^{1/2}·Σb^{1/2})` — the same trace,
/// but computed by one-sided Jacobi SVD so small spectrum directions are not
/// squared away. If a degenerate estimate trips the PSD check, both
/// covariances are retried with a small shared ridge (which cancels in the
/// self-distance).
pub fn w2_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Dim(format!(
            "w2 distance between dim {} and dim {}",
            a.dim, b.dim
        )));
    }
    match w2_with(a, b, 0.0) {
        Err(Error::NotPsd(_)) => w2_with(a, b, COV_RIDGE),
        other => other,
    }
}

fn w2_with(a: &GaussianStats, b: &GaussianStats, ridge: f64) -> Result<f64> {
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();

    let mut cov_a = a.cov.symmetrized();
    let mut cov_b = b.cov.symmetrized();
    if ridge > 0.0 {
        for i in 0..a.dim {
            cov_a[(i, i)] += ridge;
            cov_b[(i, i)] += ridge;
        }
    }

    let root_a = sqrtm_psd(&cov_a)?;
    let root_b = sqrtm_psd(&cov_b)?;
    let cross: f64 = singular_values(&root_a.matmul(&root_b)?)?.iter().sum();

    let d = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if d < -1e-8 {
        return Err(Error::NonFinite(format!(
            "wasserstein distance came out {d}, below the negativity tolerance"
        )));
    }
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn diag_stats(mean: &[f64], diag: &[f64]) -> GaussianStats {
        let d = mean.len();
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            cov[(i, i)] = diag[i];
        }
        GaussianStats::from_parts(mean.to_vec(), cov, 10).unwrap()
    }

    fn random_stats(dim: usize, seed: u64) -> GaussianStats {
        let mut rng = crate::rng::rng_from_seed(seed);
        let mean = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b = Matrix::from_vec(
            dim,
            dim,
            (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let cov = b.matmul_nt(&b).unwrap().symmetrized();
        GaussianStats::from_parts(mean, cov, 50).unwrap()
    }

    #[test]
    fn two_point_fit_matches_definition() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let s = GaussianStats::fit(&f).unwrap();
        assert_eq!(s.mean(), &[1.0, 0.0]);
        assert_eq!(s.cov()[(0, 0)], 2.0);
        assert_eq!(s.cov()[(0, 1)], 0.0);
        assert_eq!(s.cov()[(1, 1)], 0.0);
    }

    #[test]
    fn identical_rows_give_zero_covariance() {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![1.5, -2.0]).collect();
        let f = Matrix::from_rows(&rows).unwrap();
        let s = GaussianStats::fit(&f).unwrap();
        assert_eq!(s.cov().max_abs(), 0.0);
    }

    #[test]
    fn fit_matches_two_pass_oracle_on_sampled_gaussian() {
        // independent oracle: plain two-pass mean then covariance, written
        // directly against the textbook definition
        let mut rng = crate::rng::rng_from_seed(99);
        let n = 500;
        let dim = 3;
        let mut rows = Vec::new();
        for _ in 0..n {
            let z: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            rows.push(vec![z[0] * 2.0, z[1] + 0.5 * z[0], z[2] * 0.3 + 1.0]);
        }
        let f = Matrix::from_rows(&rows).unwrap();
        let s = GaussianStats::fit(&f).unwrap();

        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        let mut cov = vec![vec![0.0; dim]; dim];
        for r in &rows {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n as f64 - 1.0);
                }
            }
        }
        for i in 0..dim {
            assert!((s.mean()[i] - mean[i]).abs() < 1e-12);
            for j in 0..dim {
                assert!((s.cov()[(i, j)] - cov[i][j]).abs() < 1e-12);
            }
        }
        // sampled moments should be near the generating ones
        assert!((s.mean()[2] - 1.0).abs() < 0.1);
        assert!((s.cov()[(0, 0)] - 4.0).abs() < 0.6);
    }

    #[test]
    fn fit_needs_two_samples() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            GaussianStats::fit(&f),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn self_distance_is_zero() {
        for seed in 0..5 {
            let s = random_stats(6, seed);
            assert!(w2_distance(&s, &s).unwrap() < 1e-8);
        }
    }

    #[test]
    fn shared_covariance_reduces_to_mean_term() {
        let a = diag_stats(&[1.0, 0.0], &[0.7, 0.4]);
        let b = diag_stats(&[0.0, 0.0], &[0.7, 0.4]);
        let d = w2_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-10);
    }

    #[test]
    fn diagonal_closed_form_case() {
        // ‖Δμ‖² + Tr(Σa) + Tr(Σb) − 2·Tr(√(ΣaΣb)) = 1 + 5 + 5 − 2·(2+2) = 3
        let a = diag_stats(&[0.0, 0.0], &[1.0, 4.0]);
        let b = diag_stats(&[1.0, 0.0], &[4.0, 1.0]);
        let d = w2_distance(&a, &b).unwrap();
        assert!((d - 3.0).abs() < 1e-10, "got {d}");
    }

    #[test]
    fn symmetry_and_translation_invariance() {
        for seed in 0..10 {
            let a = random_stats(5, 1000 + seed);
            let b = random_stats(5, 2000 + seed);
            let dab = w2_distance(&a, &b).unwrap();
            let dba = w2_distance(&b, &a).unwrap();
            assert!((dab - dba).abs() < 1e-8);

            let shift: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 1.0).collect();
            let shifted = |s: &GaussianStats| {
                let mean = s.mean().iter().zip(&shift).map(|(&m, &t)| m + t).collect();
                GaussianStats::from_parts(mean, s.cov().clone(), s.count()).unwrap()
            };
            let d2 = w2_distance(&shifted(&a), &shifted(&b)).unwrap();
            assert!((dab - d2).abs() < 1e-8);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = random_stats(4, 1);
        let b = random_stats(5, 2);
        assert!(matches!(w2_distance(&a, &b), Err(Error::Dim(_))));
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.stats");
        let s = random_stats(7, 5);
        s.save(&path).unwrap();
        let loaded = GaussianStats::load(&path).unwrap();
        assert_eq!(s, loaded);
        assert_eq!(
            std::fs::metadata(&path).unwrap().len() as usize,
            GaussianStats::file_size_bytes(7)
        );
    }

    #[test]
    fn stats_file_size_matches_layout() {
        // 64-bit body: header + 8·(dim + dim²)
        assert_eq!(
            GaussianStats::file_size_bytes(768),
            24 + 8 * (768 + 768 * 768)
        );
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stats");
        let s = random_stats(4, 9);
        s.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(
            GaussianStats::load(&path),
            Err(Error::Format(_))
        ));
        std::fs::write(&path, b"NOTSTATS").unwrap();
        assert!(matches!(
            GaussianStats::load(&path),
            Err(Error::Format(_))
        ));
    }
}
