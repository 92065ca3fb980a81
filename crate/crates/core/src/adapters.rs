//! Low-rank adapter banks attached to frozen linear layers.
//!
//! A layer computes `f̃ = W_o·f + b_o + (α/r)·Σₜ sₜ·up⁽ᵗ⁾·down⁽ᵗ⁾·f`: the
//! down projection is applied first, then the up projection, one adapter
//! per lifelong step. Because the sum is linear in the weights, the whole
//! bank collapses into a single merged matrix for inference.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::rng::rng_from_seed;
use crate::selector::MixWeights;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Standard deviation for the seeded Gaussian init of the down projection.
/// The up projection starts at zero so a fresh adapter is a no-op.
const DOWN_INIT_STD: f64 = 0.02;

/// One low-rank pair. `down` is applied first (r×d_in), `up` second
/// (d_out×r); note this is the reverse of the lettering in some adapter
/// write-ups, which apply their "B" matrix first.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub down: Matrix<T>,
    pub up: Matrix<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn seeded(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::Param(format!(
                "rank {rank} invalid for a {d_out}x{d_in} layer"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::Param(format!("alpha {alpha} must be positive")));
        }
        let mut rng = rng_from_seed(seed);
        let mut down = Matrix::zeros(rank, d_in);
        for v in down.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::from_f64(z * DOWN_INIT_STD);
        }
        Ok(Self {
            down,
            up: Matrix::zeros(d_out, rank),
            rank,
            alpha,
        })
    }

    /// `(α/r)` scaling applied to this adapter's delta.
    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    /// Dense delta `(α/r)·up·down`, shape d_out×d_in.
    pub fn scaled_delta(&self) -> Result<Matrix<T>> {
        Ok(self.up.matmul(&self.down)?.scale(self.scale()))
    }
}

/// A frozen linear layer plus its ordered adapter bank (index = lifelong
/// step). Activations are rows: `y = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear<T> {
    weight: Matrix<T>,
    bias: Matrix<T>,
    adapters: Vec<LoraAdapter<T>>,
}

impl<T: Scalar> AdaptedLinear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Dim(format!(
                "bias len {} for a {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Self {
            weight,
            bias: Matrix::row_vec(&bias),
            adapters: Vec::new(),
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        self.bias.row(0)
    }

    pub(crate) fn last_adapter_mut(&mut self) -> Option<&mut LoraAdapter<T>> {
        self.adapters.last_mut()
    }

    pub(crate) fn weight_and_bias_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    /// Mutable access to the bank. Mutation is single-writer by contract;
    /// training only ever touches the newest adapter.
    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    /// Append a zero-delta adapter; returns its index.
    pub fn add_adapter(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<usize> {
        let adapter = LoraAdapter::seeded(self.d_in(), self.d_out(), rank, alpha, seed)?;
        self.adapters.push(adapter);
        Ok(self.adapters.len() - 1)
    }

    fn base_forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul_nt(&self.weight)?;
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(self.bias.row(0)) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Base output plus a single adapter's full delta.
    pub fn forward_single(&self, adapter_index: usize, x: &Matrix<T>) -> Result<Matrix<T>> {
        let adapter = self.adapters.get(adapter_index).ok_or_else(|| {
            Error::Index(format!(
                "adapter {adapter_index} of {}",
                self.adapters.len()
            ))
        })?;
        let mut y = self.base_forward(x)?;
        let low = x.matmul_nt(&adapter.down)?;
        let delta = low.matmul_nt(&adapter.up)?;
        y.add_scaled(&delta, adapter.scale())?;
        Ok(y)
    }

    /// Base output plus the similarity-weighted sum of all adapter deltas.
    pub fn forward_mixed(&self, s: &MixWeights, x: &Matrix<T>) -> Result<Matrix<T>> {
        if s.len() != self.adapters.len() {
            return Err(Error::Dim(format!(
                "{} mixing weights for {} adapters",
                s.len(),
                self.adapters.len()
            )));
        }
        let mut y = self.base_forward(x)?;
        for (adapter, &w) in self.adapters.iter().zip(s.weights()) {
            if w == 0.0 {
                continue;
            }
            let low = x.matmul_nt(&adapter.down)?;
            let delta = low.matmul_nt(&adapter.up)?;
            y.add_scaled(&delta, adapter.scale() * T::from_f64(w))?;
        }
        Ok(y)
    }

    /// Collapse the weighted bank into plain weights:
    /// `W̃ = W + (α/r)·Σₜ sₜ·up⁽ᵗ⁾·down⁽ᵗ⁾`. The bias is untouched.
    pub fn merged(&self, s: &MixWeights) -> Result<(Matrix<T>, Vec<T>)> {
        if s.len() != self.adapters.len() {
            return Err(Error::Dim(format!(
                "{} mixing weights for {} adapters",
                s.len(),
                self.adapters.len()
            )));
        }
        let mut w = self.weight.clone();
        for (adapter, &sw) in self.adapters.iter().zip(s.weights()) {
            if sw == 0.0 {
                continue;
            }
            let delta = adapter.up.matmul(&adapter.down)?;
            w.add_scaled(&delta, adapter.scale() * T::from_f64(sw))?;
        }
        Ok((w, self.bias.row(0).to_vec()))
    }

    /// Like [`merged`](Self::merged) but only over the first `count`
    /// adapters — used to fold the frozen prefix during step training.
    pub fn merged_prefix(&self, s: &[f64], count: usize) -> Result<(Matrix<T>, Vec<T>)> {
        if count > self.adapters.len() || s.len() < count {
            return Err(Error::Dim(format!(
                "prefix of {count} adapters with {} weights over a bank of {}",
                s.len(),
                self.adapters.len()
            )));
        }
        let mut w = self.weight.clone();
        for (adapter, &sw) in self.adapters.iter().take(count).zip(s) {
            if sw == 0.0 {
                continue;
            }
            let delta = adapter.up.matmul(&adapter.down)?;
            w.add_scaled(&delta, adapter.scale() * T::from_f64(sw))?;
        }
        Ok((w, self.bias.row(0).to_vec()))
    }
}

/// Site families an adapter can be plugged into. `Ffn` covers both linear
/// layers of the block MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterSite {
    Q,
    K,
    V,
    Proj,
    Ffn,
}

impl AdapterSite {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterSite::Q => "q",
            AdapterSite::K => "k",
            AdapterSite::V => "v",
            AdapterSite::Proj => "proj",
            AdapterSite::Ffn => "ffn",
        }
    }
}

impl std::str::FromStr for AdapterSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(AdapterSite::Q),
            "k" => Ok(AdapterSite::K),
            "v" => Ok(AdapterSite::V),
            "proj" => Ok(AdapterSite::Proj),
            "ffn" => Ok(AdapterSite::Ffn),
            other => Err(Error::Param(format!("unknown adapter site '{other}'"))),
        }
    }
}

/// Shape description for storage accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StorageConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub sites: Vec<AdapterSite>,
    pub rank: usize,
    pub stats_dim: usize,
}

/// Per-dataset storage figures, in bytes.
#[derive(Debug, Clone, Serialize)]
pub struct StorageReport {
    /// Adapter tensors at training precision (4 bytes/value).
    pub adapter_bytes: u64,
    /// Statistics at the 4-bytes/value accounting tier.
    pub stats_bytes_accounting: u64,
    /// Statistics as actually written to disk (64-bit body plus header).
    pub stats_file_bytes: u64,
}

impl StorageReport {
    pub fn adapter_mib(&self) -> f64 {
        self.adapter_bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn stats_accounting_mib(&self) -> f64 {
        self.stats_bytes_accounting as f64 / (1024.0 * 1024.0)
    }

    pub fn stats_file_mib(&self) -> f64 {
        self.stats_file_bytes as f64 / (1024.0 * 1024.0)
    }
}

/// Per-dataset adapter and statistics storage for a configuration.
///
/// Adapter bytes are `Σ_sites 4·r·(d_in + d_out)`; a rank of zero means no
/// adapters and zero cost.
pub fn storage_bytes(cfg: &StorageConfig) -> StorageReport {
    let mut per_block = 0u64;
    for site in &cfg.sites {
        let dims: &[(usize, usize)] = match site {
            AdapterSite::Q | AdapterSite::K | AdapterSite::V | AdapterSite::Proj => {
                &[(cfg.d_model, cfg.d_model)]
            }
            AdapterSite::Ffn => &[(cfg.d_model, cfg.ffn_dim), (cfg.ffn_dim, cfg.d_model)],
        };
        for &(d_in, d_out) in dims {
            per_block += 4 * cfg.rank as u64 * (d_in + d_out) as u64;
        }
    }
    let d = cfg.stats_dim as u64;
    StorageReport {
        adapter_bytes: per_block * cfg.blocks as u64,
        stats_bytes_accounting: 4 * (d + d * d),
        stats_file_bytes: crate::stats::GaussianStats::file_size_bytes(cfg.stats_dim) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(w: f64, b: f64) -> AdaptedLinear<f64> {
        AdaptedLinear::new(Matrix::filled(1, 1, w), vec![b]).unwrap()
    }

    fn set_scalar_adapter(layer: &mut AdaptedLinear<f64>, down: f64, up: f64, alpha: f64) {
        let idx = layer.add_adapter(1, alpha, 0).unwrap();
        let a = &mut layer.adapters_mut()[idx];
        a.down = Matrix::filled(1, 1, down);
        a.up = Matrix::filled(1, 1, up);
    }

    fn random_layer(
        d_in: usize,
        d_out: usize,
        rank: usize,
        n_adapters: usize,
        seed: u64,
    ) -> AdaptedLinear<f32> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let w = Matrix::from_vec(
            d_out,
            d_in,
            (0..d_in * d_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let b = (0..d_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let mut layer = AdaptedLinear::new(w, b).unwrap();
        for t in 0..n_adapters {
            let idx = layer.add_adapter(rank, 4.0 * rank as f64, seed + t as u64).unwrap();
            // give the up matrix real content so deltas are nonzero
            for v in layer.adapters_mut()[idx].up.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        layer
    }

    fn random_mix(n: usize, seed: u64) -> MixWeights {
        let mut rng = crate::rng::rng_from_seed(seed);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        MixWeights::from_weights(raw.iter().map(|x| x / sum).collect()).unwrap()
    }

    #[test]
    fn scalar_hand_case_single() {
        // W=2, b=0, α/r=2, down=1, up=1, f=3 → 6 + 2·3 = 12
        let mut layer = scalar_layer(2.0, 0.0);
        set_scalar_adapter(&mut layer, 1.0, 1.0, 2.0);
        let y = layer
            .forward_single(0, &Matrix::filled(1, 1, 3.0))
            .unwrap();
        assert_eq!(y[(0, 0)], 12.0);
    }

    #[test]
    fn fresh_adapter_leaves_the_function_unchanged() {
        let mut layer = random_layer(6, 4, 2, 0, 3);
        let x = Matrix::filled(2, 6, 0.3f32);
        let before = layer.base_forward(&x).unwrap();
        layer.add_adapter(2, 8.0, 7).unwrap();
        let after = layer
            .forward_mixed(&MixWeights::from_weights(vec![1.0]).unwrap(), &x)
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn scalar_hand_case_mixed_cancels() {
        // base 2·3=6; adapters (+1·1) and (+1·−1), α/r=2, s=[½,½] → 6
        let mut layer = scalar_layer(2.0, 0.0);
        set_scalar_adapter(&mut layer, 1.0, 1.0, 2.0);
        set_scalar_adapter(&mut layer, 1.0, -1.0, 2.0);
        let s = MixWeights::from_weights(vec![0.5, 0.5]).unwrap();
        let y = layer.forward_mixed(&s, &Matrix::filled(1, 1, 3.0)).unwrap();
        assert_eq!(y[(0, 0)], 6.0);
        // and the merged weight is 2 + 2·(0.5·1 + 0.5·(−1)) = 2
        let (w, _) = layer.merged(&s).unwrap();
        assert_eq!(w[(0, 0)], 2.0);
    }

    #[test]
    fn one_hot_mixing_reduces_to_single() {
        let layer = random_layer(8, 8, 3, 3, 11);
        let x = Matrix::from_vec(4, 8, (0..32).map(|i| (i as f32) * 0.1 - 1.5).collect()).unwrap();
        for k in 0..3 {
            let s = MixWeights::one_hot(3, k).unwrap();
            let mixed = layer.forward_mixed(&s, &x).unwrap();
            let single = layer.forward_single(k, &x).unwrap();
            assert!(mixed.max_abs_diff(&single) < 1e-5);
        }
    }

    #[test]
    fn merged_equals_mixed_forward() {
        let mut rng = crate::rng::rng_from_seed(21);
        for trial in 0..30 {
            let d_in = rng.gen_range(2..17);
            let d_out = rng.gen_range(2..17);
            let rank = rng.gen_range(1..=d_in.min(d_out));
            let n_adapters = rng.gen_range(1..5);
            let layer = random_layer(d_in, d_out, rank, n_adapters, 100 + trial);
            let s = random_mix(n_adapters, 200 + trial);
            let (w, b) = layer.merged(&s).unwrap();
            let plain = AdaptedLinear::new(w, b).unwrap();
            for probe in 0..5 {
                let x = Matrix::from_vec(
                    3,
                    d_in,
                    (0..3 * d_in)
                        .map(|_| rng.gen_range(-1.0f32..1.0))
                        .collect(),
                )
                .unwrap();
                let _ = probe;
                let mixed = layer.forward_mixed(&s, &x).unwrap();
                let merged = plain.base_forward(&x).unwrap();
                assert!(mixed.max_abs_diff(&merged) < 1e-5);
            }
        }
    }

    #[test]
    fn mixing_length_mismatch_rejected() {
        let layer = random_layer(4, 4, 2, 2, 5);
        let s = MixWeights::from_weights(vec![1.0]).unwrap();
        let x = Matrix::zeros(1, 4);
        assert!(matches!(layer.forward_mixed(&s, &x), Err(Error::Dim(_))));
        assert!(matches!(layer.merged(&s), Err(Error::Dim(_))));
    }

    #[test]
    fn adapter_index_out_of_range() {
        let layer = random_layer(4, 4, 2, 1, 5);
        let x = Matrix::zeros(1, 4);
        assert!(matches!(
            layer.forward_single(1, &x),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn add_adapter_is_seeded_and_zero_init() {
        let mut a = random_layer(6, 6, 2, 0, 1);
        let mut b = random_layer(6, 6, 2, 0, 1);
        a.add_adapter(3, 12.0, 42).unwrap();
        b.add_adapter(3, 12.0, 42).unwrap();
        assert_eq!(a.adapters()[0].down, b.adapters()[0].down);
        assert_eq!(a.adapters()[0].up.max_abs(), 0.0);
        // rank exceeding the layer dims is rejected
        assert!(matches!(
            a.add_adapter(7, 12.0, 1),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn paper_shape_storage_numbers() {
        let report = storage_bytes(&StorageConfig {
            blocks: 12,
            d_model: 768,
            ffn_dim: 3072,
            sites: vec![AdapterSite::Q, AdapterSite::K, AdapterSite::V, AdapterSite::Proj],
            rank: 64,
            stats_dim: 768,
        });
        assert_eq!(report.adapter_bytes, 18_874_368);
        assert!((report.adapter_mib() - 18.0).abs() < 1e-9);
        // 4·(768 + 768²) ≈ 2.25 MiB, the 4-byte accounting tier
        assert_eq!(report.stats_bytes_accounting, 4 * (768 + 768 * 768));
        assert!((report.stats_accounting_mib() - 2.25).abs() < 0.01);
        assert_eq!(report.stats_file_bytes, 24 + 8 * (768 + 768 * 768));
    }

    #[test]
    fn ffn_only_storage_matches_two_layers() {
        let report = storage_bytes(&StorageConfig {
            blocks: 12,
            d_model: 768,
            ffn_dim: 3072,
            sites: vec![AdapterSite::Ffn],
            rank: 64,
            stats_dim: 768,
        });
        assert!((report.adapter_mib() - 22.5).abs() < 1e-9);
    }

    #[test]
    fn zero_rank_means_zero_bytes() {
        let report = storage_bytes(&StorageConfig {
            blocks: 12,
            d_model: 768,
            ffn_dim: 3072,
            sites: vec![AdapterSite::Q],
            rank: 0,
            stats_dim: 4,
        });
        assert_eq!(report.adapter_bytes, 0);
    }
}
