//! Heavier randomized property suites over the numeric core; the
//! per-module unit tests cover the same contracts on small fixed cases.

use adl_core::adapters::AdapterSite;
use adl_core::encoder::{Encoder, EncoderConfig};
use adl_core::numerics::{sqrtm_psd, sym_eig, Matrix};
use adl_core::rng::rng_from_seed;
use adl_core::selector::{similarity, MixWeights};
use rand::Rng;

fn random_spd(dim: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Matrix<f64> {
    let b = Matrix::from_vec(
        dim,
        dim,
        (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    b.matmul_nt(&b).unwrap().symmetrized()
}

#[test]
fn eigendecomposition_corpus_up_to_64() {
    let mut rng = rng_from_seed(1001);
    let mut worst_rec = 0.0f64;
    let mut worst_orth = 0.0f64;
    let mut worst_sqrt = 0.0f64;
    for trial in 0..1000 {
        // bias toward small dims so the corpus stays fast, but every tenth
        // draw goes large
        let dim = if trial % 10 == 0 {
            rng.gen_range(32..=64)
        } else {
            rng.gen_range(2..=31)
        };
        let a = random_spd(dim, &mut rng);
        let (lam, v) = sym_eig(&a).unwrap();
        assert!(lam.windows(2).all(|w| w[0] <= w[1]), "unsorted eigenvalues");

        // reconstruction V·diag(λ)·Vᵀ
        let mut scaled = v.clone();
        for r in 0..dim {
            for c in 0..dim {
                scaled[(r, c)] *= lam[c];
            }
        }
        let rec = scaled.matmul_nt(&v).unwrap();
        worst_rec = worst_rec.max(rec.sub(&a).unwrap().frob_norm() / a.frob_norm());

        let vtv = v.matmul_tn(&v).unwrap();
        worst_orth = worst_orth.max(vtv.max_abs_diff(&Matrix::identity(dim)));

        let root = sqrtm_psd(&a).unwrap();
        let rr = root.matmul(&root).unwrap();
        worst_sqrt = worst_sqrt.max(rr.sub(&a).unwrap().frob_norm() / a.frob_norm());
    }
    assert!(worst_rec < 1e-8, "reconstruction {worst_rec}");
    assert!(worst_orth < 1e-8, "orthonormality {worst_orth}");
    assert!(worst_sqrt < 1e-7, "sqrtm squaring {worst_sqrt}");
}

#[test]
fn selector_limits_at_extreme_temperatures() {
    let mut rng = rng_from_seed(1002);
    for _ in 0..200 {
        let n = rng.gen_range(2..6);
        let mut d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..9.0)).collect();
        // force a unique minimum
        let arg = rng.gen_range(0..n);
        d[arg] = 0.1;
        let cold = similarity(&d, 1e-3).unwrap();
        assert!(
            cold.weights()[arg] > 1.0 - 1e-3,
            "argmin weight {} at τ→0",
            cold.weights()[arg]
        );
        let hot = similarity(&d, 1e3).unwrap();
        for &w in hot.weights() {
            assert!((w - 1.0 / n as f64).abs() < 1e-3, "τ→∞ weight {w}");
        }
    }
}

#[test]
fn new_adapter_with_zero_weight_never_changes_the_function() {
    let cfg = EncoderConfig {
        blocks: 2,
        d_model: 16,
        heads: 2,
        ffn_dim: 24,
        tokens: 3,
        patch_dim: 5,
        sites: vec![AdapterSite::Q, AdapterSite::V, AdapterSite::Proj],
    };
    let mut rng = rng_from_seed(1003);
    let mut enc = Encoder::<f32>::seeded(cfg.clone(), 77).unwrap();
    enc.add_step_adapters(4, 16.0, 1).unwrap();
    // give the first adapter real content
    for block in &mut enc.blocks {
        for slot in adl_core::encoder::Slot::ALL {
            let lin = block.linear_mut(slot);
            if lin.adapter_count() > 0 {
                for a in lin.adapters_mut() {
                    for v in a.up.data_mut() {
                        *v = rng.gen_range(-0.1..0.1);
                    }
                }
            }
        }
    }
    let batch = Matrix::from_vec(
        5,
        cfg.sample_dim(),
        (0..5 * cfg.sample_dim()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let before = enc
        .encode_mixed(&batch, &vec![MixWeights::one_hot(1, 0).unwrap(); cfg.blocks])
        .unwrap();

    enc.add_step_adapters(4, 16.0, 2).unwrap();
    // previous weights extended by s_new = 0
    let extended = MixWeights::from_weights(vec![1.0, 0.0]).unwrap();
    let after = enc
        .encode_mixed(&batch, &vec![extended; cfg.blocks])
        .unwrap();
    assert_eq!(before, after);
}

#[test]
fn mixing_is_linear_in_the_weights() {
    // the adapter delta of a blend equals the blend of adapter deltas
    let mut rng = rng_from_seed(1004);
    let mut layer = adl_core::adapters::AdaptedLinear::new(
        Matrix::from_vec(6, 5, (0..30).map(|_| rng.gen_range(-0.5f32..0.5)).collect()).unwrap(),
        vec![0.0; 6],
    )
    .unwrap();
    for t in 0..3u64 {
        layer.add_adapter(2, 8.0, t).unwrap();
    }
    for a in layer.adapters_mut() {
        for v in a.up.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let x = Matrix::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();

    let w1 = MixWeights::from_weights(vec![0.6, 0.3, 0.1]).unwrap();
    let w2 = MixWeights::from_weights(vec![0.2, 0.3, 0.5]).unwrap();
    let gamma = 0.35f64;
    let blend: Vec<f64> = w1
        .weights()
        .iter()
        .zip(w2.weights())
        .map(|(&a, &b)| gamma * a + (1.0 - gamma) * b)
        .collect();
    let wb = MixWeights::from_weights(blend).unwrap();

    let base = {
        let fresh = adl_core::adapters::AdaptedLinear::new(layer.weight().clone(), layer.bias().to_vec()).unwrap();
        let mut y = x.matmul_nt(fresh.weight()).unwrap();
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(fresh.bias()) {
                *v += b;
            }
        }
        y
    };
    let delta = |w: &MixWeights| {
        let out = layer.forward_mixed(w, &x).unwrap();
        out.sub(&base).unwrap()
    };
    let d1 = delta(&w1);
    let d2 = delta(&w2);
    let db = delta(&wb);
    let mut expected = d1.scale(gamma as f32);
    expected.add_scaled(&d2, (1.0 - gamma) as f32).unwrap();
    assert!(db.max_abs_diff(&expected) < 1e-5);
}
