//! The lifelong loop: one call per incoming domain, no rehearsal.
//!
//! `run_step` fits the domain's statistics from a held-out validation
//! split, registers a fresh adapter at every site, computes the
//! training-time mixing weights, then runs the two training stages.
//! `infer_features` routes a test set by its statistics, merges the banks
//! once per block, and encodes everything with plain weights.

use crate::checkpoint::{BlobReader, BlobWriter, TensorEntry};
use crate::data::{DomainDataset, Split};
use crate::encoder::{Encoder, EncoderConfig, Slot};
use crate::error::{Error, Result};
use crate::eval::RankScore;
use crate::numerics::Matrix;
use crate::rng::{derive_seed, rng_from_seed};
use crate::selector::{similarity, MixWeights, ScheduleConfig};
use crate::stats::GaussianStats;
use crate::training::{
    stage1_train_prototypes, stage2_train_adapter, write_loss_csv, LossRow, PrototypeBank,
    StepPrototypes, TrainConfig,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Fraction of each training identity's samples held out for statistics.
const VALIDATION_FRACTION: f64 = 0.15;
const MANIFEST_VERSION: u32 = 1;

pub struct LifelongState {
    pub encoder: Encoder<f32>,
    pub prototypes: PrototypeBank<f32>,
    pub stats: Vec<GaussianStats>,
    pub domains: Vec<String>,
    pub schedule: ScheduleConfig,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub seen_ids: BTreeSet<u32>,
    pub log: Vec<LossRow>,
}

/// How inference picks its mixing weights.
#[derive(Debug, Clone, Copy)]
pub enum Routing {
    /// Eq.-style auto-selection from the test set's statistics.
    Auto,
    /// Force an exact one-hot on the given stored domain.
    ForcedDomain(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    /// Cap on how many test samples feed the statistics fit (None = all).
    pub stats_samples: Option<usize>,
    /// Salt for the seeded subsample when `stats_samples` is set.
    pub trial_seed: u64,
    pub routing: Routing,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            stats_samples: None,
            trial_seed: 0,
            routing: Routing::Auto,
        }
    }
}

pub struct Inference {
    pub features: Matrix<f32>,
    pub per_block_mix: Vec<MixWeights>,
    /// Squared Wasserstein distances to each stored domain (empty under
    /// forced routing).
    pub distances: Vec<f64>,
}

pub struct StepReport {
    pub step: usize,
    pub domain: String,
    pub stage1_accuracy: f64,
    /// Training-time mixing at the deepest block.
    pub deep_mix: MixWeights,
}

impl LifelongState {
    pub fn new(
        frozen_base: Encoder<f32>,
        schedule: ScheduleConfig,
        adapter_rank: usize,
        adapter_alpha: f64,
    ) -> Result<Self> {
        schedule.validate()?;
        if schedule.total_layers != frozen_base.cfg.blocks {
            return Err(Error::Config(format!(
                "schedule covers {} layers but the encoder has {} blocks",
                schedule.total_layers, frozen_base.cfg.blocks
            )));
        }
        if frozen_base.adapter_steps() != 0 {
            return Err(Error::State("base encoder must start without adapters".into()));
        }
        if adapter_rank == 0 || adapter_alpha <= 0.0 {
            return Err(Error::Param("adapter rank and alpha must be positive".into()));
        }
        Ok(Self {
            encoder: frozen_base,
            prototypes: PrototypeBank::default(),
            stats: Vec::new(),
            domains: Vec::new(),
            schedule,
            adapter_rank,
            adapter_alpha,
            seen_ids: BTreeSet::new(),
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> usize {
        self.domains.len()
    }

    /// Features of the frozen statistics extractor (the base encoder,
    /// adapters ignored), in 64-bit for stable covariance work.
    pub fn stats_features(&self, samples: &Matrix<f32>) -> Result<Matrix<f64>> {
        Ok(self.encoder.encode_base(samples)?.cast::<f64>())
    }

    /// Fit domain statistics from (up to `limit`) samples.
    pub fn fit_test_stats(
        &self,
        samples: &Matrix<f32>,
        limit: Option<usize>,
        trial_seed: u64,
    ) -> Result<GaussianStats> {
        let n = samples.rows();
        let rows: Vec<usize> = match limit {
            Some(k) if k < 2 => {
                return Err(Error::InsufficientSamples(format!(
                    "statistics need at least 2 samples, got limit {k}"
                )))
            }
            Some(k) if k < n => {
                let mut rng = rng_from_seed(derive_seed(trial_seed, &[n as u64]));
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                let mut picked = all[..k].to_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        if rows.len() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "statistics need at least 2 samples, got {}",
                rows.len()
            )));
        }
        let picked = crate::training::gather_matrix(samples, &rows);
        GaussianStats::fit(&self.stats_features(&picked)?)
    }

    /// Per-block mixing weights for a distance vector under the schedule.
    pub fn mixing_for(&self, distances: &[f64]) -> Result<Vec<MixWeights>> {
        self.schedule
            .temperatures()?
            .into_iter()
            .map(|tau| similarity(distances, tau))
            .collect()
    }

    /// Stratified validation indices: 15% of each training identity's
    /// samples (at least one), seeded.
    fn validation_split(&self, domain: &DomainDataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let train_idx = domain.indices_of(Split::Train);
        let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for &i in &train_idx {
            by_id.entry(domain.identities[i]).or_default().push(i);
        }
        let mut val = Vec::new();
        let mut train = Vec::new();
        for (id, mut indices) in by_id {
            let mut rng = rng_from_seed(derive_seed(seed, &[id as u64]));
            indices.shuffle(&mut rng);
            let n_val = ((indices.len() as f64 * VALIDATION_FRACTION).ceil() as usize).max(1);
            val.extend_from_slice(&indices[..n_val]);
            train.extend_from_slice(&indices[n_val..]);
        }
        val.sort_unstable();
        train.sort_unstable();
        (val, train)
    }

    /// One lifelong step: stats → new adapter → mixing → stage 1 → stage 2.
    pub fn run_step(
        &mut self,
        domain: &DomainDataset,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<StepReport> {
        domain.validate()?;
        let step = self.step(); // 0-based index of this new step
        let domain_ids = domain.unique_ids(None);
        if let Some(dup) = domain_ids.iter().find(|id| self.seen_ids.contains(id)) {
            return Err(Error::Protocol(format!(
                "identity {dup} of domain '{}' overlaps an earlier domain",
                domain.name
            )));
        }

        // (1)+(2) validation split and statistics from the frozen extractor
        let (val_idx, train_idx) = self.validation_split(domain, derive_seed(seed, &[step as u64, 10]));
        let (val_feats, _, _) = domain.subset(&val_idx);
        let stats = GaussianStats::fit(&self.stats_features(&val_feats)?)?;
        self.stats.push(stats);
        self.domains.push(domain.name.clone());

        // (3) register this step's adapters (zero-init delta)
        self.encoder.add_step_adapters(
            self.adapter_rank,
            self.adapter_alpha,
            derive_seed(seed, &[step as u64, 11]),
        )?;

        // (4) training-time mixing from the validation statistics
        let distances: Vec<f64> = self
            .stats
            .iter()
            .map(|s| crate::stats::w2_distance(self.stats.last().unwrap(), s))
            .collect::<Result<_>>()?;
        let mix = self.mixing_for(&distances)?;

        // (5) stage 1: prototypes on frozen mixed features
        let (train_feats, train_labels, _) = domain.subset(&train_idx);
        let stage1_feats = self.encoder.encode_mixed(&train_feats, &mix)?;
        let (protos, s1) = stage1_train_prototypes(
            step,
            &stage1_feats,
            &train_labels,
            cfg,
            derive_seed(seed, &[step as u64, 12]),
        )?;
        self.log.extend(s1.rows);

        // (6) stage 2: the newest adapter against frozen prototypes
        let s2 = stage2_train_adapter(
            &mut self.encoder,
            &protos,
            &train_feats,
            &train_labels,
            &mix,
            step,
            cfg,
            derive_seed(seed, &[step as u64, 13]),
        )?;
        self.log.extend(s2.rows);
        self.prototypes.steps.push(protos);
        self.seen_ids.extend(domain_ids);

        Ok(StepReport {
            step,
            domain: domain.name.clone(),
            stage1_accuracy: s1.accuracy,
            deep_mix: mix.last().expect("at least one block").clone(),
        })
    }

    /// Route, merge, and encode a test set.
    pub fn infer_features(&self, samples: &Matrix<f32>, opts: &InferOptions) -> Result<Inference> {
        let steps = self.step();
        if steps == 0 {
            return Err(Error::State("no lifelong steps have been trained".into()));
        }
        let (per_block_mix, distances) = match opts.routing {
            Routing::ForcedDomain(k) => {
                if k >= steps {
                    return Err(Error::Index(format!("forced domain {k} of {steps}")));
                }
                (
                    vec![MixWeights::one_hot(steps, k)?; self.encoder.cfg.blocks],
                    Vec::new(),
                )
            }
            Routing::Auto => {
                let test_stats =
                    self.fit_test_stats(samples, opts.stats_samples, opts.trial_seed)?;
                let distances: Vec<f64> = self
                    .stats
                    .iter()
                    .map(|s| crate::stats::w2_distance(&test_stats, s))
                    .collect::<Result<_>>()?;
                (self.mixing_for(&distances)?, distances)
            }
        };
        let merged = self.encoder.merged(&per_block_mix)?;
        let features = merged.encode_base(samples)?;
        Ok(Inference {
            features,
            per_block_mix,
            distances,
        })
    }

    /// Score a domain's query/gallery retrieval under the given routing.
    /// Statistics come from the union of the query and gallery samples.
    pub fn evaluate_domain(
        &self,
        domain: &DomainDataset,
        opts: &InferOptions,
    ) -> Result<(RankScore, Inference)> {
        let test_idx = domain.test_indices();
        let (test_feats, test_ids, test_cams) = domain.subset(&test_idx);
        let inference = self.infer_features(&test_feats, opts)?;

        let mut q_rows = Vec::new();
        let mut g_rows = Vec::new();
        for (row, &orig) in test_idx.iter().enumerate() {
            match domain.splits[orig] {
                Split::Query => q_rows.push(row),
                Split::Gallery => g_rows.push(row),
                Split::Train => unreachable!("test_indices excludes train"),
            }
        }
        let gather = |rows: &[usize]| {
            let mut f = Matrix::zeros(rows.len(), inference.features.cols());
            let mut ids = Vec::with_capacity(rows.len());
            let mut cams = Vec::with_capacity(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                f.row_mut(r).copy_from_slice(inference.features.row(i));
                ids.push(test_ids[i]);
                cams.push(test_cams[i]);
            }
            (f, ids, cams)
        };
        let (qf, qi, qc) = gather(&q_rows);
        let (gf, gi, gc) = gather(&g_rows);
        let score = crate::eval::rank_and_score(&qf, &qi, &qc, &gf, &gi, &gc)?;
        Ok((score, inference))
    }

    // -----------------------------------------------------------------
    // Checkpointing
    // -----------------------------------------------------------------

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::create_dir_all(dir.join("stats"))?;

        let mut base = BlobWriter::new("base.bin");
        let enc = &self.encoder;
        base.push("embed.w", enc.patch_embed.weight());
        base.push("embed.b", &Matrix::row_vec(enc.patch_embed.bias()));
        base.push("cls", &enc.class_token);
        base.push("pos", &enc.pos_embed);
        for (b, block) in enc.blocks.iter().enumerate() {
            base.push(&format!("{b}.ln1.g"), &block.ln1.gamma);
            base.push(&format!("{b}.ln1.b"), &block.ln1.beta);
            for slot in Slot::ALL {
                let lin = block.linear(slot);
                base.push(&format!("{b}.{}.base.w", slot.name()), lin.weight());
                base.push(
                    &format!("{b}.{}.base.b", slot.name()),
                    &Matrix::row_vec(lin.bias()),
                );
            }
            base.push(&format!("{b}.ln2.g"), &block.ln2.gamma);
            base.push(&format!("{b}.ln2.b"), &block.ln2.beta);
        }
        base.push("final.g", &enc.final_norm.gamma);
        base.push("final.b", &enc.final_norm.beta);
        let mut tensors = base.finish(dir)?;

        let mut adapters = BlobWriter::new("adapters.bin");
        for (b, block) in enc.blocks.iter().enumerate() {
            for slot in Slot::ALL {
                let lin = block.linear(slot);
                for (t, adapter) in lin.adapters().iter().enumerate() {
                    adapters.push(&format!("{b}.{}.{t}.down", slot.name()), &adapter.down);
                    adapters.push(&format!("{b}.{}.{t}.up", slot.name()), &adapter.up);
                }
            }
        }
        tensors.extend(adapters.finish(dir)?);

        let mut protos = BlobWriter::new("prototypes.bin");
        for (t, step) in self.prototypes.steps.iter().enumerate() {
            protos.push(&format!("proto.{t}.w"), &step.weights);
            protos.push(&format!("proto.{t}.scale"), &Matrix::filled(1, 1, step.log_scale));
        }
        tensors.extend(protos.finish(dir)?);

        for (name, stats) in self.domains.iter().zip(&self.stats) {
            stats.save(&dir.join("stats").join(format!("{name}.stats")))?;
        }
        write_loss_csv(&dir.join("log.csv"), &self.log)?;

        let manifest = Manifest {
            version: MANIFEST_VERSION,
            encoder: enc.cfg.clone(),
            adapter_rank: self.adapter_rank,
            adapter_alpha: self.adapter_alpha,
            schedule: self.schedule,
            steps: self.step(),
            domains: self.domains.clone(),
            prototype_ids: self.prototypes.steps.iter().map(|s| s.ids.clone()).collect(),
            seen_ids: self.seen_ids.iter().copied().collect(),
            tensors,
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        manifest.encoder.validate()?;
        let reader = BlobReader::open(dir, &manifest.tensors)?;

        let mut encoder = Encoder::<f32>::seeded(manifest.encoder.clone(), 0)?;
        let set_linear = |lin: &mut crate::adapters::AdaptedLinear<f32>,
                          prefix: &str,
                          reader: &BlobReader|
         -> Result<()> {
            let (w, b) = lin.weight_and_bias_mut();
            *w = reader.get(&format!("{prefix}.w"))?;
            *b = reader.get(&format!("{prefix}.b"))?;
            Ok(())
        };
        {
            let (w, b) = encoder.patch_embed.weight_and_bias_mut();
            *w = reader.get("embed.w")?;
            *b = reader.get("embed.b")?;
        }
        encoder.class_token = reader.get("cls")?;
        encoder.pos_embed = reader.get("pos")?;
        for b in 0..encoder.cfg.blocks {
            let block = &mut encoder.blocks[b];
            block.ln1.gamma = reader.get(&format!("{b}.ln1.g"))?;
            block.ln1.beta = reader.get(&format!("{b}.ln1.b"))?;
            block.ln2.gamma = reader.get(&format!("{b}.ln2.g"))?;
            block.ln2.beta = reader.get(&format!("{b}.ln2.b"))?;
            for slot in Slot::ALL {
                set_linear(
                    block.linear_mut(slot),
                    &format!("{b}.{}.base", slot.name()),
                    &reader,
                )?;
            }
        }
        encoder.final_norm.gamma = reader.get("final.g")?;
        encoder.final_norm.beta = reader.get("final.b")?;

        for _ in 0..manifest.steps {
            encoder.add_step_adapters(manifest.adapter_rank, manifest.adapter_alpha, 0)?;
        }
        for b in 0..encoder.cfg.blocks {
            let block = &mut encoder.blocks[b];
            for slot in Slot::ALL {
                let lin = block.linear_mut(slot);
                for t in 0..lin.adapter_count() {
                    let down = reader.get(&format!("{b}.{}.{t}.down", slot.name()))?;
                    let up = reader.get(&format!("{b}.{}.{t}.up", slot.name()))?;
                    let adapter = &mut lin.adapters_mut()[t];
                    adapter.down = down;
                    adapter.up = up;
                }
            }
        }

        if manifest.prototype_ids.len() != manifest.steps
            || manifest.domains.len() != manifest.steps
        {
            return Err(Error::Format(
                "manifest step counts are inconsistent".into(),
            ));
        }
        let mut prototypes = PrototypeBank::default();
        for (t, ids) in manifest.prototype_ids.iter().enumerate() {
            let weights = reader.get(&format!("proto.{t}.w"))?;
            let scale = reader.get(&format!("proto.{t}.scale"))?;
            prototypes.steps.push(StepPrototypes {
                ids: ids.clone(),
                weights,
                log_scale: scale[(0, 0)],
            });
        }

        let mut stats = Vec::new();
        for name in &manifest.domains {
            stats.push(GaussianStats::load(
                &dir.join("stats").join(format!("{name}.stats")),
            )?);
        }

        Ok(Self {
            encoder,
            prototypes,
            stats,
            domains: manifest.domains,
            schedule: manifest.schedule,
            adapter_rank: manifest.adapter_rank,
            adapter_alpha: manifest.adapter_alpha,
            seen_ids: manifest.seen_ids.into_iter().collect(),
            log: Vec::new(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    encoder: EncoderConfig,
    adapter_rank: usize,
    adapter_alpha: f64,
    schedule: ScheduleConfig,
    steps: usize,
    domains: Vec<String>,
    prototype_ids: Vec<Vec<u32>>,
    seen_ids: Vec<u32>,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterSite;
    use crate::data::{generate_domain, DomainSpec};
    use crate::selector::ScheduleFamily;

    fn tiny_setup() -> (LifelongState, Vec<DomainDataset>, TrainConfig) {
        let ecfg = EncoderConfig {
            blocks: 2,
            d_model: 16,
            heads: 2,
            ffn_dim: 24,
            tokens: 2,
            patch_dim: 8,
            sites: vec![AdapterSite::Q, AdapterSite::V],
        };
        let spec = |name: &str, seed: u64| DomainSpec {
            name: name.into(),
            num_identities: 8,
            samples_per_identity: 8,
            cameras: 3,
            gap_seed: seed,
            noise_std: 0.25,
            feature_dim: ecfg.sample_dim(),
        };
        let base_domain = generate_domain(&spec("base", 1000), 0).unwrap();
        let d1 = generate_domain(&spec("d1", 1), 100).unwrap();
        let d2 = generate_domain(&spec("d2", 2), 200).unwrap();

        let mut encoder = Encoder::<f32>::seeded(ecfg, 7).unwrap();
        let cfg = TrainConfig {
            stage1_iters: 40,
            stage1_lr: 0.02,
            stage2_iters: 30,
            stage2_lr: 3e-3,
            p_ids: 3,
            k_instances: 2,
            margin: 0.3,
            loss_weights: Default::default(),
            pretrain_iters: 40,
            pretrain_lr: 3e-3,
        };
        let (bf, bl, _) = base_domain.subset(&(0..base_domain.len()).collect::<Vec<_>>());
        crate::training::train_base(&mut encoder, &bf, &bl, 40, 3e-3, false, &cfg, 5).unwrap();

        let schedule = ScheduleConfig::new(ScheduleFamily::Cosinoidal, 0.5, 0.1, 2).unwrap();
        let state = LifelongState::new(encoder, schedule, 2, 8.0).unwrap();
        (state, vec![d1, d2], cfg)
    }

    #[test]
    fn run_step_counts_and_singleton_mixing() {
        let (mut state, domains, cfg) = tiny_setup();
        let report = state.run_step(&domains[0], &cfg, 42).unwrap();
        assert_eq!(report.step, 0);
        assert_eq!(state.step(), 1);
        assert_eq!(state.stats.len(), 1);
        assert_eq!(state.encoder.adapter_steps(), 1);
        // first step: similarity over one domain is [1.0] at every block
        assert_eq!(report.deep_mix.weights(), &[1.0]);

        state.run_step(&domains[1], &cfg, 42).unwrap();
        assert_eq!(state.step(), 2);
        assert_eq!(state.encoder.adapter_steps(), 2);
        assert_eq!(state.prototypes.steps.len(), 2);
    }

    #[test]
    fn overlapping_identities_are_a_protocol_error() {
        let (mut state, domains, cfg) = tiny_setup();
        state.run_step(&domains[0], &cfg, 1).unwrap();
        assert!(matches!(
            state.run_step(&domains[0], &cfg, 1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn stats_extractor_is_constant_across_steps() {
        let (mut state, domains, cfg) = tiny_setup();
        let probe = {
            let idx: Vec<usize> = (0..6).collect();
            domains[1].subset(&idx).0
        };
        let before = state.stats_features(&probe).unwrap();
        state.run_step(&domains[0], &cfg, 3).unwrap();
        let after = state.stats_features(&probe).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn forced_self_routing_preserves_past_function() {
        let (mut state, domains, cfg) = tiny_setup();
        state.run_step(&domains[0], &cfg, 9).unwrap();

        let opts = InferOptions {
            routing: Routing::ForcedDomain(0),
            ..Default::default()
        };
        let (score_before, feats_before) = {
            let (s, inf) = state.evaluate_domain(&domains[0], &opts).unwrap();
            (s, inf.features)
        };

        state.run_step(&domains[1], &cfg, 9).unwrap();
        let (score_after, inf_after) = state.evaluate_domain(&domains[0], &opts).unwrap();
        // bit-identical features and scores: the past function is intact
        assert_eq!(feats_before, inf_after.features);
        assert_eq!(score_before.map, score_after.map);
        assert_eq!(score_before.rank1, score_after.rank1);
    }

    #[test]
    fn auto_routing_prefers_own_domain() {
        let (mut state, domains, cfg) = tiny_setup();
        state.run_step(&domains[0], &cfg, 11).unwrap();
        state.run_step(&domains[1], &cfg, 11).unwrap();
        for (k, d) in domains.iter().enumerate() {
            let (_, inf) = state.evaluate_domain(d, &InferOptions::default()).unwrap();
            for mix in &inf.per_block_mix {
                assert_eq!(mix.argmax(), k, "domain {k} misrouted: {:?}", mix.weights());
            }
        }
    }

    #[test]
    fn limited_stats_samples_still_normalize() {
        let (mut state, domains, cfg) = tiny_setup();
        state.run_step(&domains[0], &cfg, 13).unwrap();
        state.run_step(&domains[1], &cfg, 13).unwrap();
        let opts = InferOptions {
            stats_samples: Some(2),
            trial_seed: 5,
            routing: Routing::Auto,
        };
        let (_, inf) = state.evaluate_domain(&domains[0], &opts).unwrap();
        for mix in &inf.per_block_mix {
            let sum: f64 = mix.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // limit below 2 is rejected
        let bad = InferOptions {
            stats_samples: Some(1),
            trial_seed: 5,
            routing: Routing::Auto,
        };
        assert!(matches!(
            state.evaluate_domain(&domains[0], &bad),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn merged_inference_matches_mixed_forward() {
        let (mut state, domains, cfg) = tiny_setup();
        state.run_step(&domains[0], &cfg, 17).unwrap();
        state.run_step(&domains[1], &cfg, 17).unwrap();
        let test_idx = domains[0].test_indices();
        let (test_feats, _, _) = domains[0].subset(&test_idx);
        let inf = state.infer_features(&test_feats, &InferOptions::default()).unwrap();
        let mixed = state
            .encoder
            .encode_mixed(&test_feats, &inf.per_block_mix)
            .unwrap();
        assert!(inf.features.max_abs_diff(&mixed) < 1e-4);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_state_and_inference() {
        let (mut state, domains, cfg) = tiny_setup();
        state.run_step(&domains[0], &cfg, 19).unwrap();
        state.run_step(&domains[1], &cfg, 19).unwrap();

        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let loaded = LifelongState::load(dir.path()).unwrap();

        assert_eq!(loaded.domains, state.domains);
        assert_eq!(loaded.encoder, state.encoder);
        assert_eq!(loaded.prototypes, state.prototypes);
        assert_eq!(loaded.stats, state.stats);
        assert_eq!(loaded.seen_ids, state.seen_ids);

        let test_idx = domains[0].test_indices();
        let (test_feats, _, _) = domains[0].subset(&test_idx);
        let a = state.infer_features(&test_feats, &InferOptions::default()).unwrap();
        let b = loaded.infer_features(&test_feats, &InferOptions::default()).unwrap();
        assert_eq!(a.features, b.features);

        // re-saving the loaded state reproduces identical tensor files
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        for f in ["base.bin", "adapters.bin", "prototypes.bin", "manifest.json"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap(),
                "{f} differs after reload"
            );
        }
    }

    #[test]
    fn rerun_with_same_seed_is_bit_identical() {
        let run = || {
            let (mut state, domains, cfg) = tiny_setup();
            state.run_step(&domains[0], &cfg, 23).unwrap();
            state.run_step(&domains[1], &cfg, 23).unwrap();
            state
        };
        let a = run();
        let b = run();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.prototypes, b.prototypes);
        assert_eq!(a.stats, b.stats);
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        a.save(da.path()).unwrap();
        b.save(db.path()).unwrap();
        for f in ["base.bin", "adapters.bin", "prototypes.bin", "manifest.json", "log.csv"] {
            assert_eq!(
                std::fs::read(da.path().join(f)).unwrap(),
                std::fs::read(db.path().join(f)).unwrap(),
                "{f} differs between reruns"
            );
        }
    }
}
