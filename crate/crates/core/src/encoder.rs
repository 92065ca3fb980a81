//! Small pre-norm transformer encoder with adapter insertion sites.
//!
//! Each sample is a flat vector of `tokens · patch_dim` values, split into
//! pseudo-patches, linearly embedded, prefixed with a class token and given
//! learned positional embeddings. The class-token embedding after the final
//! norm is the retrieval feature.
//!
//! Adapters can be plugged into the attention Query/Key/Value/Projection
//! linears and both FFN linears; which of these actually carry a bank is
//! decided by `EncoderConfig::sites`.

use crate::adapters::{AdaptedLinear, AdapterSite};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, NodeId, Scalar, Tape};
use crate::rng::{derive_seed, rng_from_seed};
use crate::selector::MixWeights;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Pseudo-patches per sample.
    pub tokens: usize,
    /// Width of one pseudo-patch; sample vectors are `tokens · patch_dim`.
    pub patch_dim: usize,
    pub sites: Vec<AdapterSite>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            tokens: 8,
            patch_dim: 16,
            sites: vec![
                AdapterSite::Q,
                AdapterSite::K,
                AdapterSite::V,
                AdapterSite::Proj,
            ],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.tokens == 0 || self.patch_dim == 0 {
            return Err(Error::Config("need at least one pseudo-patch".into()));
        }
        if self.sites.is_empty() {
            return Err(Error::Config("adapter site set must be non-empty".into()));
        }
        let mut sorted = self.sites.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.sites.len() {
            return Err(Error::Config("duplicate adapter sites".into()));
        }
        Ok(())
    }

    pub fn sample_dim(&self) -> usize {
        self.tokens * self.patch_dim
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Linear layer slots inside one block that can host adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Query,
    Key,
    Value,
    Proj,
    Ffn1,
    Ffn2,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Query,
        Slot::Key,
        Slot::Value,
        Slot::Proj,
        Slot::Ffn1,
        Slot::Ffn2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Slot::Query => "q",
            Slot::Key => "k",
            Slot::Value => "v",
            Slot::Proj => "proj",
            Slot::Ffn1 => "ffn1",
            Slot::Ffn2 => "ffn2",
        }
    }

    fn site(&self) -> AdapterSite {
        match self {
            Slot::Query => AdapterSite::Q,
            Slot::Key => AdapterSite::K,
            Slot::Value => AdapterSite::V,
            Slot::Proj => AdapterSite::Proj,
            Slot::Ffn1 | Slot::Ffn2 => AdapterSite::Ffn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Matrix<T>,
    pub beta: Matrix<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn identity(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, T::one()),
            beta: Matrix::zeros(1, d),
        }
    }

    fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let eps = T::from_f64(1e-5);
        let d = x.cols();
        let dn = T::from_f64(d as f64);
        let mut out = Matrix::zeros(x.rows(), d);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            let o = out.row_mut(r);
            for j in 0..d {
                o[j] = self.gamma[(0, j)] * (row[j] - mean) * inv + self.beta[(0, j)];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNormParams<T>,
    pub query: AdaptedLinear<T>,
    pub key: AdaptedLinear<T>,
    pub value: AdaptedLinear<T>,
    pub proj: AdaptedLinear<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn1: AdaptedLinear<T>,
    pub ffn2: AdaptedLinear<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    pub fn linear(&self, slot: Slot) -> &AdaptedLinear<T> {
        match slot {
            Slot::Query => &self.query,
            Slot::Key => &self.key,
            Slot::Value => &self.value,
            Slot::Proj => &self.proj,
            Slot::Ffn1 => &self.ffn1,
            Slot::Ffn2 => &self.ffn2,
        }
    }

    pub fn linear_mut(&mut self, slot: Slot) -> &mut AdaptedLinear<T> {
        match slot {
            Slot::Query => &mut self.query,
            Slot::Key => &mut self.key,
            Slot::Value => &mut self.value,
            Slot::Proj => &mut self.proj,
            Slot::Ffn1 => &mut self.ffn1,
            Slot::Ffn2 => &mut self.ffn2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub patch_embed: AdaptedLinear<T>,
    pub class_token: Matrix<T>,
    pub pos_embed: Matrix<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub final_norm: LayerNormParams<T>,
}

/// How a tape forward treats the model parameters.
pub enum TapeMode<'a> {
    /// Everything frozen; useful for loss-only probes.
    Frozen,
    /// All base parameters trainable (pretraining / full fine-tuning).
    TrainBase,
    /// Base and earlier adapters folded as constants; the newest adapter's
    /// matrices are the only encoder parameters. One mixing vector per block.
    TrainNewestAdapter { per_block_mix: &'a [MixWeights] },
}

/// Handle bundle returned by the tape forward.
pub struct TapeEncoding {
    /// N×d_model class-token features.
    pub features: NodeId,
    /// Trainable encoder tensors as (name, node) pairs, in a fixed order.
    pub params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Encoder<T> {
    pub fn seeded(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let make = |rows: usize, cols: usize, salt: &str| -> Matrix<T> {
            let mut rng = rng_from_seed(derive_seed(seed, &[salt_tag(salt), rows as u64, cols as u64]));
            let mut m = Matrix::zeros(rows, cols);
            for v in m.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = T::from_f64(z * INIT_STD);
            }
            m
        };
        let linear = |w: Matrix<T>| -> Result<AdaptedLinear<T>> {
            let d_out = w.rows();
            AdaptedLinear::new(w, vec![T::zero(); d_out])
        };

        let patch_embed = linear(make(d, cfg.patch_dim, "embed"))?;
        let class_token = make(1, d, "cls");
        let pos_embed = make(cfg.tokens + 1, d, "pos");
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let tag = |s: &str| format!("{b}.{s}");
            blocks.push(EncoderBlock {
                ln1: LayerNormParams::identity(d),
                query: linear(make(d, d, &tag("q")))?,
                key: linear(make(d, d, &tag("k")))?,
                value: linear(make(d, d, &tag("v")))?,
                proj: linear(make(d, d, &tag("proj")))?,
                ln2: LayerNormParams::identity(d),
                ffn1: linear(make(cfg.ffn_dim, d, &tag("ffn1")))?,
                ffn2: linear(make(d, cfg.ffn_dim, &tag("ffn2")))?,
            });
        }
        Ok(Self {
            cfg,
            patch_embed,
            class_token,
            pos_embed,
            blocks,
            final_norm: LayerNormParams::identity(d),
        })
    }

    pub fn slot_enabled(&self, slot: Slot) -> bool {
        self.cfg.sites.contains(&slot.site())
    }

    /// Number of lifelong steps registered on the adapter banks.
    pub fn adapter_steps(&self) -> usize {
        for block in &self.blocks {
            for slot in Slot::ALL {
                if self.slot_enabled(slot) {
                    return block.linear(slot).adapter_count();
                }
            }
        }
        0
    }

    /// Add one zero-delta adapter at every enabled site of every block.
    pub fn add_step_adapters(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<usize> {
        let step = self.adapter_steps();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (s, slot) in Slot::ALL.iter().enumerate() {
                if self.cfg.sites.contains(&slot.site()) {
                    let site_seed = derive_seed(seed, &[b as u64, s as u64, step as u64]);
                    let idx = block.linear_mut(*slot).add_adapter(rank, alpha, site_seed)?;
                    if idx != step {
                        return Err(Error::State(format!(
                            "adapter bank out of sync at block {b} slot {}",
                            slot.name()
                        )));
                    }
                }
            }
        }
        Ok(step)
    }

    fn check_batch(&self, batch: &Matrix<T>) -> Result<()> {
        if batch.cols() != self.cfg.sample_dim() {
            return Err(Error::Dim(format!(
                "batch has {} columns, encoder expects {}",
                batch.cols(),
                self.cfg.sample_dim()
            )));
        }
        Ok(())
    }

    /// Reshape a batch (N × tokens·patch_dim) into stacked patches
    /// (N·tokens × patch_dim).
    fn to_patches(&self, batch: &Matrix<T>) -> Matrix<T> {
        let p = self.cfg.tokens;
        let pd = self.cfg.patch_dim;
        let mut out = Matrix::zeros(batch.rows() * p, pd);
        for n in 0..batch.rows() {
            let row = batch.row(n);
            for t in 0..p {
                out.row_mut(n * p + t).copy_from_slice(&row[t * pd..(t + 1) * pd]);
            }
        }
        out
    }

    /// Frozen-base forward: adapters ignored entirely. This is the stats
    /// extractor path, constant across all lifelong steps.
    pub fn encode_base(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        self.forward_plain(batch, None)
    }

    /// Mixed forward: every adapted linear applies its bank weighted by the
    /// block's mixing vector.
    pub fn encode_mixed(&self, batch: &Matrix<T>, per_block_mix: &[MixWeights]) -> Result<Matrix<T>> {
        if per_block_mix.len() != self.cfg.blocks {
            return Err(Error::Dim(format!(
                "{} mixing vectors for {} blocks",
                per_block_mix.len(),
                self.cfg.blocks
            )));
        }
        self.forward_plain(batch, Some(per_block_mix))
    }

    /// Collapse the adapter banks into plain weights per block, producing an
    /// adapter-free encoder that computes the same function as
    /// [`encode_mixed`] with the given weights.
    pub fn merged(&self, per_block_mix: &[MixWeights]) -> Result<Encoder<T>> {
        if per_block_mix.len() != self.cfg.blocks {
            return Err(Error::Dim(format!(
                "{} mixing vectors for {} blocks",
                per_block_mix.len(),
                self.cfg.blocks
            )));
        }
        let mut out = self.clone();
        for (b, block) in out.blocks.iter_mut().enumerate() {
            for slot in Slot::ALL {
                let lin = block.linear_mut(slot);
                if lin.adapter_count() > 0 {
                    let (w, bias) = lin.merged(&per_block_mix[b])?;
                    *lin = AdaptedLinear::new(w, bias)?;
                }
            }
        }
        Ok(out)
    }

    fn apply_linear(
        &self,
        block_idx: usize,
        slot: Slot,
        x: &Matrix<T>,
        mix: Option<&[MixWeights]>,
    ) -> Result<Matrix<T>> {
        let lin = self.blocks[block_idx].linear(slot);
        match mix {
            Some(per_block) if lin.adapter_count() > 0 => {
                lin.forward_mixed(&per_block[block_idx], x)
            }
            _ => {
                // base path: x·Wᵀ + b
                let mut y = x.matmul_nt(lin.weight())?;
                for r in 0..y.rows() {
                    for (v, &b) in y.row_mut(r).iter_mut().zip(lin.bias()) {
                        *v += b;
                    }
                }
                Ok(y)
            }
        }
    }

    fn forward_plain(&self, batch: &Matrix<T>, mix: Option<&[MixWeights]>) -> Result<Matrix<T>> {
        self.check_batch(batch)?;
        let n = batch.rows();
        let p = self.cfg.tokens;
        let seq = p + 1;
        let d = self.cfg.d_model;

        let patches = self.to_patches(batch);
        let mut emb = patches.matmul_nt(self.patch_embed.weight())?;
        for r in 0..emb.rows() {
            for (v, &b) in emb.row_mut(r).iter_mut().zip(self.patch_embed.bias()) {
                *v += b;
            }
        }

        // assemble [cls; patches] + positions, stacked over samples
        let mut x = Matrix::zeros(n * seq, d);
        for s in 0..n {
            for j in 0..d {
                x[(s * seq, j)] = self.class_token[(0, j)] + self.pos_embed[(0, j)];
            }
            for t in 0..p {
                let src = emb.row(s * p + t);
                let dst = x.row_mut(s * seq + t + 1);
                for j in 0..d {
                    dst[j] = src[j] + self.pos_embed[(t + 1, j)];
                }
            }
        }

        for b in 0..self.cfg.blocks {
            let h = self.blocks[b].ln1.apply(&x);
            let q = self.apply_linear(b, Slot::Query, &h, mix)?;
            let k = self.apply_linear(b, Slot::Key, &h, mix)?;
            let v = self.apply_linear(b, Slot::Value, &h, mix)?;
            let attn = self.attention_plain(&q, &k, &v, n)?;
            let proj = self.apply_linear(b, Slot::Proj, &attn, mix)?;
            x.add_assign(&proj)?;

            let h2 = self.blocks[b].ln2.apply(&x);
            let f1 = self.apply_linear(b, Slot::Ffn1, &h2, mix)?;
            let f1 = f1.map(gelu_scalar);
            let f2 = self.apply_linear(b, Slot::Ffn2, &f1, mix)?;
            x.add_assign(&f2)?;
        }

        let x = self.final_norm.apply(&x);
        let mut features = Matrix::zeros(n, d);
        for s in 0..n {
            features.row_mut(s).copy_from_slice(x.row(s * seq));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("encoder features".into()));
        }
        Ok(features)
    }

    fn attention_plain(
        &self,
        q: &Matrix<T>,
        k: &Matrix<T>,
        v: &Matrix<T>,
        n_samples: usize,
    ) -> Result<Matrix<T>> {
        let seq = self.cfg.tokens + 1;
        let heads = self.cfg.heads;
        let dk = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let d = self.cfg.d_model;
        let mut out = Matrix::zeros(q.rows(), d);

        let mut scores = vec![T::zero(); seq * seq];
        for s in 0..n_samples {
            let base = s * seq;
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..seq {
                    let qr = &q.row(base + i)[c0..c0 + dk];
                    for j in 0..seq {
                        let kr = &k.row(base + j)[c0..c0 + dk];
                        let mut acc = T::zero();
                        for t in 0..dk {
                            acc += qr[t] * kr[t];
                        }
                        scores[i * seq + j] = acc * scale;
                    }
                }
                for i in 0..seq {
                    let row = &mut scores[i * seq..(i + 1) * seq];
                    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                for i in 0..seq {
                    let dst = &mut out.row_mut(base + i)[c0..c0 + dk];
                    for j in 0..seq {
                        let w = scores[i * seq + j];
                        let vr = &v.row(base + j)[c0..c0 + dk];
                        for t in 0..dk {
                            dst[t] += w * vr[t];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward pass recorded on a tape. Depending on `mode`, base tensors
    /// and/or the newest adapter tensors become tape parameters; everything
    /// else enters as constants (earlier adapters pre-folded into the
    /// weights with their mixing coefficients).
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        batch: &Matrix<T>,
        mode: &TapeMode,
    ) -> Result<TapeEncoding> {
        self.check_batch(batch)?;
        let n = batch.rows();
        let p = self.cfg.tokens;
        let seq = p + 1;
        let mut params: Vec<(String, NodeId)> = Vec::new();

        let train_base = matches!(mode, TapeMode::TrainBase);
        let newest = match mode {
            TapeMode::TrainNewestAdapter { per_block_mix } => {
                let steps = self.adapter_steps();
                if steps == 0 {
                    return Err(Error::State("no adapters to train".into()));
                }
                if per_block_mix.len() != self.cfg.blocks {
                    return Err(Error::Dim(format!(
                        "{} mixing vectors for {} blocks",
                        per_block_mix.len(),
                        self.cfg.blocks
                    )));
                }
                for m in per_block_mix.iter() {
                    if m.len() != steps {
                        return Err(Error::Dim(format!(
                            "mixing vector of length {} for {} adapters",
                            m.len(),
                            steps
                        )));
                    }
                }
                Some((*per_block_mix, steps))
            }
            _ => None,
        };

        let leaf = |tape: &mut Tape<T>,
                        params: &mut Vec<(String, NodeId)>,
                        name: String,
                        value: Matrix<T>,
                        trainable: bool| {
            if trainable {
                let id = tape.param(value);
                params.push((name, id));
                id
            } else {
                tape.constant(value)
            }
        };

        // patch embedding
        let patches = tape.constant(self.to_patches(batch));
        let emb_w = leaf(
            tape,
            &mut params,
            "embed.w".into(),
            self.patch_embed.weight().clone(),
            train_base,
        );
        let emb_b = leaf(
            tape,
            &mut params,
            "embed.b".into(),
            Matrix::row_vec(self.patch_embed.bias()),
            train_base,
        );
        let emb_wt = tape.transpose(emb_w);
        let emb = tape.matmul(patches, emb_wt)?;
        let emb = tape.add_row_vec(emb, emb_b)?;

        let cls = leaf(
            tape,
            &mut params,
            "cls".into(),
            self.class_token.clone(),
            train_base,
        );
        let pos = leaf(
            tape,
            &mut params,
            "pos".into(),
            self.pos_embed.clone(),
            train_base,
        );

        let mut sample_tokens = Vec::with_capacity(n);
        for s in 0..n {
            let body = tape.slice_rows(emb, s * p, p)?;
            let toks = tape.stack_rows(&[cls, body])?;
            let toks = tape.add(toks, pos)?;
            sample_tokens.push(toks);
        }
        let mut x = tape.stack_rows(&sample_tokens)?;

        for b in 0..self.cfg.blocks {
            let block = &self.blocks[b];
            let ln1_g = leaf(
                tape,
                &mut params,
                format!("{b}.ln1.g"),
                block.ln1.gamma.clone(),
                train_base,
            );
            let ln1_b = leaf(
                tape,
                &mut params,
                format!("{b}.ln1.b"),
                block.ln1.beta.clone(),
                train_base,
            );
            let h = tape.layer_norm(x, ln1_g, ln1_b)?;

            let q = self.tape_linear(tape, &mut params, b, Slot::Query, h, train_base, &newest)?;
            let k = self.tape_linear(tape, &mut params, b, Slot::Key, h, train_base, &newest)?;
            let v = self.tape_linear(tape, &mut params, b, Slot::Value, h, train_base, &newest)?;

            let attn = self.attention_on_tape(tape, q, k, v, n)?;
            let proj =
                self.tape_linear(tape, &mut params, b, Slot::Proj, attn, train_base, &newest)?;
            x = tape.add(x, proj)?;

            let ln2_g = leaf(
                tape,
                &mut params,
                format!("{b}.ln2.g"),
                block.ln2.gamma.clone(),
                train_base,
            );
            let ln2_b = leaf(
                tape,
                &mut params,
                format!("{b}.ln2.b"),
                block.ln2.beta.clone(),
                train_base,
            );
            let h2 = tape.layer_norm(x, ln2_g, ln2_b)?;
            let f1 = self.tape_linear(tape, &mut params, b, Slot::Ffn1, h2, train_base, &newest)?;
            let f1 = tape.gelu(f1);
            let f2 = self.tape_linear(tape, &mut params, b, Slot::Ffn2, f1, train_base, &newest)?;
            x = tape.add(x, f2)?;
        }

        let fin_g = leaf(
            tape,
            &mut params,
            "final.g".into(),
            self.final_norm.gamma.clone(),
            train_base,
        );
        let fin_b = leaf(
            tape,
            &mut params,
            "final.b".into(),
            self.final_norm.beta.clone(),
            train_base,
        );
        let x = tape.layer_norm(x, fin_g, fin_b)?;
        let class_rows: Vec<usize> = (0..n).map(|s| s * seq).collect();
        let features = tape.gather_rows(x, &class_rows)?;
        Ok(TapeEncoding { features, params })
    }

    #[allow(clippy::too_many_arguments)]
    fn tape_linear(
        &self,
        tape: &mut Tape<T>,
        params: &mut Vec<(String, NodeId)>,
        block_idx: usize,
        slot: Slot,
        x: NodeId,
        train_base: bool,
        newest: &Option<(&[MixWeights], usize)>,
    ) -> Result<NodeId> {
        let lin = self.blocks[block_idx].linear(slot);
        let name = format!("{block_idx}.{}", slot.name());

        // effective frozen weight: base, or base with all but the newest
        // adapter folded in
        let (weight, bias) = match newest {
            Some((mix, steps)) if lin.adapter_count() > 0 => {
                lin.merged_prefix(mix[block_idx].weights(), steps - 1)?
            }
            _ => (lin.weight().clone(), lin.bias().to_vec()),
        };

        let w = if train_base {
            let id = tape.param(weight);
            params.push((format!("{name}.base.w"), id));
            id
        } else {
            tape.constant(weight)
        };
        let b = if train_base {
            let id = tape.param(Matrix::row_vec(&bias));
            params.push((format!("{name}.base.b"), id));
            id
        } else {
            tape.constant(Matrix::row_vec(&bias))
        };
        let wt = tape.transpose(w);
        let y = tape.matmul(x, wt)?;
        let mut y = tape.add_row_vec(y, b)?;

        if let Some((mix, steps)) = newest {
            if lin.adapter_count() > 0 {
                let step = steps - 1;
                let adapter = &lin.adapters()[step];
                let down = tape.param(adapter.down.clone());
                params.push((format!("{name}.{step}.down"), down));
                let up = tape.param(adapter.up.clone());
                params.push((format!("{name}.{step}.up"), up));
                let down_t = tape.transpose(down);
                let low = tape.matmul(x, down_t)?;
                let up_t = tape.transpose(up);
                let delta = tape.matmul(low, up_t)?;
                let coeff = adapter.scale() * T::from_f64(mix[block_idx].weights()[step]);
                let delta = tape.scale_const(delta, coeff);
                y = tape.add(y, delta)?;
            }
        }
        Ok(y)
    }

    fn attention_on_tape(
        &self,
        tape: &mut Tape<T>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_samples: usize,
    ) -> Result<NodeId> {
        let seq = self.cfg.tokens + 1;
        let heads = self.cfg.heads;
        let dk = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());

        let mut sample_outs = Vec::with_capacity(n_samples);
        for s in 0..n_samples {
            let qs = tape.slice_rows(q, s * seq, seq)?;
            let ks = tape.slice_rows(k, s * seq, seq)?;
            let vs = tape.slice_rows(v, s * seq, seq)?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(qs, h * dk, dk)?;
                let kh = tape.slice_cols(ks, h * dk, dk)?;
                let vh = tape.slice_cols(vs, h * dk, dk)?;
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale_const(scores, scale);
                let probs = tape.softmax_rows(scores);
                head_outs.push(tape.matmul(probs, vh)?);
            }
            sample_outs.push(tape.stack_cols(&head_outs)?);
        }
        tape.stack_rows(&sample_outs)
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn salt_tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            blocks: 2,
            d_model: 16,
            heads: 2,
            ffn_dim: 24,
            tokens: 3,
            patch_dim: 5,
            sites: vec![
                AdapterSite::Q,
                AdapterSite::K,
                AdapterSite::V,
                AdapterSite::Proj,
            ],
        }
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> Matrix<f32> {
        let mut rng = crate::rng::rng_from_seed(seed);
        Matrix::from_vec(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Give the newest adapter at each site random content so deltas matter.
    fn randomize_newest(enc: &mut Encoder<f32>, seed: u64) {
        let step = enc.adapter_steps() - 1;
        let mut rng = crate::rng::rng_from_seed(seed);
        for block in &mut enc.blocks {
            for slot in Slot::ALL {
                let lin = block.linear_mut(slot);
                if lin.adapter_count() > 0 {
                    for v in lin.adapters_mut()[step].up.data_mut() {
                        *v = rng.gen_range(-0.1..0.1);
                    }
                }
            }
        }
    }

    fn uniform_mix(blocks: usize, steps: usize) -> Vec<MixWeights> {
        (0..blocks)
            .map(|_| {
                MixWeights::from_weights(vec![1.0 / steps as f64; steps]).unwrap()
            })
            .collect()
    }

    use rand::Rng;

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.sites.clear();
        assert!(cfg.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }

    #[test]
    fn fresh_adapters_do_not_change_the_function() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 5).unwrap();
        let batch = random_batch(4, cfg.sample_dim(), 1);
        let base = enc.encode_base(&batch).unwrap();
        enc.add_step_adapters(4, 16.0, 77).unwrap();
        let mix = uniform_mix(cfg.blocks, 1);
        let mixed = enc.encode_mixed(&batch, &mix).unwrap();
        assert_eq!(base, mixed);
    }

    #[test]
    fn batch_row_permutation_permutes_features() {
        let cfg = small_cfg();
        let enc = Encoder::<f32>::seeded(cfg.clone(), 5).unwrap();
        let batch = random_batch(5, cfg.sample_dim(), 2);
        let feats = enc.encode_base(&batch).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted_rows: Vec<Vec<f32>> =
            perm.iter().map(|&i| batch.row(i).to_vec()).collect();
        let permuted = Matrix::from_rows(&permuted_rows).unwrap();
        let pfeats = enc.encode_base(&permuted).unwrap();
        for (out_r, &src) in perm.iter().enumerate() {
            assert_eq!(pfeats.row(out_r), feats.row(src));
        }
    }

    #[test]
    fn one_hot_mixing_equals_single_adapter_encoder() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 9).unwrap();
        for t in 0..3 {
            enc.add_step_adapters(4, 16.0, 100 + t).unwrap();
            randomize_newest(&mut enc, 200 + t);
        }
        let batch = random_batch(3, cfg.sample_dim(), 3);
        for hot in 0..3 {
            let mix: Vec<MixWeights> = (0..cfg.blocks)
                .map(|_| MixWeights::one_hot(3, hot).unwrap())
                .collect();
            let mixed = enc.encode_mixed(&batch, &mix).unwrap();

            // reference: an encoder holding only adapter `hot`
            let mut solo = enc.clone();
            for block in &mut solo.blocks {
                for slot in Slot::ALL {
                    let lin = block.linear_mut(slot);
                    if lin.adapter_count() > 0 {
                        let kept = lin.adapters()[hot].clone();
                        *lin = {
                            let mut plain =
                                AdaptedLinear::new(lin.weight().clone(), lin.bias().to_vec())
                                    .unwrap();
                            plain.add_adapter(kept.rank, kept.alpha, 0).unwrap();
                            plain.adapters_mut()[0] = kept;
                            plain
                        };
                    }
                }
            }
            let solo_mix = uniform_mix(cfg.blocks, 1);
            let solo_out = solo.encode_mixed(&batch, &solo_mix).unwrap();
            assert!(mixed.max_abs_diff(&solo_out) < 2e-5);
        }
    }

    #[test]
    fn merged_encoder_matches_mixed_forward() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 13).unwrap();
        for t in 0..3 {
            enc.add_step_adapters(4, 16.0, 300 + t).unwrap();
            randomize_newest(&mut enc, 400 + t);
        }
        let mut rng = crate::rng::rng_from_seed(31);
        let mix: Vec<MixWeights> = (0..cfg.blocks)
            .map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                MixWeights::from_weights(raw.iter().map(|x| x / sum).collect()).unwrap()
            })
            .collect();
        let batch = random_batch(6, cfg.sample_dim(), 4);
        let mixed = enc.encode_mixed(&batch, &mix).unwrap();
        let merged = enc.merged(&mix).unwrap();
        assert_eq!(merged.adapter_steps(), 0);
        let merged_out = merged.encode_base(&batch).unwrap();
        assert!(mixed.max_abs_diff(&merged_out) < 1e-4);
    }

    #[test]
    fn per_block_one_hot_composition_matches_hand_assembled() {
        // block 0 routed to adapter 0, block 1 routed to adapter 1
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 17).unwrap();
        for t in 0..2 {
            enc.add_step_adapters(4, 16.0, 500 + t).unwrap();
            randomize_newest(&mut enc, 600 + t);
        }
        let mix = vec![
            MixWeights::one_hot(2, 0).unwrap(),
            MixWeights::one_hot(2, 1).unwrap(),
        ];
        let batch = random_batch(4, cfg.sample_dim(), 5);
        let mixed = enc.encode_mixed(&batch, &mix).unwrap();

        // hand-fold the chosen adapter of each block into the base weights
        let mut folded = enc.clone();
        for (b, block) in folded.blocks.iter_mut().enumerate() {
            let hot = b; // block 0 -> adapter 0, block 1 -> adapter 1
            for slot in Slot::ALL {
                let lin = block.linear_mut(slot);
                if lin.adapter_count() > 0 {
                    let a = lin.adapters()[hot].clone();
                    let mut w = lin.weight().clone();
                    let scale = a.alpha as f32 / a.rank as f32;
                    for r in 0..w.rows() {
                        for c in 0..w.cols() {
                            let mut acc = 0.0f32;
                            for t in 0..a.rank {
                                acc += a.up[(r, t)] * a.down[(t, c)];
                            }
                            w[(r, c)] += scale * acc;
                        }
                    }
                    *lin = AdaptedLinear::new(w, lin.bias().to_vec()).unwrap();
                }
            }
        }
        let hand = folded.encode_base(&batch).unwrap();
        assert!(mixed.max_abs_diff(&hand) < 2e-5);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 23).unwrap();
        let batch = random_batch(4, cfg.sample_dim(), 6);

        // base path
        let plain = enc.encode_base(&batch).unwrap();
        let mut tape = Tape::new();
        let out = enc
            .encode_on_tape(&mut tape, &batch, &TapeMode::Frozen)
            .unwrap();
        assert!(tape.value(out.features).max_abs_diff(&plain) < 1e-5);
        assert!(out.params.is_empty());

        // adapter-step path vs mixed forward
        for t in 0..2 {
            enc.add_step_adapters(4, 16.0, 700 + t).unwrap();
            randomize_newest(&mut enc, 800 + t);
        }
        let mix = uniform_mix(cfg.blocks, 2);
        let mixed = enc.encode_mixed(&batch, &mix).unwrap();
        let mut tape = Tape::new();
        let out = enc
            .encode_on_tape(
                &mut tape,
                &batch,
                &TapeMode::TrainNewestAdapter { per_block_mix: &mix },
            )
            .unwrap();
        assert!(tape.value(out.features).max_abs_diff(&mixed) < 1e-5);
        // exactly two tensors per enabled site per block are trainable
        let adapted: usize = 4; // Q,K,V,Proj per block
        assert_eq!(out.params.len(), cfg.blocks * adapted * 2);
        assert!(out.params.iter().all(|(n, _)| n.contains(".1.")));
    }

    #[test]
    fn gradients_flow_only_into_newest_adapter() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 29).unwrap();
        for t in 0..2 {
            enc.add_step_adapters(4, 16.0, 900 + t).unwrap();
            randomize_newest(&mut enc, 1000 + t);
        }
        let batch = random_batch(3, cfg.sample_dim(), 7);
        let mix = uniform_mix(cfg.blocks, 2);
        let mut tape = Tape::new();
        let out = enc
            .encode_on_tape(
                &mut tape,
                &batch,
                &TapeMode::TrainNewestAdapter { per_block_mix: &mix },
            )
            .unwrap();
        let sq = tape.mul(out.features, out.features).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let mut nonzero = 0;
        for (name, id) in &out.params {
            let g = grads.get(*id, &tape);
            assert!(g.is_finite(), "{name} grad not finite");
            if g.max_abs() > 0.0 {
                nonzero += 1;
            }
        }
        // every up matrix gets signal; down matrices of the zero-init newest
        // adapter may start with zero grads only if up stayed zero, which
        // randomize_newest prevents
        assert!(nonzero >= out.params.len() / 2, "{nonzero} of {}", out.params.len());
    }

    #[test]
    fn mixing_vector_length_must_match_blocks() {
        let cfg = small_cfg();
        let mut enc = Encoder::<f32>::seeded(cfg.clone(), 31).unwrap();
        enc.add_step_adapters(4, 16.0, 1).unwrap();
        let batch = random_batch(2, cfg.sample_dim(), 8);
        let mix = uniform_mix(1, 1);
        assert!(matches!(
            enc.encode_mixed(&batch, &mix),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn batch_width_is_checked() {
        let cfg = small_cfg();
        let enc = Encoder::<f32>::seeded(cfg, 37).unwrap();
        let batch = random_batch(2, 7, 9);
        assert!(matches!(enc.encode_base(&batch), Err(Error::Dim(_))));
    }
}
