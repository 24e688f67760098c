use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::attention::{attend, CrossModalAttention, TokenSelfAttention};
use crate::fusion::moe::MoELayer;
use crate::fusion::quality::{gate, global_context, quality_entropy, quality_neural, quality_score};
use crate::losses::ProjectionHead;
use crate::numerics::{dropout, LayerNorm, Linear, ParamId, ParamStore, RngStream, Tape, Tensor2, Var};
use crate::trainer::HyperParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Input width of each modality, in modality order.
    pub d_in: Vec<usize>,
    pub d_f: usize,
    pub classes: usize,
    pub heads: usize,
    pub layers: usize,
    pub queries: usize,
    pub experts: usize,
    pub proj_dim: usize,
    pub alpha_cross: f64,
    pub beta_cross: f64,
    pub dropout: f64,
}

impl FusionConfig {
    pub fn from_hyper(hp: &HyperParams, d_in: Vec<usize>, classes: usize) -> Self {
        Self {
            d_in,
            d_f: hp.fusion_dim,
            classes,
            heads: hp.encoder_heads,
            layers: hp.encoder_layers,
            queries: hp.pool_queries,
            experts: hp.experts,
            proj_dim: hp.proj_dim,
            alpha_cross: hp.alpha_cross,
            beta_cross: hp.beta_cross,
            dropout: hp.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in.len() < 2 {
            return Err(Error::Config("fusion needs at least two modalities".into()));
        }
        if self.heads == 0 || self.d_f % self.heads != 0 {
            return Err(Error::Config(format!("fusion width {} not divisible by {} heads", self.d_f, self.heads)));
        }
        if self.queries == 0 || self.experts == 0 || self.classes == 0 {
            return Err(Error::Config("fusion needs queries, experts and classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-norm transformer block over the modality tokens of each utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: TokenSelfAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut RngStream) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: TokenSelfAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, 2 * d, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * d, d, true, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        groups: usize,
        p: f64,
        rng: &mut Option<&mut RngStream>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let h = self.norm1.forward(tape, store, x)?;
        let (a, weights) = self.attn.forward(tape, store, h, groups)?;
        let a = maybe_dropout(tape, a, p, rng)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.ff1.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.ff2.forward(tape, store, h)?;
        let h = maybe_dropout(tape, h, p, rng)?;
        Ok((tape.add(x, h)?, weights))
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut Option<&mut RngStream>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => dropout(tape, x, p, r),
        _ => Ok(x),
    }
}

/// One batch of per-modality inputs.
pub struct FusionInput {
    /// `N × d_in[m]` representations, one per modality.
    pub hidden: Vec<Var>,
    /// `N × C` class probabilities of each modality network.
    pub probs: Vec<Tensor2>,
    /// Variance-ratio statistic per modality (batch value or running average).
    pub stats: Vec<f64>,
}

pub struct FusionForward {
    pub logits: Var,
    /// Mean of the pooled vectors, `N × d_f`.
    pub pooled: Var,
    /// L2-normalised projection of `pooled` for the contrastive term.
    pub z: Var,
    /// `1×1` quality score per modality.
    pub quality: Vec<Var>,
    pub cross_attention: Vec<Vec<Var>>,
    /// Per block, per query modality, per key modality: `N × heads`.
    pub self_attention: Vec<Vec<Vec<Var>>>,
    pub routing: Var,
    /// Per pooling query, per modality token: `N × 1`.
    pub pool_attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub store: ParamStore,
    proj: Vec<Linear>,
    neural_w: Vec<ParamId>,
    neural_b: Vec<ParamId>,
    w_quality: ParamId,
    w_gate: ParamId,
    cross: CrossModalAttention,
    moe: MoELayer,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    queries: Vec<ParamId>,
    classifiers: Vec<Linear>,
    projection: ProjectionHead,
}

impl FusionModel {
    pub fn new(cfg: FusionConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_f;
        let mut store = ParamStore::new();
        let mut proj = Vec::new();
        let mut neural_w = Vec::new();
        let mut neural_b = Vec::new();
        for (m, &d_in) in cfg.d_in.iter().enumerate() {
            proj.push(Linear::new(&mut store, &format!("fusion.proj{m}"), d_in, d, true, rng));
            neural_w.push(store.add(format!("fusion.quality{m}.weight"), Tensor2::glorot(d, 1, rng), true)?);
            neural_b.push(store.add(format!("fusion.quality{m}.bias"), Tensor2::zeros(1, 1), false)?);
        }
        let w_quality = store.add("fusion.quality.mix", Tensor2::glorot(3, 1, rng), true)?;
        let w_gate = store.add("fusion.gate.weight", Tensor2::glorot(2 * d, d, rng), true)?;
        let cross = CrossModalAttention::new(&mut store, "fusion.cross", d, cfg.heads, rng);
        let moe = MoELayer::new(&mut store, "fusion.moe", d, d, cfg.experts, rng)?;
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::new(&mut store, &format!("fusion.block{l}"), d, cfg.heads, rng))
            .collect();
        let final_norm = LayerNorm::new(&mut store, "fusion.norm", d);
        let mut queries = Vec::new();
        let mut classifiers = Vec::new();
        for k in 0..cfg.queries {
            queries.push(store.add(format!("fusion.pool{k}.query"), Tensor2::randn(1, d, (1.0 / d as f64).sqrt(), rng), false)?);
            classifiers.push(Linear::new(&mut store, &format!("fusion.pool{k}.classifier"), d, cfg.classes, true, rng));
        }
        let projection = ProjectionHead::new(&mut store, "fusion.projection", d, cfg.proj_dim, rng);
        Ok(Self {
            cfg,
            store,
            proj,
            neural_w,
            neural_b,
            w_quality,
            w_gate,
            cross,
            moe,
            blocks,
            final_norm,
            queries,
            classifiers,
            projection,
        })
    }

    pub fn classifiers(&self) -> &[Linear] {
        &self.classifiers
    }

    /// Full forward pass. Dropout is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, input: &FusionInput, rng: Option<&mut RngStream>) -> Result<FusionForward> {
        self.forward_in(tape, &self.store, input, rng)
    }

    /// Forward pass reading parameters from `store` instead of `self.store`.
    pub fn forward_in(&self, tape: &mut Tape, store: &ParamStore, input: &FusionInput, mut rng: Option<&mut RngStream>) -> Result<FusionForward> {
        let m_count = self.cfg.d_in.len();
        if input.hidden.len() != m_count || input.probs.len() != m_count || input.stats.len() != m_count {
            return Err(Error::Input(format!("fusion expects {m_count} modalities")));
        }
        let n = tape.shape(input.hidden[0]).0;
        let p = self.cfg.dropout;

        let mut h = Vec::with_capacity(m_count);
        for (m, &x) in input.hidden.iter().enumerate() {
            if tape.shape(x) != (n, self.cfg.d_in[m]) {
                return Err(Error::dim("fusion input", tape.shape(x), (n, self.cfg.d_in[m])));
            }
            let y = self.proj[m].forward(tape, store, x)?;
            h.push(maybe_dropout(tape, y, p, &mut rng)?);
        }

        let w_q = tape.param(store, self.w_quality);
        let mut quality = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let qe = quality_entropy(&input.probs[m])?;
            let w = tape.param(store, self.neural_w[m]);
            let b = tape.param(store, self.neural_b[m]);
            let qn = quality_neural(tape, h[m], w, b)?;
            let fixed = tape.constant(Tensor2::row_vector(&[input.stats[m], qe]));
            let ind = tape.concat_cols(&[fixed, qn])?;
            quality.push(quality_score(tape, ind, w_q)?);
        }
        let context = global_context(tape, &h, &quality)?;
        let w_g = tape.param(store, self.w_gate);
        let mut gated = Vec::with_capacity(m_count);
        for &hm in &h {
            gated.push(gate(tape, hm, context, w_g)?);
        }

        let cross = self.cross.forward(tape, store, &gated, self.cfg.alpha_cross, self.cfg.beta_cross)?;
        let tokens = tape.concat_rows(&cross.features)?;
        let moe = self.moe.forward(tape, store, tokens)?;
        let mut x = tape.add(tokens, moe.out)?;
        let mut self_attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(tape, store, x, m_count, p, &mut rng)?;
            x = y;
            self_attention.push(w);
        }
        let x = self.final_norm.forward(tape, store, x)?;
        let mut parts = Vec::with_capacity(m_count);
        for m in 0..m_count {
            parts.push(tape.slice_rows(x, m * n, n)?);
        }

        let mut logits: Option<Var> = None;
        let mut pooled: Option<Var> = None;
        let mut pool_attention = Vec::with_capacity(self.queries.len());
        for (&qid, cls) in self.queries.iter().zip(&self.classifiers) {
            let q = tape.param(store, qid);
            let (v, w) = attend(tape, q, &parts, &parts, 1)?;
            pool_attention.push(w);
            let l = cls.forward(tape, store, v)?;
            logits = Some(match logits {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
            pooled = Some(match pooled {
                Some(acc) => tape.add(acc, v)?,
                None => v,
            });
        }
        let k = self.queries.len() as f64;
        let logits = tape.scale(logits.expect("at least one query"), 1.0 / k)?;
        let pooled = tape.scale(pooled.expect("at least one query"), 1.0 / k)?;
        let z = self.projection.forward(tape, store, pooled)?;
        Ok(FusionForward {
            logits,
            pooled,
            z,
            quality,
            cross_attention: cross.weights,
            self_attention,
            routing: moe.routing,
            pool_attention,
        })
    }
}
