//! LLaMA-style decoder: token embedding, rotary causal attention, RMSNorm,
//! SwiGLU MLP and an output head, plus the adapter attachment points.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{base_attention, AttentionOutput, AttentionWeights, AttnShape, MaskCache};
use crate::baselines::{
    lora_attention, prefix_forward, LoraBlock, LoraConfig, PrefixAdapterBlock, PrefixConfig,
};
use crate::error::{Error, Result};
use crate::excitor::{fused_attention, ExcitorBlock, ExcitorConfig};
use crate::graph::{Graph, Var};
use crate::multimodal::{build_kv, VisualBatch, VisualPrompt};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::sampling::{sample_next, GenerateOptions};
use crate::tensor::{ParamId, ParamStore, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Reuse the embedding table as the output head.
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 64, 4 heads, 64 tokens.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            dim: 64,
            n_heads: 4,
            vocab: 64,
            max_seq: 64,
            mlp_hidden: 256,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.dim", self.dim),
            ("model.n_heads", self.n_heads),
            ("model.vocab", self.vocab),
            ("model.max_seq", self.max_seq),
            ("model.mlp_hidden", self.mlp_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.n_heads ({}) must divide model.dim ({})",
                self.n_heads, self.dim
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary embedding".into()));
        }
        if !(self.rope_base > 0.0) || self.norm_eps < 0.0 {
            return Err(Error::Config("rope_base must be > 0 and norm_eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub attn_norm: ParamId,
    pub attn: AttentionWeights,
    pub mlp_norm: ParamId,
    /// Gate projection `[C, H]`.
    pub w1: ParamId,
    /// Down projection `[H, C]`.
    pub w2: ParamId,
    /// Up projection `[C, H]`.
    pub w3: ParamId,
}

/// Adapter carried by one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerAdapter {
    None,
    Excitor(ExcitorBlock),
    Lora(LoraBlock),
    Prefix(PrefixAdapterBlock),
}

/// Adapter attached to the whole model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adapter {
    None,
    Excitor(ExcitorConfig),
    Lora(LoraConfig),
    Prefix(PrefixConfig),
}

impl Adapter {
    pub fn name(&self) -> &'static str {
        match self {
            Adapter::None => "none",
            Adapter::Excitor(c) if c.visual_dim.is_some() => "excitor-mm",
            Adapter::Excitor(_) => "excitor",
            Adapter::Lora(_) => "lora",
            Adapter::Prefix(_) => "prefix",
        }
    }
}

/// Tokens of `batch` sequences, each padded to length `seq`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn single(tokens: &[usize]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            batch: 1,
            seq: tokens.len(),
        }
    }

    /// Right-pad every row with `pad` to the longest row. Under the causal
    /// mask, padding never influences earlier positions.
    pub fn padded(rows: &[Vec<usize>], pad: usize) -> Self {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            tokens.extend_from_slice(r);
            tokens.extend(core::iter::repeat(pad).take(seq - r.len()));
        }
        Self {
            tokens,
            batch: rows.len(),
            seq,
        }
    }
}

/// Intermediate values of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// Residual stream entering the layer.
    pub input: Var,
    /// Normalised attention input (`T_l`).
    pub normed: Var,
    pub attn: AttentionOutput,
    /// Residual stream leaving the layer.
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
    pub embedded: Var,
}

/// The decoder and whatever adapter is attached to it.
#[derive(Debug, Clone)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
    embed: ParamId,
    layers: Vec<LayerParams>,
    norm: ParamId,
    head: Option<ParamId>,
    adapters: Vec<LayerAdapter>,
    adapter: Adapter,
    masks: MaskCache,
}

/// True for tensors owned by an adapter rather than the base decoder.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("excitor.") || name.starts_with("lora.") || name.starts_with("prefix.")
}

impl<R: Real> Model<R> {
    /// Fresh model with seeded weights. Base parameters start frozen; call
    /// [`Model::set_full_finetune`] to train them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SplitMix64::derive(seed, "base-init");
        let (c, h) = (config.dim, config.mlp_hidden);
        let resid_std = INIT_STD / libm_sqrt(2.0 * config.n_layers.max(1) as f64);
        let embed = params.add("embed", Tensor::randn(&[config.vocab, c], INIT_STD, &mut rng))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layer.{l}.{s}");
            let attn_norm = params.add(&n("attn_norm"), Tensor::filled(&[c], R::one()))?;
            let wq = params.add(&n("attn.wq"), Tensor::randn(&[c, c], INIT_STD, &mut rng))?;
            let wk = params.add(&n("attn.wk"), Tensor::randn(&[c, c], INIT_STD, &mut rng))?;
            let wv = params.add(&n("attn.wv"), Tensor::randn(&[c, c], INIT_STD, &mut rng))?;
            let wo = params.add(&n("attn.wo"), Tensor::randn(&[c, c], resid_std, &mut rng))?;
            let mlp_norm = params.add(&n("mlp_norm"), Tensor::filled(&[c], R::one()))?;
            let w1 = params.add(&n("mlp.w1"), Tensor::randn(&[c, h], INIT_STD, &mut rng))?;
            let w2 = params.add(&n("mlp.w2"), Tensor::randn(&[h, c], resid_std, &mut rng))?;
            let w3 = params.add(&n("mlp.w3"), Tensor::randn(&[c, h], INIT_STD, &mut rng))?;
            layers.push(LayerParams {
                attn_norm,
                attn: AttentionWeights { wq, wk, wv, wo },
                mlp_norm,
                w1,
                w2,
                w3,
            });
        }
        let norm = params.add("norm", Tensor::filled(&[c], R::one()))?;
        let head = if config.tie_embeddings {
            None
        } else {
            Some(params.add("head", Tensor::randn(&[c, config.vocab], INIT_STD, &mut rng))?)
        };
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            params.set_frozen(id, true);
        }
        Ok(Self {
            config,
            params,
            embed,
            layers,
            norm,
            head,
            adapters: vec![LayerAdapter::None; config.n_layers],
            adapter: Adapter::None,
            masks: MaskCache::new(config.max_seq),
        })
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn layer_adapter(&self, layer: usize) -> &LayerAdapter {
        &self.adapters[layer]
    }

    pub fn layer_params(&self, layer: usize) -> &LayerParams {
        &self.layers[layer]
    }

    pub fn base_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| !is_adapter_param(&p.name))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| is_adapter_param(&p.name))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn total_count(&self) -> usize {
        self.params.total_count()
    }

    fn freeze_base(&mut self) {
        for id in self.base_param_ids() {
            self.params.set_frozen(id, true);
        }
    }

    /// Toggle training of every base parameter. Adapter parameters are left
    /// as they are.
    pub fn set_full_finetune(&mut self, on: bool) {
        for id in self.base_param_ids() {
            self.params.set_frozen(id, !on);
        }
    }

    fn ensure_unadapted(&self) -> Result<()> {
        if self.adapter != Adapter::None {
            return Err(Error::AlreadyAdapted);
        }
        Ok(())
    }

    /// Attach Excitor blocks to layers `[N − L, N)` and freeze the base.
    pub fn attach_excitor(&mut self, cfg: ExcitorConfig, seed: u64) -> Result<()> {
        self.ensure_unadapted()?;
        cfg.validate(self.config.n_layers, self.config.dim)?;
        let first = cfg.first_layer(self.config.n_layers);
        for l in first..self.config.n_layers {
            let block = ExcitorBlock::init(
                &mut self.params,
                l,
                self.config.dim,
                self.config.n_heads,
                &cfg,
                seed,
            )?;
            self.adapters[l] = LayerAdapter::Excitor(block);
        }
        self.adapter = Adapter::Excitor(cfg);
        self.freeze_base();
        Ok(())
    }

    /// LoRA on `W_q`/`W_v` of the topmost `cfg.n_layers` layers.
    pub fn attach_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        self.ensure_unadapted()?;
        cfg.validate(self.config.n_layers, self.config.dim)?;
        for l in self.config.n_layers - cfg.n_layers..self.config.n_layers {
            let block = LoraBlock::init(&mut self.params, l, self.config.dim, &cfg, seed)?;
            self.adapters[l] = LayerAdapter::Lora(block);
        }
        self.adapter = Adapter::Lora(cfg);
        self.freeze_base();
        Ok(())
    }

    /// Gated prefix adapter on the topmost `cfg.n_layers` layers.
    pub fn attach_prefix(&mut self, cfg: PrefixConfig, seed: u64) -> Result<()> {
        self.ensure_unadapted()?;
        cfg.validate(self.config.n_layers)?;
        for l in self.config.n_layers - cfg.n_layers..self.config.n_layers {
            let block = PrefixAdapterBlock::init(
                &mut self.params,
                l,
                self.config.dim,
                self.config.n_heads,
                &cfg,
                seed,
            )?;
            self.adapters[l] = LayerAdapter::Prefix(block);
        }
        self.adapter = Adapter::Prefix(cfg);
        self.freeze_base();
        Ok(())
    }

    pub fn attach(&mut self, adapter: Adapter, seed: u64) -> Result<()> {
        match adapter {
            Adapter::None => Ok(()),
            Adapter::Excitor(c) => self.attach_excitor(c, seed),
            Adapter::Lora(c) => self.attach_lora(c, seed),
            Adapter::Prefix(c) => self.attach_prefix(c, seed),
        }
    }

    /// Set every Excitor (or prefix) gate to zero.
    pub fn zero_gates(&mut self) {
        for a in self.adapters.clone() {
            let gate = match a {
                LayerAdapter::Excitor(b) => b.gate,
                LayerAdapter::Prefix(b) => b.gate,
                _ => continue,
            };
            self.params
                .get_mut(gate)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = R::zero());
        }
    }

    fn attn_shape(&self, batch: &TokenBatch) -> AttnShape {
        AttnShape {
            batch: batch.batch,
            seq: batch.seq,
            heads: self.config.n_heads,
            rope_base: self.config.rope_base,
        }
    }

    /// Forward pass over a padded batch. `visual`, when given, feeds the
    /// multimodal Excitor; without it the visual set is empty (V = 0).
    pub fn forward(
        &self,
        g: &mut Graph<R>,
        batch: &TokenBatch,
        visual: Option<&VisualBatch<R>>,
    ) -> Result<ForwardOutput> {
        if batch.seq == 0 || batch.batch == 0 {
            return Err(Error::EmptySequence);
        }
        if batch.seq > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Vocabulary {
                token: t,
                vocab: self.config.vocab,
            });
        }
        let shape = self.attn_shape(batch);
        let mask = self.masks.get(batch.seq);
        let eps = R::from_f64(self.config.norm_eps);
        let features = match visual {
            Some(v) if v.rows_per_sample > 0 => {
                if v.features.dims2().0 != batch.batch * v.rows_per_sample {
                    return Err(crate::error::dim_err(
                        "visual batch",
                        v.features.shape(),
                        &[batch.batch, v.rows_per_sample],
                    ));
                }
                Some((g.constant(v.features.clone()), v.rows_per_sample))
            }
            _ => None,
        };

        let table = g.param(&self.params, self.embed);
        let embedded = g.embedding(table, &batch.tokens)?;
        let mut x = embedded;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            let wn = g.param(&self.params, lp.attn_norm);
            let t = g.rmsnorm(x, wn, eps)?;
            let w = lp.attn.bind(g, &self.params);
            let attn = match &self.adapters[l] {
                LayerAdapter::None => base_attention(g, &shape, t, &w, mask.clone())?,
                LayerAdapter::Excitor(block) => {
                    let bv = block.bind(g, &self.params);
                    let kv = match (features, bv.visual) {
                        (Some((f, v)), Some(proj)) => {
                            Some(build_kv(g, &bv, &proj, f, batch.batch, v)?)
                        }
                        _ => None,
                    };
                    fused_attention(g, &shape, t, &w, &bv, kv.as_ref(), mask.clone())?
                }
                LayerAdapter::Lora(block) => {
                    let deltas = block.bind(g, &self.params);
                    lora_attention(g, &shape, t, &w, &deltas, mask.clone())?
                }
                LayerAdapter::Prefix(block) => {
                    let pv = block.bind(g, &self.params);
                    prefix_forward(g, &shape, t, &w, &pv, mask.clone())?
                }
            };
            let h = g.add(x, attn.output)?;
            let wm = g.param(&self.params, lp.mlp_norm);
            let hn = g.rmsnorm(h, wm, eps)?;
            let w1 = g.param(&self.params, lp.w1);
            let w3 = g.param(&self.params, lp.w3);
            let w2 = g.param(&self.params, lp.w2);
            let a = g.matmul(hn, w1)?;
            let a = g.silu(a);
            let b = g.matmul(hn, w3)?;
            let ab = g.mul(a, b)?;
            let m = g.matmul(ab, w2)?;
            let out = g.add(h, m)?;
            layers.push(LayerTrace {
                input: x,
                normed: t,
                attn,
                output: out,
            });
            x = out;
        }
        let wn = g.param(&self.params, self.norm);
        let xn = g.rmsnorm(x, wn, eps)?;
        let logits = match self.head {
            Some(head) => {
                let hv = g.param(&self.params, head);
                g.matmul(xn, hv)?
            }
            None => g.matmul_nt(xn, table)?,
        };
        Ok(ForwardOutput {
            logits,
            layers,
            embedded,
        })
    }

    /// Logits of a single unpadded sequence, as a plain tensor.
    pub fn logits(&self, tokens: &[usize], visual: Option<&VisualPrompt<R>>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let batch = TokenBatch::single(tokens);
        let vb = match visual {
            Some(v) => Some(VisualBatch::repeat(v, 1)?),
            None => None,
        };
        let out = self.forward(&mut g, &batch, vb.as_ref())?;
        Ok(g.value(out.logits).clone())
    }

    /// Autoregressive decoding without a key/value cache. Returns only the
    /// new tokens; generation stops after `max_new` tokens, on `eos` (not
    /// included), or when the context reaches `max_seq`.
    pub fn generate(
        &self,
        prompt: &[usize],
        opts: &GenerateOptions,
        rng: &mut SplitMix64,
        visual: Option<&VisualPrompt<R>>,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        opts.validate()?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < opts.max_new && seq.len() < self.config.max_seq {
            let logits = self.logits(&seq, visual)?;
            let last = logits.row(seq.len() - 1);
            let next = sample_next(last, opts.temperature, opts.top_p, rng)?;
            if Some(next) == opts.eos {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Redraw every matrix of the base model from N(0, base_std²) and every
    /// adapter tensor from N(0, adapter_std²); norm weights are left alone.
    /// Used to build well-conditioned instances for gradient checks, where
    /// the small training init would leave most gradients near round-off.
    pub fn randomize(&mut self, base_std: f64, adapter_std: f64, seed: u64) {
        let mut rng = SplitMix64::derive(seed, "randomize");
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let p = self.params.get_mut(id);
            let std = if is_adapter_param(&p.name) {
                adapter_std
            } else if p.name.ends_with("norm") {
                continue;
            } else {
                base_std
            };
            for x in p.value.data_mut() {
                *x = R::from_f64(rng.normal() * std);
            }
        }
    }

    /// Names of all parameters, in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(_, p)| p.name.clone()).collect()
    }
}

fn libm_sqrt(v: f64) -> f64 {
    num_traits::Float::sqrt(v)
}
