//! Decoder-only transformer whose linear projections each carry a gated bank
//! of LoRA pairs.
//!
//! Block structure (residual plus layer norm of the sublayer output, in that
//! order, rather than the usual pre-norm arrangement):
//!
//! ```text
//! X' = X  + LN(Attn(X))
//! O  = FFN(X') with every projection y = x·W + b + (α/r)·Σ ω_i · x·A_i·B_i
//! H  = X' + LN(O)
//! ```
//!
//! The gate weights ω come from the aspect id alone and are shared by every
//! bank in the network for one forward pass.

mod infer;
mod lora;
mod params;
mod sampling;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use infer::{DecodeState, InferenceModel};
pub use lora::{lora_delta, LoraBank, LoraPair};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use sampling::{sample_next, SamplingConfig};

use crate::autodiff::{Graph, Tensor, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::gating::{self, AspectId, GateParams, GateWeights, RoutingStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    FfnIn,
    FfnOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::FfnIn,
        Projection::FfnOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::FfnIn => "ffn_in",
            Projection::FfnOut => "ffn_out",
        }
    }

    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::FfnIn => (cfg.d_model, cfg.d_ff),
            Projection::FfnOut => (cfg.d_ff, cfg.d_model),
            _ => (cfg.d_model, cfg.d_model),
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Shape of the adapter stack attached to a base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_loras: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub n_aspects: usize,
    pub gate_dim: usize,
    #[serde(default)]
    pub routing: RoutingStrategy,
    /// One ungated single-pair adapter set per aspect instead of one shared
    /// gated bank.
    #[serde(default)]
    pub per_aspect: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            n_loras: 8,
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            n_aspects: gating::DEFAULT_ASPECTS,
            gate_dim: gating::DEFAULT_GATE_DIM,
            routing: RoutingStrategy::AllModules,
            per_aspect: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_loras == 0 || self.rank == 0 || self.n_aspects == 0 || self.gate_dim == 0 {
            return Err(Error::Config("adapter counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.per_aspect && self.n_loras != 1 {
            return Err(Error::Config("per-aspect adapters hold exactly one pair".into()));
        }
        for p in Projection::ALL {
            let (din, dout) = p.dims(model);
            if self.rank >= din.min(dout) {
                return Err(Error::Config(format!(
                    "rank {} not below min(d_in, d_out) = {} for {}",
                    self.rank,
                    din.min(dout),
                    p.name()
                )));
            }
        }
        self.routing.validate(self.n_loras)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn n_sets(&self) -> usize {
        if self.per_aspect {
            self.n_aspects
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct LayerIds {
    proj: [LinearIds; 6],
    ln_attn: (ParamId, ParamId),
    ln_ffn: (ParamId, ParamId),
}

/// `(A_i, B_i)` ids of one bank.
type BankIds = Vec<(ParamId, ParamId)>;

#[derive(Clone, Debug)]
struct GateIds {
    embedding: ParamId,
    linear: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
    /// `sets[s][layer][projection]`
    sets: Vec<Vec<[BankIds; 6]>>,
    gate: Option<GateIds>,
}

/// Inverted-dropout masks drawn from a seeded stream.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

/// Parameters bound into a graph, index-aligned with the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Caller-built nodes, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Merged per-projection adapter deltas `(α/r)·Σ ω_i A_i B_i` for one aspect.
#[derive(Clone, Debug)]
pub struct AspectDeltas {
    pub omega: Option<Var>,
    layers: Vec<[Var; 6]>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `seq_len × vocab_size`
    pub logits: Var,
    /// Last-block hidden states, `seq_len × d_model`
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub adapters: Option<AdapterConfig>,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh base model with no adapters.
    pub fn new_base(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let base = ParamGroup::Base;
        let tok_emb = params.add("base.tok_emb", base, Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng));
        let pos_emb = params.add("base.pos_emb", base, Tensor::randn(&[config.max_seq_len, d], 0.5, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let proj = Projection::ALL.map(|p| {
                let (din, dout) = p.dims(&config);
                let std = 1.0 / (din as f64).sqrt();
                LinearIds {
                    w: params.add(format!("base.l{l}.{}.w", p.name()), base, Tensor::randn(&[din, dout], std, &mut rng)),
                    b: params.add(format!("base.l{l}.{}.b", p.name()), base, Tensor::zeros(&[dout])),
                }
            });
            let ln = |params: &mut ParamStore, name: &str| {
                (
                    params.add(format!("base.l{l}.{name}.g"), base, Tensor::filled(&[d], 1.0)),
                    params.add(format!("base.l{l}.{name}.b"), base, Tensor::zeros(&[d])),
                )
            };
            let ln_attn = ln(&mut params, "ln_attn");
            let ln_ffn = ln(&mut params, "ln_ffn");
            layers.push(LayerIds { proj, ln_attn, ln_ffn });
        }
        let head_w = params.add(
            "base.head.w",
            base,
            Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let head_b = params.add("base.head.b", base, Tensor::zeros(&[config.vocab_size]));
        Ok(Model {
            config,
            adapters: None,
            params,
            layout: Layout {
                tok_emb,
                pos_emb,
                layers,
                head_w,
                head_b,
                sets: Vec::new(),
                gate: None,
            },
        })
    }

    /// Copy of this model's base with freshly initialized adapters:
    /// A ~ N(0, 0.02²), B = 0, gate per [`GateParams::init`].
    pub fn with_adapters(&self, adapters: AdapterConfig, seed: u64) -> Result<Model> {
        adapters.validate(&self.config)?;
        let mut model = self.base_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in 0..adapters.n_sets() {
            let mut set = Vec::with_capacity(self.config.n_layers);
            for l in 0..self.config.n_layers {
                let banks = Projection::ALL.map(|p| {
                    let (din, dout) = p.dims(&self.config);
                    (0..adapters.n_loras)
                        .map(|i| {
                            let prefix = format!("lora.s{s}.l{l}.{}", p.name());
                            let a = model.params.add(
                                format!("{prefix}.a{i}"),
                                ParamGroup::Lora,
                                Tensor::randn(&[din, adapters.rank], 0.02, &mut rng),
                            );
                            let b = model.params.add(
                                format!("{prefix}.b{i}"),
                                ParamGroup::Lora,
                                Tensor::zeros(&[adapters.rank, dout]),
                            );
                            (a, b)
                        })
                        .collect()
                });
                set.push(banks);
            }
            model.layout.sets.push(set);
        }
        if !adapters.per_aspect {
            let gp = GateParams::init(adapters.n_aspects, adapters.gate_dim, adapters.n_loras, &mut rng);
            model.layout.gate = Some(GateIds {
                embedding: model.params.add("gate.embedding", ParamGroup::Gate, gp.embedding),
                linear: model.params.add("gate.linear", ParamGroup::Gate, gp.linear),
                bias: model.params.add("gate.bias", ParamGroup::Gate, gp.bias),
            });
        }
        model.adapters = Some(adapters);
        Ok(model)
    }

    /// The base parameters alone.
    pub fn base_model(&self) -> Model {
        let mut params = ParamStore::new();
        for p in self.params.iter().filter(|p| p.group == ParamGroup::Base) {
            params.add(p.name.clone(), p.group, p.tensor.clone());
        }
        let mut layout = self.layout.clone();
        layout.sets.clear();
        layout.gate = None;
        Model {
            config: self.config.clone(),
            adapters: None,
            params,
            layout,
        }
    }

    pub fn n_aspects(&self) -> Option<usize> {
        self.adapters.as_ref().map(|a| a.n_aspects)
    }

    pub fn check_aspect(&self, aspect: AspectId) -> Result<()> {
        if let Some(n) = self.n_aspects() {
            AspectId::checked(aspect.0, n)?;
        }
        Ok(())
    }

    pub fn gate_params(&self) -> Option<GateParams> {
        self.layout.gate.as_ref().map(|g| GateParams {
            embedding: self.params.get(g.embedding).clone(),
            linear: self.params.get(g.linear).clone(),
            bias: self.params.get(g.bias).clone(),
        })
    }

    /// The LoRA bank on `projection` of `layer` in adapter set `set`.
    pub fn bank(&self, set: usize, layer: usize, projection: Projection) -> Option<LoraBank> {
        let adapters = self.adapters.as_ref()?;
        let ids = self.layout.sets.get(set)?.get(layer)?.get(projection.slot())?;
        Some(LoraBank {
            pairs: ids
                .iter()
                .map(|&(a, b)| LoraPair {
                    a: self.params.get(a).clone(),
                    b: self.params.get(b).clone(),
                })
                .collect(),
            alpha: adapters.alpha,
            rank: adapters.rank,
        })
    }

    /// Mutable access to `(A_i, B_i)` of a bank, for tests and surgery.
    pub fn bank_pair_ids(&self, set: usize, layer: usize, projection: Projection) -> Vec<(ParamId, ParamId)> {
        self.layout.sets[set][layer][projection.slot()].clone()
    }

    pub fn gate_ids(&self) -> Option<(ParamId, ParamId, ParamId)> {
        self.layout.gate.as_ref().map(|g| (g.embedding, g.linear, g.bias))
    }

    pub fn base_linear_ids(&self, layer: usize, projection: Projection) -> (ParamId, ParamId) {
        let l = self.layout.layers[layer].proj[projection.slot()];
        (l.w, l.b)
    }

    /// Gate weights after routing for `aspect`; `None` for models without a gate.
    pub fn gate_weights(&self, aspect: AspectId) -> Result<Option<GateWeights>> {
        self.check_aspect(aspect)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        Ok(self
            .omega(&mut g, &bound, aspect)?
            .map(|w| GateWeights(g.value(w).data().to_vec())))
    }

    pub fn bind(&self, g: &mut Graph, trainable: &[ParamGroup]) -> Bound {
        Bound(self.params.bind(g, trainable))
    }

    pub fn bind_mask(&self, g: &mut Graph, trainable: &[bool]) -> Result<Bound> {
        if trainable.len() != self.params.len() {
            return Err(Error::dim("bind_mask", &[trainable.len()], &[self.params.len()]));
        }
        Ok(Bound(self.params.bind_mask(g, trainable)))
    }

    fn omega(&self, g: &mut Graph, bound: &Bound, aspect: AspectId) -> Result<Option<Var>> {
        let (Some(ids), Some(adapters)) = (&self.layout.gate, &self.adapters) else {
            return Ok(None);
        };
        let w = gating::gate_graph(
            g,
            bound.var(ids.embedding),
            bound.var(ids.linear),
            bound.var(ids.bias),
            aspect,
        )?;
        Ok(Some(gating::route_graph(g, w, adapters.routing)?))
    }

    /// Build the merged adapter deltas for `aspect` into `g`. Returns `None`
    /// for a model without adapters.
    pub fn aspect_deltas(&self, g: &mut Graph, bound: &Bound, aspect: AspectId) -> Result<Option<AspectDeltas>> {
        let Some(adapters) = &self.adapters else {
            return Ok(None);
        };
        AspectId::checked(aspect.0, adapters.n_aspects)?;
        if adapters.per_aspect {
            let one = g.constant(Tensor::vector(vec![1.0]));
            return self.deltas_with(g, bound, aspect.0, one, None).map(Some);
        }
        let omega = self.omega(g, bound, aspect)?.expect("shared layout has a gate");
        self.deltas_with(g, bound, 0, omega, Some(omega)).map(Some)
    }

    fn deltas_with(&self, g: &mut Graph, bound: &Bound, set: usize, weights: Var, omega: Option<Var>) -> Result<AspectDeltas> {
        let adapters = self.adapters.as_ref().expect("adapters present");
        let scale = adapters.scale();
        let n = adapters.n_loras;
        if g.value(weights).numel() != n {
            return Err(Error::Config(format!(
                "{} gate weights for a bank of {n}",
                g.value(weights).numel()
            )));
        }
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for banks in &self.layout.sets[set] {
            let mut slots = Vec::with_capacity(6);
            for bank in banks.iter() {
                let prods = bank
                    .iter()
                    .map(|&(a, b)| g.matmul(bound.var(a), bound.var(b)))
                    .collect::<Result<Vec<_>>>()?;
                slots.push(g.weighted_sum(&prods, weights, scale)?);
            }
            layers.push(slots.try_into().expect("six projections"));
        }
        Ok(AspectDeltas { omega, layers })
    }

    fn linear(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ids: LinearIds,
        x: Var,
        delta: Option<Var>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let y = g.matmul(x, bound.var(ids.w))?;
        let y = g.add_row(y, bound.var(ids.b))?;
        let Some(delta) = delta else { return Ok(y) };
        let input = match dropout {
            Some(d) if d.rate > 0.0 => {
                let mask = d.mask(g.value(x).numel());
                g.mul_const(x, mask)?
            }
            _ => x,
        };
        let extra = g.matmul(input, delta)?;
        g.add(y, extra)
    }

    fn attention(
        &self,
        g: &mut Graph,
        bound: &Bound,
        layer: usize,
        x: Var,
        deltas: Option<&[Var; 6]>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let ids = &self.layout.layers[layer];
        let delta = |p: Projection| deltas.map(|d| d[p.slot()]);
        let q = self.linear(g, bound, ids.proj[0], x, delta(Projection::Q), dropout)?;
        let k = self.linear(g, bound, ids.proj[1], x, delta(Projection::K), dropout)?;
        let v = self.linear(g, bound, ids.proj[2], x, delta(Projection::V), dropout)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let probs = g.softmax(scores, scale, true)?;
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.linear(g, bound, ids.proj[3], cat, delta(Projection::O), dropout)
    }

    /// `X' = X + LN(Attn(X))`.
    fn attention_block(
        &self,
        g: &mut Graph,
        bound: &Bound,
        layer: usize,
        x: Var,
        deltas: Option<&[Var; 6]>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let (gain, bias) = self.layout.layers[layer].ln_attn;
        let a = self.attention(g, bound, layer, x, deltas, dropout)?;
        let normed = g.layer_norm(a, bound.var(gain), bound.var(bias), LN_EPS)?;
        g.add(x, normed)
    }

    /// `H = X' + LN(O)` with `O` the adapted feed-forward output.
    fn ffn_block(
        &self,
        g: &mut Graph,
        bound: &Bound,
        layer: usize,
        x: Var,
        deltas: Option<&[Var; 6]>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let ids = &self.layout.layers[layer];
        let delta = |p: Projection| deltas.map(|d| d[p.slot()]);
        let hidden = self.linear(g, bound, ids.proj[4], x, delta(Projection::FfnIn), dropout)?;
        let hidden = g.gelu(hidden);
        let o = self.linear(g, bound, ids.proj[5], hidden, delta(Projection::FfnOut), dropout)?;
        let (gain, bias) = ids.ln_ffn;
        let normed = g.layer_norm(o, bound.var(gain), bound.var(bias), LN_EPS)?;
        g.add(x, normed)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Domain("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Domain(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Record a full forward pass into `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        tokens: &[usize],
        deltas: Option<&AspectDeltas>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        let emb = g.gather_rows(bound.var(self.layout.tok_emb), tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(bound.var(self.layout.pos_emb), &positions)?;
        let mut x = g.add(emb, pos)?;
        for layer in 0..self.config.n_layers {
            let d = deltas.map(|d| &d.layers[layer]);
            x = self.attention_block(g, bound, layer, x, d, &mut dropout)?;
            x = self.ffn_block(g, bound, layer, x, d, &mut dropout)?;
        }
        let logits = g.matmul(x, bound.var(self.layout.head_w))?;
        let logits = g.add_row(logits, bound.var(self.layout.head_b))?;
        Ok(ForwardOutput { logits, hidden: x })
    }

    /// Evaluation-mode forward: `(logits, last-block hidden states)`.
    pub fn forward(&self, tokens: &[usize], aspect: AspectId) -> Result<(Tensor, Tensor)> {
        self.check_aspect(aspect)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let deltas = self.aspect_deltas(&mut g, &bound, aspect)?;
        let out = self.forward_graph(&mut g, &bound, tokens, deltas.as_ref(), None)?;
        Ok((g.value(out.logits).clone(), g.value(out.hidden).clone()))
    }

    /// Forward with caller-supplied gate weights in place of the gate output.
    pub fn forward_with_weights(&self, tokens: &[usize], weights: &GateWeights) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let deltas = self.fixed_deltas(&mut g, &bound, weights)?;
        let out = self.forward_graph(&mut g, &bound, tokens, deltas.as_ref(), None)?;
        Ok((g.value(out.logits).clone(), g.value(out.hidden).clone()))
    }

    fn fixed_deltas(&self, g: &mut Graph, bound: &Bound, weights: &GateWeights) -> Result<Option<AspectDeltas>> {
        if self.adapters.is_none() {
            return Ok(None);
        }
        let w = g.constant(Tensor::vector(weights.0.clone()));
        self.deltas_with(g, bound, 0, w, None).map(Some)
    }

    /// `X + LN(Attn(X))` for one block, evaluated with the adapters routed
    /// for `aspect` (or the bare base when `aspect` is `None`).
    pub fn attention_sublayer(&self, x: &Tensor, layer: usize, aspect: Option<AspectId>) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_rows(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let deltas = match aspect {
            Some(a) => self.aspect_deltas(&mut g, &bound, a)?,
            None => None,
        };
        let xv = g.constant(x.clone());
        let out = self.attention_block(&mut g, &bound, layer, xv, deltas.as_ref().map(|d| &d.layers[layer]), &mut None)?;
        Ok(g.value(out).clone())
    }

    /// `X' + LN(FFN(X') + adapter deltas)` for one block under explicit gate
    /// weights.
    pub fn ffn_sublayer(&self, x: &Tensor, layer: usize, weights: &GateWeights) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_rows(x)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let deltas = self.fixed_deltas(&mut g, &bound, weights)?;
        let xv = g.constant(x.clone());
        let out = self.ffn_block(&mut g, &bound, layer, xv, deltas.as_ref().map(|d| &d.layers[layer]), &mut None)?;
        Ok(g.value(out).clone())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::Config(format!("layer {layer} of {}", self.config.n_layers)));
        }
        Ok(())
    }

    fn check_rows(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.config.d_model {
            return Err(Error::dim("sublayer", x.shape(), &[x.rows(), self.config.d_model]));
        }
        if x.rows() > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence of {} positions exceeds max_seq_len {}",
                x.rows(),
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// `W + (α/r)·Σ ω_i A_i B_i` for one projection under `aspect`.
    pub fn effective_weight(&self, layer: usize, projection: Projection, aspect: AspectId) -> Result<Tensor> {
        let (w, _) = self.base_linear_ids(layer, projection);
        let base = self.params.get(w);
        let Some(adapters) = &self.adapters else {
            return Ok(base.clone());
        };
        AspectId::checked(aspect.0, adapters.n_aspects)?;
        let (set, omega) = if adapters.per_aspect {
            (aspect.0, GateWeights(vec![1.0]))
        } else {
            (0, self.gate_weights(aspect)?.expect("gated"))
        };
        let bank = self.bank(set, layer, projection).expect("bank exists");
        let delta = bank.merged(&omega)?;
        base.add(&delta)
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        match &self.adapters {
            None => vec![ParamGroup::Base],
            Some(_) => vec![ParamGroup::Lora, ParamGroup::Gate],
        }
    }

    /// Autoregressive nucleus sampling from `prompt`; returns only the new
    /// tokens (the stop token is not included).
    pub fn generate(&self, prompt: &[usize], aspect: AspectId, sampling: &SamplingConfig, seed: u64) -> Result<Vec<usize>> {
        sampling.validate()?;
        if prompt.is_empty() {
            return Err(Error::Domain("empty prompt".into()));
        }
        let engine = InferenceModel::new(self, aspect)?;
        engine.generate(prompt, sampling, seed)
    }

    pub(crate) fn layout_ids(&self) -> LayoutView<'_> {
        LayoutView(&self.layout)
    }
}

/// Read-only view of parameter ids for the inference path.
pub(crate) struct LayoutView<'a>(&'a Layout);

impl LayoutView<'_> {
    pub fn tok_emb(&self) -> ParamId {
        self.0.tok_emb
    }
    pub fn pos_emb(&self) -> ParamId {
        self.0.pos_emb
    }
    pub fn head(&self) -> (ParamId, ParamId) {
        (self.0.head_w, self.0.head_b)
    }
    pub fn bias(&self, layer: usize, p: Projection) -> ParamId {
        self.0.layers[layer].proj[p.slot()].b
    }
    pub fn ln_attn(&self, layer: usize) -> (ParamId, ParamId) {
        self.0.layers[layer].ln_attn
    }
    pub fn ln_ffn(&self, layer: usize) -> (ParamId, ParamId) {
        self.0.layers[layer].ln_ffn
    }
}

/// Random initialization helper shared with tests: fill every LoRA `B` with
/// N(0, std²) so adapters are non-degenerate.
pub fn randomize_lora_b<R: Rng + ?Sized>(model: &mut Model, std: f64, rng: &mut R) {
    for p in model.params.iter_mut() {
        if p.group == ParamGroup::Lora && p.name.rsplit('.').next().is_some_and(|s| s.starts_with('b')) {
            let shape = p.tensor.shape().to_vec();
            p.tensor = Tensor::randn(&shape, std, rng);
        }
    }
}
