//! Optimization loops: base pretraining, adapter training in the four
//! trainer modes, and sequential fine-tuning.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{mix_seed, TrainingSample, N_ASPECTS};
use crate::error::{Error, Result};
use crate::gating::{AspectId, RoutingStrategy, DEFAULT_GATE_DIM};
use crate::losses::{self, AttributeId, LossConfig, Pooled};
use crate::model::{AdapterConfig, AspectDeltas, Bound, Dropout, Model, ModelConfig, ParamGroup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Shared gated bank of `n_loras` pairs; trains LoRA and gate.
    Gated,
    /// One pair per projection (the gated layout with n = 1).
    SingleLora,
    /// Every parameter, next-token loss only.
    FullFt,
    /// One ungated single-pair set per aspect, each trained on its own
    /// aspect's samples only.
    IndependentPerAspect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub n_loras: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub routing: RoutingStrategy,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub gate_dim: usize,
    pub n_aspects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Gated,
            n_loras: 8,
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            lr: 2e-4,
            epochs: 9,
            batch_size: 64,
            loss: LossConfig::default(),
            routing: RoutingStrategy::AllModules,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            gate_dim: DEFAULT_GATE_DIM,
            n_aspects: N_ASPECTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0 and grad_clip > 0".into()));
        }
        self.loss.validate()
    }

    /// Adapter layout implied by the mode; `None` for full fine-tuning.
    pub fn adapter_config(&self) -> Option<AdapterConfig> {
        let base = AdapterConfig {
            n_loras: self.n_loras,
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            n_aspects: self.n_aspects,
            gate_dim: self.gate_dim,
            routing: self.routing,
            per_aspect: false,
        };
        match self.mode {
            TrainMode::Gated => Some(base),
            TrainMode::SingleLora => Some(AdapterConfig {
                n_loras: 1,
                routing: RoutingStrategy::AllModules,
                ..base
            }),
            TrainMode::IndependentPerAspect => Some(AdapterConfig {
                n_loras: 1,
                routing: RoutingStrategy::AllModules,
                per_aspect: true,
                ..base
            }),
            TrainMode::FullFt => None,
        }
    }

    /// Full fine-tuning always optimizes the next-token loss alone.
    pub fn effective_loss(&self) -> LossConfig {
        match self.mode {
            TrainMode::FullFt => LossConfig {
                gamma: self.loss.gamma,
                ..LossConfig::lp_only()
            },
            _ => self.loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Extra texts containing banned tokens mixed into the pretraining set.
    pub toxic_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig {
                vocab_size: 0,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ff: 64,
                max_seq_len: 48,
            },
            lr: 3e-3,
            epochs: 4,
            batch_size: 32,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            toxic_samples: 600,
        }
    }
}

/// Loss components of one batch or one epoch mean. Auxiliary terms are
/// `None` when their weight is zero and they were not computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub lp: f64,
    pub lada: Option<f64>,
    pub lawa: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub lp: f64,
    pub lada: Option<f64>,
    pub lawa: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Option<TrainMode>,
    /// Losses of the first batch before any update.
    pub initial: Option<LossParts>,
    pub epochs: Vec<EpochLosses>,
    pub trainable_params: usize,
    pub total_params: usize,
    /// Percent of all parameters, two decimals.
    pub trainable_percent: f64,
    pub wall_time_secs: f64,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    fn new(mode: Option<TrainMode>, model: &Model, mask: &[bool]) -> Self {
        let trainable: usize = model
            .params
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p.tensor.numel())
            .sum();
        let total = model.params.total();
        TrainReport {
            mode,
            initial: None,
            epochs: Vec::new(),
            trainable_params: trainable,
            total_params: total,
            trainable_percent: round2(100.0 * trainable as f64 / total as f64),
            wall_time_secs: 0.0,
            checkpoint: None,
        }
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Advance the step counter; call once before updating the tensors of a
    /// step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update slot `k` in place.
    pub fn update(&mut self, k: usize, param: &mut [f64], grad: &[f64]) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * param[i]);
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Epoch order in which every `(aspect, attribute)` bucket is spread evenly
/// through the epoch, so each batch mixes aspects and attributes in
/// proportion to their frequency.
pub fn stratified_order(samples: &[TrainingSample], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: BTreeMap<(AspectId, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        buckets.entry((s.aspect, s.attribute)).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
    for members in buckets.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + rng.random::<f64>()) / n, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Record the loss of one batch into `g`.
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    bound: &Bound,
    batch: &[&TrainingSample],
    loss: &LossConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Var, LossParts)> {
    let mut deltas: BTreeMap<AspectId, Option<AspectDeltas>> = BTreeMap::new();
    let need_pool = loss.w2 > 0.0 || loss.w3 > 0.0;
    let mut items = Vec::with_capacity(batch.len());
    let mut pooled = Vec::new();
    for s in batch {
        if let std::collections::btree_map::Entry::Vacant(e) = deltas.entry(s.aspect) {
            e.insert(model.aspect_deltas(g, bound, s.aspect)?);
        }
        let seq = s.sequence();
        let out = model.forward_graph(g, bound, &seq, deltas[&s.aspect].as_ref(), dropout.as_deref_mut())?;
        let positions: Vec<usize> = s.target_positions().collect();
        items.push((out.logits, positions.iter().map(|&p| (p, seq[p + 1])).collect::<Vec<_>>()));
        if need_pool {
            pooled.push(Pooled {
                var: losses::pool_hidden(g, out.hidden, &positions)?,
                label: AttributeId {
                    aspect: s.aspect,
                    index: s.attribute,
                },
            });
        }
    }
    let lp = losses::batch_next_token_loss(g, &items)?;
    let lada = if loss.w2 > 0.0 {
        Some(losses::aspect_adaptive_loss(g, &pooled)?)
    } else {
        None
    };
    let lawa = if loss.w3 > 0.0 {
        Some(losses::attribute_aware_loss(g, &pooled, loss.gamma)?)
    } else {
        None
    };
    let total = losses::total_loss(g, lp, lada, lawa, loss)?;
    let parts = LossParts {
        lp: g.scalar(lp),
        lada: lada.map(|v| g.scalar(v)),
        lawa: lawa.map(|v| g.scalar(v)),
        total: g.scalar(total),
    };
    Ok((total, parts))
}

/// Settings shared by every optimization loop.
#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl LoopConfig {
    fn from_train(cfg: &TrainConfig) -> Self {
        LoopConfig {
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            dropout: cfg.dropout,
            loss: cfg.effective_loss(),
            seed: cfg.seed,
        }
    }
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::Divergence { epoch, reason },
        other => other,
    }
}

/// One optimizer step on `batch`; returns the batch losses before the step.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    trainable: &[bool],
    batch: &[&TrainingSample],
    cfg: &LoopConfig,
    dropout_seed: u64,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let bound = model.bind_mask(&mut g, trainable)?;
    let mut dropout = (model.adapters.is_some() && cfg.dropout > 0.0).then(|| Dropout::new(cfg.dropout, dropout_seed));
    let (root, parts) = batch_loss(model, &mut g, &bound, batch, &cfg.loss, dropout.as_mut())?;
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!("loss {}", parts.total)));
    }
    g.backward(root)?;
    let ids: Vec<_> = model.params.ids().filter(|id| trainable[id.index()]).collect();
    let grads: Vec<Option<Vec<f64>>> = ids.iter().map(|&id| g.grad(bound.var(id)).map(<[f64]>::to_vec)).collect();
    drop(g);
    let (mut slots, mut present): (Vec<usize>, Vec<Vec<f64>>) =
        grads.into_iter().enumerate().filter_map(|(k, gr)| gr.map(|gr| (k, gr))).unzip();
    if present.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    clip_grad_norm(&mut present, cfg.grad_clip);
    opt.begin_step();
    for (k, grad) in slots.drain(..).zip(&present) {
        opt.update(k, model.params.get_mut(ids[k]).data_mut(), grad);
    }
    Ok(parts)
}

fn trainable_sizes(model: &Model, trainable: &[bool]) -> Vec<usize> {
    model
        .params
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .map(|(p, _)| p.tensor.numel())
        .collect()
}

/// Optimize the masked parameters of `model` on `samples`.
pub fn run_training(model: &mut Model, samples: &[TrainingSample], trainable: &[bool], cfg: &LoopConfig) -> Result<(Option<LossParts>, Vec<EpochLosses>)> {
    if samples.is_empty() {
        return Err(Error::Domain("no training samples".into()));
    }
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, &trainable_sizes(model, trainable));
    let mut initial = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = stratified_order(samples, mix_seed(&[cfg.seed, 0x5eed, epoch as u64]));
        let (mut lp, mut lada, mut lawa, mut total, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let (mut has_ada, mut has_awa) = (false, false);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let seed = mix_seed(&[cfg.seed, 0xd409, epoch as u64, step as u64]);
            let parts = train_step(model, &mut opt, trainable, &batch, cfg, seed).map_err(|e| divergence(epoch, e))?;
            if initial.is_none() {
                initial = Some(parts);
            }
            lp += parts.lp;
            total += parts.total;
            if let Some(v) = parts.lada {
                lada += v;
                has_ada = true;
            }
            if let Some(v) = parts.lawa {
                lawa += v;
                has_awa = true;
            }
            n += 1;
        }
        let k = n as f64;
        let e = EpochLosses {
            epoch,
            lp: lp / k,
            lada: has_ada.then_some(lada / k),
            lawa: has_awa.then_some(lawa / k),
            total: total / k,
        };
        log::info!("epoch {epoch}: total {:.4} lp {:.4}", e.total, e.lp);
        epochs.push(e);
    }
    Ok((initial, epochs))
}

/// Train a fresh base model on attribute-agnostic texts with the next-token
/// loss.
pub fn pretrain_base(samples: &[TrainingSample], cfg: &PretrainConfig) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let mut model = Model::new_base(cfg.model.clone(), mix_seed(&[cfg.seed, 0xba5e]))?;
    let mask = vec![true; model.params.len()];
    let mut report = TrainReport::new(None, &model, &mask);
    let lc = LoopConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
        dropout: 0.0,
        loss: LossConfig::lp_only(),
        seed: cfg.seed,
    };
    let (initial, epochs) = run_training(&mut model, samples, &mask, &lc)?;
    report.initial = initial;
    report.epochs = epochs;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

fn base_checksums(model: &Model) -> Vec<(String, u64)> {
    model.params.checksums(ParamGroup::Base)
}

fn audit_frozen(before: &[(String, u64)], model: &Model) -> Result<()> {
    let after = base_checksums(model);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if a != b {
            return Err(Error::Integrity(format!("frozen base parameter {name} changed during adapter training")));
        }
    }
    if before.len() != after.len() {
        return Err(Error::Integrity("base parameter set changed during adapter training".into()));
    }
    Ok(())
}

fn mode_mask(model: &Model, mode: TrainMode) -> Vec<bool> {
    model
        .params
        .iter()
        .map(|p| match mode {
            TrainMode::FullFt => p.group == ParamGroup::Base,
            _ => p.group != ParamGroup::Base,
        })
        .collect()
}

fn set_mask(model: &Model, set: usize) -> Vec<bool> {
    let prefix = format!("lora.s{set}.");
    model.params.iter().map(|p| p.name.starts_with(&prefix)).collect()
}

/// Continue training `model` in place under `cfg.mode`'s trainable set,
/// verifying afterwards that frozen base tensors are untouched.
pub fn train_in_place(model: &mut Model, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let frozen = cfg.mode != TrainMode::FullFt;
    if frozen && model.adapters.is_none() {
        return Err(Error::Config("adapter training needs a model with adapters".into()));
    }
    let before = base_checksums(model);
    let lc = LoopConfig::from_train(cfg);
    let mask = mode_mask(model, cfg.mode);
    let mut report = TrainReport::new(Some(cfg.mode), model, &mask);
    if cfg.mode == TrainMode::IndependentPerAspect {
        let n_sets = model.adapters.as_ref().map_or(0, |a| a.n_aspects);
        let mut per_set: Vec<Vec<EpochLosses>> = Vec::new();
        for set in 0..n_sets {
            let subset: Vec<TrainingSample> = samples.iter().filter(|s| s.aspect.0 == set).cloned().collect();
            if subset.is_empty() {
                continue;
            }
            let lc = LoopConfig {
                seed: mix_seed(&[cfg.seed, set as u64]),
                ..lc.clone()
            };
            let (initial, epochs) = run_training(model, &subset, &set_mask(model, set), &lc)?;
            report.initial = report.initial.or(initial);
            per_set.push(epochs);
        }
        report.epochs = merge_epochs(&per_set);
    } else {
        let (initial, epochs) = run_training(model, samples, &mask, &lc)?;
        report.initial = initial;
        report.epochs = epochs;
    }
    if frozen {
        audit_frozen(&before, model)?;
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean of per-set epoch losses, epoch by epoch.
fn merge_epochs(per_set: &[Vec<EpochLosses>]) -> Vec<EpochLosses> {
    let n_epochs = per_set.iter().map(Vec::len).max().unwrap_or(0);
    (0..n_epochs)
        .map(|epoch| {
            let rows: Vec<&EpochLosses> = per_set.iter().filter_map(|s| s.get(epoch)).collect();
            let k = rows.len() as f64;
            let opt_mean = |f: fn(&EpochLosses) -> Option<f64>| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            EpochLosses {
                epoch,
                lp: rows.iter().map(|r| r.lp).sum::<f64>() / k,
                lada: opt_mean(|r| r.lada),
                lawa: opt_mean(|r| r.lawa),
                total: rows.iter().map(|r| r.total).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Attach fresh adapters for `cfg.mode` to `base` (or copy it for full
/// fine-tuning) and train.
pub fn train_adapters(base: &Model, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if base.adapters.is_some() {
        return Err(Error::Config("expected a bare base model".into()));
    }
    let mut model = match cfg.adapter_config() {
        Some(a) => base.with_adapters(a, mix_seed(&[cfg.seed, 0xada9]))?,
        None => base.clone(),
    };
    let report = train_in_place(&mut model, samples, cfg)?;
    Ok((model, report))
}

/// Fine-tune on each aspect of `sequence` in turn. Returns the starting
/// model followed by one model per stage.
pub fn sequential_finetune(
    start: &Model,
    samples: &[TrainingSample],
    sequence: &[AspectId],
    cfg: &TrainConfig,
) -> Result<Vec<(Model, TrainReport)>> {
    let mut stages = vec![(start.clone(), TrainReport::new(Some(cfg.mode), start, &mode_mask(start, cfg.mode)))];
    for (k, &aspect) in sequence.iter().enumerate() {
        let subset: Vec<TrainingSample> = samples.iter().filter(|s| s.aspect == aspect).cloned().collect();
        if subset.is_empty() {
            return Err(Error::Domain(format!("no training samples for aspect {aspect}")));
        }
        let mut model = stages.last().expect("nonempty").0.clone();
        let stage_cfg = TrainConfig {
            seed: mix_seed(&[cfg.seed, 0x57a9e, k as u64]),
            ..cfg.clone()
        };
        let report = train_in_place(&mut model, &subset, &stage_cfg)?;
        stages.push((model, report));
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn adamw_descends_quadratic_bowl() {
        // f(x) = ½‖x − c‖², gradient x − c
        let c = [1.0, -2.0, 0.5];
        let mut x = vec![0.0; 3];
        let mut opt = AdamW::new(0.05, 0.0, &[3]);
        let f = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>();
        let mut prev = f(&x);
        for _ in 0..20 {
            let g: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            opt.begin_step();
            opt.update(0, &mut x, &g);
            let now = f(&x);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut x = vec![3.0];
        let mut opt = AdamW::new(0.1, 0.0, &[1]);
        opt.begin_step();
        opt.update(0, &mut x, &[42.0]);
        assert!((x[0] - 2.9).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn stratified_batches_mix_aspects() {
        let c = generate_corpus(&CorpusConfig {
            train_per_aspect: vec![40; N_ASPECTS],
            ..Default::default()
        })
        .unwrap();
        let order = stratified_order(&c.train, 3);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..c.train.len()).collect::<Vec<_>>());
        for chunk in order.chunks(32) {
            let aspects: std::collections::BTreeSet<_> = chunk.iter().map(|&i| c.train[i].aspect).collect();
            assert!(aspects.len() >= 2);
        }
        assert_eq!(order, stratified_order(&c.train, 3));
        assert_ne!(order, stratified_order(&c.train, 4));
    }

    #[test]
    fn mode_layouts_and_counts() {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 40,
        };
        let base = Model::new_base(cfg, 0).unwrap();
        let gated = TrainConfig {
            n_loras: 1,
            rank: 4,
            alpha: 8.0,
            gate_dim: 8,
            ..Default::default()
        };
        let single = TrainConfig {
            mode: TrainMode::SingleLora,
            n_loras: 7,
            ..gated.clone()
        };
        let a = base.with_adapters(gated.adapter_config().unwrap(), 0).unwrap();
        let b = base.with_adapters(single.adapter_config().unwrap(), 0).unwrap();
        assert_eq!(a.params.count(&a.trainable_groups()), b.params.count(&b.trainable_groups()));
        assert!(TrainConfig {
            mode: TrainMode::FullFt,
            ..Default::default()
        }
        .adapter_config()
        .is_none());
        assert_eq!(
            TrainConfig {
                mode: TrainMode::FullFt,
                ..Default::default()
            }
            .effective_loss(),
            LossConfig::lp_only()
        );
    }

    #[test]
    fn frozen_mutation_is_integrity_error() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 8,
            n_layers: 1,
            n_heads: 1,
            d_ff: 8,
            max_seq_len: 4,
        };
        let mut m = Model::new_base(cfg, 0).unwrap();
        let before = base_checksums(&m);
        let id = m.params.find("base.head.b").unwrap();
        *m.params.get_mut(id) = Tensor::filled(&[5], 1e-300);
        assert!(matches!(audit_frozen(&before, &m), Err(Error::Integrity(_))));
    }
}
