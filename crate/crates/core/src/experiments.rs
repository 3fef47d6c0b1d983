//! Scripted comparisons at toy scale: main table, data discrepancy, routing,
//! loss ablation, rank/count sweep, independent adapters and forgetting.
//!
//! Every run is a pure function of `(spec, seed)`. Intermediate models can
//! be cached on disk keyed by a hash of everything that determines them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, fnv1a64};
use crate::corpus::{
    self, generate_corpus, mix_seed, pretraining_samples, Corpus, CorpusConfig, Truncation, KEYWORD, MULTI, N_ASPECTS,
    SENTIMENT,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_model, render_table, ScoreTable, TABLE_COLUMNS};
use crate::gating::{export_gate_table, AspectId, RoutingStrategy};
use crate::losses::LossConfig;
use crate::model::{AdapterConfig, Model, ModelConfig, ParamGroup, Projection, SamplingConfig};
use crate::trainer::{
    pretrain_base, round2, sequential_finetune, train_adapters, EpochLosses, LossParts, PretrainConfig, TrainConfig,
    TrainMode, TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    MainTable,
    DataDiscrepancy,
    Routing,
    LossAblation,
    RankSweep,
    IndependentBaseline,
    Forgetting,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::MainTable,
        ExperimentName::DataDiscrepancy,
        ExperimentName::Routing,
        ExperimentName::LossAblation,
        ExperimentName::RankSweep,
        ExperimentName::IndependentBaseline,
        ExperimentName::Forgetting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::MainTable => "main-table",
            ExperimentName::DataDiscrepancy => "data-discrepancy",
            ExperimentName::Routing => "routing",
            ExperimentName::LossAblation => "loss-ablation",
            ExperimentName::RankSweep => "rank-sweep",
            ExperimentName::IndependentBaseline => "independent-baseline",
            ExperimentName::Forgetting => "forgetting",
        }
    }

    pub fn parse(s: &str) -> Result<ExperimentName> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

impl std::fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Data, base model and decoding settings shared by every run of an
/// experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scale {
    pub train_per_aspect: usize,
    pub test_fraction: f64,
    /// Per-aspect count of the three truncated aspects in the discrepancy run.
    pub truncate_count: usize,
    /// `vocab_size` is filled in from the corpus.
    pub pretrain: PretrainConfig,
    pub sampling: SamplingConfig,
    /// Model shape the rank sweep counts parameters on. It must be wide
    /// enough for the largest swept rank.
    pub sweep_model: ModelConfig,
}

impl Default for Scale {
    fn default() -> Self {
        Scale::toy()
    }
}

impl Scale {
    /// About 1000 training samples per aspect on a 2-layer, d = 32 model.
    pub fn toy() -> Scale {
        Scale {
            train_per_aspect: 1000,
            test_fraction: 0.1,
            truncate_count: 250,
            pretrain: PretrainConfig::default(),
            sampling: SamplingConfig::default(),
            sweep_model: ModelConfig {
                vocab_size: 0,
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                d_ff: 128,
                max_seq_len: 48,
            },
        }
    }

    /// Seconds-scale settings for plumbing tests.
    pub fn smoke() -> Scale {
        let mut s = Scale::toy();
        s.train_per_aspect = 40;
        s.test_fraction = 0.25;
        s.truncate_count = 10;
        s.pretrain.epochs = 1;
        s.pretrain.toxic_samples = 20;
        s.pretrain.model.d_model = 16;
        s.pretrain.model.d_ff = 32;
        s.pretrain.model.n_layers = 1;
        s.sampling.max_new_tokens = 12;
        s
    }

    pub fn corpus_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            train_per_aspect: vec![self.train_per_aspect; N_ASPECTS],
            test_fraction: self.test_fraction,
            truncate: None,
            spec: Default::default(),
        }
    }
}

/// Adapter training settings used by the experiments unless overridden:
/// a smaller bank and rank and a larger learning rate than the library
/// defaults, sized for the toy model and a few-minute CPU budget.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        n_loras: 4,
        rank: 4,
        alpha: 8.0,
        lr: 3e-3,
        epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

fn merge_json(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{path}{k}");
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Error::Config(format!("unknown override field {here:?}")))?;
                if slot.is_object() && v.is_object() {
                    merge_json(slot, v, &format!("{here}."))?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (_, Value::Null) => Ok(()),
        _ => Err(Error::Config("overrides must be a JSON object".into())),
    }
}

/// Apply a partial `TrainConfig` given as JSON on top of `base`. Unknown
/// fields are rejected.
pub fn apply_overrides(base: &TrainConfig, overrides: &Value) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base)?;
    merge_json(&mut v, overrides, "")?;
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("bad override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    #[serde(default)]
    pub overrides: Value,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scale: Scale,
    /// Aspects injected after multi in the forgetting run; defaults to the
    /// first three non-multi aspects in id order.
    #[serde(default)]
    pub injection_order: Option<Vec<AspectId>>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName) -> ExperimentSpec {
        ExperimentSpec {
            name,
            overrides: Value::Null,
            seeds: default_seeds(),
            scale: Scale::toy(),
            injection_order: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        self.train_config(0)?;
        if let Some(order) = &self.injection_order {
            if order.is_empty() || order.iter().any(|a| a.0 >= N_ASPECTS || *a == MULTI) {
                return Err(Error::Config("injection order must list non-multi aspect ids".into()));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = apply_overrides(&toy_train_config(), &self.overrides)?;
        cfg.seed = seed;
        Ok(cfg)
    }

    pub fn injection_order(&self) -> Vec<AspectId> {
        self.injection_order
            .clone()
            .unwrap_or_else(|| (0..N_ASPECTS).map(AspectId).filter(|&a| a != MULTI).take(3).collect())
    }
}

/// One trained (or untrained) model's scores and training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub mode: Option<TrainMode>,
    pub scores: ScoreTable,
    pub initial: Option<LossParts>,
    pub epochs: Vec<EpochLosses>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_percent: f64,
}

/// Multi-aspect accuracy after each sequential fine-tuning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub label: String,
    pub stages: Vec<String>,
    pub multi_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_loras: usize,
    pub rank: usize,
    /// Counted from the instantiated model.
    pub trainable_params: usize,
    /// From [`closed_form_trainable`].
    pub closed_form_params: usize,
    pub total_params: usize,
    /// Percent, two decimals, stored as hundredths to keep equality exact.
    pub trainable_centipercent: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub runs: Vec<RunRecord>,
    pub trajectories: Vec<Trajectory>,
    pub sweep: Vec<SweepCell>,
    /// Gate weights per aspect of the main gated model.
    pub gate_table: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Option<SeedResult>,
    pub error: Option<String>,
}

/// Mean and min–max of each table column across successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub seeds: Vec<SeedOutcome>,
    pub rows: Vec<AggregateRow>,
    pub trajectories: Vec<AggregateRow>,
    /// File names written by [`emit_report`], relative to its directory.
    pub artifacts: Vec<String>,
}

impl ExperimentResult {
    pub fn successful(&self) -> impl Iterator<Item = (u64, &SeedResult)> {
        self.seeds.iter().filter_map(|s| s.result.as_ref().map(|r| (s.seed, r)))
    }

    pub fn row(&self, label: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn trajectory(&self, label: &str) -> Option<&AggregateRow> {
        self.trajectories.iter().find(|r| r.label == label)
    }
}

pub const LABEL_BASE: &str = "Base";
pub const LABEL_LORA: &str = "LoRA";
pub const LABEL_FFT: &str = "FFT";
pub const LABEL_OURS: &str = "Ours";
pub const LABEL_TOP2: &str = "Ours (TopK 2)";
pub const LABEL_INDEPENDENT: &str = "Independent";
pub const LABEL_NO_BOTH: &str = "w/o L_ada and L_awa";
pub const LABEL_NO_AWA: &str = "w/o L_awa";
pub const LABEL_NO_ADA: &str = "w/o L_ada";

/// Trainable scalars of a gated bank: `n` pairs of `d_in×r` and `r×d_out`
/// per adapted projection per layer, plus the gate's embedding, linear head
/// and bias.
pub fn closed_form_trainable(model: &ModelConfig, n: usize, r: usize, n_aspects: usize, gate_dim: usize) -> usize {
    let per_layer: usize = Projection::ALL
        .iter()
        .map(|p| {
            let (din, dout) = p.dims(model);
            n * r * (din + dout)
        })
        .sum();
    model.n_layers * per_layer + n_aspects * gate_dim + gate_dim * n + n
}

/// Rows of the rank/count sweep: `n ∈ {4, 8, 16}` at `r = 16`, then
/// `r ∈ {8, 16, 32}` at `n = 8`. The `(8, 16)` cell appears in both halves.
pub fn sweep_grid() -> Vec<(usize, usize)> {
    vec![(4, 16), (8, 16), (16, 16), (8, 8), (8, 16), (8, 32)]
}

fn hash_key<T: Serialize>(key: &T) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(&serde_json::to_vec(key)?)))
}

/// On-disk memo of trained models. `None` disables caching.
struct Cache<'a> {
    dir: Option<&'a Path>,
}

impl Cache<'_> {
    fn model(&self, key: &str, build: impl FnOnce() -> Result<(Model, TrainReport)>) -> Result<(Model, TrainReport)> {
        let Some(dir) = self.dir else {
            return build();
        };
        let ckpt = dir.join(format!("{key}.ckpt"));
        let report_path = dir.join(format!("{key}.report.json"));
        if ckpt.exists() && report_path.exists() {
            let (model, _) = checkpoint::load(&ckpt)?;
            let bytes = std::fs::read(&report_path).map_err(|e| Error::io(&report_path, e))?;
            return Ok((model, serde_json::from_slice(&bytes)?));
        }
        let (model, report) = build()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = BTreeMap::new();
        meta.insert("cache_key".to_string(), key.to_string());
        checkpoint::save(&model, &ckpt, &meta)?;
        let bytes = serde_json::to_vec_pretty(&report)?;
        std::fs::write(&report_path, bytes).map_err(|e| Error::io(&report_path, e))?;
        Ok((model, report))
    }
}

/// Corpus, base model and helpers for one seed.
struct SeedContext<'a> {
    spec: &'a ExperimentSpec,
    cache: Cache<'a>,
    seed: u64,
    corpus: Corpus,
    base: Model,
    base_key: String,
}

impl<'a> SeedContext<'a> {
    fn new(spec: &'a ExperimentSpec, cache_dir: Option<&'a Path>, seed: u64) -> Result<Self> {
        let cache = Cache { dir: cache_dir };
        let corpus_cfg = spec.scale.corpus_config(seed);
        let corpus = generate_corpus(&corpus_cfg)?;
        let mut pc = spec.scale.pretrain.clone();
        pc.model.vocab_size = corpus.vocab.len();
        pc.seed = seed;
        let base_key = format!("base-{}", hash_key(&(&corpus_cfg, &pc))?);
        let (base, _) = cache.model(&base_key, || {
            let samples = pretraining_samples(&corpus, pc.toxic_samples, seed);
            pretrain_base(&samples, &pc)
        })?;
        Ok(SeedContext {
            spec,
            cache,
            seed,
            corpus,
            base,
            base_key,
        })
    }

    fn eval_seed(&self) -> u64 {
        mix_seed(&[self.seed, 0xe7a1])
    }

    fn evaluate(&self, model: &Model) -> Result<ScoreTable> {
        Ok(evaluate_model(model, &self.corpus.vocab, &self.corpus.test, &self.spec.scale.sampling, self.eval_seed())?.0)
    }

    fn base_record(&self) -> Result<RunRecord> {
        let total = self.base.params.total();
        Ok(RunRecord {
            label: LABEL_BASE.into(),
            mode: None,
            scores: self.evaluate(&self.base)?,
            initial: None,
            epochs: Vec::new(),
            trainable_params: 0,
            total_params: total,
            trainable_percent: 0.0,
        })
    }

    fn train(&self, train: &[corpus::TrainingSample], data_tag: &str, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
        let key = format!("run-{}", hash_key(&(&self.base_key, data_tag, cfg))?);
        log::info!("seed {}: training {:?} on {data_tag}", self.seed, cfg.mode);
        self.cache.model(&key, || train_adapters(&self.base, train, cfg))
    }

    fn record(&self, label: &str, model: &Model, report: &TrainReport) -> Result<RunRecord> {
        Ok(RunRecord {
            label: label.into(),
            mode: report.mode,
            scores: self.evaluate(model)?,
            initial: report.initial,
            epochs: report.epochs.clone(),
            trainable_params: report.trainable_params,
            total_params: report.total_params,
            trainable_percent: report.trainable_percent,
        })
    }

    fn run(&self, label: &str, cfg: &TrainConfig) -> Result<(RunRecord, Model)> {
        let (model, report) = self.train(&self.corpus.train, "full", cfg)?;
        Ok((self.record(label, &model, &report)?, model))
    }
}

fn with_mode(cfg: &TrainConfig, mode: TrainMode) -> TrainConfig {
    TrainConfig { mode, ..cfg.clone() }
}

fn with_weights(cfg: &TrainConfig, w1: f64, w2: f64, w3: f64) -> TrainConfig {
    TrainConfig {
        loss: LossConfig { w1, w2, w3, ..cfg.loss },
        ..cfg.clone()
    }
}

fn gate_rows(model: &Model) -> Result<Option<Vec<Vec<f64>>>> {
    model
        .gate_params()
        .map(|gp| Ok(export_gate_table(&gp)?.into_iter().map(|w| w.0).collect()))
        .transpose()
}

fn run_seed(spec: &ExperimentSpec, cache_dir: Option<&Path>, seed: u64) -> Result<SeedResult> {
    let cfg = spec.train_config(seed)?;
    if spec.name == ExperimentName::RankSweep {
        return Ok(SeedResult {
            sweep: rank_sweep(spec, &cfg)?,
            ..Default::default()
        });
    }
    let ctx = SeedContext::new(spec, cache_dir, seed)?;
    let gated = with_mode(&cfg, TrainMode::Gated);
    let mut out = SeedResult::default();
    match spec.name {
        ExperimentName::MainTable => {
            out.runs.push(ctx.base_record()?);
            out.runs.push(ctx.run(LABEL_LORA, &with_mode(&cfg, TrainMode::SingleLora))?.0);
            out.runs.push(ctx.run(LABEL_FFT, &with_mode(&cfg, TrainMode::FullFt))?.0);
            let (rec, model) = ctx.run(LABEL_OURS, &gated)?;
            out.runs.push(rec);
            out.gate_table = gate_rows(&model)?;
        }
        ExperimentName::DataDiscrepancy => {
            let truncate = Truncation {
                aspects: vec![SENTIMENT, KEYWORD, MULTI],
                count: spec.scale.truncate_count,
            };
            let corpus = generate_corpus(&CorpusConfig {
                truncate: Some(truncate.clone()),
                ..spec.scale.corpus_config(seed)
            })?;
            let tag = format!("truncated:{}", hash_key(&truncate)?);
            for (label, mode) in [
                (LABEL_LORA, TrainMode::SingleLora),
                (LABEL_FFT, TrainMode::FullFt),
                (LABEL_OURS, TrainMode::Gated),
            ] {
                let (model, report) = ctx.train(&corpus.train, &tag, &with_mode(&cfg, mode))?;
                out.runs.push(ctx.record(label, &model, &report)?);
            }
        }
        ExperimentName::Routing => {
            out.runs.push(ctx.run(LABEL_OURS, &gated)?.0);
            let top2 = TrainConfig {
                routing: RoutingStrategy::TopK(2),
                ..gated.clone()
            };
            out.runs.push(ctx.run(LABEL_TOP2, &top2)?.0);
        }
        ExperimentName::LossAblation => {
            let full = gated.loss;
            for (label, c) in [
                (LABEL_NO_BOTH, with_weights(&gated, 1.0, 0.0, 0.0)),
                (LABEL_NO_AWA, with_weights(&gated, full.w1, full.w2, 0.0)),
                (LABEL_NO_ADA, with_weights(&gated, full.w1, 0.0, full.w3)),
                (LABEL_OURS, gated.clone()),
            ] {
                out.runs.push(ctx.run(label, &c)?.0);
            }
        }
        ExperimentName::IndependentBaseline => {
            out.runs
                .push(ctx.run(LABEL_INDEPENDENT, &with_mode(&cfg, TrainMode::IndependentPerAspect))?.0);
            out.runs.push(ctx.run(LABEL_OURS, &gated)?.0);
        }
        ExperimentName::Forgetting => {
            let order = spec.injection_order();
            for (label, mode) in [(LABEL_OURS, TrainMode::Gated), (LABEL_FFT, TrainMode::FullFt)] {
                let t = forgetting(&ctx, &with_mode(&cfg, mode), &order)?;
                out.trajectories.push(Trajectory { label: label.into(), ..t });
            }
        }
        ExperimentName::RankSweep => unreachable!("handled above"),
    }
    Ok(out)
}

fn multi_accuracy(ctx: &SeedContext, model: &Model) -> Result<f64> {
    Ok(ctx.evaluate(model)?.per_aspect[MULTI.0])
}

fn forgetting(ctx: &SeedContext, cfg: &TrainConfig, order: &[AspectId]) -> Result<Trajectory> {
    let multi: Vec<_> = ctx.corpus.train.iter().filter(|s| s.aspect == MULTI).cloned().collect();
    let (start, _) = ctx.train(&multi, "multi", cfg)?;
    let chain = hash_key(&(&ctx.base_key, cfg, order))?;
    let mut models = vec![start];
    for (k, &aspect) in order.iter().enumerate() {
        let prev = models.last().expect("nonempty").clone();
        let key = format!("stage-{}", hash_key(&(&chain, k))?);
        let (m, _) = ctx.cache.model(&key, || {
            let mut stages = sequential_finetune(&prev, &ctx.corpus.train, &[aspect], &stage_cfg(cfg, k))?;
            Ok(stages.pop().expect("one stage"))
        })?;
        models.push(m);
    }
    let mut stages = vec![corpus::aspect_name(MULTI).to_string()];
    stages.extend(order.iter().map(|&a| format!("+{}", corpus::aspect_name(a))));
    Ok(Trajectory {
        label: String::new(),
        stages,
        multi_accuracy: models.iter().map(|m| multi_accuracy(ctx, m)).collect::<Result<_>>()?,
    })
}

/// Seed of injection stage `k`.
fn stage_cfg(cfg: &TrainConfig, k: usize) -> TrainConfig {
    TrainConfig {
        seed: mix_seed(&[cfg.seed, 0xf0, k as u64]),
        ..cfg.clone()
    }
}

fn rank_sweep(spec: &ExperimentSpec, cfg: &TrainConfig) -> Result<Vec<SweepCell>> {
    let mut model_cfg = spec.scale.sweep_model.clone();
    model_cfg.vocab_size = corpus::build_vocab(&Default::default())?.len();
    let base = Model::new_base(model_cfg.clone(), cfg.seed)?;
    sweep_grid()
        .into_iter()
        .map(|(n, r)| {
            let adapters = AdapterConfig {
                n_loras: n,
                rank: r,
                alpha: 2.0 * r as f64,
                ..cfg.adapter_config().unwrap_or_default()
            };
            let model = base.with_adapters(adapters, cfg.seed)?;
            let trainable = model.params.count(&[ParamGroup::Lora, ParamGroup::Gate]);
            let total = model.params.total();
            Ok(SweepCell {
                n_loras: n,
                rank: r,
                trainable_params: trainable,
                closed_form_params: closed_form_trainable(&model_cfg, n, r, cfg.n_aspects, cfg.gate_dim),
                total_params: total,
                trainable_centipercent: (round2(100.0 * trainable as f64 / total as f64) * 100.0).round() as u64,
            })
        })
        .collect()
}

fn aggregate(label: &str, values: &[Vec<f64>]) -> AggregateRow {
    let k = values.len() as f64;
    let width = values.first().map_or(0, Vec::len);
    let col = |j: usize| values.iter().map(move |v| v[j]);
    AggregateRow {
        label: label.into(),
        mean: (0..width).map(|j| col(j).sum::<f64>() / k).collect(),
        min: (0..width).map(|j| col(j).fold(f64::INFINITY, f64::min)).collect(),
        max: (0..width).map(|j| col(j).fold(f64::NEG_INFINITY, f64::max)).collect(),
    }
}

/// Aggregate rows over the successful seeds, labels in first-seen order.
fn aggregate_all(seeds: &[SeedOutcome]) -> (Vec<AggregateRow>, Vec<AggregateRow>) {
    let ok: Vec<&SeedResult> = seeds.iter().filter_map(|s| s.result.as_ref()).collect();
    let Some(first) = ok.first() else {
        return (Vec::new(), Vec::new());
    };
    let rows = first
        .runs
        .iter()
        .map(|r| {
            let vals: Vec<Vec<f64>> = ok
                .iter()
                .filter_map(|s| s.runs.iter().find(|x| x.label == r.label))
                .map(|x| x.scores.columns())
                .collect();
            aggregate(&r.label, &vals)
        })
        .collect();
    let trajectories = first
        .trajectories
        .iter()
        .map(|t| {
            let vals: Vec<Vec<f64>> = ok
                .iter()
                .filter_map(|s| s.trajectories.iter().find(|x| x.label == t.label))
                .map(|x| x.multi_accuracy.clone())
                .collect();
            aggregate(&t.label, &vals)
        })
        .collect();
    (rows, trajectories)
}

/// Run every seed of `spec`. A failing seed is recorded with its error and
/// does not affect the others. Models are memoized under `cache_dir` when
/// given.
pub fn run_experiment(spec: &ExperimentSpec, cache_dir: Option<&Path>) -> Result<ExperimentResult> {
    spec.validate()?;
    let seeds: Vec<SeedOutcome> = spec
        .seeds
        .iter()
        .map(|&seed| match run_seed(spec, cache_dir, seed) {
            Ok(r) => SeedOutcome {
                seed,
                result: Some(r),
                error: None,
            },
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", spec.name);
                SeedOutcome {
                    seed,
                    result: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let (rows, trajectories) = aggregate_all(&seeds);
    Ok(ExperimentResult {
        spec: spec.clone(),
        seeds,
        rows,
        trajectories,
        artifacts: Vec::new(),
    })
}

fn fmt_range(mean: f64, min: f64, max: f64) -> String {
    format!("{mean:.1} [{min:.1}, {max:.1}]")
}

/// Human-readable report: mean table, mean with min–max, and per-seed
/// tables.
pub fn render_report(result: &ExperimentResult) -> String {
    let mut out = format!("experiment: {}\nseeds: {:?}\n", result.spec.name, result.spec.seeds);
    for s in result.seeds.iter().filter(|s| s.error.is_some()) {
        let _ = writeln!(out, "seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or(""));
    }
    if !result.rows.is_empty() {
        out.push_str("\nmean over seeds\n");
        let tables: Vec<(String, ScoreTable)> = result
            .rows
            .iter()
            .map(|r| (r.label.clone(), mean_table(r)))
            .collect();
        out.push_str(&render_table(&tables));
        out.push_str("\nmean [min, max]\n");
        for r in &result.rows {
            let _ = writeln!(out, "{}", r.label);
            for (j, c) in TABLE_COLUMNS.iter().enumerate() {
                let _ = writeln!(out, "  {c:<8} {}", fmt_range(r.mean[j], r.min[j], r.max[j]));
            }
        }
        for (seed, res) in result.successful() {
            let _ = writeln!(out, "\nseed {seed}");
            let tables: Vec<(String, ScoreTable)> =
                res.runs.iter().map(|r| (r.label.clone(), r.scores.clone())).collect();
            out.push_str(&render_table(&tables));
        }
    }
    if !result.trajectories.is_empty() {
        out.push_str("\nmulti-aspect accuracy by stage, mean [min, max]\n");
        let stages = result
            .successful()
            .next()
            .and_then(|(_, r)| r.trajectories.first())
            .map(|t| t.stages.clone())
            .unwrap_or_default();
        for t in &result.trajectories {
            let _ = writeln!(out, "{}", t.label);
            for (j, stage) in stages.iter().enumerate() {
                let _ = writeln!(out, "  {stage:<12} {}", fmt_range(t.mean[j], t.min[j], t.max[j]));
            }
        }
    }
    if let Some((_, res)) = result.successful().next().filter(|(_, r)| !r.sweep.is_empty()) {
        out.push_str("\n    n     r   trainable       total  percent\n");
        for c in &res.sweep {
            let _ = writeln!(
                out,
                "{:>5} {:>5} {:>11} {:>11} {:>7.2}%",
                c.n_loras,
                c.rank,
                c.trainable_params,
                c.total_params,
                c.trainable_centipercent as f64 / 100.0
            );
        }
    }
    out
}

fn mean_table(r: &AggregateRow) -> ScoreTable {
    ScoreTable {
        average: r.mean[0],
        per_aspect: r.mean[1..].to_vec(),
        counts: Vec::new(),
        passes: Vec::new(),
    }
}

fn trajectories_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("label,seed,stage_index,stage,multi_accuracy\n");
    for (seed, res) in result.successful() {
        for t in &res.trajectories {
            for (k, (stage, acc)) in t.stages.iter().zip(&t.multi_accuracy).enumerate() {
                let _ = writeln!(out, "{},{seed},{k},{stage},{acc}", t.label);
            }
        }
    }
    out
}

fn sweep_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("n_loras,rank,trainable_params,closed_form_params,total_params,trainable_percent\n");
    if let Some((_, res)) = result.successful().next() {
        for c in &res.sweep {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.2}",
                c.n_loras,
                c.rank,
                c.trainable_params,
                c.closed_form_params,
                c.total_params,
                c.trainable_centipercent as f64 / 100.0
            );
        }
    }
    out
}

fn scores_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("label,seed");
    for c in TABLE_COLUMNS {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (seed, res) in result.successful() {
        for r in &res.runs {
            let _ = write!(out, "{},{seed}", r.label);
            for v in r.scores.columns() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

fn gate_csv(rows: &[Vec<f64>]) -> String {
    let weights: Vec<_> = rows.iter().map(|r| crate::gating::GateWeights(r.clone())).collect();
    crate::gating::gate_table_csv(&weights)
}

/// Write `result.json`, `report.txt` and the CSVs that apply to this
/// experiment into `dir`. Output depends only on `result`, so emitting a
/// reloaded result reproduces the files byte for byte. Returns the paths
/// written.
pub fn emit_report(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, String)> = vec![("report.txt".into(), render_report(result))];
    if result.successful().any(|(_, r)| !r.runs.is_empty()) {
        files.push(("scores.csv".into(), scores_csv(result)));
    }
    if !result.trajectories.is_empty() {
        files.push(("forgetting.csv".into(), trajectories_csv(result)));
    }
    if result.successful().any(|(_, r)| !r.sweep.is_empty()) {
        files.push(("sweep.csv".into(), sweep_csv(result)));
    }
    for (seed, res) in result.successful() {
        if let Some(rows) = &res.gate_table {
            files.push((format!("gate_table_seed{seed}.csv"), gate_csv(rows)));
        }
    }
    let mut stamped = result.clone();
    stamped.artifacts = std::iter::once("result.json".to_string())
        .chain(files.iter().map(|(n, _)| n.clone()))
        .collect();
    let mut json = serde_json::to_string_pretty(&stamped)?;
    json.push('\n');
    files.insert(0, ("result.json".into(), json));
    let mut paths = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Read back the `result.json` written by [`emit_report`].
pub fn load_result(dir: &Path) -> Result<ExperimentResult> {
    let path = dir.join("result.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
