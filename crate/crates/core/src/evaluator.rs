//! Rule-based scoring of generated continuations and per-aspect accuracy
//! tables.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{self, mix_seed, Constraint, TrainingSample, Vocab, N_ASPECTS};
use crate::error::{Error, Result};
use crate::gating::AspectId;
use crate::losses::{self, AttributeId, PooledHidden};
use crate::model::{InferenceModel, Model, SamplingConfig};

/// Column headers of a score table, in aspect-id order after the average.
pub const TABLE_COLUMNS: [&str; 7] = ["Average", "Sent.", "Topic", "Multi", "Length", "Keyword", "Detox."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub aspect: AspectId,
    pub constraint: Constraint,
    pub generated: Vec<usize>,
    pub pass: bool,
}

fn lexicon_majority(generated: &[usize], lexicons: &[Vec<usize>], target: usize) -> bool {
    let counts: Vec<usize> = lexicons
        .iter()
        .map(|lex| generated.iter().filter(|t| lex.contains(t)).count())
        .collect();
    counts
        .iter()
        .enumerate()
        .all(|(i, &c)| i == target || counts[target] > c)
        && counts[target] > 0
}

/// Whether `generated` satisfies `constraint`. Empty output fails.
pub fn evaluate_sample(vocab: &Vocab, aspect: AspectId, constraint: &Constraint, generated: &[usize]) -> Result<bool> {
    if aspect.0 >= N_ASPECTS {
        return Err(Error::Domain(format!("unknown aspect {aspect}")));
    }
    if constraint.aspect() != aspect {
        return Err(Error::Domain(format!(
            "constraint belongs to aspect {}, not {aspect}",
            constraint.aspect()
        )));
    }
    if generated.is_empty() {
        return Ok(false);
    }
    Ok(match constraint {
        Constraint::Sentiment(s) => lexicon_majority(generated, &vocab.sentiment_lexicons, *s),
        Constraint::Topic(t) => lexicon_majority(generated, &vocab.topic_lexicons, *t),
        Constraint::Multi { sentiment, topic } => {
            lexicon_majority(generated, &vocab.sentiment_lexicons, *sentiment)
                && lexicon_majority(generated, &vocab.topic_lexicons, *topic)
        }
        Constraint::Length(w) => w.contains(generated.len()),
        Constraint::Keyword(ks) => ks.iter().all(|k| generated.contains(k)),
        Constraint::Detox => !generated.iter().any(|t| vocab.banned.contains(t)),
    })
}

/// Anything that can continue test prompts of one aspect.
pub trait Generator {
    /// One continuation per sample, seeded by `seeds[i]`. A failure on one
    /// sample does not affect the others.
    fn generate(
        &self,
        aspect: AspectId,
        samples: &[&TrainingSample],
        sampling: &SamplingConfig,
        seeds: &[u64],
    ) -> Vec<Result<Vec<usize>>>;
}

impl Generator for Model {
    fn generate(
        &self,
        aspect: AspectId,
        samples: &[&TrainingSample],
        sampling: &SamplingConfig,
        seeds: &[u64],
    ) -> Vec<Result<Vec<usize>>> {
        let engine = match InferenceModel::new(self, aspect) {
            Ok(e) => e,
            Err(e) => return samples.iter().map(|_| Err(Error::Numeric(e.to_string()))).collect(),
        };
        samples
            .iter()
            .zip(seeds)
            .map(|(s, &seed)| engine.generate(&s.prompt(), sampling, seed))
            .collect()
    }
}

/// Returns each sample's reference target.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoOracle;

impl Generator for EchoOracle {
    fn generate(&self, _: AspectId, samples: &[&TrainingSample], _: &SamplingConfig, _: &[u64]) -> Vec<Result<Vec<usize>>> {
        samples.iter().map(|s| Ok(s.target.clone())).collect()
    }
}

/// Emits `length` tokens drawn uniformly from the vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct RandomTokens {
    pub vocab_size: usize,
    pub length: usize,
}

impl Generator for RandomTokens {
    fn generate(&self, _: AspectId, samples: &[&TrainingSample], _: &SamplingConfig, seeds: &[u64]) -> Vec<Result<Vec<usize>>> {
        samples
            .iter()
            .zip(seeds)
            .map(|(_, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..self.length).map(|_| rng.random_range(0..self.vocab_size)).collect())
            })
            .collect()
    }
}

/// Per-aspect accuracy in percent and their plain mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub per_aspect: Vec<f64>,
    pub average: f64,
    pub counts: Vec<usize>,
    pub passes: Vec<usize>,
}

impl ScoreTable {
    pub fn from_counts(passes: Vec<usize>, counts: Vec<usize>) -> Result<ScoreTable> {
        if passes.len() != N_ASPECTS || counts.len() != N_ASPECTS {
            return Err(Error::Config(format!("score tables hold {N_ASPECTS} aspects")));
        }
        if let Some(a) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Domain(format!("no test samples for aspect {}", corpus::ASPECT_NAMES[a])));
        }
        let per_aspect: Vec<f64> = passes
            .iter()
            .zip(&counts)
            .map(|(&p, &c)| 100.0 * p as f64 / c as f64)
            .collect();
        let average = per_aspect.iter().sum::<f64>() / N_ASPECTS as f64;
        Ok(ScoreTable {
            per_aspect,
            average,
            counts,
            passes,
        })
    }

    /// `[average, sent, topic, multi, length, keyword, detox]`
    pub fn columns(&self) -> Vec<f64> {
        std::iter::once(self.average).chain(self.per_aspect.iter().copied()).collect()
    }

    /// Elementwise mean of several tables (counts summed).
    pub fn mean(tables: &[ScoreTable]) -> Result<ScoreTable> {
        let first = tables.first().ok_or_else(|| Error::Domain("mean of zero score tables".into()))?;
        let k = tables.len() as f64;
        let mut per_aspect = vec![0.0; first.per_aspect.len()];
        let mut counts = vec![0; first.counts.len()];
        let mut passes = vec![0; first.passes.len()];
        for t in tables {
            per_aspect.iter_mut().zip(&t.per_aspect).for_each(|(a, b)| *a += b);
            counts.iter_mut().zip(&t.counts).for_each(|(a, b)| *a += b);
            passes.iter_mut().zip(&t.passes).for_each(|(a, b)| *a += b);
        }
        per_aspect.iter_mut().for_each(|v| *v /= k);
        let average = per_aspect.iter().sum::<f64>() / per_aspect.len() as f64;
        Ok(ScoreTable {
            per_aspect,
            average,
            counts,
            passes,
        })
    }
}

/// Aligned text table, one row per labelled score table, one decimal.
pub fn render_table(rows: &[(String, ScoreTable)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<label_w$}", "Model");
    for c in TABLE_COLUMNS {
        let _ = write!(out, "  {c:>8}");
    }
    out.push('\n');
    for (label, t) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for v in t.columns() {
            let _ = write!(out, "  {v:>8.1}");
        }
        out.push('\n');
    }
    out
}

/// Generate one continuation per test sample (seeded by sample index) and
/// score it. Generation failures count as failures.
pub fn evaluate_model(
    generator: &dyn Generator,
    vocab: &Vocab,
    test: &[TrainingSample],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<(ScoreTable, Vec<EvalRecord>)> {
    sampling.validate()?;
    let mut records: Vec<Option<EvalRecord>> = vec![None; test.len()];
    let mut passes = vec![0; N_ASPECTS];
    let mut counts = vec![0; N_ASPECTS];
    for a in 0..N_ASPECTS {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].aspect.0 == a).collect();
        let samples: Vec<&TrainingSample> = idx.iter().map(|&i| &test[i]).collect();
        let seeds: Vec<u64> = idx.iter().map(|&i| mix_seed(&[seed, i as u64])).collect();
        let outputs = generator.generate(AspectId(a), &samples, sampling, &seeds);
        for ((&i, sample), out) in idx.iter().zip(&samples).zip(outputs) {
            let constraint = Constraint::parse(vocab, &sample.instruction)?;
            let generated = match out {
                Ok(g) => g,
                Err(e) => {
                    log::warn!("generation failed for test sample {i}: {e}");
                    Vec::new()
                }
            };
            let pass = evaluate_sample(vocab, sample.aspect, &constraint, &generated)?;
            counts[a] += 1;
            passes[a] += usize::from(pass);
            records[i] = Some(EvalRecord {
                aspect: sample.aspect,
                constraint,
                generated,
                pass,
            });
        }
    }
    if let Some(s) = test.iter().find(|s| s.aspect.0 >= N_ASPECTS) {
        return Err(Error::Domain(format!("unknown aspect {}", s.aspect)));
    }
    let table = ScoreTable::from_counts(passes, counts)?;
    Ok((table, records.into_iter().map(|r| r.expect("every sample scored")).collect()))
}

/// Mean last-block hidden state over the sample's target positions, under the
/// sample's aspect.
pub fn pooled_hidden(model: &Model, sample: &TrainingSample) -> Result<PooledHidden> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[]);
    let deltas = model.aspect_deltas(&mut g, &bound, sample.aspect)?;
    let out = model.forward_graph(&mut g, &bound, &sample.sequence(), deltas.as_ref(), None)?;
    let positions: Vec<usize> = sample.target_positions().collect();
    let pooled = losses::pool_hidden(&mut g, out.hidden, &positions)?;
    Ok(PooledHidden {
        vector: g.value(pooled).data().to_vec(),
        label: AttributeId {
            aspect: sample.aspect,
            index: sample.attribute,
        },
    })
}

pub fn hidden_states_csv(rows: &[PooledHidden]) -> String {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("aspect_id,attribute");
    for i in 0..d {
        let _ = write!(out, ",h_{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.label.aspect, r.label.index);
        for v in &r.vector {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Write pooled hidden states of `samples` as CSV; returns the rows written.
pub fn export_hidden_states(model: &Model, samples: &[TrainingSample], path: &Path) -> Result<Vec<PooledHidden>> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples to export".into()));
    }
    let rows = samples
        .iter()
        .map(|s| pooled_hidden(model, s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, hidden_states_csv(&rows)).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}
