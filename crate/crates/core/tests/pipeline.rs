use std::collections::BTreeMap;

use gatelora::checkpoint;
use gatelora::corpus::{generate_corpus, pretraining_samples, write_corpus, CorpusConfig, N_ASPECTS};
use gatelora::evaluator::{evaluate_model, export_hidden_states, pooled_hidden, RandomTokens};
use gatelora::losses::{LossConfig, PooledHidden};
use gatelora::trainer::{pretrain_base, sequential_finetune, train_adapters, PretrainConfig, TrainConfig};
use gatelora::{AspectId, Constraint, Corpus, Model, ModelConfig, ParamGroup, SamplingConfig};

fn corpus(per_aspect: usize, seed: u64) -> Corpus {
    generate_corpus(&CorpusConfig {
        seed,
        train_per_aspect: vec![per_aspect; N_ASPECTS],
        test_fraction: 0.2,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_pretrain(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        model: ModelConfig {
            vocab_size: 0,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 48,
        },
        epochs,
        batch_size: 16,
        toxic_samples: 20,
        seed: 5,
        ..Default::default()
    }
}

fn base(c: &Corpus, epochs: usize) -> Model {
    let mut cfg = tiny_pretrain(epochs);
    cfg.model.vocab_size = c.vocab.len();
    pretrain_base(&pretraining_samples(c, cfg.toxic_samples, 1), &cfg).unwrap().0
}

#[test]
fn corpus_files_are_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for k in 0..2 {
        write_corpus(&dir.path().join(k.to_string()), &corpus(30, 8)).unwrap();
    }
    for f in ["train.jsonl", "test.jsonl", "manifest.json", "spec.json"] {
        let a = std::fs::read(dir.path().join("0").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("1").join(f)).unwrap();
        assert_eq!(checkpoint::fnv1a64(&a), checkpoint::fnv1a64(&b), "{f}");
    }
}

#[test]
fn pretraining_halves_next_token_loss() {
    let c = corpus(60, 1);
    let mut cfg = PretrainConfig {
        epochs: 4,
        ..tiny_pretrain(4)
    };
    cfg.model.vocab_size = c.vocab.len();
    let (_, report) = pretrain_base(&pretraining_samples(&c, 20, 1), &cfg).unwrap();
    let first = report.initial.unwrap().lp;
    let last = report.epochs.last().unwrap().lp;
    assert!(last <= 0.5 * first, "L_p {first} -> {last}");
}

#[test]
fn pretraining_is_deterministic_and_checkpoints_round_trip() {
    let c = corpus(10, 2);
    let dir = tempfile::tempdir().unwrap();
    let a = base(&c, 1);
    let b = base(&c, 1);
    let meta = BTreeMap::new();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint::save(&a, &pa, &meta).unwrap();
    checkpoint::save(&b, &pb, &meta).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let (loaded, _) = checkpoint::load(&pa).unwrap();
    for s in c.test.iter().take(5) {
        let seq = s.sequence();
        assert_eq!(a.forward(&seq, s.aspect).unwrap().0, loaded.forward(&seq, s.aspect).unwrap().0);
    }
}

#[test]
fn adapter_training_is_deterministic() {
    let c = corpus(12, 3);
    let b = base(&c, 1);
    let cfg = TrainConfig {
        n_loras: 2,
        rank: 2,
        alpha: 4.0,
        epochs: 1,
        batch_size: 12,
        gate_dim: 4,
        ..Default::default()
    };
    let (m1, _) = train_adapters(&b, &c.train, &cfg).unwrap();
    let (m2, _) = train_adapters(&b, &c.train, &cfg).unwrap();
    let groups = [ParamGroup::Base, ParamGroup::Lora, ParamGroup::Gate];
    for g in groups {
        assert_eq!(m1.params.checksums(g), m2.params.checksums(g));
    }
}

#[test]
fn overfit_loss_is_monotone_after_warmup() {
    let c = corpus(40, 4);
    let b = base(&c, 2);
    let subset: Vec<_> = c.train.iter().take(64).cloned().collect();
    let cfg = TrainConfig {
        n_loras: 2,
        rank: 4,
        alpha: 8.0,
        epochs: 10,
        batch_size: 64,
        lr: 1e-3,
        dropout: 0.0,
        gate_dim: 4,
        ..Default::default()
    };
    let (_, report) = train_adapters(&b, &subset, &cfg).unwrap();
    let totals: Vec<f64> = report.epochs.iter().map(|e| e.total).collect();
    for e in 2..totals.len() {
        assert!(totals[e] <= totals[e - 1] + 1e-3, "epoch {e}: {totals:?}");
    }
}

#[test]
fn sequential_stages_each_change_the_adapters() {
    let c = corpus(10, 5);
    let b = base(&c, 1);
    let cfg = TrainConfig {
        n_loras: 2,
        rank: 2,
        alpha: 4.0,
        epochs: 1,
        batch_size: 8,
        gate_dim: 4,
        ..Default::default()
    };
    let (start, _) = train_adapters(&b, &c.train, &cfg).unwrap();
    let none = sequential_finetune(&start, &c.train, &[], &cfg).unwrap();
    assert_eq!(none.len(), 1);

    let stages = sequential_finetune(&start, &c.train, &[AspectId(0), AspectId(1), AspectId(3)], &cfg).unwrap();
    assert_eq!(stages.len(), 4);
    for w in stages.windows(2) {
        assert_ne!(w[0].0.params.checksums(ParamGroup::Lora), w[1].0.params.checksums(ParamGroup::Lora));
        assert_eq!(w[0].0.params.checksums(ParamGroup::Base), w[1].0.params.checksums(ParamGroup::Base));
    }
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// P(all k distinct keywords appear among `len` uniform draws from `v` tokens),
/// by inclusion and exclusion over the missing keywords.
fn hit_probability(k: usize, v: usize, len: usize) -> f64 {
    (0..=k)
        .map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * binomial(k as u64, j as u64) * ((v - j) as f64 / v as f64).powi(len as i32)
        })
        .sum()
}

#[test]
fn random_tokens_hit_keywords_at_the_combinatorial_rate() {
    let c = generate_corpus(&CorpusConfig {
        seed: 6,
        train_per_aspect: vec![20, 20, 20, 20, 10_000, 20],
        test_fraction: 0.1,
        ..Default::default()
    })
    .unwrap();
    let v = c.vocab.len();
    let len = v;
    let keyword: Vec<_> = c.test.iter().filter(|s| s.aspect.0 == 4).collect();
    assert!(keyword.len() >= 1000);

    let generator = RandomTokens { vocab_size: v, length: len };
    let (table, records) = evaluate_model(&generator, &c.vocab, &c.test, &SamplingConfig::default(), 11).unwrap();
    let (mut mean, mut var) = (0.0, 0.0);
    let mut passes = 0;
    for r in records.iter().filter(|r| r.aspect.0 == 4) {
        let Constraint::Keyword(ks) = &r.constraint else { panic!("keyword record without keyword constraint") };
        let p = hit_probability(ks.len(), v, len);
        mean += p;
        var += p * (1.0 - p);
        passes += usize::from(r.pass);
    }
    let n = keyword.len() as f64;
    assert!(
        (passes as f64 - mean).abs() <= 3.0 * var.sqrt(),
        "{passes} passes, expected {mean:.1} ± {:.1}",
        var.sqrt()
    );
    assert!((table.per_aspect[4] - 100.0 * passes as f64 / n).abs() < 1e-9);
}

fn mean_center_distance(rows: &[PooledHidden]) -> f64 {
    let mut centers: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let e = centers
            .entry((r.label.aspect.0, r.label.index))
            .or_insert_with(|| (vec![0.0; r.vector.len()], 0));
        for (c, x) in e.0.iter_mut().zip(&r.vector) {
            *c += x;
        }
        e.1 += 1;
    }
    let centers: Vec<(usize, Vec<f64>)> = centers
        .into_iter()
        .map(|((a, _), (sum, n))| (a, sum.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let (mut total, mut pairs) = (0.0, 0);
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            if centers[i].0 == centers[j].0 {
                let d: f64 = centers[i].1.iter().zip(&centers[j].1).map(|(a, b)| (a - b) * (a - b)).sum();
                total += d.sqrt();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

#[test]
fn attribute_aware_training_separates_attribute_centers() {
    let c = corpus(40, 7);
    let b = base(&c, 2);
    let cfg = TrainConfig {
        n_loras: 2,
        rank: 4,
        alpha: 8.0,
        epochs: 3,
        batch_size: 24,
        lr: 3e-3,
        gate_dim: 4,
        // margin above the pretrained spacing so the exclusion hinge is active
        loss: LossConfig {
            gamma: 3.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let (trained, _) = train_adapters(&b, &c.train, &cfg).unwrap();
    let rows = |m: &Model| c.train.iter().map(|s| pooled_hidden(m, s).unwrap()).collect::<Vec<_>>();
    let before = mean_center_distance(&rows(&b));
    let after = mean_center_distance(&rows(&trained));
    assert!(after > before, "mean inter-attribute center distance {before} -> {after}");
}

#[test]
fn exported_rows_are_the_pooled_states() {
    let c = corpus(6, 9);
    let b = base(&c, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    let rows = export_hidden_states(&b, &c.test, &path).unwrap();
    assert_eq!(rows.len(), c.test.len());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + c.test.len());
    for (row, s) in rows.iter().zip(&c.test) {
        assert_eq!(*row, pooled_hidden(&b, s).unwrap());
    }
}
