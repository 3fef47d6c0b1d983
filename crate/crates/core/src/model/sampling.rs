use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoding settings. Defaults follow the reference setup (top-p 0.7,
/// temperature 0.95) with a toy-sized generation budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Argmax decoding (the temperature → 0 limit).
    #[serde(default)]
    pub greedy: bool,
    /// Generation stops after sampling this token.
    pub stop_token: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_p: 0.7,
            temperature: 0.95,
            max_new_tokens: 64,
            greedy: false,
            stop_token: Some(crate::corpus::EOS),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    /// Probabilities the sampler draws from: tempered softmax restricted to
    /// the smallest high-probability prefix reaching `top_p`, renormalized.
    pub fn distribution(&self, logits: &[f64]) -> Result<Vec<f64>> {
        if logits.is_empty() {
            return Err(Error::Domain("no logits to sample from".into()));
        }
        if self.greedy {
            let mut p = vec![0.0; logits.len()];
            p[argmax(logits)] = 1.0;
            return Ok(p);
        }
        let scaled: Vec<f64> = logits.iter().map(|l| l / self.temperature).collect();
        let probs = crate::autodiff::softmax(&scaled)?;
        if self.top_p >= 1.0 {
            return Ok(probs);
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let mut keep = vec![false; probs.len()];
        let mut mass = 0.0;
        for &i in &order {
            keep[i] = true;
            mass += probs[i];
            if mass >= self.top_p {
                break;
            }
        }
        Ok(probs
            .iter()
            .zip(&keep)
            .map(|(p, &k)| if k { p / mass } else { 0.0 })
            .collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draw the next token id.
pub fn sample_next<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> Result<usize> {
    let probs = cfg.distribution(logits)?;
    if cfg.greedy {
        return Ok(argmax(&probs));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_defaults_accepted() {
        let cfg = SamplingConfig::default();
        assert_eq!(cfg.top_p, 0.7);
        assert_eq!(cfg.temperature, 0.95);
        cfg.validate().unwrap();
        let long = SamplingConfig { max_new_tokens: 512, ..cfg };
        long.validate().unwrap();
    }

    #[test]
    fn invalid_settings_rejected() {
        for (top_p, temperature) in [(0.0, 1.0), (1.1, 1.0), (0.5, 0.0), (0.5, -1.0)] {
            let cfg = SamplingConfig { top_p, temperature, ..Default::default() };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let cfg = SamplingConfig { greedy: true, ..Default::default() };
        let logits = [0.1, 2.0, 1.9, -3.0];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_next(&logits, &cfg, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        let cfg = SamplingConfig { top_p: 0.7, temperature: 1.0, ..Default::default() };
        let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let d = cfg.distribution(&logits).unwrap();
        assert!((d[0] - 0.625).abs() < 1e-12);
        assert!((d[1] - 0.375).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn top_p_one_matches_tempered_softmax_by_chi_square() {
        // Exact categorical oracle: softmax(logits / T) over a 3-token vocab.
        let logits = [0.4, -0.3, 1.1];
        let t = 0.8;
        let z: f64 = logits.iter().map(|l: &f64| (l / t).exp()).sum();
        let expected: Vec<f64> = logits.iter().map(|l| (l / t).exp() / z).collect();
        let cfg = SamplingConfig { top_p: 1.0, temperature: t, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[sample_next(&logits, &cfg, &mut rng).unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &p)| {
                let e = p * draws as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // Two degrees of freedom: P(X > x) = exp(-x / 2), so p > 0.01 ⇔ x < 2 ln 100.
        let critical = 2.0 * 100f64.ln();
        assert!(chi2 < critical, "chi2 = {chi2}, counts = {counts:?}");
    }
}
