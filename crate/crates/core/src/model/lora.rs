use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gating::GateWeights;

/// One low-rank pair: `A` is `d_in × r`, `B` is `r × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// The `n` pairs attached to one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraBank {
    pub pairs: Vec<LoraPair>,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraBank {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn check(&self, weights: &GateWeights) -> Result<()> {
        if weights.len() != self.n() {
            return Err(Error::Config(format!(
                "{} gate weights for a bank of {}",
                weights.len(),
                self.n()
            )));
        }
        Ok(())
    }

    /// `(α/r)·Σ ω_i A_i B_i`, the bank folded into one `d_in × d_out` matrix.
    pub fn merged(&self, weights: &GateWeights) -> Result<Tensor> {
        self.check(weights)?;
        let mut acc: Option<Tensor> = None;
        for (pair, &w) in self.pairs.iter().zip(weights.as_slice()) {
            let term = pair.a.matmul(&pair.b)?.scale(self.scale() * w);
            acc = Some(match acc {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        acc.ok_or_else(|| Error::Config("empty LoRA bank".into()))
    }
}

/// `(α/r)·Σ_i ω_i · (x·A_i·B_i)`, evaluated adapter by adapter.
pub fn lora_delta(x: &Tensor, bank: &LoraBank, weights: &GateWeights) -> Result<Tensor> {
    bank.check(weights)?;
    let mut acc: Option<Tensor> = None;
    for (pair, &w) in bank.pairs.iter().zip(weights.as_slice()) {
        let term = x.matmul(&pair.a)?.matmul(&pair.b)?;
        let term = if w == 1.0 { term } else { term.scale(w) };
        acc = Some(match acc {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("empty LoRA bank".into()))?;
    let scale = bank.scale();
    Ok(if scale == 1.0 { sum } else { sum.scale(scale) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(n: usize, d_in: usize, r: usize, d_out: usize, alpha: f64, zero_b: bool) -> LoraBank {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        LoraBank {
            pairs: (0..n)
                .map(|_| LoraPair {
                    a: Tensor::randn(&[d_in, r], 1.0, &mut rng),
                    b: if zero_b {
                        Tensor::zeros(&[r, d_out])
                    } else {
                        Tensor::randn(&[r, d_out], 1.0, &mut rng)
                    },
                })
                .collect(),
            alpha,
            rank: r,
        }
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let b = bank(3, 4, 2, 5, 4.0, true);
        let x = Tensor::randn(&[6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let d = lora_delta(&x, &b, &GateWeights::uniform(3)).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_adapter_with_alpha_equal_rank_is_plain_product() {
        let b = bank(1, 4, 2, 3, 2.0, false);
        let x = Tensor::randn(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let d = lora_delta(&x, &b, &GateWeights(vec![1.0])).unwrap();
        let direct = x.matmul(&b.pairs[0].a).unwrap().matmul(&b.pairs[0].b).unwrap();
        assert_eq!(d, direct);
    }

    #[test]
    fn alpha_32_rank_16_scales_by_two() {
        let one = bank(1, 20, 16, 20, 16.0, false);
        let two = LoraBank { alpha: 32.0, ..one.clone() };
        assert_eq!(two.scale(), 2.0);
        let x = Tensor::randn(&[3, 20], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let w = GateWeights(vec![1.0]);
        let d1 = lora_delta(&x, &one, &w).unwrap();
        let d2 = lora_delta(&x, &two, &w).unwrap();
        assert_eq!(d2, d1.scale(2.0));
    }

    #[test]
    fn merged_matches_per_adapter_evaluation() {
        let b = bank(4, 6, 2, 5, 3.0, false);
        let w = GateWeights(vec![0.1, 0.2, 0.3, 0.4]);
        let x = Tensor::randn(&[7, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let literal = lora_delta(&x, &b, &w).unwrap();
        let merged = x.matmul(&b.merged(&w).unwrap()).unwrap();
        assert!(literal.max_abs_diff(&merged) < 1e-12);
    }

    #[test]
    fn weight_count_mismatch() {
        let b = bank(2, 4, 2, 4, 2.0, false);
        let x = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            lora_delta(&x, &b, &GateWeights::uniform(3)),
            Err(Error::Config(_))
        ));
    }
}
