//! Aspect-identifier gate: embedding → linear → softmax over the LoRA bank,
//! plus the all-modules / top-k routing strategies.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default number of aspects (sentiment, topic, multi, length, keyword, detox).
pub const DEFAULT_ASPECTS: usize = 6;
/// Default gate embedding width.
pub const DEFAULT_GATE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AspectId(pub usize);

impl AspectId {
    pub fn checked(id: usize, n_aspects: usize) -> Result<Self> {
        if id >= n_aspects {
            return Err(Error::Domain(format!("aspect id {id} outside [0, {n_aspects})")));
        }
        Ok(AspectId(id))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for AspectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Gate parameters as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `n_aspects × d_g`
    pub embedding: Tensor,
    /// `d_g × n`
    pub linear: Tensor,
    /// `n`
    pub bias: Tensor,
}

impl GateParams {
    /// Embedding rows ~ N(0, 0.02²); linear head and bias zero, so the
    /// untrained gate is exactly uniform.
    pub fn init<R: Rng + ?Sized>(n_aspects: usize, gate_dim: usize, n_loras: usize, rng: &mut R) -> Self {
        GateParams {
            embedding: Tensor::randn(&[n_aspects, gate_dim], 0.02, rng),
            linear: Tensor::zeros(&[gate_dim, n_loras]),
            bias: Tensor::zeros(&[n_loras]),
        }
    }

    pub fn n_aspects(&self) -> usize {
        self.embedding.rows()
    }

    pub fn n_loras(&self) -> usize {
        self.linear.cols()
    }
}

/// Routing weights ω over one bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateWeights(pub Vec<f64>);

impl GateWeights {
    pub fn uniform(n: usize) -> Self {
        GateWeights(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > self.0[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingStrategy {
    #[default]
    AllModules,
    TopK(usize),
}

impl RoutingStrategy {
    pub fn validate(self, n: usize) -> Result<()> {
        match self {
            RoutingStrategy::AllModules => Ok(()),
            RoutingStrategy::TopK(k) if k >= 1 && k <= n => Ok(()),
            RoutingStrategy::TopK(k) => Err(Error::Config(format!("top-{k} routing over {n} modules"))),
        }
    }

    /// Which entries survive routing. Ties are broken toward the lower index.
    pub fn keep_mask(self, omega: &[f64]) -> Result<Vec<bool>> {
        self.validate(omega.len())?;
        match self {
            RoutingStrategy::AllModules => Ok(vec![true; omega.len()]),
            RoutingStrategy::TopK(k) => {
                let mut order: Vec<usize> = (0..omega.len()).collect();
                // stable sort keeps lower index first among equal weights
                order.sort_by(|&a, &b| omega[b].total_cmp(&omega[a]));
                let mut keep = vec![false; omega.len()];
                for &i in order.iter().take(k) {
                    keep[i] = true;
                }
                Ok(keep)
            }
        }
    }
}

/// Gate logits `embedding[aspect] · linear + bias` as a `1×n` graph node,
/// followed by softmax.
pub fn gate_graph(g: &mut Graph, embedding: Var, linear: Var, bias: Var, aspect: AspectId) -> Result<Var> {
    let n_aspects = g.value(embedding).rows();
    AspectId::checked(aspect.0, n_aspects)?;
    let row = g.gather_rows(embedding, &[aspect.0])?;
    let logits = g.matmul(row, linear)?;
    let logits = g.add_row(logits, bias)?;
    g.softmax(logits, 1.0, false)
}

/// Apply a routing strategy to a graph node holding ω.
pub fn route_graph(g: &mut Graph, omega: Var, strategy: RoutingStrategy) -> Result<Var> {
    match strategy {
        RoutingStrategy::AllModules => {
            strategy.validate(g.value(omega).numel())?;
            Ok(omega)
        }
        RoutingStrategy::TopK(_) => {
            let keep = strategy.keep_mask(g.value(omega).data())?;
            g.select_renorm(omega, &keep)
        }
    }
}

pub fn gate_forward(aspect: AspectId, params: &GateParams) -> Result<GateWeights> {
    let mut g = Graph::new();
    let e = g.constant(params.embedding.clone());
    let w = g.constant(params.linear.clone());
    let b = g.constant(params.bias.clone());
    let omega = gate_graph(&mut g, e, w, b, aspect)?;
    Ok(GateWeights(g.value(omega).data().to_vec()))
}

/// `AllModules` returns ω unchanged; `TopK(k)` keeps the k largest entries
/// and renormalizes them to sum 1.
pub fn apply_routing(omega: &GateWeights, strategy: RoutingStrategy) -> Result<GateWeights> {
    let keep = strategy.keep_mask(&omega.0)?;
    if keep.iter().all(|&k| k) {
        return Ok(omega.clone());
    }
    let s: f64 = omega.0.iter().zip(&keep).filter(|(_, &k)| k).map(|(w, _)| w).sum();
    if s <= 0.0 {
        return Err(Error::Numeric("routing kept zero total weight".into()));
    }
    Ok(GateWeights(
        omega.0.iter().zip(&keep).map(|(w, &k)| if k { w / s } else { 0.0 }).collect(),
    ))
}

/// One row of raw gate weights per aspect id.
pub fn export_gate_table(params: &GateParams) -> Result<Vec<GateWeights>> {
    (0..params.n_aspects()).map(|a| gate_forward(AspectId(a), params)).collect()
}

/// CSV with header `aspect_id,w_0,...,w_{n-1}` and six decimals.
pub fn gate_table_csv(rows: &[GateWeights]) -> String {
    let n = rows.first().map_or(0, GateWeights::len);
    let mut out = String::from("aspect_id");
    for i in 0..n {
        let _ = write!(out, ",w_{i}");
    }
    out.push('\n');
    for (a, row) in rows.iter().enumerate() {
        let _ = write!(out, "{a}");
        for w in &row.0 {
            let _ = write!(out, ",{w:.6}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, n: usize) -> GateParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GateParams {
            embedding: Tensor::randn(&[6, 16], 1.0, &mut rng),
            linear: Tensor::randn(&[16, n], 1.0, &mut rng),
            bias: Tensor::randn(&[n], 1.0, &mut rng),
        }
    }

    #[test]
    fn zero_head_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = GateParams::init(DEFAULT_ASPECTS, DEFAULT_GATE_DIM, 8, &mut rng);
        assert_eq!(p.embedding.shape(), &[6, 64]);
        assert_eq!(p.linear.shape(), &[64, 8]);
        for row in export_gate_table(&p).unwrap() {
            assert_eq!(row, GateWeights::uniform(8));
        }
    }

    #[test]
    fn hand_set_logits() {
        let p = GateParams {
            embedding: Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            linear: Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let w = gate_forward(AspectId(0), &p).unwrap();
        assert!((w.0[0] - 0.25).abs() < 1e-12);
        assert!((w.0[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_aspect() {
        let p = random_params(0, 4);
        assert!(matches!(gate_forward(AspectId(6), &p), Err(Error::Domain(_))));
    }

    #[test]
    fn routing_examples() {
        let w = GateWeights(vec![0.5, 0.3, 0.2]);
        assert_eq!(apply_routing(&w, RoutingStrategy::AllModules).unwrap(), w);
        assert_eq!(apply_routing(&w, RoutingStrategy::TopK(3)).unwrap(), w);
        let top2 = apply_routing(&w, RoutingStrategy::TopK(2)).unwrap();
        for (a, b) in top2.0.iter().zip([0.625, 0.375, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            apply_routing(&w, RoutingStrategy::TopK(4)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            apply_routing(&w, RoutingStrategy::TopK(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let w = GateWeights(vec![0.25, 0.25, 0.25, 0.25]);
        let top2 = apply_routing(&w, RoutingStrategy::TopK(2)).unwrap();
        assert_eq!(top2.0, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn csv_layout() {
        let csv = gate_table_csv(&[GateWeights(vec![0.5, 0.5]), GateWeights(vec![0.25, 0.75])]);
        assert_eq!(csv, "aspect_id,w_0,w_1\n0,0.500000,0.500000\n1,0.250000,0.750000\n");
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(seed in any::<u64>(), n in 1usize..10) {
            let p = random_params(seed, n);
            for a in 0..6 {
                let w = gate_forward(AspectId(a), &p).unwrap();
                prop_assert!(w.0.iter().all(|&x| x >= 0.0));
                prop_assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn top_k_is_idempotent(seed in any::<u64>(), n in 2usize..10, k in 1usize..10) {
            let k = k.min(n);
            let w = gate_forward(AspectId(0), &random_params(seed, n)).unwrap();
            let once = apply_routing(&w, RoutingStrategy::TopK(k)).unwrap();
            let twice = apply_routing(&once, RoutingStrategy::TopK(k)).unwrap();
            prop_assert!((once.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(once.0.iter().filter(|&&x| x > 0.0).count(), k);
            for (a, b) in once.0.iter().zip(&twice.0) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
