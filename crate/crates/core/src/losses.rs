//! Training objectives: masked next-token loss, the aspect-adaptive center
//! penalty, the attribute exclusion/gap losses and their weighted sum.
//!
//! Every hidden representation entering the center losses is the mean of the
//! last-block hidden states over a sample's target positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gating::AspectId;

/// Added under the square root when differentiating a Euclidean norm.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeId {
    pub aspect: AspectId,
    pub index: usize,
}

impl AttributeId {
    pub fn new(aspect: usize, index: usize) -> Self {
        AttributeId {
            aspect: AspectId(aspect),
            index,
        }
    }
}

/// A pooled hidden vector outside any graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledHidden {
    pub vector: Vec<f64>,
    pub label: AttributeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCenter {
    pub vector: Vec<f64>,
    pub attribute: AttributeId,
    pub count: usize,
}

/// A pooled hidden vector recorded in a graph (`1×d`).
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub var: Var,
    pub label: AttributeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w1: 0.7,
            w2: 0.2,
            w3: 0.1,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    /// Next-token loss only.
    pub fn lp_only() -> Self {
        LossConfig {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and nonnegative")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("margin gamma = {} must be positive", self.gamma)));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `targets[i]` under `logits` row `i`, over
/// the positions where `mask[i]` is set.
pub fn next_token_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if targets.len() != mask.len() {
        return Err(Error::dim("next_token_loss", &[targets.len()], &[mask.len()]));
    }
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(i, (&t, _))| (i, t))
        .collect();
    if picks.is_empty() {
        return Err(Error::Domain("every position is masked".into()));
    }
    let scale = 1.0 / picks.len() as f64;
    g.cross_entropy(logits, &picks, scale)
}

/// Token-weighted mean NLL over a batch: each entry is a sequence's logits
/// with its `(row, target)` pairs.
pub fn batch_next_token_loss(g: &mut Graph, items: &[(Var, Vec<(usize, usize)>)]) -> Result<Var> {
    let n: usize = items.iter().map(|(_, t)| t.len()).sum();
    if n == 0 {
        return Err(Error::Domain("batch has no target positions".into()));
    }
    let scale = 1.0 / n as f64;
    let parts = items
        .iter()
        .filter(|(_, t)| !t.is_empty())
        .map(|(logits, t)| g.cross_entropy(*logits, t, scale))
        .collect::<Result<Vec<_>>>()?;
    g.add_n(&parts)
}

/// Mean of the hidden rows at `positions`.
pub fn pool_hidden(g: &mut Graph, hidden: Var, positions: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Domain("pooling over zero target positions".into()));
    }
    g.mean_rows(hidden, positions)
}

fn group_by<K: Ord>(items: &[Pooled], key: impl Fn(&Pooled) -> K) -> BTreeMap<K, Vec<Var>> {
    let mut out: BTreeMap<K, Vec<Var>> = BTreeMap::new();
    for p in items {
        out.entry(key(p)).or_default().push(p.var);
    }
    out
}

fn distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    Ok(g.l2_norm(d, NORM_FLOOR))
}

/// Σ over unordered pairs of aspects present of ‖mean_t1 − mean_t2‖.
pub fn aspect_adaptive_loss(g: &mut Graph, pooled: &[Pooled]) -> Result<Var> {
    let groups = group_by(pooled, |p| p.label.aspect);
    let means = groups
        .values()
        .map(|vs| g.mean_of(vs))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            terms.push(distance(g, means[i], means[j])?);
        }
    }
    g.add_n(&terms)
}

/// Attribute centers of a set of pooled vectors, in attribute order.
fn centers(g: &mut Graph, pooled: &[Pooled]) -> Result<Vec<(AttributeId, Var, Vec<Var>)>> {
    group_by(pooled, |p| p.label)
        .into_iter()
        .map(|(a, vs)| Ok((a, g.mean_of(&vs)?, vs)))
        .collect()
}

fn exclusion_from_centers(g: &mut Graph, cs: &[(AttributeId, Var, Vec<Var>)], gamma: f64) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            let d = distance(g, cs[i].1, cs[j].1)?;
            let slack = g.affine(d, -1.0, gamma);
            terms.push(g.relu(slack));
        }
    }
    g.add_n(&terms)
}

fn gap_from_centers(g: &mut Graph, cs: &[(AttributeId, Var, Vec<Var>)]) -> Result<Var> {
    let mut terms = Vec::new();
    for (_, c, members) in cs {
        for &h in members {
            terms.push(distance(g, h, *c)?);
        }
    }
    g.add_n(&terms)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!("margin gamma = {gamma} must be positive")));
    }
    Ok(())
}

/// Σ over attribute pairs of max(γ − ‖C1 − C2‖, 0). Expects one aspect.
pub fn attribute_exclusion_loss(g: &mut Graph, pooled: &[Pooled], gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let cs = centers(g, pooled)?;
    exclusion_from_centers(g, &cs, gamma)
}

/// Σ over samples of ‖H − C_attribute‖. Expects one aspect.
pub fn attribute_gap_loss(g: &mut Graph, pooled: &[Pooled]) -> Result<Var> {
    let cs = centers(g, pooled)?;
    gap_from_centers(g, &cs)
}

/// Σ over aspects present of exclusion + gap.
pub fn attribute_aware_loss(g: &mut Graph, pooled: &[Pooled], gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let mut terms = Vec::new();
    for (_, members) in group_by_aspect(pooled) {
        let cs = centers(g, &members)?;
        terms.push(exclusion_from_centers(g, &cs, gamma)?);
        terms.push(gap_from_centers(g, &cs)?);
    }
    g.add_n(&terms)
}

fn group_by_aspect(pooled: &[Pooled]) -> BTreeMap<AspectId, Vec<Pooled>> {
    let mut out: BTreeMap<AspectId, Vec<Pooled>> = BTreeMap::new();
    for p in pooled {
        out.entry(p.label.aspect).or_default().push(*p);
    }
    out
}

/// `w1·lp + w2·lada + w3·lawa`. Terms passed as `None` are omitted, which is
/// how zero-weight terms are skipped without building them.
pub fn total_loss(g: &mut Graph, lp: Var, lada: Option<Var>, lawa: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let mut terms = vec![g.scale(lp, cfg.w1)];
    if let Some(v) = lada {
        terms.push(g.scale(v, cfg.w2));
    }
    if let Some(v) = lawa {
        terms.push(g.scale(v, cfg.w3));
    }
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    g.add_n(&terms)
}

/// Per-attribute means of plain pooled vectors, in attribute order.
pub fn attribute_centers(pooled: &[PooledHidden]) -> Result<Vec<AttributeCenter>> {
    let mut groups: BTreeMap<AttributeId, Vec<&PooledHidden>> = BTreeMap::new();
    for p in pooled {
        groups.entry(p.label).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(attribute, members)| {
            let d = members[0].vector.len();
            let mut vector = vec![0.0; d];
            for m in &members {
                if m.vector.len() != d {
                    return Err(Error::dim("attribute_centers", &[m.vector.len()], &[d]));
                }
                vector.iter_mut().zip(&m.vector).for_each(|(a, b)| *a += b);
            }
            let n = members.len() as f64;
            vector.iter_mut().for_each(|v| *v /= n);
            Ok(AttributeCenter {
                vector,
                attribute,
                count: members.len(),
            })
        })
        .collect()
}

/// Mean pairwise Euclidean distance between attribute centers of the same
/// aspect, averaged over every such pair in the set. `None` if no aspect has
/// two attributes.
pub fn mean_inter_attribute_distance(pooled: &[PooledHidden]) -> Result<Option<f64>> {
    let cs = attribute_centers(pooled)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            if cs[i].attribute.aspect == cs[j].attribute.aspect {
                let d: f64 = cs[i]
                    .vector
                    .iter()
                    .zip(&cs[j].vector)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                total += d;
                pairs += 1;
            }
        }
    }
    Ok((pairs > 0).then(|| total / pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn put(g: &mut Graph, rows: &[(Vec<f64>, AttributeId)]) -> Vec<Pooled> {
        rows.iter()
            .map(|(v, label)| Pooled {
                var: g.constant(Tensor::matrix(1, v.len(), v.clone()).unwrap()),
                label: *label,
            })
            .collect()
    }

    fn eval(rows: &[(Vec<f64>, AttributeId)], f: impl Fn(&mut Graph, &[Pooled]) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let p = put(&mut g, rows);
        let v = f(&mut g, &p).unwrap();
        g.scalar(v)
    }

    fn l(aspect: usize, index: usize) -> AttributeId {
        AttributeId::new(aspect, index)
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 4]));
        let v = next_token_loss(&mut g, logits, &[0, 2, 3], &[false, true, true]).unwrap();
        assert!((g.scalar(v) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![0.0, 50.0, 0.0]).unwrap());
        let v = next_token_loss(&mut g, logits, &[1], &[true]).unwrap();
        assert!(g.scalar(v) < 1e-20);
    }

    #[test]
    fn fully_masked_is_domain_error() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            next_token_loss(&mut g, logits, &[0, 1], &[false, false]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 9.0, 9.0, 3.0, 0.0]).unwrap());
        let p = pool_hidden(&mut g, h, &[0, 2]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 0.0]);
        let one = pool_hidden(&mut g, h, &[1]).unwrap();
        assert_eq!(g.value(one).data(), &[9.0, 9.0]);
        assert!(matches!(pool_hidden(&mut g, h, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn hand_examples() {
        let two = vec![(vec![1.0, 0.0], l(0, 0)), (vec![4.0, 0.0], l(1, 0))];
        assert!((eval(&two, aspect_adaptive_loss) - 3.0).abs() < 1e-12);
        let same = vec![(vec![1.0, 2.0], l(0, 0)), (vec![1.0, 2.0], l(3, 0))];
        assert_eq!(eval(&same, aspect_adaptive_loss), 0.0);

        let coincide = vec![(vec![0.5, 0.5], l(0, 0)), (vec![0.5, 0.5], l(0, 1)), (vec![0.5, 0.5], l(0, 2))];
        assert_eq!(eval(&coincide, |g, p| attribute_exclusion_loss(g, p, 1.0)), 3.0);
        let near = vec![(vec![0.0, 0.0], l(0, 0)), (vec![0.4, 0.0], l(0, 1))];
        assert!((eval(&near, |g, p| attribute_exclusion_loss(g, p, 1.0)) - 0.6).abs() < 1e-12);
        let far = vec![(vec![0.0, 0.0], l(0, 0)), (vec![2.0, 0.0], l(0, 1))];
        assert_eq!(eval(&far, |g, p| attribute_exclusion_loss(g, p, 1.0)), 0.0);

        let spread = vec![(vec![0.0, 0.0], l(0, 0)), (vec![2.0, 0.0], l(0, 0))];
        assert!((eval(&spread, attribute_gap_loss) - 2.0).abs() < 1e-12);
        assert_eq!(eval(&coincide, attribute_gap_loss), 0.0);
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let t = total_loss(&mut g, one, Some(one), Some(one), &LossConfig::default()).unwrap();
        assert!((g.scalar(t) - 1.0).abs() < 1e-15);
        let lp = g.constant(Tensor::scalar(2.345));
        let a = g.constant(Tensor::scalar(7.0));
        let t = total_loss(&mut g, lp, Some(a), Some(a), &LossConfig::lp_only()).unwrap();
        assert_eq!(g.scalar(t), 2.345);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            w2: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    // Brute-force references: plain loops over pairs and samples.

    fn norm(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    fn mean(vs: &[&Vec<f64>]) -> Vec<f64> {
        let mut m = vec![0.0; vs[0].len()];
        for v in vs {
            for k in 0..m.len() {
                m[k] += v[k];
            }
        }
        m.iter().map(|x| x / vs.len() as f64).collect()
    }

    fn oracle_ada(rows: &[(Vec<f64>, AttributeId)]) -> f64 {
        let mut aspects: Vec<AspectId> = rows.iter().map(|r| r.1.aspect).collect();
        aspects.sort();
        aspects.dedup();
        let means: Vec<Vec<f64>> = aspects
            .iter()
            .map(|a| mean(&rows.iter().filter(|r| r.1.aspect == *a).map(|r| &r.0).collect::<Vec<_>>()))
            .collect();
        let mut s = 0.0;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                s += norm(&means[i], &means[j]);
            }
        }
        s
    }

    fn oracle_centers(rows: &[(Vec<f64>, AttributeId)], aspect: AspectId) -> Vec<(usize, Vec<f64>)> {
        let mut attrs: Vec<usize> = rows.iter().filter(|r| r.1.aspect == aspect).map(|r| r.1.index).collect();
        attrs.sort();
        attrs.dedup();
        attrs
            .iter()
            .map(|&a| {
                let members: Vec<&Vec<f64>> =
                    rows.iter().filter(|r| r.1.aspect == aspect && r.1.index == a).map(|r| &r.0).collect();
                (a, mean(&members))
            })
            .collect()
    }

    fn oracle_exclusion(rows: &[(Vec<f64>, AttributeId)], aspect: AspectId, gamma: f64) -> f64 {
        let cs = oracle_centers(rows, aspect);
        let mut s = 0.0;
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                s += (gamma - norm(&cs[i].1, &cs[j].1)).max(0.0);
            }
        }
        s
    }

    fn oracle_gap(rows: &[(Vec<f64>, AttributeId)], aspect: AspectId) -> f64 {
        let cs = oracle_centers(rows, aspect);
        let mut s = 0.0;
        for r in rows.iter().filter(|r| r.1.aspect == aspect) {
            let c = &cs.iter().find(|c| c.0 == r.1.index).unwrap().1;
            s += norm(&r.0, c);
        }
        s
    }

    fn random_batch(rng: &mut ChaCha8Rng, n_aspects: usize) -> Vec<(Vec<f64>, AttributeId)> {
        let d = rng.random_range(1..6);
        let n = rng.random_range(1..12);
        (0..n)
            .map(|_| {
                let v = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                (v, l(rng.random_range(0..n_aspects), rng.random_range(0..3)))
            })
            .collect()
    }

    #[test]
    fn losses_match_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let rows = random_batch(&mut rng, 3);
            let gamma = rng.random_range(0.1..2.0);
            assert!((eval(&rows, aspect_adaptive_loss) - oracle_ada(&rows)).abs() < 1e-10);
            let mut awa = 0.0;
            for a in 0..3 {
                let sub: Vec<_> = rows.iter().filter(|r| r.1.aspect.0 == a).cloned().collect();
                if sub.is_empty() {
                    continue;
                }
                let le = eval(&sub, |g, p| attribute_exclusion_loss(g, p, gamma));
                let lg = eval(&sub, attribute_gap_loss);
                assert!((le - oracle_exclusion(&rows, AspectId(a), gamma)).abs() < 1e-10);
                assert!((lg - oracle_gap(&rows, AspectId(a))).abs() < 1e-10);
                awa += le + lg;
            }
            assert!((eval(&rows, |g, p| attribute_aware_loss(g, p, gamma)) - awa).abs() < 1e-10);
        }
    }

    #[test]
    fn center_losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = [l(0, 0), l(0, 0), l(0, 1), l(1, 0), l(1, 2), l(1, 2)];
        let params: Vec<Tensor> = labels.iter().map(|_| Tensor::randn(&[1, 3], 0.4, &mut rng)).collect();
        let report = check_gradients(
            |g, vars| {
                let pooled: Vec<Pooled> = vars.iter().zip(&labels).map(|(&var, &label)| Pooled { var, label }).collect();
                let lada = aspect_adaptive_loss(g, &pooled)?;
                let lawa = attribute_aware_loss(g, &pooled, 1.0)?;
                let lp = g.constant(Tensor::scalar(0.0));
                total_loss(g, lp, Some(lada), Some(lawa), &LossConfig::default())
            },
            &params,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error());
    }

    #[test]
    fn plain_centers_and_distance() {
        let p = |v: Vec<f64>, a, i| PooledHidden {
            vector: v,
            label: l(a, i),
        };
        let rows = vec![p(vec![0.0, 0.0], 0, 0), p(vec![2.0, 0.0], 0, 0), p(vec![1.0, 3.0], 0, 1), p(vec![5.0, 5.0], 1, 0)];
        let cs = attribute_centers(&rows).unwrap();
        assert_eq!(cs[0].vector, vec![1.0, 0.0]);
        assert_eq!(cs[0].count, 2);
        assert_eq!(mean_inter_attribute_distance(&rows).unwrap(), Some(3.0));
        assert_eq!(mean_inter_attribute_distance(&rows[3..]).unwrap(), None);
    }

    proptest! {
        #[test]
        fn losses_nonnegative_and_ada_label_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = random_batch(&mut rng, 4);
            let ada = eval(&rows, aspect_adaptive_loss);
            let awa = eval(&rows, |g, p| attribute_aware_loss(g, p, 1.0));
            prop_assert!(ada >= 0.0 && awa >= 0.0);
            let perm = [2usize, 0, 3, 1];
            let relabeled: Vec<_> = rows.iter().map(|(v, a)| (v.clone(), l(perm[a.aspect.0], a.index))).collect();
            prop_assert!((eval(&relabeled, aspect_adaptive_loss) - ada).abs() < 1e-12);
        }

        #[test]
        fn identical_vectors_zero_aux_losses(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rows: Vec<_> = (0..6).map(|i| (v.clone(), l(i % 3, 0))).collect();
            prop_assert_eq!(eval(&rows, aspect_adaptive_loss), 0.0);
            prop_assert_eq!(eval(&rows, |g, p| attribute_aware_loss(g, p, 1.0)), 0.0);
        }
    }
}
