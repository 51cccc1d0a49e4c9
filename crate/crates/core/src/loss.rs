//! Classification losses expressed as graph operations.
//!
//! All public losses return the batch mean. Attacks use the summed form so
//! that each row's input gradient is the gradient of that row's own loss.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};

/// Probabilities are floored here before taking logs in the KL terms.
pub const PROB_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Reduction {
    Mean,
    Sum,
}

fn rows_and_classes(g: &Graph, op: &'static str, logits: Var) -> Result<(usize, usize)> {
    match g.shape(logits) {
        [b, k] => Ok((*b, *k)),
        s => Err(shape_err(op, format!("expected [batch, K] logits, got {s:?}"))),
    }
}

fn reduce(g: &mut Graph, total: Var, rows: usize, red: Reduction) -> Var {
    match red {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, (1.0f64 / rows as f64) as f32),
    }
}

pub(crate) fn cross_entropy_with(
    g: &mut Graph,
    logits: Var,
    y: &[usize],
    red: Reduction,
) -> Result<Var> {
    let (rows, _) = rows_and_classes(g, "cross_entropy", logits)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, y)?;
    let total = g.sum(picked);
    let neg = g.scale(total, -1.0);
    Ok(reduce(g, neg, rows, red))
}

pub(crate) fn kl_div_with(g: &mut Graph, p_logits: Var, q_logits: Var, red: Reduction) -> Result<Var> {
    let (rows, _) = rows_and_classes(g, "kl_div", p_logits)?;
    if g.shape(p_logits) != g.shape(q_logits) {
        return Err(shape_err(
            "kl_div",
            format!("{:?} vs {:?}", g.shape(p_logits), g.shape(q_logits)),
        ));
    }
    let p = g.softmax(p_logits)?;
    let log_p = g.log_clamped(p, PROB_FLOOR)?;
    let q = g.softmax(q_logits)?;
    let log_q = g.log_clamped(q, PROB_FLOOR)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(reduce(g, total, rows, red))
}

/// Mean over the batch of `-log softmax(logits)[y]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, y: &[usize]) -> Result<Var> {
    cross_entropy_with(g, logits, y, Reduction::Mean)
}

/// `KL(softmax(p_logits) || softmax(q_logits))`, averaged over rows.
/// Gradients flow into both arguments.
pub fn kl_div(g: &mut Graph, p_logits: Var, q_logits: Var) -> Result<Var> {
    kl_div_with(g, p_logits, q_logits, Reduction::Mean)
}

/// `KL(U || softmax(logits))` with `U` uniform over the K classes:
/// `-ln K - (1/K) Σ_k log p_k` per row, averaged over rows.
pub fn kl_uniform(g: &mut Graph, logits: Var) -> Result<Var> {
    let (rows, k) = rows_and_classes(g, "kl_uniform", logits)?;
    if k < 2 {
        return Err(shape_err("kl_uniform", "needs at least 2 classes"));
    }
    let p = g.softmax(logits)?;
    let log_p = g.log_clamped(p, PROB_FLOOR)?;
    let total = g.sum(log_p);
    let scaled = g.scale(total, (-1.0 / (k as f64 * rows as f64)) as f32);
    Ok(g.add_scalar(scaled, -(k as f64).ln() as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(g: &mut Graph, rows: &[Vec<f32>]) -> Var {
        g.variable(&Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn ce_uniform_is_ln_k() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![0.0; 10], vec![3.0; 10]]);
        let ce = cross_entropy(&mut g, l, &[0, 7]).unwrap();
        assert!((g.scalar(ce) as f64 - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_two_class_direct_formula() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![1.0, 0.0]]);
        let ce = cross_entropy(&mut g, l, &[0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(ce) as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn ce_vanishes_with_huge_margin() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![200.0, 0.0, 0.0]]);
        let ce = cross_entropy(&mut g, l, &[0]).unwrap();
        assert!(g.scalar(ce).abs() < 1e-6);
    }

    #[test]
    fn ce_label_out_of_range() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![1.0, 0.0]]);
        assert!(cross_entropy(&mut g, l, &[2]).is_err());
    }

    #[test]
    fn kl_identity_and_known_value() {
        let mut g = Graph::new();
        let a = logits(&mut g, &[vec![0.3, -1.2, 2.0]]);
        let same = kl_div(&mut g, a, a).unwrap();
        assert_eq!(g.scalar(same), 0.0);

        // p = (0.75, 0.25) from logits (ln 3, 0); q uniform
        let p = logits(&mut g, &[vec![3f32.ln(), 0.0]]);
        let q = logits(&mut g, &[vec![0.0, 0.0]]);
        let pq = kl_div(&mut g, p, q).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((g.scalar(pq) as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.130812).abs() < 1e-6);
        let qp = kl_div(&mut g, q, p).unwrap();
        assert!((g.scalar(qp) - g.scalar(pq)).abs() > 1e-3);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut g = Graph::new();
        let a = logits(&mut g, &[vec![0.0, 0.0]]);
        let b = logits(&mut g, &[vec![0.0, 0.0, 0.0]]);
        assert!(kl_div(&mut g, a, b).is_err());
    }

    #[test]
    fn kl_uniform_values() {
        let mut g = Graph::new();
        let u = logits(&mut g, &[vec![1.5; 4]]);
        let v = kl_uniform(&mut g, u).unwrap();
        assert!(g.scalar(v).abs() < 1e-6);
        g.backward(v).unwrap();
        assert!(g.grad(u).unwrap().iter().all(|d| d.abs() < 1e-6));

        // p = (1 - 1e-12, 1e-12)
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![0.0, (1e-12f64).ln() as f32]]);
        let v = kl_uniform(&mut g, l).unwrap();
        let expected = 0.5 * (0.5f64.ln() + (0.5f64 / 1e-12).ln());
        assert!((g.scalar(v) as f64 - expected).abs() < 1e-3, "{}", g.scalar(v));
        assert!((expected - 13.12).abs() < 0.01);
    }

    #[test]
    fn kl_uniform_is_clamped_for_extreme_logits() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![0.0, -1000.0]]);
        let v = kl_uniform(&mut g, l).unwrap();
        let bound = -(2f64).ln() - 0.5 * (1e-12f64).ln();
        assert!((g.scalar(v) as f64) <= bound + 1e-3);
    }
}
