//! Gated relevance scoring, the contrastive objective and training.

mod train;

pub use train::{evaluate, evaluate_with_summaries, train, EpochLog, EvalOutput, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};
use crate::numerics::kernels::{gelu, gemm_nn, gemm_nt, log_sum_exp, softmax_in_place};
use crate::numerics::{Tape, Tensor, Var};

/// `K = flatten(A·Bᵀ)`, row-major over (user code, candidate code).
pub fn match_scores(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let m = tape.matmul_nt(a, b)?;
    tape.flatten(m)
}

#[derive(Debug, Clone, Copy)]
pub struct GatedScore {
    /// `1 × 1`
    pub score: Var,
    /// `1 × mn`
    pub k: Var,
    /// `1 × mn`
    pub w_p: Var,
}

/// `s = softmax(flatten(A·gelu(B·W_s)ᵀ)) · flatten(A·Bᵀ)`.
pub fn gated_score(tape: &mut Tape, a: Var, b: Var, w_s: Var) -> Result<GatedScore> {
    let k = match_scores(tape, a, b)?;
    let bw = tape.matmul(b, w_s)?;
    let gate = tape.gelu(bw)?;
    let g = tape.matmul_nt(a, gate)?;
    let g = tape.flatten(g)?;
    let w_p = tape.softmax(g, None)?;
    let prod = tape.mul(w_p, k)?;
    let s = tape.sum(prod)?;
    let score = tape.reshape(s, &[1, 1])?;
    Ok(GatedScore { score, k, w_p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub k: Vec<f64>,
    pub w_p: Vec<f64>,
    pub s: f64,
}

/// Tape-free [`gated_score`] with the same floating-point operation order.
pub fn gated_score_values(a: &Tensor, b: &Tensor, w_s: &Tensor) -> Result<ScoreBreakdown> {
    let (m, d) = (a.rows(), a.cols());
    let n = b.rows();
    if b.cols() != d || w_s.shape() != [d, d] {
        return Err(Error::dim(format!(
            "gated score with A {:?}, B {:?}, W_s {:?}",
            a.shape(),
            b.shape(),
            w_s.shape()
        )));
    }
    let mut k = vec![0.0; m * n];
    gemm_nt(a.data(), b.data(), &mut k, m, d, n);
    let mut bw = vec![0.0; n * d];
    gemm_nn(b.data(), w_s.data(), &mut bw, n, d, d);
    bw.iter_mut().for_each(|v| *v = gelu(*v));
    let mut w_p = vec![0.0; m * n];
    gemm_nt(a.data(), &bw, &mut w_p, m, d, n);
    softmax_in_place(&mut w_p, None);
    let s = w_p.iter().zip(&k).map(|(w, x)| w * x).sum();
    Ok(ScoreBreakdown { k, w_p, s })
}

/// `−log softmax(scores)[pos_index]` over a `1 × (R+1)` row.
pub fn nce_loss(tape: &mut Tape, scores: Var, pos_index: usize) -> Result<Var> {
    let n = tape.value(scores).numel();
    if n < 2 {
        return Err(Error::config("contrastive loss needs at least one negative"));
    }
    let row = tape.reshape(scores, &[1, n])?;
    tape.cross_entropy(row, &[pos_index])
}

/// Plain-value [`nce_loss`].
pub fn nce_value(scores: &[f64], pos_index: usize) -> Result<f64> {
    if scores.len() < 2 || pos_index >= scores.len() {
        return Err(Error::config("contrastive loss needs at least one negative and a valid positive"));
    }
    Ok(log_sum_exp(scores) - scores[pos_index])
}

/// `nce + λ·sum_loss`; exactly `nce` when the summary term is absent.
pub fn total_loss(tape: &mut Tape, nce: Var, sum_loss: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda {lambda} is negative")));
    }
    match sum_loss {
        None => Ok(nce),
        Some(s) => {
            let scaled = tape.scale(s, lambda)?;
            tape.add(nce, scaled)
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, ParamSet};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn scalar_gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    /// The same score computed entry by entry with plain loops.
    fn scalar_oracle(a: &Tensor, b: &Tensor, ws: &Tensor) -> f64 {
        let (m, n, d) = (a.rows(), b.rows(), a.cols());
        let mut gate = vec![vec![0.0; d]; n];
        for j in 0..n {
            for c in 0..d {
                let mut acc = 0.0;
                for e in 0..d {
                    acc += b.get(j, e) * ws.get(e, c);
                }
                gate[j][c] = scalar_gelu(acc);
            }
        }
        let mut logits = Vec::new();
        let mut kk = Vec::new();
        for i in 0..m {
            for j in 0..n {
                logits.push((0..d).map(|c| a.get(i, c) * gate[j][c]).sum::<f64>());
                kk.push((0..d).map(|c| a.get(i, c) * b.get(j, c)).sum::<f64>());
            }
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        logits.iter().zip(&kk).map(|(l, k)| (l - mx).exp() / z * k).sum()
    }

    #[test]
    fn match_score_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let b = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]])).unwrap();
        let k = match_scores(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(k).data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let bad = tape.constant(t(&[&[1.0, 0.0, 0.0]])).unwrap();
        assert!(match_scores(&mut tape, a, bad).is_err());
    }

    #[test]
    fn single_codes_score_is_the_inner_product() {
        let a = t(&[&[0.3, -2.0, 1.5]]);
        let b = t(&[&[1.1, 0.4, -0.6]]);
        let ws = Tensor::randn(&[3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let r = gated_score_values(&a, &b, &ws).unwrap();
        assert_eq!(r.w_p, vec![1.0]);
        assert!((r.s - (0.3 * 1.1 - 2.0 * 0.4 - 1.5 * 0.6)).abs() < 1e-12);
    }

    #[test]
    fn zero_gate_gives_mean_of_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = gated_score_values(&a, &b, &Tensor::zeros(&[4, 4])).unwrap();
        let mean = r.k.iter().sum::<f64>() / 6.0;
        assert!((r.s - mean).abs() < 1e-12);
        assert!(r.w_p.iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn tape_and_values_agree_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Tensor::randn(&[2, 5], 1.0, &mut rng);
            let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let ws = Tensor::randn(&[5, 5], 1.0, &mut rng);
            let v = gated_score_values(&a, &b, &ws).unwrap();
            let mut tape = Tape::new();
            let (av, bv, wv) = (
                tape.constant(a.clone()).unwrap(),
                tape.constant(b.clone()).unwrap(),
                tape.constant(ws.clone()).unwrap(),
            );
            let g = gated_score(&mut tape, av, bv, wv).unwrap();
            assert_eq!(tape.scalar(g.score).unwrap(), v.s);
            assert_eq!(tape.value(g.w_p).data(), &v.w_p[..]);
            assert!((v.s - scalar_oracle(&a, &b, &ws)).abs() < 1e-9);
            assert!((v.w_p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nce_examples() {
        assert!((nce_value(&[0.7; 5], 0).unwrap() - 5f64.ln()).abs() < 1e-12);
        let want = (1.0 + 2.0 * (-2f64).exp()).ln();
        assert!((nce_value(&[2.0, 0.0, 0.0], 0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.23954).abs() < 1e-5);
        assert!(nce_value(&[800.0, 0.0, 0.0], 0).unwrap() < 1e-300);
        assert!(nce_value(&[1.0], 0).is_err());

        let mut tape = Tape::new();
        let s = tape.constant(t(&[&[2.0, 0.0, 0.0]])).unwrap();
        let l = nce_loss(&mut tape, s, 0).unwrap();
        assert!((tape.scalar(l).unwrap() - want).abs() < 1e-15);
        let one = tape.constant(t(&[&[2.0]])).unwrap();
        assert!(nce_loss(&mut tape, one, 0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let nce = tape.constant(Tensor::scalar(1.0)).unwrap();
        let sum = tape.constant(Tensor::scalar(2.0)).unwrap();
        let l = total_loss(&mut tape, nce, Some(sum), 0.05).unwrap();
        assert!((tape.scalar(l).unwrap() - 1.1).abs() < 1e-15);
        let l = total_loss(&mut tape, nce, Some(sum), 0.0).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 1.0);
        let l = total_loss(&mut tape, nce, None, 0.05).unwrap();
        assert_eq!(l, nce);
        assert!(total_loss(&mut tape, nce, Some(sum), -1.0).is_err());
    }

    #[test]
    fn gated_score_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::randn(&[2, 4], 1.0, &mut rng)).unwrap();
        let b = ps.add("b", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let w = ps.add("w", Tensor::randn(&[4, 4], 1.0, &mut rng)).unwrap();
        let report = grad_check(&mut ps, &GradCheckOptions::default(), |ps, tape| {
            let (av, bv, wv) = (tape.param(ps, a), tape.param(ps, b), tape.param(ps, w));
            Ok(gated_score(tape, av, bv, wv)?.score)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn permuting_single_code_candidates_keeps_scores() {
        // m = 1: reordering B rows permutes K and W_p together, so s is unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let ws = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = [2, 0, 1].iter().map(|&r| b.row(r).to_vec()).collect();
        let bp = Tensor::from_rows(&rows).unwrap();
        let s1 = gated_score_values(&a, &b, &ws).unwrap().s;
        let s2 = gated_score_values(&a, &bp, &ws).unwrap().s;
        assert!((s1 - s2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn nce_is_shift_invariant(scores in prop::collection::vec(-20.0f64..20.0, 2..8), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let a = nce_value(&scores, 0).unwrap();
            let b = nce_value(&shifted, 0).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn random_oracle_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (m, n, d) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..6));
            let a = Tensor::randn(&[m, d], 1.0, &mut rng);
            let b = Tensor::randn(&[n, d], 1.0, &mut rng);
            let ws = Tensor::randn(&[d, d], 1.0, &mut rng);
            let v = gated_score_values(&a, &b, &ws).unwrap();
            assert!((v.s - scalar_oracle(&a, &b, &ws)).abs() < 1e-9);
        }
    }
}
