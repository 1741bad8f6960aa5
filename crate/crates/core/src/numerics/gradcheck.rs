use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (sampled), or all when `None`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// (parameter name, coordinate) pairs whose perturbed loss was not finite.
    pub non_finite: Vec<(String, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_error() <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss_fn` against central finite differences
/// for every parameter in `params`.
///
/// `loss_fn` must be a pure function of the parameter values.
pub fn grad_check<F>(params: &mut ParamSet, opts: &GradCheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.zero_grad();
    tape.accumulate_param_grads(&mut analytic, 1.0)?;

    let mut eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(ps, &mut t)?;
        t.scalar(l)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        params: Vec::new(),
        non_finite: Vec::new(),
        tol: opts.tol,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let grads = analytic.get(id).grad().unwrap_or(&[]).to_vec();
        let name = params.name(id).to_string();
        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + opts.eps;
            let plus = eval(params);
            params.get_mut(id).data_mut()[c] = orig - opts.eps;
            let minus = eval(params);
            params.get_mut(id).data_mut()[c] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(Error::NonFinite { .. }), _) | (_, Err(Error::NonFinite { .. })) | (Ok(_), Ok(_)) => {
                    report.non_finite.push((name.clone(), c));
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grads.get(c).copied().unwrap_or(0.0);
            let rel = relative_error(a, numeric, opts.floor);
            if rel >= check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = c;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(&mut ps, &GradCheckOptions::default(), |ps, tape| {
            let v = tape.param(ps, x);
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        })
        .unwrap();
        let p = &report.params[0];
        assert!((p.analytic - 6.0).abs() < 1e-12);
        assert!((p.numeric - 6.0).abs() < 1e-8);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // Scaling by a constant the tape does not see breaks agreement.
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::scalar(2.0)).unwrap();
        let report = grad_check(&mut ps, &GradCheckOptions::default(), |ps, tape| {
            let v = tape.param(ps, x);
            let val = ps.get(x).data()[0];
            let frozen = tape.constant(Tensor::scalar(val))?;
            let p = tape.mul(v, frozen)?;
            tape.sum(p)
        })
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::scalar(1.0)).unwrap();
        let opts = GradCheckOptions {
            eps: 0.0,
            ..Default::default()
        };
        assert!(grad_check(&mut ps, &opts, |_, _| unreachable!()).is_err());
    }
}
