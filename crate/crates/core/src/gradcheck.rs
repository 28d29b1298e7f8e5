//! Central-difference verification of analytic gradients.

use crate::autograd::{Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter index, flat coordinate, analytic, numeric) at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// |a − c| / max(|a|, |c|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of `params`.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// scalar. With `samples = Some(k)`, at most `k` coordinates per parameter are
/// checked, drawn from `seed`; otherwise every coordinate is.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(contract_err!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        ));
    }
    let eval = |ps: &[Tensor<f64>], track: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.leaf(&p.clone().with_requires_grad(track)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss);
        if value.len() != 1 {
            return Err(contract_err!("grad_check: function must return a scalar"));
        }
        let v = value[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: non-finite loss {v}")));
        }
        if !track {
            return Ok((v, vec![]));
        }
        tape.backward(loss)?;
        Ok((
            v,
            vars.iter()
                .map(|&x| tape.grad(x).map(<[f64]>::to_vec))
                .collect(),
        ))
    };

    let (_, analytic) = eval(params, true)?;
    let mut rng = Rng::new(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = match samples {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + h;
            let (fp, _) = eval(&work, false)?;
            work[pi].data_mut()[c] = orig - h;
            let (fm, _) = eval(&work, false)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g[c]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c, a, numeric));
            }
        }
    }
    Ok(report)
}
