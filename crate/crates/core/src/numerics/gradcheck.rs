//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences at every coordinate of `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor2], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(
        f,
        params,
        &GradCheckOptions {
            eps,
            tol,
            ..GradCheckOptions::default()
        },
    )
}

pub fn finite_diff_check_with<F>(
    f: F,
    params: &[Tensor2],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::Input(format!("eps must be positive, got {}", opts.eps)));
    }

    let evaluate = |values: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.leaves(values);
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::shape(
                "finite_diff_check",
                format!("objective must be 1x1, got {}x{}", v.rows(), v.cols()),
            ));
        }
        let s = v.scalar();
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {s}")));
        }
        Ok(s)
    };

    let analytic = {
        let mut tape = Tape::new();
        let vars = tape.leaves(params);
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut checks = Vec::new();
    for t in 0..params.len() {
        let n = params[t].len();
        let mut coords: Vec<usize> = match opts.coords_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();
        for i in coords {
            let original = work[t].data()[i];
            work[t].data_mut()[i] = original + opts.eps;
            let plus = evaluate(&work)?;
            work[t].data_mut()[i] = original - opts.eps;
            let minus = evaluate(&work)?;
            work[t].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[t].data()[i];
            checks.push(CoordinateCheck {
                tensor: t,
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }

    let max_rel_error = checks.iter().fold(0.0_f64, |m, c| m.max(c.rel_error));
    Ok(GradCheckReport {
        passed: max_rel_error <= opts.tol,
        max_rel_error,
        tol: opts.tol,
        checks,
    })
}
