//! Central finite-difference verification of tape gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked fully.
    pub max_coords_per_param: usize,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_param: 24,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − fd| / max(1, |analytic|, |fd|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, row, col)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize)>,
    pub coords_checked: usize,
}

/// Compares the tape gradient of the scalar `f(params)` with central
/// differences. `f` receives a fresh tape with every parameter registered as
/// a trainable leaf, in order, and must be deterministic.
pub fn grad_check<F>(params: &[Array2<f64>], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Array2<f64>], fault: Option<Fault>| -> Result<(Tape<f64>, Vec<Tensor>, Tensor)> {
        let mut tape = Tape::with_fault(fault);
        let leaves: Vec<Tensor> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        if tape.shape(out) != (1, 1) {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = eval(params, opts.fault)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Array2<f64>> = leaves.iter().map(|&l| grads.wrt(&tape, l)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let cols = p.ncols();
        for flat in coords {
            let (r, c) = (flat / cols, flat % cols);
            let orig = work[pi][[r, c]];
            work[pi][[r, c]] = orig + opts.eps;
            let plus = scalar_of(eval(&work, None)?);
            work[pi][[r, c]] = orig - opts.eps;
            let minus = scalar_of(eval(&work, None)?);
            work[pi][[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi][[r, c]];
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, r, c));
            }
        }
    }
    Ok(report)
}

fn scalar_of((tape, _, out): (Tape<f64>, Vec<Tensor>, Tensor)) -> f64 {
    tape.scalar(out)
}
