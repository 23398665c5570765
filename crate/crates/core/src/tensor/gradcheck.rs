//! Central finite-difference gradient checking (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::dense::Tensor;
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Half-width of the central difference; must lie in `(0, 1e-2]`.
    pub eps: f64,
    /// Tensors with more elements than this are checked on a random subset.
    pub max_coords_per_tensor: usize,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: 32,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(tensor index, flat coordinate)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` rebuilds the computation on a fresh tape from leaf variables for
/// `params` (in order) and returns a scalar.
pub fn gradcheck<F>(f: F, params: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(Error::Contract(format!(
            "gradcheck eps {} outside (0, 1e-2]",
            opts.eps
        )));
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let y = tape.value(out).item();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("gradcheck: function value {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("gradcheck: non-finite function value".into()));
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient");
        let numel = params[pi].numel();
        let coords: Vec<usize> = if numel <= opts.max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
