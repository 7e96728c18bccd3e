//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{OpKind, Precision, Tape, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Largest perturbation the checker accepts.
pub const MAX_EPS: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many coordinates, sampled uniformly over all inputs.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Corrupt the backward rule of one op kind (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: None, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

impl GradCheck {
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }

    pub fn sampled(mut self, max_coords: usize, seed: u64) -> Self {
        self.max_coords = Some(max_coords);
        self.seed = seed;
        self
    }

    pub fn with_fault(mut self, fault: OpKind) -> Self {
        self.fault = Some(fault);
        self
    }

    /// Compares the tape gradient of scalar `f` with respect to each input
    /// against central differences and returns the largest relative error.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport, NumericsError>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
    {
        if !(self.eps > 0.0 && self.eps <= MAX_EPS) {
            return Err(NumericsError::Contract(format!("grad_check: eps {} outside (0, {}]", self.eps, MAX_EPS)));
        }
        let mut tape = Tape::with_precision(Precision::F64);
        if let Some(kind) = self.fault {
            tape.inject_fault(kind);
        }
        let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let total: usize = inputs.iter().map(Tensor::len).sum();
        let coords: Vec<usize> = match self.max_coords {
            Some(m) if m < total => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut picked = sample(&mut rng, total, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..total).collect(),
        };

        let eval = |perturbed: &[Tensor]| -> Result<f64, NumericsError> {
            let mut t = Tape::with_precision(Precision::F64);
            let vs = perturbed.iter().map(|p| t.constant(p.clone())).collect::<Result<Vec<_>, _>>()?;
            let l = f(&mut t, &vs)?;
            Ok(t.value(l).item())
        };

        let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
        let mut work = inputs.to_vec();
        for flat in coords {
            let (which, offset) = locate(inputs, flat);
            let orig = work[which].data()[offset];
            work[which].data_mut()[offset] = orig + self.eps;
            let plus = eval(&work)?;
            work[which].data_mut()[offset] = orig - self.eps;
            let minus = eval(&work)?;
            work[which].data_mut()[offset] = orig;
            let numeric = (plus - minus) / (2.0 * self.eps);
            let err = relative_error(analytic[which].data()[offset], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((which, offset));
            }
        }
        Ok(report)
    }
}

fn locate(inputs: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.len() {
            return (i, flat);
        }
        flat -= t.len();
    }
    unreachable!("coordinate outside inputs")
}

/// Convenience wrapper: full check at `eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    GradCheck::with_eps(eps).run(f, inputs).map(|r| r.max_rel_err)
}
