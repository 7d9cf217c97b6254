//! Central finite-difference checker used by the test suites.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl GradCheck {
    /// Compares `backward` against `(f(x + eps) - f(x - eps)) / 2 eps` for
    /// every input of the scalar function `f`.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::with_seed(self.seed);
            let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).data()[0])
        };

        let mut tape = Tape::with_seed(self.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(TensorError::Usage("gradient check needs a scalar output".into()));
        }
        let grads = tape.backward(out)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let mut report = GradReport::default();
        let mut work = inputs.to_vec();
        for (k, &v) in vars.iter().enumerate() {
            let n = inputs[k].numel();
            let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
                _ => (0..n).collect(),
            };
            for i in coords {
                let orig = work[k].data()[i];
                work[k].data_mut()[i] = orig + self.eps;
                let plus = eval(&work)?;
                work[k].data_mut()[i] = orig - self.eps;
                let minus = eval(&work)?;
                work[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let err = rel_err(analytic[i], numeric);
                report.coords += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst = Some((k, i, analytic[i], numeric));
                }
            }
        }
        Ok(report)
    }
}
