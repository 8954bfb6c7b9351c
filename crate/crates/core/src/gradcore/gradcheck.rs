//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::ModelParams;
use super::tensor::Tensor;

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
    pub probes: usize,
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub probe_count: usize,
    pub step: f64,
    /// Magnitudes below this are treated as this in the relative error denominator.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            probe_count: 200,
            step: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `loss_fn`'s analytic gradient with central differences.
///
/// Probes are spread round-robin across tensors (random coordinate within
/// each) so every parameter tensor is visited when `probe_count` allows.
pub fn grad_check<F>(loss_fn: F, params: &ModelParams<f64>, opts: GradCheckOptions) -> GradCheckReport
where
    F: Fn(&ModelParams<f64>) -> (f64, Vec<Tensor<f64>>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.tensors.len(), "one gradient per tensor");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        probes: 0,
    };
    let n_tensors = params.tensors.len();
    for probe in 0..opts.probe_count {
        let ti = probe % n_tensors;
        let len = params.tensors[ti].value.len();
        let ci = rng.random_range(0..len);
        let orig = params.tensors[ti].value.data()[ci];

        work.tensors[ti].value.data_mut()[ci] = orig + opts.step;
        let (plus, _) = loss_fn(&work);
        work.tensors[ti].value.data_mut()[ci] = orig - opts.step;
        let (minus, _) = loss_fn(&work);
        work.tensors[ti].value.data_mut()[ci] = orig;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[ti].data()[ci];
        let err = relative_error(a, numeric, opts.abs_floor);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        report.probes += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((params.tensors[ti].name.clone(), ci, a, numeric));
        }
    }
    report
}
