//! Central finite-difference checks of reverse-mode gradients.
//!
//! The relative error of an entry is `|a − n| / max(|a|, |n|, floor)`,
//! where `a` is the analytic and `n` the numeric derivative. The floor
//! keeps entries whose true derivative is (close to) zero from being
//! judged on rounding noise alone: with `h = 1e-6` the central difference
//! of a loss of order one carries an absolute error of a few `1e-9`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::PointCloud;
use crate::nn::mix_seed;
use crate::segnet::{loss, SegModel};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every `i`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Entries checked per parameter block; `None` checks all of them.
    pub samples: Option<usize>,
    /// Picks the sampled entries.
    pub seed: u64,
    /// Deliberately break a backward rule (harness self-test).
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
            samples: None,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl BlockReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} checked={} max_rel_error={:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error
        )
    }
}

/// Compares the gradient of the full training loss on `cloud` with
/// central differences, block by block.
pub fn check_model(model: &SegModel, cloud: &PointCloud, sample_seed: u64, opts: &GradcheckOptions) -> Result<Vec<BlockReport>> {
    let labels = cloud.labels().ok_or(crate::Error::Empty("labels"))?;
    let lambda = model.config().lambda_dict;

    let mut tape = Tape::new();
    tape.set_faulty_backward(opts.corrupt_backward);
    let bound = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &bound, cloud, sample_seed)?;
    let total = loss(&mut tape, out.logits, labels, &out.decorrelation, lambda)?;
    tape.backward(total)?;

    let mut probe = model.clone();
    let eval = |m: &SegModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.params().bind_frozen(&mut tape);
        let out = m.forward(&mut tape, &bound, cloud, sample_seed)?;
        let l = loss(&mut tape, out.logits, labels, &out.decorrelation, lambda)?;
        Ok(tape.value(l).item())
    };

    let mut reports = Vec::new();
    for (b, (id, param)) in model.params().iter().enumerate() {
        let n = param.tensor.len();
        let zeros = vec![0.0; n];
        let analytic = tape.grad(bound.var(id)).unwrap_or(&zeros);
        let entries = match opts.samples {
            Some(s) if s < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, b as u64]));
                let mut v = rand::seq::index::sample(&mut rng, n, s).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = param.tensor.data()[i];
            probe.params_mut().get_mut(id).tensor.data_mut()[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe.params_mut().get_mut(id).tensor.data_mut()[i] = orig - opts.step;
            let down = eval(&probe)?;
            probe.params_mut().get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric, opts.floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        reports.push(BlockReport {
            name: param.name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(reports)
}
