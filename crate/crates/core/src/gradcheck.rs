//! Finite-difference verification of whole-model gradients.

use cmlp_tensor::{Mode, Rng, Var};
use serde::Serialize;

use crate::data::{generate_indexed, SynthConfig};
use crate::error::Result;
use crate::model::{CrowdMlp, ModelConfig};
use crate::params::Session;
use crate::split_counting::{split_counting_loss, SplitBatch};
use crate::train::{recalibrate_bn, stack_images};

/// Smallest step tried, relative to the nominal one, when a stencil crosses a
/// branch of a piecewise primitive.
const MIN_STEP_RATIO: f64 = 1e-3;

/// Statistics from a single image are degenerate, so calibration uses a few.
pub const CALIBRATION_SCENES: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Tensors with at most this many entries are checked exhaustively;
    /// larger ones on this many sampled coordinates.
    pub coords_per_tensor: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Coordinates whose error reaches this value are listed in the report.
    pub report_above: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 32,
            mode: Mode::Eval,
            seed: 0,
            report_above: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub tensors: usize,
    pub coords: usize,
    /// Coordinates whose stencil straddled a relu, abs or pooling switch at
    /// the nominal step and were re-differenced with a smaller one.
    pub refined: usize,
    /// Coordinates still straddling a switch at the smallest step.
    pub kinked: usize,
    /// Checked coordinates with a nonzero analytic gradient; zero means the
    /// loss was locally constant and the check proved nothing.
    pub nonzero: usize,
    pub offenders: Vec<Offender>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backpropagated parameter gradients of `loss` with central
/// differences, `|a − n| / (|a| + 1e-8)`. Every evaluation uses a session
/// seeded identically, so train-mode dropout masks repeat exactly.
///
/// A relu network is only piecewise smooth, and a bias shifts thousands of
/// activations at once, so some stencils straddle a switch point. Such a
/// coordinate is re-differenced with a step ten times smaller, down to
/// `step * 1e-3`, until both probes take the same branches as the unperturbed
/// pass.
pub fn check_model_gradients<F>(
    model: &mut CrowdMlp,
    loss: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&CrowdMlp, &mut Session) -> Result<Var>,
{
    let eval = |model: &CrowdMlp| -> Result<(f64, u64)> {
        let mut s = model.session(opts.mode, Rng::new(opts.seed));
        let l = loss(model, &mut s)?;
        Ok((s.value(l).data()[0], s.tape.branch_signature()))
    };
    let (grads, base) = {
        let mut s = model.session(opts.mode, Rng::new(opts.seed));
        let l = loss(model, &mut s)?;
        (s.gradients(l)?, s.tape.branch_signature())
    };
    let mut pick = Rng::new(opts.seed ^ 0x9e37_79b9);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        tensors: 0,
        coords: 0,
        refined: 0,
        kinked: 0,
        nonzero: 0,
        offenders: Vec::new(),
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).numel();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            pick.shuffle(&mut all);
            all.truncate(opts.coords_per_tensor);
            all
        };
        let analytic = grads.get(id).expect("every parameter has a gradient").clone();
        for k in coords {
            let orig = model.params.get(id).data()[k];
            let mut h = opts.step;
            let numeric = loop {
                model.params.get_mut(id).data_mut()[k] = orig + h;
                let plus = eval(model);
                model.params.get_mut(id).data_mut()[k] = orig - h;
                let minus = eval(model);
                model.params.get_mut(id).data_mut()[k] = orig;
                let ((fp, sp), (fm, sm)) = (plus?, minus?);
                let smooth = sp == base && sm == base;
                if smooth || h <= opts.step * MIN_STEP_RATIO {
                    if !smooth {
                        report.kinked += 1;
                    } else if h < opts.step {
                        report.refined += 1;
                    }
                    break (fp - fm) / (2.0 * h);
                }
                h *= 0.1;
            };
            let a = analytic.data()[k];
            if a != 0.0 {
                report.nonzero += 1;
            }
            let err = (a - numeric).abs() / (a.abs() + 1e-8);
            // A non-finite value is a failure, never a silent pass.
            let err = if err.is_finite() { err } else { f64::INFINITY };
            if err >= opts.report_above {
                report.offenders.push(Offender {
                    param: model.params.name(id).to_string(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
            if err > report.max_rel_error || report.coords == 0 {
                report.max_rel_error = err;
                report.worst = (model.params.name(id).to_string(), k);
            }
            report.coords += 1;
        }
        report.tensors += 1;
    }
    Ok(report)
}

/// Gradient check of the batch split-counting loss for a freshly initialized
/// model of `config`, on `batch` synthetic scenes with one sampled mask each.
///
/// Normalization running statistics are first calibrated on at least
/// [`CALIBRATION_SCENES`] scenes, the checked ones first.
/// At initialization they are exactly zero mean and unit variance, which with
/// zero biases maps the zeroed region of a split image exactly onto the relu
/// switch point, where central differences are meaningless.
///
/// The scenes hold at most one object. That keeps the loss near unit scale,
/// so round-off in the differenced forward passes stays well below the
/// smallest gradients being compared.
pub fn check_split_counting(
    config: &ModelConfig,
    batch: usize,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut model = CrowdMlp::new(config)?;
    let synth = SynthConfig {
        width: config.input_size,
        height: config.input_size,
        count_min: 0,
        count_max: 1,
        seed: opts.seed,
        ..SynthConfig::default()
    };
    let scenes = (0..batch.max(CALIBRATION_SCENES) as u64)
        .map(|i| generate_indexed(&synth, i))
        .collect::<Result<Vec<_>>>()?;
    recalibrate_bn(&mut model, &scenes.iter().collect::<Vec<_>>(), CALIBRATION_SCENES, opts.seed)?;
    let scenes = &scenes[..batch];
    let images = stack_images(&scenes.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let counts: Vec<f64> = scenes.iter().map(|s| s.count).collect();
    let split = SplitBatch::sample(&images, &counts, &mut Rng::derive(opts.seed, 5))?;
    check_model_gradients(
        &mut model,
        |m, s| Ok(split_counting_loss(m, s, &split, true)?.loss),
        opts,
    )
}
