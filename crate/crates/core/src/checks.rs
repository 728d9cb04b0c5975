//! Self-check suites behind the `check` command: finite-difference gradient
//! checks of every tape operation and both networks, diffusion round trips,
//! and schedule consistency.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{ddim_invert_step, ddim_reverse_step, forward_marginal, predict_x0};
use crate::losses::{noise_loss, segmentation_loss};
use crate::nets::{Denoiser, ParamSet, Segmenter};
use crate::pipeline::{checkpoint_bytes, decode_checkpoint, Checkpoint, Model, PipelineConfig, PipelineError};
use crate::tensor::{finite_difference_check, finite_difference_check_at, Result as TResult, Tape, Tensor, Var};

/// Finite-difference step used by every gradient case.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for individual operations.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for whole-network losses.
pub const NET_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckCase {
    pub id: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckCase {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub cases: Vec<CheckCase>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CheckCase::passed)
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckCase> {
        self.cases.iter().filter(|c| !c.passed())
    }
}

/// `Σ w·out` with fixed random weights, so every output element matters.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> TResult<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.value(out).shape(), |_| r.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

type OpFn = fn(&mut Tape, Var, &mut ChaCha8Rng) -> TResult<Var>;

fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.5..1.5))
}

/// Each operation, with its input `x` as the differentiated argument and
/// any other operands drawn from `r`.
fn operations() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    vec![
        ("add", vec![3, 4], |t, x, r| {
            let y = t.constant(rand_tensor(&[3, 4], r));
            t.add(x, y)
        }),
        ("sub", vec![3, 4], |t, x, r| {
            let y = t.constant(rand_tensor(&[3, 4], r));
            t.sub(y, x)
        }),
        ("mul", vec![3, 4], |t, x, r| {
            let y = t.constant(rand_tensor(&[3, 4], r));
            t.mul(x, y)
        }),
        ("mul_scalar", vec![3, 4], |t, x, r| {
            let s = t.constant(Tensor::scalar(r.gen_range(-2.0..2.0)));
            t.mul(s, x)
        }),
        ("mul_self", vec![5], |t, x, _| t.mul(x, x)),
        ("div", vec![3, 4], |t, x, r| {
            let y = t.constant(Tensor::from_fn(&[3, 4], |_| r.gen_range(0.5..2.0)));
            let a = t.div(x, y)?;
            let d = t.constant(Tensor::from_fn(&[3, 4], |_| r.gen_range(-1.0..1.0)));
            let b = t.add_scalar(x, 3.0)?;
            let c = t.div(d, b)?;
            t.add(a, c)
        }),
        ("scale", vec![6], |t, x, r| t.scale(x, r.gen_range(-2.0..2.0))),
        ("add_scalar", vec![6], |t, x, r| t.add_scalar(x, r.gen_range(-2.0..2.0))),
        ("silu", vec![8], |t, x, _| t.silu(x)),
        ("sigmoid", vec![8], |t, x, _| t.sigmoid(x)),
        ("ln", vec![8], |t, x, _| {
            let s = t.mul(x, x)?;
            let p = t.add_scalar(s, 0.5)?;
            t.ln(p)
        }),
        ("clamp", vec![8], |t, x, _| {
            // Bounds well outside the inputs keep the check away from kinks.
            t.clamp(x, -5.0, 5.0)
        }),
        ("sum", vec![2, 3], |t, x, _| {
            let s = t.sum(x)?;
            t.mul(s, s)
        }),
        ("mean", vec![2, 3], |t, x, _| {
            let s = t.mean(x)?;
            t.mul(s, s)
        }),
        ("conv2d_input", vec![2, 2, 5, 5], |t, x, r| {
            let k = t.constant(rand_tensor(&[3, 2, 3, 3], r));
            let b = t.constant(rand_tensor(&[3], r));
            t.conv2d(x, k, b, 1, 1)
        }),
        ("conv2d_kernel", vec![3, 2, 3, 3], |t, k, r| {
            let x = t.constant(rand_tensor(&[2, 2, 5, 5], r));
            let b = t.constant(rand_tensor(&[3], r));
            t.conv2d(x, k, b, 1, 1)
        }),
        ("conv2d_bias", vec![3], |t, b, r| {
            let x = t.constant(rand_tensor(&[1, 2, 4, 4], r));
            let k = t.constant(rand_tensor(&[3, 2, 2, 2], r));
            t.conv2d(x, k, b, 2, 0)
        }),
        ("conv2d_strided", vec![1, 2, 6, 6], |t, x, r| {
            let k = t.constant(rand_tensor(&[2, 2, 2, 2], r));
            let b = t.constant(rand_tensor(&[2], r));
            t.conv2d(x, k, b, 2, 0)
        }),
        ("upsample_nearest", vec![1, 2, 3, 3], |t, x, _| t.upsample_nearest(x, 2)),
        ("concat_channels", vec![1, 2, 3, 3], |t, x, r| {
            let y = t.constant(rand_tensor(&[1, 1, 3, 3], r));
            let a = t.concat_channels(x, y)?;
            let b = t.concat_channels(y, x)?;
            let s = t.sum(b)?;
            let a2 = t.mul(a, a)?;
            let m = t.mean(a2)?;
            t.add(m, s)
        }),
        ("linear_input", vec![2, 4], |t, x, r| {
            let w = t.constant(rand_tensor(&[3, 4], r));
            let b = t.constant(rand_tensor(&[3], r));
            t.linear(x, w, b)
        }),
        ("linear_weight", vec![3, 4], |t, w, r| {
            let x = t.constant(rand_tensor(&[2, 4], r));
            let b = t.constant(rand_tensor(&[3], r));
            t.linear(x, w, b)
        }),
        ("linear_bias", vec![3], |t, b, r| {
            let x = t.constant(rand_tensor(&[2, 4], r));
            let w = t.constant(rand_tensor(&[3, 4], r));
            t.linear(x, w, b)
        }),
        ("add_channel_bias_input", vec![2, 3, 2, 2], |t, x, r| {
            let b = t.constant(rand_tensor(&[2, 3], r));
            t.add_channel_bias(x, b)
        }),
        ("add_channel_bias_bias", vec![2, 3], |t, b, r| {
            let x = t.constant(rand_tensor(&[2, 3, 2, 2], r));
            t.add_channel_bias(x, b)
        }),
    ]
}

/// Every operation on `trials` random inputs.
pub fn operation_gradient_cases(trials: usize, seed: u64) -> Result<Vec<CheckCase>, PipelineError> {
    let mut cases = Vec::new();
    for (name, shape, op) in operations() {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64) << 8);
            let x = rand_tensor(&shape, &mut r);
            let other_seed = r.gen::<u64>();
            let err = finite_difference_check(
                |tape, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(other_seed);
                    let out = op(tape, v, &mut r)?;
                    if tape.value(out).is_scalar() {
                        Ok(out)
                    } else {
                        weighted_sum(tape, out, other_seed ^ 1)
                    }
                },
                &x,
                FD_STEP,
            )?;
            worst = worst.max(err);
        }
        cases.push(CheckCase {
            id: format!("op/{name}"),
            error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(cases)
}

fn randomize(params: &mut ParamSet, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        let scale = 0.5 / (t.numel() as f64).sqrt().max(1.0) + 0.05;
        t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-scale..scale));
    }
}

fn sampled(numel: usize, count: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= count {
        (0..numel).collect()
    } else {
        (0..count).map(|_| r.gen_range(0..numel)).collect()
    }
}

fn net_error(e: crate::nets::NetError) -> crate::tensor::TensorError {
    match e {
        crate::nets::NetError::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}

fn loss_error(e: crate::losses::LossError) -> crate::tensor::TensorError {
    match e {
        crate::losses::LossError::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}

/// Gradient of the full denoiser noise loss on an 8×8 batch with respect to
/// `coords_per_param` sampled coordinates of every parameter and the input.
pub fn denoiser_gradient_case(seed: u64, coords_per_param: usize) -> Result<CheckCase, PipelineError> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Denoiser::new(true, &mut r);
    randomize(net.params_mut(), seed ^ 0xD0);
    let x = Tensor::randn(&[2, 1, 8, 8], &mut r);
    let y = Tensor::from_fn(&[2, 1, 8, 8], |_| f64::from(r.gen_bool(0.3)));
    let eps = Tensor::randn(&[2, 1, 8, 8], &mut r);
    let ts = [r.gen_range(1..200), r.gen_range(1..200)];
    let mut worst = 0.0f64;
    for index in 0..net.params().len() {
        let coords = sampled(net.params().get(index).numel(), coords_per_param, &mut r);
        let err = finite_difference_check_at(
            |tape, p| {
                let mut bound = net.params().bind(tape, false);
                bound.replace(index, p);
                let (xv, yv, ev) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(eps.clone()));
                let pred = net.forward(tape, &bound, xv, &ts, Some(yv)).map_err(net_error)?;
                noise_loss(tape, ev, pred).map_err(loss_error)
            },
            net.params().get(index),
            FD_STEP,
            &coords,
        )?;
        worst = worst.max(err);
    }
    let err = finite_difference_check(
        |tape, xv| {
            let bound = net.params().bind(tape, false);
            let (yv, ev) = (tape.constant(y.clone()), tape.constant(eps.clone()));
            let pred = net.forward(tape, &bound, xv, &ts, Some(yv)).map_err(net_error)?;
            noise_loss(tape, ev, pred).map_err(loss_error)
        },
        &x,
        FD_STEP,
    )?;
    Ok(CheckCase {
        id: "net/denoiser".into(),
        error: worst.max(err),
        tolerance: NET_TOLERANCE,
    })
}

/// Gradient of Dice + cross-entropy through the segmenter on an 8×8 batch.
pub fn segmenter_gradient_case(seed: u64, coords_per_param: usize) -> Result<CheckCase, PipelineError> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut seg = Segmenter::new(&mut r);
    randomize(seg.params_mut(), seed ^ 0x5E);
    let x = Tensor::randn(&[2, 1, 8, 8], &mut r);
    let y = Tensor::from_fn(&[2, 1, 8, 8], |_| f64::from(r.gen_bool(0.3)));
    let mut worst = 0.0f64;
    for index in 0..seg.params().len() {
        let coords = sampled(seg.params().get(index).numel(), coords_per_param, &mut r);
        let err = finite_difference_check_at(
            |tape, p| {
                let mut bound = seg.params().bind(tape, false);
                bound.replace(index, p);
                let xv = tape.constant(x.clone());
                let logits = seg.forward(tape, &bound, xv).map_err(net_error)?;
                segmentation_loss(tape, logits, &y).map_err(loss_error)
            },
            seg.params().get(index),
            FD_STEP,
            &coords,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckCase {
        id: "net/segmenter".into(),
        error: worst,
        tolerance: NET_TOLERANCE,
    })
}

pub fn grad_suite(seed: u64) -> Result<SuiteReport, PipelineError> {
    let mut cases = operation_gradient_cases(20, seed)?;
    cases.push(denoiser_gradient_case(seed, 3)?);
    cases.push(segmenter_gradient_case(seed, 3)?);
    Ok(SuiteReport { suite: "grad", cases })
}

/// DDIM inversion followed by reverse steps with a constant noise estimate,
/// `predict_x0` against `forward_marginal`, and checkpoint re-encoding.
pub fn roundtrip_suite(cfg: &PipelineConfig) -> Result<SuiteReport, PipelineError> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let sub = cfg.subsequence()?;
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0 = Tensor::from_fn(&[2, 1, 8, 8], |_| r.gen_range(-1.0..1.0));
    let c = Tensor::full(&[2, 1, 8, 8], r.gen_range(-1.0..1.0));

    let mut x = x0.clone();
    for pos in 0..sub.len() {
        let (a, b) = (sub.timestep(pos).expect("in range"), sub.timestep(pos + 1).expect("in range"));
        x = ddim_invert_step(&x, a, b, &c, &sched)?;
    }
    for pos in (1..=sub.len()).rev() {
        let (a, b) = (sub.timestep(pos).expect("in range"), sub.timestep(pos - 1).expect("in range"));
        x = ddim_reverse_step(&x, a, b, &c, &sched)?;
    }
    let ddim = x.max_abs_diff(&x0)?;

    let eps = Tensor::randn(&[2, 1, 8, 8], &mut r);
    let mut marginal = 0.0f64;
    for t in 1..=sched.steps() {
        let xt = forward_marginal(&x0, t, &eps, &sched)?;
        marginal = marginal.max(predict_x0(&xt, t, &eps, &sched)?.max_abs_diff(&x0)?);
    }

    let net = Denoiser::new(true, &mut r);
    let ckpt = Checkpoint {
        model: Model::Denoiser(net),
        iteration: 0,
        config: cfg.clone(),
        schedule: sched,
    };
    let first = checkpoint_bytes(&ckpt);
    let second = checkpoint_bytes(&decode_checkpoint(&first, Path::new("<memory>"))?);
    let codec = if first == second { 0.0 } else { 1.0 };

    Ok(SuiteReport {
        suite: "roundtrip",
        cases: vec![
            CheckCase {
                id: "ddim/invert-reverse-constant".into(),
                error: ddim,
                tolerance: 1e-9,
            },
            CheckCase {
                id: "diffusion/predict_x0-marginal".into(),
                error: marginal,
                tolerance: 1e-12,
            },
            CheckCase {
                id: "checkpoint/reencode".into(),
                error: codec,
                tolerance: 0.5,
            },
        ],
    })
}

/// `ᾱ_t` against an independent log-sum of `ln(1 − β_s)`, monotonicity, and
/// the DDIM subsequence shape.
pub fn schedule_suite(cfg: &PipelineConfig) -> Result<SuiteReport, PipelineError> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let sub = cfg.subsequence()?;
    let mut log_sum = 0.0;
    let mut rel = 0.0f64;
    let mut monotone = true;
    for t in 1..=sched.steps() {
        log_sum += (1.0 - sched.beta(t)?).ln();
        let ab = sched.alpha_bar(t)?;
        rel = rel.max((ab - log_sum.exp()).abs() / log_sum.exp());
        monotone &= ab < sched.alpha_bar(t - 1)? && sched.beta(t)? > 0.0 && sched.beta(t)? < 1.0;
    }
    let steps = sub.steps();
    let shape_ok = steps.len() == cfg.ddim_steps
        && steps.windows(2).all(|w| w[0] < w[1])
        && steps.last() == Some(&cfg.diffusion_steps)
        && steps[0] >= 1;
    let flag = |ok: bool| if ok { 0.0 } else { 1.0 };
    Ok(SuiteReport {
        suite: "schedule",
        cases: vec![
            CheckCase {
                id: "schedule/alpha_bar-logsum".into(),
                error: rel,
                tolerance: 1e-12,
            },
            CheckCase {
                id: "schedule/monotone".into(),
                error: flag(monotone),
                tolerance: 0.5,
            },
            CheckCase {
                id: "schedule/subsequence".into(),
                error: flag(shape_ok),
                tolerance: 0.5,
            },
        ],
    })
}
