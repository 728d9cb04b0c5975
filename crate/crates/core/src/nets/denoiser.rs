use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, Init, Initializer, Linear, INJECTION_POINTS, INJECTION_WIDTHS};
use super::params::{Bound, ParamSet};
use super::{check_spatial, NetError};
use crate::tensor::{Tape, Tensor, Var};

/// Width of the timestep embedding.
pub const TIME_EMBED_DIM: usize = 64;

/// Sin/cos features of `t` at geometrically spaced frequencies followed by
/// two affine+silu layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

/// `[N, dim]` matrix of `sin(t·ω_i), cos(t·ω_i)` with `ω_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_features(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((t * w).sin(), (t * w).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("feature matrix size")
}

impl TimestepEmbedding {
    fn build<R: Rng + ?Sized>(params: &mut ParamSet, init: &mut Initializer<'_, R>, dim: usize) -> Self {
        assert!(dim.is_multiple_of(2), "embedding width must be even");
        Self {
            dim,
            fc1: Linear::build(params, init, "time.fc1", dim, dim),
            fc2: Linear::build(params, init, "time.fc2", dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, tape: &mut Tape, b: &Bound, timesteps: &[usize]) -> Result<Var, NetError> {
        let f = tape.constant(sinusoidal_features(timesteps, self.dim));
        let h = self.fc1.apply(tape, b, f)?;
        let h = tape.silu(h)?;
        let h = self.fc2.apply(tape, b, h)?;
        Ok(tape.silu(h)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    backbone: Backbone,
    time: TimestepEmbedding,
    projections: [Linear; INJECTION_POINTS],
}

impl Layout {
    fn build<R: Rng + ?Sized>(params: &mut ParamSet, init: &mut Initializer<'_, R>, in_channels: usize) -> Self {
        let backbone = Backbone::build(params, init, in_channels, Init::Zero);
        let time = TimestepEmbedding::build(params, init, TIME_EMBED_DIM);
        let projections = std::array::from_fn(|i| {
            Linear::build(params, init, &format!("time.proj{i}"), TIME_EMBED_DIM, INJECTION_WIDTHS[i])
        });
        Self {
            backbone,
            time,
            projections,
        }
    }
}

/// Noise predictor `ε_θ(x_t, t)` or, with a mask channel, `ε_θ(x_t, t, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    params: ParamSet,
    in_channels: usize,
    layout: Layout,
}

impl Denoiser {
    /// Fresh network; the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(conditional: bool, rng: &mut R) -> Self {
        let in_channels = if conditional { 2 } else { 1 };
        let mut params = ParamSet::new();
        let layout = Layout::build(&mut params, &mut Initializer::random(rng), in_channels);
        Self {
            params,
            in_channels,
            layout,
        }
    }

    /// Rebuilds a network around stored parameters, checking names and shapes.
    pub fn from_params(in_channels: usize, params: ParamSet) -> Result<Self, NetError> {
        if !(1..=2).contains(&in_channels) {
            return Err(NetError::Config(format!("denoiser input channels must be 1 or 2, got {in_channels}")));
        }
        let mut template = ParamSet::new();
        let layout = Layout::build(&mut template, &mut Initializer::<ChaCha8Rng>::zeros(), in_channels);
        super::check_layout(&template, &params)?;
        Ok(Self {
            params,
            in_channels,
            layout,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.in_channels == 2
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records a forward pass. `timesteps` holds one entry per batch item.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_t: Var,
        timesteps: &[usize],
        condition: Option<Var>,
    ) -> Result<Var, NetError> {
        let [n, c, h, w] = tape.value(x_t).dims4("denoiser_forward")?;
        if c != 1 {
            return Err(NetError::Config(format!("image input must have 1 channel, got {c}")));
        }
        check_spatial(h, w)?;
        if timesteps.len() != n {
            return Err(NetError::Config(format!(
                "{} timesteps for a batch of {n}",
                timesteps.len()
            )));
        }
        let input = match (condition, self.is_conditional()) {
            (Some(cond), true) => {
                let shape = tape.value(cond).shape();
                if shape != [n, 1, h, w] {
                    return Err(NetError::Config(format!(
                        "condition shape {shape:?}, expected [{n}, 1, {h}, {w}]"
                    )));
                }
                tape.concat_channels(x_t, cond)?
            }
            (None, false) => x_t,
            (Some(_), false) => {
                return Err(NetError::Config("unconditional denoiser given a condition".into()))
            }
            (None, true) => {
                return Err(NetError::Config("conditional denoiser needs a condition".into()))
            }
        };
        let emb = self.layout.time.forward(tape, bound, timesteps)?;
        let mut offsets = [emb; INJECTION_POINTS];
        for (slot, proj) in offsets.iter_mut().zip(&self.layout.projections) {
            *slot = proj.apply(tape, bound, emb)?;
        }
        Ok(self.layout.backbone.forward(tape, bound, input, Some(&offsets))?)
    }

    /// Inference-only noise prediction at a single timestep for the batch.
    pub fn predict(&self, x_t: &Tensor, t: usize, condition: Option<&Tensor>) -> Result<Tensor, NetError> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let cond = condition.map(|c| tape.constant(c.clone()));
        let out = self.forward(&mut tape, &bound, x, &vec![t; n], cond)?;
        Ok(tape.value(out).clone())
    }

    /// Converts an unconditional network into a conditional one whose weights
    /// on the new mask channel are zero, so outputs are initially unchanged.
    pub fn conditionalize(&self) -> Result<Denoiser, NetError> {
        if self.is_conditional() {
            return Err(NetError::Contract("denoiser is already conditional".into()));
        }
        let mut params = self.params.clone();
        let index = self.layout.backbone.conv_in.kernel;
        let old = params.get(index);
        let [f, _, kh, kw] = old.dims4("conditionalize")?;
        let plane = kh * kw;
        let mut data = Vec::with_capacity(f * 2 * plane);
        for filter in old.data().chunks(plane) {
            data.extend_from_slice(filter);
            data.extend(std::iter::repeat_n(0.0, plane));
        }
        *params.get_mut(index) = Tensor::new(&[f, 2, kh, kw], data)?;
        Ok(Denoiser {
            params,
            in_channels: 2,
            layout: self.layout.clone(),
        })
    }
}
