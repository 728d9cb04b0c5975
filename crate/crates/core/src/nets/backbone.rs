//! Three-level encoder–decoder shared by the denoiser and the segmenter.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;

use super::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Channel widths of the three resolution levels.
pub const WIDTHS: [usize; 3] = [16, 32, 64];

/// Number of places where a per-channel conditioning offset is added.
pub(crate) const INJECTION_POINTS: usize = 5;

/// Channel count at each injection point, in forward order.
pub(crate) const INJECTION_WIDTHS: [usize; INJECTION_POINTS] =
    [WIDTHS[0], WIDTHS[1], WIDTHS[2], WIDTHS[1], WIDTHS[0]];

/// How a freshly built layer is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    FanIn,
    Zero,
}

pub(crate) struct Initializer<'a, R: Rng + ?Sized> {
    rng: Option<&'a mut R>,
}

impl<'a, R: Rng + ?Sized> Initializer<'a, R> {
    pub fn random(rng: &'a mut R) -> Self {
        Self { rng: Some(rng) }
    }

    /// Every tensor zero; used to rebuild layouts before loading weights.
    pub fn zeros() -> Self {
        Self { rng: None }
    }

    fn make(&mut self, shape: &[usize], fan_in: usize, init: Init) -> Tensor {
        match (&mut self.rng, init) {
            (Some(rng), Init::FanIn) => fan_in_uniform(shape, fan_in, *rng),
            _ => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv {
    pub kernel: usize,
    pub bias: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamSet,
        init: &mut Initializer<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        stride: usize,
        padding: usize,
        mode: Init,
    ) -> Self {
        let shape = [cout, cin, size, size];
        let kernel = params.push(
            format!("{name}.kernel"),
            init.make(&shape, cin * size * size, mode),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    pub fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, b.get(self.kernel), b.get(self.bias), self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamSet,
        init: &mut Initializer<'_, R>,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            init.make(&[dout, din], din, Init::FanIn),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, b.get(self.weight), b.get(self.bias))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Backbone {
    pub conv_in: Conv,
    enc1: Conv,
    down1: Conv,
    enc2: Conv,
    down2: Conv,
    mid: Conv,
    up2: Conv,
    up1: Conv,
    out: Conv,
}

impl Backbone {
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamSet,
        init: &mut Initializer<'_, R>,
        in_channels: usize,
        out_init: Init,
    ) -> Self {
        let [c1, c2, c3] = WIDTHS;
        let fan = Init::FanIn;
        Self {
            conv_in: Conv::build(params, init, "conv_in", in_channels, c1, 3, 1, 1, fan),
            enc1: Conv::build(params, init, "enc1", c1, c1, 3, 1, 1, fan),
            down1: Conv::build(params, init, "down1", c1, c2, 2, 2, 0, fan),
            enc2: Conv::build(params, init, "enc2", c2, c2, 3, 1, 1, fan),
            down2: Conv::build(params, init, "down2", c2, c3, 2, 2, 0, fan),
            mid: Conv::build(params, init, "mid", c3, c3, 3, 1, 1, fan),
            up2: Conv::build(params, init, "up2", c3 + c2, c2, 3, 1, 1, fan),
            up1: Conv::build(params, init, "up1", c2 + c1, c1, 3, 1, 1, fan),
            out: Conv::build(params, init, "out", c1, 1, 3, 1, 1, out_init),
        }
    }

    /// `(x + conv(silu(x))) / √2`
    fn residual(tape: &mut Tape, b: &Bound, conv: &Conv, x: Var) -> Result<Var> {
        let a = tape.silu(x)?;
        let h = conv.apply(tape, b, a)?;
        let s = tape.add(x, h)?;
        tape.scale(s, FRAC_1_SQRT_2)
    }

    fn inject(tape: &mut Tape, x: Var, offset: Option<Var>) -> Result<Var> {
        match offset {
            Some(o) => tape.add_channel_bias(x, o),
            None => Ok(x),
        }
    }

    /// Runs the encoder–decoder on `[N, C_in, H, W]`; `offsets`, when given,
    /// are `[N, C]` per-channel additions at each injection point.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        offsets: Option<&[Var; INJECTION_POINTS]>,
    ) -> Result<Var> {
        let at = |i: usize| offsets.map(|o| o[i]);

        let h = self.conv_in.apply(tape, b, x)?;
        let h = Self::inject(tape, h, at(0))?;
        let e1 = Self::residual(tape, b, &self.enc1, h)?;

        let a = tape.silu(e1)?;
        let h = self.down1.apply(tape, b, a)?;
        let h = Self::inject(tape, h, at(1))?;
        let e2 = Self::residual(tape, b, &self.enc2, h)?;

        let a = tape.silu(e2)?;
        let h = self.down2.apply(tape, b, a)?;
        let h = Self::inject(tape, h, at(2))?;
        let m = Self::residual(tape, b, &self.mid, h)?;

        let u = tape.upsample_nearest(m, 2)?;
        let u = tape.concat_channels(u, e2)?;
        let u = tape.silu(u)?;
        let u = self.up2.apply(tape, b, u)?;
        let u2 = Self::inject(tape, u, at(3))?;

        let u = tape.upsample_nearest(u2, 2)?;
        let u = tape.concat_channels(u, e1)?;
        let u = tape.silu(u)?;
        let u = self.up1.apply(tape, b, u)?;
        let u1 = Self::inject(tape, u, at(4))?;

        let a = tape.silu(u1)?;
        self.out.apply(tape, b, a)
    }
}
