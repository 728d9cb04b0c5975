use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{Backbone, Init, Initializer};
use super::params::{Bound, ParamSet};
use super::{check_spatial, NetError};
use crate::tensor::{Tape, Tensor, Var};

/// Per-pixel vessel logit predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    params: ParamSet,
    backbone: Backbone,
}

impl Segmenter {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let backbone = Backbone::build(&mut params, &mut Initializer::random(rng), 1, Init::FanIn);
        Self { params, backbone }
    }

    pub fn from_params(params: ParamSet) -> Result<Self, NetError> {
        let mut template = ParamSet::new();
        let backbone = Backbone::build(&mut template, &mut Initializer::<ChaCha8Rng>::zeros(), 1, Init::FanIn);
        super::check_layout(&template, &params)?;
        Ok(Self { params, backbone })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, NetError> {
        let [_, c, h, w] = tape.value(x).dims4("segmenter_forward")?;
        if c != 1 {
            return Err(NetError::Config(format!("segmenter input must have 1 channel, got {c}")));
        }
        check_spatial(h, w)?;
        Ok(self.backbone.forward(tape, bound, x, None)?)
    }

    /// Inference-only logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, input)?;
        Ok(tape.value(out).clone())
    }

    /// Inference-only vessel probabilities, `sigmoid(logits)`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, input)?;
        let p = tape.sigmoid(out)?;
        Ok(tape.value(p).clone())
    }
}
