use rand_chacha::ChaCha8Rng;

use super::{to_image_range, PipelineConfig, PipelineError};
use crate::diffusion::{ddim_invert_step, ddim_reverse_step, ddpm_sample_step};
use crate::nets::{Denoiser, Segmenter};
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, PipelineError>;

/// Deterministic DDIM inversion of source images through the first `t0`
/// subsequence positions, with `ε^A` conditioned on the source masks.
/// Returns the latent batch at position `t0`.
pub fn mine_latents(eps_a: &Denoiser, x_a: &Tensor, y_a: &Tensor, cfg: &PipelineConfig) -> Result<Tensor> {
    if !eps_a.is_conditional() {
        return Err(PipelineError::Contract("latent mining needs the conditional source denoiser".into()));
    }
    let sched = cfg.schedule()?;
    let sub = cfg.subsequence()?;
    if cfg.t0 > sub.len() {
        return Err(PipelineError::Contract(format!("t0 {} beyond subsequence length {}", cfg.t0, sub.len())));
    }
    let mut x = x_a.clone();
    for pos in 0..cfg.t0 {
        let (from, to) = (sub.timestep(pos).expect("in range"), sub.timestep(pos + 1).expect("in range"));
        let eps = eps_a.predict(&x, from, Some(y_a))?;
        x = ddim_invert_step(&x, from, to, &eps, &sched)?;
    }
    Ok(x)
}

/// Where the reverse process starts.
#[derive(Debug, Clone, Copy)]
pub enum SynthesisStart<'a> {
    /// A mined latent batch at the given subsequence position.
    Latent { x: &'a Tensor, position: usize },
    /// Standard normal noise of the given shape at full subsequence depth.
    Noise { shape: [usize; 4] },
}

/// Runs the reverse process with `ε^B` down to the clean image and returns it
/// in `[0, 1]`. Steps are deterministic DDIM unless
/// `cfg.stochastic_synthesis` is set, in which case every timestep from the
/// start down to 1 takes an ancestral DDPM step.
pub fn synthesize_target(
    eps_b: &Denoiser,
    start: SynthesisStart,
    condition: Option<&Tensor>,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let sched = cfg.schedule()?;
    let sub = cfg.subsequence()?;
    let (mut x, position) = match start {
        SynthesisStart::Latent { x, position } => (x.clone(), position),
        SynthesisStart::Noise { shape } => (Tensor::randn(&shape, rng), sub.len()),
    };
    if position > sub.len() {
        return Err(PipelineError::Contract(format!(
            "start position {position} beyond subsequence length {}",
            sub.len()
        )));
    }
    if cfg.stochastic_synthesis {
        let top = sub.timestep(position).expect("checked above");
        for t in (1..=top).rev() {
            let eps = eps_b.predict(&x, t, condition)?;
            let noise = Tensor::randn(x.shape(), rng);
            x = ddpm_sample_step(&x, t, &eps, &noise, &sched)?;
        }
    } else {
        for pos in (1..=position).rev() {
            let (from, to) = (sub.timestep(pos).expect("in range"), sub.timestep(pos - 1).expect("in range"));
            let eps = eps_b.predict(&x, from, condition)?;
            x = ddim_reverse_step(&x, from, to, &eps, &sched)?;
        }
    }
    Ok(to_image_range(&x))
}

/// `threshold(sigmoid(S(x)), τ)` for a batch in model range.
pub fn pseudo_labels(seg: &Segmenter, x: &Tensor, threshold: f64) -> Result<Tensor> {
    Ok(seg.probabilities(x)?.map(|p| f64::from(p >= threshold)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::to_model_range;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image() -> Tensor {
        let mut r = rng(1);
        Tensor::from_fn(&[2, 1, 8, 8], |_| r.gen_range(0.1..0.9))
    }

    fn mask() -> Tensor {
        Tensor::from_fn(&[2, 1, 8, 8], |i| f64::from(i % 5 == 0))
    }

    #[test]
    fn zero_depth_mining_returns_input() {
        let cfg = PipelineConfig {
            t0: 0,
            ..Default::default()
        };
        let net = Denoiser::new(true, &mut rng(2));
        let x = to_model_range(&image());
        assert_eq!(mine_latents(&net, &x, &mask(), &cfg).unwrap(), x);
        let out = synthesize_target(&net, SynthesisStart::Latent { x: &x, position: 0 }, Some(&mask()), &cfg, &mut rng(0)).unwrap();
        assert!(out.max_abs_diff(&image()).unwrap() < 1e-15);
    }

    #[test]
    fn mining_rejects_unconditional_and_is_deterministic() {
        let cfg = PipelineConfig::default();
        let unc = Denoiser::new(false, &mut rng(3));
        assert!(matches!(mine_latents(&unc, &image(), &mask(), &cfg), Err(PipelineError::Contract(_))));
        let mut net = Denoiser::new(true, &mut rng(4));
        for t in net.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.01);
        }
        let a = mine_latents(&net, &image(), &mask(), &cfg).unwrap();
        let b = mine_latents(&net, &image(), &mask(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_denoiser_matches_closed_form() {
        // With ε̂ ≡ 0 every inversion step rescales by √(ᾱ_to/ᾱ_from), so
        // t0 steps telescope to √ᾱ_{τ_t0}·x.
        let cfg = PipelineConfig::default();
        let net = Denoiser::new(true, &mut rng(5));
        let x = to_model_range(&image());
        let latent = mine_latents(&net, &x, &mask(), &cfg).unwrap();
        let tau = cfg.subsequence().unwrap().timestep(cfg.t0).unwrap();
        let expect = x.map(|v| v * cfg.schedule().unwrap().alpha_bar(tau).unwrap().sqrt());
        assert!(latent.max_abs_diff(&expect).unwrap() < 1e-12);
        let back = synthesize_target(
            &net,
            SynthesisStart::Latent {
                x: &latent,
                position: cfg.t0,
            },
            Some(&mask()),
            &cfg,
            &mut rng(0),
        )
        .unwrap();
        assert!(back.max_abs_diff(&image()).unwrap() < 1e-12);
    }

    #[test]
    fn small_random_denoiser_reconstructs_within_tolerance() {
        let cfg = PipelineConfig::default();
        let mut net = Denoiser::new(true, &mut rng(6));
        let mut r = rng(7);
        for t in net.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.02..0.02));
        }
        let x = to_model_range(&image());
        let latent = mine_latents(&net, &x, &mask(), &cfg).unwrap();
        let back = synthesize_target(
            &net,
            SynthesisStart::Latent {
                x: &latent,
                position: cfg.t0,
            },
            Some(&mask()),
            &cfg,
            &mut rng(0),
        )
        .unwrap();
        let err = back.zip_map(&image(), |a, b| (a - b).abs()).unwrap().mean();
        assert!(err < 0.05, "mean abs reconstruction error {err}");
    }

    #[test]
    fn bad_start_position_is_a_contract_error() {
        let cfg = PipelineConfig::default();
        let net = Denoiser::new(false, &mut rng(8));
        let x = image();
        let r = synthesize_target(&net, SynthesisStart::Latent { x: &x, position: 21 }, None, &cfg, &mut rng(0));
        assert!(matches!(r, Err(PipelineError::Contract(_))));
    }

    #[test]
    fn noise_start_produces_images_in_range() {
        let cfg = PipelineConfig::default();
        let net = Denoiser::new(false, &mut rng(9));
        let out = synthesize_target(&net, SynthesisStart::Noise { shape: [1, 1, 8, 8] }, None, &cfg, &mut rng(1)).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
