use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vessel_uda::metrics::dsc;
use vessel_uda::nets::{Denoiser, Segmenter};
use vessel_uda::phantom::{generate_tree, rasterize_mask, render, Domain};
use vessel_uda::pipeline::{
    cooptimize, denoiser_eval_loss, pretrain_source, pretrain_target, to_model_range, train_segmenter, CoData,
    DenoiserData, PipelineConfig,
};
use vessel_uda::tensor::Tensor;

fn phantoms(count: usize, size: usize, domain: Domain, offset: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    (0..count as u64)
        .map(|i| {
            let tree = generate_tree(offset + i, size, size).unwrap();
            (render(&tree, domain, offset + i + 1000).image, rasterize_mask(&tree))
        })
        .unzip()
}

fn small_config() -> PipelineConfig {
    PipelineConfig {
        epochs_pretrain_a: 0,
        epochs_pretrain_b: 0,
        batch_size: 4,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_return_the_initial_models() {
    let (images, masks) = phantoms(4, 16, Domain::A, 0);
    let images: Vec<Tensor> = images.iter().map(to_model_range).collect();
    let cfg = small_config();

    let (source, trace) = pretrain_source(&cfg, &images, &masks, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(trace.is_empty());
    assert_eq!(source.params(), Denoiser::new(true, &mut ChaCha8Rng::seed_from_u64(1)).params());

    let (target, _) = pretrain_target(&cfg, &images, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(target.params(), Denoiser::new(false, &mut ChaCha8Rng::seed_from_u64(2)).params());

    let mut seg = Segmenter::new(&mut ChaCha8Rng::seed_from_u64(3));
    let before = seg.clone();
    train_segmenter(&mut seg, &images, &masks, 0, 1e-3, 4, &mut ChaCha8Rng::seed_from_u64(4), "test").unwrap();
    assert_eq!(seg.params(), before.params());
}

#[test]
fn pretraining_lowers_held_out_loss_and_uses_the_timestep() {
    let (train, _) = phantoms(24, 16, Domain::B, 0);
    let (held, _) = phantoms(8, 16, Domain::B, 500);
    let train: Vec<Tensor> = train.iter().map(to_model_range).collect();
    let held: Vec<Tensor> = held.iter().map(to_model_range).collect();
    let cfg = PipelineConfig {
        epochs_pretrain_b: 12,
        lr_gen: 2e-3,
        batch_size: 4,
        ..Default::default()
    };
    let sched = cfg.schedule().unwrap();
    let held_data = DenoiserData {
        images: &held,
        conditions: None,
        vessel_weight: None,
    };
    let initial = Denoiser::new(false, &mut ChaCha8Rng::seed_from_u64(9));
    let before = denoiser_eval_loss(&initial, &held_data, 4, &sched, 77).unwrap();
    let (model, trace) = pretrain_target(&cfg, &train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let after = denoiser_eval_loss(&model, &held_data, 4, &sched, 77).unwrap();
    assert_eq!(trace.len(), 12);
    assert!(after < before, "held-out loss {before} -> {after}");

    let x = &held[0];
    let early = model.predict(x, 5, None).unwrap();
    let late = model.predict(x, 190, None).unwrap();
    let gap = early.zip_map(&late, |a, b| (a - b).abs()).unwrap().mean();
    assert!(gap > 0.0);
}

#[test]
fn segmenter_overfits_a_single_pair() {
    let (images, masks) = phantoms(1, 32, Domain::B, 42);
    let images: Vec<Tensor> = images.iter().map(to_model_range).collect();
    let mut seg = Segmenter::new(&mut ChaCha8Rng::seed_from_u64(5));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut best = 0.0f64;
    // one step per epoch with a single pair
    for _ in 0..25 {
        train_segmenter(&mut seg, &images, &masks, 20, 1e-3, 1, &mut rng, "overfit").unwrap();
        let pred = seg.probabilities(&images[0]).unwrap().map(|p| f64::from(u8::from(p >= 0.5)));
        best = dsc(&pred, &masks[0]).unwrap();
        if best > 0.95 {
            break;
        }
    }
    assert!(best > 0.95, "dsc {best}");
}

#[test]
fn segmenter_training_dsc_trends_upward() {
    let (images, masks) = phantoms(32, 32, Domain::A, 300);
    let images: Vec<Tensor> = images.iter().map(to_model_range).collect();
    let mut seg = Segmenter::new(&mut ChaCha8Rng::seed_from_u64(8));
    let trace = train_segmenter(&mut seg, &images, &masks, 8, 1e-3, 4, &mut ChaCha8Rng::seed_from_u64(9), "trend").unwrap();
    assert_eq!(trace.dsc.len(), 8);
    assert!(trace.dsc[7] > trace.dsc[0] + 0.2, "{:?}", trace.dsc);
    // allow a few points of noise between consecutive epochs
    assert!(trace.dsc.windows(2).all(|w| w[1] > w[0] - 0.05), "{:?}", trace.dsc);
}

#[test]
fn zero_iterations_leave_models_untouched() {
    let (images_a, masks_a) = phantoms(4, 16, Domain::A, 0);
    let (images_b, masks_b) = phantoms(4, 16, Domain::B, 100);
    let cfg = PipelineConfig {
        iterations: 0,
        ..Default::default()
    };
    let generator = Denoiser::new(false, &mut ChaCha8Rng::seed_from_u64(1));
    let segmenter = Segmenter::new(&mut ChaCha8Rng::seed_from_u64(2));
    let data = CoData {
        images_a: &images_a,
        masks_a: &masks_a,
        images_b: &images_b,
        eval_masks_b: &masks_b,
    };
    let mut calls = 0;
    let (g, s, history) = cooptimize(generator.clone(), segmenter.clone(), data, &cfg, |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 0);
    assert!(history.is_empty());
    assert_eq!(g.params(), generator.params());
    assert_eq!(s.params(), segmenter.params());
}
