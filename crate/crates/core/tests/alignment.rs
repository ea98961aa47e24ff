use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spectral_moe::layer::{init_layer, optimal_scale, AdapterInit, LayerConfig, ScaleSetting};
use spectral_moe::linalg::gaussian_matrix;
use spectral_moe::oracles::{alignment_trace, upcycled_forward_backward, LossKind, UpcycledMoeModel};
use spectral_moe::training::{median, TeacherTask, Workload};
use spectral_moe::{Error, Matrix, Vector};

/// Teacher equal to `w0` plus a small rank-2 shift, so a rank-8 adapter can
/// reach it exactly.
fn low_rank_shift_task(n: usize, seed: u64) -> (Matrix, TeacherTask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = gaussian_matrix(n, n, 1.0 / (n as f64).sqrt(), &mut rng);
    let shift = gaussian_matrix(n, 2, 1.0 / n as f64, &mut rng) * gaussian_matrix(2, n, 0.5f64.sqrt(), &mut rng);
    let task = TeacherTask::new(&w0 + shift, Vector::zeros(n), 1.0 / (n as f64).sqrt(), 0.0, seed).unwrap();
    (w0, task)
}

fn zero_init_pair(w0: &Matrix, cfg: &LayerConfig, seed: u64) -> (spectral_moe::layer::SpectralMoeLayer, UpcycledMoeModel) {
    let layer = init_layer(w0, cfg, seed).unwrap();
    let ft = UpcycledMoeModel::from_layer(&layer).unwrap();
    (layer, ft)
}

#[test]
fn zero_init_starts_aligned() {
    let (w0, task) = low_rank_shift_task(16, 3);
    let cfg = LayerConfig::new(16, 16, 8, 4, 2).with_init(AdapterInit::Zero);
    let (layer, ft) = zero_init_pair(&w0, &cfg, 3);
    let trace = alignment_trace(&layer, &ft, &task, 5, 8, 0.1, 0.1, 3).unwrap();
    assert_eq!(trace.divergence.len(), 6);
    assert!(trace.divergence[0].iter().all(|&d| d == 0.0));
}

#[test]
fn frozen_adapter_tracks_full_rank_displacement() {
    let n = 12;
    let (w0, task) = low_rank_shift_task(n, 5);
    let cfg = LayerConfig::new(n, n, 4, 2, 1).with_init(AdapterInit::Zero);
    let (layer, ft) = zero_init_pair(&w0, &cfg, 5);
    let (steps, batch, lr) = (10, 4, 0.5);
    let trace = alignment_trace(&layer, &ft, &task, steps, batch, 0.0, lr, 9).unwrap();

    let mut model = ft.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 1..=steps {
        let b = task.sample_batch(&mut rng, batch);
        let mut grads: Vec<Matrix> = model.experts.iter().map(|_| Matrix::zeros(n, n)).collect();
        for (x, y) in b.inputs.iter().zip(&b.targets) {
            let step = upcycled_forward_backward(&model, x, y, LossKind::SquaredError).unwrap();
            for (acc, g) in grads.iter_mut().zip(&step.expert_grads) {
                *acc += g / batch as f64;
            }
        }
        for (w, g) in model.experts.iter_mut().zip(&grads) {
            *w -= g * lr;
        }
        for (i, w) in model.experts.iter().enumerate() {
            let displacement = (w - &w0).norm();
            assert!((trace.divergence[t][i] - displacement).abs() <= 1e-12 * displacement.max(1.0));
        }
    }
}

#[test]
fn mismatched_models_are_rejected() {
    let (w0, task) = low_rank_shift_task(8, 1);
    let (layer, _) = zero_init_pair(&w0, &LayerConfig::new(8, 8, 4, 2, 1).with_init(AdapterInit::Zero), 1);
    let (_, other) = zero_init_pair(&w0, &LayerConfig::new(8, 8, 8, 4, 1).with_init(AdapterInit::Zero), 1);
    assert!(matches!(alignment_trace(&layer, &other, &task, 1, 2, 0.1, 0.1, 0), Err(Error::InvalidInput(_))));
    let (_, other_k) = zero_init_pair(&w0, &LayerConfig::new(8, 8, 4, 2, 2).with_init(AdapterInit::Zero), 1);
    assert!(matches!(alignment_trace(&layer, &other_k, &task, 1, 2, 0.1, 0.1, 0), Err(Error::InvalidInput(_))));
}

/// Median over five seeds of the mean per-expert divergence after 100 steps;
/// a run that blows up counts as infinitely divergent.
fn median_final_divergence(n: usize, r: usize, lr: f64, s: f64) -> f64 {
    let finals: Vec<f64> = (0..5u64)
        .map(|seed| {
            let (w0, task) = low_rank_shift_task(n, seed);
            let cfg = LayerConfig::new(n, n, r, 2, 1)
                .with_init(AdapterInit::Zero)
                .with_scale(ScaleSetting::Fixed(s));
            let (layer, ft) = zero_init_pair(&w0, &cfg, seed);
            match alignment_trace(&layer, &ft, &task, 100, 16, lr, lr, seed) {
                Ok(trace) => trace.final_mean(),
                Err(Error::TrainingDiverged { .. }) => f64::INFINITY,
                Err(e) => panic!("{e}"),
            }
        })
        .collect();
    median(&finals)
}

#[test]
fn optimal_scale_tracks_full_rank_training_more_closely_than_two() {
    let (n, r, lr) = (64, 8, 2.0);
    let s_star = optimal_scale(n, r, 1.0).unwrap();
    let (at_star, at_two) = (median_final_divergence(n, r, lr, s_star), median_final_divergence(n, r, lr, 2.0));
    println!("median divergence after 100 steps: s*={s_star:.3} -> {at_star:.4}, s=2 -> {at_two:.4}");
    assert!(at_star < at_two);
}

#[test]
fn scales_far_from_optimal_diverge_further() {
    let (n, r, lr) = (64, 8, 2.0);
    let s_star = optimal_scale(n, r, 1.0).unwrap();
    let at_star = median_final_divergence(n, r, lr, s_star);
    for factor in [1.0 / 8.0, 8.0] {
        let off = median_final_divergence(n, r, lr, s_star * factor);
        println!("median divergence after 100 steps: s*x{factor} -> {off:.4}, s* -> {at_star:.4}");
        assert!(off > at_star);
    }
}

#[test]
fn exploding_runs_report_the_step() {
    let (w0, task) = low_rank_shift_task(16, 2);
    let cfg = LayerConfig::new(16, 16, 8, 2, 1).with_init(AdapterInit::Zero);
    let (layer, ft) = zero_init_pair(&w0, &cfg, 2);
    match alignment_trace(&layer, &ft, &task, 200, 8, 1e6, 1e6, 2) {
        Err(Error::TrainingDiverged { step }) => assert!((1..=200).contains(&step)),
        other => panic!("expected divergence, got {other:?}"),
    }
}
