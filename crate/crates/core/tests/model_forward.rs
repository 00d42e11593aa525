//! Forward-pass contracts of the encoder: probability-mass outputs,
//! determinism, padding equivalence and end-to-end parameter gradients.

use ilctc_core::losses::{ctc_loss, param_gradient_max_rel_error};
use ilctc_core::model::{init_model, BoundModel, ModelConfig, ModelError, ParamData, BLANK_ID};
use ilctc_core::rng::SeededRng;
use ilctc_core::tensor::Tensor;

fn random_input(rng: &mut SeededRng, dim: usize, frames: usize) -> Vec<f64> {
    (0..dim * frames).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
}

#[test]
fn posterior_rows_are_probability_masses() {
    let cfg = ModelConfig::tiny(5);
    let model = BoundModel::bind(&init_model(&cfg, 1).unwrap(), false).unwrap();
    let mut rng = SeededRng::new(2);
    for _ in 0..10 {
        let frames = rng.range_inclusive(4, 20);
        let x = random_input(&mut rng, cfg.input_dim, frames);
        let out = model.forward(&x, frames, None).unwrap();
        let m = out.posteriors.alphabet_size();
        for row in out.posteriors.prob_rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert_eq!(m, 5);
        assert_eq!(out.feature_map.shape(), &[cfg.d_h, out.mask.len()]);
    }
}

#[test]
fn zero_parameters_give_uniform_posteriors() {
    let cfg = ModelConfig::tiny(4);
    let mut ckpt = init_model(&cfg, 1).unwrap();
    for (_, p) in ckpt.params.iter_mut() {
        *p = ParamData { shape: p.shape.clone(), data: vec![0.0; p.data.len()] };
    }
    let model = BoundModel::bind(&ckpt, false).unwrap();
    let mut rng = SeededRng::new(3);
    let x = random_input(&mut rng, cfg.input_dim, 8);
    let out = model.forward(&x, 8, None).unwrap();
    for row in out.posteriors.prob_rows() {
        for p in row {
            assert!((p - 0.25).abs() < 1e-12, "expected uniform 1/M, got {p}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_checkpoint_equality_transfers() {
    let cfg = ModelConfig::tiny(4);
    let ckpt = init_model(&cfg, 11).unwrap();
    let teacher = BoundModel::bind(&ckpt, false).unwrap();
    let student = BoundModel::bind(&ckpt, true).unwrap();
    let mut rng = SeededRng::new(4);
    let x = random_input(&mut rng, cfg.input_dim, 10);
    let a = teacher.forward(&x, 10, None).unwrap();
    let b = teacher.forward(&x, 10, None).unwrap();
    assert_eq!(a.posteriors.log_probs.data(), b.posteriors.log_probs.data());
    let c = student.forward(&x, 10, None).unwrap();
    assert_eq!(a.posteriors.log_probs.data(), c.posteriors.log_probs.data());
    assert_eq!(a.feature_map.data(), c.feature_map.data());
}

#[test]
fn padded_batch_matches_unpadded_forward() {
    let cfg = ModelConfig::desk_default(13);
    let ckpt = init_model(&cfg, 7).unwrap();
    let model = BoundModel::bind(&ckpt, false).unwrap();
    let mut rng = SeededRng::new(5);
    let real = 22;
    let padded_len = 32;
    let x = random_input(&mut rng, cfg.input_dim, real);
    let mut padded = vec![0.0; cfg.input_dim * padded_len];
    for r in 0..cfg.input_dim {
        padded[r * padded_len..r * padded_len + real].copy_from_slice(&x[r * real..(r + 1) * real]);
    }
    let plain = model.forward(&x, real, None).unwrap();
    let masked = model.forward(&padded, padded_len, Some(real)).unwrap();
    let k_real = plain.posteriors.num_frames();
    assert_eq!(masked.mask.num_valid(), k_real);
    let m = plain.posteriors.alphabet_size();
    for k in 0..k_real {
        for j in 0..m {
            let a = plain.posteriors.log_probs.data()[k * m + j];
            let b = masked.posteriors.log_probs.data()[k * m + j];
            assert!(
                (a - b).abs() < 1e-10,
                "frame {k} symbol {j}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn empty_input_is_rejected() {
    let cfg = ModelConfig::tiny(4);
    let model = BoundModel::bind(&init_model(&cfg, 1).unwrap(), false).unwrap();
    assert!(matches!(
        model.forward(&[], 0, None),
        Err(ModelError::InputTooShort { .. })
    ));
    let mut rng = SeededRng::new(1);
    let x = random_input(&mut rng, cfg.input_dim, 4);
    assert!(matches!(
        model.forward(&x, 4, Some(0)),
        Err(ModelError::InputTooShort { .. })
    ));
    assert!(matches!(
        model.forward(&x[..7], 4, None),
        Err(ModelError::WrongDataLen { .. })
    ));
}

#[test]
fn scalar_function_of_posteriors_passes_parameter_finite_differences() {
    let cfg = ModelConfig::tiny(4);
    let ckpt = init_model(&cfg, 19).unwrap();
    let mut rng = SeededRng::new(6);
    let frames = 8;
    let x = random_input(&mut rng, cfg.input_dim, frames);
    // weighted sum of log-probabilities as a generic scalar probe
    let weights: Vec<f64> = (0..4 * cfg.downsampled_length(frames))
        .map(|_| rng.uniform_in(-1.0, 1.0))
        .collect();
    let err = param_gradient_max_rel_error(
        &ckpt,
        |model| {
            let out = model.forward(&x, frames, None)?;
            let w = Tensor::constant(out.posteriors.log_probs.shape(), weights.clone());
            Ok(out.posteriors.log_probs.mul(&w)?.sum())
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "parameter gradient error {err}");
}

#[test]
fn ctc_through_the_model_passes_parameter_finite_differences() {
    let cfg = ModelConfig::tiny(4);
    let ckpt = init_model(&cfg, 29).unwrap();
    let mut rng = SeededRng::new(7);
    let frames = 10;
    let x = random_input(&mut rng, cfg.input_dim, frames);
    let labels = vec![1usize, 2];
    let err = param_gradient_max_rel_error(
        &ckpt,
        |model| {
            let out = model.forward(&x, frames, None)?;
            ctc_loss(&out.posteriors, &labels, BLANK_ID)
        },
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "CTC parameter gradient error {err}");
}
