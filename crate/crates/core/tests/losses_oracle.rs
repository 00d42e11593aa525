//! Oracle and contract tests for the training objectives. Expected
//! values are either closed forms or come from the brute-force CTC path
//! enumeration, never from the implementation under test.

use ilctc_core::losses::{
    aggregate_loss, ctc_loss, ctc_loss_bruteforce, ebkd_loss, entropy, ewc_penalty,
    fisher_estimate, greedy_log_prob, importance_map, rbkd_loss, soften, LossError, LossWeights,
};
use ilctc_core::model::{
    init_model, BoundModel, EncoderOutput, FrameMask, ModelConfig, ParamData, ParamMap,
    Posteriors, BLANK_ID,
};
use ilctc_core::rng::SeededRng;
use ilctc_core::synth::{generate_task, TaskSpec};
use ilctc_core::tensor::{backward, Tensor};

fn posteriors(rows: &[Vec<f64>]) -> Posteriors {
    Posteriors::from_prob_rows(rows, FrameMask::all_valid(rows.len())).unwrap()
}

fn random_posteriors(rng: &mut SeededRng, k: usize, m: usize) -> Posteriors {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..m).map(|_| rng.uniform_in(0.05, 1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    posteriors(&rows)
}

// ---------------------------------------------------------------------------
// CTC
// ---------------------------------------------------------------------------

#[test]
fn ctc_single_frame_single_path() {
    let p = posteriors(&[vec![0.2, 0.8]]);
    let loss = ctc_loss(&p, &[1], BLANK_ID).unwrap().item();
    assert!((loss - 0.22314355131420976).abs() < 1e-12, "{loss}"); // -ln 0.8
}

#[test]
fn ctc_two_frames_three_paths() {
    // paths {(a,a), (-,a), (a,-)} under uniform posteriors: -ln 0.75
    let p = posteriors(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    let loss = ctc_loss(&p, &[1], BLANK_ID).unwrap().item();
    let oracle = ctc_loss_bruteforce(&p, &[1], BLANK_ID).unwrap();
    assert!((loss - 0.2876820724517809).abs() < 1e-12, "{loss}");
    assert!((loss - oracle).abs() < 1e-12);
}

#[test]
fn ctc_repeated_label_needs_separating_blank() {
    let p = posteriors(&[vec![0.5, 0.5]]);
    match ctc_loss(&p, &[1, 1], BLANK_ID) {
        Err(LossError::InfeasibleAlignment { frames, required }) => {
            assert_eq!((frames, required), (1, 3));
        }
        other => panic!("expected infeasible alignment, got {other:?}"),
    }
    assert!(matches!(
        ctc_loss_bruteforce(&p, &[1, 1], BLANK_ID),
        Err(LossError::InfeasibleAlignment { .. })
    ));
}

#[test]
fn ctc_empty_label_is_the_all_blank_path() {
    let p = posteriors(&[vec![0.7, 0.3], vec![0.6, 0.4]]);
    let expected = -(0.7f64.ln() + 0.6f64.ln());
    let loss = ctc_loss(&p, &[], BLANK_ID).unwrap().item();
    let oracle = ctc_loss_bruteforce(&p, &[], BLANK_ID).unwrap();
    assert!((loss - expected).abs() < 1e-12);
    assert!((oracle - expected).abs() < 1e-12);
}

#[test]
fn ctc_rejects_blank_and_out_of_range_labels() {
    let p = posteriors(&[vec![0.5, 0.3, 0.2]]);
    assert!(matches!(ctc_loss(&p, &[0], BLANK_ID), Err(LossError::BadLabel { .. })));
    assert!(matches!(ctc_loss(&p, &[3], BLANK_ID), Err(LossError::BadLabel { .. })));
}

#[test]
fn bruteforce_refuses_oversized_instances() {
    let rows: Vec<Vec<f64>> = (0..17).map(|_| vec![0.25; 4]).collect();
    let p = posteriors(&rows);
    match ctc_loss_bruteforce(&p, &[1], BLANK_ID) {
        Err(LossError::TooLargeToEnumerate { m, k, bound }) => {
            assert_eq!((m, k), (4, 17));
            assert_eq!(bound, 65536);
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn ctc_matches_bruteforce_on_random_small_instances() {
    let mut rng = SeededRng::new(2024);
    let mut checked = 0;
    while checked < 300 {
        let k = rng.range_inclusive(1, 6);
        let m = rng.range_inclusive(2, 3);
        let u = rng.range_inclusive(0, 3);
        let labels: Vec<usize> = (0..u).map(|_| rng.range_inclusive(1, m - 1)).collect();
        let p = random_posteriors(&mut rng, k, m);
        match (
            ctc_loss(&p, &labels, BLANK_ID),
            ctc_loss_bruteforce(&p, &labels, BLANK_ID),
        ) {
            (Ok(dp), Ok(oracle)) => {
                let dp = dp.item();
                assert!(
                    (dp - oracle).abs() < 1e-9,
                    "dp {dp} vs oracle {oracle} (k={k} m={m} labels {labels:?})"
                );
                checked += 1;
            }
            (Err(LossError::InfeasibleAlignment { .. }), Err(LossError::InfeasibleAlignment { .. })) => {}
            (a, b) => panic!("disagreement on feasibility: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn ctc_respects_frame_masks() {
    // masked frame must not contribute: compare against the unmasked slice
    let rows = vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]];
    let masked = Posteriors::from_prob_rows(&rows, FrameMask::prefix(3, 2)).unwrap();
    let sliced = posteriors(&rows[..2].to_vec());
    let a = ctc_loss(&masked, &[1], BLANK_ID).unwrap().item();
    let b = ctc_loss(&sliced, &[1], BLANK_ID).unwrap().item();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(5);
    let k = 5;
    let m = 3;
    let logits: Vec<f64> = (0..k * m).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let labels = [1usize, 2];
    let eval = |data: &[f64]| {
        let t = Tensor::constant(&[k, m], data.to_vec());
        let p = Posteriors {
            log_probs: t.row_log_softmax().unwrap(),
            mask: FrameMask::all_valid(k),
        };
        ctc_loss(&p, &labels, BLANK_ID).unwrap().item()
    };
    // analytic grad w.r.t. logits
    let leaf = Tensor::parameter(&[k, m], logits.clone());
    let p = Posteriors {
        log_probs: leaf.row_log_softmax().unwrap(),
        mask: FrameMask::all_valid(k),
    };
    let loss = ctc_loss(&p, &labels, BLANK_ID).unwrap();
    backward(&loss).unwrap();
    let analytic = leaf.grad().unwrap();
    let h = 1e-6;
    for i in 0..k * m {
        let mut plus = logits.clone();
        plus[i] += h;
        let mut minus = logits.clone();
        minus[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = analytic[i].abs().max(1.0);
        assert!(
            (analytic[i] - numeric).abs() / denom < 1e-6,
            "logit {i}: analytic {} numeric {numeric}",
            analytic[i]
        );
    }
}

// ---------------------------------------------------------------------------
// Softening and RBKD
// ---------------------------------------------------------------------------

#[test]
fn soften_closed_form_and_identities() {
    let p = posteriors(&[vec![0.9, 0.1]]);
    let soft = soften(&p, 2.0).unwrap();
    let rows = soft.prob_rows();
    assert!((rows[0][0] - 0.75).abs() < 1e-12, "{:?}", rows[0]);
    assert!((rows[0][1] - 0.25).abs() < 1e-12);

    // T = 1 is the identity
    let p = posteriors(&[vec![0.3, 0.45, 0.25]]);
    let same = soften(&p, 1.0).unwrap();
    for (a, b) in p.prob_rows()[0].iter().zip(&same.prob_rows()[0]) {
        assert!((a - b).abs() < 1e-12);
    }

    // uniform stays uniform at any temperature
    let u = posteriors(&[vec![0.25; 4]]);
    for t in [0.5, 2.0, 7.0] {
        for v in &soften(&u, t).unwrap().prob_rows()[0] {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    assert!(matches!(soften(&p, 0.0), Err(LossError::BadTemperature(_))));
    assert!(matches!(soften(&p, -2.0), Err(LossError::BadTemperature(_))));
}

#[test]
fn soften_entropy_is_nondecreasing_in_temperature() {
    let mut rng = SeededRng::new(8);
    for _ in 0..100 {
        let p = random_posteriors(&mut rng, 3, 4);
        let grid = [0.5, 1.0, 2.0, 3.0, 5.0];
        let entropies: Vec<f64> = grid.iter().map(|&t| entropy(&soften(&p, t).unwrap())).collect();
        for w in entropies.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "entropy decreased: {entropies:?}");
        }
    }
}

#[test]
fn rbkd_frozen_values() {
    // teacher == student == [0.5, 0.5]: cross-entropy equals entropy = ln 2
    let t = posteriors(&[vec![0.5, 0.5]]);
    let s = posteriors(&[vec![0.5, 0.5]]);
    let loss = rbkd_loss(&t, &s, 1.0).unwrap().item();
    assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);

    // direct evaluation: -(0.8 ln 0.6 + 0.2 ln 0.4)
    let t = posteriors(&[vec![0.8, 0.2]]);
    let s = posteriors(&[vec![0.6, 0.4]]);
    let loss = rbkd_loss(&t, &s, 1.0).unwrap().item();
    let expected = -(0.8 * 0.6f64.ln() + 0.2 * 0.4f64.ln());
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    assert!((loss - 0.59192).abs() < 1e-5);
}

#[test]
fn rbkd_gibbs_inequality() {
    let mut rng = SeededRng::new(21);
    for _ in 0..200 {
        let t = random_posteriors(&mut rng, 2, 3);
        let s = random_posteriors(&mut rng, 2, 3);
        for temp in [0.7, 1.0, 3.0] {
            let cross = rbkd_loss(&t, &s, temp).unwrap().item();
            let self_loss = rbkd_loss(&t, &t, temp).unwrap().item();
            assert!(cross >= self_loss - 1e-10, "Gibbs violated: {cross} < {self_loss}");
        }
    }
}

#[test]
fn rbkd_rejects_mismatched_inputs() {
    let t = posteriors(&[vec![0.5, 0.5]]);
    let s = posteriors(&[vec![0.4, 0.3, 0.3]]);
    assert!(matches!(rbkd_loss(&t, &s, 1.0), Err(LossError::ShapeMismatch { .. })));
    let s2 = Posteriors::from_prob_rows(&[vec![0.5, 0.5]], FrameMask::prefix(1, 0));
    // a fully masked student row cannot be built into a mask mismatch here,
    // so check the mask path with different masks of equal length
    drop(s2);
    let a = Posteriors::from_prob_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]], FrameMask::prefix(2, 1)).unwrap();
    let b = Posteriors::from_prob_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]], FrameMask::all_valid(2)).unwrap();
    assert!(matches!(rbkd_loss(&a, &b, 1.0), Err(LossError::MaskMismatch { .. })));
}

#[test]
fn rbkd_survives_starved_student_probabilities() {
    // student assigns ~0 where the teacher has mass: floored, finite, large
    let t = posteriors(&[vec![0.5, 0.5]]);
    let logits = Tensor::constant(&[1, 2], vec![0.0, -800.0]);
    let s = Posteriors {
        log_probs: logits.row_log_softmax().unwrap(),
        mask: FrameMask::all_valid(1),
    };
    let loss = rbkd_loss(&t, &s, 1.0).unwrap().item();
    assert!(loss.is_finite());
    assert!(loss > 10.0, "floored cross-entropy should be large, got {loss}");
}

#[test]
fn rbkd_gradient_only_reaches_the_student() {
    let teacher_leaf = Tensor::parameter(&[1, 2], vec![0.2, -0.1]);
    let student_leaf = Tensor::parameter(&[1, 2], vec![-0.4, 0.3]);
    let t = Posteriors {
        log_probs: teacher_leaf.row_log_softmax().unwrap(),
        mask: FrameMask::all_valid(1),
    };
    let s = Posteriors {
        log_probs: student_leaf.row_log_softmax().unwrap(),
        mask: FrameMask::all_valid(1),
    };
    let loss = rbkd_loss(&t, &s, 2.0).unwrap();
    backward(&loss).unwrap();
    assert!(teacher_leaf.grad().is_none(), "teacher side must carry no gradient");
    assert!(student_leaf.grad().is_some());
}

// ---------------------------------------------------------------------------
// Greedy log-probability
// ---------------------------------------------------------------------------

#[test]
fn greedy_log_prob_values() {
    let p = posteriors(&[vec![0.7, 0.3], vec![0.6, 0.4]]);
    let lp = greedy_log_prob(&p).unwrap().item();
    assert!((lp - 0.42f64.ln()).abs() < 1e-12);
    assert!((lp + 0.86750).abs() < 1e-5);

    let u = posteriors(&[vec![0.25; 4]]);
    assert!((greedy_log_prob(&u).unwrap().item() - 0.25f64.ln()).abs() < 1e-12);
}

#[test]
fn greedy_log_prob_gradient_hits_only_argmax_entries() {
    let leaf = Tensor::parameter(&[2, 3], vec![0.1, 0.9, 0.3, 0.8, 0.2, 0.1]);
    let p = Posteriors {
        log_probs: leaf.row_log_softmax().unwrap(),
        mask: FrameMask::all_valid(2),
    };
    let lp = greedy_log_prob(&p).unwrap();
    backward(&lp).unwrap();
    let g = leaf.grad().unwrap();
    // through log-softmax every entry gets some gradient, but the gather
    // itself routes the direct +1 only to the argmax entries; check via
    // the log-probs tensor instead
    drop(g);
    let direct = Tensor::parameter(&[2, 3], vec![-1.0, -0.5, -2.0, -0.3, -1.5, -2.5]);
    let p = Posteriors { log_probs: direct.clone(), mask: FrameMask::all_valid(2) };
    let lp = greedy_log_prob(&p).unwrap();
    backward(&lp).unwrap();
    assert_eq!(direct.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

// ---------------------------------------------------------------------------
// Importance and attention maps
// ---------------------------------------------------------------------------

fn tiny_model_and_input() -> (BoundModel, Vec<f64>, usize) {
    let cfg = ModelConfig::tiny(4);
    let ckpt = init_model(&cfg, 17).unwrap();
    let model = BoundModel::bind(&ckpt, true).unwrap();
    let frames = 9;
    let mut rng = SeededRng::new(3);
    let x: Vec<f64> = (0..cfg.input_dim * frames).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    (model, x, frames)
}

#[test]
fn importance_map_matches_feature_map_perturbation() {
    let (model, x, frames) = tiny_model_and_input();
    let out = model.forward(&x, frames, None).unwrap();
    let art = importance_map(&out, false).unwrap();
    let base_map = out.feature_map.data().to_vec();
    let shape = out.feature_map.shape().to_vec();
    let eval = |data: Vec<f64>| {
        let a = Tensor::constant(&shape, data);
        let p = model.forward_from_feature_map(&a, &out.mask).unwrap();
        greedy_log_prob(&p).unwrap().item()
    };
    let h = 1e-5;
    let alpha = art.alpha.data();
    for i in 0..base_map.len() {
        let mut plus = base_map.clone();
        plus[i] += h;
        let mut minus = base_map.clone();
        minus[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let denom = alpha[i].abs().max(1.0);
        assert!(
            (alpha[i] - numeric).abs() / denom < 1e-5,
            "alpha[{i}] = {} vs numeric {numeric}",
            alpha[i]
        );
    }
}

#[test]
fn importance_map_is_zero_on_masked_frames() {
    let (model, x, frames) = tiny_model_and_input();
    // pad by two frames; the padded tail is masked
    let cfg = &model.config;
    let padded_frames = frames + 4;
    let mut padded = vec![0.0; cfg.input_dim * padded_frames];
    for r in 0..cfg.input_dim {
        padded[r * padded_frames..r * padded_frames + frames]
            .copy_from_slice(&x[r * frames..(r + 1) * frames]);
    }
    let out = model.forward(&padded, padded_frames, Some(frames)).unwrap();
    assert!(out.mask.num_valid() < out.mask.len(), "padding must mask frames");
    let art = importance_map(&out, true).unwrap();
    let [d_h, k] = *out.feature_map.shape() else { panic!() };
    for col in 0..k {
        if !out.mask.0[col] {
            for i in 0..d_h {
                assert_eq!(art.alpha.data()[i * k + col], 0.0, "masked col {col}");
                assert_eq!(art.attention.data()[i * k + col], 0.0);
            }
        }
    }
}

#[test]
fn attention_map_is_relu_gated() {
    let (model, x, frames) = tiny_model_and_input();
    let out = model.forward(&x, frames, None).unwrap();
    let art = importance_map(&out, true).unwrap();
    for (i, (&a, &v)) in art.alpha.data().iter().zip(out.feature_map.data()).enumerate() {
        let expected = (a * v).max(0.0);
        assert!((art.attention.data()[i] - expected).abs() < 1e-15);
    }
    assert!(!art.attention.requires_grad(), "teacher maps must be detached");
    let art_live = importance_map(&out, false).unwrap();
    assert!(art_live.attention.requires_grad(), "student maps stay live");
}

#[test]
fn importance_map_without_graph_is_an_error() {
    let (model, x, frames) = tiny_model_and_input();
    let out = model.forward(&x, frames, None).unwrap();
    let detached = EncoderOutput {
        posteriors: Posteriors {
            log_probs: out.posteriors.log_probs.detach(),
            mask: out.posteriors.mask.clone(),
        },
        feature_map: out.feature_map.detach(),
        mask: out.mask.clone(),
    };
    assert!(matches!(importance_map(&detached, false), Err(LossError::GraphConsumed)));
}

// ---------------------------------------------------------------------------
// EBKD
// ---------------------------------------------------------------------------

#[test]
fn ebkd_frozen_values() {
    let mask = FrameMask::all_valid(1);
    // identical non-zero maps -> 0
    let q = Tensor::constant(&[2, 1], vec![1.0, 2.0]);
    assert_eq!(ebkd_loss(&q, &q, &mask).unwrap().item(), 0.0);

    // Q1 = [1, 2], Q2 = [2, 1]: || [2,1]/sqrt5 - [1,2]/sqrt5 || = sqrt(2/5)
    let q1 = Tensor::constant(&[2, 1], vec![1.0, 2.0]);
    let q2 = Tensor::constant(&[2, 1], vec![2.0, 1.0]);
    let loss = ebkd_loss(&q1, &q2, &mask).unwrap().item();
    assert!((loss - (2.0f64 / 5.0).sqrt()).abs() < 1e-12);
    assert!((loss - 0.63246).abs() < 1e-5);

    // zero teacher frame normalizes to the zero vector -> distance 1
    let zero = Tensor::constant(&[2, 1], vec![0.0, 0.0]);
    let unit = Tensor::constant(&[2, 1], vec![1.0, 0.0]);
    assert!((ebkd_loss(&zero, &unit, &mask).unwrap().item() - 1.0).abs() < 1e-12);
}

#[test]
fn ebkd_scale_invariance_and_range() {
    let mut rng = SeededRng::new(31);
    let d_h = 4;
    let k = 3;
    let mask = FrameMask::all_valid(k);
    for _ in 0..100 {
        let a: Vec<f64> = (0..d_h * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..d_h * k).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let q1 = Tensor::constant(&[d_h, k], a.clone());
        let q2 = Tensor::constant(&[d_h, k], b.clone());
        let base = ebkd_loss(&q1, &q2, &mask).unwrap().item();
        assert!((0.0..=2.0 + 1e-12).contains(&base), "range violated: {base}");

        // positive per-frame rescaling of either input
        let scales: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.1, 10.0)).collect();
        let rescale = |data: &[f64]| {
            let mut out = data.to_vec();
            for (col, &s) in scales.iter().enumerate() {
                for i in 0..d_h {
                    out[i * k + col] *= s;
                }
            }
            out
        };
        let q1s = Tensor::constant(&[d_h, k], rescale(&a));
        let q2s = Tensor::constant(&[d_h, k], rescale(&b));
        let left = ebkd_loss(&q1s, &q2, &mask).unwrap().item();
        let right = ebkd_loss(&q1, &q2s, &mask).unwrap().item();
        assert!((left - base).abs() < 1e-12, "teacher rescale changed loss");
        assert!((right - base).abs() < 1e-12, "student rescale changed loss");
    }
}

#[test]
fn ebkd_gradient_matches_finite_differences() {
    let mut rng = SeededRng::new(77);
    let d_h = 3;
    let k = 4;
    let mask = FrameMask::all_valid(k);
    let teacher = Tensor::constant(
        &[d_h, k],
        (0..d_h * k).map(|_| rng.uniform_in(0.1, 1.0)).collect::<Vec<f64>>(),
    );
    let student_data: Vec<f64> = (0..d_h * k).map(|_| rng.uniform_in(0.1, 1.0)).collect();
    let leaf = Tensor::parameter(&[d_h, k], student_data.clone());
    let loss = ebkd_loss(&teacher, &leaf, &mask).unwrap();
    backward(&loss).unwrap();
    let analytic = leaf.grad().unwrap();
    let h = 1e-6;
    for i in 0..student_data.len() {
        let mut plus = student_data.clone();
        plus[i] += h;
        let mut minus = student_data.clone();
        minus[i] -= h;
        let fp = ebkd_loss(&teacher, &Tensor::constant(&[d_h, k], plus), &mask).unwrap().item();
        let fm = ebkd_loss(&teacher, &Tensor::constant(&[d_h, k], minus), &mask).unwrap().item();
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(1.0);
        assert!(
            (analytic[i] - numeric).abs() / denom < 1e-6,
            "element {i}: analytic {} vs numeric {numeric}",
            analytic[i]
        );
    }
}

#[test]
fn ebkd_zero_distance_has_zero_gradient() {
    let mask = FrameMask::all_valid(2);
    let data = vec![0.5, 0.0, 1.0, 2.0];
    let teacher = Tensor::constant(&[2, 2], data.clone());
    let leaf = Tensor::parameter(&[2, 2], data);
    let loss = ebkd_loss(&teacher, &leaf, &mask).unwrap();
    assert_eq!(loss.item(), 0.0);
    backward(&loss).unwrap();
    let g = leaf.grad().unwrap();
    assert!(g.iter().all(|&v| v == 0.0), "gradient at the fixed point: {g:?}");
}

#[test]
fn ebkd_masked_frames_are_excluded() {
    let q1 = Tensor::constant(&[2, 2], vec![1.0, 9.0, 0.0, 9.0]);
    let q2 = Tensor::constant(&[2, 2], vec![1.0, -9.0, 0.0, -9.0]);
    // only frame 0 is valid, and there the maps agree
    let loss = ebkd_loss(&q1, &q2, &FrameMask::prefix(2, 1)).unwrap().item();
    assert_eq!(loss, 0.0);
    let shaped = ebkd_loss(&q1, &Tensor::constant(&[2, 3], vec![0.0; 6]), &FrameMask::all_valid(2));
    assert!(matches!(shaped, Err(LossError::ShapeMismatch { .. })));
}

// ---------------------------------------------------------------------------
// EWC and Fisher
// ---------------------------------------------------------------------------

fn single_param(value: f64) -> (std::collections::BTreeMap<String, Tensor>, ParamMap) {
    let mut live = std::collections::BTreeMap::new();
    live.insert("w".to_string(), Tensor::parameter(&[1], vec![value]));
    let mut plain = ParamMap::new();
    plain.insert("w".to_string(), ParamData { shape: vec![1], data: vec![value] });
    (live, plain)
}

#[test]
fn ewc_frozen_values() {
    let (live, reference) = single_param(4.0);
    let mut fisher = ParamMap::new();
    fisher.insert("w".to_string(), ParamData { shape: vec![1], data: vec![2.0] });

    // student == reference -> 0
    assert_eq!(ewc_penalty(&live, &reference, &fisher).unwrap().item(), 0.0);

    // F = 2, theta - theta* = 3 -> 18
    let (live, _) = single_param(7.0);
    let loss = ewc_penalty(&live, &reference, &fisher).unwrap();
    assert_eq!(loss.item(), 18.0);

    // zero Fisher -> 0 regardless of the parameters
    let mut zero_fisher = ParamMap::new();
    zero_fisher.insert("w".to_string(), ParamData { shape: vec![1], data: vec![0.0] });
    assert_eq!(ewc_penalty(&live, &reference, &zero_fisher).unwrap().item(), 0.0);
}

#[test]
fn ewc_rejects_mismatched_parameter_sets() {
    let (live, reference) = single_param(1.0);
    let mut fisher = ParamMap::new();
    fisher.insert("other".to_string(), ParamData { shape: vec![1], data: vec![1.0] });
    assert!(matches!(
        ewc_penalty(&live, &reference, &fisher),
        Err(LossError::EwcParamMismatch(_))
    ));
}

#[test]
fn ewc_gradient() {
    let (live, _) = single_param(7.0);
    let (_, reference) = single_param(4.0);
    let mut fisher = ParamMap::new();
    fisher.insert("w".to_string(), ParamData { shape: vec![1], data: vec![2.0] });
    let loss = ewc_penalty(&live, &reference, &fisher).unwrap();
    backward(&loss).unwrap();
    // d/dw 2 (w - 4)^2 = 4 (w - 4) = 12
    assert_eq!(live["w"].grad().unwrap(), vec![12.0]);
}

fn tiny_dataset(n: usize, seed: u64) -> ilctc_core::synth::Dataset {
    let spec = TaskSpec::seeded_base(1, 4, 4, 4, vec![1, 2, 3], 0.2, (1, 2), n, seed).unwrap();
    generate_task(&spec).unwrap()
}

#[test]
fn fisher_is_nonnegative_and_duplication_invariant() {
    let ckpt = init_model(&ModelConfig::tiny(4), 2).unwrap();
    let ds = tiny_dataset(4, 5);
    let fisher = fisher_estimate(&ckpt, &ds, ds.len(), 0).unwrap();
    assert!(fisher.values().all(|p| p.data.iter().all(|&v| v >= 0.0)));

    let mut doubled = ds.clone();
    doubled.samples.extend(ds.samples.iter().cloned());
    let fisher2 = fisher_estimate(&ckpt, &doubled, doubled.len(), 0).unwrap();
    for (name, p) in &fisher {
        for (a, b) in p.data.iter().zip(&fisher2[name].data) {
            assert!((a - b).abs() < 1e-12, "{name} differs under duplication");
        }
    }
}

#[test]
fn fisher_single_sample_is_squared_gradient() {
    let ckpt = init_model(&ModelConfig::tiny(4), 2).unwrap();
    let mut ds = tiny_dataset(1, 9);
    ds.samples.truncate(1);
    let fisher = fisher_estimate(&ckpt, &ds, 1, 0).unwrap();

    let model = BoundModel::bind(&ckpt, true).unwrap();
    let s = &ds.samples[0];
    let out = model.forward(&s.features, s.frames, None).unwrap();
    let loss = ctc_loss(&out.posteriors, &s.labels, BLANK_ID).unwrap();
    backward(&loss).unwrap();
    for (name, grads) in model.grads() {
        for (f, g) in fisher[&name].data.iter().zip(&grads) {
            assert!((f - g * g).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn fisher_rejects_empty_dataset() {
    let ckpt = init_model(&ModelConfig::tiny(4), 2).unwrap();
    let mut ds = tiny_dataset(1, 9);
    ds.samples.clear();
    assert!(matches!(
        fisher_estimate(&ckpt, &ds, 1, 0),
        Err(LossError::EmptyDataset)
    ));
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[test]
fn aggregate_arithmetic() {
    let ctc = Tensor::scalar(1.0);
    let rbkd = Tensor::scalar(2.0);
    let ebkd = Tensor::scalar(0.01);
    let weights = LossWeights { temperature: 3.0, beta: 0.03, gamma: 500.0, lambda_ewc: 0.0 };
    let total = aggregate_loss(&ctc, Some(&rbkd), Some(&ebkd), None, &weights).unwrap();
    assert!((total.item() - 6.06).abs() < 1e-12);

    // degenerate weights reduce to the CTC term exactly
    let zero = LossWeights { temperature: 1.0, beta: 0.0, gamma: 0.0, lambda_ewc: 0.0 };
    let total = aggregate_loss(&ctc, Some(&rbkd), Some(&ebkd), None, &zero).unwrap();
    assert_eq!(total.item(), 1.0);

    // positive weight without its component is an error
    let w = LossWeights { temperature: 1.0, beta: 0.5, gamma: 0.0, lambda_ewc: 0.0 };
    assert!(matches!(
        aggregate_loss(&ctc, None, None, None, &w),
        Err(LossError::MissingComponent { .. })
    ));
}

#[test]
fn default_weights_are_the_reference_operating_point() {
    let w = LossWeights::default();
    assert_eq!((w.temperature, w.beta, w.gamma), (3.0, 0.03, 500.0));
}

// ---------------------------------------------------------------------------
// Self-distillation fixed point (teacher == student)
// ---------------------------------------------------------------------------

#[test]
fn self_distillation_fixed_point() {
    let cfg = ModelConfig::tiny(4);
    let ckpt = init_model(&cfg, 23).unwrap();
    let teacher = BoundModel::bind(&ckpt, false).unwrap();
    let student = BoundModel::bind(&ckpt, true).unwrap();
    let mut rng = SeededRng::new(6);
    for _ in 0..20 {
        let frames = rng.range_inclusive(6, 12);
        let x: Vec<f64> = (0..cfg.input_dim * frames).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let t_out = teacher.forward(&x, frames, None).unwrap();
        let s_out = student.forward(&x, frames, None).unwrap();

        let t_art = importance_map(&t_out, true).unwrap();
        let s_art = importance_map(&s_out, false).unwrap();
        let ebkd = ebkd_loss(&t_art.attention, &s_art.attention, &s_out.mask).unwrap();
        assert!(ebkd.item().abs() < 1e-9, "EBKD at the fixed point: {}", ebkd.item());

        let temperature = 3.0;
        let rbkd = rbkd_loss(&t_out.posteriors, &s_out.posteriors, temperature).unwrap();
        let softened_entropy = entropy(&soften(&t_out.posteriors, temperature).unwrap());
        assert!(
            (rbkd.item() - softened_entropy).abs() < 1e-9,
            "RBKD {} vs softened teacher entropy {softened_entropy}",
            rbkd.item()
        );
    }
}
