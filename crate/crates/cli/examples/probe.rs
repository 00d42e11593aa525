//! Scratch experiment runner used while calibrating the desk-scale
//! experiment constants. Not part of the test suite.

use std::path::PathBuf;
use std::time::Instant;

use ilctc_cli::config::{Method, OptimizerSection, StageSpec};
use ilctc_cli::io;
use ilctc_cli::train::{evaluate_checkpoint, train_stage};
use ilctc_core::losses::LossWeights;
use ilctc_core::model::{ConvSpec, ModelConfig};
use ilctc_core::synth::{derive_accent_task, derive_newwords_task, generate_task, TaskSpec};

fn model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        conv_layers: vec![
            ConvSpec { channels: 16, kernel: 3, stride: 2 },
            ConvSpec { channels: 16, kernel: 3, stride: 2 },
        ],
        num_sabs: 2,
        d_h: 16,
        num_heads: 4,
        fc_dims: vec![32, 11],
    }
}

fn stage_spec(
    dir: &PathBuf,
    name: &str,
    method: Method,
    stage: u32,
    train: Vec<PathBuf>,
    test: Vec<PathBuf>,
    teacher: Option<PathBuf>,
    weights: LossWeights,
    steps: usize,
    seed: u64,
    with_model: bool,
) -> StageSpec {
    StageSpec {
        stage,
        method,
        train_paths: train,
        test_paths: test,
        teacher_path: teacher,
        out_ckpt: dir.join(format!("{name}.ilck")),
        out_dir: dir.join(name),
        seed,
        weights,
        optimizer: OptimizerSection {
            peak_lr: 3e-3,
            warmup_steps: 100,
            total_steps: steps,
            batch_size: 16,
            fisher_samples: 64,
            grad_clip: 5.0,
        },
        model: with_model.then(model_config),
        snapshot_toml: String::new(),
    }
}

fn zero_weights() -> LossWeights {
    LossWeights { temperature: 1.0, beta: 0.0, gamma: 0.0, lambda_ewc: 0.0 }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let pretrain_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let incr_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(500);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let rotation: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let gamma: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(500.0);
    let beta: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let lambda: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(100.0);

    let dir = PathBuf::from(format!("/tmp/probe_seed{seed}"));
    std::fs::create_dir_all(&dir).unwrap();

    // --- data ---
    let base = TaskSpec::seeded_base(1, 8, 8, 11, (1..=6).collect(), noise, (2, 5), 600, seed * 1000 + 1).unwrap();
    let accent = {
        let mut t = derive_accent_task(&base, rotation, seed * 1000 + 50).unwrap();
        t.task_id = 2;
        t.seed = seed * 1000 + 2;
        t
    };
    let neww = {
        let mut t = derive_newwords_task(&base, &[7, 8, 9, 10], seed * 1000 + 60).unwrap();
        t.task_id = 3;
        t.seed = seed * 1000 + 3;
        t
    };
    let mut paths = std::collections::HashMap::new();
    for (name, spec) in [("base", &base), ("accent", &accent), ("neww", &neww)] {
        let train = generate_task(spec).unwrap();
        let mut test_spec = spec.clone();
        test_spec.num_samples = 400;
        test_spec.seed = spec.seed + 7777;
        let test = generate_task(&test_spec).unwrap();
        let ptrain = dir.join(format!("{name}_train.ild"));
        let ptest = dir.join(format!("{name}_test.ild"));
        io::write_dataset(&ptrain, &train).unwrap();
        io::write_dataset(&ptest, &test).unwrap();
        paths.insert(format!("{name}_train"), ptrain);
        paths.insert(format!("{name}_test"), ptest);
    }
    let p = |k: &str| paths[k].clone();

    // --- stage 1: pretrain on base ---
    let t0 = Instant::now();
    let pre_spec = stage_spec(
        &dir, "pretrain", Method::Pretrain, 1,
        vec![p("base_train")], vec![p("base_test")],
        None, zero_weights(), pretrain_steps, seed, true,
    );
    let pre = train_stage(&pre_spec).unwrap();
    println!("pretrain: {:.1}s, base CER {:.2}%", t0.elapsed().as_secs_f64(), pre.reports[0].1.corpus_cer * 100.0);

    // accent degradation of the pretrained model
    let accent_test = io::read_dataset(&p("accent_test")).unwrap();
    let deg = evaluate_checkpoint(&pre.checkpoint, &accent_test, 1, "pretrain", seed, None).unwrap();
    println!("pretrained on accent: CER {:.2}%", deg.corpus_cer * 100.0);

    // --- stage 2 (accent) + stage 3 (new words) per method ---
    let methods: Vec<(&str, Method, LossWeights)> = vec![
        ("finetune", Method::Finetune, zero_weights()),
        ("rbkd", Method::Rbkd, LossWeights { temperature: 3.0, beta, gamma: 0.0, lambda_ewc: 0.0 }),
        ("rbkd_ewc", Method::RbkdEwc, LossWeights { temperature: 3.0, beta, gamma: 0.0, lambda_ewc: lambda }),
        ("ebkd_rbkd", Method::EbkdRbkd, LossWeights { temperature: 3.0, beta, gamma, lambda_ewc: 0.0 }),
    ];
    for (name, method, weights) in methods {
        let t = Instant::now();
        let s2 = stage_spec(
            &dir, &format!("{name}_s2"), method, 2,
            vec![p("accent_train")], vec![p("base_test"), p("accent_test")],
            Some(dir.join("pretrain.ilck")), weights, incr_steps, seed, false,
        );
        let o2 = train_stage(&s2).unwrap();
        let s3 = stage_spec(
            &dir, &format!("{name}_s3"), method, 3,
            vec![p("neww_train")], vec![p("base_test"), p("accent_test"), p("neww_test")],
            Some(dir.join(format!("{name}_s2.ilck"))), weights, incr_steps, seed, false,
        );
        let o3 = train_stage(&s3).unwrap();
        println!(
            "{name}: s2 [base {:.2}% accent {:.2}%] s3 [base {:.2}% accent {:.2}% neww {:.2}%] ({:.1}s)",
            o2.reports[0].1.corpus_cer * 100.0,
            o2.reports[1].1.corpus_cer * 100.0,
            o3.reports[0].1.corpus_cer * 100.0,
            o3.reports[1].1.corpus_cer * 100.0,
            o3.reports[2].1.corpus_cer * 100.0,
            t.elapsed().as_secs_f64(),
        );
    }

    // --- joint reference ---
    let t = Instant::now();
    let j2 = stage_spec(
        &dir, "joint_s2", Method::Joint, 2,
        vec![p("base_train"), p("accent_train")], vec![p("base_test"), p("accent_test")],
        None, zero_weights(), pretrain_steps, seed, true,
    );
    let oj2 = train_stage(&j2).unwrap();
    let j3 = stage_spec(
        &dir, "joint_s3", Method::Joint, 3,
        vec![p("base_train"), p("accent_train"), p("neww_train")],
        vec![p("base_test"), p("accent_test"), p("neww_test")],
        None, zero_weights(), pretrain_steps, seed, true,
    );
    let oj3 = train_stage(&j3).unwrap();
    println!(
        "joint: s2 [base {:.2}% accent {:.2}%] s3 [base {:.2}% accent {:.2}% neww {:.2}%] ({:.1}s)",
        oj2.reports[0].1.corpus_cer * 100.0,
        oj2.reports[1].1.corpus_cer * 100.0,
        oj3.reports[0].1.corpus_cer * 100.0,
        oj3.reports[1].1.corpus_cer * 100.0,
        oj3.reports[2].1.corpus_cer * 100.0,
        t.elapsed().as_secs_f64(),
    );
}
