//! Single-stage calibration probe for the attention-map distillation
//! dynamics. Not part of the test suite.

use std::path::PathBuf;
use std::time::Instant;

use ilctc_cli::config::{Method, OptimizerSection, StageSpec};
use ilctc_cli::io;
use ilctc_cli::train::{evaluate_checkpoint, train_stage};
use ilctc_core::losses::LossWeights;
use ilctc_core::model::{ConvSpec, ModelConfig};
use ilctc_core::synth::{derive_accent_task, generate_task, TaskSpec};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let seed = get(1, 1.0) as u64;
    let d_h = get(2, 32.0) as usize;
    let convs = get(3, 1.0) as usize; // 1 or 2 stride-2 convs
    let proto_len = get(4, 6.0) as usize;
    let u_max = get(5, 8.0) as usize;
    let noise = get(6, 1.0);
    let rotation = get(7, 0.6);
    let gamma = get(8, 100.0);
    let lr = get(9, 1e-3);
    let steps = get(10, 500.0) as usize;
    let beta = get(11, 0.03);

    let dir = PathBuf::from(format!("/tmp/probe2_s{seed}_d{d_h}_c{convs}"));
    std::fs::create_dir_all(&dir).unwrap();

    let f = 8;
    let m = 11;
    let mut conv_layers = vec![ConvSpec { channels: d_h, kernel: 3, stride: 2 }];
    if convs == 2 {
        conv_layers.insert(0, ConvSpec { channels: 16, kernel: 3, stride: 2 });
    }
    let config = ModelConfig {
        input_dim: f,
        conv_layers,
        num_sabs: 2,
        d_h,
        num_heads: 4,
        fc_dims: vec![2 * d_h, m],
    };

    let base = TaskSpec::seeded_base(1, f, proto_len, m, (1..=6).collect(), noise, (3, u_max), 600, seed * 1000 + 1).unwrap();
    let accent = {
        let mut t = derive_accent_task(&base, rotation, seed * 1000 + 50).unwrap();
        t.task_id = 2;
        t.seed = seed * 1000 + 2;
        t
    };
    for (name, spec) in [("base", &base), ("accent", &accent)] {
        let train = generate_task(spec).unwrap();
        let mut tspec = spec.clone();
        tspec.num_samples = 300;
        tspec.seed = spec.seed + 7777;
        let test = generate_task(&tspec).unwrap();
        io::write_dataset(&dir.join(format!("{name}_train.ild")), &train).unwrap();
        io::write_dataset(&dir.join(format!("{name}_test.ild")), &test).unwrap();
    }
    let p = |n: &str| dir.join(n);

    let opt = |total: usize, lr: f64| OptimizerSection {
        peak_lr: lr,
        warmup_steps: 100,
        total_steps: total,
        batch_size: 16,
        fisher_samples: 64,
        grad_clip: 5.0,
    };

    let t0 = Instant::now();
    let pre_spec = StageSpec {
        stage: 1,
        method: Method::Pretrain,
        train_paths: vec![p("base_train.ild")],
        test_paths: vec![p("base_test.ild"), p("accent_test.ild")],
        teacher_path: None,
        out_ckpt: p("pretrain.ilck"),
        out_dir: dir.join("pretrain"),
        seed,
        weights: LossWeights { temperature: 1.0, beta: 0.0, gamma: 0.0, lambda_ewc: 0.0 },
        optimizer: opt(800, 3e-3),
        model: Some(config),
        snapshot_toml: String::new(),
    };
    let pre = train_stage(&pre_spec).unwrap();
    eprintln!(
        "pretrain {:.1}s: base {:.2}% accent {:.2}%",
        t0.elapsed().as_secs_f64(),
        pre.reports[0].1.corpus_cer * 100.0,
        pre.reports[1].1.corpus_cer * 100.0
    );

    let t1 = Instant::now();
    let spec = StageSpec {
        stage: 2,
        method: Method::EbkdRbkd,
        train_paths: vec![p("accent_train.ild")],
        test_paths: vec![p("base_test.ild"), p("accent_test.ild")],
        teacher_path: Some(p("pretrain.ilck")),
        out_ckpt: p("ebkd.ilck"),
        out_dir: dir.join("ebkd"),
        seed,
        weights: LossWeights { temperature: 3.0, beta, gamma, lambda_ewc: 0.0 },
        optimizer: opt(steps, lr),
        model: None,
        snapshot_toml: String::new(),
    };
    let out = train_stage(&spec).unwrap();
    eprintln!(
        "ebkd gamma={gamma} lr={lr}: {:.1}s base {:.2}% accent {:.2}%",
        t1.elapsed().as_secs_f64(),
        out.reports[0].1.corpus_cer * 100.0,
        out.reports[1].1.corpus_cer * 100.0
    );

    // reference: rbkd only with the same budget
    let mut rspec = spec.clone();
    rspec.method = Method::Rbkd;
    rspec.weights = LossWeights { temperature: 3.0, beta, gamma: 0.0, lambda_ewc: 0.0 };
    rspec.out_ckpt = p("rbkd.ilck");
    rspec.out_dir = dir.join("rbkd");
    let r = train_stage(&rspec).unwrap();
    eprintln!(
        "rbkd reference: base {:.2}% accent {:.2}%",
        r.reports[0].1.corpus_cer * 100.0,
        r.reports[1].1.corpus_cer * 100.0
    );
    let accent_test = io::read_dataset(&p("accent_test.ild")).unwrap();
    let teacher_eval = evaluate_checkpoint(&pre.checkpoint, &accent_test, 1, "pre", seed, None).unwrap();
    eprintln!("teacher accent CER {:.2}%", teacher_eval.corpus_cer * 100.0);
}
