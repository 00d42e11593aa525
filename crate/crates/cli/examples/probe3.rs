//! Full-protocol calibration probe: the 3-stage experiment exactly as the
//! acceptance suite runs it, for one seed. Not part of the test suite.

use std::path::PathBuf;
use std::time::Instant;

use ilctc_cli::analyze::analyze_correlation;
use ilctc_cli::config::{Method, OptimizerSection, StageSpec};
use ilctc_cli::io;
use ilctc_cli::train::train_stage;
use ilctc_core::losses::LossWeights;
use ilctc_core::model::{ConvSpec, ModelConfig};
use ilctc_core::synth::{derive_accent_task, derive_newwords_task, generate_task, TaskSpec};

struct Knobs {
    seed: u64,
    noise: f64,
    rotation: f64,
    gamma: f64,
    beta: f64,
    lambda: f64,
    pretrain_steps: usize,
    incr_steps: usize,
    incr_lr: f64,
    d_h: usize,
    s3_steps: usize,
    neww_n: usize,
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| a.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(d);
    let k = Knobs {
        seed: get(1, 1.0) as u64,
        noise: get(2, 1.0),
        rotation: get(3, 0.5),
        gamma: get(4, 100.0),
        beta: get(5, 0.03),
        lambda: get(6, 30000.0),
        pretrain_steps: get(7, 1000.0) as usize,
        incr_steps: get(8, 600.0) as usize,
        incr_lr: get(9, 1e-3),
        d_h: get(10, 32.0) as usize,
        s3_steps: get(11, 0.0) as usize,
        neww_n: get(12, 600.0) as usize,
    };
    let k = Knobs { s3_steps: if k.s3_steps == 0 { k.incr_steps } else { k.s3_steps }, ..k };
    let t0 = Instant::now();
    run_seed(&k);
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}

fn run_seed(k: &Knobs) {
    let dir = PathBuf::from(format!("/tmp/probe3_s{}_p{}", k.seed, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let f = 8;
    let m = 11;
    let config = ModelConfig {
        input_dim: f,
        conv_layers: vec![ConvSpec { channels: k.d_h, kernel: 3, stride: 2 }],
        num_sabs: 2,
        d_h: k.d_h,
        num_heads: 4,
        fc_dims: vec![64, m],
    };

    let base = TaskSpec::seeded_base(
        1, f, 6, m, (1..=6).collect(), k.noise, (3, 8), 600, k.seed * 1000 + 1,
    )
    .unwrap();
    let accent = {
        let mut t = derive_accent_task(&base, k.rotation, k.seed * 1000 + 50).unwrap();
        t.task_id = 2;
        t.seed = k.seed * 1000 + 2;
        t
    };
    let neww = {
        let mut t = derive_newwords_task(&base, &[7, 8, 9, 10], k.seed * 1000 + 60).unwrap();
        t.task_id = 3;
        t.seed = k.seed * 1000 + 3;
        t.num_samples = k.neww_n;
        t
    };
    for (name, spec) in [("base", &base), ("accent", &accent), ("neww", &neww)] {
        io::write_dataset(&dir.join(format!("{name}_train.ild")), &generate_task(spec).unwrap()).unwrap();
        let mut ts = spec.clone();
        ts.num_samples = 400;
        ts.seed = spec.seed + 7777;
        io::write_dataset(&dir.join(format!("{name}_test.ild")), &generate_task(&ts).unwrap()).unwrap();
    }
    let p = |n: &str| dir.join(n);
    let opt = |steps: usize, lr: f64| OptimizerSection {
        peak_lr: lr,
        warmup_steps: 100,
        total_steps: steps,
        batch_size: 16,
        fisher_samples: 64,
        grad_clip: 5.0,
    };
    let zero = LossWeights { temperature: 3.0, beta: 0.0, gamma: 0.0, lambda_ewc: 0.0 };

    let spec = |name: &str, method: Method, stage, train: Vec<PathBuf>, test: Vec<PathBuf>, teacher, weights, steps, lr, with_model: bool| StageSpec {
        stage,
        method,
        train_paths: train,
        test_paths: test,
        teacher_path: teacher,
        out_ckpt: dir.join(format!("{name}.ilck")),
        out_dir: dir.join(name),
        seed: k.seed,
        weights,
        optimizer: opt(steps, lr),
        model: with_model.then(|| config.clone()),
        snapshot_toml: String::new(),
    };

    let pre = train_stage(&spec(
        "pre", Method::Pretrain, 1,
        vec![p("base_train.ild")], vec![p("base_test.ild")],
        None, zero, k.pretrain_steps, 3e-3, true,
    ))
    .unwrap();
    eprintln!("pretrain base CER {:.2}%", pre.reports[0].1.corpus_cer * 100.0);

    let methods: Vec<(&str, Method, LossWeights)> = vec![
        ("finetune", Method::Finetune, zero),
        ("rbkd", Method::Rbkd, LossWeights { temperature: 3.0, beta: k.beta, gamma: 0.0, lambda_ewc: 0.0 }),
        ("rbkd_ewc", Method::RbkdEwc, LossWeights { temperature: 3.0, beta: k.beta, gamma: 0.0, lambda_ewc: k.lambda }),
        ("ebkd_rbkd", Method::EbkdRbkd, LossWeights { temperature: 3.0, beta: k.beta, gamma: k.gamma, lambda_ewc: 0.0 }),
    ];
    eprintln!("method: [s2 base accent | s3 base accent neww] orig_mean new_mean");
    let mut results = Vec::new();
    for (name, method, weights) in &methods {
        let s2 = train_stage(&spec(
            &format!("{name}_s2"), *method, 2,
            vec![p("accent_train.ild")], vec![p("base_test.ild"), p("accent_test.ild")],
            Some(p("pre.ilck")), *weights, k.incr_steps, k.incr_lr, false,
        ))
        .unwrap();
        let s3 = train_stage(&spec(
            &format!("{name}_s3"), *method, 3,
            vec![p("neww_train.ild")],
            vec![p("base_test.ild"), p("accent_test.ild"), p("neww_test.ild")],
            Some(p(&format!("{name}_s2.ilck"))), *weights, k.s3_steps, k.incr_lr, false,
        ))
        .unwrap();
        let c = |o: &ilctc_cli::train::StageOutcome, i: usize| o.reports[i].1.corpus_cer * 100.0;
        let orig = ((c(&s2, 0)) + (c(&s3, 0) + c(&s3, 1)) / 2.0) / 2.0;
        let new = (c(&s2, 1) + c(&s3, 2)) / 2.0;
        eprintln!(
            "{name}: [{:.2} {:.2} | {:.2} {:.2} {:.2}] orig {:.2} new {:.2}",
            c(&s2, 0), c(&s2, 1), c(&s3, 0), c(&s3, 1), c(&s3, 2), orig, new
        );
        results.push((name.to_string(), orig, new));
    }

    // joint reference
    let j2 = train_stage(&spec(
        "joint_s2", Method::Joint, 2,
        vec![p("base_train.ild"), p("accent_train.ild")],
        vec![p("base_test.ild"), p("accent_test.ild")],
        None, zero, k.pretrain_steps, 3e-3, true,
    ))
    .unwrap();
    let j3 = train_stage(&spec(
        "joint_s3", Method::Joint, 3,
        vec![p("base_train.ild"), p("accent_train.ild"), p("neww_train.ild")],
        vec![p("base_test.ild"), p("accent_test.ild"), p("neww_test.ild")],
        None, zero, k.pretrain_steps, 3e-3, true,
    ))
    .unwrap();
    let c = |o: &ilctc_cli::train::StageOutcome, i: usize| o.reports[i].1.corpus_cer * 100.0;
    let joint_orig = (c(&j2, 0) + (c(&j3, 0) + c(&j3, 1)) / 2.0) / 2.0;
    let joint_new = (c(&j2, 1) + c(&j3, 2)) / 2.0;
    eprintln!(
        "joint: [{:.2} {:.2} | {:.2} {:.2} {:.2}] orig {:.2} new {:.2}",
        c(&j2, 0), c(&j2, 1), c(&j3, 0), c(&j3, 1), c(&j3, 2), joint_orig, joint_new
    );

    // criterion-8 style correlation: rbkd stage 2 vs pretrain teacher
    let student = io::read_checkpoint(&p("rbkd_s2.ilck")).unwrap();
    let teacher = io::read_checkpoint(&p("pre.ilck")).unwrap();
    let base_test = io::read_dataset(&p("base_test.ild")).unwrap();
    let report = analyze_correlation(&student, &teacher, &base_test, 400, k.seed).unwrap();
    eprintln!(
        "correlation: errors-only {:?} all {:?}",
        report.r_errors_only, report.r_all
    );

    // verdict sketch
    let ft = &results[0];
    let rb = &results[1];
    let ew = &results[2];
    let eb = &results[3];
    eprintln!(
        "check: ft>{:.2} rb>{:.2} eb {:.2} | eb<=1.5*joint({:.2}) {} | eb_new {:.2} <= 1.2*ft_new({:.2}) {} | ewc: orig {:.2}<=rb {} new {:.2}>eb {}",
        ft.1, rb.1, eb.1,
        1.5 * joint_orig, eb.1 <= 1.5 * joint_orig,
        eb.2, 1.2 * ft.2, eb.2 <= 1.2 * ft.2,
        ew.1, ew.1 <= rb.1,
        ew.2, ew.2 > eb.2,
    );
}
