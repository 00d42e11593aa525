//! Per-sample correlation analysis between recognition error and the
//! attention-map distillation distance on an original-task test set.

use std::path::Path;

use ilctc_core::decode::pearson_correlation;
use ilctc_core::rng::SeededRng;
use ilctc_core::synth::Dataset;

use crate::error::CliError;
use crate::io;
use crate::train::evaluate_checkpoint;

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    /// (sample id, ref len, edits, CER, attention distance)
    pub rows: Vec<(usize, usize, usize, f64, f64)>,
    /// Pearson r over samples with CER > 0, or why it is undefined.
    pub r_errors_only: Result<f64, String>,
    /// Pearson r over every sampled utterance.
    pub r_all: Result<f64, String>,
    pub n_sampled: usize,
    pub seed: u64,
}

impl AnalyzeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,ref_len,edits,cer,ebkd_loss\n");
        for (id, ref_len, edits, cer, ebkd) in &self.rows {
            out.push_str(&format!("{id},{ref_len},{edits},{cer},{ebkd}\n"));
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let fmt = |r: &Result<f64, String>| match r {
            Ok(v) => format!("{v:.4}"),
            Err(why) => format!("undefined ({why})"),
        };
        format!(
            "n_sampled = {}\nseed = {}\npearson_cer_gt0 = {}\npearson_all = {}\n",
            self.n_sampled,
            self.seed,
            fmt(&self.r_errors_only),
            fmt(&self.r_all)
        )
    }
}

/// Samples `n` utterances uniformly (seeded), computes each one's CER
/// under the student and its attention-map distance to the teacher, and
/// reports the correlation for the CER>0 subset and for all samples.
pub fn analyze_correlation(
    student: &ilctc_core::model::Checkpoint,
    teacher: &ilctc_core::model::Checkpoint,
    dataset: &Dataset,
    n: usize,
    seed: u64,
) -> Result<AnalyzeReport, CliError> {
    if student.config != teacher.config {
        return Err(CliError::config(
            "student and teacher checkpoints use different model configs",
        ));
    }
    if n == 0 {
        return Err(CliError::config("need n >= 1 samples"));
    }
    if n > dataset.len() {
        return Err(CliError::config(format!(
            "n = {n} exceeds the test set size {}",
            dataset.len()
        )));
    }
    let indices = SeededRng::new(seed).sample_indices(dataset.len(), n);
    let subset = Dataset {
        input_dim: dataset.input_dim,
        alphabet_size: dataset.alphabet_size,
        samples: indices.iter().map(|&i| dataset.samples[i].clone()).collect(),
    };
    let report = evaluate_checkpoint(student, &subset, 0, "analyze", seed, Some(teacher))?;

    let mut rows = Vec::with_capacity(n);
    for (pos, s) in report.samples.iter().enumerate() {
        let ebkd = s.ebkd_loss.expect("teacher supplied");
        rows.push((indices[pos], s.ref_len, s.edits, s.cer, ebkd));
    }
    let all_cer: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let all_ebkd: Vec<f64> = rows.iter().map(|r| r.4).collect();
    let err_pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.3 > 0.0)
        .map(|r| (r.3, r.4))
        .collect();
    let err_cer: Vec<f64> = err_pairs.iter().map(|p| p.0).collect();
    let err_ebkd: Vec<f64> = err_pairs.iter().map(|p| p.1).collect();

    let r_all = pearson_correlation(&all_cer, &all_ebkd).map_err(|e| e.to_string());
    let r_errors_only = pearson_correlation(&err_cer, &err_ebkd).map_err(|e| e.to_string());
    Ok(AnalyzeReport {
        rows,
        r_errors_only,
        r_all,
        n_sampled: n,
        seed,
    })
}

pub fn write_report(report: &AnalyzeReport, out_dir: &Path) -> Result<(), CliError> {
    io::write_text(&out_dir.join("analyze_samples.csv"), &report.to_csv())?;
    io::write_text(&out_dir.join("analyze_summary.txt"), &report.summary_text())
}
