//! Greedy CTC decoding, character error rate and the correlation
//! statistic used by the per-sample analysis.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::Posteriors;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("corpus CER needs a positive total reference length")]
    EmptyReference,
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
}

/// A decoded label sequence: blank-free, consecutive repeats collapsed.
/// Repeats of the same symbol are legitimate after collapsing (they were
/// separated by a blank in the path).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript(pub Vec<usize>);

/// Best-path decoding: per-frame argmax over unmasked frames, collapse
/// consecutive repeats, then drop blanks. Argmax ties break toward the
/// lowest symbol index.
pub fn greedy_decode(posteriors: &Posteriors, blank: usize) -> Transcript {
    let m = posteriors.alphabet_size();
    let data = posteriors.log_probs.data();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for k in 0..posteriors.num_frames() {
        if !posteriors.mask.0[k] {
            continue;
        }
        let row = &data[k * m..(k + 1) * m];
        let mut best = 0;
        for j in 1..m {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    Transcript(out)
}

/// Levenshtein distance: minimal insertions + deletions + substitutions.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let n = hypothesis.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = alloc::vec![0usize; n + 1];
    for (i, &r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Corpus character error rate: total edits over total reference length
/// (not the mean of per-sample rates). Returned as a ratio; emitted
/// tables format it as a percentage with two decimals. Hypotheses longer
/// than their references can push this above 1, reported as-is.
pub fn corpus_cer(per_sample: &[(usize, usize)]) -> Result<f64, MetricsError> {
    let edits: usize = per_sample.iter().map(|(e, _)| e).sum();
    let total_ref: usize = per_sample.iter().map(|(_, l)| l).sum();
    if total_ref == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(edits as f64 / total_ref as f64)
}

/// Standard Pearson correlation coefficient.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(MetricsError::UndefinedCorrelation(alloc::format!(
            "need two equal-length series of at least 3 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x) * (x - mean_x);
        var_y += (y - mean_y) * (y - mean_y);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(MetricsError::UndefinedCorrelation(
            "a series is constant".into(),
        ));
    }
    Ok(cov / libm::sqrt(var_x * var_y))
}

/// Per-sample evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub sample_id: usize,
    pub ref_len: usize,
    pub edits: usize,
    /// Edit distance over reference length, as a ratio.
    pub cer: f64,
    pub ebkd_loss: Option<f64>,
}

/// Evaluation of one checkpoint on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    /// Ratio (not percent).
    pub corpus_cer: f64,
    pub stage: u32,
    pub method: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn build(
        mut samples: Vec<SampleEval>,
        stage: u32,
        method: String,
        seed: u64,
    ) -> Result<Self, MetricsError> {
        samples.sort_by_key(|s| s.sample_id);
        let pairs: Vec<(usize, usize)> = samples.iter().map(|s| (s.edits, s.ref_len)).collect();
        let corpus_cer = corpus_cer(&pairs)?;
        Ok(EvalReport {
            samples,
            corpus_cer,
            stage,
            method,
            seed,
        })
    }

    /// CSV with the per-sample rows. The `ebkd_loss` column is empty when
    /// the evaluation did not compute attention distances.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,ref_len,edits,cer,ebkd_loss\n");
        for s in &self.samples {
            out.push_str(&alloc::format!(
                "{},{},{},{},{}\n",
                s.sample_id,
                s.ref_len,
                s.edits,
                s.cer,
                s.ebkd_loss.map(|v| alloc::format!("{v}")).unwrap_or_default()
            ));
        }
        out
    }

    /// Corpus summary as a structured-text record.
    pub fn summary_text(&self) -> String {
        alloc::format!(
            "corpus_cer = {:.2}\nn_samples = {}\nstage = {}\nmethod = \"{}\"\nseed = {}\n",
            self.corpus_cer * 100.0,
            self.samples.len(),
            self.stage,
            self.method,
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrameMask;
    use alloc::vec;

    fn posteriors_from_argmax(rows: &[usize], m: usize) -> Posteriors {
        let prob_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|&winner| {
                let rest = 0.2 / (m - 1) as f64;
                (0..m).map(|j| if j == winner { 0.8 } else { rest }).collect()
            })
            .collect();
        Posteriors::from_prob_rows(&prob_rows, FrameMask::all_valid(rows.len())).unwrap()
    }

    #[test]
    fn collapse_rule() {
        let p = posteriors_from_argmax(&[0, 1, 1, 0, 2], 3);
        assert_eq!(greedy_decode(&p, 0).0, vec![1, 2]);
    }

    #[test]
    fn all_blank_decodes_empty() {
        let p = posteriors_from_argmax(&[0, 0, 0], 3);
        assert_eq!(greedy_decode(&p, 0).0, Vec::<usize>::new());
    }

    #[test]
    fn blank_separates_repeats() {
        let p = posteriors_from_argmax(&[1, 0, 1], 3);
        assert_eq!(greedy_decode(&p, 0).0, vec![1, 1]);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 9, 3]), 1);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2]), 1);
    }

    #[test]
    fn corpus_cer_examples() {
        let r = corpus_cer(&[(1, 3), (0, 3)]).unwrap();
        assert!((r - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(corpus_cer(&[(0, 4), (0, 2)]).unwrap(), 0.0);
        // empty hypothesis against a 4-symbol reference: 100%
        assert_eq!(corpus_cer(&[(4, 4)]).unwrap(), 1.0);
        assert!(matches!(corpus_cer(&[(0, 0)]), Err(MetricsError::EmptyReference)));
    }

    #[test]
    fn corpus_cer_is_order_invariant() {
        let a = corpus_cer(&[(1, 3), (2, 5), (0, 7)]).unwrap();
        let b = corpus_cer(&[(0, 7), (1, 3), (2, 5)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson_correlation(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_correlation(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson_correlation(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert!(pearson_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }
}
