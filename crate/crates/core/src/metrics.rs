//! Sentence BLEU, ROUGE-L, exact match and per-question-type reports.
//!
//! Scores are on a 0–100 scale. BLEU is computed per sentence and averaged;
//! there is no corpus-level pooling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::synth::QuestionType;
use crate::error::Result;

/// Lower-cased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and the number of candidate n-grams.
pub fn clipped_matches<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if n == 0 || candidate.len() < n {
        return (0, 0);
    }
    let refs = ngram_counts(reference, n);
    let matched = ngram_counts(candidate, n)
        .into_iter()
        .map(|(g, c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len() + 1 - n)
}

/// Sentence BLEU up to 4-grams (fewer for short candidates), with add-one
/// smoothing of zero match counts above unigrams.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let max_n = candidate.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, total) = clipped_matches(candidate, reference, n);
        let p = if m > 0 {
            m as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * brevity * (log_sum / max_n as f64).exp()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    // F1 of l/|c| and l/|r|, written so that swapping arguments is exact
    100.0 * 2.0 * l as f64 / (candidate.len() + reference.len()) as f64
}

fn normalize(s: &str) -> String {
    tokenize(s).join(" ")
}

/// 100 when the strings agree after case folding and whitespace
/// normalisation, else 0.
pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if normalize(candidate) == normalize(reference) {
        100.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub exact_match: f64,
}

impl Scores {
    pub fn of(candidate: &str, reference: &str) -> Self {
        let (c, r) = (tokenize(candidate), tokenize(reference));
        Self {
            bleu: bleu(&c, &r),
            rouge_l: rouge_l(&c, &r),
            exact_match: exact_match(candidate, reference),
        }
    }

    fn mean_of<'a>(rows: impl IntoIterator<Item = &'a Scores>) -> Self {
        let mut sum = Scores::default();
        let mut n = 0usize;
        for s in rows {
            sum.bleu += s.bleu;
            sum.rouge_l += s.rouge_l;
            sum.exact_match += s.exact_match;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Self {
            bleu: sum.bleu / n,
            rouge_l: sum.rouge_l / n,
            exact_match: sum.exact_match / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    #[serde(flatten)]
    pub scores: Scores,
    pub count: usize,
}

/// Per-type averages plus the unweighted mean over the types present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub by_type: BTreeMap<QuestionType, TypeScores>,
    pub mean: Scores,
}

/// One scored prediction.
#[derive(Clone, Copy, Debug)]
pub struct ScoredPair<'a> {
    pub question_type: &'a str,
    pub prediction: &'a str,
    pub reference: &'a str,
}

impl MetricReport {
    pub fn aggregate<'a>(pairs: impl IntoIterator<Item = ScoredPair<'a>>) -> Result<Self> {
        let mut grouped: BTreeMap<QuestionType, Vec<Scores>> = BTreeMap::new();
        for pair in pairs {
            let kind: QuestionType = pair.question_type.parse()?;
            grouped
                .entry(kind)
                .or_default()
                .push(Scores::of(pair.prediction, pair.reference));
        }
        let by_type: BTreeMap<QuestionType, TypeScores> = grouped
            .into_iter()
            .map(|(k, rows)| {
                (
                    k,
                    TypeScores {
                        scores: Scores::mean_of(&rows),
                        count: rows.len(),
                    },
                )
            })
            .collect();
        let mean = Scores::mean_of(by_type.values().map(|t| &t.scores));
        Ok(Self { by_type, mean })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Metrics as rows, question types and the mean as columns.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Metric".to_string()];
        let mut columns: Vec<Option<&Scores>> = Vec::new();
        for k in QuestionType::ALL {
            let mut name = k.as_str().to_string();
            name[..1].make_ascii_uppercase();
            header.push(name);
            columns.push(self.by_type.get(k).map(|t| &t.scores));
        }
        header.push("Mean".into());
        columns.push(Some(&self.mean));

        let metrics: [(&str, fn(&Scores) -> f64); 3] = [
            ("BLEU", |s| s.bleu),
            ("ROUGE-L", |s| s.rouge_l),
            ("ExactMatch", |s| s.exact_match),
        ];
        let mut rows = vec![header];
        for (name, get) in metrics {
            let mut row = vec![name.to_string()];
            row.extend(columns.iter().map(|c| match c {
                Some(s) => format!("{:.2}", get(s)),
                None => "-".to_string(),
            }));
            rows.push(row);
        }
        let mut count_row = vec!["Count".to_string()];
        let mut total = 0;
        for k in QuestionType::ALL {
            let c = self.by_type.get(k).map_or(0, |t| t.count);
            total += c;
            count_row.push(c.to_string());
        }
        count_row.push(total.to_string());
        rows.push(count_row);

        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    if c == 0 {
                        format!("{cell:<w$}", w = widths[c])
                    } else {
                        format!("{cell:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&t("the lesion is here"), &t("the lesion is here")), 100.0);
        assert_eq!(bleu(&t(""), &t("axial")), 0.0);
        assert_eq!(clipped_matches(&t("the the the the"), &t("the cat"), 1), (1, 4));
        // single token candidates only use unigrams
        assert_eq!(bleu(&t("axial"), &t("axial")), 100.0);
        let b = bleu(&t("upper left"), &t("upper left quadrant"));
        assert!((b - 100.0 * (1.0f64 - 1.5).exp()).abs() < 1e-9, "{b}");
    }

    #[test]
    fn bleu_smooths_missing_bigrams() {
        // unigrams all match, no bigram does: p1 = 1, p2 = 1/(1+1)
        let b = bleu(&t("left upper"), &t("upper left"));
        assert!((b - 100.0 * 0.5f64.sqrt()).abs() < 1e-9, "{b}");
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&t("a b c"), &t("a b c")), 100.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
        assert_eq!(lcs_len(&t("a b c d"), &t("a c b d")), 3);
        assert!((rouge_l(&t("a b c d"), &t("a c b d")) - 75.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("Axial", "axial"), 100.0);
        assert_eq!(exact_match("axial ", "axial"), 100.0);
        assert_eq!(exact_match("axial plane", "axial"), 0.0);
    }

    #[test]
    fn report_means() {
        let pairs = [
            ScoredPair {
                question_type: "plane",
                prediction: "axial",
                reference: "axial",
            },
            ScoredPair {
                question_type: "organ",
                prediction: "liver",
                reference: "spleen",
            },
        ];
        let r = MetricReport::aggregate(pairs).unwrap();
        assert_eq!(r.by_type.len(), 2);
        assert_eq!(r.mean.exact_match, 50.0);
        assert_eq!(r.by_type[&QuestionType::Plane].count, 1);

        let bad = ScoredPair {
            question_type: "colour",
            prediction: "a",
            reference: "a",
        };
        assert!(matches!(MetricReport::aggregate([bad]), Err(Error::Data(_))));
    }

    #[test]
    fn report_json_and_table_layout() {
        let pairs = [ScoredPair {
            question_type: "location",
            prediction: "upper left quadrant",
            reference: "upper left quadrant",
        }];
        let r = MetricReport::aggregate(pairs).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["by_type"]["location"]["bleu"], 100.0);
        assert_eq!(v["mean"]["exact_match"], 100.0);
        let table = r.to_table();
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(cols, ["Metric", "Plane", "Phase", "Organ", "Abnormality", "Location", "Mean"]);
        assert!(table.contains("ExactMatch"));
    }
}
