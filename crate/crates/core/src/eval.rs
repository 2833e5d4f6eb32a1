//! Greedy decoding over a split and metric reporting.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::data::io::SplitData;
use crate::data::synth::QuestionType;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ScoredPair};
use crate::model::VqaModel;

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "CTVQA_THREADS";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub volume_id: String,
    pub question: String,
    pub question_type: QuestionType,
    pub reference: String,
    pub prediction: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
}

/// Available cores, capped by `CTVQA_THREADS` when it is set.
pub fn worker_threads() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cores.min(cap),
        _ => cores,
    }
}

/// Decodes every item. Results are returned in item order whatever the
/// thread count.
pub fn predict_split(model: &VqaModel, data: &SplitData, threads: usize) -> Result<Vec<Prediction>> {
    let vocab = Vocabulary::synthetic();
    let index = data.volume_index();
    let predict = |i: usize| -> Result<Prediction> {
        let item = &data.items[i];
        let &v = index
            .get(item.volume_id.as_str())
            .ok_or_else(|| Error::Data(format!("question refers to unknown volume '{}'", item.volume_id)))?;
        let ids = vocab.encode_lossy(&item.question).ids;
        let decoded = model.decode_volume(&data.volumes[v], &ids)?;
        Ok(Prediction {
            volume_id: item.volume_id.clone(),
            question: item.question.clone(),
            question_type: item.question_type,
            reference: item.answer.clone(),
            prediction: vocab.decode(&decoded.tokens),
        })
    };

    let n = data.items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(predict).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Vec<Result<Prediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let predict = &predict;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(predict).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}

pub fn report(predictions: &[Prediction]) -> Result<MetricReport> {
    MetricReport::aggregate(predictions.iter().map(|p| ScoredPair {
        question_type: p.question_type.as_str(),
        prediction: &p.prediction,
        reference: &p.reference,
    }))
}

pub fn evaluate_split(model: &VqaModel, data: &SplitData, threads: usize) -> Result<Evaluation> {
    let predictions = predict_split(model, data, threads)?;
    let report = report(&predictions)?;
    Ok(Evaluation { predictions, report })
}
