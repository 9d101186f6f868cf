//! Fixed benchmark fixtures: a 500 + 500 corpus with prescribed confusion
//! counts, and a four-bucket hard split with prescribed hits per bucket.

use super::{balanced_corpus, hard_split_corpus};
use crate::bench::PredictionRecord;
use crate::domain::{GroundTruth, Status, VideoDescriptor};

pub type Corpus = Vec<(VideoDescriptor, GroundTruth)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionPlan {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

/// 455 / 45 / 362 / 138 on 500 abnormal and 500 normal videos.
pub const MAIN_TABLE_PLAN: ConfusionPlan = ConfusionPlan { tp: 455, fn_: 45, tn: 362, fp: 138 };

/// Hit counts per hard-split bucket out of 100.
pub const HARD_SPLIT_HITS: [usize; 4] = [70, 69, 76, 71];

/// A corpus and status-only predictions realizing `plan` exactly.
pub fn confusion_fixture(seed: u64, plan: ConfusionPlan) -> (Corpus, Vec<PredictionRecord>) {
    let n_normal = plan.tn + plan.fp;
    let corpus = balanced_corpus(seed, n_normal, plan.tp + plan.fn_);
    let preds = corpus
        .iter()
        .enumerate()
        .map(|(i, (v, gt))| {
            let flagged = if gt.is_abnormal() { i - n_normal < plan.tp } else { i >= plan.tn };
            PredictionRecord::status_only(v.id.clone(), if flagged { Status::Abnormal } else { Status::Normal })
        })
        .collect();
    (corpus, preds)
}

/// The hard-split corpus with the first `hits[b]` videos of bucket `b`
/// predicted abnormal (with their exact windows) and the rest normal.
pub fn hard_split_fixture(seed: u64, per_bucket: usize, hits: [usize; 4]) -> (Corpus, Vec<PredictionRecord>) {
    let corpus = hard_split_corpus(seed, per_bucket);
    let preds = corpus
        .iter()
        .enumerate()
        .map(|(i, (v, gt))| {
            if i % per_bucket < hits[i / per_bucket] {
                let mut p = PredictionRecord::status_only(v.id.clone(), Status::Abnormal);
                p.windows = gt.anomalies.iter().map(|a| a.span).collect();
                p.types = Some(gt.types());
                p
            } else {
                PredictionRecord::status_only(v.id.clone(), Status::Normal)
            }
        })
        .collect();
    (corpus, preds)
}
