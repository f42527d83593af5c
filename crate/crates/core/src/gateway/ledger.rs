//! Per-campaign record of every attempt, its outcome and its cost.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{RawReport, RunKey, ScoreCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CacheHit,
    Success,
    TransientFailure,
    PermanentFailure,
    RetryExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Position of the request in the submitted list.
    pub seq: usize,
    pub article_id: String,
    pub model_id: String,
    pub run_index: u32,
    pub prompt_sha256: String,
    /// 0 for cache hits, otherwise the 1-based backend attempt.
    pub attempt: u32,
    pub outcome: Outcome,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
}

impl RunLedger {
    /// Σ unit cost over successful (non-cached) requests.
    pub fn total_cost(&self) -> f64 {
        self.entries.iter().map(|e| e.cost).sum()
    }

    pub fn retries(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.outcome == Outcome::TransientFailure)
            .count()
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.entries.iter().filter(|e| e.outcome == outcome).count()
    }

    /// Rebuilds the campaign's reports from the cache alone.
    pub fn replay(&self, cache: &ScoreCache) -> Vec<RawReport> {
        self.entries
            .iter()
            .filter(|e| matches!(e.outcome, Outcome::Success | Outcome::CacheHit))
            .filter_map(|e| {
                let hit = cache.get(&e.model_id, &e.prompt_sha256, e.run_index)?;
                Some(RawReport {
                    key: RunKey {
                        article_id: e.article_id.clone(),
                        model_id: e.model_id.clone(),
                        run_index: e.run_index,
                    },
                    report_text: hit.report_text,
                    received_at: hit.received_at,
                    backend_meta: hit.backend_meta,
                })
            })
            .collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}
