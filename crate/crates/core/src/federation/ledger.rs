use std::io::Write;

use serde::{Deserialize, Serialize};

use super::client::ClientStats;
use crate::error::Result;
use crate::metrics::ClientScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFault {
    pub client_id: u32,
    pub message: String,
}

/// Round means of every loss part. Client parts average over the clients that
/// finished the round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub seg_global: f64,
    pub seg_local: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub intra: f64,
    pub discriminator: f64,
    pub distill: f64,
    pub inter: f64,
    pub server: f64,
}

impl LossMeans {
    pub(crate) fn add_clients(&mut self, stats: &[ClientStats]) {
        if stats.is_empty() {
            return;
        }
        let f = 1.0 / stats.len() as f64;
        for s in stats.iter().map(|s| s.scaled(f)) {
            self.seg_global += s.seg_global;
            self.seg_local += s.seg_local;
            self.adv_global += s.adv_global;
            self.adv_local += s.adv_local;
            self.intra += s.intra;
            self.discriminator += s.discriminator;
        }
    }
}

/// One line of the round ledger. Round 0 holds the exemplar upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda: f64,
    pub selected: Vec<u32>,
    pub succeeded: Vec<u32>,
    pub faults: Vec<ClientFault>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub exemplars_uploaded: usize,
    pub distill_skipped: usize,
    pub losses: LossMeans,
    pub val: Vec<ClientScore>,
    pub miou: f64,
    pub acc: f64,
    /// Stability metric: mean val mIoU minus any injected drop.
    pub metric: f64,
    pub injected_drop: f64,
    pub rollback: bool,
    pub rollbacks: usize,
    pub best_round: Option<usize>,
    pub best_metric: Option<f64>,
    pub best_hash: Option<String>,
    pub params_hash: String,
    pub note: Option<String>,
}

impl RoundRecord {
    pub(crate) fn empty(round: usize) -> Self {
        Self {
            round,
            lambda: 0.0,
            selected: Vec::new(),
            succeeded: Vec::new(),
            faults: Vec::new(),
            bytes_up: 0,
            bytes_down: 0,
            exemplars_uploaded: 0,
            distill_skipped: 0,
            losses: LossMeans::default(),
            val: Vec::new(),
            miou: 0.0,
            acc: 0.0,
            metric: 0.0,
            injected_drop: 0.0,
            rollback: false,
            rollbacks: 0,
            best_round: None,
            best_metric: None,
            best_hash: None,
            params_hash: String::new(),
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub acc: f64,
    pub miou: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub lambda: f64,
    pub rollbacks: usize,
}

impl From<&RoundRecord> for SummaryRow {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            acc: r.acc,
            miou: r.miou,
            bytes_up: r.bytes_up,
            bytes_down: r.bytes_down,
            lambda: r.lambda,
            rollbacks: r.rollbacks,
        }
    }
}

pub fn write_ledger_jsonl<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
