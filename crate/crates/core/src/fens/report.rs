//! Communication cost summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ledger::{CommLedger, Phase};

/// Per-client bytes of a FENS run in closed form: upload, ensemble download,
/// `rounds` aggregator exchanges of `agg_bytes` each way, and static-fit
/// payloads.
pub fn fens_closed_form(upload: u64, shipped: &[u64], rounds: u64, agg_bytes: u64, static_bytes: u64) -> u64 {
    upload + shipped.iter().sum::<u64>() + 2 * rounds * agg_bytes + static_bytes
}

/// Analytic per-client costs for a homogeneous federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// FP32 bytes of one local model.
    pub model_bytes: u64,
    /// Bytes of one model as shipped in the broadcast.
    pub shipped_bytes: u64,
    pub num_clients: u64,
    pub agg_bytes: u64,
    pub rounds: u64,
    pub static_bytes: u64,
}

impl CostModel {
    pub fn fens_per_client(&self) -> u64 {
        self.model_bytes + self.num_clients * self.shipped_bytes + 2 * self.rounds * self.agg_bytes + self.static_bytes
    }

    /// FENS relative to one model upload per client.
    pub fn ratio_upload_only(&self) -> f64 {
        self.fens_per_client() as f64 / self.model_bytes as f64
    }

    /// FENS relative to one-shot FL when both also pay for downloading the
    /// initial model.
    pub fn ratio_with_init_download(&self) -> f64 {
        (self.fens_per_client() + self.model_bytes) as f64 / (2 * self.model_bytes) as f64
    }

    /// Iterative FL (full model both ways each round) relative to FENS.
    pub fn fl_over_fens(&self, fl_rounds: u64) -> f64 {
        (2 * fl_rounds * self.model_bytes) as f64 / self.fens_per_client() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub phase_totals: BTreeMap<Phase, u64>,
    pub up_total: u64,
    pub down_total: u64,
    pub num_clients: usize,
    /// Mean per-client bytes, excluding any initial-model download.
    pub fens_per_client: f64,
    pub ofl_per_client: f64,
    pub fens_over_ofl: f64,
    pub fens_over_ofl_with_init: f64,
    pub fl_rounds: usize,
    pub fl_per_client: f64,
    pub fl_over_fens: f64,
}

/// Summaries of a FENS ledger against one-shot FL (one FP32 upload of
/// `model_bytes` per client) and `fl_rounds` of iterative FL.
pub fn ledger_report(ledger: &CommLedger, model_bytes: u64, fl_rounds: usize) -> LedgerReport {
    let phase_totals: BTreeMap<Phase, u64> = Phase::ALL
        .into_iter()
        .map(|p| (p, ledger.phase_total(p)))
        .filter(|&(_, b)| b > 0)
        .collect();
    let n = ledger.num_clients().max(1) as f64;
    let fens = (ledger.total() - ledger.phase_total(Phase::InitDown)) as f64 / n;
    let b = model_bytes as f64;
    let fl = 2.0 * fl_rounds as f64 * b;
    LedgerReport {
        phase_totals,
        up_total: ledger.up_total(),
        down_total: ledger.down_total(),
        num_clients: ledger.num_clients(),
        fens_per_client: fens,
        ofl_per_client: b,
        fens_over_ofl: fens / b,
        fens_over_ofl_with_init: (fens + b) / (2.0 * b),
        fl_rounds,
        fl_per_client: fl,
        fl_over_fens: fl / fens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let c = CostModel {
            model_bytes: 100,
            shipped_bytes: 25,
            num_clients: 4,
            agg_bytes: 10,
            rounds: 2,
            static_bytes: 0,
        };
        assert_eq!(c.fens_per_client(), 240);
        assert!((c.ratio_upload_only() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn zero_rounds_unquantized() {
        let c = CostModel {
            model_bytes: 400,
            shipped_bytes: 400,
            num_clients: 7,
            agg_bytes: 10,
            rounds: 0,
            static_bytes: 0,
        };
        assert_eq!(c.ratio_upload_only(), 8.0);
    }

    #[test]
    fn rounds_are_linear() {
        let mut c = CostModel {
            model_bytes: 100,
            shipped_bytes: 25,
            num_clients: 4,
            agg_bytes: 10,
            rounds: 3,
            static_bytes: 0,
        };
        let before = c.fens_per_client();
        c.rounds = 8;
        assert_eq!(c.fens_per_client() - before, 2 * 10 * 5);
    }

    #[test]
    fn report_from_ledger() {
        let mut l = CommLedger::new(2);
        for i in 0..2 {
            l.record(i, Phase::Phase1Up, 100);
            l.record(i, Phase::Phase1Down, 200);
            l.record(i, Phase::Phase2Up, 10);
            l.record(i, Phase::Phase2Down, 10);
        }
        let r = ledger_report(&l, 100, 5);
        assert_eq!(r.fens_per_client, 320.0);
        assert_eq!(r.fens_over_ofl, 3.2);
        assert_eq!(r.fens_over_ofl_with_init, 2.1);
        assert_eq!(r.fl_per_client, 1000.0);
        assert_eq!(r.phase_totals[&Phase::Phase1Down], 400);
        assert_eq!(fens_closed_form(100, &[100, 100], 1, 10, 0), 320);
    }
}
