//! Per-client, per-phase byte counters.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Server sends the shared initial model (counted only when enabled).
    InitDown,
    /// One-shot upload of the locally trained model.
    Phase1Up,
    /// Ensemble broadcast.
    Phase1Down,
    /// Label counts or competency matrices for static aggregators.
    StaticUp,
    /// Aggregator parameters, client to server.
    Phase2Up,
    /// Aggregator parameters, server to client.
    Phase2Down,
    /// Iterative FL baseline traffic.
    FlUp,
    FlDown,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::InitDown,
        Phase::Phase1Up,
        Phase::Phase1Down,
        Phase::StaticUp,
        Phase::Phase2Up,
        Phase::Phase2Down,
        Phase::FlUp,
        Phase::FlDown,
    ];

    pub fn is_upload(self) -> bool {
        matches!(
            self,
            Phase::Phase1Up | Phase::StaticUp | Phase::Phase2Up | Phase::FlUp
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::InitDown => "init_down",
            Phase::Phase1Up => "phase1_up",
            Phase::Phase1Down => "phase1_down",
            Phase::StaticUp => "static_up",
            Phase::Phase2Up => "phase2_up",
            Phase::Phase2Down => "phase2_down",
            Phase::FlUp => "fl_up",
            Phase::FlDown => "fl_down",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Counters only ever grow; totals are derived, never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CommLedger {
    clients: BTreeMap<usize, BTreeMap<Phase, u64>>,
}

impl CommLedger {
    pub fn new(num_clients: usize) -> Self {
        Self {
            clients: (0..num_clients).map(|c| (c, BTreeMap::new())).collect(),
        }
    }

    pub fn record(&mut self, client: usize, phase: Phase, bytes: u64) {
        *self
            .clients
            .entry(client)
            .or_default()
            .entry(phase)
            .or_insert(0) += bytes;
    }

    pub fn get(&self, client: usize, phase: Phase) -> u64 {
        self.clients
            .get(&client)
            .and_then(|m| m.get(&phase))
            .copied()
            .unwrap_or(0)
    }

    pub fn clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.clients.keys().copied()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_total(&self, client: usize) -> u64 {
        self.clients.get(&client).map_or(0, |m| m.values().sum())
    }

    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.clients.values().filter_map(|m| m.get(&phase)).sum()
    }

    pub fn total(&self) -> u64 {
        self.clients.values().flat_map(|m| m.values()).sum()
    }

    pub fn up_total(&self) -> u64 {
        self.filtered(true)
    }

    pub fn down_total(&self) -> u64 {
        self.filtered(false)
    }

    fn filtered(&self, up: bool) -> u64 {
        self.clients
            .values()
            .flat_map(|m| m.iter())
            .filter(|(p, _)| p.is_upload() == up)
            .map(|(_, b)| b)
            .sum()
    }

    /// Mean per-client total.
    pub fn mean_client_total(&self) -> f64 {
        if self.clients.is_empty() {
            0.0
        } else {
            self.total() as f64 / self.clients.len() as f64
        }
    }

    /// Fold another ledger's counters into this one.
    pub fn merge(&mut self, other: &CommLedger) {
        for (&c, phases) in &other.clients {
            for (&p, &b) in phases {
                self.record(c, p, b);
            }
        }
    }

    /// `{client_id: {phase: bytes}}`, keys sorted.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ledger serializes")
    }
}
