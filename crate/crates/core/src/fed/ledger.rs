//! Exact accounting of every client-to-server payload.

use std::fmt;

use crate::promptformer::PayloadKind;

/// Upload ratio quoted for the full-scale model. Reported next to the
/// configured ratio, never checked: it depends on an adapter rank that is
/// not known.
pub const REFERENCE_RATIO: f64 = 267.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: usize,
    pub kind: PayloadKind,
    pub param_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    selected: Vec<(usize, Vec<usize>)>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one round: its selected clients and their payloads.
    pub fn record_round(&mut self, round: usize, selected: Vec<usize>, payloads: impl IntoIterator<Item = (usize, PayloadKind, usize)>) {
        for (client, kind, param_count) in payloads {
            self.entries.push(LedgerEntry {
                round,
                client,
                kind,
                param_count,
            });
        }
        self.selected.push((round, selected));
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn selected(&self) -> &[(usize, Vec<usize>)] {
        &self.selected
    }

    pub fn rounds(&self) -> usize {
        self.selected.len()
    }

    /// Scalars sent in `round`, split into (full, adapter).
    pub fn round_totals(&self, round: usize) -> (usize, usize) {
        self.entries
            .iter()
            .filter(|e| e.round == round)
            .fold((0, 0), |(f, l), e| match e.kind {
                PayloadKind::FullParams => (f + e.param_count, l),
                PayloadKind::LoraOnly => (f, l + e.param_count),
            })
    }

    pub fn cumulative(&self) -> usize {
        self.entries.iter().map(|e| e.param_count).sum()
    }

    /// `round,client,kind,param_count,cumulative`, one row per payload.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,client,kind,param_count,cumulative\n");
        let mut total = 0;
        for e in &self.entries {
            total += e.param_count;
            s.push_str(&format!("{},{},{},{},{}\n", e.round, e.client, e.kind.as_str(), e.param_count, total));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub clients: usize,
    pub full_sent: usize,
    pub lora_sent: usize,
    /// Running total up to and including this round.
    pub cumulative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerReport {
    pub full_count: usize,
    pub lora_count: usize,
    /// `full_count / lora_count`.
    pub ratio: f64,
    pub rounds: Vec<RoundSummary>,
    pub full_sent: usize,
    pub lora_sent: usize,
    pub cumulative: usize,
}

/// Summarizes the ledger against the analytic payload sizes.
pub fn ledger_report(ledger: &CommLedger, full_count: usize, lora_count: usize) -> LedgerReport {
    let mut cumulative = 0;
    let mut rounds = Vec::with_capacity(ledger.rounds());
    for (round, selected) in ledger.selected() {
        let (f, l) = ledger.round_totals(*round);
        cumulative += f + l;
        rounds.push(RoundSummary {
            round: *round,
            clients: selected.len(),
            full_sent: f,
            lora_sent: l,
            cumulative,
        });
    }
    LedgerReport {
        full_count,
        lora_count,
        ratio: full_count as f64 / lora_count as f64,
        full_sent: rounds.iter().map(|r| r.full_sent).sum(),
        lora_sent: rounds.iter().map(|r| r.lora_sent).sum(),
        rounds,
        cumulative,
    }
}

impl fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "full payload: {} scalars", self.full_count)?;
        writeln!(f, "adapter payload: {} scalars", self.lora_count)?;
        writeln!(f, "full/adapter ratio: {:.2} (reference figure x{REFERENCE_RATIO})", self.ratio)?;
        for r in &self.rounds {
            writeln!(
                f,
                "round {}: {} clients, full {}, adapter {}, cumulative {}",
                r.round, r.clients, r.full_sent, r.lora_sent, r.cumulative
            )?;
        }
        write!(
            f,
            "total sent: {} (full {}, adapter {})",
            self.cumulative, self.full_sent, self.lora_sent
        )
    }
}
