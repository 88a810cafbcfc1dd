//! In-process synchronous message bus for the agent network.
//!
//! Rounds have barrier semantics: all sends of a round are collected before
//! any receive happens. An optional transcript records (round, edge, payload
//! length, payload hash) for protocol debugging.

use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("missing message from agent {from} to agent {to} in round {round}")]
    MissingMessage { from: usize, to: usize, round: u64 },
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MessageStats {
    pub messages: usize,
    pub payload_floats: usize,
    pub rounds: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MessageRecord {
    pub round: u64,
    pub from: usize,
    pub to: usize,
    pub len: usize,
    pub hash: u64,
}

#[derive(Default)]
pub struct RoundBus {
    pub stats: MessageStats,
    pub transcript: Option<Vec<MessageRecord>>,
    round: u64,
    mailboxes: HashMap<(usize, usize), Vec<f64>>,
}

impl RoundBus {
    pub fn new(record_transcript: bool) -> Self {
        Self {
            transcript: record_transcript.then(Vec::new),
            ..Default::default()
        }
    }

    pub fn send(&mut self, from: usize, to: usize, payload: Vec<f64>) {
        self.stats.messages += 1;
        self.stats.payload_floats += payload.len();
        if let Some(t) = &mut self.transcript {
            t.push(MessageRecord {
                round: self.round,
                from,
                to,
                len: payload.len(),
                hash: fnv1a(&payload),
            });
        }
        self.mailboxes.insert((from, to), payload);
    }

    pub fn receive(&mut self, from: usize, to: usize) -> Result<Vec<f64>, BusError> {
        self.mailboxes
            .remove(&(from, to))
            .ok_or(BusError::MissingMessage {
                from,
                to,
                round: self.round,
            })
    }

    /// Barrier: closes the round. Undelivered mail is dropped.
    pub fn end_round(&mut self) {
        self.round += 1;
        self.stats.rounds += 1;
        self.mailboxes.clear();
    }

    pub fn write_transcript<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        match &self.transcript {
            Some(t) => write_records(t, w),
            None => Ok(()),
        }
    }
}

/// Serializes message records as JSON lines.
pub fn write_records<W: std::io::Write>(
    records: &[MessageRecord],
    mut w: W,
) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        writeln!(w)?;
    }
    Ok(())
}

fn fnv1a(payload: &[f64]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for v in payload {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_semantics_and_stats() {
        let mut bus = RoundBus::new(true);
        bus.send(0, 1, vec![1.0, 2.0]);
        bus.send(1, 0, vec![3.0]);
        assert_eq!(bus.receive(0, 1).unwrap(), vec![1.0, 2.0]);
        bus.end_round();
        assert!(matches!(
            bus.receive(1, 0),
            Err(BusError::MissingMessage { from: 1, to: 0, .. })
        ));
        assert_eq!(bus.stats.messages, 2);
        assert_eq!(bus.stats.payload_floats, 3);
        assert_eq!(bus.transcript.as_ref().unwrap().len(), 2);
    }
}
