//! Information-isolation checks over a recorded frame log.
//!
//! Two layers: a route matrix naming which message types each role may
//! receive from whom, and a byte scan of every delivered frame for material
//! the recipient must never hold. Secrets are compared as 16-byte chunks
//! against every 16-byte window of the frame.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::crypto::SchemeParams;
use crate::model::Party;

use super::bus::{LoggedFrame, Snapshot};
use super::message::{type_name, Envelope, Message};

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// A message type the recipient must not receive from that sender.
    Route,
    /// Secret material found inside the frame.
    Secret(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub frame: usize,
    pub from: Party,
    pub to: Party,
    pub msg_type: &'static str,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::Route => write!(
                f,
                "frame {}: {} may not send {} to {}",
                self.frame, self.from, self.msg_type, self.to
            ),
            ViolationKind::Secret(what) => write!(
                f,
                "frame {}: {} from {} to {} carries {what}",
                self.frame, self.msg_type, self.from, self.to
            ),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IsolationReport {
    pub frames: usize,
    pub bytes: usize,
    pub violations: Vec<Violation>,
}

impl IsolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Allowed `(from, to, message type)` triples.
pub fn route_allowed(from: Party, to: Party, msg_type: u8) -> bool {
    use Party::*;
    let name = type_name(msg_type);
    let allowed: &[&str] = match (from, to) {
        (User, Sss) => &["Query", "InsertRecords", "DeleteTags"],
        (User, Iws) => &["NonceReq", "MetaFetch", "InsertIndex", "ShuffleReq"],
        (Admin, Sss) | (Admin, Iws) => &["Revoke"],
        (Iws, Sss) => &["WitnessSet", "ShuffleReq"],
        (Iws, Rss) => &["ShuffleData"],
        (Sss, Iws) => &["ShuffleReq", "InsertIds"],
        (Sss, Rss) => &["ShuffleRecords"],
        (Rss, Sss) => &["ShuffledRecords"],
        (Sss, User) => &["SearchResult", "Ack", "Error"],
        (Iws, User) => &["MetaReply", "Ack", "Error"],
        (Rss, User) => &["Error"],
        _ => &[],
    };
    allowed.contains(&name)
}

#[derive(Debug, Default)]
pub struct IsolationMonitor {
    secrets: HashMap<Party, HashMap<[u8; CHUNK], &'static str>>,
}

impl IsolationMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `bytes` as material `role` must never receive.
    pub fn forbid(&mut self, role: Party, what: &'static str, bytes: &[u8]) {
        let set = self.secrets.entry(role).or_default();
        for chunk in bytes.chunks_exact(CHUNK) {
            // Constant chunks (zero padding and the like) are not secrets.
            if chunk.iter().all(|b| *b == chunk[0]) {
                continue;
            }
            set.entry(chunk.try_into().unwrap()).or_insert(what);
        }
    }

    pub fn secret_count(&self, role: Party) -> usize {
        self.secrets.get(&role).map_or(0, HashMap::len)
    }

    /// Harvests the role stores: nonces, seeds and s2 for the storage
    /// service; record bytes for the index service.
    pub fn observe_snapshot(&mut self, snap: &Snapshot, params: &SchemeParams) {
        self.forbid(Party::Sss, "s2", &snap.s2);
        for n in &snap.ndb {
            self.forbid(Party::Sss, "seed", &n.seed);
            self.forbid(Party::Sss, "nonce", n.nonce.as_bytes());
        }
        for r in &snap.edb {
            for f in 0..params.field_count {
                self.forbid(Party::Iws, "record", r.segment(f, params));
            }
            self.forbid(Party::Iws, "record", r.tag_part(params));
        }
    }

    /// Harvests secrets carried by legitimate traffic so a later misroute of
    /// the same bytes is caught.
    pub fn observe_log(&mut self, log: &[LoggedFrame]) {
        for frame in log {
            let Ok(env) = Envelope::decode(&frame.bytes) else { continue };
            match &env.msg {
                Message::Query { eq, .. } => {
                    self.forbid(Party::Iws, "e*", &eq.e_star);
                    self.forbid(Party::Rss, "e*", &eq.e_star);
                }
                Message::NonceReq { eta, .. } => self.forbid(Party::Sss, "eta", eta),
                Message::WitnessSet { en, .. } => {
                    for w in en {
                        self.forbid(Party::Rss, "w", &w.w);
                    }
                }
                Message::InsertIndex { entries, .. } => {
                    for e in entries {
                        self.forbid(Party::Sss, "seed", &e.nonce.seed);
                        self.forbid(Party::Sss, "nonce", e.nonce.nonce.as_bytes());
                    }
                }
                Message::InsertRecords { records, .. } => {
                    for r in records {
                        self.forbid(Party::Iws, "record", r.as_bytes());
                    }
                }
                Message::ShuffleRecords { records, .. } | Message::ShuffledRecords { records, .. } => {
                    for (_, r) in records {
                        self.forbid(Party::Iws, "record", r.as_bytes());
                    }
                }
                Message::SearchResult { sr, .. } => {
                    for h in &sr.entries {
                        self.forbid(Party::Iws, "record", h.record.as_bytes());
                    }
                }
                _ => {}
            }
        }
    }

    pub fn audit(&self, log: &[LoggedFrame]) -> IsolationReport {
        let mut report = IsolationReport::default();
        let empty = HashMap::new();
        for (i, frame) in log.iter().enumerate() {
            report.frames += 1;
            report.bytes += frame.bytes.len();
            let name = type_name(frame.msg_type);
            if !route_allowed(frame.from, frame.to, frame.msg_type) {
                report.violations.push(Violation {
                    frame: i,
                    from: frame.from,
                    to: frame.to,
                    msg_type: name,
                    kind: ViolationKind::Route,
                });
            }
            let secrets = self.secrets.get(&frame.to).unwrap_or(&empty);
            if secrets.is_empty() || frame.bytes.len() < 5 + CHUNK {
                continue;
            }
            let mut found: HashSet<&'static str> = HashSet::new();
            for win in frame.bytes[5..].windows(CHUNK) {
                if let Some(what) = secrets.get(<&[u8; CHUNK]>::try_from(win).unwrap()) {
                    found.insert(what);
                }
            }
            let mut found: Vec<_> = found.into_iter().collect();
            found.sort_unstable();
            for what in found {
                report.violations.push(Violation {
                    frame: i,
                    from: frame.from,
                    to: frame.to,
                    msg_type: name,
                    kind: ViolationKind::Secret(what),
                });
            }
        }
        report
    }
}
