//! Credit replay: one-shot secret discoveries become repeated
//! supervised signals.
//!
//! New secrets get an initial credit; re-observed secrets are refreshed
//! (not stacked). Each training step draws up to `r` distinct live
//! entries weighted by remaining credit, decrementing each drawn entry,
//! so every admitted secret is consolidated until its credit runs out.

use crate::binder::{derive_uid, CodecId, MaliciousSample, UID_HEX_LEN};
use crate::rules::SecretSpan;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Credit granted to a newly admitted secret.
    pub initial_credit: u32,
    /// Credit floor restored when a known secret is observed again.
    pub refresh_credit: u32,
    pub capacity: usize,
    pub codec: CodecId,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            initial_credit: 8,
            refresh_credit: 4,
            capacity: 512,
            codec: CodecId::Plaintext,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitResult {
    New,
    Refreshed,
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: MaliciousSample,
    pub credit: u32,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    cfg: ReplayConfig,
    /// Admission order; ids are stable once assigned.
    entries: Vec<BufferEntry>,
    by_secret: HashMap<String, usize>,
    used_uids: HashMap<String, usize>,
    next_id: u64,
    total_replays_served: u64,
    credits_granted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferStats {
    pub distinct_secrets: usize,
    pub live_entries: usize,
    pub total_replays_served: u64,
}

impl ReplayBuffer {
    pub fn new(cfg: ReplayConfig) -> Self {
        ReplayBuffer {
            cfg,
            entries: Vec::new(),
            by_secret: HashMap::new(),
            used_uids: HashMap::new(),
            next_id: 0,
            total_replays_served: 0,
            credits_granted: 0,
        }
    }

    /// Admit or refresh a discovered span. New secrets are bound to the
    /// next enumeration id (uid collisions are skipped, which keeps uids
    /// injective over the admitted set).
    pub fn observe(&mut self, span: &SecretSpan) -> AdmitResult {
        if let Some(&idx) = self.by_secret.get(&span.decoded_text) {
            let entry = &mut self.entries[idx];
            if entry.credit < self.cfg.refresh_credit {
                self.credits_granted += u64::from(self.cfg.refresh_credit - entry.credit);
                entry.credit = self.cfg.refresh_credit;
            }
            return AdmitResult::Refreshed;
        }
        if self.entries.len() >= self.cfg.capacity {
            return AdmitResult::Full;
        }
        let mut id = self.next_id;
        let mut uid = derive_uid(id, UID_HEX_LEN);
        while self.used_uids.contains_key(&uid) {
            id += 1;
            uid = derive_uid(id, UID_HEX_LEN);
        }
        self.next_id = id + 1;
        let sample = MaliciousSample::bind(id, &span.decoded_text, self.cfg.codec);
        self.used_uids.insert(uid, self.entries.len());
        self.by_secret.insert(span.decoded_text.clone(), self.entries.len());
        self.entries.push(BufferEntry {
            sample,
            credit: self.cfg.initial_credit,
        });
        self.credits_granted += u64::from(self.cfg.initial_credit);
        AdmitResult::New
    }

    /// Draw up to `r` distinct live entries, weighted by remaining
    /// credit; each drawn entry's credit drops by one. Deterministic
    /// given the rng state. Consumes no randomness when nothing is live.
    pub fn sample(&mut self, r: usize, rng: &mut ChaCha8Rng) -> Vec<MaliciousSample> {
        let mut drawn_idx: Vec<usize> = Vec::new();
        let mut out = Vec::new();
        for _ in 0..r {
            let total: u64 = self
                .entries
                .iter()
                .enumerate()
                .filter(|(i, e)| e.credit > 0 && !drawn_idx.contains(i))
                .map(|(_, e)| u64::from(e.credit))
                .sum();
            if total == 0 {
                break;
            }
            let mut u = rng.random_range(0..total);
            let mut pick = None;
            for (i, e) in self.entries.iter().enumerate() {
                if e.credit == 0 || drawn_idx.contains(&i) {
                    continue;
                }
                let w = u64::from(e.credit);
                if u < w {
                    pick = Some(i);
                    break;
                }
                u -= w;
            }
            let i = pick.expect("total > 0 implies a pick");
            self.entries[i].credit -= 1;
            self.total_replays_served += 1;
            drawn_idx.push(i);
            out.push(self.entries[i].sample.clone());
        }
        out
    }

    pub fn stats(&self) -> BufferStats {
        BufferStats {
            distinct_secrets: self.entries.len(),
            live_entries: self.entries.iter().filter(|e| e.credit > 0).count(),
            total_replays_served: self.total_replays_served,
        }
    }

    /// Credit conservation: served + live credit == granted.
    pub fn credit_balance_holds(&self) -> bool {
        let live: u64 = self.entries.iter().map(|e| u64::from(e.credit)).sum();
        self.total_replays_served + live == self.credits_granted
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ground-truth snapshot for post-run comparison (test/eval only;
    /// the attack itself never exports this).
    pub fn snapshot_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for entry in &self.entries {
            serde_json::to_writer(&mut f, entry)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_snapshot_jsonl(path: &Path) -> std::io::Result<Vec<BufferEntry>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines()
        .map(|line| {
            serde_json::from_str(&line?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
