use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use phenoaudit::audit::{
    parse_judgments, read_discordant_csv, read_packets_jsonl, read_token_map, Confidence, ConfidenceBin,
    ReviewJudgment, ReviewPacket, Verdict,
};
use phenoaudit::{rng, Error, Result};

use crate::config::ServiceConfig;

struct Reviewer {
    id: String,
    token: String,
    /// Packet indices in this reviewer's presentation order.
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Caller {
    Reviewer(usize),
    Owner,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Submitted {
    Recorded,
    /// Same verdict and confidence as the stored judgment; nothing written.
    Duplicate,
}

#[derive(Debug)]
pub enum SubmitError {
    UnknownToken,
    Conflict,
    Storage(Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BinProgress {
    pub packets: usize,
    /// Judgments across all reviewers.
    pub judgments: usize,
    /// Packets every reviewer has judged.
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub packets: usize,
    pub reviewers: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<BTreeMap<ConfidenceBin, BinProgress>>,
}

/// Everything the service knows: packets, per-reviewer queues, and the
/// judgments replayed from the log.
pub struct ReviewState {
    packets: Vec<ReviewPacket>,
    by_token: HashMap<String, usize>,
    reviewers: Vec<Reviewer>,
    owner_token: String,
    judged: HashMap<(usize, usize), ReviewJudgment>,
    bins: Option<Vec<ConfidenceBin>>,
    log_path: PathBuf,
    log: File,
}

/// Cut an unterminated final line left by a crash mid-append. Only bytes
/// after the last newline go, and those were never acknowledged.
fn drop_partial_tail(path: &Path) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    tracing::warn!(
        path = %path.display(),
        dropped = bytes.len() - keep,
        "dropping unterminated judgment line"
    );
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

impl ReviewState {
    pub fn open(config: &ServiceConfig) -> Result<Self> {
        config.validate()?;
        let packets = read_packets_jsonl(&config.packets)?;
        let mut by_token = HashMap::with_capacity(packets.len());
        for (i, p) in packets.iter().enumerate() {
            if by_token.insert(p.token.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate packet token {}", p.token)));
            }
        }
        let reviewers = config
            .reviewers
            .iter()
            .map(|r| {
                let mut order: Vec<usize> = (0..packets.len()).collect();
                order.shuffle(&mut rng::stream(config.seed, &format!("queue/{}", r.id)));
                Reviewer {
                    id: r.id.clone(),
                    token: r.token.clone(),
                    order,
                }
            })
            .collect();

        let bins = match (&config.token_map, &config.cases) {
            (Some(map_path), Some(cases_path)) => {
                let map = read_token_map(map_path)?;
                let cases: HashMap<String, ConfidenceBin> = read_discordant_csv(cases_path)?
                    .into_iter()
                    .map(|c| (c.encounter_id, c.bin))
                    .collect();
                let bins = packets
                    .iter()
                    .map(|p| {
                        map.get(&p.token)
                            .and_then(|id| cases.get(id))
                            .copied()
                            .ok_or_else(|| Error::MissingInput(format!("no case for packet token {}", p.token)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(bins)
            }
            _ => None,
        };

        drop_partial_tail(&config.log)?;
        let text = match fs::read_to_string(&config.log) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&config.log, e)),
        };
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&config.log)
            .map_err(|e| Error::io(&config.log, e))?;
        let mut state = ReviewState {
            packets,
            by_token,
            reviewers,
            owner_token: config.owner_token.clone(),
            judged: HashMap::new(),
            bins,
            log_path: config.log.clone(),
            log,
        };
        for (n, j) in parse_judgments(&text, &config.log.display().to_string())?.into_iter().enumerate() {
            state.replay(j, n as u64 + 1)?;
        }
        Ok(state)
    }

    fn replay(&mut self, j: ReviewJudgment, line: u64) -> Result<()> {
        let bad = |reason: String| Error::Integrity {
            table: self.log_path.display().to_string(),
            row: line,
            reason,
        };
        let r = self
            .reviewers
            .iter()
            .position(|r| r.id == j.reviewer)
            .ok_or_else(|| bad(format!("unknown reviewer {:?}", j.reviewer)))?;
        let p = *self
            .by_token
            .get(&j.token)
            .ok_or_else(|| bad(format!("unknown token {}", j.token)))?;
        if let Some(prev) = self.judged.get(&(r, p)) {
            if (prev.verdict, prev.confidence) != (j.verdict, j.confidence) {
                return Err(bad(format!("conflicting judgments for token {}", j.token)));
            }
            return Ok(());
        }
        self.judged.insert((r, p), j);
        Ok(())
    }

    pub fn caller(&self, bearer: &str) -> Option<Caller> {
        if bearer == self.owner_token {
            return Some(Caller::Owner);
        }
        self.reviewers.iter().position(|r| r.token == bearer).map(Caller::Reviewer)
    }

    pub fn reviewer_id(&self, reviewer: usize) -> &str {
        &self.reviewers[reviewer].id
    }

    pub fn packet_count(&self) -> usize {
        self.packets.len()
    }

    /// The first packet in the reviewer's order they have not judged.
    pub fn next(&self, reviewer: usize) -> Option<&ReviewPacket> {
        self.reviewers[reviewer]
            .order
            .iter()
            .find(|&&p| !self.judged.contains_key(&(reviewer, p)))
            .map(|&p| &self.packets[p])
    }

    /// Record a judgment. The line is on disk (flushed and synced) before
    /// this returns `Recorded`.
    pub fn submit(
        &mut self,
        reviewer: usize,
        token: &str,
        verdict: Verdict,
        confidence: Confidence,
        timestamp: String,
    ) -> std::result::Result<Submitted, SubmitError> {
        let p = *self.by_token.get(token).ok_or(SubmitError::UnknownToken)?;
        if let Some(prev) = self.judged.get(&(reviewer, p)) {
            return if (prev.verdict, prev.confidence) == (verdict, confidence) {
                Ok(Submitted::Duplicate)
            } else {
                Err(SubmitError::Conflict)
            };
        }
        let j = ReviewJudgment {
            token: token.to_string(),
            reviewer: self.reviewers[reviewer].id.clone(),
            verdict,
            confidence,
            timestamp,
        };
        let mut line = serde_json::to_string(&j).expect("judgment serializes");
        line.push('\n');
        let io = |e| SubmitError::Storage(Error::io(&self.log_path, e));
        self.log.write_all(line.as_bytes()).map_err(io)?;
        self.log.flush().map_err(io)?;
        self.log.sync_data().map_err(io)?;
        self.judged.insert((reviewer, p), j);
        Ok(Submitted::Recorded)
    }

    /// Counts from the replayed log. Bins are included only for the owner
    /// and only when the token map was configured.
    pub fn progress(&self, owner: bool) -> Progress {
        let mut reviewers: BTreeMap<String, usize> = self.reviewers.iter().map(|r| (r.id.clone(), 0)).collect();
        for &(r, _) in self.judged.keys() {
            *reviewers.get_mut(&self.reviewers[r].id).expect("known reviewer") += 1;
        }
        let bins = self.bins.as_ref().filter(|_| owner).map(|bins| {
            let mut out: BTreeMap<ConfidenceBin, BinProgress> = ConfidenceBin::ALL
                .iter()
                .map(|&b| {
                    (
                        b,
                        BinProgress {
                            packets: 0,
                            judgments: 0,
                            completed: 0,
                        },
                    )
                })
                .collect();
            for (p, bin) in bins.iter().enumerate() {
                let entry = out.get_mut(bin).expect("all bins present");
                entry.packets += 1;
                let done = (0..self.reviewers.len()).filter(|&r| self.judged.contains_key(&(r, p))).count();
                entry.judgments += done;
                if done == self.reviewers.len() {
                    entry.completed += 1;
                }
            }
            out
        });
        Progress {
            packets: self.packets.len(),
            reviewers,
            bins,
        }
    }

    pub fn export(&self) -> Result<String> {
        fs::read_to_string(&self.log_path).map_err(|e| Error::io(&self.log_path, e))
    }
}
