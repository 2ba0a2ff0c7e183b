//! Persistence: per-session append-only NDJSON event logs, snapshots,
//! replay, and activation reports.
//!
//! Layout under a work directory:
//!
//! ```text
//! sessions/{session_id}/events.ndjson   one EventLogEntry per line
//! sessions/{session_id}/snapshot.json   latest SessionState
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interaction::{Behavior, Guideline, GuidelineVerdict, Stage};
use crate::orchestrator::{ApplyError, SessionEvent, SessionState};
use crate::taskgraph::InvocationReason;

/// One line of an event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub sequence_number: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("sequence gap: expected {expected}, got {got}")]
    Gap { expected: u64, got: u64 },
    #[error("line {line}: malformed entry: {message}")]
    Malformed { line: usize, message: String },
    #[error("storage failure: {0}")]
    Storage(String),
}

impl From<io::Error> for LogError {
    fn from(e: io::Error) -> Self {
        LogError::Storage(e.to_string())
    }
}

/// In-memory event log; sequence numbers are positions counted from 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<SessionEvent>,
}

impl EventLog {
    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_sequence(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn push(&mut self, event: SessionEvent) -> u64 {
        self.events.push(event);
        self.last_sequence()
    }

    pub fn append(&mut self, entry: EventLogEntry) -> Result<(), LogError> {
        let expected = self.last_sequence() + 1;
        if entry.sequence_number != expected {
            return Err(LogError::Gap { expected, got: entry.sequence_number });
        }
        self.events.push(entry.event);
        Ok(())
    }

    pub fn entry(&self, sequence_number: u64) -> Option<EventLogEntry> {
        let idx = usize::try_from(sequence_number).ok()?.checked_sub(1)?;
        self.events.get(idx).map(|e| EventLogEntry { sequence_number, event: e.clone() })
    }

    /// Entries with sequence number greater than `after`.
    pub fn entries_after(&self, after: u64) -> Vec<EventLogEntry> {
        self.entries().skip(after as usize).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = EventLogEntry> + '_ {
        self.events.iter().enumerate().map(|(i, e)| EventLogEntry { sequence_number: i as u64 + 1, event: e.clone() })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = EventLogEntry>) -> Result<Self, LogError> {
        let mut log = EventLog::default();
        for e in entries {
            log.append(e)?;
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsyncPolicy {
    /// fsync after every appended line.
    Always,
    /// Flush to the OS on every append; fsync on snapshot and close.
    #[default]
    OnSnapshot,
}

pub fn session_dir(workdir: &Path, session_id: &str) -> PathBuf {
    workdir.join("sessions").join(session_id)
}

pub fn events_path(workdir: &Path, session_id: &str) -> PathBuf {
    session_dir(workdir, session_id).join("events.ndjson")
}

pub fn snapshot_path(workdir: &Path, session_id: &str) -> PathBuf {
    session_dir(workdir, session_id).join("snapshot.json")
}

/// Single writer for one session's log file.
#[derive(Debug)]
pub struct LogWriter {
    file: File,
    dir: PathBuf,
    last: u64,
    fsync: FsyncPolicy,
}

impl LogWriter {
    /// Opens (or creates) the session's log. An existing log is recovered
    /// first, so appends continue after its last complete entry.
    pub fn open(workdir: &Path, session_id: &str, fsync: FsyncPolicy) -> Result<Self, LogError> {
        let dir = session_dir(workdir, session_id);
        fs::create_dir_all(&dir)?;
        let path = dir.join("events.ndjson");
        let last = if path.exists() { recover(&path)?.len() as u64 } else { 0 };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { file, dir, last, fsync })
    }

    pub fn last_sequence(&self) -> u64 {
        self.last
    }

    pub fn append(&mut self, entry: &EventLogEntry) -> Result<(), LogError> {
        if entry.sequence_number != self.last + 1 {
            return Err(LogError::Gap { expected: self.last + 1, got: entry.sequence_number });
        }
        let mut line = crate::canonical_json(entry).map_err(|e| LogError::Storage(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        if self.fsync == FsyncPolicy::Always {
            self.file.sync_data()?;
        }
        self.last = entry.sequence_number;
        Ok(())
    }

    /// Appends every entry of `log` not yet written.
    pub fn sync_from(&mut self, log: &EventLog) -> Result<usize, LogError> {
        let pending = log.entries_after(self.last);
        for e in &pending {
            self.append(e)?;
        }
        Ok(pending.len())
    }

    /// Writes `snapshot.json` atomically (temp file, then rename).
    pub fn write_snapshot(&mut self, state: &SessionState) -> Result<(), LogError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        let body = serde_json::to_string_pretty(state).map_err(|e| LogError::Storage(e.to_string()))?;
        {
            let mut f = File::create(&tmp)?;
            f.write_all(body.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join("snapshot.json"))?;
        self.file.sync_data()?;
        Ok(())
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<EventLogEntry, LogError> {
    serde_json::from_str(line).map_err(|e| LogError::Malformed { line: lineno, message: e.to_string() })
}

/// Strict read: every line must parse and sequence numbers must be dense.
pub fn read_entries<R: BufRead>(reader: R) -> Result<Vec<EventLogEntry>, LogError> {
    let mut out: Vec<EventLogEntry> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_line(&line, i + 1)?;
        let expected = out.len() as u64 + 1;
        if entry.sequence_number != expected {
            return Err(LogError::Gap { expected, got: entry.sequence_number });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn read_log_file(path: &Path) -> Result<Vec<EventLogEntry>, LogError> {
    read_entries(BufReader::new(File::open(path)?))
}

/// Crash recovery: a final line without a trailing newline that does not
/// parse is a torn write and is cut off. Any other damage is an error.
pub fn recover(path: &Path) -> Result<Vec<EventLogEntry>, LogError> {
    let bytes = fs::read(path)?;
    let complete = match bytes.iter().rposition(|b| *b == b'\n') {
        Some(i) => i + 1,
        None => 0,
    };
    let tail = &bytes[complete..];
    let keep = if tail.is_empty() {
        complete
    } else {
        let parsed = std::str::from_utf8(tail).ok().and_then(|t| serde_json::from_str::<EventLogEntry>(t).ok());
        if parsed.is_some() {
            bytes.len()
        } else {
            complete
        }
    };
    if keep < bytes.len() {
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    let entries = read_entries(&bytes[..keep])?;
    if keep == bytes.len() && !tail.is_empty() {
        // A complete final entry without newline: terminate it so appends stay line-delimited.
        OpenOptions::new().append(true).open(path)?.write_all(b"\n")?;
    }
    Ok(entries)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("entry {sequence_number}: {source}")]
    Apply { sequence_number: u64, source: ApplyError },
}

/// Rebuilds the session state from its log. An empty log gives `None`.
pub fn replay(entries: &[EventLogEntry]) -> Result<Option<SessionState>, ReplayError> {
    let mut state = None;
    for (i, entry) in entries.iter().enumerate() {
        let expected = i as u64 + 1;
        if entry.sequence_number != expected {
            return Err(LogError::Gap { expected, got: entry.sequence_number }.into());
        }
        SessionState::apply(&mut state, &entry.event)
            .map_err(|source| ReplayError::Apply { sequence_number: entry.sequence_number, source })?;
    }
    Ok(state)
}

pub fn replay_log(log: &EventLog) -> Result<Option<SessionState>, ReplayError> {
    replay(&log.entries().collect::<Vec<_>>())
}

/// Pass / advisory / violation tallies for one guideline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub pass: u64,
    pub advisory: u64,
    pub violation: u64,
}

impl VerdictCounts {
    fn add(&mut self, other: &VerdictCounts) {
        self.pass += other.pass;
        self.advisory += other.advisory;
        self.violation += other.violation;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub sessions: u64,
    pub calls_issued: u64,
    pub calls_with_reason: u64,
    pub ai_executions: u64,
}

/// Counts of human tool activity: why (reason), when (stage at issuance),
/// message guideline outcomes, and behaviors used. Every category key is
/// present, zero or not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub why_need_human: BTreeMap<InvocationReason, u64>,
    pub when_need_human: BTreeMap<Stage, u64>,
    pub communication_principles: BTreeMap<Guideline, VerdictCounts>,
    pub interaction_behaviors: BTreeMap<Behavior, u64>,
    pub totals: ReportTotals,
}

impl Default for ActivationReport {
    fn default() -> Self {
        Self {
            why_need_human: InvocationReason::ALL.iter().map(|r| (*r, 0)).collect(),
            when_need_human: Stage::ALL.iter().map(|s| (*s, 0)).collect(),
            communication_principles: Guideline::ALL.iter().map(|g| (*g, VerdictCounts::default())).collect(),
            interaction_behaviors: Behavior::ALL.iter().map(|b| (*b, 0)).collect(),
            totals: ReportTotals::default(),
        }
    }
}

impl ActivationReport {
    /// Report over one session's events.
    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a SessionEvent>) -> Self {
        let mut r = ActivationReport::default();
        let mut any = false;
        for event in events {
            any = true;
            match event {
                SessionEvent::CallIssued { call, guidelines, .. } => {
                    r.totals.calls_issued += 1;
                    *r.when_need_human.entry(call.stage).or_default() += 1;
                    *r.interaction_behaviors.entry(call.behavior).or_default() += 1;
                    if let Some(reason) = call.reason {
                        r.totals.calls_with_reason += 1;
                        *r.why_need_human.entry(reason).or_default() += 1;
                    }
                    for (g, verdict) in guidelines.entries() {
                        let c = r.communication_principles.entry(g).or_default();
                        match verdict {
                            GuidelineVerdict::Pass => c.pass += 1,
                            GuidelineVerdict::Advisory(_) => c.advisory += 1,
                            GuidelineVerdict::Violation(_) => c.violation += 1,
                        }
                    }
                }
                SessionEvent::Invocation(rec) if rec.outcome == crate::orchestrator::RecordOutcome::AiExecuted => {
                    r.totals.ai_executions += 1;
                }
                _ => {}
            }
        }
        r.totals.sessions = u64::from(any);
        r
    }

    pub fn from_entries(entries: &[EventLogEntry]) -> Self {
        Self::from_events(entries.iter().map(|e| &e.event))
    }

    /// Aggregates many logs. Addition is commutative, so the order of logs
    /// does not matter.
    pub fn from_logs(logs: &[Vec<EventLogEntry>]) -> Self {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            logs.par_iter().map(|l| Self::from_entries(l)).reduce(Self::default, |a, b| a.merged(&b))
        }
        #[cfg(not(feature = "parallel"))]
        {
            logs.iter().map(|l| Self::from_entries(l)).fold(Self::default(), |a, b| a.merged(&b))
        }
    }

    pub fn merged(mut self, other: &ActivationReport) -> Self {
        for (k, v) in &other.why_need_human {
            *self.why_need_human.entry(*k).or_default() += v;
        }
        for (k, v) in &other.when_need_human {
            *self.when_need_human.entry(*k).or_default() += v;
        }
        for (k, v) in &other.communication_principles {
            self.communication_principles.entry(*k).or_default().add(v);
        }
        for (k, v) in &other.interaction_behaviors {
            *self.interaction_behaviors.entry(*k).or_default() += v;
        }
        self.totals.sessions += other.totals.sessions;
        self.totals.calls_issued += other.totals.calls_issued;
        self.totals.calls_with_reason += other.totals.calls_with_reason;
        self.totals.ai_executions += other.totals.ai_executions;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.totals.calls_issued == 0 && self.totals.ai_executions == 0
    }

    /// Aligned plain-text rendering, one block per table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let why: Vec<(String, String)> =
            self.why_need_human.iter().map(|(k, v)| (k.as_str().to_string(), v.to_string())).collect();
        let when: Vec<(String, String)> =
            self.when_need_human.iter().map(|(k, v)| (k.as_str().to_string(), v.to_string())).collect();
        let beh: Vec<(String, String)> =
            self.interaction_behaviors.iter().map(|(k, v)| (k.as_str().to_string(), v.to_string())).collect();
        table(&mut out, "Why need human", &["reason", "calls"], why.iter().map(|(a, b)| vec![a.as_str(), b.as_str()]));
        table(&mut out, "When need human", &["stage", "calls"], when.iter().map(|(a, b)| vec![a.as_str(), b.as_str()]));
        let principles: Vec<[String; 4]> = self
            .communication_principles
            .iter()
            .map(|(g, c)| [g.as_str().to_string(), c.pass.to_string(), c.advisory.to_string(), c.violation.to_string()])
            .collect();
        table(
            &mut out,
            "Communication principles",
            &["guideline", "pass", "advisory", "violation"],
            principles.iter().map(|r| r.iter().map(String::as_str).collect()),
        );
        table(
            &mut out,
            "Interaction behaviors",
            &["behavior", "calls"],
            beh.iter().map(|(a, b)| vec![a.as_str(), b.as_str()]),
        );
        let t = &self.totals;
        let _ = writeln!(
            out,
            "Totals: sessions={} calls_issued={} calls_with_reason={} ai_executions={}",
            t.sessions, t.calls_issued, t.calls_with_reason, t.ai_executions
        );
        out
    }
}

impl fmt::Display for ActivationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn table<'a>(out: &mut String, title: &str, header: &[&str], rows: impl Iterator<Item = Vec<&'a str>>) {
    let rows: Vec<Vec<&str>> = rows.collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let _ = writeln!(out, "{title}");
    let line = |cells: &[&str]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        format!("  {}", parts.join("  "))
    };
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "  {}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in &rows {
        let _ = writeln!(out, "{}", line(r));
    }
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_log_replays_to_nothing() {
        assert!(replay(&[]).unwrap().is_none());
    }

    #[test]
    fn append_to_empty_log_gets_sequence_one() {
        let mut log = EventLog::default();
        let seq = log.push(SessionEvent::WireError { code: -32600, message: "x".into(), call_id: None, at: chrono::Utc::now() });
        assert_eq!(seq, 1);
        assert_eq!(log.entry(1).unwrap().sequence_number, 1);
    }

    #[test]
    fn gap_is_rejected() {
        let mut log = EventLog::default();
        let event = SessionEvent::WireError { code: -32600, message: "x".into(), call_id: None, at: chrono::Utc::now() };
        let err = log.append(EventLogEntry { sequence_number: 2, event }).unwrap_err();
        assert_eq!(err, LogError::Gap { expected: 1, got: 2 });
    }

    #[test]
    fn empty_report_is_all_zero() {
        let r = ActivationReport::from_logs(&[]);
        assert!(r.is_empty());
        assert!(r.interaction_behaviors.values().all(|v| *v == 0));
        assert_eq!(r.interaction_behaviors.len(), 12);
        assert!(r.to_text().contains("Interaction behaviors"));
    }
}
