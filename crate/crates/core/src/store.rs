//! Append-only session event log (`irda-session/1`).
//!
//! One JSON event per line in `<root>/<session_id>.jsonl`. Every accepted
//! user message is written before it is processed and followed by a snapshot
//! of the resulting session, so a crash between the two is recovered by
//! replaying the message. Each append is flushed to disk before returning.
//! A torn final line (crash mid-write) is ignored on load and cut off before
//! the next append.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialogue::{Dialogue, DialogueSession, SystemTurn, SESSION_SCHEMA};
use crate::error::StoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    Created { session: Box<DialogueSession>, turn: SystemTurn },
    UserMessage { msg_seq: u64, text: String },
    Snapshot { msg_seq: u64, session: Box<DialogueSession>, turn: SystemTurn },
    /// The message was refused and the session left unchanged.
    Rejected { msg_seq: u64, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub schema: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// State rebuilt from a log.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSession {
    pub session: DialogueSession,
    pub turn: SystemTurn,
    /// Last message sequence number reflected in `session`; 0 before any message.
    pub msg_seq: u64,
    /// Reply to every processed message, by sequence number.
    pub turns: BTreeMap<u64, SystemTurn>,
    /// A message written but never answered.
    pub pending: Option<(u64, String)>,
    pub events: u64,
}

pub struct SessionStore {
    root: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        Ok(self.root.join(format!("{id}.jsonl")))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.path(id).is_ok_and(|p| p.exists())
    }

    /// Session ids present on disk, sorted.
    pub fn ids(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(stem.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn create(&self, session: &DialogueSession, turn: &SystemTurn, now_ms: u64) -> Result<(), StoreError> {
        let path = self.path(&session.session_id)?;
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => StoreError::AlreadyExists(session.session_id.clone()),
                _ => StoreError::Io(e),
            })?;
        let kind = EventKind::Created { session: Box::new(session.clone()), turn: turn.clone() };
        write_event(file, 0, now_ms, kind)
    }

    pub fn append(&self, id: &str, seq: u64, now_ms: u64, kind: EventKind) -> Result<(), StoreError> {
        let path = self.path(id)?;
        if !path.exists() {
            return Err(StoreError::NotFound(id.to_string()));
        }
        truncate_torn_tail(&path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        write_event(file, seq, now_ms, kind)
    }

    pub fn events(&self, id: &str) -> Result<Vec<LogEvent>, StoreError> {
        let path = self.path(id)?;
        let file = File::open(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::NotFound(id.to_string()),
            _ => StoreError::Io(e),
        })?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogEvent>(line) {
                Ok(ev) if ev.schema == SESSION_SCHEMA => events.push(ev),
                Ok(ev) => {
                    return Err(StoreError::Corrupt { id: id.into(), line: i + 1, message: format!("unsupported schema `{}`", ev.schema) })
                }
                Err(_) if i + 1 == lines.len() => {
                    tracing::warn!(session = id, "ignoring torn final event");
                }
                Err(e) => return Err(StoreError::Corrupt { id: id.into(), line: i + 1, message: e.to_string() }),
            }
        }
        Ok(events)
    }

    pub fn load(&self, id: &str) -> Result<StoredSession, StoreError> {
        let events = self.events(id)?;
        let corrupt = |m: &str| StoreError::Corrupt { id: id.into(), line: 1, message: m.to_string() };
        let mut iter = events.iter();
        let mut stored = match iter.next().map(|e| &e.kind) {
            Some(EventKind::Created { session, turn }) => StoredSession {
                session: (**session).clone(),
                turn: turn.clone(),
                msg_seq: 0,
                turns: BTreeMap::from([(0, turn.clone())]),
                pending: None,
                events: 1,
            },
            _ => return Err(corrupt("log does not start with a created event")),
        };
        for ev in iter {
            stored.events += 1;
            match &ev.kind {
                EventKind::Created { .. } => return Err(corrupt("duplicate created event")),
                EventKind::UserMessage { msg_seq, text } => stored.pending = Some((*msg_seq, text.clone())),
                EventKind::Snapshot { msg_seq, session, turn } => {
                    stored.session = (**session).clone();
                    stored.turn = turn.clone();
                    stored.msg_seq = *msg_seq;
                    stored.turns.insert(*msg_seq, turn.clone());
                    stored.pending = None;
                }
                EventKind::Rejected { .. } => stored.pending = None,
            }
        }
        Ok(stored)
    }
}

/// Drops an unterminated final line left by a crash mid-write.
fn truncate_torn_tail(path: &Path) -> Result<(), StoreError> {
    let bytes = fs::read(path)?;
    if bytes.last().is_none_or(|b| *b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(keep as u64)?;
    file.sync_data()?;
    Ok(())
}

fn write_event(mut file: File, seq: u64, now_ms: u64, kind: EventKind) -> Result<(), StoreError> {
    let ev = LogEvent { schema: SESSION_SCHEMA.to_string(), seq, timestamp_ms: now_ms, kind };
    let mut line = serde_json::to_string(&ev).map_err(std::io::Error::from)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.sync_data()?;
    Ok(())
}

/// Durable front end over [`Dialogue`]: persists, deduplicates and recovers messages.
pub struct SessionService<'a> {
    pub dialogue: Dialogue<'a>,
    pub store: &'a SessionStore,
}

impl<'a> SessionService<'a> {
    pub fn new(dialogue: Dialogue<'a>, store: &'a SessionStore) -> Self {
        Self { dialogue, store }
    }

    pub fn create(&self, id: &str, config: crate::dialogue::SessionConfig) -> Result<(DialogueSession, SystemTurn), StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        if self.store.exists(id) {
            return Err(StoreError::AlreadyExists(id.to_string()));
        }
        let (session, turn) = self.dialogue.start_session(id, config)?;
        self.store.create(&session, &turn, self.dialogue.clock.now_ms())?;
        Ok((session, turn))
    }

    /// Loads a session, first answering any message left pending by a crash.
    pub fn recover(&self, id: &str) -> Result<StoredSession, StoreError> {
        let stored = self.store.load(id)?;
        match stored.pending.clone() {
            Some((msg_seq, text)) => {
                tracing::info!(session = id, msg_seq, "replaying pending message");
                self.process(stored, msg_seq, &text)?;
                self.store.load(id)
            }
            None => Ok(stored),
        }
    }

    /// Handles message `msg_seq`. A sequence number already processed returns
    /// the stored reply without touching the session.
    pub fn submit(&self, id: &str, msg_seq: u64, text: &str) -> Result<SystemTurn, StoreError> {
        let stored = self.recover(id)?;
        if let Some(turn) = stored.turns.get(&msg_seq) {
            return Ok(turn.clone());
        }
        let expected = stored.msg_seq + 1;
        if msg_seq != expected {
            return Err(StoreError::SequenceGap { expected, got: msg_seq });
        }
        self.store.append(
            id,
            stored.events,
            self.dialogue.clock.now_ms(),
            EventKind::UserMessage { msg_seq, text: text.to_string() },
        )?;
        let stored = StoredSession { events: stored.events + 1, ..stored };
        self.process(stored, msg_seq, text)
    }

    fn process(&self, stored: StoredSession, msg_seq: u64, text: &str) -> Result<SystemTurn, StoreError> {
        let id = stored.session.session_id.clone();
        let now = self.dialogue.clock.now_ms();
        match self.dialogue.submit(&stored.session, text) {
            Ok((session, turn)) => {
                let kind = EventKind::Snapshot { msg_seq, session: Box::new(session), turn: turn.clone() };
                self.store.append(&id, stored.events, now, kind)?;
                Ok(turn)
            }
            Err(e) => {
                self.store.append(&id, stored.events, now, EventKind::Rejected { msg_seq, error: e.to_string() })?;
                Err(e.into())
            }
        }
    }
}
