use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::TurnOverrides;
use super::pipeline::{Pipeline, TurnRecord};
use crate::corpus::{DialogueContext, DialogueTurn};
use crate::error::{Error, Result};
use crate::jsonl;

/// Append-only dialogue state; the context is rebuilt from the turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created { session_id: String },
    Turn { record: TurnRecord },
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Session {
            session_id: session_id.into(),
            turns: Vec::new(),
        }
    }

    /// Prior turns plus a new user utterance. Empty agent replies are left out.
    pub fn context_with(&self, user_text: &str) -> Result<DialogueContext> {
        if user_text.trim().is_empty() {
            return Err(Error::invalid("user text is empty"));
        }
        let mut turns = Vec::with_capacity(2 * self.turns.len() + 1);
        for t in &self.turns {
            turns.push(DialogueTurn::user(t.user_text.clone()));
            if !t.answer.trim().is_empty() {
                turns.push(DialogueTurn::agent(t.answer.clone()));
            }
        }
        turns.push(DialogueTurn::user(user_text));
        DialogueContext::new(turns)
    }

    /// Rebuilds a session from its event log.
    pub fn from_events(events: &[SessionEvent]) -> Result<Self> {
        let mut session: Option<Session> = None;
        for e in events {
            match e {
                SessionEvent::Created { session_id } => {
                    if session.is_some() {
                        return Err(Error::invalid("event log creates the session twice"));
                    }
                    session = Some(Session::new(session_id.clone()));
                }
                SessionEvent::Turn { record } => {
                    let s = session
                        .as_mut()
                        .ok_or_else(|| Error::invalid("turn event before the session was created"))?;
                    if record.turn_index != s.turns.len() {
                        return Err(Error::invalid(format!(
                            "turn {} out of order in session {}",
                            record.turn_index, s.session_id
                        )));
                    }
                    s.turns.push(record.clone());
                }
            }
        }
        session.ok_or_else(|| Error::invalid("event log is empty"))
    }
}

/// Runs one turn and appends its record to `session`.
pub fn answer_turn(
    pipeline: &Pipeline,
    session: &mut Session,
    user_text: &str,
    overrides: &TurnOverrides,
) -> Result<TurnRecord> {
    let ctx = session.context_with(user_text)?;
    let record = pipeline.answer(&ctx, overrides, session.turns.len())?;
    session.turns.push(record.clone());
    Ok(record)
}

/// Replays every user utterance of `session` in a fresh session.
pub fn replay(pipeline: &Pipeline, session: &Session) -> Result<Session> {
    let mut fresh = Session::new(session.session_id.clone());
    for t in &session.turns {
        let overrides = TurnOverrides {
            use_reranker: Some(t.config.use_reranker),
            use_refinement: Some(t.config.use_refinement),
        };
        answer_turn(pipeline, &mut fresh, &t.user_text, &overrides)?;
    }
    Ok(fresh)
}

/// Live sessions, each behind its own lock so one session runs one turn at a
/// time while different sessions proceed in parallel.
pub struct SessionStore {
    dir: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counter: Mutex<u64>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        SessionStore {
            dir: None,
            sessions: Mutex::new(HashMap::new()),
            counter: Mutex::new(0),
        }
    }

    /// Persists to `<dir>/<session_id>.jsonl`, reloading any logs already there.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut sessions = HashMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "jsonl") {
                let events: Vec<SessionEvent> = jsonl::read(&path)?;
                let s = Session::from_events(&events)?;
                sessions.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        let n = sessions.len() as u64;
        Ok(SessionStore {
            dir: Some(dir.to_path_buf()),
            sessions: Mutex::new(sessions),
            counter: Mutex::new(n),
        })
    }

    fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    pub fn create(&self) -> Result<String> {
        let id = {
            let mut n = self.counter.lock().expect("counter lock");
            *n += 1;
            format!("s{:04}-{:08x}", *n, rand::random::<u32>())
        };
        if let Some(path) = self.log_path(&id) {
            jsonl::append(&path, &SessionEvent::Created { session_id: id.clone() })?;
        }
        self.sessions
            .lock()
            .expect("session map lock")
            .insert(id.clone(), Arc::new(Mutex::new(Session::new(id.clone()))));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session map lock").get(id).cloned()
    }

    pub fn snapshot(&self, id: &str) -> Result<Session> {
        let s = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let guard = s.lock().expect("session lock");
        Ok(guard.clone())
    }

    /// Runs a turn under the session's lock and logs it before it becomes visible.
    pub fn turn(&self, pipeline: &Pipeline, id: &str, user_text: &str, overrides: &TurnOverrides) -> Result<TurnRecord> {
        let s = self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let mut guard = s.lock().expect("session lock");
        let ctx = guard.context_with(user_text)?;
        let record = pipeline.answer(&ctx, overrides, guard.turns.len())?;
        if let Some(path) = self.log_path(id) {
            jsonl::append(&path, &SessionEvent::Turn { record: record.clone() })?;
        }
        guard.turns.push(record.clone());
        Ok(record)
    }
}
