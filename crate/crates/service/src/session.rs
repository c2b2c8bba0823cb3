//! In-memory editing sessions with expiry and a capacity cap.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use timgan_core::editor::EditOutput;
use timgan_core::scenegen::Image;
use tokio::sync::Mutex;

/// One entry of a session's history. Entry 0 holds the initial image and
/// no edit.
#[derive(Clone, Debug)]
pub struct Step {
    pub instruction: Option<String>,
    pub image: Image,
    pub edit: Option<EditOutput>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub created_at: SystemTime,
    history: Vec<Step>,
}

impl Session {
    pub fn new(id: String, initial: Image) -> Self {
        Session {
            id,
            created_at: SystemTime::now(),
            history: vec![Step {
                instruction: None,
                image: initial,
                edit: None,
            }],
        }
    }

    pub fn history(&self) -> &[Step] {
        &self.history
    }

    pub fn current(&self) -> &Step {
        self.history.last().expect("history is never empty")
    }

    pub fn step(&self) -> usize {
        self.history.len() - 1
    }

    pub fn push(&mut self, instruction: String, edit: EditOutput) {
        self.history.push(Step {
            instruction: Some(instruction),
            image: edit.image.clone(),
            edit: Some(edit),
        });
    }

    /// Drops the latest edit; a no-op at step 0.
    pub fn undo(&mut self) {
        if self.history.len() > 1 {
            self.history.pop();
        }
    }
}

pub type SharedSession = Arc<Mutex<Session>>;

struct Slot {
    session: SharedSession,
    last_used: Instant,
}

/// Sessions by id. Sessions idle for longer than the ttl are dropped,
/// least recently used first, whenever room is needed or on [`SessionStore::sweep`].
pub struct SessionStore {
    ttl: Duration,
    capacity: usize,
    slots: HashMap<String, Slot>,
}

impl SessionStore {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        SessionStore {
            ttl,
            capacity,
            slots: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn expired(&self, now: Instant) -> Vec<(Instant, String)> {
        let mut idle: Vec<(Instant, String)> = self
            .slots
            .iter()
            .filter(|(_, s)| now.saturating_duration_since(s.last_used) >= self.ttl)
            .map(|(id, s)| (s.last_used, id.clone()))
            .collect();
        idle.sort();
        idle
    }

    /// Removes every expired session; returns how many were removed.
    pub fn sweep(&mut self, now: Instant) -> usize {
        let expired = self.expired(now);
        for (_, id) in &expired {
            self.slots.remove(id);
        }
        expired.len()
    }

    /// Adds a session, evicting expired ones oldest first if the store is
    /// full. Returns `None` when the store is full of live sessions.
    pub fn insert(&mut self, session: Session, now: Instant) -> Option<SharedSession> {
        if self.slots.len() >= self.capacity {
            let expired = self.expired(now);
            let needed = self.slots.len() + 1 - self.capacity;
            for (_, id) in expired.into_iter().take(needed) {
                self.slots.remove(&id);
            }
            if self.slots.len() >= self.capacity {
                return None;
            }
        }
        let id = session.id.clone();
        let shared = Arc::new(Mutex::new(session));
        self.slots.insert(
            id,
            Slot {
                session: shared.clone(),
                last_used: now,
            },
        );
        Some(shared)
    }

    /// Looks a session up and marks it used. Expired sessions are removed
    /// and reported missing.
    pub fn get(&mut self, id: &str, now: Instant) -> Option<SharedSession> {
        let slot = self.slots.get_mut(id)?;
        if now.saturating_duration_since(slot.last_used) >= self.ttl {
            self.slots.remove(id);
            return None;
        }
        slot.last_used = now;
        Some(slot.session.clone())
    }
}
