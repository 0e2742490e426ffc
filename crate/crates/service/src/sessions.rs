//! One-time pending ceremony state.
//!
//! Every entry can be consumed at most once. After consumption (or expiry)
//! the id is remembered for one more TTL so a second attempt is reported as
//! a replay instead of an unknown session.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

use vpass_core::encoding::b64_url_encode;

use crate::clock::Clock;

pub const SESSION_ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("unknown session")]
    UnknownSession,
    #[error("session expired")]
    SessionExpired,
    #[error("session already used")]
    SessionReplayed,
}

/// Opaque random token naming a pending ceremony; base64url in transport.
pub fn new_token(len: usize) -> String {
    let mut bytes = vec![0u8; len];
    OsRng.fill_bytes(&mut bytes);
    b64_url_encode(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Closed {
    Consumed,
    Expired,
}

struct Live<T> {
    value: T,
    expires_at: DateTime<Utc>,
}

struct Inner<T> {
    live: HashMap<String, Live<T>>,
    closed: HashMap<String, (Closed, DateTime<Utc>)>,
}

pub struct SessionStore<T> {
    inner: Mutex<Inner<T>>,
    ttl: Duration,
    clock: Arc<dyn Clock>,
}

impl<T> SessionStore<T> {
    pub fn new(ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                live: HashMap::new(),
                closed: HashMap::new(),
            }),
            ttl,
            clock,
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// Stores `value` under a fresh session id.
    pub fn insert(&self, value: T) -> String {
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        Self::sweep_locked(&mut inner, now, self.ttl);
        loop {
            let id = new_token(SESSION_ID_LEN);
            if inner.live.contains_key(&id) || inner.closed.contains_key(&id) {
                continue;
            }
            inner.live.insert(
                id.clone(),
                Live {
                    value,
                    expires_at: now + self.ttl,
                },
            );
            return id;
        }
    }

    /// Removes and returns the entry. Whatever happens next, the id can never
    /// be consumed again.
    pub fn consume(&self, id: &str) -> Result<T, SessionError> {
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        if let Some((state, _)) = inner.closed.get(id) {
            return Err(match state {
                Closed::Consumed => SessionError::SessionReplayed,
                Closed::Expired => SessionError::SessionExpired,
            });
        }
        let entry = inner.live.remove(id).ok_or(SessionError::UnknownSession)?;
        if entry.expires_at <= now {
            inner.closed.insert(id.to_string(), (Closed::Expired, now + self.ttl));
            return Err(SessionError::SessionExpired);
        }
        inner.closed.insert(id.to_string(), (Closed::Consumed, now + self.ttl));
        Ok(entry.value)
    }

    /// Drops expired entries and stale replay markers.
    pub fn sweep(&self) {
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        Self::sweep_locked(&mut inner, now, self.ttl);
    }

    fn sweep_locked(inner: &mut Inner<T>, now: DateTime<Utc>, ttl: Duration) {
        let expired: Vec<String> = inner
            .live
            .iter()
            .filter(|(_, e)| e.expires_at <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            inner.live.remove(&id);
            inner.closed.insert(id, (Closed::Expired, now + ttl));
        }
        inner.closed.retain(|_, (_, until)| *until > now);
    }

    /// Number of entries still holding data.
    pub fn live_count(&self) -> usize {
        self.inner.lock().unwrap().live.len()
    }

    /// Number of entries that are still usable right now. Unlike `sweep`,
    /// this never changes the store.
    pub fn active_count(&self) -> usize {
        let now = self.clock.now();
        let inner = self.inner.lock().unwrap();
        inner.live.values().filter(|e| e.expires_at > now).count()
    }

    /// Number of remembered ids (no payload).
    pub fn closed_count(&self) -> usize {
        self.inner.lock().unwrap().closed.len()
    }
}
