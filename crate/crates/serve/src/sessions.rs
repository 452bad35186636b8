use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array2;
use uuid::Uuid;

/// Encoded state of one source image.
#[derive(Clone, Debug)]
pub struct Session {
    /// Checkpoint hash of the model that produced it.
    pub model: String,
    /// `(K, 2)` normalized landmarks.
    pub landmarks: Array2<f32>,
    /// `(K+1, C)`, absent for descriptorless models.
    pub descriptors: Option<Array2<f32>>,
}

struct Entry {
    session: Arc<Session>,
    last_used: Instant,
}

/// Sessions with an idle TTL and a least-recently-used cap.
pub struct SessionCache {
    ttl: Duration,
    cap: usize,
    entries: HashMap<String, Entry>,
}

impl SessionCache {
    pub fn new(ttl: Duration, cap: usize) -> Self {
        Self { ttl, cap: cap.max(1), entries: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn purge(&mut self, now: Instant) {
        let ttl = self.ttl;
        self.entries.retain(|_, e| now.duration_since(e.last_used) < ttl);
    }

    pub fn insert(&mut self, session: Session) -> String {
        self.insert_at(session, Instant::now())
    }

    pub fn insert_at(&mut self, session: Session, now: Instant) -> String {
        self.purge(now);
        while self.entries.len() >= self.cap {
            let oldest = self.entries.iter().min_by_key(|(_, e)| e.last_used).map(|(k, _)| k.clone());
            match oldest {
                Some(k) => self.entries.remove(&k),
                None => break,
            };
        }
        let id = Uuid::new_v4().to_string();
        self.entries.insert(id.clone(), Entry { session: Arc::new(session), last_used: now });
        id
    }

    pub fn get(&mut self, id: &str) -> Option<Arc<Session>> {
        self.get_at(id, Instant::now())
    }

    /// Looks up a live session and refreshes its TTL.
    pub fn get_at(&mut self, id: &str, now: Instant) -> Option<Arc<Session>> {
        let ttl = self.ttl;
        match self.entries.get_mut(id) {
            Some(e) if now.duration_since(e.last_used) < ttl => {
                e.last_used = now;
                Some(e.session.clone())
            }
            Some(_) => {
                self.entries.remove(id);
                None
            }
            None => None,
        }
    }
}
