//! Name-keyed registry of interchangeable strategies.
//!
//! Each strategy family (attention kernels, condition checkers, projection
//! modes) defines a trait, and its module exposes a function returning a
//! [`Registry`] pre-populated with the built-in implementations. The CLI and
//! config files select entries by name at runtime.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Implemented by every registrable strategy.
pub trait Named {
    fn name(&self) -> &'static str;
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers `entry`, replacing any earlier entry with the same name.
    pub fn register(&mut self, entry: Arc<T>) -> &mut Self {
        self.entries.retain(|e| e.name() != entry.name());
        self.entries.push(entry);
        self
    }

    pub fn with(mut self, entry: Arc<T>) -> Self {
        self.register(entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<T>> {
        self.entries.iter()
    }
}
