//! Name-keyed factories for interchangeable strategies.
//!
//! Every pluggable family (span extractors, entailment filters, corruption
//! modes, contrast objectives) exposes a `builtin_*` registry; callers pick
//! an implementation by name from config or CLI flags and may register
//! their own before lookup.

use crate::error::{Error, Result};

type Factory<T, A> = Box<dyn Fn(&A) -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: Vec<(String, Factory<T, A>)>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers a factory; a later registration under the same name wins.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&A) -> Box<T> + Send + Sync + 'static,
    {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_owned(), Box::new(factory)));
        self
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f(args))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_owned(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}
