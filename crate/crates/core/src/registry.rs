//! Name-keyed constructor tables for the interchangeable strategies
//! (feature maps, occupancy backends, MPC scorers).

use crate::error::{Result, VocError};

pub type Constructor<C, T> = fn(&C) -> Result<Box<T>>;

pub struct Registry<C: 'static, T: ?Sized + 'static> {
    kind: &'static str,
    entries: Vec<(&'static str, Constructor<C, T>)>,
}

impl<C: 'static, T: ?Sized + 'static> Registry<C, T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn register(mut self, name: &'static str, ctor: Constructor<C, T>) -> Self {
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate {} `{name}`",
            self.kind
        );
        self.entries.push((name, ctor));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn build(&self, name: &str, ctx: &C) -> Result<Box<T>> {
        match self.entries.iter().find(|(n, _)| *n == name) {
            Some((_, ctor)) => ctor(ctx),
            None => Err(VocError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().collect::<Vec<_>>().join(", "),
            }),
        }
    }
}
