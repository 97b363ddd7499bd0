//! Name-keyed factories for interchangeable implementations (text-generation
//! clients, generation/scorer backends, decoders). Options arrive as a JSON
//! value so each strategy reads only the keys it understands.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("unknown {kind} strategy `{name}` (available: {available})")]
    Unknown { kind: &'static str, name: String, available: String },
    #[error("invalid options for `{name}`: {reason}")]
    Options { name: String, reason: String },
}

pub type Factory<T> = fn(&Value) -> Result<T, StrategyError>;

pub struct StrategyTable<T> {
    kind: &'static str,
    factories: BTreeMap<&'static str, Factory<T>>,
}

impl<T> StrategyTable<T> {
    pub fn new(kind: &'static str) -> Self {
        StrategyTable { kind, factories: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<T>) -> &mut Self {
        self.factories.insert(name, factory);
        self
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn create(&self, name: &str, options: &Value) -> Result<T, StrategyError> {
        let factory = self.factories.get(name).ok_or_else(|| StrategyError::Unknown {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(options)
    }
}

/// Deserializes strategy options, treating `null` as an empty object.
pub fn options<O: DeserializeOwned>(name: &str, value: &Value) -> Result<O, StrategyError> {
    let v = if value.is_null() { Value::Object(Default::default()) } else { value.clone() };
    serde_json::from_value(v).map_err(|e| StrategyError::Options { name: name.to_string(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_unknown() {
        let mut t: StrategyTable<u32> = StrategyTable::new("number");
        t.register("one", |_| Ok(1)).register("two", |_| Ok(2));
        assert_eq!(t.create("two", &Value::Null).unwrap(), 2);
        let err = t.create("three", &Value::Null).unwrap_err();
        assert_eq!(err.to_string(), "unknown number strategy `three` (available: one, two)");
    }
}
