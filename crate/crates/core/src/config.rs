//! Line-oriented `key=value` grammar shared by run configuration files and
//! the model description embedded in weight files.
//!
//! Blank lines and lines starting with `#` are ignored; keys may repeat and
//! their order is preserved. Values that are themselves records use
//! comma-separated `field:value` pairs.

use crate::error::{Error, Result};

pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `a:1,b:2` into ordered field pairs.
pub fn parse_record(value: &str) -> Result<Vec<(String, String)>> {
    value
        .split(',')
        .map(|part| {
            part.split_once(':')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected field:value in `{value}`")))
        })
        .collect()
}

pub(crate) struct Record<'a> {
    fields: &'a [(String, String)],
    context: &'a str,
}

impl<'a> Record<'a> {
    pub(crate) fn new(fields: &'a [(String, String)], context: &'a str) -> Self {
        Self { fields, context }
    }

    pub(crate) fn get(&self, key: &str) -> Option<&'a str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub(crate) fn require(&self, key: &str) -> Result<&'a str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("{}: missing `{key}`", self.context)))
    }

    pub(crate) fn usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse().map_err(|_| {
            Error::Config(format!(
                "{}: `{key}` must be a non-negative integer, got `{v}`",
                self.context
            ))
        })
    }

    pub(crate) fn bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::Config(format!(
                "{}: `{key}` must be true or false, got `{v}`",
                self.context
            ))),
        }
    }
}
