//! Layered configuration: serialized defaults, then a file, then dotted
//! `--set` overrides. Every layer must name keys that already exist.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Runtime failure; exit code 1.
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces the base wholesale.
pub fn merge(base: &mut Value, top: Value, prefix: &str) -> Result<(), CliError> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let path = join(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Usage(format!("unknown config key `{path}`")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, t) => {
            *b = t;
            Ok(())
        }
    }
}

/// Parses a scalar the way a shell user would expect: JSON when it parses,
/// otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` overrides. Array elements are addressed by index.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        if key.is_empty() {
            return Err(CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")));
        }
        let mut node = &mut *root;
        for part in key.split('.') {
            let next = match node {
                Value::Object(m) => m.get_mut(part),
                Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            };
            node = next.ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
        }
        *node = parse_value(raw);
    }
    Ok(())
}
