//! Flat `key=value` configuration files.
//!
//! Keys are long flag names without the leading dashes. Values from the file
//! are spliced into the argument list right after the subcommand, and only
//! for flags the user did not pass explicitly.

use std::ffi::OsString;
use std::path::Path;

use clap::{Arg, Command};

/// Global options that take a value; needed to locate the subcommand token.
const VALUED_GLOBALS: &[&str] = &["--config", "--seed", "--threads"];

#[derive(Debug)]
pub struct ConfigError(pub String);

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key=value, got '{}'", n + 1, line)))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(ConfigError(format!("line {}: empty key", n + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if VALUED_GLOBALS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn user_passed(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{}", key);
    let prefix = format!("--{}=", key);
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&prefix)
    })
}

fn find_arg<'a>(root: &'a Command, sub: Option<&'a Command>, key: &str) -> Option<&'a Arg> {
    sub.into_iter()
        .flat_map(|c| c.get_arguments())
        .chain(root.get_arguments())
        .find(|a| a.get_long() == Some(key))
}

fn truthy(v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(ConfigError(format!("expected a boolean, got '{}'", other))),
    }
}

/// Returns `args` with the entries of the `--config` file merged in.
pub fn expand(args: Vec<OsString>, root: &Command) -> Result<Vec<OsString>, ConfigError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {}", path.display(), e)))?;
    let entries = parse(&text)?;
    let Some(pos) = subcommand_position(&args) else {
        return Ok(args);
    };
    let sub_name = args[pos].to_string_lossy().into_owned();
    let sub = root.find_subcommand(&sub_name);
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" || value.is_empty() || user_passed(&args, &key) {
            continue;
        }
        let arg = find_arg(root, sub, &key)
            .ok_or_else(|| ConfigError(format!("unknown config key '{}' for '{}'", key, sub_name)))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{}", key).into());
            injected.push(value.into());
        } else if truthy(&value)? {
            injected.push(format!("--{}", key).into());
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Renders `key=value` lines from a flat JSON object, sorted by key.
pub fn dump(value: &serde_json::Value) -> String {
    let mut out = String::new();
    if let serde_json::Value::Object(map) = value {
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        for k in keys {
            let v = &map[k];
            let text = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::Array(items) if items.is_empty() => continue,
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{}={}\n", k, text));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse("# run\nalpha_1 = 0.1\n\n--draws=50\n").unwrap();
        assert_eq!(e, vec![("alpha-1".into(), "0.1".into()), ("draws".into(), "50".into())]);
        assert!(parse("novalue\n").is_err());
    }

    #[test]
    fn locates_subcommand_after_globals() {
        let args: Vec<OsString> = ["synthpi", "--seed", "3", "--config", "x", "pi", "--draws", "5"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(subcommand_position(&args), Some(5));
        assert_eq!(config_path(&args), Some("x".into()));
        assert!(user_passed(&args, "draws"));
        assert!(!user_passed(&args, "alpha1"));
    }

    #[test]
    fn dump_is_sorted_and_flat() {
        let v = serde_json::json!({"b": 2, "a": "x", "c": [1, 2], "d": null});
        assert_eq!(dump(&v), "a=x\nb=2\nc=1,2\n");
    }
}
