//! Flat `key=value` configuration files and per-invocation run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clasp_core::fsutil::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(clasp_core::Error::Config(format!("config line {}: expected key=value, got `{line}`", n + 1)));
        };
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

/// Splices options from `--config FILE` into the argument list right after
/// the subcommand. Options given explicitly on the command line win.
pub fn merge_config_args(args: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => anyhow::Error::new(clasp_core::Error::MissingArtifact(format!("config file {path}"))),
        _ => anyhow::Error::new(e).context(format!("reading {path}")),
    })?;
    let entries = parse_config(&text)?;
    let Some(pos) = args.iter().position(|a| subcommands.contains(&a.as_str())) else { return Ok(args) };
    let given = |key: &str| args.iter().any(|a| a == &format!("--{key}") || a.starts_with(&format!("--{key}=")));
    let mut injected = Vec::new();
    for (k, v) in entries {
        if given(&k) || k == "config" {
            continue;
        }
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => {
                // list-valued options are stored space-separated
                for part in v.split_whitespace() {
                    injected.push(format!("--{k}={part}"));
                }
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Flattens a serializable argument struct into `key=value` lines.
pub fn render_config<T: Serialize>(cmd: &str, args: &T) -> Result<String> {
    let value = serde_json::to_value(args)?;
    let mut s = format!("# clasp {cmd}\n");
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            let key = k.replace('_', "-");
            let text = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                    .collect::<Vec<_>>()
                    .join(" "),
                other => other.to_string(),
            };
            s.push_str(&format!("{key}={text}\n"));
        }
    }
    Ok(s)
}

/// Creates `<root>/<cmd>-<UTC timestamp>-<config hash>` and stores the
/// configuration snapshot in it.
pub fn create_run_dir(root: &Path, explicit: Option<&Path>, cmd: &str, config: &str) -> Result<PathBuf> {
    let hash = hex::encode(&Sha256::digest(config.as_bytes())[..4]);
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => root.join(format!("{cmd}-{}-{hash}", chrono::Utc::now().format("%Y%m%dT%H%M%S"))),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    write_atomic(&dir.join("config.txt"), config.as_bytes())?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalises_keys() {
        let c = parse_config("# header\nbatch_size = 8\nmode=clasp # trailing\n\n").unwrap();
        assert_eq!(c["batch-size"], "8");
        assert_eq!(c["mode"], "clasp");
        assert!(parse_config("novalue").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "steps=10\nseed=3\nskip=true\nwidths=8 16\n").unwrap();
        let args: Vec<String> =
            ["clasp", "--config", path.to_str().unwrap(), "train", "--seed", "5"].iter().map(|s| s.to_string()).collect();
        let merged = merge_config_args(args, &["train"]).unwrap();
        assert!(merged.contains(&"--steps=10".to_string()));
        assert!(merged.contains(&"--skip".to_string()));
        assert!(merged.contains(&"--widths=8".to_string()) && merged.contains(&"--widths=16".to_string()));
        assert!(!merged.iter().any(|a| a == "--seed=3"));
        assert_eq!(merged.last().unwrap(), "5");
    }
}
