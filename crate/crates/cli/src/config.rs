//! `key=value` config files spliced into the command line.
//!
//! Each line `key=value` becomes `--key value` inserted right after the
//! subcommand name, ahead of the user's own flags. Later occurrences of a
//! flag override earlier ones, so explicit flags win over the file and the
//! file wins over built-in defaults. Blank lines and `#` comments are skipped.

use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config file {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {line:?}", n + 1);
        };
        let k = k.trim();
        if k.is_empty() || k.starts_with('-') {
            bail!("line {}: bad key {k:?}", n + 1);
        }
        if k == "config" {
            bail!(
                "line {}: config files cannot include other config files",
                n + 1
            );
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Position of the subcommand in `argv`, skipping the values of the global
/// options that take one.
pub fn subcommand_position(
    argv: &[String],
    subcommands: &[&str],
    valued: &[&str],
) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if subcommands.contains(&a) {
            return Some(i);
        }
        if valued.contains(&a) {
            i += 1;
        }
        i += 1;
    }
    None
}

/// `argv` with the file's entries inserted after the subcommand.
pub fn splice(argv: &[String], at: usize, entries: &[(String, String)]) -> Vec<String> {
    let mut out = argv[..=at].to_vec();
    for (k, v) in entries {
        out.push(format!("--{k}"));
        out.push(v.clone());
    }
    out.extend_from_slice(&argv[at + 1..]);
    out
}
