//! Flat `key = value` config files.
//!
//! Every key names a command-line flag (underscores and hyphens are
//! interchangeable). The file's entries are spliced in directly after the
//! subcommand, ahead of the user's own flags, and since every flag overrides
//! itself the command line wins.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::CliError;

/// Global flags that take a value and may appear before the subcommand.
const VALUED_GLOBALS: [&str; 2] = ["--config", "--threads"];

/// Parses config text into flag arguments, in file order.
pub fn parse_config(text: &str) -> Result<Vec<String>, CliError> {
    let mut args = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| CliError::Usage(format!("config line {}: {msg}", n + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key.starts_with('-') {
            return Err(bad("missing key"));
        }
        if key == "config" {
            return Err(bad("config files cannot include other config files"));
        }
        if value.is_empty() {
            return Err(bad(&format!("no value for {key}")));
        }
        if !seen.insert(key.clone()) {
            return Err(bad(&format!("duplicate key {key}")));
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

/// Removes `--config FILE` from `argv` and splices the file's flags in after
/// the subcommand name.
pub fn expand_args(mut argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut config_path = None;
    let mut i = 1;
    while i < argv.len() {
        if argv[i] == "--" {
            break;
        }
        if let Some(p) = argv[i].strip_prefix("--config=") {
            config_path = Some(p.to_string());
            argv.remove(i);
            continue;
        }
        if argv[i] == "--config" {
            if i + 1 >= argv.len() {
                return Err(CliError::Usage("--config needs a file".into()));
            }
            config_path = Some(argv.remove(i + 1));
            argv.remove(i);
            continue;
        }
        i += 1;
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let text = fs::read_to_string(Path::new(&path))
        .map_err(|e| CliError::Usage(format!("cannot read config file {path}: {e}")))?;
    let extra = parse_config(&text)?;

    let mut pos = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if VALUED_GLOBALS.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if !a.starts_with('-') {
            pos = Some(i + 1);
            break;
        }
        i += 1;
    }
    let Some(pos) = pos else {
        return Err(CliError::Usage("a subcommand is required".into()));
    };
    argv.splice(pos..pos, extra);
    Ok(argv)
}
