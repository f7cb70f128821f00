//! Optional `key=value` config files. Each key names a long flag of the
//! selected subcommand; flags given on the command line win.

use std::collections::HashSet;
use std::path::Path;

use clap::{ArgAction, Command};

/// Parses `key = value` lines. `#` starts a comment; keys accept `_` or `-`.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, String)>, String> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected key=value, got `{line}`", origin.display(), no + 1));
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            return Err(format!("{}:{}: empty key", origin.display(), no + 1));
        }
        if !seen.insert(key.clone()) {
            return Err(format!("{}:{}: key `{key}` given twice", origin.display(), no + 1));
        }
        entries.push((key, value.trim().to_string()));
    }
    Ok(entries)
}

/// Pulls `--config PATH` out of `args`, returning the path if present.
pub fn take_config_flag(args: &mut Vec<String>) -> Result<Option<String>, String> {
    let mut found = None;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--" {
            break;
        }
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err("--config needs a file path".into());
            }
            found = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(path) = args[i].strip_prefix("--config=") {
            found = Some(path.to_string());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

/// Appends file entries that the command line did not already set.
pub fn merge(args: &mut Vec<String>, entries: &[(String, String)], root: &Command) -> Result<(), String> {
    let Some(sub_name) = args.get(1).filter(|a| !a.starts_with('-')).cloned() else {
        return Err("--config needs a subcommand, e.g. `qemb qrip --config run.cfg`".into());
    };
    let Some(sub) = root.find_subcommand(&sub_name) else {
        // Leave the unknown-subcommand report to clap.
        return Ok(());
    };
    let given: HashSet<String> = args
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (key, value) in entries {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            return Err(format!("config key `{key}` is not an option of `{sub_name}`"));
        };
        if given.contains(key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "1" | "yes" => args.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                other => return Err(format!("config key `{key}` expects true or false, got `{other}`")),
            },
            _ => {
                args.push(format!("--{key}"));
                args.push(value.clone());
            }
        }
    }
    Ok(())
}
