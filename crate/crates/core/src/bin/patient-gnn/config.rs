//! TOML config files expanded into command-line flags.
//!
//! Top-level keys apply to any subcommand that accepts the flag and are skipped
//! otherwise. Keys under a `[subcommand]` table must be flags of that subcommand.
//! A flag given on the command line wins over the same key in the file.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::Command;
use patient_gnn::{Error, Result};

/// Root options that take a value, so their value is not mistaken for the subcommand.
const VALUED_ROOT: [&str; 3] = ["--config", "--out", "--out-root"];

fn long_flags(cmd: &Command) -> BTreeSet<String> {
    cmd.get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect()
}

fn takes_value(cmd: &Command, root: &Command, long: &str) -> bool {
    cmd.get_arguments()
        .chain(root.get_arguments())
        .find(|a| a.get_long() == Some(long))
        .is_some_and(|a| a.get_action().takes_values())
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn subcommand_position(argv: &[OsString], root: &Command) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if VALUED_ROOT.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if !s.starts_with('-') {
            return root.find_subcommand(s.as_ref()).map(|_| i);
        }
        i += 1;
    }
    None
}

fn user_flags(args: &[OsString]) -> BTreeSet<String> {
    args.iter()
        .filter_map(|a| {
            let s = a.to_string_lossy();
            let name = s.strip_prefix("--")?;
            Some(name.split('=').next().unwrap_or(name).to_string())
        })
        .collect()
}

fn scalar(key: &str, v: &toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        toml::Value::Integer(i) => Ok(i.to_string()),
        toml::Value::Float(f) => Ok(f.to_string()),
        toml::Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(Error::invalid("config", format!("key {key:?} must be a scalar or an array of scalars"))),
    }
}

fn push_flag(out: &mut Vec<OsString>, cmd: &Command, root: &Command, key: &str, v: &toml::Value) -> Result<()> {
    if !takes_value(cmd, root, key) {
        match v {
            toml::Value::Boolean(true) => out.push(format!("--{key}").into()),
            toml::Value::Boolean(false) => {}
            _ => return Err(Error::invalid("config", format!("flag {key:?} expects true or false"))),
        }
        return Ok(());
    }
    match v {
        toml::Value::Array(items) => {
            for item in items {
                out.push(format!("--{key}={}", scalar(key, item)?).into());
            }
        }
        other => out.push(format!("--{key}={}", scalar(key, other)?).into()),
    }
    Ok(())
}

/// Inserts the config file's flags right after the subcommand name.
pub fn expand(argv: Vec<OsString>, root: &Command) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let Some(pos) = subcommand_position(&argv, root) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        reason: e.message().to_string(),
    })?;
    let name = argv[pos].to_string_lossy().to_string();
    let cmd = root.find_subcommand(&name).expect("subcommand located above");
    let mut known = long_flags(cmd);
    known.extend(long_flags(root));
    known.remove("config");
    let given = user_flags(&argv[pos + 1..]);

    let mut injected = Vec::new();
    for (key, value) in &table {
        if value.is_table() {
            continue;
        }
        let flag = key.replace('_', "-");
        if known.contains(&flag) && !given.contains(&flag) {
            push_flag(&mut injected, cmd, root, &flag, value)?;
        }
    }
    if let Some(section) = table.get(&name) {
        let section = section
            .as_table()
            .ok_or_else(|| Error::invalid("config", format!("[{name}] must be a table")))?;
        for (key, value) in section {
            let flag = key.replace('_', "-");
            if !known.contains(&flag) {
                return Err(Error::invalid("config", format!("[{name}] has unknown key {key:?}")));
            }
            if !given.contains(&flag) {
                push_flag(&mut injected, cmd, root, &flag, value)?;
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
