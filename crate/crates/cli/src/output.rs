use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::Serialize;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

pub fn format_of(path: &Path) -> Result<Format, Failure> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("csv") => Ok(Format::Csv),
        Some("json") => Ok(Format::Json),
        _ => Err(Failure::usage(anyhow!(
            "cannot tell the output format of {} (expected .csv or .json)",
            path.display()
        ))),
    }
}

pub fn json_string(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::usage)
}

/// Writes `json` or the CSV rendering, chosen by the extension of `out`;
/// JSON on stdout without `out`.
pub fn emit<T: Serialize>(out: Option<&Path>, json: &T, csv: impl FnOnce() -> String) -> Result<(), Failure> {
    match out {
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(json_string(json).as_bytes())
                .context("writing stdout")
                .map_err(Failure::usage)
        }
        Some(path) => match format_of(path)? {
            Format::Csv => write_text(path, &csv()),
            Format::Json => write_text(path, &json_string(json)),
        },
    }
}
