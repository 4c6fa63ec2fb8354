//! Append-only ledger of completed problems.
//!
//! The first line records the config digest the run was started with; every
//! following line is one finished problem. A run resumed with a different
//! digest is refused. A torn final line (no trailing newline) is discarded
//! and the file truncated back to the last complete entry.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LedgerEntry, RewriteError};
use crate::corpus::write_json_line;

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerHeader {
    pub schema_version: u32,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LedgerRecord {
    Header(LedgerHeader),
    Outcome(LedgerEntry),
}

pub struct Ledger {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Ledger {
    /// Opens (or creates) the ledger and returns the entries already in it.
    pub fn open(path: &Path, config_digest: &str) -> Result<(Ledger, Vec<LedgerEntry>), RewriteError> {
        let io_err = |e: std::io::Error| RewriteError::Checkpoint(format!("{}: {e}", path.display()));
        let existing = match fs::read_to_string(path) {
            Ok(text) => Some(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(io_err(e)),
        };

        let mut entries = Vec::new();
        let mut needs_header = true;
        if let Some(text) = existing.filter(|t| !t.is_empty()) {
            let (parsed, good_len) = parse_ledger(&text, path)?;
            if let Some(header) = parsed.header {
                if header.config_digest != config_digest {
                    return Err(RewriteError::Checkpoint(format!(
                        "{} was written with config digest {}, current run has {}",
                        path.display(),
                        header.config_digest,
                        config_digest
                    )));
                }
                needs_header = false;
            }
            entries = parsed.entries;
            if good_len < text.len() {
                log::warn!("discarding torn final line of {}", path.display());
                let f = OpenOptions::new().write(true).open(path).map_err(io_err)?;
                f.set_len(good_len as u64).map_err(io_err)?;
            }
        }

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        let mut ledger = Ledger {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if needs_header {
            ledger.write(&LedgerRecord::Header(LedgerHeader {
                schema_version: LEDGER_SCHEMA_VERSION,
                config_digest: config_digest.to_string(),
            }))?;
        }
        Ok((ledger, entries))
    }

    pub fn append(&mut self, entry: &LedgerEntry) -> Result<(), RewriteError> {
        self.write(&LedgerRecord::Outcome(entry.clone()))
    }

    fn write(&mut self, record: &LedgerRecord) -> Result<(), RewriteError> {
        let io_err = |e: std::io::Error| RewriteError::Checkpoint(format!("{}: {e}", self.path.display()));
        write_json_line(&mut self.out, record).map_err(io_err)?;
        self.out.flush().map_err(io_err)
    }
}

struct ParsedLedger {
    header: Option<LedgerHeader>,
    entries: Vec<LedgerEntry>,
}

/// Returns the parsed records and the byte length of the valid prefix.
fn parse_ledger(text: &str, path: &Path) -> Result<(ParsedLedger, usize), RewriteError> {
    let mut parsed = ParsedLedger {
        header: None,
        entries: Vec::new(),
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut offset = 0;
    let mut line_no = 0;
    for segment in text.split_inclusive('\n') {
        line_no += 1;
        if !segment.ends_with('\n') {
            break;
        }
        let line = segment.trim_end_matches(['\n', '\r']);
        let record: LedgerRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                return Err(RewriteError::Checkpoint(format!(
                    "{} line {line_no}: {e}",
                    path.display()
                )))
            }
        };
        match record {
            LedgerRecord::Header(h) if line_no == 1 => {
                if h.schema_version != LEDGER_SCHEMA_VERSION {
                    return Err(RewriteError::Checkpoint(format!(
                        "{}: unsupported ledger schema {}",
                        path.display(),
                        h.schema_version
                    )));
                }
                parsed.header = Some(h);
            }
            LedgerRecord::Header(_) => {
                return Err(RewriteError::Checkpoint(format!(
                    "{} line {line_no}: unexpected header",
                    path.display()
                )))
            }
            LedgerRecord::Outcome(entry) => {
                if parsed.header.is_none() {
                    return Err(RewriteError::Checkpoint(format!("{}: missing header", path.display())));
                }
                if let Some(prev) = seen.insert(entry.outcome.problem_id.clone(), line_no) {
                    return Err(RewriteError::Checkpoint(format!(
                        "{}: problem `{}` recorded on lines {prev} and {line_no}",
                        path.display(),
                        entry.outcome.problem_id
                    )));
                }
                parsed.entries.push(entry);
            }
        }
        offset += segment.len();
    }
    Ok((parsed, offset))
}
