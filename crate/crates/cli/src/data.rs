//! Corpus and tokenizer files.
//!
//! A corpus is JSON Lines, one edit instance per line:
//!
//! ```json
//! {"id":"synth-0-00000","edit_text":"In 2005, Kalo Renta joined Zyqua Phorwex. ...",
//!  "queries":[{"rank":"R1_memory","question":"In 2005, Kalo Renta joined ____.","answer":"Zyqua Phorwex"}, ...],
//!  "metadata":"employment"}
//! ```
//!
//! `rank` is one of `R1_memory`, `R2_comprehension`, `R3_constrained`,
//! `R4_reasoning`; every instance needs at least one query per rank. Blank lines are
//! skipped. A tokenizer file is the JSON form of its mode, specials and merge list.

use std::fmt::Write as _;
use std::path::Path;

use evoedit_core::corpus::EditInstance;
use evoedit_core::tokenizer::{Tokenizer, TokenizerSpec};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Parses JSONL text. All offending lines are reported together.
pub fn parse_jsonl(text: &str) -> Result<Vec<EditInstance>> {
    let mut out = Vec::new();
    let mut problems = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        match serde_json::from_str::<EditInstance>(line) {
            Ok(inst) => match inst.validate() {
                Ok(()) => out.push(inst),
                Err(e) => {
                    let _ = writeln!(problems, "line {lineno}: {e}");
                }
            },
            Err(e) => {
                let _ = writeln!(problems, "line {lineno}: {e}");
            }
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Data(problems.trim_end().to_string()))
    }
}

pub fn to_jsonl(instances: &[EditInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    out
}

pub fn load_jsonl(path: &Path) -> Result<Vec<EditInstance>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_jsonl(&text).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}:\n{m}", path.display())),
        other => other,
    })
}

pub fn save_jsonl(path: &Path, instances: &[EditInstance]) -> Result<()> {
    std::fs::write(path, to_jsonl(instances)).map_err(CliError::io(path))
}

pub fn save_tokenizer(path: &Path, tok: &Tokenizer) -> Result<()> {
    let json = serde_json::to_string(tok.spec()).expect("spec serializes");
    std::fs::write(path, json).map_err(CliError::io(path))
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let spec: TokenizerSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Tokenizer::from_spec(spec).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a corpus in its canonical JSONL form.
pub fn corpus_hash(instances: &[EditInstance]) -> String {
    sha256_hex(to_jsonl(instances).as_bytes())
}
