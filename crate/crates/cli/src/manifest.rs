//! Run manifests.
//!
//! The manifest hash covers everything that determines a run's numbers: the resolved
//! engine settings (after the method flag is applied), model and evaluation settings,
//! seeds, the hashes of the corpus, tokenizer and base checkpoint, and the tool
//! version. Output paths and the method label are recorded but not hashed, so `ft`
//! and `evoedit` with both ablation flags set share one hash.

use std::path::Path;

use evoedit_core::engine::{EditConfig, EvalSettings, PretrainConfig};
use evoedit_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SeedSection, TokenizerSection};
use crate::data::sha256_hex;
use crate::error::{CliError, Result};

pub const TOOL_VERSION: &str = concat!("evoedit/", env!("CARGO_PKG_VERSION"), "/ckpt1/csv1");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pretrain,
    Edit,
    PreEditing,
    Sweep,
    Report,
}

/// The hashed part of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: RunKind,
    pub version: String,
    pub model: Option<ModelConfig>,
    pub tokenizer: Option<TokenizerSection>,
    pub engine: Option<EditConfig>,
    pub eval: Option<EvalSettings>,
    pub pretrain: Option<PretrainConfig>,
    pub seeds: SeedSection,
    pub corpus_hash: Option<String>,
    pub tokenizer_hash: Option<String>,
    pub base_hash: Option<String>,
    /// Hashes of member manifests, for sweeps and reports.
    pub members: Vec<String>,
}

impl Provenance {
    pub fn new(kind: RunKind, seeds: SeedSection) -> Self {
        Self {
            kind,
            version: TOOL_VERSION.to_string(),
            model: None,
            tokenizer: None,
            engine: None,
            eval: None,
            pretrain: None,
            seeds,
            corpus_hash: None,
            tokenizer_hash: None,
            base_hash: None,
            members: Vec::new(),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("provenance serializes"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub hash: String,
    /// Method label for edit runs (`evoedit`, `ft`, ...), `pre_editing` for the
    /// unedited baseline.
    pub method: Option<String>,
    pub provenance: Provenance,
    /// The configuration file as given, before method flags.
    pub config: RunConfig,
    /// Files written, relative to the directory holding the manifest.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(provenance: Provenance, method: Option<String>, config: RunConfig) -> Self {
        Self {
            hash: provenance.hash(),
            method,
            provenance,
            config,
            outputs: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if m.hash != m.provenance.hash() {
            return Err(CliError::Data(format!(
                "{}: manifest hash does not match its contents",
                path.display()
            )));
        }
        Ok(m)
    }
}
