use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stvar_core::io::{self, Provenance};

use crate::{CliError, GlobalArgs};

/// Per-run state: output location, seed and the hash of everything that
/// determines the outputs.
pub struct RunContext {
    out_dir: PathBuf,
    command: String,
    hasher: Sha256,
    seed: Option<u64>,
}

impl RunContext {
    pub fn new(global: &GlobalArgs, command: &str) -> Result<Self, CliError> {
        fs::create_dir_all(&global.out_dir).map_err(stvar_core::Error::from)?;
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        Ok(Self { out_dir: global.out_dir.clone(), command: command.into(), hasher, seed: None })
    }

    /// Records the seed of a stochastic command, failing when none was given.
    pub fn require_seed(&mut self, seed: Option<u64>) -> Result<u64, CliError> {
        let seed = seed.ok_or_else(|| {
            CliError::Usage(format!("{} is stochastic: pass --seed or set STVAR_SEED", self.command))
        })?;
        self.seed = Some(seed);
        Ok(seed)
    }

    /// Reads an input file and folds its bytes into the config hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| {
            stvar_core::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(&bytes);
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = self.read_input(path)?;
        String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))
    }

    /// Folds resolved settings into the config hash.
    pub fn record<T: Serialize>(&mut self, settings: &T) -> Result<(), CliError> {
        let text = serde_json::to_string(settings).map_err(stvar_core::Error::from)?;
        self.hasher.update(text.as_bytes());
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        let digest = self.hasher.clone().finalize();
        Provenance {
            tool: "stvar".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            seed: self.seed,
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    pub fn output(&self, name: &str) -> Result<fs::File, CliError> {
        Ok(io::create(&self.out_dir.join(name))?)
    }

    pub fn announce(&self, name: &str) {
        println!("wrote {}", self.out_dir.join(name).display());
    }
}
