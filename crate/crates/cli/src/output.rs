//! Exit codes, run summaries and cleanup of partially written outputs.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<ipa_core::Error> for CliError {
    fn from(e: ipa_core::Error) -> Self {
        use ipa_core::Error as E;
        let code = match &e {
            E::NonFinite(_) => EXIT_NUMERIC,
            E::InvalidArgument(_) | E::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Machine-readable record of one command: its inputs, seeds and artifacts.
pub struct Summary {
    command: &'static str,
    config: Value,
    seeds: Value,
    artifacts: Vec<PathBuf>,
    details: Map<String, Value>,
    lines: Vec<String>,
}

impl Summary {
    pub fn new(command: &'static str, config: Value) -> Self {
        Self {
            command,
            config,
            seeds: json!({}),
            artifacts: Vec::new(),
            details: Map::new(),
            lines: Vec::new(),
        }
    }

    pub fn seeds(&mut self, seeds: Value) {
        self.seeds = seeds;
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn detail(&mut self, key: &str, value: impl Into<Value>) {
        self.details.insert(key.to_string(), value.into());
    }

    /// Line printed in human-readable mode.
    pub fn line(&mut self, text: impl Into<String>) {
        self.lines.push(text.into());
    }

    pub fn emit(&self, as_json: bool) {
        if as_json {
            let mut v = json!({
                "command": self.command,
                "exit_code": 0,
                "config": self.config,
                "seeds": self.seeds,
                "artifacts": self.artifacts,
            });
            v.as_object_mut().expect("object").extend(self.details.clone());
            println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
        } else {
            for l in &self.lines {
                println!("{l}");
            }
        }
    }
}

/// Removes directories and files this command created unless `commit` is called.
#[derive(Default)]
pub struct OutputGuard {
    created: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    /// Creates `dir` (and parents). Only a directory that did not exist before
    /// is removed on failure.
    pub fn dir(&mut self, dir: &Path) -> CliResult<()> {
        if !dir.exists() {
            let mut top = dir.to_path_buf();
            while let Some(parent) = top.parent().filter(|p| !p.as_os_str().is_empty() && !p.exists()) {
                top = parent.to_path_buf();
            }
            std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
            self.created.push(top);
        } else if !dir.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
        }
        Ok(())
    }

    /// Registers a file about to be written.
    pub fn file(&mut self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.dir(parent)?;
        }
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.created.iter().rev() {
            let _ = if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else {
                std::fs::remove_file(p)
            };
        }
    }
}
