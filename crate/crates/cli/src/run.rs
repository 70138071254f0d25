//! Output directory bookkeeping and the per-command run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sdoh_core::io::sha256_hex;

use crate::error::{config, CliError, CliResult};

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    args: &'a serde_json::Value,
    seeds: &'a BTreeMap<String, u64>,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
}

/// Collects inputs read and artifacts written by one command. Outputs are
/// recorded relative to the output directory so two runs into different
/// directories produce the same manifest.
pub struct Run {
    command: String,
    args: serde_json::Value,
    out: PathBuf,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileDigest>,
    input_paths: Vec<PathBuf>,
    outputs: Vec<FileDigest>,
}

impl Run {
    pub fn new(command: &str, args: &impl Serialize, out: &Path) -> CliResult<Run> {
        fs::create_dir_all(out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
        Ok(Run {
            command: command.to_string(),
            args: serde_json::to_value(args)?,
            out: out.to_path_buf(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            input_paths: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Reads an input file and records its digest. Missing inputs are a
    /// config error.
    pub fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        self.input_paths.push(fs::canonicalize(path)?);
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> CliResult<String> {
        String::from_utf8(self.read(path)?).map_err(|_| CliError::Data(format!("{} is not UTF-8", path.display())))
    }

    /// Writes an artifact under the output directory, refusing to
    /// overwrite anything this run has read.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if let Ok(canonical) = fs::canonicalize(&path) {
            if self.input_paths.contains(&canonical) {
                return config(format!("output {} would overwrite an input", path.display()));
            }
        }
        fs::write(&path, bytes)?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes a CSV produced by `f` together with a JSON mirror of `value`.
    pub fn write_table<E>(
        &mut self,
        stem: &str,
        value: &impl Serialize,
        f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> CliResult<()>
    where
        CliError: From<E>,
    {
        let mut csv = Vec::new();
        f(&mut csv)?;
        self.write(&format!("{stem}.csv"), &csv)?;
        self.write_json(&format!("{stem}.json"), value)
    }

    pub fn output_names(&self) -> Vec<String> {
        self.outputs.iter().map(|o| o.path.clone()).collect()
    }

    /// Writes `manifest-<command>.json` and returns its name.
    pub fn finish(self) -> CliResult<String> {
        let name = format!("manifest-{}.json", self.command.replace(' ', "-"));
        let manifest = Manifest {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            args: &self.args,
            seeds: &self.seeds,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.out.join(&name), bytes)?;
        Ok(name)
    }
}
