//! File access for one pipeline stage. Every read and write goes through a
//! [`Stage`] so the manifest lists exactly the files the stage touched.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use churnforge_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    config_hash: &'a str,
    seed: u64,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

pub struct Stage {
    name: &'static str,
    out_dir: PathBuf,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Forwards writes and hashes the bytes on the way through.
struct Hashing<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for Hashing<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub fn manifest_name(stage: &str) -> String {
    format!("manifest_{stage}.json")
}

impl Stage {
    pub fn new(name: &'static str, out_dir: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Stage {
            name,
            out_dir: out_dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Read a file from the output directory and record its hash.
    pub fn read(&mut self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        self.read_external(name, &path)
    }

    /// Read any file, recording it under `key` in the manifest.
    pub fn read_external(&mut self, key: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(key.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(bytes)
    }

    /// Hash a file without keeping its contents.
    pub fn record_input(&mut self, key: &str, path: &Path) -> Result<()> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut hasher = Sha256::new();
        std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(key.to_string(), hex::encode(hasher.finalize()));
        Ok(())
    }

    /// Create `name` in the output directory, fill it and record its hash.
    pub fn write<T>(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<T>) -> Result<T> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = Hashing {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
        };
        let value = fill(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), hex::encode(w.hasher.finalize()));
        Ok(value)
    }

    /// Like [`Stage::write`] for fills that can fail with a pipeline error.
    pub fn try_write<T>(&mut self, name: &str, fill: impl FnOnce(&mut dyn Write) -> Result<T>) -> Result<T> {
        let mut inner = None;
        let mut failure = None;
        self.write(name, |w| {
            match fill(w) {
                Ok(v) => inner = Some(v),
                Err(e) => failure = Some(e),
            }
            Ok(())
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(inner.expect("fill ran")),
        }
    }

    pub fn finish(self) -> Result<()> {
        let manifest = Manifest {
            stage: self.name,
            config_hash: &self.config_hash,
            seed: self.seed,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Invariant(format!("manifest serialization: {e}")))?;
        text.push('\n');
        let path = self.path(&manifest_name(self.name));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
