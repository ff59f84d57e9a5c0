//! Deferred output writing with a trailing manifest.
//!
//! Verbs accumulate their artifacts in memory and nothing touches the disk
//! until the whole computation has succeeded, so a numerical failure never
//! leaves partial files behind. The manifest is written last and records
//! the configuration hash, the seed, package versions, and a checksum per
//! file; byte-identical runs produce byte-identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use quditsense::code::fnv1a64;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub struct OutputSet {
    verb: String,
    config_text: String,
    seed: u64,
    files: BTreeMap<String, Vec<u8>>,
}

impl OutputSet {
    pub fn new(verb: &str, config: &ExperimentConfig) -> Self {
        OutputSet {
            verb: verb.to_string(),
            config_text: config.serialize(),
            seed: config.seed,
            files: BTreeMap::new(),
        }
    }

    /// Stage a text artifact under `name` (no directories in names).
    pub fn add(&mut self, name: &str, content: String) {
        assert!(
            !name.contains('/') && !name.is_empty(),
            "artifact names are flat: {name}"
        );
        let prior = self.files.insert(name.to_string(), content.into_bytes());
        assert!(prior.is_none(), "duplicate artifact {name}");
    }

    fn manifest(&self) -> String {
        let mut text = String::new();
        text.push_str(&format!("verb = {}\n", self.verb));
        text.push_str(&format!("quditsense = {}\n", quditsense::VERSION));
        text.push_str(&format!(
            "quditsense-cli = {}\n",
            env!("CARGO_PKG_VERSION")
        ));
        text.push_str(&format!(
            "config_hash = {:016x}\n",
            fnv1a64(self.config_text.as_bytes())
        ));
        text.push_str(&format!("seed = {}\n", self.seed));
        text.push_str("files:\n");
        text.push_str(&format!(
            "  config.txt bytes={} fnv1a64={:016x}\n",
            self.config_text.len(),
            fnv1a64(self.config_text.as_bytes())
        ));
        for (name, bytes) in &self.files {
            text.push_str(&format!(
                "  {name} bytes={} fnv1a64={:016x}\n",
                bytes.len(),
                fnv1a64(bytes)
            ));
        }
        text
    }

    /// Write the config echo, every staged file, then the manifest.
    /// On any I/O failure the files written so far are removed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        let mut written: Vec<PathBuf> = Vec::new();
        let mut emit = |name: &str, bytes: &[u8]| -> std::io::Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            written.push(path);
            Ok(())
        };
        let result = (|| {
            emit("config.txt", self.config_text.as_bytes())?;
            for (name, bytes) in &self.files {
                emit(name, bytes)?;
            }
            emit("manifest.txt", self.manifest().as_bytes())
        })();
        if let Err(e) = result {
            for path in &written {
                let _ = fs::remove_file(path);
            }
            return Err(CliError::Numerical(format!(
                "i/o failure while writing outputs: {e}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tempdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "quditsense-out-test-{tag}-{}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn writes_config_files_and_manifest() {
        let cfg = ExperimentConfig::defaults(0.5);
        let mut out = OutputSet::new("simulate-qubit", &cfg);
        out.add("a.csv", "x,y\n1,2\n".to_string());
        out.add("b.txt", "hello\n".to_string());
        let dir = tempdir("basic");
        out.write(&dir).expect("write");
        let manifest = fs::read_to_string(dir.join("manifest.txt")).expect("manifest");
        assert!(manifest.contains("verb = simulate-qubit"));
        assert!(manifest.contains("seed = 7"));
        assert!(manifest.contains("a.csv bytes=8"));
        let echoed = fs::read_to_string(dir.join("config.txt")).expect("echo");
        assert_eq!(echoed, cfg.serialize());
        // File lines appear sorted by name after config.txt.
        let files_at = manifest.find("files:").unwrap();
        let tail = &manifest[files_at..];
        let a = tail.find("a.csv").unwrap();
        let b = tail.find("b.txt").unwrap();
        assert!(a < b);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_is_deterministic() {
        let cfg = ExperimentConfig::defaults(1.5);
        let mut o1 = OutputSet::new("calibrate", &cfg);
        let mut o2 = OutputSet::new("calibrate", &cfg);
        for o in [&mut o1, &mut o2] {
            o.add("z.csv", "1\n".into());
            o.add("m.csv", "2\n".into());
        }
        assert_eq!(o1.manifest(), o2.manifest());
    }
}
