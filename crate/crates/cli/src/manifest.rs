//! Run manifests: one `key=value` per line, every flag resolved, enough to
//! re-run the command exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub threads: usize,
    /// Flag name without dashes, and its value.
    pub args: Vec<(String, String)>,
    pub artifacts: Vec<(String, PathBuf)>,
}

impl Manifest {
    pub fn new(command: &str, threads: usize) -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            threads,
            ..Manifest::default()
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.args.push((key.to_string(), value.to_string()));
        self
    }

    pub fn artifact(&mut self, key: &str, path: &Path) -> &mut Self {
        self.artifacts.push((key.to_string(), path.to_path_buf()));
        self
    }

    pub fn seed(&self) -> Option<&str> {
        self.args.iter().find(|(k, _)| k == "seed").map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# seqskip run manifest\n");
        writeln!(s, "version={}", self.version).unwrap();
        writeln!(s, "command={}", self.command).unwrap();
        writeln!(s, "threads={}", self.threads).unwrap();
        if let Some(seed) = self.seed() {
            writeln!(s, "seed={seed}").unwrap();
        }
        for (k, v) in &self.args {
            writeln!(s, "arg.{k}={v}").unwrap();
        }
        for (k, p) in &self.artifacts {
            writeln!(s, "artifact.{k}={}", p.display()).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value", n + 1))?;
            match key {
                "version" => m.version = value.to_string(),
                "command" => m.command = value.to_string(),
                "threads" => m.threads = value.parse().with_context(|| format!("line {}: bad thread count", n + 1))?,
                "seed" => {}
                _ => {
                    if let Some(k) = key.strip_prefix("arg.") {
                        m.args.push((k.to_string(), value.to_string()));
                    } else if let Some(k) = key.strip_prefix("artifact.") {
                        m.artifacts.push((k.to_string(), PathBuf::from(value)));
                    } else {
                        bail!("line {}: unknown key `{key}`", n + 1);
                    }
                }
            }
        }
        if m.command.is_empty() {
            bail!("manifest names no command");
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Manifest::parse(&text).with_context(|| format!("in manifest {}", path.display()))
    }

    /// Command line that reproduces the run.
    pub fn argv(&self) -> Vec<String> {
        let mut v = vec!["seqskip".to_string(), "--threads".into(), self.threads.to_string(), self.command.clone()];
        for (k, val) in &self.args {
            v.push(format!("--{k}"));
            v.push(val.clone());
        }
        v
    }
}
