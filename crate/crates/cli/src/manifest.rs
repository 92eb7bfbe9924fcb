use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dcfa::trainer::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Host {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub hostname: Option<String>,
}

impl Host {
    fn current() -> Self {
        let hostname = std::env::var("HOSTNAME")
            .ok()
            .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
            .map(|h| h.trim().to_string())
            .filter(|h| !h.is_empty());
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            hostname,
        }
    }
}

/// Settings the method leaves open, disclosed with every training run.
#[derive(Debug, Serialize)]
pub struct Assumptions {
    pub optimizer: String,
    pub initialization: &'static str,
    pub embedding_dim: usize,
    pub test_negatives: String,
    pub classification_threshold: f64,
    pub aupr: &'static str,
    /// Choices that can move results away from the literal model equations.
    pub deviations: Vec<String>,
}

impl Assumptions {
    pub fn for_config(c: &TrainConfig) -> Self {
        Self {
            optimizer: format!("{:?}", c.optimizer).to_lowercase(),
            initialization: "glorot_uniform",
            embedding_dim: c.dim,
            test_negatives: c.test_negatives.to_string(),
            classification_threshold: dcfa::evaluation::DEFAULT_THRESHOLD,
            aupr: "step-wise over descending unique thresholds",
            deviations: deviations(c),
        }
    }
}

fn deviations(c: &TrainConfig) -> Vec<String> {
    let mut out = Vec::new();
    if c.residual {
        out.push("residual connection and layer normalization after each transformer and GNN layer".to_string());
    }
    if c.soft_bias {
        out.push("sample scores <h_i U, h_c> / sqrt(d) added to attention logits so U is trained".to_string());
    }
    if !c.sum_reduction {
        out.push("relation loss averaged over pairs instead of summed".to_string());
    }
    match c.pos_weight {
        Some(w) => out.push(format!("positive class weight fixed at {w}")),
        None => out.push("positive class weight set to the training negative/positive ratio".to_string()),
    }
    out.push(format!("test negatives: {}", c.test_negatives));
    out.push(format!(
        "unreported settings chosen: d={}, blocks={}, heads={}, sample size={}, margin={}, gcn layers={}",
        c.dim, c.blocks, c.heads, c.sample_size, c.gamma, c.gcn_layers
    ));
    out
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumptions: Option<Assumptions>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub details: serde_json::Map<String, serde_json::Value>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub host: Host,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: None,
            assumptions: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Map::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_seconds: 0.0,
            host: Host::current(),
            started: Some(Instant::now()),
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        self.seed = Some(config.seed);
        self.assumptions = Some(Assumptions::for_config(config));
        self.config = Some(config.clone());
        self
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileDigest {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("manifest details serialize");
        self.details.insert(key.to_string(), v);
    }

    /// Digests every output and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> Result<PathBuf, CliError> {
        for name in outputs {
            let path = dir.join(name);
            self.outputs.push(FileDigest {
                role: name.to_string(),
                sha256: sha256_file(&path)?,
                path,
            });
        }
        self.wall_clock_seconds = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
