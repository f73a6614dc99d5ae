use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use otgdl::config::RunConfig;
use otgdl::io::write_atomic;
use otgdl::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests<P: AsRef<Path>>(paths: &[P]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.as_ref().display().to_string(), sha256_file(p.as_ref())?))).collect()
}

/// Writes `run.json`: command, seed, resolved config, input and output digests
/// and summary metrics. Keys are sorted so identical runs give identical files.
pub fn write_run_record<I: AsRef<Path>>(
    path: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[I],
    outputs: &[PathBuf],
    metrics: BTreeMap<String, Value>,
) -> Result<()> {
    let record = json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_text(),
        "inputs": digests(inputs)?,
        "outputs": digests(outputs)?,
        "metrics": metrics,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut text = serde_json::to_string_pretty(&record).expect("json values serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
