use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command; the timestamps are informational.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects inputs and outputs of one command run.
pub struct Run {
    command: String,
    seed: Option<u64>,
    pub config: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    started_at: String,
}

impl Run {
    pub fn new(command: &str, seed: Option<u64>, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
        })
    }

    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn read_input_string(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read_input(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn finish(self, manifest_path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            started_at: self.started_at,
            finished_at: now(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(manifest_path, text.as_bytes())
    }
}

/// `out.json` -> `out.json.manifest.json`.
pub fn manifest_for(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn samples_to_csv(samples: &[f64], dim: usize) -> String {
    let mut out = String::with_capacity(samples.len() * 20);
    for row in samples.chunks(dim) {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn samples_to_bin(samples: &[f64]) -> Vec<u8> {
    samples.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Parses CSV samples with `dim` columns; a non-numeric first line is a header.
pub fn samples_from_csv(text: &str, dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match row {
            Ok(row) if row.len() == dim => out.extend(row),
            Ok(row) => anyhow::bail!("line {}: expected {dim} columns, found {}", k + 1, row.len()),
            Err(_) if k == 0 => continue,
            Err(e) => anyhow::bail!("line {}: {e}", k + 1),
        }
    }
    Ok(out)
}

pub fn samples_from_bin(bytes: &[u8], dim: usize) -> Result<Vec<f64>> {
    if bytes.len() % (8 * dim) != 0 {
        anyhow::bail!("binary sample file length {} is not a multiple of {}", bytes.len(), 8 * dim);
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}

/// Row-major `bins x bins` counts over `[lo, hi]` on the first two axes. Row
/// index follows axis 1, column index axis 0; points outside the box land in
/// the nearest edge bin.
pub fn histogram_2d(samples: &[f64], dim: usize, lo: [f64; 2], hi: [f64; 2], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins * bins];
    let bin = |v: f64, a: usize| {
        let u = (v - lo[a]) / (hi[a] - lo[a]) * bins as f64;
        if u.is_nan() {
            0
        } else {
            (u.floor().max(0.0) as usize).min(bins - 1)
        }
    };
    for row in samples.chunks(dim) {
        counts[bin(row[1], 1) * bins + bin(row[0], 0)] += 1;
    }
    counts
}

pub fn histogram_csv(counts: &[u64], bins: usize) -> String {
    let mut out = String::new();
    for r in counts.chunks(bins) {
        let line: Vec<String> = r.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let s = vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.25];
        let text = samples_to_csv(&s, 2);
        assert_eq!(samples_from_csv(&text, 2).unwrap(), s);
        let with_header = format!("x0,x1\n{text}");
        assert_eq!(samples_from_csv(&with_header, 2).unwrap(), s);
        assert!(samples_from_csv("1,2,3\n", 2).is_err());
        assert_eq!(samples_from_bin(&samples_to_bin(&s), 2).unwrap(), s);
    }

    #[test]
    fn histogram_counts_everything() {
        let s = vec![0.0, 0.0, 10.0, -10.0, 0.99, 0.99, -1.0, -1.0];
        let h = histogram_2d(&s, 2, [-1.0, -1.0], [1.0, 1.0], 50);
        assert_eq!(h.iter().sum::<u64>(), 4);
        assert_eq!(h[0], 1);
        assert_eq!(h[49], 1);
        assert_eq!(h[49 * 50 + 49], 1);
    }

    #[test]
    fn atomic_write_and_manifest_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_atomic(&p, b"{}").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"{}");
        assert_eq!(manifest_for(&p).file_name().unwrap(), "a.json.manifest.json");
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
