//! Run directories: CSV logs, the manifest and resumable checkpoints.
//!
//! ```text
//! <run>/manifest.json
//! <run>/metrics.csv
//! <run>/timing.csv
//! <run>/checkpoints/latest            name of the newest checkpoint
//! <run>/checkpoints/iter_<k>/{investment,consumption}.bin
//! <run>/checkpoints/iter_<k>/state.json
//! <run>/checkpoints/iter_<k>/surrogate_{investment,consumption}.bin
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PgdpoError, Result};
use crate::pgdpo::train::{MetricRecord, TrainConfig, TrainerState, SCHEMA_VERSION};
use crate::policy::{PolicyNet, PolicyPair};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `rows` with a header, replacing any existing file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Appending CSV log that writes its header only when the file is new.
pub struct CsvLog {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(CsvLog {
            writer: csv::Writer::from_writer(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CsvLog {
            writer: csv::WriterBuilder::new()
                .has_headers(fresh)
                .from_writer(BufWriter::new(file)),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Keeps only the metric rows up to and including `iteration`.
pub fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<MetricRecord> = read_csv(path)?;
    let kept: Vec<MetricRecord> = rows.into_iter().filter(|r| r.iteration <= iteration).collect();
    write_csv(path, &kept)
}

/// Wall-clock progress, kept out of `metrics.csv` so that file is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub schema_version: u32,
    pub iteration: u64,
    pub wall_clock: f64,
}

impl TimingRecord {
    pub fn new(iteration: u64, wall_clock: f64) -> Self {
        TimingRecord {
            schema_version: SCHEMA_VERSION,
            iteration,
            wall_clock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub market_path: String,
    pub market_sha256: String,
    pub n_assets: usize,
    pub config: TrainConfig,
}

impl Manifest {
    pub fn new(market_path: &Path, config: &TrainConfig, n_assets: usize) -> Result<Self> {
        Ok(Manifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            market_path: market_path.display().to_string(),
            market_sha256: sha256_file(market_path)?,
            n_assets,
            config: config.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Networks and trainer state as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub pair: PolicyPair,
    pub state: Option<TrainerState>,
    pub surrogate: Option<PolicyPair>,
}

fn save_pair(dir: &Path, prefix: &str, pair: &PolicyPair) -> Result<()> {
    pair.investment.save(&dir.join(format!("{prefix}investment.bin")))?;
    pair.consumption.save(&dir.join(format!("{prefix}consumption.bin")))
}

fn load_pair(dir: &Path, prefix: &str) -> Result<Option<PolicyPair>> {
    let inv = dir.join(format!("{prefix}investment.bin"));
    if !inv.exists() {
        return Ok(None);
    }
    Ok(Some(PolicyPair {
        investment: PolicyNet::load(&inv)?,
        consumption: PolicyNet::load(&dir.join(format!("{prefix}consumption.bin")))?,
    }))
}

pub fn checkpoint_dir(run: &Path, iteration: u64) -> PathBuf {
    run.join("checkpoints").join(format!("iter_{iteration}"))
}

/// Writes a checkpoint and points `latest` at it.
pub fn save_checkpoint(
    run: &Path,
    pair: &PolicyPair,
    state: &TrainerState,
    surrogate: Option<&PolicyPair>,
) -> Result<PathBuf> {
    let dir = checkpoint_dir(run, state.iteration);
    fs::create_dir_all(&dir)?;
    save_pair(&dir, "", pair)?;
    if let Some(s) = surrogate {
        save_pair(&dir, "surrogate_", s)?;
    }
    let text = serde_json::to_string(state)?;
    fs::write(dir.join("state.json"), text)?;
    let mut f = File::create(run.join("checkpoints").join("latest"))?;
    writeln!(f, "iter_{}", state.iteration)?;
    Ok(dir)
}

/// The newest checkpoint directory of a run, if any.
pub fn latest_checkpoint(run: &Path) -> Result<Option<PathBuf>> {
    let pointer = run.join("checkpoints").join("latest");
    if !pointer.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(pointer)?;
    Ok(Some(run.join("checkpoints").join(name.trim())))
}

/// Loads a checkpoint directory; the trainer state is optional so bare
/// network pairs can be evaluated too.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let pair = load_pair(dir, "")?
        .ok_or_else(|| PgdpoError::Io(format!("no networks in {}", dir.display())))?;
    let state_path = dir.join("state.json");
    let state = if state_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(state_path)?)?)
    } else {
        None
    };
    Ok(Checkpoint {
        pair,
        state,
        surrogate: load_pair(dir, "surrogate_")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgdpo::adam::AdamState;
    use std::collections::VecDeque;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = PolicyPair::new(2, true, 1.0, 5).unwrap();
        let state = TrainerState {
            iteration: 7,
            adam: AdamState::new(pair.param_count()),
            recent_objectives: VecDeque::from(vec![-1.0, -0.5]),
            last_eval: None,
        };
        save_checkpoint(dir.path(), &pair, &state, Some(&pair)).unwrap();
        let latest = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert!(latest.ends_with("iter_7"));
        let back = load_checkpoint(&latest).unwrap();
        assert_eq!(back.pair, pair);
        assert_eq!(back.state, Some(state));
        assert_eq!(back.surrogate, Some(pair));
    }

    #[test]
    fn appended_log_keeps_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        for i in 0..2 {
            let mut log = CsvLog::append(&path).unwrap();
            log.write(&TimingRecord::new(i, 0.5)).unwrap();
            log.flush().unwrap();
        }
        let rows: Vec<TimingRecord> = read_csv(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(fs::read_to_string(&path).unwrap().matches("schema_version").count(), 1);
    }
}
