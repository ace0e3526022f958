//! On-disk layout of one experiment run.
//!
//! ```text
//! output_dir/
//!   config.toml                       resolved config echo
//!   manifest.json                     config hash + format version
//!   checkpoints/epoch_XXXXXX.ckpt     network checkpoints
//!   svalidation/frac_X.XXXX.bin       persisted s-validation sets
//!   cells/epoch_XXXXXX_frac_X.XXXX.json   one result per cell
//!   results.csv / summary.json / figure.svg   report outputs
//! ```
//!
//! Cell and checkpoint writes go through a temp-file rename, so concurrent
//! writers of different cells stay consistent and interrupted runs resume
//! cleanly. Every persisted artifact carries a SHA-256 that is verified on
//! read; a mismatch (or an edited config echo) surfaces as `CorruptStore`.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::CellResult;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::TrainedNetwork;
use crate::perturb::SValidationSet;

const FORMAT_VERSION: u32 = 1;
const SVAL_MAGIC: &[u8; 8] = b"MPSVAL01";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
}

pub struct Store {
    root: PathBuf,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Store {
    /// Create a fresh store (or adopt an existing one with an identical
    /// config echo).
    pub fn create(config: &ExperimentConfig) -> Result<Store> {
        let root = config.output_dir.clone();
        let echo = toml::to_string_pretty(config)
            .map_err(|e| Error::Config(format!("config echo serialization: {e}")))?;
        let config_path = root.join("config.toml");
        if config_path.exists() {
            let (store, existing) = Store::open(&root)?;
            if existing != *config {
                return Err(Error::CorruptStore {
                    path: root,
                    reason: "existing store was created from a different config".into(),
                });
            }
            return Ok(store);
        }
        for sub in ["checkpoints", "svalidation", "cells"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config_hash: sha256_hex(echo.as_bytes()),
        };
        write_atomic(
            &root.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)
                .expect("manifest serializes")
                .as_bytes(),
        )?;
        write_atomic(&config_path, echo.as_bytes())?;
        Ok(Store { root })
    }

    /// Open an existing store, verifying the config echo against the
    /// manifest hash.
    pub fn open(root: &Path) -> Result<(Store, ExperimentConfig)> {
        let corrupt = |reason: String| Error::CorruptStore {
            path: root.to_path_buf(),
            reason,
        };
        let config_path = root.join("config.toml");
        let manifest_path = root.join("manifest.json");
        if !config_path.exists() || !manifest_path.exists() {
            return Err(corrupt("missing config.toml or manifest.json".into()));
        }
        let echo = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )
        .map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported store format {}",
                manifest.format_version
            )));
        }
        if sha256_hex(echo.as_bytes()) != manifest.config_hash {
            return Err(corrupt("config hash mismatch".into()));
        }
        let config: ExperimentConfig =
            toml::from_str(&echo).map_err(|e| corrupt(format!("config echo: {e}")))?;
        config.validate()?;
        Ok((Store { root: root.to_path_buf() }, config))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    // -- checkpoints --------------------------------------------------------

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("epoch_{epoch:06}.ckpt"))
    }

    pub fn write_network(&self, net: &TrainedNetwork) -> Result<()> {
        write_checkpoint(&self.checkpoint_path(net.epoch), net)
    }

    pub fn read_network(&self, epoch: usize) -> Result<TrainedNetwork> {
        read_checkpoint(&self.checkpoint_path(epoch))
    }

    /// Epochs with a persisted checkpoint, ascending.
    pub fn checkpoint_epochs(&self) -> Result<Vec<usize>> {
        let dir = self.root.join("checkpoints");
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = name
                .strip_prefix("epoch_")
                .and_then(|s| s.strip_suffix(".ckpt"))
            {
                if let Ok(epoch) = num.parse::<usize>() {
                    out.push(epoch);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    // -- s-validation sets --------------------------------------------------

    fn sval_path(&self, fraction: f64) -> PathBuf {
        self.root
            .join("svalidation")
            .join(format!("frac_{fraction:.4}.bin"))
    }

    pub fn write_sval(&self, sval: &SValidationSet) -> Result<()> {
        let (n, h, w) = sval.images.dim();
        let mut buf = Vec::with_capacity(64 + sval.images.len() * 8);
        buf.extend_from_slice(SVAL_MAGIC);
        let header = serde_json::json!({
            "fraction": sval.fraction,
            "seed": sval.seed,
            "dims": [n, h, w],
        })
        .to_string();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        for v in sval.images.iter() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        write_atomic(&self.sval_path(sval.fraction), &buf)
    }

    pub fn read_sval(&self, fraction: f64) -> Result<Option<SValidationSet>> {
        let path = self.sval_path(fraction);
        if !path.exists() {
            return Ok(None);
        }
        let corrupt = |reason: &str| Error::CorruptStore {
            path: path.clone(),
            reason: reason.to_string(),
        };
        let buf = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if buf.len() < 12 + 32 {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..8] != SVAL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&body[12..12 + header_len])
            .map_err(|e| corrupt(&format!("header: {e}")))?;
        let dims: Vec<usize> = header["dims"]
            .as_array()
            .ok_or_else(|| corrupt("missing dims"))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let (n, h, w) = (dims[0], dims[1], dims[2]);
        let data = &body[12 + header_len..];
        if data.len() != n * h * w * 8 {
            return Err(corrupt("payload length mismatch"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Some(SValidationSet {
            images: Array3::from_shape_vec((n, h, w), values).expect("length checked"),
            fraction: header["fraction"].as_f64().unwrap_or(f64::NAN),
            seed: header["seed"].as_u64().unwrap_or(0),
        }))
    }

    // -- cells ---------------------------------------------------------------

    fn cell_path(&self, epoch: usize, fraction: f64) -> PathBuf {
        self.root
            .join("cells")
            .join(format!("epoch_{epoch:06}_frac_{fraction:.4}.json"))
    }

    pub fn has_cell(&self, epoch: usize, fraction: f64) -> bool {
        self.cell_path(epoch, fraction).exists()
    }

    pub fn write_cell(&self, cell: &CellResult) -> Result<()> {
        let path = self.cell_path(cell.epoch, cell.fraction);
        let json = serde_json::to_string_pretty(cell)
            .map_err(|e| Error::Config(format!("cell serialization: {e}")))?;
        write_atomic(&path, json.as_bytes())
    }

    pub fn read_cell(&self, epoch: usize, fraction: f64) -> Result<CellResult> {
        let path = self.cell_path(epoch, fraction);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::CorruptStore {
            path,
            reason: format!("cell: {e}"),
        })
    }

    /// All cells for the given grid, in (epoch, fraction) order; `None` when
    /// any cell is missing.
    pub fn read_all_cells(
        &self,
        epoch_grid: &[usize],
        fractions: &[f64],
    ) -> Result<Option<Vec<CellResult>>> {
        let mut out = Vec::with_capacity(epoch_grid.len() * fractions.len());
        for &epoch in epoch_grid {
            for &fraction in fractions {
                if !self.has_cell(epoch, fraction) {
                    return Ok(None);
                }
                out.push(self.read_cell(epoch, fraction)?);
            }
        }
        Ok(Some(out))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
