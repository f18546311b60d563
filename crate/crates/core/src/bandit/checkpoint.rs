//! Policy checkpoints: a directory holding `manifest.json`, the encoder
//! weight file (when the policy has one) and `state.bin` with the head,
//! design inverse, epoch buffer and history as raw little-endian f64 bits.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BanditPolicy, FeatureMap, HistoryItem, PolicyConfig};
use crate::encoder::{read_f64s, write_f64s, Encoder};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, PdInverse};

const STATE_MAGIC: &[u8; 8] = b"CBPOLS01";
const FORMAT: &str = "casebandit-policy";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: PolicyConfig,
    input_dim: usize,
    has_encoder: bool,
    steps: u64,
    theta_len: usize,
    design_dim: usize,
    design_lambda_bits: u64,
    design_updates: u64,
    buffer_len: usize,
    history_len: usize,
}

impl BanditPolicy {
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            input_dim: self.input_dim(),
            has_encoder: self.encoder().is_some(),
            steps: self.t,
            theta_len: self.theta.len(),
            design_dim: self.design.dim(),
            design_lambda_bits: self.design.lambda().to_bits(),
            design_updates: self.design.update_count(),
            buffer_len: self.epoch_buffer.len(),
            history_len: self.history.len(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json + "\n")?;
        if let Some(enc) = self.encoder() {
            enc.save(dir.join("encoder.bin"))?;
        }
        let mut w = BufWriter::new(fs::File::create(dir.join("state.bin"))?);
        w.write_all(STATE_MAGIC)?;
        write_f64s(&mut w, &self.theta)?;
        write_f64s(&mut w, self.design.inverse().as_slice())?;
        for (x, r) in &self.epoch_buffer {
            write_f64s(&mut w, x)?;
            write_f64s(&mut w, &[*r])?;
        }
        for h in &self.history {
            write_f64s(&mut w, &h.x)?;
            write_f64s(&mut w, &h.z)?;
            write_f64s(&mut w, &[h.r])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::DataCorruption(format!("policy manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::DataCorruption(format!(
                "unsupported checkpoint {} v{}",
                m.format, m.version
            )));
        }
        let features = if m.has_encoder {
            FeatureMap::Encoder(Encoder::load(dir.join("encoder.bin"))?)
        } else {
            FeatureMap::Identity { dim: m.input_dim }
        };
        let mut r = BufReader::new(fs::File::open(dir.join("state.bin"))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            return Err(Error::DataCorruption("not a policy state file".into()));
        }
        let theta = read_f64s(&mut r, m.theta_len)?;
        let inv = Matrix::from_vec(
            m.design_dim,
            m.design_dim,
            read_f64s(&mut r, m.design_dim * m.design_dim)?,
        )?;
        let design =
            PdInverse::from_parts(f64::from_bits(m.design_lambda_bits), m.design_updates, inv)?;
        let mut policy = BanditPolicy::from_parts(m.config, features, theta, design)?;
        let head_dim = policy.theta.len();
        for _ in 0..m.buffer_len {
            let x = read_f64s(&mut r, m.input_dim)?;
            let reward = read_f64s(&mut r, 1)?[0];
            policy.epoch_buffer.push((x, reward));
        }
        for _ in 0..m.history_len {
            let x = read_f64s(&mut r, m.input_dim)?;
            let z = read_f64s(&mut r, head_dim)?;
            let reward = read_f64s(&mut r, 1)?[0];
            policy.history.push(HistoryItem { x, z, r: reward });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::DataCorruption(
                "trailing bytes in policy state".into(),
            ));
        }
        policy.t = m.steps;
        Ok(policy)
    }
}
