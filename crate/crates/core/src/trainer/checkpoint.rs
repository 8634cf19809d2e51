//! Binary checkpoints: an 8-byte magic, a little-endian `u32` format version
//! and `u64` header length, a JSON header, then `f64` little-endian payloads
//! (sigma, input normalization, network state, optimizer state, per-head loss).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, InputNorm, MultiHeadNetwork};

const MAGIC: &[u8; 8] = b"SPCTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    config_hash: String,
    epoch: usize,
    seed: u64,
    norm_channels: usize,
    state_len: usize,
    optimizer_len: usize,
    heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub config_hash: u64,
    pub epoch: usize,
    pub seed: u64,
    pub sigma: f64,
    pub norm: InputNorm,
    pub state: Vec<f64>,
    pub optimizer: Vec<f64>,
    pub head_loss: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            spec: self.spec.clone(),
            config_hash: format!("{:016x}", self.config_hash),
            epoch: self.epoch,
            seed: self.seed,
            norm_channels: self.norm.mean.len(),
            state_len: self.state.len(),
            optimizer_len: self.optimizer.len(),
            heads: self.head_loss.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload = std::iter::once(&self.sigma)
            .chain(&self.norm.mean)
            .chain(&self.norm.std)
            .chain(&self.state)
            .chain(&self.optimizer)
            .chain(&self.head_loss);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("invalid header: {e}")))?;
        let config_hash =
            u64::from_str_radix(&header.config_hash, 16).map_err(|_| bad("invalid config hash".into()))?;
        let payload = &bytes[20 + header_len..];
        let count = 1 + 2 * header.norm_channels + header.state_len + header.optimizer_len + header.heads;
        if payload.len() != count * 8 {
            return Err(bad(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                count * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let sigma = take(1)[0];
        let mean = take(header.norm_channels);
        let std = take(header.norm_channels);
        let norm = InputNorm::new(mean, std).map_err(|e| bad(e.to_string()))?;
        let state = take(header.state_len);
        let optimizer = take(header.optimizer_len);
        let head_loss = take(header.heads);
        header.spec.validate().map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            spec: header.spec,
            config_hash,
            epoch: header.epoch,
            seed: header.seed,
            sigma,
            norm,
            state,
            optimizer,
            head_loss,
        })
    }

    /// The network stored in this checkpoint.
    pub fn network(&self) -> Result<MultiHeadNetwork> {
        let mut net = MultiHeadNetwork::build(&self.spec, self.norm.clone(), self.seed)?;
        net.load_state_vector(&self.state)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::preset_layers;
    use crate::model::InputShape;

    fn sample() -> Checkpoint {
        let spec =
            ArchitectureSpec::new(preset_layers("desk-mlp").unwrap(), 2, 3, 2, InputShape::new(1, 1, 4)).unwrap();
        Checkpoint {
            spec,
            config_hash: 0xdead_beef_0123_4567,
            epoch: 7,
            seed: u64::MAX,
            sigma: 0.1 + 0.2,
            norm: InputNorm::new(vec![0.1], vec![0.3]).unwrap(),
            state: vec![1.0 / 3.0, -0.0, 1e-300, f64::MIN_POSITIVE],
            optimizer: vec![2.5, -7.25],
            head_loss: vec![0.5, 0.25, 0.125],
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.state[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let path = Path::new("x.ckpt");
        let mut bytes = sample().to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, path).is_err());
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, path).is_err());
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes, path).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }
}
