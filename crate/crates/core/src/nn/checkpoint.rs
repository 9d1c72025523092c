//! Single-file model checkpoint: magic, version, a JSON header with the
//! architecture, tensor table and provenance, then little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::segnet::{SegNet, SegNetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Hash of the training data manifest.
    pub data_hash: String,
    pub seed: u64,
    /// Free-form role, e.g. "best" or "final".
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub net: SegNet<f32>,
    pub epoch: usize,
    pub optimizer: Option<Adam>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: SegNetConfig,
    epoch: usize,
    provenance: Provenance,
    optimizer: Option<OptHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    config: super::optim::AdamConfig,
    step: u64,
}

impl PartialEq for SegNet<f32> {
    fn eq(&self, o: &Self) -> bool {
        self.config() == o.config() && self.params() == o.params()
    }
}

impl ModelCheckpoint {
    pub fn new(net: SegNet<f32>, epoch: usize, provenance: Provenance) -> Self {
        ModelCheckpoint { net, epoch, optimizer: None, provenance }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<(String, Vec<usize>, &[f32])> = self
            .net
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), &p.data[..]))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (k, p) in self.net.params().iter().enumerate() {
                arrays.push((format!("adam.m.{}", p.name), p.shape.clone(), &opt.m[k]));
                arrays.push((format!("adam.v.{}", p.name), p.shape.clone(), &opt.v[k]));
            }
        }
        let mut offset = 0;
        let tensors = arrays
            .iter()
            .map(|(n, s, d)| {
                let e = TensorEntry { name: n.clone(), shape: s.clone(), offset };
                offset += d.len();
                e
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            config: self.net.config().clone(),
            epoch: self.epoch,
            provenance: self.provenance.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptHeader { config: o.config.clone(), step: o.step }),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, d) in &arrays {
            for v in d.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[20 + hlen..];
        let read = |e: &TensorEntry| -> Result<Vec<f32>> {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", e.name)))?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut params = Vec::new();
        let mut moments = std::collections::HashMap::new();
        for e in &header.tensors {
            if e.name.starts_with("adam.") {
                moments.insert(e.name.clone(), read(e)?);
            } else {
                params.push((e.name.clone(), e.shape.clone(), read(e)?));
            }
        }
        let net = SegNet::from_params(header.config, params)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut take = |kind: &str, name: &str| {
                    moments
                        .remove(&format!("adam.{kind}.{name}"))
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))
                };
                let mut m = Vec::new();
                let mut v = Vec::new();
                for p in net.params() {
                    m.push(take("m", &p.name)?);
                    v.push(take("v", &p.name)?);
                }
                Some(Adam { config: h.config, step: h.step, m, v })
            }
        };
        Ok(ModelCheckpoint { net, epoch: header.epoch, optimizer, provenance: header.provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamConfig, SegNetConfig};

    #[test]
    fn round_trip_with_optimizer() {
        let cfg = SegNetConfig { channels: vec![2, 4], ..SegNetConfig::paper() };
        let net = SegNet::<f32>::build(cfg, 5).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &net);
        opt.step = 7;
        opt.m[0][0] = 0.25;
        let ck = ModelCheckpoint {
            net,
            epoch: 3,
            optimizer: Some(opt),
            provenance: Provenance { data_hash: "abc".into(), seed: 5, label: "best".into() },
        };
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        assert!(ModelCheckpoint::from_bytes(b"nope").is_err());
        let cfg = SegNetConfig { channels: vec![2, 4], ..SegNetConfig::paper() };
        let ck = ModelCheckpoint::new(SegNet::build(cfg, 1).unwrap(), 0, Provenance::default());
        let mut b = ck.to_bytes();
        b[8] = 9;
        assert!(ModelCheckpoint::from_bytes(&b).unwrap_err().to_string().contains("version"));
    }
}
