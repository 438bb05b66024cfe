//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ELNET1\0\0" | version u32 | manifest length u64 | manifest (JSON)
//! | payload length u64 | payload (f32 values) | CRC-32 of payload u32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::elastic::{ElasticNetwork, ExitHead};
use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ELNET1\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub exits: Vec<ExitHead>,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field,
        msg: msg.into(),
    }
}

pub fn encode(net: &ElasticNetwork<f32>) -> Result<Vec<u8>> {
    let backbone = net
        .graph()
        .config
        .clone()
        .ok_or_else(|| Error::config("only networks built from a backbone config can be saved"))?;
    let mut payload = Vec::with_capacity(net.params.numel() * 4);
    let mut tensors = Vec::with_capacity(net.params.len());
    for p in net.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
            trainable: p.trainable,
            head: p.head,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        backbone,
        classes: net.classes(),
        exits: net.exits().to_vec(),
        tensors,
    };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::config(e.to_string()))?;

    let mut out = Vec::with_capacity(32 + text.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(field, format!("file ends at byte {}, needs {n} more from {}", self.bytes.len(), self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt(field, format!("length {v} too large")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ElasticNetwork<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(corrupt("magic", "not an ELNET1 checkpoint"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(corrupt("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let manifest_len = c.u64("manifest")?;
    let manifest: Manifest =
        serde_json::from_slice(c.take(manifest_len, "manifest")?).map_err(|e| corrupt("manifest", e.to_string()))?;
    let payload_len = c.u64("payload")?;
    let payload = c.take(payload_len, "payload")?;
    let stored = c.u32("checksum")?;
    if c.pos != bytes.len() {
        return Err(corrupt("checksum", format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(corrupt(
            "checksum",
            format!("payload CRC-32 is {actual:#010x}, header records {stored:#010x}"),
        ));
    }

    let mut params = ParamStore::new();
    let mut expected_offset = 0u64;
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        let len = numel as u64 * 4;
        if t.offset != expected_offset {
            return Err(corrupt("tensors", format!("{} at offset {}, expected {expected_offset}", t.name, t.offset)));
        }
        let end = t.offset + len;
        if end > payload.len() as u64 {
            return Err(corrupt("tensors", format!("{} extends past the payload", t.name)));
        }
        let data = payload[t.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(t.shape.clone(), data).map_err(|e| corrupt("tensors", e.to_string()))?;
        params
            .insert(Param {
                name: t.name.clone(),
                value,
                trainable: t.trainable,
                head: t.head,
            })
            .map_err(|e| corrupt("tensors", e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(corrupt(
            "payload",
            format!("tensors cover {expected_offset} bytes of a {}-byte payload", payload.len()),
        ));
    }
    let graph = manifest.backbone.build().map_err(|e| corrupt("backbone", e.to_string()))?;
    ElasticNetwork::from_parts(graph, manifest.exits, manifest.classes, params).map_err(|e| corrupt("exits", e.to_string()))
}

pub fn save_checkpoint(net: &ElasticNetwork<f32>, path: &Path) -> Result<()> {
    let bytes = encode(net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ElasticNetwork<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::BackboneConfig;
    use crate::elastic::{elasticize, Backbone, HeadConfig};
    use crate::graph::FeatureShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bytes() -> Vec<u8> {
        let g = BackboneConfig::preset("mini-vgg", FeatureShape::new(28, 28, 1))
            .unwrap()
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = elasticize(Backbone::init(g, &mut rng).unwrap(), &HeadConfig::default(), &mut rng).unwrap();
        encode(&net).unwrap()
    }

    fn field(err: Error) -> &'static str {
        match err {
            Error::Checkpoint { field, .. } => field,
            other => panic!("expected checkpoint error, got {other}"),
        }
    }

    #[test]
    fn header_fields_are_checked() {
        let good = bytes();
        assert!(decode(&good).is_ok());

        let mut v2 = good.clone();
        v2[8] = 2;
        assert_eq!(field(decode(&v2).unwrap_err()), "version");

        let mut magic = good.clone();
        magic[0] = b'X';
        assert_eq!(field(decode(&magic).unwrap_err()), "magic");

        let mut flipped = good.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x40;
        assert_eq!(field(decode(&flipped).unwrap_err()), "checksum");

        assert_eq!(field(decode(&good[..good.len() - 1]).unwrap_err()), "checksum");
    }
}
