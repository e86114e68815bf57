//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "KEYGATE\0"
//! version     u16
//! kind        u8       0 = keyed policy, 1 = concatenated-key baseline
//! key_len     u32
//! config hash 32 bytes
//! base        u32 layer count, then per layer: u32 in, u32 out, u8 activation
//! encoders    u32 count, then per encoder: u32 layer index, layer list as above
//! payload     f64 parameters: base first, encoders by ascending layer index
//! ```

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::{Activation, DenseNet, InitScheme, LayerSpec};
use crate::modnet::{KeyEncoder, KeyedPolicy};
use crate::trainer::baseline::ConcatBaseline;
use crate::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 8] = b"KEYGATE\0";

/// SHA-256 of a configuration's canonical text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfigHash(pub [u8; 32]);

impl ConfigHash {
    pub fn of(text: &str) -> Self {
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(digest.as_slice());
        ConfigHash(out)
    }

    pub fn short(&self) -> String {
        self.to_string()[..12].to_string()
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Keyed(KeyedPolicy),
    Concat(ConcatBaseline),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: ConfigHash,
    pub model: Model,
}

fn put_shapes(buf: &mut Vec<u8>, net: &DenseNet) {
    buf.extend((net.depth() as u32).to_le_bytes());
    for s in net.layer_specs() {
        buf.extend((s.input as u32).to_le_bytes());
        buf.extend((s.output as u32).to_le_bytes());
        buf.push(s.activation.code());
    }
}

fn put_params(buf: &mut Vec<u8>, net: &DenseNet) {
    for p in net.params() {
        buf.extend(p.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn shapes(&mut self) -> Result<Vec<LayerSpec>> {
        let n = self.u32()?;
        if n == 0 || n > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        (0..n)
            .map(|_| {
                let input = self.u32()?;
                let output = self.u32()?;
                let code = self.u8()?;
                let activation =
                    Activation::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown activation code {code}")))?;
                Ok(LayerSpec { input, output, activation })
            })
            .collect()
    }

    fn net(&mut self, specs: &[LayerSpec]) -> Result<DenseNet> {
        let mut net = DenseNet::init(specs, 0, InitScheme::ZerosBias)?;
        let params = (0..net.param_count()).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        net.set_params(&params)?;
        Ok(net)
    }
}

impl Checkpoint {
    pub fn new(model: Model, config_hash: ConfigHash) -> Self {
        Checkpoint { config_hash, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend(FORMAT_VERSION.to_le_bytes());
        let (kind, key_len, base, encoders): (u8, usize, &DenseNet, &[KeyEncoder]) = match &self.model {
            Model::Keyed(p) => (0, crate::modnet::KeyConditioned::key_len(p), p.base(), p.encoders()),
            Model::Concat(b) => (1, crate::modnet::KeyConditioned::key_len(b), b.net(), &[]),
        };
        buf.push(kind);
        buf.extend((key_len as u32).to_le_bytes());
        buf.extend_from_slice(&self.config_hash.0);
        put_shapes(&mut buf, base);
        buf.extend((encoders.len() as u32).to_le_bytes());
        for e in encoders {
            buf.extend((e.layer_index() as u32).to_le_bytes());
            put_shapes(&mut buf, e.net());
        }
        put_params(&mut buf, base);
        for e in encoders {
            put_params(&mut buf, e.net());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = r.u8()?;
        let key_len = r.u32()?;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(r.take(32)?);
        let base_specs = r.shapes()?;
        let n_enc = r.u32()?;
        if n_enc > base_specs.len() {
            return Err(Error::Checkpoint(format!("{n_enc} encoders for {} layers", base_specs.len())));
        }
        let mut enc_specs = Vec::with_capacity(n_enc);
        for _ in 0..n_enc {
            let index = r.u32()?;
            enc_specs.push((index, r.shapes()?));
        }
        let base = r.net(&base_specs)?;
        let model = match kind {
            0 => {
                let mut encoders = Vec::with_capacity(n_enc);
                for (index, specs) in &enc_specs {
                    encoders.push(KeyEncoder::new(r.net(specs)?, *index)?);
                }
                if encoders.is_empty() {
                    Model::Keyed(KeyedPolicy::plain(base))
                } else {
                    Model::Keyed(KeyedPolicy::from_parts(base, encoders, key_len)?)
                }
            }
            1 if n_enc == 0 => Model::Concat(ConcatBaseline::from_net(base, key_len)?),
            _ => return Err(Error::Checkpoint(format!("unknown model kind {kind}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config_hash: ConfigHash(hash),
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
