//! Binary checkpoint format, bit-exact by construction.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VDCK" | version u32 | config_len u32 | config UTF-8 (key=value)
//! | record_count u32 | records... | prior_count u32 | prior records...
//! | crc32 u32 over all preceding bytes
//! ```
//!
//! Record: `name_len u32 | name UTF-8 | ndim u32 | dims u64[ndim] | f32 data`.
//! Save → load → save reproduces the input byte-for-byte; a failed CRC is
//! reported distinctly from a malformed structure.

use std::fs;
use std::path::Path;

use crate::config::{net_config_from_kv, net_config_to_kv};
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VDCK";
pub const FORMAT_VERSION: u32 = 1;

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320), table-driven. Hand-rolled
/// because the checksum is part of the on-disk contract and must never shift
/// underneath saved artifacts.
pub fn crc32(bytes: &[u8]) -> u32 {
    const TABLE: [u32; 256] = {
        let mut table = [0u32; 256];
        let mut i = 0;
        while i < 256 {
            let mut c = i as u32;
            let mut k = 0;
            while k < 8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
                k += 1;
            }
            table[i] = c;
            i += 1;
        }
        table
    };
    let mut crc = !0u32;
    for &b in bytes {
        crc = TABLE[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// A checkpoint: the network config, named tensor records (model parameters
/// plus any `__train.`-prefixed optimizer state), and the optional empirical
/// prior as a second record list. Record order is preserved exactly.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub records: Vec<(String, Tensor<f32>)>,
    pub prior: Vec<(String, Tensor<f32>)>,
}

fn push_record(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, detail: String) -> Result<T> {
        Err(Error::Format { path: self.path.to_path_buf(), detail })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return self.fail(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32()? as usize;
        let name = match std::str::from_utf8(self.take(name_len)?) {
            Ok(s) => s.to_string(),
            Err(e) => return self.fail(format!("record name is not UTF-8: {e}")),
        };
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return self.fail(format!("record {name}: implausible rank {ndim}"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = self.u64()?;
            numel = numel.saturating_mul(d.max(1));
            dims.push(d as usize);
        }
        let remaining = (self.bytes.len() - self.pos) as u64;
        if numel.saturating_mul(4) > remaining {
            return self.fail(format!(
                "record {name}: {numel} values exceed remaining {remaining} bytes"
            ));
        }
        let raw = self.take(dims.iter().product::<usize>() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Format { path: self.path.to_path_buf(), detail: e.to_string() })?;
        Ok((name, tensor))
    }

    fn record_list(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()? as usize;
        if count > 1_000_000 {
            return self.fail(format!("implausible record count {count}"));
        }
        (0..count).map(|_| self.record()).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = net_config_to_kv(&self.config);
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, tensor) in &self.records {
            push_record(&mut buf, name, tensor);
        }
        buf.extend_from_slice(&(self.prior.len() as u32).to_le_bytes());
        for (name, tensor) in &self.prior {
            push_record(&mut buf, name, tensor);
        }
        let crc = crc32(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let fail = |detail: String| -> Result<Checkpoint> {
            Err(Error::Format { path: path.to_path_buf(), detail })
        };
        if bytes.len() < MAGIC.len() + 12 {
            return fail(format!("too short to be a checkpoint ({} bytes)", bytes.len()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32(body);
        if stored != actual {
            return fail(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x} (file corrupt)"
            ));
        }
        let mut r = Reader { bytes: body, pos: 0, path };
        if r.take(4)? != MAGIC {
            return fail("bad magic, not a checkpoint file".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return fail(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            ));
        }
        let config_len = r.u32()? as usize;
        let config_text = match std::str::from_utf8(r.take(config_len)?) {
            Ok(s) => s,
            Err(e) => return fail(format!("config block is not UTF-8: {e}")),
        };
        let config = net_config_from_kv(config_text)?;
        let records = r.record_list()?;
        let prior = r.record_list()?;
        if r.pos != body.len() {
            return fail(format!("{} trailing bytes after prior section", body.len() - r.pos));
        }
        Ok(Checkpoint { config, records, prior })
    }

    /// Atomic save: write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn crc32_matches_the_canonical_check_value() {
        // The standard test vector for IEEE CRC-32.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(5);
        let mut records = Vec::new();
        records.push(("a.weight".to_string(), Tensor::from_fn(&[2, 3], |_| rng.normal() as f32)));
        records.push(("a.bias".to_string(), Tensor::from_fn(&[3], |_| rng.normal() as f32)));
        records.push(("__train.step".to_string(), Tensor::scalar(42.0f32)));
        let prior = vec![
            ("mu".to_string(), Tensor::from_fn(&[4, 6], |_| rng.normal() as f32)),
            ("log_var".to_string(), Tensor::from_fn(&[4, 6], |_| rng.normal() as f32)),
        ];
        Checkpoint { config: NetConfig::default(), records, prior }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.vdck");
        let p2 = dir.path().join("two.vdck");
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.config, ck.config);
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.records[2].0, "__train.step");
        assert_eq!(loaded.records[2].1.item(), 42.0);
        assert_eq!(loaded.prior.len(), 2);
        assert_eq!(loaded.prior[0].1.shape(), &[4, 6]);
    }

    #[test]
    fn empty_prior_round_trips() {
        let mut ck = sample_checkpoint();
        ck.prior.clear();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(back.prior.is_empty());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_reported_as_checksum_failure() {
        let mut bytes = sample_checkpoint().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_is_not_called_corruption() {
        let bytes = sample_checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..10], Path::new("mem"))
            .unwrap_err()
            .to_string();
        assert!(!err.contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] = b'X';
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]).to_le_bytes();
        bytes[n - 4..].copy_from_slice(&crc);
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bytes = sample_checkpoint().to_bytes();
        bytes[4] = 99;
        let n = bytes.len();
        let crc = crc32(&bytes[..n - 4]).to_le_bytes();
        bytes[n - 4..].copy_from_slice(&crc);
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn model_parameters_survive_checkpointing() {
        use crate::network::Model;
        let model: Model<f32> = Model::init(NetConfig::default(), 3).unwrap();
        let records: Vec<(String, Tensor<f32>)> = model
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect();
        let ck = Checkpoint { config: model.config.clone(), records, prior: vec![] };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let map: std::collections::BTreeMap<String, Tensor<f32>> =
            back.records.into_iter().collect();
        let rebuilt = Model::from_tensors(back.config, map).unwrap();
        for (a, b) in model.params.entries().iter().zip(rebuilt.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }
}
