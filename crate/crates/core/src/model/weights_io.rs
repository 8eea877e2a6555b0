//! Binary weight checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "PAGW"
//! u16    format version (currently 1)
//! u32 x5 config block: l, C, D, G, Cg
//! u32    entry count
//! entry: u16 name length, UTF-8 name, u8 rank, u32 x rank dims,
//!        f32 x product(dims) values
//! ```
//!
//! Entries are written in canonical layer order; loading accepts any order
//! but requires exactly the entry set the config implies. Round-tripping a
//! store through save/load is bitwise exact at `f32`.

use std::fs;
use std::path::Path;

use super::{ModelConfig, PagNet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"PAGW";
pub const WEIGHT_FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Truncated {
                offset: self.off,
                needed: self.off + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(out)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_header(r: &mut Reader) -> Result<ModelConfig> {
    let magic = r.take(4)?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.read_u16()?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let l = r.read_u32()?;
    let c = r.read_u32()?;
    let d = r.read_u32()?;
    let g = r.read_u32()?;
    let cg = r.read_u32()?;
    Ok(ModelConfig {
        upsample_exponent: l as usize,
        base_channels: c as usize,
        rdb_layers: d as usize,
        growth_rate: g as usize,
        guidance_channels: cg as usize,
        seed: 0,
        global_residual: true,
    })
}

/// Read only the config block of a weight file (e.g. to learn its scale).
pub fn read_weight_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        off: 0,
    };
    parse_header(&mut r)
}

impl<S: Scalar> PagNet<S> {
    /// Serialize the weights; values are stored as 32-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let config = self.config();
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(&WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        for v in [
            config.upsample_exponent,
            config.base_channels,
            config.rdb_layers,
            config.growth_rate,
            config.guidance_channels,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.store().len() as u32).to_le_bytes());
        for p in self.store().iter() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.dims.len() as u8);
            for &d in &p.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a checkpoint, reconstructing the model the file's config block
    /// describes. The entry set must match that config exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader {
            buf: &bytes,
            off: 0,
        };
        let config = parse_header(&mut r)?;
        config
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("weight file config block: {e}")))?;

        let count = r.read_u32()? as usize;
        let mut entries: std::collections::HashMap<String, (Vec<usize>, Vec<S>)> =
            std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| {
                Error::MalformedImage {
                    format: "PAGW",
                    detail: "entry name is not valid UTF-8".into(),
                }
            })?;
            let rank = r.read_u8()?;
            if rank == 0 || rank > 4 {
                return Err(Error::EntryRank { name, rank });
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.read_u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = r.take(numel * 4)?;
            let values: Vec<S> = payload
                .chunks_exact(4)
                .map(|c| S::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if values.len() != numel {
                return Err(Error::EntryDims {
                    name,
                    dims,
                    payload: values.len(),
                });
            }
            entries.insert(name, (dims, values));
        }

        let mut store = ParamStore::new();
        for (name, cout, cin, kh, kw) in config.layer_specs() {
            let wname = format!("{name}.weight");
            let (dims, values) = entries
                .remove(&wname)
                .ok_or_else(|| Error::MissingEntry(wname.clone()))?;
            if dims != [cout, cin, kh, kw] {
                return Err(Error::EntryShape {
                    name: wname,
                    expected: vec![cout, cin, kh, kw],
                    got: dims,
                });
            }
            let tensor = Tensor::from_vec(Shape::new(cout, cin, kh, kw)?, values)?;
            store.insert(&wname, tensor, dims)?;

            let bname = format!("{name}.bias");
            let (dims, values) = entries
                .remove(&bname)
                .ok_or_else(|| Error::MissingEntry(bname.clone()))?;
            if dims != [cout] {
                return Err(Error::EntryShape {
                    name: bname,
                    expected: vec![cout],
                    got: dims,
                });
            }
            let tensor = Tensor::from_vec(Shape::new(1, cout, 1, 1)?, values)?;
            store.insert(&bname, tensor, dims)?;
        }
        if let Some(name) = entries.into_keys().next() {
            return Err(Error::UnexpectedEntry(name));
        }
        Ok(PagNet::from_parts(config, store))
    }

    /// Load a checkpoint that must match `expected`'s architecture.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let file_config = read_weight_config(path)?;
        let same = file_config.upsample_exponent == expected.upsample_exponent
            && file_config.base_channels == expected.base_channels
            && file_config.rdb_layers == expected.rdb_layers
            && file_config.growth_rate == expected.growth_rate
            && file_config.guidance_channels == expected.guidance_channels;
        if !same {
            return Err(Error::ConfigMismatch {
                file_l: file_config.upsample_exponent as u32,
                file_c: file_config.base_channels as u32,
                file_d: file_config.rdb_layers as u32,
                file_g: file_config.growth_rate as u32,
                file_cg: file_config.guidance_channels as u32,
                want_l: expected.upsample_exponent as u32,
                want_c: expected.base_channels as u32,
                want_d: expected.rdb_layers as u32,
                want_g: expected.growth_rate as u32,
                want_cg: expected.guidance_channels as u32,
            });
        }
        Self::load(path)
    }
}
