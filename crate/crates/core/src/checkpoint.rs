//! Versioned binary checkpoint: magic `VARE`, a format version, a TOML
//! metadata block (model config and step), named float sections for the
//! codec, codebook, transformer, and optimizer moments, and a trailing
//! integrity digest. Floats are stored little-endian 32-bit.

use crate::codec::{Codebook, CodecParams};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::rng::fnv1a;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VARE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    step: u64,
    opt_step: u64,
    has_optimizer: bool,
}

/// Adam moment vectors, flattened in the model's tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub model: ModelParams,
    pub codec: CodecParams,
    pub codebook: Codebook,
    pub opt: Option<OptState>,
}

fn push_section(buf: &mut Vec<u8>, name: &str, data: impl Iterator<Item = f64>, count: usize) {
    let name_bytes = name.as_bytes();
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    let mut n = 0usize;
    for v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
        n += 1;
    }
    debug_assert_eq!(n, count);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "checkpoint {} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            opt_step: self.opt.as_ref().map_or(0, |o| o.step),
            has_optimizer: self.opt.is_some(),
        };
        let meta_text =
            toml::to_string(&meta).map_err(|e| Error::Data(format!("meta encode: {e}")))?;
        buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta_text.as_bytes());

        let model_tensors = self.model.tensors();
        let mut n_sections = 5 + model_tensors.len() as u32;
        if self.opt.is_some() {
            n_sections += 2;
        }
        buf.extend_from_slice(&n_sections.to_le_bytes());
        let arr2 = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        push_section(&mut buf, "codec.enc_w", arr2(&self.codec.enc_w).into_iter(), self.codec.enc_w.len());
        push_section(&mut buf, "codec.enc_b", self.codec.enc_b.iter().copied(), self.codec.enc_b.len());
        push_section(&mut buf, "codec.dec_w", arr2(&self.codec.dec_w).into_iter(), self.codec.dec_w.len());
        push_section(&mut buf, "codec.dec_b", self.codec.dec_b.iter().copied(), self.codec.dec_b.len());
        push_section(
            &mut buf,
            "codebook",
            self.codebook.entries.iter().copied(),
            self.codebook.entries.len(),
        );
        for (name, data, _) in &model_tensors {
            push_section(&mut buf, &format!("model.{name}"), data.iter().copied(), data.len());
        }
        if let Some(opt) = &self.opt {
            push_section(&mut buf, "opt.m", opt.m.iter().copied(), opt.m.len());
            push_section(&mut buf, "opt.v", opt.v.iter().copied(), opt.v.len());
        }
        let digest = fnv1a(&buf);
        buf.extend_from_slice(&digest.to_le_bytes());
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 {
            return Err(Error::Data(format!(
                "checkpoint {} too short to be valid",
                path.display()
            )));
        }
        let (body, digest_bytes) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(digest_bytes.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Data(format!(
                "checkpoint {} failed its integrity check",
                path.display()
            )));
        }
        let mut r = Reader {
            buf: body,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Data(format!(
                "checkpoint {} has wrong magic",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint {} has unsupported version {version}",
                path.display()
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| Error::Data(format!("meta is not UTF-8: {e}")))?;
        let meta: Meta =
            toml::from_str(meta_text).map_err(|e| Error::Data(format!("meta parse: {e}")))?;
        meta.config.validate()?;

        let n_sections = r.u32()?;
        let mut sections: Vec<(String, Vec<f64>)> = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Data(format!("section name not UTF-8: {e}")))?
                .to_string();
            let count = r.u64()? as usize;
            sections.push((name, r.floats(count)?));
        }
        if r.pos != body.len() {
            return Err(Error::Data(format!(
                "checkpoint {} has {} trailing bytes",
                path.display(),
                body.len() - r.pos
            )));
        }
        let take = &mut |name: &str| -> Result<Vec<f64>> {
            sections
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| sections.remove(i).1)
                .ok_or_else(|| Error::Data(format!("checkpoint missing section '{name}'")))
        };

        let dim = meta.config.codebook_dim;
        let to2 = |v: Vec<f64>, r: usize, c: usize, name: &str| -> Result<Array2<f64>> {
            if v.len() != r * c {
                return Err(Error::Data(format!(
                    "section '{name}' has {} values, expected {}",
                    v.len(),
                    r * c
                )));
            }
            Ok(Array2::from_shape_vec((r, c), v).unwrap())
        };
        let codec = CodecParams {
            enc_w: to2(take("codec.enc_w")?, 3, dim, "codec.enc_w")?,
            enc_b: Array1::from_vec(take("codec.enc_b")?),
            dec_w: to2(take("codec.dec_w")?, dim, 3, "codec.dec_w")?,
            dec_b: Array1::from_vec(take("codec.dec_b")?),
        };
        if codec.enc_b.len() != dim || codec.dec_b.len() != 3 {
            return Err(Error::Data("codec bias sizes do not match the config".into()));
        }
        let codebook = Codebook::new(to2(
            take("codebook")?,
            meta.config.codebook_size,
            dim,
            "codebook",
        )?)?;

        // Rebuild the parameter shapes from the config, then fill them.
        let mut model = Model::init(meta.config.clone())?;
        for (name, data, _) in model.params.tensors_mut() {
            let stored = take(&format!("model.{name}"))?;
            if stored.len() != data.len() {
                return Err(Error::Data(format!(
                    "model tensor '{name}' has {} values, expected {}",
                    stored.len(),
                    data.len()
                )));
            }
            data.copy_from_slice(&stored);
        }
        let opt = if meta.has_optimizer {
            let m = take("opt.m")?;
            let v = take("opt.v")?;
            let n = model.params.num_params();
            if m.len() != n || v.len() != n {
                return Err(Error::Data("optimizer state size mismatch".into()));
            }
            Some(OptState {
                step: meta.opt_step,
                m,
                v,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            config: meta.config,
            step: meta.step,
            model: model.params,
            codec,
            codebook,
            opt,
        })
    }
}
