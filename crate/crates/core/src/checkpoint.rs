//! Binary checkpoints: `SGEN`, u32 version, u32 tensor count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, u64 dims, f32 data. The run
//! configuration lives next to the file in `config.txt`.

use std::path::{Path, PathBuf};

use sge_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::fsutil::{atomic_write, read_file};
use crate::losses::init_discriminator;
use crate::model::{init_generator, ModelSpec};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"SGEN";
pub const VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.txt";

pub fn encode_tensors(entries: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl Reader<'_> {
    fn err(&self, at: usize, msg: impl Into<String>) -> CoreError {
        CoreError::Parse {
            file: self.file.to_string(),
            offset: at as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(buf: &[u8], file: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0, file };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let raw = r.take(len, "name")?.to_vec();
        let name = String::from_utf8(raw).map_err(|_| r.err(at + 4, "name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4, "data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.err(r.pos, "trailing bytes"));
    }
    Ok(out)
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training steps.
    pub step: u64,
    pub generator: ParamSet<f32>,
    pub discriminator: Option<ParamSet<f32>>,
    pub opt_g: Option<Adam>,
    pub opt_d: Option<Adam>,
}

const GEN: &str = "gen/";
const DISC: &str = "disc/";

fn push_opt<'a>(entries: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, names: &[String], opt: &'a Adam, step: &'a Tensor<f32>) {
    entries.push((format!("{prefix}step"), step));
    for (n, m) in names.iter().zip(&opt.m) {
        entries.push((format!("{prefix}m/{n}"), m));
    }
    for (n, v) in names.iter().zip(&opt.v) {
        entries.push((format!("{prefix}v/{n}"), v));
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let step = Tensor::scalar(self.step as f32);
        let g_step = self.opt_g.as_ref().map(|o| Tensor::scalar(o.step as f32));
        let d_step = self.opt_d.as_ref().map(|o| Tensor::scalar(o.step as f32));
        let mut entries: Vec<(String, &Tensor<f32>)> = vec![("train/step".into(), &step)];
        for (n, t) in self.generator.iter() {
            entries.push((format!("{GEN}{n}"), t));
        }
        if let Some(d) = &self.discriminator {
            for (n, t) in d.iter() {
                entries.push((format!("{DISC}{n}"), t));
            }
        }
        if let (Some(o), Some(s)) = (&self.opt_g, &g_step) {
            push_opt(&mut entries, "adam_g/", self.generator.names(), o, s);
        }
        if let (Some(o), Some(d), Some(s)) = (&self.opt_d, &self.discriminator, &d_step) {
            push_opt(&mut entries, "adam_d/", d.names(), o, s);
        }
        encode_tensors(&entries)
    }

    /// Writes `path` atomically and refreshes `config.txt` beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(&config_path(path), self.config.to_text().as_bytes())?;
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_path(path);
        let text = String::from_utf8_lossy(&read_file(&cfg_path)?).into_owned();
        let config = RunConfig::parse(&text)?;
        let buf = read_file(path)?;
        Self::from_bytes(&buf, &path.display().to_string(), config)
    }

    pub fn from_bytes(buf: &[u8], file: &str, config: RunConfig) -> Result<Self> {
        let tensors = decode_tensors(buf, file)?;
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);

        let spec = ModelSpec::from(&config);
        let template = init_generator::<f32>(&spec, 0)?;
        let generator = fill(&template, GEN, &find)?;
        let extra = tensors
            .iter()
            .filter(|(n, _)| n.starts_with(GEN) && !template.contains(&n[GEN.len()..]))
            .map(|(n, _)| n.clone())
            .next();
        if let Some(n) = extra {
            return Err(CoreError::Load {
                field: n,
                msg: format!("not part of the {} model in config.txt", config.variant),
            });
        }

        let has_disc = tensors.iter().any(|(n, _)| n.starts_with(DISC));
        let discriminator = if has_disc {
            Some(fill(&init_discriminator::<f32>(config.disc_width, 0)?, DISC, &find)?)
        } else {
            None
        };
        let step = find("train/step").map(|t| t.item() as u64).unwrap_or(0);
        let opt = |prefix: &str, params: &ParamSet<f32>| -> Result<Option<Adam>> {
            let Some(s) = find(&format!("{prefix}step")) else {
                return Ok(None);
            };
            let mut adam = Adam::new(AdamConfig::from(&config), params);
            adam.step = s.item() as u64;
            for (i, n) in params.names().iter().enumerate() {
                adam.m[i] = expect(&find, &format!("{prefix}m/{n}"), params.tensors()[i].shape())?.clone();
                adam.v[i] = expect(&find, &format!("{prefix}v/{n}"), params.tensors()[i].shape())?.clone();
            }
            Ok(Some(adam))
        };
        let opt_g = opt("adam_g/", &generator)?;
        let opt_d = match &discriminator {
            Some(d) => opt("adam_d/", d)?,
            None => None,
        };
        Ok(Self {
            config,
            step,
            generator,
            discriminator,
            opt_g,
            opt_d,
        })
    }
}

fn expect<'a>(find: &impl Fn(&str) -> Option<&'a Tensor<f32>>, name: &str, shape: &[usize]) -> Result<&'a Tensor<f32>> {
    let t = find(name).ok_or_else(|| CoreError::Load {
        field: name.to_string(),
        msg: "missing from checkpoint".into(),
    })?;
    if t.shape() != shape {
        return Err(CoreError::Load {
            field: name.to_string(),
            msg: format!("shape {:?} does not match config shape {:?}", t.shape(), shape),
        });
    }
    Ok(t)
}

fn fill<'a>(template: &ParamSet<f32>, prefix: &str, find: &impl Fn(&str) -> Option<&'a Tensor<f32>>) -> Result<ParamSet<f32>> {
    let mut out = ParamSet::new();
    for (n, t) in template.iter() {
        out.insert(n, expect(find, &format!("{prefix}{n}"), t.shape())?.clone())?;
    }
    Ok(out)
}

/// `config.txt` in the checkpoint's directory.
pub fn config_path(ckpt: &Path) -> PathBuf {
    ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_reports_offset() {
        let t = Tensor::<f32>::zeros(&[2]);
        let buf = encode_tensors(&[("a".into(), &t)]);
        match decode_tensors(&buf[..buf.len() - 1], "c.sgen") {
            Err(CoreError::Parse { offset, file, .. }) => {
                assert_eq!(file, "c.sgen");
                assert_eq!(offset, (12 + 4 + 1 + 4 + 8) as u64);
            }
            other => panic!("{other:?}"),
        }
        assert!(decode_tensors(b"NOPE", "x").is_err());
    }
}
