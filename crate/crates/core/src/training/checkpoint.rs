//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "CLNT" | version u32 | config_len u32 | config text
//! epoch u64 | adam_t u64 | best_val_acc f64 | best_val_loss f64
//! n_entries u32 | entries...
//! entry: name_len u32 | name | ndim u32 | dims u64 * ndim | data f64 * prod(dims)
//! ```
//!
//! Entries hold the parameters under their canonical names, the Adam
//! moments under `adam.m.<name>` and `adam.v.<name>`, and the dataset
//! posteriors under `dataset.{image,text}.{mean,stddev}`.

use std::path::Path;

use crate::aggregation::DatasetPosteriors;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::{DiagonalGaussian, Matrix};

use super::config::TrainConfig;
use super::optimizer::AdamState;

pub const MAGIC: &[u8; 4] = b"CLNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub params: Params,
    pub adam: AdamState,
    pub dataset: DatasetPosteriors,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_entry(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    push_u32(out, 2);
    push_u64(out, m.rows() as u64);
    push_u64(out, m.cols() as u64);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, Matrix)> {
        let mut out = self.params.to_vec();
        out.extend(self.adam.m.to_vec().into_iter().map(|(n, m)| (format!("adam.m.{n}"), m)));
        out.extend(self.adam.v.to_vec().into_iter().map(|(n, m)| (format!("adam.v.{n}"), m)));
        for (modality, q) in [("image", &self.dataset.image), ("text", &self.dataset.text)] {
            out.push((format!("dataset.{modality}.mean"), Matrix::row_vector(q.mean())));
            out.push((format!("dataset.{modality}.stddev"), Matrix::row_vector(q.stddev())));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, FORMAT_VERSION);
        let config = self.config.to_text();
        push_u32(&mut out, config.len() as u32);
        out.extend_from_slice(config.as_bytes());
        push_u64(&mut out, self.epoch);
        push_u64(&mut out, self.adam.t);
        out.extend_from_slice(&self.best_val_acc.to_le_bytes());
        out.extend_from_slice(&self.best_val_loss.to_le_bytes());
        let entries = self.entries();
        push_u32(&mut out, entries.len() as u32);
        for (name, m) in &entries {
            push_entry(&mut out, name, m);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        let config = TrainConfig::parse(config_text, "checkpoint config")
            .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
        let epoch = r.u64()?;
        let adam_t = r.u64()?;
        let best_val_acc = r.f64()?;
        let best_val_loss = r.f64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut dataset: [Option<Vec<f64>>; 4] = Default::default();
        for _ in 0..n {
            let (name, m) = r.entry()?;
            if let Some(rest) = name.strip_prefix("adam.m.") {
                adam_m.push((rest.to_string(), m));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                adam_v.push((rest.to_string(), m));
            } else if let Some(rest) = name.strip_prefix("dataset.") {
                let slot = match rest {
                    "image.mean" => 0,
                    "image.stddev" => 1,
                    "text.mean" => 2,
                    "text.stddev" => 3,
                    _ => return Err(Error::Format(format!("unknown entry {name}"))),
                };
                dataset[slot] = Some(m.into_vec());
            } else {
                params.push((name, m));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        let arch = &config.arch;
        let params = Params::from_named(arch, params)?;
        let adam = AdamState {
            t: adam_t,
            m: Params::from_named(arch, adam_m)?,
            v: Params::from_named(arch, adam_v)?,
        };
        let [Some(im), Some(is), Some(tm), Some(ts)] = dataset else {
            return Err(Error::Format("dataset posteriors missing".into()));
        };
        let gaussian = |m, s| {
            DiagonalGaussian::new(m, s).map_err(|e| Error::Format(format!("dataset posterior: {e}")))
        };
        let dataset = DatasetPosteriors {
            image: gaussian(im, is)?,
            text: gaussian(tm, ts)?,
        };
        if dataset.image.dim() != arch.latent || dataset.text.dim() != arch.latent {
            return Err(Error::Compatibility("dataset posterior dimension differs from latent".into()));
        }
        Ok(Self {
            config,
            epoch,
            best_val_acc,
            best_val_loss,
            params,
            adam,
            dataset,
        })
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
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn entry(&mut self) -> Result<(String, Matrix)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 2 {
            return Err(Error::Format(format!("entry {name} has {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
        }
        let (rows, cols) = if ndim == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let count = rows
            .checked_mul(cols)
            .filter(|&c| c <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::Format(format!("entry {name} overruns the file")))?;
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Matrix::from_vec(rows, cols, data)?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.arch = Architecture {
            d_in: 4,
            hidden: 3,
            embed: 3,
            shared_hidden: 3,
            aligned: 2,
            latent: 2,
            classifier_hidden: 3,
        };
        let params = Params::init(&config.arch, 9, 0.07);
        let mut adam = AdamState::new(&params);
        adam.t = 17;
        adam.m = Params::init(&config.arch, 10, 0.5);
        adam.v = Params::init(&config.arch, 11, 0.5);
        Checkpoint {
            config,
            epoch: 4,
            best_val_acc: 0.8125,
            best_val_loss: 0.1 + 0.2,
            params,
            adam,
            dataset: DatasetPosteriors {
                image: DiagonalGaussian::new(vec![0.1, -0.3], vec![1.5, 0.25]).unwrap(),
                text: DiagonalGaussian::new(vec![1e-300, 2.0], vec![1.0, 3.0]).unwrap(),
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CLNT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(load_checkpoint(Path::new("/nonexistent/dir/x.ckpt")).is_err());
    }

    #[test]
    fn shape_mismatch_is_a_compatibility_error() {
        let c = sample();
        let text = c.config.to_text().replace("aligned = 2", "aligned = 3");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        push_u32(&mut bytes, FORMAT_VERSION);
        push_u32(&mut bytes, text.len() as u32);
        bytes.extend_from_slice(text.as_bytes());
        let original = c.to_bytes();
        let header = 4 + 4 + 4 + c.config.to_text().len();
        bytes.extend_from_slice(&original[header..]);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Compatibility(_))));
    }
}
