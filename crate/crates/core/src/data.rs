//! Feature records, the synthetic corpus generator, the newline-delimited
//! dataset format, and seeded splitting and batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

/// One news item as pre-extracted image and text feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    pub img: Vec<f64>,
    pub txt: Vec<f64>,
}

impl FeatureRecord {
    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.img.len() != d_in || self.txt.len() != d_in {
            return Err(Error::Format(format!(
                "record {}: feature lengths {}/{} do not match {d_in}",
                self.id,
                self.img.len(),
                self.txt.len()
            )));
        }
        if self.img.iter().chain(&self.txt).any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("record {}: non-finite feature", self.id)));
        }
        Ok(())
    }
}

/// Feature dimension shared by all records; errors if they disagree.
pub fn feature_dim(records: &[FeatureRecord]) -> Result<Option<usize>> {
    let Some(first) = records.first() else {
        return Ok(None);
    };
    let d = first.img.len();
    for r in records {
        r.validate(d)?;
    }
    Ok(Some(d))
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_records: usize,
    pub d_in: usize,
    /// Topic latent dimension.
    pub latent_dim: usize,
    pub noise: f64,
    /// Fraction of records that are fakes pairing unrelated image and text.
    pub fake_mismatched: f64,
    /// Fraction of records that are fakes with offset text features.
    pub fake_corrupted: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_records: 3000,
            d_in: 32,
            latent_dim: 4,
            noise: 0.05,
            fake_mismatched: 0.35,
            fake_corrupted: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (m, c) = (self.fake_mismatched, self.fake_corrupted);
        if !(0.0..=1.0).contains(&m) || !(0.0..=1.0).contains(&c) || m + c > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "fake fractions must lie in [0, 1] and sum to at most 1 (got {m} + {c})"
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid("noise scale must be finite and >= 0"));
        }
        if self.d_in == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("d_in and latent_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Real,
    Mismatched,
    Corrupted,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
        .collect::<Vec<f64>>()
}

/// Generates a labeled corpus.
///
/// Real records share one topic latent `z ~ N(0, I)` between modalities:
/// `img = A z + noise`, `txt = B z + noise` with fixed seeded mixing
/// matrices. Mismatched fakes draw image and text from independent
/// latents; corrupted fakes share the latent but shift the text by a fixed
/// offset vector.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<FeatureRecord>> {
    spec.validate()?;
    let n = spec.n_records;
    let (d, k) = (spec.d_in, spec.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mix_scale = 1.0 / (k as f64).sqrt();
    let img_mix = gaussian_vec(&mut rng, d * k, mix_scale);
    let txt_mix = gaussian_vec(&mut rng, d * k, mix_scale);
    let offset = gaussian_vec(&mut rng, d, 1.0 / (d as f64).sqrt());

    let n_mis = (spec.fake_mismatched * n as f64).round() as usize;
    let n_cor = ((spec.fake_corrupted * n as f64).round() as usize).min(n - n_mis);
    let mut kinds: Vec<Kind> = std::iter::repeat_n(Kind::Mismatched, n_mis)
        .chain(std::iter::repeat_n(Kind::Corrupted, n_cor))
        .chain(std::iter::repeat_n(Kind::Real, n - n_mis - n_cor))
        .collect();
    kinds.shuffle(&mut rng);

    let project = |mix: &[f64], z: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| (0..k).map(|j| mix[i * k + j] * z[j]).sum())
            .collect()
    };
    let width = n.to_string().len().max(6);
    let mut records = Vec::with_capacity(n);
    for (i, kind) in kinds.into_iter().enumerate() {
        let z = gaussian_vec(&mut rng, k, 1.0);
        let z_txt = match kind {
            Kind::Mismatched => gaussian_vec(&mut rng, k, 1.0),
            _ => z.clone(),
        };
        let mut img = project(&img_mix, &z);
        let mut txt = project(&txt_mix, &z_txt);
        if kind == Kind::Corrupted {
            txt.iter_mut().zip(&offset).for_each(|(t, o)| *t += o);
        }
        for v in img.iter_mut().chain(txt.iter_mut()) {
            *v += spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        records.push(FeatureRecord {
            id: format!("syn-{i:0width$}"),
            label: if kind == Kind::Real { Label::Real } else { Label::Fake },
            event: None,
            img,
            txt,
        });
    }
    Ok(records)
}

/// Reads the newline-delimited dataset format. Records come back sorted by id.
pub fn load_records(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut records: Vec<FeatureRecord> = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let d = *dim.get_or_insert(rec.img.len());
        rec.validate(d).map_err(|e| parse_err(e.to_string()))?;
        records.push(rec);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Format(format!("duplicate record id {}", w[0].id)));
    }
    Ok(records)
}

/// Writes one JSON object per line (UTF-8, LF). Floats use shortest
/// round-trip formatting, so save then load is lossless.
pub fn save_records(records: &[FeatureRecord], path: &Path) -> Result<()> {
    feature_dim(records)?;
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    {
        let file = File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(ctx("writing"), e))?;
        w.flush().map_err(|e| Error::io(ctx("flushing"), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(format!("renaming into {}", path.display()), e)
    })
}

/// Train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 2.0 / 3.0,
            val: 1.0 / 6.0,
            test: 1.0 / 6.0,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("split ratios must be finite and >= 0"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous slicing into (train, val, test).
pub fn split(
    records: &[FeatureRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    let idx = split_indices(records.len(), ratios, seed)?;
    let take = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok((take(&idx.0), take(&idx.1), take(&idx.2)))
}

/// Index form of [`split`].
pub fn split_indices(n: usize, ratios: SplitRatios, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    ratios.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok((order, val, test))
}

/// Per-epoch shuffled batches of indices; a final batch shorter than 2 is dropped.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
