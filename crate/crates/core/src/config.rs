//! JSON run configuration, the binary image/label file and a synthetic
//! label-shifted dataset.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{preset, preset_names, CnnConfig, ConvSpec, FcSpec};
use crate::lhe::LheParams;
use crate::plan::RMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub conv: Vec<ConvSpec>,
    pub fc: Vec<FcSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LheSection {
    pub slots: usize,
    pub levels: u32,
    #[serde(default)]
    pub noise_sigma: f64,
}

/// `"auto"` or a fixed replication factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RModeSpec {
    Fixed(usize),
    Named(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl From<RModeSpec> for RMode {
    fn from(r: RModeSpec) -> Self {
        match r {
            RModeSpec::Fixed(r) => RMode::Fixed(r),
            RModeSpec::Named(AutoTag::Auto) => RMode::Auto,
        }
    }
}

fn default_lr() -> f64 {
    0.05
}

fn default_epochs() -> usize {
    1
}

fn default_r_mode() -> RModeSpec {
    RModeSpec::Named(AutoTag::Auto)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n: usize,
    #[serde(default = "default_r_mode")]
    pub r_mode: RModeSpec,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub lhe: LheSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A preset with default run settings.
    pub fn from_preset(name: &str) -> Result<Self> {
        let p =
            preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}, expected one of {}", preset_names().join(", "))))?;
        Ok(RunConfig {
            model: ModelSection { conv: p.cfg.conv().to_vec(), fc: p.cfg.fc().to_vec() },
            lhe: LheSection { slots: p.slots, levels: p.levels, noise_sigma: 0.0 },
            run: RunSection { n: p.cfg.n(), r_mode: default_r_mode(), lr: default_lr(), epochs: default_epochs(), seed: 0 },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn()?;
        self.params()?;
        if !self.run.lr.is_finite() || self.run.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.run.lr)));
        }
        Ok(())
    }

    pub fn cnn(&self) -> Result<CnnConfig> {
        CnnConfig::new(self.model.conv.clone(), self.model.fc.clone(), self.run.n)
    }

    pub fn params(&self) -> Result<LheParams> {
        LheParams::with_noise(self.lhe.slots, self.lhe.levels, self.lhe.noise_sigma).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn r_mode(&self) -> RMode {
        self.run.r_mode.into()
    }
}

/// Images with integer labels, all of one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images, {} labels", images.len(), labels.len())));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.len() != first.len()) {
                return Err(Error::Shape("images differ in length".into()));
            }
        }
        if labels.iter().any(|l| *l > u8::MAX as usize) {
            return Err(Error::Shape("labels must fit in one byte".into()));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// u32 LE count, `count·image_len` f64 LE pixels, `count` label bytes.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let count = u32::try_from(self.len()).map_err(|_| Error::Format("too many images".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for im in &self.images {
            for v in im {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let labels: Vec<u8> = self.labels.iter().map(|l| *l as u8).collect();
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, image_len: usize) -> Result<Self> {
        let mut head = [0u8; 4];
        r.read_exact(&mut head).map_err(|e| Error::Format(format!("missing count header: {e}")))?;
        let count = u32::from_le_bytes(head) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let want = count * (8 * image_len + 1);
        if body.len() != want {
            return Err(Error::Format(format!(
                "{count} images of {image_len} pixels need {want} bytes after the header, found {}",
                body.len()
            )));
        }
        let (pix, lab) = body.split_at(count * 8 * image_len);
        let images = pix
            .chunks_exact(8 * image_len.max(1))
            .take(count)
            .map(|im| im.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
            .collect();
        Dataset::new(images, lab.iter().map(|b| *b as usize).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, image_len: usize) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, image_len)
    }

    /// Consecutive chunks of at most `size` images.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (&[Vec<f64>], &[usize])> {
        self.images.chunks(size).zip(self.labels.chunks(size))
    }
}

/// Which label parity a synthetic set over-represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Odd,
    Even,
}

impl std::str::FromStr for Parity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odd" => Ok(Parity::Odd),
            "even" => Ok(Parity::Even),
            _ => Err(Error::Config(format!("parity must be odd or even, got {s:?}"))),
        }
    }
}

/// Class prototypes plus Gaussian pixel noise. `task` fixes the prototypes,
/// so sets drawn with the same task share classes; `seed` draws the samples.
/// A fraction `share` of labels has the dominant parity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_len: usize,
    pub task: u64,
    pub noise: f64,
    pub share: f64,
}

impl SynthSpec {
    pub fn for_config(cfg: &CnnConfig, task: u64) -> Self {
        SynthSpec { classes: cfg.classes(), image_len: cfg.image_len(), task, noise: 0.8, share: 0.9 }
    }

    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.task);
        (0..self.classes).map(|_| (0..self.image_len).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).collect()
    }

    pub fn sample(&self, count: usize, dominant: Parity, seed: u64) -> Dataset {
        let protos = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.noise).expect("finite noise");
        let want = match dominant {
            Parity::Odd => 1,
            Parity::Even => 0,
        };
        let (major, minor): (Vec<usize>, Vec<usize>) = (0..self.classes).partition(|c| c % 2 == want);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let pool = if minor.is_empty() || rng.random_bool(self.share) { &major } else { &minor };
            let label = pool[rng.random_range(0..pool.len())];
            images.push(protos[label].iter().map(|p| p + noise.sample(&mut rng)).collect());
            labels.push(label);
        }
        Dataset { images, labels }
    }
}
