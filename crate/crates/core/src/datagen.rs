//! Piecewise-constant ground truths, their noisy observations, the TV
//! reference dictionary, and the on-disk dataset format.
//!
//! # File format
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | content                         |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `ADSL`                    |
//! | 4      | 2    | version, `u16` = 1              |
//! | 6      | 8    | `L`, number of pairs, `u64`     |
//! | 14     | 8    | `p`, signal length, `u64`       |
//! | 22     | 8    | `sigma`, `f64`                  |
//! | 30     | ...  | `L` records of `p` f64 `w` then `p` f64 `y` |
//!
//! A sibling text file `<path>.cfg` holds the full [`DataConfig`] as
//! `key=value` lines.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::linalg::{Rng, Stream, Tensor};

pub const MAGIC: &[u8; 4] = b"ADSL";
pub const VERSION: u16 = 1;
const HEADER_LEN: u64 = 30;

/// How segment levels are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpMode {
    /// Levels alternate 0, 10, 0, ... so every jump is 0->10 or 10->0.
    Fixed,
    /// Each level is drawn uniformly in `[0, 10]`.
    Uniform,
}

impl fmt::Display for AmpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmpMode::Fixed => "fixed-0-10",
            AmpMode::Uniform => "uniform-0-10",
        })
    }
}

impl FromStr for AmpMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fixed-0-10" | "fixed" => Ok(AmpMode::Fixed),
            "uniform-0-10" | "uniform" => Ok(AmpMode::Uniform),
            other => Err(format!("unknown amplitude mode `{other}` (fixed-0-10 | uniform-0-10)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub p: usize,
    pub l: usize,
    pub n_jumps: usize,
    pub amp_mode: AmpMode,
    pub sigma: f64,
    pub seed: u64,
    /// Child stream of `(seed, data)` to draw from; separates train and
    /// validation sets generated from one seed.
    pub split: u64,
}

impl DataConfig {
    pub fn new(p: usize, l: usize, sigma: f64, seed: u64) -> Self {
        DataConfig {
            p,
            l,
            n_jumps: 4,
            amp_mode: AmpMode::Fixed,
            sigma,
            seed,
            split: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidConfig(format!("p must be at least 2, got {}", self.p)));
        }
        if self.n_jumps >= self.p {
            return Err(Error::InvalidConfig(format!(
                "n_jumps ({}) must be smaller than p ({})",
                self.n_jumps, self.p
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    fn rng(&self) -> Rng {
        let root = Rng::new(self.seed, Stream::Data);
        if self.split == 0 {
            root
        } else {
            root.derive(self.split)
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("p", self.p);
        kv.set("L", self.l);
        kv.set("n_jumps", self.n_jumps);
        kv.set("amp_mode", self.amp_mode);
        kv.set("sigma", self.sigma);
        kv.set("seed", self.seed);
        kv.set("split", self.split);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Ok(DataConfig {
            p: kv.require("p")?,
            l: kv.require("L")?,
            n_jumps: kv.get_or("n_jumps", 4)?,
            amp_mode: kv.get_or("amp_mode", AmpMode::Fixed)?,
            sigma: kv.require("sigma")?,
            seed: kv.get_or("seed", 0)?,
            split: kv.get_or("split", 0)?,
        })
    }
}

/// Ground-truth/observation pairs plus the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub pairs: Vec<(Tensor, Tensor)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn p(&self) -> usize {
        self.config.p
    }
}

/// Draws one piecewise-constant signal with exactly `n_jumps` jumps.
pub fn gen_signal(cfg: &DataConfig, rng: &mut Rng) -> Tensor {
    let p = cfg.p;
    let mut jumps: Vec<usize> = index::sample(rng.core(), p - 1, cfg.n_jumps)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    jumps.sort_unstable();

    let mut levels = Vec::with_capacity(cfg.n_jumps + 1);
    for k in 0..=cfg.n_jumps {
        let level = match cfg.amp_mode {
            AmpMode::Fixed => {
                if k % 2 == 0 {
                    0.0
                } else {
                    10.0
                }
            }
            AmpMode::Uniform => loop {
                let v = rng.uniform(0.0, 10.0);
                if levels.last() != Some(&v) {
                    break v;
                }
            },
        };
        levels.push(level);
    }

    let mut w = vec![0.0; p];
    let mut segment = 0;
    for (i, wi) in w.iter_mut().enumerate() {
        if segment < jumps.len() && i == jumps[segment] {
            segment += 1;
        }
        *wi = levels[segment];
    }
    Tensor::vector(w)
}

/// `y = w + sigma * n` with `n` standard normal. The noise is drawn even
/// when `sigma = 0` so that datasets differing only in `sigma` share their
/// ground truths.
pub fn add_noise(w: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    let data = w
        .data()
        .iter()
        .map(|&v| {
            let n = rng.normal();
            if sigma == 0.0 {
                v
            } else {
                v + sigma * n
            }
        })
        .collect();
    Tensor::new(w.rows(), w.cols(), data).expect("shape preserved")
}

/// Circulant TV operator: column `c` has -1 at row `c` and +1 at row
/// `(c + 1) mod p`, so every column sums to zero.
pub fn make_dtv(p: usize) -> Tensor {
    assert!(p >= 2, "TV operator needs p >= 2");
    let mut d = Tensor::zeros(p, p);
    for c in 0..p {
        d.set(c, c, -1.0);
        d.set((c + 1) % p, c, 1.0);
    }
    d
}

pub fn gen_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = cfg.rng();
    let pairs = (0..cfg.l)
        .map(|_| {
            let w = gen_signal(cfg, &mut rng);
            let y = add_noise(&w, cfg.sigma, &mut rng);
            (w, y)
        })
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        pairs,
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let p = ds.config.p;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + ds.len() * 2 * p * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(p as u64).to_le_bytes());
    out.extend_from_slice(&ds.config.sigma.to_le_bytes());
    for (w, y) in &ds.pairs {
        for v in w.data().iter().chain(y.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(Error::Format {
                offset: self.offset as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses the binary part of a dataset. `config` supplies the generation
/// parameters that the binary header does not carry.
pub fn decode(bytes: &[u8], config: Option<DataConfig>) -> Result<Dataset> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected ADSL".into(),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let l = r.u64("pair count")?;
    let p = r.u64("signal length")?;
    let sigma = r.f64("sigma")?;

    let body = l
        .checked_mul(p)
        .and_then(|n| n.checked_mul(16))
        .ok_or_else(|| Error::Format {
            offset: 6,
            msg: format!("record size overflows for L={l}, p={p}"),
        })?;
    let available = bytes.len() as u64 - HEADER_LEN;
    if available < body {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated: header announces {body} record bytes, found {available}"),
        });
    }
    if available > body {
        return Err(Error::Format {
            offset: HEADER_LEN + body,
            msg: format!("{} trailing bytes after the last record", available - body),
        });
    }

    let (l, p) = (l as usize, p as usize);
    let mut pairs = Vec::with_capacity(l);
    for i in 0..l {
        let mut read = |what: &str| -> Result<Tensor> {
            let vals = (0..p)
                .map(|_| r.f64(what))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::vector(vals))
        };
        let w = read(&format!("w of record {i}"))?;
        let y = read(&format!("y of record {i}"))?;
        pairs.push((w, y));
    }

    let config = match config {
        Some(c) => {
            if c.p != p || c.l != l || c.sigma.to_bits() != sigma.to_bits() {
                return Err(Error::Format {
                    offset: 6,
                    msg: format!(
                        "header (L={l}, p={p}, sigma={sigma}) disagrees with sidecar (L={}, p={}, sigma={})",
                        c.l, c.p, c.sigma
                    ),
                });
            }
            c
        }
        None => DataConfig {
            p,
            l,
            n_jumps: 0,
            amp_mode: AmpMode::Fixed,
            sigma,
            seed: 0,
            split: 0,
        },
    };
    Ok(Dataset { config, pairs })
}

/// Writes the binary file and its `.cfg` sidecar.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, ds.config.to_kv().render()).map_err(|e| Error::io(&side, e))
}

/// Reads a dataset; the sidecar is optional.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let config = if side.exists() {
        Some(DataConfig::from_kv(&KvConfig::load(&side)?)?)
    } else {
        None
    };
    decode(&bytes, config)
}
