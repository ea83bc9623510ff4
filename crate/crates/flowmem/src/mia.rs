//! Membership-inference test statistics over a frozen velocity field.
//!
//! Three families, all oriented so that lower scores indicate members:
//!
//! - `t_naive`: single-noise reconstruction error
//!   `||x - (v(x_t, t) + eps)||^2` with `x_t = t x + (1-t) eps`.
//! - `t_mc`: Monte-Carlo averaged velocity reconstruction error
//!   `||x - mean_n v(t x + (1-t) eps_n, t)||^2`.
//! - `*_cal`: either of the above divided by the input complexity `C(x)`,
//!   the byte length of the sample's losslessly compressed 8-bit encoding.
//!
//! The compressor is pinned (raw DEFLATE, maximum level, 8-bit quantization
//! over [-4, 4] in raw patch units) and recorded in every score table;
//! compressed sizes are only meaningful relative to a fixed codec.

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::Rng;

use crate::data::PatchDataset;
use crate::error::{Error, Result};
use crate::flow::{T_MAX, T_MIN};
use crate::model::VelocityField;
use crate::rng;

/// Identifier of the pinned complexity codec, recorded in reports.
pub const CODEC_DESCRIPTOR: &str = "deflate-raw/9+q8[-20,20]";

// Quantization range in raw patch units. The step (40/255 ~ 0.157) is
// coarse relative to the highest per-sample amplitudes the generator
// produces, which keeps the per-symbol entropy of even the roughest patch
// below the point where DEFLATE falls back to stored blocks; without that
// headroom all high-cutoff samples would share one saturated byte count.
const QUANT_LO: f64 = -20.0;
const QUANT_HI: f64 = 20.0;

/// Quantizes a raw-unit patch to 8 bits per element, row-major.
pub fn quantize(raw: &[f64]) -> Vec<u8> {
    raw.iter()
        .map(|&v| {
            let c = v.clamp(QUANT_LO, QUANT_HI);
            (((c - QUANT_LO) / (QUANT_HI - QUANT_LO)) * 255.0).round() as u8
        })
        .collect()
}

/// Compressed byte count of a raw-unit patch under the pinned codec.
pub fn complexity_bytes(raw: &[f64]) -> Result<u32> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "complexity of non-finite sample".into(),
        ));
    }
    let q = quantize(raw);
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&q)
        .and_then(|_| enc.finish())
        .map(|buf| buf.len() as u32)
        .map_err(|e| Error::Numeric(format!("deflate failed: {e}")))
}

/// De-standardization constants needed to compute `C(x)` from a
/// standardized sample.
#[derive(Debug, Clone)]
pub struct Codec {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Codec {
    pub fn for_dataset(ds: &PatchDataset) -> Self {
        Codec {
            mean: ds.mean.clone(),
            scale: ds.scale.clone(),
        }
    }

    /// Identity constants: treats inputs as already being in raw units.
    pub fn identity(dim: usize) -> Self {
        Codec {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn complexity(&self, x_standardized: &[f64]) -> Result<u32> {
        let raw: Vec<f64> = x_standardized
            .iter()
            .zip(self.scale.iter().zip(&self.mean))
            .map(|(v, (s, m))| v * s + m)
            .collect();
        complexity_bytes(&raw)
    }
}

/// Single-noise statistic: `||x - (v(x_t, t) + eps)||^2`.
pub fn t_naive(model: &impl VelocityField, x: &[f64], t: f64, eps: &[f64]) -> f64 {
    let xt: Vec<f64> = x
        .iter()
        .zip(eps)
        .map(|(a, e)| t * a + (1.0 - t) * e)
        .collect();
    let v = model.velocity(&xt, t);
    x.iter()
        .zip(v.iter().zip(eps))
        .map(|(a, (vi, e))| {
            let d = a - (vi + e);
            d * d
        })
        .sum()
}

/// Monte-Carlo statistic: `||x - (1/N) sum_n v(t x + (1-t) eps_n, t)||^2`.
pub fn t_mc(model: &impl VelocityField, x: &[f64], t: f64, n: usize, rng: &mut impl Rng) -> f64 {
    assert!(n >= 1, "t_mc requires at least one Monte-Carlo draw");
    let d = x.len();
    let mut mean_v = vec![0.0; d];
    for _ in 0..n {
        let eps = rng::standard_normal_vec(rng, d);
        let xt: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(a, e)| t * a + (1.0 - t) * e)
            .collect();
        let v = model.velocity(&xt, t);
        for (m, vi) in mean_v.iter_mut().zip(&v) {
            *m += vi;
        }
    }
    for m in &mut mean_v {
        *m /= n as f64;
    }
    x.iter()
        .zip(&mean_v)
        .map(|(a, m)| (a - m) * (a - m))
        .sum()
}

/// `t_naive` divided by the sample's compressed-size complexity.
pub fn t_naive_cal(
    model: &impl VelocityField,
    x: &[f64],
    t: f64,
    eps: &[f64],
    codec: &Codec,
) -> Result<f64> {
    let c = codec.complexity(x)?;
    Ok(t_naive(model, x, t, eps) / c as f64)
}

/// `t_mc` divided by the sample's compressed-size complexity.
pub fn t_mc_cal(
    model: &impl VelocityField,
    x: &[f64],
    t: f64,
    n: usize,
    rng: &mut impl Rng,
    codec: &Codec,
) -> Result<f64> {
    let c = codec.complexity(x)?;
    Ok(t_mc(model, x, t, n, rng) / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatisticKind {
    Naive,
    Mc,
    NaiveCal,
    McCal,
}

impl StatisticKind {
    pub const ALL: [StatisticKind; 4] = [
        StatisticKind::Naive,
        StatisticKind::Mc,
        StatisticKind::NaiveCal,
        StatisticKind::McCal,
    ];

    pub fn is_calibrated(self) -> bool {
        matches!(self, StatisticKind::NaiveCal | StatisticKind::McCal)
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StatisticKind::Naive => "naive",
            StatisticKind::Mc => "mc",
            StatisticKind::NaiveCal => "naive_cal",
            StatisticKind::McCal => "mc_cal",
        };
        f.write_str(s)
    }
}

impl FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(StatisticKind::Naive),
            "mc" => Ok(StatisticKind::Mc),
            "naive_cal" => Ok(StatisticKind::NaiveCal),
            "mc_cal" => Ok(StatisticKind::McCal),
            other => Err(Error::Config(format!("unknown statistic '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub statistic: StatisticKind,
    /// Attack timestep, inside the training clamp interval.
    pub t: f64,
    /// Monte-Carlo draws for the `mc` variants.
    pub n_mc: usize,
    pub noise_seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(T_MIN..=T_MAX).contains(&self.t) {
            return Err(Error::Config(format!(
                "attack t={} outside clamp interval [{T_MIN}, {T_MAX}]",
                self.t
            )));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: usize,
    pub is_member: bool,
    pub score: f64,
    pub complexity_bytes: u32,
}

/// Per-sample scores of one statistic at one timestep. Lower score means
/// "member" for every statistic; evaluators handle orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackScoreTable {
    pub statistic: StatisticKind,
    pub t: f64,
    pub n_mc: usize,
    pub noise_seed: u64,
    pub codec: String,
    pub rows: Vec<ScoreRow>,
}

impl AttackScoreTable {
    pub fn member_scores(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.is_member)
            .map(|r| r.score)
            .collect()
    }

    pub fn nonmember_scores(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| !r.is_member)
            .map(|r| r.score)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,is_member,score,complexity_bytes,t,statistic,n_mc,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.id,
                r.is_member as u8,
                r.score,
                r.complexity_bytes,
                self.t,
                self.statistic,
                self.n_mc,
                self.noise_seed
            ));
        }
        out
    }
}

/// Scores every sample of the dataset (members first, then nonmembers)
/// with deterministic per-sample noise substreams.
pub fn score_dataset(
    model: &impl VelocityField,
    ds: &PatchDataset,
    cfg: &AttackConfig,
) -> Result<AttackScoreTable> {
    cfg.validate()?;
    if ds.members.is_empty() || ds.nonmembers.is_empty() {
        return Err(Error::Config(
            "membership inference requires both members and nonmembers".into(),
        ));
    }
    if model.dim() != ds.dim() {
        return Err(Error::Shape(format!(
            "model dimension {} vs dataset dimension {}",
            model.dim(),
            ds.dim()
        )));
    }
    let codec = Codec::for_dataset(ds);
    let d = ds.dim();
    let mut rows = Vec::with_capacity(ds.n_total());
    let samples = ds
        .members
        .iter()
        .map(|x| (x, true))
        .chain(ds.nonmembers.iter().map(|x| (x, false)));
    for (id, (x, is_member)) in samples.enumerate() {
        let mut r = rng::substream(cfg.noise_seed, "mia-eps", id as u64);
        let complexity = codec.complexity(x)?;
        let score = match cfg.statistic {
            StatisticKind::Naive => {
                let eps = rng::standard_normal_vec(&mut r, d);
                t_naive(model, x, cfg.t, &eps)
            }
            StatisticKind::NaiveCal => {
                let eps = rng::standard_normal_vec(&mut r, d);
                t_naive(model, x, cfg.t, &eps) / complexity as f64
            }
            StatisticKind::Mc => t_mc(model, x, cfg.t, cfg.n_mc, &mut r),
            StatisticKind::McCal => {
                t_mc(model, x, cfg.t, cfg.n_mc, &mut r) / complexity as f64
            }
        };
        if !score.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite attack score for sample {id}"
            )));
        }
        rows.push(ScoreRow {
            id,
            is_member,
            score,
            complexity_bytes: complexity,
        });
    }
    Ok(AttackScoreTable {
        statistic: cfg.statistic,
        t: cfg.t,
        n_mc: cfg.n_mc,
        noise_seed: cfg.noise_seed,
        codec: CODEC_DESCRIPTOR.to_string(),
        rows,
    })
}
