//! Synthetic band-limited patch datasets with a controllable complexity axis.
//!
//! Each sample is a P x P patch of Gaussian noise whose spatial-frequency
//! content is cut off at a per-sample random frequency: low cutoffs give
//! smooth, highly compressible patches, high cutoffs give rough ones. The
//! member/nonmember split is balanced and drawn from the same law, so the
//! only systematic difference between the splits is which samples the model
//! trains on.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &[u8; 4] = b"RFDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_per_split: usize,
    /// Patch side length P; the data dimension is P^2.
    pub patch_side: usize,
    /// Per-sample cutoff frequency band `[f_lo, f_hi]` in cycles per patch.
    pub f_lo: f64,
    pub f_hi: f64,
    /// White-noise floor added to every pixel; keeps covariances
    /// well-conditioned even for near-degenerate cutoffs.
    pub noise_floor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_per_split: 64,
            patch_side: 8,
            f_lo: 0.5,
            f_hi: 4.0,
            noise_floor: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_split < 32 {
            return Err(Error::Config(format!(
                "n_per_split must be >= 32, got {}",
                self.n_per_split
            )));
        }
        if self.patch_side < 2 {
            return Err(Error::Config("patch side must be >= 2".into()));
        }
        let nyquist = self.patch_side as f64 / 2.0;
        if !(self.f_lo <= self.f_hi && self.f_hi <= nyquist && self.f_lo >= 0.0) {
            return Err(Error::Config(format!(
                "cutoff band [{}, {}] must satisfy 0 <= f_lo <= f_hi <= Nyquist ({})",
                self.f_lo, self.f_hi, nyquist
            )));
        }
        if self.noise_floor <= 0.0 {
            return Err(Error::Config("noise floor must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.patch_side * self.patch_side
    }
}

/// Balanced member/nonmember patch dataset, standardized per dimension with
/// member statistics only.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub config: GeneratorConfig,
    pub members: Vec<Vec<f64>>,
    pub nonmembers: Vec<Vec<f64>>,
    /// Per-sample generator cutoff frequencies.
    pub member_cutoffs: Vec<f64>,
    pub nonmember_cutoffs: Vec<f64>,
    /// Per-dimension member mean subtracted during standardization.
    pub mean: Vec<f64>,
    /// Per-dimension member scale divided out during standardization.
    pub scale: Vec<f64>,
}

impl PatchDataset {
    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Maps a standardized sample back to raw patch units.
    pub fn destandardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.scale.iter().zip(&self.mean))
            .map(|(v, (s, m))| v * s + m)
            .collect()
    }

    /// Global sample id: members first, then nonmembers.
    pub fn n_total(&self) -> usize {
        self.members.len() + self.nonmembers.len()
    }
}

/// Per-mode amplitude standard deviation. Deliberately *not* normalized by
/// the mode count: patches with more modes in band carry more energy, so
/// both the spatial roughness and the quantized-entropy (compressed size)
/// of a sample grow smoothly with its cutoff.
const MODE_AMP: f64 = 0.5;

/// One band-limited patch in raw units.
fn synth_patch<R: Rng>(r: &mut R, p: usize, cutoff: f64, noise_floor: f64) -> Vec<f64> {
    let half = (p / 2) as i64;
    // Half-plane of integer frequency modes, conjugates excluded.
    let mut modes = Vec::new();
    for kx in 0..=half {
        for ky in -half + 1..=half {
            if kx == 0 && ky <= 0 {
                continue;
            }
            let norm = ((kx * kx + ky * ky) as f64).sqrt();
            if norm <= cutoff {
                modes.push((kx as f64, ky as f64));
            }
        }
    }
    let n = p * p;
    let mut patch = vec![0.0; n];
    for &(kx, ky) in &modes {
        let amp = rng::standard_normal(r) * MODE_AMP;
        let phase: f64 = r.gen::<f64>() * std::f64::consts::TAU;
        for u in 0..p {
            for v in 0..p {
                let arg =
                    std::f64::consts::TAU * (kx * u as f64 + ky * v as f64) / p as f64 + phase;
                patch[u * p + v] += amp * arg.cos();
            }
        }
    }
    for px in &mut patch {
        *px += noise_floor * rng::standard_normal(r);
    }
    patch
}

pub fn generate(cfg: &GeneratorConfig) -> Result<PatchDataset> {
    cfg.validate()?;
    let d = cfg.dim();
    let n = cfg.n_per_split;

    let build_split = |label: &str| -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut samples = Vec::with_capacity(n);
        let mut cutoffs = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::substream(cfg.seed, label, i as u64);
            let cutoff = if cfg.f_hi > cfg.f_lo {
                r.gen_range(cfg.f_lo..cfg.f_hi)
            } else {
                cfg.f_lo
            };
            samples.push(synth_patch(&mut r, cfg.patch_side, cutoff, cfg.noise_floor));
            cutoffs.push(cutoff);
        }
        (samples, cutoffs)
    };
    let (mut members, member_cutoffs) = build_split("data-member");
    let (mut nonmembers, nonmember_cutoffs) = build_split("data-nonmember");

    // Standardize with member statistics only (1/(n-1) variance convention).
    let mut mean = vec![0.0; d];
    for s in &members {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut scale = vec![0.0; d];
    for s in &members {
        for (sc, (v, m)) in scale.iter_mut().zip(s.iter().zip(&mean)) {
            *sc += (v - m) * (v - m);
        }
    }
    for sc in &mut scale {
        *sc = (*sc / (n - 1) as f64).sqrt();
    }
    for split in [&mut members, &mut nonmembers] {
        for s in split.iter_mut() {
            for (v, (m, sc)) in s.iter_mut().zip(mean.iter().zip(&scale)) {
                *v = (*v - m) / sc;
            }
        }
    }

    Ok(PatchDataset {
        config: cfg.clone(),
        members,
        nonmembers,
        member_cutoffs,
        nonmember_cutoffs,
        mean,
        scale,
    })
}

pub fn encode(ds: &PatchDataset) -> Vec<u8> {
    let cfg = &ds.config;
    let mut w = Writer::new(MAGIC, VERSION);
    w.put_u32(cfg.patch_side as u32);
    w.put_u32(ds.dim() as u32);
    w.put_u32(ds.members.len() as u32);
    w.put_u32(ds.nonmembers.len() as u32);
    w.put_u64(cfg.seed);
    w.put_f64(cfg.f_lo);
    w.put_f64(cfg.f_hi);
    w.put_f64(cfg.noise_floor);
    w.put_f64_slice(&ds.mean);
    w.put_f64_slice(&ds.scale);
    w.put_f64_slice(&ds.member_cutoffs);
    w.put_f64_slice(&ds.nonmember_cutoffs);
    for s in ds.members.iter().chain(&ds.nonmembers) {
        w.put_f64_slice(s);
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<PatchDataset> {
    let mut r = Reader::new(bytes, MAGIC, VERSION, "dataset")?;
    let patch_side = r.get_u32("patch side")? as usize;
    let d = r.get_u32("dimension")? as usize;
    if d != patch_side * patch_side {
        return Err(Error::format(
            r.offset() - 4,
            format!("dimension {d} does not match patch side {patch_side}"),
        ));
    }
    let n_members = r.get_u32("member count")? as usize;
    let n_nonmembers = r.get_u32("nonmember count")? as usize;
    let seed = r.get_u64("seed")?;
    let f_lo = r.get_f64("f_lo")?;
    let f_hi = r.get_f64("f_hi")?;
    let noise_floor = r.get_f64("noise floor")?;
    let mean = r.get_f64_vec(d, "mean vector")?;
    let scale = r.get_f64_vec(d, "scale vector")?;
    let member_cutoffs = r.get_f64_vec(n_members, "member cutoffs")?;
    let nonmember_cutoffs = r.get_f64_vec(n_nonmembers, "nonmember cutoffs")?;
    let mut members = Vec::with_capacity(n_members);
    for _ in 0..n_members {
        members.push(r.get_f64_vec(d, "member sample")?);
    }
    let mut nonmembers = Vec::with_capacity(n_nonmembers);
    for _ in 0..n_nonmembers {
        nonmembers.push(r.get_f64_vec(d, "nonmember sample")?);
    }
    r.expect_eof()?;
    Ok(PatchDataset {
        config: GeneratorConfig {
            seed,
            n_per_split: n_members,
            patch_side,
            f_lo,
            f_hi,
            noise_floor,
        },
        members,
        nonmembers,
        member_cutoffs,
        nonmember_cutoffs,
        mean,
        scale,
    })
}

pub fn save(ds: &PatchDataset, path: &Path) -> Result<()> {
    fs::write(path, encode(ds))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PatchDataset> {
    decode(&fs::read(path)?)
}
