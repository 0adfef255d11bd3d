//! Synthetic distorted patches with a proxy quality score.
//!
//! Clean content is procedural and standardized to a common mean and
//! contrast, so absolute distortion strength stays recoverable from pixels.
//! Each of the seven families has five strictly increasing strengths. The
//! proxy score of a sample is a per-type, per-level mean plus Gaussian
//! jitter keyed by the content seed.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, salt, Rng};

pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("unknown distortion family `{0}`")]
    UnknownFamily(String),
    #[error("level {0} outside 1..=5")]
    Level(u8),
    #[error("patch size {0}x{1} is below the 8x8 minimum")]
    PatchSize(usize, usize),
    #[error("a graph batch needs at least 2 samples, got {0}")]
    BatchSize(usize),
    #[error("triplet sampling needs at least 2 distortion types, got {0}")]
    TooFewTypes(usize),
    #[error("type id {0} is not configured")]
    UnknownType(usize),
    #[error("strengths must strictly increase with level: {0:?}")]
    NonMonotone([f64; LEVELS]),
    #[error("level means must strictly decrease with level: {0:?}")]
    MeansNotDecreasing([f64; LEVELS]),
}

/// An `height × width × 3` image, row-major, channels last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Patch {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copy of the `h × w` window with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Patch {
        assert!(y + h <= self.height && x + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(h * w * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Patch {
            height: h,
            width: w,
            data,
        }
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(reference: &Patch, distorted: &Patch) -> f64 {
    let mse = reference
        .data
        .iter()
        .zip(&distorted.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * libm::log10(mse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Blur,
    AdditiveNoise,
    ImpulseNoise,
    BlockQuantize,
    Brightness,
    Contrast,
    Pixelate,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Blur,
        Family::AdditiveNoise,
        Family::ImpulseNoise,
        Family::BlockQuantize,
        Family::Brightness,
        Family::Contrast,
        Family::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Blur => "blur",
            Family::AdditiveNoise => "additive-noise",
            Family::ImpulseNoise => "impulse-noise",
            Family::BlockQuantize => "block-quantize",
            Family::Brightness => "brightness",
            Family::Contrast => "contrast",
            Family::Pixelate => "pixelate",
        }
    }

    /// Default per-level strengths, in the family's natural unit: Gaussian
    /// sigma in pixels, noise std, impulse probability, quantization step,
    /// brightness offset, contrast reduction, block side in pixels.
    pub fn default_strengths(self) -> [f64; LEVELS] {
        match self {
            Family::Blur => [0.6, 1.0, 1.5, 2.1, 3.0],
            Family::AdditiveNoise => [0.03, 0.06, 0.10, 0.15, 0.22],
            Family::ImpulseNoise => [0.01, 0.03, 0.06, 0.10, 0.16],
            Family::BlockQuantize => [1.0 / 15.0, 1.0 / 9.0, 1.0 / 6.0, 1.0 / 4.0, 1.0 / 2.0],
            Family::Brightness => [0.08, 0.16, 0.24, 0.32, 0.40],
            Family::Contrast => [0.2, 0.35, 0.5, 0.65, 0.8],
            Family::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SynthError::UnknownFamily(s.into()))
    }
}

/// One configured distortion type.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSpec {
    pub type_id: usize,
    pub family: Family,
    strengths: [f64; LEVELS],
}

impl DistortionSpec {
    pub fn new(type_id: usize, family: Family, strengths: [f64; LEVELS]) -> Result<Self, SynthError> {
        if strengths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SynthError::NonMonotone(strengths));
        }
        Ok(Self {
            type_id,
            family,
            strengths,
        })
    }

    pub fn standard(type_id: usize, family: Family) -> Self {
        Self::new(type_id, family, family.default_strengths()).expect("defaults are monotone")
    }

    pub fn strengths(&self) -> &[f64; LEVELS] {
        &self.strengths
    }

    pub fn strength(&self, level: u8) -> Result<f64, SynthError> {
        check_level(level)?;
        Ok(self.strengths[level as usize - 1])
    }
}

fn check_level(level: u8) -> Result<(), SynthError> {
    if (1..=LEVELS as u8).contains(&level) {
        Ok(())
    } else {
        Err(SynthError::Level(level))
    }
}

/// Procedural clean content: a smooth colour gradient, a few flat
/// rectangles and band-limited noise, standardized to mean 0.5 and standard
/// deviation 0.18 before clamping.
pub fn make_clean_patch(content_seed: u64, height: usize, width: usize) -> Result<Patch, SynthError> {
    if height < 8 || width < 8 {
        return Err(SynthError::PatchSize(height, width));
    }
    let mut r = rng::stream(content_seed, salt::CONTENT);
    let mut p = Patch::filled(height, width, 0.0);

    let angle = r.random_range(0.0..core::f64::consts::TAU);
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));
    let c0: [f64; 3] = [r.random(), r.random(), r.random()];
    let c1: [f64; 3] = [r.random(), r.random(), r.random()];
    let diag = (height + width) as f64;
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + ((x as f64 - width as f64 / 2.0) * dx + (y as f64 - height as f64 / 2.0) * dy) / diag;
            for c in 0..3 {
                p.set(y, x, c, c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }

    let rects = r.random_range(2..=5);
    for _ in 0..rects {
        let h = r.random_range(height / 8..=height / 2).max(2);
        let w = r.random_range(width / 8..=width / 2).max(2);
        let y0 = r.random_range(0..=height - h);
        let x0 = r.random_range(0..=width - w);
        let col: [f64; 3] = [r.random(), r.random(), r.random()];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for (c, cv) in col.iter().enumerate() {
                    p.set(y, x, c, *cv);
                }
            }
        }
    }

    // band-limited noise: a coarse random grid upsampled bilinearly
    let cell = 4usize;
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid: Vec<f64> = (0..gh * gw * 3)
        .map(|_| StandardNormal.sample(&mut r))
        .collect::<Vec<f64>>();
    let amp = 0.35;
    for y in 0..height {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy as usize, fy - libm::floor(fy));
        for x in 0..width {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx as usize, fx - libm::floor(fx));
            for c in 0..3 {
                let g = |yy: usize, xx: usize| grid[(yy * gw + xx) * 3 + c];
                let v = g(iy, ix) * (1.0 - ty) * (1.0 - tx)
                    + g(iy, ix + 1) * (1.0 - ty) * tx
                    + g(iy + 1, ix) * ty * (1.0 - tx)
                    + g(iy + 1, ix + 1) * ty * tx;
                let idx = (y * width + x) * 3 + c;
                p.data[idx] += amp * v;
            }
        }
    }

    let n = p.data.len() as f64;
    let mean = p.data.iter().sum::<f64>() / n;
    let var = p.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 0.18 / libm::sqrt(var.max(1e-12));
    for v in &mut p.data {
        *v = 0.5 + (*v - mean) * scale;
    }
    p.clamp();
    Ok(p)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
fn gaussian_blur(p: &Patch, sigma: f64) -> Patch {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (p.height as isize, p.width as isize);
    let mut tmp = p.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w - 1) as usize;
                    acc += kv * p.get(y, sx, c);
                }
                tmp.set(y, x, c, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h - 1) as usize;
                    acc += kv * tmp.get(sy, x, c);
                }
                out.set(y, x, c, acc);
            }
        }
    }
    out
}

fn pixelate(p: &Patch, block: usize) -> Patch {
    let mut out = p.clone();
    for by in (0..p.height).step_by(block) {
        for bx in (0..p.width).step_by(block) {
            let ys = by..(by + block).min(p.height);
            let xs = bx..(bx + block).min(p.width);
            let count = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mut s = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += p.get(y, x, c);
                    }
                }
                for y in ys.clone() {
                    for x in xs.clone() {
                        out.set(y, x, c, s / count);
                    }
                }
            }
        }
    }
    out
}

/// Applies `spec` at `level` to `patch`. Stochastic families draw from a
/// stream keyed by `noise_seed`; the result is clamped to `[0, 1]`.
pub fn apply_distortion(
    patch: &Patch,
    spec: &DistortionSpec,
    level: u8,
    noise_seed: u64,
) -> Result<Patch, SynthError> {
    let s = spec.strength(level)?;
    let mut r = rng::stream(noise_seed, salt::NOISE);
    let mut out = match spec.family {
        Family::Blur => gaussian_blur(patch, s),
        Family::AdditiveNoise => {
            let normal = Normal::new(0.0, s).expect("finite std");
            let mut out = patch.clone();
            for v in &mut out.data {
                *v += normal.sample(&mut r);
            }
            out
        }
        Family::ImpulseNoise => {
            let mut out = patch.clone();
            for y in 0..patch.height {
                for x in 0..patch.width {
                    let u: f64 = r.random();
                    if u < s {
                        let v = if r.random::<bool>() { 1.0 } else { 0.0 };
                        for c in 0..3 {
                            out.set(y, x, c, v);
                        }
                    }
                }
            }
            out
        }
        Family::BlockQuantize => {
            let mut out = patch.clone();
            for v in &mut out.data {
                *v = libm::round(*v / s) * s;
            }
            out
        }
        Family::Brightness => {
            let mut out = patch.clone();
            for v in &mut out.data {
                *v += s;
            }
            out
        }
        Family::Contrast => {
            let mut out = patch.clone();
            for v in &mut out.data {
                *v = 0.5 + (*v - 0.5) * (1.0 - s);
            }
            out
        }
        Family::Pixelate => pixelate(patch, libm::round(s) as usize),
    };
    out.clamp();
    Ok(out)
}

/// Per-type level-to-mean tables plus Gaussian jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyMos {
    means: Vec<[f64; LEVELS]>,
    jitter_std: f64,
}

impl ProxyMos {
    /// `m(l) = 5.0 − 0.8·(l − 1)` for every type, jitter std 0.2.
    pub fn standard(types: usize) -> Self {
        let table = core::array::from_fn(|i| 5.0 - 0.8 * i as f64);
        Self {
            means: vec![table; types],
            jitter_std: 0.2,
        }
    }

    pub fn new(means: Vec<[f64; LEVELS]>, jitter_std: f64) -> Result<Self, SynthError> {
        for m in &means {
            if m.windows(2).any(|w| !(w[0] > w[1])) {
                return Err(SynthError::MeansNotDecreasing(*m));
            }
        }
        Ok(Self { means, jitter_std })
    }

    pub fn jitter_std(&self) -> f64 {
        self.jitter_std
    }

    pub fn mean(&self, type_id: usize, level: u8) -> Result<f64, SynthError> {
        check_level(level)?;
        let table = self.means.get(type_id).ok_or(SynthError::UnknownType(type_id))?;
        Ok(table[level as usize - 1])
    }

    /// The jitter term for a content seed, before scaling by the std.
    pub fn unit_jitter(content_seed: u64) -> f64 {
        StandardNormal.sample(&mut rng::stream(content_seed, salt::MOS))
    }

    /// `clamp(m(type, level) + η, 1, 5)` with `η ~ N(0, jitter²)` keyed by
    /// the content seed.
    pub fn score(&self, type_id: usize, level: u8, content_seed: u64) -> Result<f64, SynthError> {
        let eta = self.jitter_std * Self::unit_jitter(content_seed);
        self.score_with_jitter(type_id, level, eta)
    }

    pub fn score_with_jitter(&self, type_id: usize, level: u8, eta: f64) -> Result<f64, SynthError> {
        Ok((self.mean(type_id, level)? + eta).clamp(1.0, 5.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSample {
    pub patch: Patch,
    pub type_id: usize,
    pub level: u8,
    pub proxy_mos: f64,
    pub content_seed: u64,
}

/// Which half of the seed space a draw comes from. Held-out content seeds
/// have the top bit set, training seeds do not, so the two never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSpace {
    Train,
    HeldOut,
}

impl SeedSpace {
    fn draw(self, r: &mut Rng) -> u64 {
        let raw: u64 = r.random::<u64>() >> 1;
        match self {
            SeedSpace::Train => raw,
            SeedSpace::HeldOut => raw | (1 << 63),
        }
    }

    pub fn contains(self, seed: u64) -> bool {
        (seed >> 63 == 1) == (self == SeedSpace::HeldOut)
    }
}

/// The configured distortion types, patch size and score model.
#[derive(Debug, Clone, PartialEq)]
pub struct Synth {
    specs: Vec<DistortionSpec>,
    patch_size: usize,
    mos: ProxyMos,
}

impl Synth {
    pub fn new(specs: Vec<DistortionSpec>, patch_size: usize, mos: ProxyMos) -> Result<Self, SynthError> {
        if patch_size < 8 {
            return Err(SynthError::PatchSize(patch_size, patch_size));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.type_id != i {
                return Err(SynthError::UnknownType(s.type_id));
            }
            mos.mean(i, 1)?;
        }
        Ok(Self {
            specs,
            patch_size,
            mos,
        })
    }

    /// The given families with default strengths and score tables.
    pub fn standard(families: &[Family], patch_size: usize) -> Result<Self, SynthError> {
        let specs = families
            .iter()
            .enumerate()
            .map(|(i, f)| DistortionSpec::standard(i, *f))
            .collect();
        Self::new(specs, patch_size, ProxyMos::standard(families.len()))
    }

    pub fn specs(&self) -> &[DistortionSpec] {
        &self.specs
    }

    pub fn num_types(&self) -> usize {
        self.specs.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn mos(&self) -> &ProxyMos {
        &self.mos
    }

    pub fn spec(&self, type_id: usize) -> Result<&DistortionSpec, SynthError> {
        self.specs.get(type_id).ok_or(SynthError::UnknownType(type_id))
    }

    /// Deterministic sample for `(type, level, content_seed)` at `size × size`.
    pub fn sample_sized(
        &self,
        type_id: usize,
        level: u8,
        content_seed: u64,
        size: usize,
    ) -> Result<DistortionSample, SynthError> {
        let spec = self.spec(type_id)?;
        let clean = make_clean_patch(content_seed, size, size)?;
        let patch = apply_distortion(&clean, spec, level, rng::derive(content_seed, salt::NOISE))?;
        Ok(DistortionSample {
            patch,
            type_id,
            level,
            proxy_mos: self.mos.score(type_id, level, content_seed)?,
            content_seed,
        })
    }

    pub fn sample(&self, type_id: usize, level: u8, content_seed: u64) -> Result<DistortionSample, SynthError> {
        self.sample_sized(type_id, level, content_seed, self.patch_size)
    }

    fn distinct_seeds(n: usize, space: SeedSpace, taken: &mut BTreeSet<u64>, r: &mut Rng) -> Vec<u64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = space.draw(r);
            if taken.insert(s) {
                out.push(s);
            }
        }
        out
    }

    /// Round-robin levels for the first five slots, uniform afterwards,
    /// shuffled.
    fn batch_levels(n: usize, r: &mut Rng) -> Vec<u8> {
        let mut levels: Vec<u8> = (0..n)
            .map(|i| {
                if i < LEVELS {
                    i as u8 + 1
                } else {
                    r.random_range(1..=LEVELS as u8)
                }
            })
            .collect();
        levels.shuffle(r);
        levels
    }

    fn type_batch_excluding(
        &self,
        type_id: usize,
        n: usize,
        space: SeedSpace,
        taken: &mut BTreeSet<u64>,
        r: &mut Rng,
    ) -> Result<Vec<DistortionSample>, SynthError> {
        if n < 2 {
            return Err(SynthError::BatchSize(n));
        }
        self.spec(type_id)?;
        let levels = Self::batch_levels(n, r);
        let seeds = Self::distinct_seeds(n, space, taken, r);
        levels
            .into_iter()
            .zip(seeds)
            .map(|(l, s)| self.sample(type_id, l, s))
            .collect()
    }

    /// `n` samples of one type covering every level when `n ≥ 5`, with
    /// distinct content seeds.
    pub fn sample_type_batch(
        &self,
        type_id: usize,
        n: usize,
        space: SeedSpace,
        r: &mut Rng,
    ) -> Result<Vec<DistortionSample>, SynthError> {
        self.type_batch_excluding(type_id, n, space, &mut BTreeSet::new(), r)
    }

    /// Anchor and positive share a uniformly drawn type and have disjoint
    /// content seeds; the negative type is uniform over the other types.
    pub fn sample_triplet(&self, n: usize, space: SeedSpace, r: &mut Rng) -> Result<Triplet, SynthError> {
        let t = self.num_types();
        if t < 2 {
            return Err(SynthError::TooFewTypes(t));
        }
        let anchor_type = r.random_range(0..t);
        let mut negative_type = r.random_range(0..t - 1);
        if negative_type >= anchor_type {
            negative_type += 1;
        }
        let mut taken = BTreeSet::new();
        let anchor = self.type_batch_excluding(anchor_type, n, space, &mut taken, r)?;
        let positive = self.type_batch_excluding(anchor_type, n, space, &mut taken, r)?;
        let negative = self.type_batch_excluding(negative_type, n, space, &mut taken, r)?;
        Ok(Triplet {
            anchor,
            positive,
            negative,
        })
    }

    /// `n` samples with independently uniform type and level.
    pub fn sample_mixed_batch(
        &self,
        n: usize,
        space: SeedSpace,
        r: &mut Rng,
    ) -> Result<Vec<DistortionSample>, SynthError> {
        self.sample_mixed_sized(n, self.patch_size, space, r)
    }

    /// [`Self::sample_mixed_batch`] at `size × size`.
    pub fn sample_mixed_sized(
        &self,
        n: usize,
        size: usize,
        space: SeedSpace,
        r: &mut Rng,
    ) -> Result<Vec<DistortionSample>, SynthError> {
        let seeds = Self::distinct_seeds(n, space, &mut BTreeSet::new(), r);
        seeds
            .into_iter()
            .map(|s| {
                let t = r.random_range(0..self.num_types());
                let l = r.random_range(1..=LEVELS as u8);
                self.sample_sized(t, l, s, size)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Vec<DistortionSample>,
    pub positive: Vec<DistortionSample>,
    pub negative: Vec<DistortionSample>,
}
