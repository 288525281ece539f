//! Synthetic rainfall sequences, intensity normalization and the RSEQ file
//! format.
//!
//! RSEQ layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `RSEQ` |
//! | 4     | version, u32 (currently 1) |
//! | 24    | frames, height, width, u64 each |
//! | 4     | timestep in minutes, f32 |
//! | 4·F·H·W | values in mm/h, f32, row-major `(frame, row, col)` |

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error as ThisError;

pub const RSEQ_MAGIC: [u8; 4] = *b"RSEQ";
pub const RSEQ_VERSION: u32 = 1;
const RSEQ_HEADER: usize = 4 + 4 + 24 + 4;

/// Frame cadence of the radar products the model targets.
pub const DEFAULT_TIMESTEP_MINUTES: f32 = 5.0;

#[derive(Debug, ThisError)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated file: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("invalid header: {0}")]
    Header(String),
}

/// A `(frames, height, width)` rain-rate field sequence in mm/h.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarSequence {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
    pub timestep_minutes: f32,
}

impl RadarSequence {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * height * width {
            return Err(Error::Param(format!(
                "{} values for a {frames}x{height}x{width} sequence",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Param(format!("rain rate {v} is negative or not finite")));
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
            timestep_minutes: DEFAULT_TIMESTEP_MINUTES,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            values: vec![0.0; frames * height * width],
            timestep_minutes: DEFAULT_TIMESTEP_MINUTES,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[f * n..(f + 1) * n]
    }

    pub fn at(&self, f: usize, row: usize, col: usize) -> f32 {
        self.values[(f * self.height + row) * self.width + col]
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::Param(format!(
                "window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let n = self.height * self.width;
        Ok(Self {
            frames: len,
            height: self.height,
            width: self.width,
            values: self.values[start * n..(start + len) * n].to_vec(),
            timestep_minutes: self.timestep_minutes,
        })
    }

    /// Repeats the last of the first `cond_frames` frames `lead_frames` times.
    pub fn persistence(&self, cond_frames: usize, lead_frames: usize) -> Result<Self> {
        if cond_frames == 0 || cond_frames > self.frames {
            return Err(Error::Param(format!(
                "cannot persist frame {cond_frames} of a {}-frame sequence",
                self.frames
            )));
        }
        let last = self.frame(cond_frames - 1);
        let mut values = Vec::with_capacity(last.len() * lead_frames);
        for _ in 0..lead_frames {
            values.extend_from_slice(last);
        }
        Ok(Self {
            frames: lead_frames,
            height: self.height,
            width: self.width,
            values,
            timestep_minutes: self.timestep_minutes,
        })
    }

    /// Area-mean rain rate per frame.
    pub fn area_means(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|f| self.frame(f).iter().map(|&v| v as f64).sum::<f64>() / (self.height * self.width) as f64)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RSEQ_HEADER + 4 * self.values.len());
        out.extend_from_slice(&RSEQ_MAGIC);
        out.extend_from_slice(&RSEQ_VERSION.to_le_bytes());
        for d in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.timestep_minutes.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated {
                expected: RSEQ_HEADER,
                actual: bytes.len(),
            }
            .into());
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != RSEQ_MAGIC {
            return Err(FormatError::BadMagic {
                expected: RSEQ_MAGIC,
                found,
            }
            .into());
        }
        if bytes.len() < RSEQ_HEADER {
            return Err(FormatError::Truncated {
                expected: RSEQ_HEADER,
                actual: bytes.len(),
            }
            .into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != RSEQ_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: RSEQ_VERSION,
            }
            .into());
        }
        let dim = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let (f, h, w) = (dim(0), dim(1), dim(2));
        let count = f
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&c| c <= (usize::MAX / 4) as u64)
            .ok_or_else(|| FormatError::Header(format!("dimensions {f}x{h}x{w} overflow")))?
            as usize;
        let timestep = f32::from_le_bytes(bytes[32..36].try_into().unwrap());
        let expected = RSEQ_HEADER + 4 * count;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        if bytes.len() > expected {
            return Err(FormatError::TrailingBytes {
                extra: bytes.len() - expected,
            }
            .into());
        }
        let values = bytes[RSEQ_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut seq = Self::new(f as usize, h as usize, w as usize, values)?;
        seq.timestep_minutes = timestep;
        Ok(seq)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Ranges the synthetic storm generator draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub count: usize,
    /// Peak rain rate, mm/h.
    pub amplitude: (f64, f64),
    /// Gaussian standard deviation along each principal axis, px.
    pub radius: (f64, f64),
    /// Advection speed, px/frame.
    pub speed: (f64, f64),
    /// Direction of motion in degrees, measured from the +column axis
    /// towards +row.
    pub heading: (f64, f64),
    /// Per-frame log growth is drawn from `[-growth, growth]`.
    pub growth: f64,
    /// Standard deviation of additive noise, mm/h, clipped at zero.
    pub noise: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            count: 3,
            amplitude: (2.0, 20.0),
            radius: (1.5, 3.5),
            speed: (0.5, 1.5),
            heading: (0.0, 360.0),
            growth: 0.05,
            noise: 0.0,
        }
    }
}

impl BlobParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("amplitude", self.amplitude),
            ("radius", self.radius),
            ("speed", self.speed),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Param(format!("{name} range ({lo}, {hi}) must be ordered and non-negative")));
            }
        }
        if self.count > 0 && self.radius.0 <= 0.0 {
            return Err(Error::Param("blob radius must be positive".into()));
        }
        if !(self.heading.0 <= self.heading.1) {
            return Err(Error::Param("heading range must be ordered".into()));
        }
        if !(self.growth >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Param("growth and noise must be non-negative".into()));
        }
        Ok(())
    }
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Periodic offset of `x` from `c` in `(-size/2, size/2]`.
fn wrap_offset(x: f64, c: f64, size: f64) -> f64 {
    let d = (x - c).rem_euclid(size);
    if d > size / 2.0 {
        d - size
    } else {
        d
    }
}

/// Advected anisotropic Gaussian storm cells on a periodic domain.
pub fn gen_synthetic(
    params: &BlobParams,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<RadarSequence> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Blob {
        row: f64,
        col: f64,
        amp: f64,
        r_major: f64,
        r_minor: f64,
        cos_o: f64,
        sin_o: f64,
        v_row: f64,
        v_col: f64,
        growth: f64,
    }
    let blobs: Vec<Blob> = (0..params.count)
        .map(|_| {
            let speed = draw(&mut rng, params.speed);
            let heading = draw(&mut rng, params.heading).to_radians();
            let orient: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Blob {
                row: rng.random_range(0.0..height as f64),
                col: rng.random_range(0.0..width as f64),
                amp: draw(&mut rng, params.amplitude),
                r_major: draw(&mut rng, params.radius),
                r_minor: draw(&mut rng, params.radius),
                cos_o: orient.cos(),
                sin_o: orient.sin(),
                v_row: speed * heading.sin(),
                v_col: speed * heading.cos(),
                growth: if params.growth > 0.0 {
                    rng.random_range(-params.growth..params.growth)
                } else {
                    0.0
                },
            }
        })
        .collect();
    let noise = (params.noise > 0.0).then(|| Normal::new(0.0, params.noise).unwrap());

    let mut values = Vec::with_capacity(frames * height * width);
    for t in 0..frames {
        let tf = t as f64;
        for r in 0..height {
            for c in 0..width {
                let mut v = 0.0;
                for b in &blobs {
                    let dr = wrap_offset(r as f64, b.row + b.v_row * tf, height as f64);
                    let dc = wrap_offset(c as f64, b.col + b.v_col * tf, width as f64);
                    let u = dc * b.cos_o + dr * b.sin_o;
                    let w = -dc * b.sin_o + dr * b.cos_o;
                    let q = (u / b.r_major).powi(2) + (w / b.r_minor).powi(2);
                    v += b.amp * (b.growth * tf).exp() * (-0.5 * q).exp();
                }
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                values.push(v.max(0.0) as f32);
            }
        }
    }
    RadarSequence::new(frames, height, width, values)
}

/// Log compression of rain rate onto `[-1, 1]`:
/// `v -> 2 ln(1 + v) / ln(1 + cap) - 1`, clipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    cap_mmh: f64,
    log_cap: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(32.0).unwrap()
    }
}

impl Normalizer {
    pub fn new(cap_mmh: f64) -> Result<Self> {
        if !(cap_mmh > 0.0 && cap_mmh.is_finite()) {
            return Err(Error::Param(format!("normalization cap {cap_mmh} must be positive")));
        }
        Ok(Self {
            cap_mmh,
            log_cap: cap_mmh.ln_1p(),
        })
    }

    pub fn cap(&self) -> f64 {
        self.cap_mmh
    }

    pub fn forward(&self, v: f64) -> f64 {
        (2.0 * v.max(0.0).ln_1p() / self.log_cap - 1.0).clamp(-1.0, 1.0)
    }

    pub fn inverse(&self, y: f64) -> f64 {
        let y = y.clamp(-1.0, 1.0);
        ((y + 1.0) * 0.5 * self.log_cap).exp_m1().max(0.0)
    }

    /// `(F, H, W)` tensor of normalized values.
    pub fn normalize<E: Element>(&self, seq: &RadarSequence) -> Tensor<E> {
        let data = seq.values().iter().map(|&v| E::from_f64(self.forward(v as f64))).collect();
        Tensor::from_vec(&[seq.frames(), seq.height(), seq.width()], data).expect("shape matches")
    }

    /// Inverse of [`Normalizer::normalize`] for an `(F, H, W)` tensor.
    pub fn denormalize<E: Element>(&self, t: &Tensor<E>) -> Result<RadarSequence> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Param(format!("expected (F, H, W), got {s:?}")));
        }
        let values = t.data().iter().map(|v| self.inverse(v.as_f64()) as f32).collect();
        RadarSequence::new(s[0], s[1], s[2], values)
    }
}

/// Stacks the normalized sequences into a `(B, F, H, W)` batch.
pub fn stack_normalized<E: Element>(seqs: &[&RadarSequence], norm: &Normalizer) -> Result<Tensor<E>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Param("empty batch".into()))?;
    let (f, h, w) = (first.frames(), first.height(), first.width());
    let mut data = Vec::with_capacity(seqs.len() * f * h * w);
    for s in seqs {
        if (s.frames(), s.height(), s.width()) != (f, h, w) {
            return Err(Error::Param("sequences in a batch must share dimensions".into()));
        }
        data.extend(s.values().iter().map(|&v| E::from_f64(norm.forward(v as f64))));
    }
    Ok(Tensor::from_vec(&[seqs.len(), f, h, w], data)?)
}
