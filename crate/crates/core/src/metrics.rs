//! Forecast verification scores and latent-token similarity analysis.
//!
//! Fields are row-major `f64` slices in mm/h. Scores accumulate in row-major
//! pixel order so results are reproducible bit-for-bit.

use crate::data::RadarSequence;
use crate::tensor::TensorError;
use crate::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::fmt::Write as _;
use std::path::Path;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        }
        .into());
    }
    Ok(())
}

/// Event counts at one threshold; an event is a value `>= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn new(pred: &[f64], obs: &[f64], threshold: f64) -> Result<Self> {
        same_len("contingency", pred, obs)?;
        let mut t = Self::default();
        for (&p, &o) in pred.iter().zip(obs) {
            match (p >= threshold, o >= threshold) {
                (true, true) => t.hits += 1,
                (false, true) => t.misses += 1,
                (true, false) => t.false_alarms += 1,
                (false, false) => t.correct_negatives += 1,
            }
        }
        Ok(t)
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    /// `hits / (hits + misses + false alarms)`, 0 when nothing happened.
    pub fn csi(&self) -> f64 {
        let d = self.hits + self.misses + self.false_alarms;
        if d == 0 {
            0.0
        } else {
            self.hits as f64 / d as f64
        }
    }
}

/// Critical success index at `threshold` (> 0).
pub fn csi(pred: &[f64], obs: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Param(format!("CSI threshold must be positive, got {threshold}")));
    }
    Ok(ContingencyTable::new(pred, obs, threshold)?.csi())
}

/// Half-sample-symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Event counts in every `window × window` neighborhood, borders reflected.
fn neighborhood_counts(field: &[f64], height: usize, width: usize, threshold: f64, window: usize) -> Vec<u32> {
    let events: Vec<u32> = field.iter().map(|&v| u32::from(v >= threshold)).collect();
    let r = (window / 2) as isize;
    // separable box sums on integers stay exact
    let mut rows = vec![0u32; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0;
            for dx in -r..=r {
                s += events[y * width + reflect(x as isize + dx, width)];
            }
            rows[y * width + x] = s;
        }
    }
    let mut out = vec![0u32; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0;
            for dy in -r..=r {
                s += rows[reflect(y as isize + dy, height) * width + x];
            }
            out[y * width + x] = s;
        }
    }
    out
}

/// Fractions skill score with a `window × window` box neighborhood.
///
/// Returns 1 when neither field has an event (both fraction fields vanish).
pub fn fss(pred: &[f64], obs: &[f64], height: usize, width: usize, threshold: f64, window: usize) -> Result<f64> {
    same_len("fss", pred, obs)?;
    if pred.len() != height * width {
        return Err(TensorError::DataLength {
            shape: vec![height, width],
            len: pred.len(),
        }
        .into());
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::Param(format!("FSS window must be odd and positive, got {window}")));
    }
    let area = (window * window) as f64;
    let pf = neighborhood_counts(pred, height, width, threshold, window);
    let po = neighborhood_counts(obs, height, width, threshold, window);
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &b) in pf.iter().zip(&po) {
        let (fa, fb) = (a as f64 / area, b as f64 / area);
        num += (fa - fb) * (fa - fb);
        den += fa * fa + fb * fb;
    }
    Ok(if den == 0.0 { 1.0 } else { 1.0 - num / den })
}

/// Ensemble CRPS averaged over pixels:
/// `mean_m |x_m - y| - 1/(2 m²) Σ_i Σ_j |x_i - x_j|`.
pub fn crps_ensemble(members: &[&[f64]], obs: &[f64]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::Param("CRPS needs at least one ensemble member".into()));
    }
    for m in members {
        same_len("crps_ensemble", m, obs)?;
    }
    let m = members.len() as f64;
    let mut total = 0.0;
    for (k, &y) in obs.iter().enumerate() {
        let mut skill = 0.0;
        for x in members {
            skill += (x[k] - y).abs();
        }
        let mut spread = 0.0;
        for xi in members {
            for xj in members {
                spread += (xi[k] - xj[k]).abs();
            }
        }
        total += skill / m - spread / (2.0 * m * m);
    }
    Ok(total / obs.len().max(1) as f64)
}

/// Radially binned power spectrum of a square field.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSpectrum {
    /// Domain size in pixels.
    pub size: usize,
    /// Mean power per integer wavenumber ring `0..=k_max`.
    pub power: Vec<f64>,
    /// Summed power per ring; totals sum to `Σ field²`.
    pub total: Vec<f64>,
    /// Number of Fourier coefficients per ring.
    pub count: Vec<usize>,
}

impl RadialSpectrum {
    /// `size / k`; infinite for the DC ring.
    pub fn wavelength(&self, k: usize) -> f64 {
        if k == 0 {
            f64::INFINITY
        } else {
            self.size as f64 / k as f64
        }
    }

    /// `(wavelength, mean power)` for every non-empty ring.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        (0..self.power.len())
            .filter(|&k| self.count[k] > 0)
            .map(|k| (self.wavelength(k), self.power[k]))
            .collect()
    }
}

/// Squared DFT magnitudes divided by `H·W`, row-major over `(ky, kx)`.
pub fn power_spectrum_2d(field: &[f64], size: usize) -> Result<Vec<f64>> {
    if field.len() != size * size {
        return Err(TensorError::DataLength {
            shape: vec![size, size],
            len: field.len(),
        }
        .into());
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let mut buf: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(size) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); size];
    for x in 0..size {
        for y in 0..size {
            col[y] = buf[y * size + x];
        }
        fft.process(&mut col);
        for y in 0..size {
            buf[y * size + x] = col[y];
        }
    }
    let norm = (size * size) as f64;
    Ok(buf.iter().map(|c| c.norm_sqr() / norm).collect())
}

/// Signed frequency of DFT index `i` on `n` points.
fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Averages a 2-D power array into unit-width rings of radius
/// `round(sqrt(kx² + ky²))`.
pub fn radial_bin(power2d: &[f64], size: usize) -> RadialSpectrum {
    let half = (size / 2) as f64;
    let k_max = (2.0 * half * half).sqrt().round() as usize;
    let mut total = vec![0.0; k_max + 1];
    let mut count = vec![0usize; k_max + 1];
    for y in 0..size {
        let fy = signed_freq(y, size);
        for x in 0..size {
            let fx = signed_freq(x, size);
            let k = (fx * fx + fy * fy).sqrt().round() as usize;
            total[k] += power2d[y * size + x];
            count[k] += 1;
        }
    }
    let power = total
        .iter()
        .zip(&count)
        .map(|(&t, &c)| if c == 0 { 0.0 } else { t / c as f64 })
        .collect();
    RadialSpectrum {
        size,
        power,
        total,
        count,
    }
}

/// Radially averaged power spectrum of a `size × size` field.
pub fn radial_psd(field: &[f64], size: usize) -> Result<RadialSpectrum> {
    Ok(radial_bin(&power_spectrum_2d(field, size)?, size))
}

/// Pearson correlation, standard-deviation ratio and centered RMS difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorStats {
    pub corr: f64,
    pub std_ratio: f64,
    pub centered_rms: f64,
    pub std_pred: f64,
    pub std_obs: f64,
}

/// Population statistics of two equal-length series.
pub fn taylor_stats(pred: &[f64], obs: &[f64]) -> Result<TaylorStats> {
    same_len("taylor_stats", pred, obs)?;
    if pred.is_empty() {
        return Err(Error::Param("Taylor statistics need a non-empty series".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mo = obs.iter().sum::<f64>() / n;
    let (mut spp, mut soo, mut spo, mut sd) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &o) in pred.iter().zip(obs) {
        let (dp, d_o) = (p - mp, o - mo);
        spp += dp * dp;
        soo += d_o * d_o;
        spo += dp * d_o;
        sd += (dp - d_o) * (dp - d_o);
    }
    if spp == 0.0 || soo == 0.0 {
        return Err(Error::Param(
            "correlation undefined: a series has zero variance".into(),
        ));
    }
    let (sp, so) = ((spp / n).sqrt(), (soo / n).sqrt());
    Ok(TaylorStats {
        corr: spo / (spp.sqrt() * soo.sqrt()),
        std_ratio: sp / so,
        centered_rms: (sd / n).sqrt(),
        std_pred: sp,
        std_obs: so,
    })
}

/// Cosine similarity matrix between two token sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Set when any token had zero norm; its entries are 0.
    pub zero_norm: bool,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Mean over all entries.
    pub fn matrix_mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Mean of the paired entries `(i, i)`: token `i` of one set against
    /// token `i` of the other.
    pub fn global_mean(&self) -> f64 {
        let d = self.diagonal();
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }

    /// Entries `(i, i)` for `i < min(rows, cols)`.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| self.get(i, j).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// `cos(a_i, b_j)` for tokens stored as rows of width `dim`.
pub fn token_similarity(a: &[f64], b: &[f64], dim: usize) -> Result<SimilarityMatrix> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Param(format!(
            "token sets of {} and {} values do not split into width {dim}",
            a.len(),
            b.len()
        )));
    }
    let norms = |x: &[f64]| -> Vec<f64> {
        x.chunks_exact(dim)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let (na, nb) = (norms(a), norms(b));
    let (rows, cols) = (na.len(), nb.len());
    let mut values = Vec::with_capacity(rows * cols);
    let mut zero_norm = false;
    for i in 0..rows {
        let ai = &a[i * dim..(i + 1) * dim];
        for j in 0..cols {
            if na[i] == 0.0 || nb[j] == 0.0 {
                zero_norm = true;
                values.push(0.0);
                continue;
            }
            let bj = &b[j * dim..(j + 1) * dim];
            let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
            values.push((dot / (na[i] * nb[j])).clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix {
        rows,
        cols,
        values,
        zero_norm,
    })
}

/// How `(C, F, N)` tokens are grouped before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    /// One vector per patch position, concatenated over frames: `C × C`.
    Spatial,
    /// One vector per frame, concatenated over patches: `F × F`.
    Temporal,
}

/// Regroups `(C, F, N)` tokens into row vectors for [`token_similarity`];
/// returns the rows and their width.
pub fn token_rows(tokens: &[f64], channels: usize, frames: usize, dim: usize, mode: SimilarityMode) -> Result<(Vec<f64>, usize)> {
    if tokens.len() != channels * frames * dim {
        return Err(TensorError::DataLength {
            shape: vec![channels, frames, dim],
            len: tokens.len(),
        }
        .into());
    }
    match mode {
        SimilarityMode::Spatial => Ok((tokens.to_vec(), frames * dim)),
        SimilarityMode::Temporal => {
            let mut out = Vec::with_capacity(tokens.len());
            for f in 0..frames {
                for c in 0..channels {
                    let s = (c * frames + f) * dim;
                    out.extend_from_slice(&tokens[s..s + dim]);
                }
            }
            Ok((out, channels * dim))
        }
    }
}

/// Verification settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub fss_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.06, 1.0, 6.3],
            fss_window: 3,
        }
    }
}

/// One verified forecast: ensemble members and the observed sequence, all
/// with the same number of lead frames.
#[derive(Debug, Clone)]
pub struct ForecastCase {
    pub members: Vec<RadarSequence>,
    pub truth: RadarSequence,
}

/// Per-lead-time and aggregate scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    pub fss_window: usize,
    pub cases: usize,
    pub members: usize,
    /// `csi[k][lead]` at `thresholds[k]`, on the ensemble mean.
    pub csi: Vec<Vec<f64>>,
    /// `fss[k][lead]` at `thresholds[k]`, on the ensemble mean.
    pub fss: Vec<Vec<f64>>,
    pub crps: Vec<f64>,
    /// Mean ring power of forecast members and of observations.
    pub spectrum_pred: Option<RadialSpectrum>,
    pub spectrum_obs: Option<RadialSpectrum>,
    /// Area-mean rainfall of the ensemble mean against observations; `None`
    /// when either series is constant.
    pub taylor: Option<TaylorStats>,
    /// Named similarity matrices attached by token analysis.
    pub similarity: Vec<(String, SimilarityMatrix)>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Pixel-wise mean over members of frame `f`.
fn ensemble_mean_frame(members: &[RadarSequence], f: usize) -> Vec<f64> {
    let mut out = vec![0.0; members[0].frame(f).len()];
    for m in members {
        for (o, &v) in out.iter_mut().zip(m.frame(f)) {
            *o += v as f64;
        }
    }
    let k = members.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

fn accumulate_spectrum(acc: &mut Option<RadialSpectrum>, s: RadialSpectrum) {
    match acc {
        None => *acc = Some(s),
        Some(a) => {
            for (x, y) in a.total.iter_mut().zip(&s.total) {
                *x += y;
            }
            for (x, y) in a.count.iter_mut().zip(&s.count) {
                *x += y;
            }
        }
    }
}

fn finish_spectrum(acc: &mut Option<RadialSpectrum>, fields: usize) {
    if let Some(a) = acc {
        for (p, (&t, &c)) in a.power.iter_mut().zip(a.total.iter().zip(&a.count)) {
            *p = if c == 0 { 0.0 } else { t / c as f64 };
        }
        a.total.iter_mut().for_each(|t| *t /= fields as f64);
        a.count.iter_mut().for_each(|c| *c /= fields);
    }
}

impl MetricsReport {
    /// Scores every case at every lead time and averages over cases.
    pub fn evaluate(cases: &[ForecastCase], cfg: &EvalConfig) -> Result<Self> {
        let first = cases
            .first()
            .ok_or_else(|| Error::Param("no forecasts to evaluate".into()))?;
        let leads = first.truth.frames();
        let (h, w) = (first.truth.height(), first.truth.width());
        let members = first.members.len();
        for (i, c) in cases.iter().enumerate() {
            if c.members.is_empty() {
                return Err(Error::Param(format!("case {i} has no ensemble members")));
            }
            for s in c.members.iter().chain(std::iter::once(&c.truth)) {
                if s.frames() != leads || s.height() != h || s.width() != w {
                    return Err(Error::Param(format!(
                        "case {i}: sequence {}x{}x{} does not match truth {leads}x{h}x{w}",
                        s.frames(),
                        s.height(),
                        s.width()
                    )));
                }
            }
        }
        let nt = cfg.thresholds.len();
        let mut csi_acc = vec![vec![0.0; leads]; nt];
        let mut fss_acc = vec![vec![0.0; leads]; nt];
        let mut crps_acc = vec![0.0; leads];
        let (mut sp, mut so) = (None, None);
        let (mut n_sp, mut n_so) = (0, 0);
        let (mut area_pred, mut area_obs) = (Vec::new(), Vec::new());
        for c in cases {
            for f in 0..leads {
                let obs = to_f64(c.truth.frame(f));
                let em = ensemble_mean_frame(&c.members, f);
                for (k, &tau) in cfg.thresholds.iter().enumerate() {
                    csi_acc[k][f] += csi(&em, &obs, tau)?;
                    fss_acc[k][f] += fss(&em, &obs, h, w, tau, cfg.fss_window)?;
                }
                let mf: Vec<Vec<f64>> = c.members.iter().map(|m| to_f64(m.frame(f))).collect();
                let refs: Vec<&[f64]> = mf.iter().map(Vec::as_slice).collect();
                crps_acc[f] += crps_ensemble(&refs, &obs)?;
                if h == w {
                    for m in &mf {
                        accumulate_spectrum(&mut sp, radial_psd(m, h)?);
                        n_sp += 1;
                    }
                    accumulate_spectrum(&mut so, radial_psd(&obs, h)?);
                    n_so += 1;
                }
                area_pred.push(mean(&em));
                area_obs.push(mean(&obs));
            }
        }
        finish_spectrum(&mut sp, n_sp);
        finish_spectrum(&mut so, n_so);
        let n = cases.len() as f64;
        let avg = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        Ok(Self {
            thresholds: cfg.thresholds.clone(),
            fss_window: cfg.fss_window,
            cases: cases.len(),
            members,
            csi: csi_acc.into_iter().map(avg).collect(),
            fss: fss_acc.into_iter().map(avg).collect(),
            crps: avg(crps_acc),
            spectrum_pred: sp,
            spectrum_obs: so,
            taylor: taylor_stats(&area_pred, &area_obs).ok(),
            similarity: Vec::new(),
        })
    }

    pub fn leads(&self) -> usize {
        self.crps.len()
    }

    /// Mean CSI over lead times at `thresholds[k]`.
    pub fn mean_csi(&self, k: usize) -> f64 {
        mean(&self.csi[k])
    }

    pub fn mean_fss(&self, k: usize) -> f64 {
        mean(&self.fss[k])
    }

    pub fn mean_crps(&self) -> f64 {
        mean(&self.crps)
    }

    /// Per-lead table with one column per threshold.
    pub fn per_lead_csv(&self, scores: &[Vec<f64>]) -> String {
        let mut s = String::from("lead");
        for t in &self.thresholds {
            let _ = write!(s, ",tau_{t}");
        }
        s.push('\n');
        for f in 0..self.leads() {
            let _ = write!(s, "{}", f + 1);
            for col in scores {
                let _ = write!(s, ",{}", col[f]);
            }
            s.push('\n');
        }
        s
    }

    pub fn crps_csv(&self) -> String {
        let mut s = String::from("lead,crps\n");
        for (f, v) in self.crps.iter().enumerate() {
            let _ = writeln!(s, "{},{v}", f + 1);
        }
        s
    }

    pub fn spectrum_csv(&self) -> Option<String> {
        let (p, o) = (self.spectrum_pred.as_ref()?, self.spectrum_obs.as_ref()?);
        let mut s = String::from("wavenumber,wavelength,power_pred,power_obs\n");
        for k in 1..p.power.len() {
            if p.count[k] > 0 {
                let _ = writeln!(s, "{k},{},{},{}", p.wavelength(k), p.power[k], o.power[k]);
            }
        }
        Some(s)
    }

    /// Aggregate `key=value` summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cases={}", self.cases);
        let _ = writeln!(s, "members={}", self.members);
        let _ = writeln!(s, "leads={}", self.leads());
        let _ = writeln!(s, "fss_window={}", self.fss_window);
        for (k, t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(s, "csi_{t}={}", self.mean_csi(k));
            let _ = writeln!(s, "fss_{t}={}", self.mean_fss(k));
        }
        let _ = writeln!(s, "crps={}", self.mean_crps());
        if let Some(t) = &self.taylor {
            let _ = writeln!(s, "taylor_corr={}", t.corr);
            let _ = writeln!(s, "taylor_std_ratio={}", t.std_ratio);
            let _ = writeln!(s, "taylor_centered_rms={}", t.centered_rms);
        }
        for (name, m) in &self.similarity {
            let _ = writeln!(s, "similarity_{name}_global_mean={}", m.global_mean());
            let _ = writeln!(s, "similarity_{name}_matrix_mean={}", m.matrix_mean());
        }
        s
    }

    /// Writes `csi.csv`, `fss.csv`, `crps.csv`, `spectrum.csv`,
    /// `similarity_<name>.csv` and `summary.txt` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("csi.csv"), self.per_lead_csv(&self.csi))?;
        std::fs::write(dir.join("fss.csv"), self.per_lead_csv(&self.fss))?;
        std::fs::write(dir.join("crps.csv"), self.crps_csv())?;
        if let Some(s) = self.spectrum_csv() {
            std::fs::write(dir.join("spectrum.csv"), s)?;
        }
        for (name, m) in &self.similarity {
            std::fs::write(dir.join(format!("similarity_{name}.csv")), m.to_csv())?;
        }
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}
