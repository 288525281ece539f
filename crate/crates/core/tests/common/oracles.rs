//! Direct loops straight from the score definitions.

pub fn naive_csi(pred: &[f64], obs: &[f64], tau: f64) -> f64 {
    let (mut h, mut m, mut f) = (0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        let (p, o) = (pred[i] >= tau, obs[i] >= tau);
        if p && o {
            h += 1;
        } else if o {
            m += 1;
        } else if p {
            f += 1;
        }
    }
    if h + m + f == 0 {
        0.0
    } else {
        h as f64 / (h + m + f) as f64
    }
}

pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

pub fn naive_fraction(
    field: &[f64],
    h: usize,
    w: usize,
    tau: f64,
    win: usize,
    y: usize,
    x: usize,
) -> f64 {
    let r = (win / 2) as isize;
    let mut count = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            let yy = mirror(y as isize + dy, h);
            let xx = mirror(x as isize + dx, w);
            if field[yy * w + xx] >= tau {
                count += 1;
            }
        }
    }
    count as f64 / (win * win) as f64
}

pub fn naive_fss(pred: &[f64], obs: &[f64], h: usize, w: usize, tau: f64, win: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let a = naive_fraction(pred, h, w, tau, win, y, x);
            let b = naive_fraction(obs, h, w, tau, win, y, x);
            num += (a - b) * (a - b);
            den += a * a + b * b;
        }
    }
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

pub fn naive_crps(members: &[Vec<f64>], obs: &[f64]) -> f64 {
    let m = members.len() as f64;
    let mut total = 0.0;
    for k in 0..obs.len() {
        let mut skill = 0.0;
        for i in 0..members.len() {
            skill += (members[i][k] - obs[k]).abs();
        }
        let mut spread = 0.0;
        for i in 0..members.len() {
            for j in 0..members.len() {
                spread += (members[i][k] - members[j][k]).abs();
            }
        }
        total += skill / m - spread / (2.0 * m * m);
    }
    total / obs.len() as f64
}

/// `|Σ f e^{-2πi(kx x + ky y)/n}|² / n²` by direct summation.
pub fn naive_power(field: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for ky in 0..n {
        for kx in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let ang =
                        -2.0 * std::f64::consts::PI * ((kx * x + ky * y) % n) as f64 / n as f64;
                    re += field[y * n + x] * ang.cos();
                    im += field[y * n + x] * ang.sin();
                }
            }
            out[ky * n + kx] = (re * re + im * im) / (n * n) as f64;
        }
    }
    out
}

pub fn naive_rings(power: &[f64], n: usize) -> (Vec<f64>, Vec<usize>) {
    let mut total = Vec::new();
    let mut count = Vec::new();
    for ky in 0..n {
        for kx in 0..n {
            let fy = if ky <= n / 2 {
                ky as f64
            } else {
                ky as f64 - n as f64
            };
            let fx = if kx <= n / 2 {
                kx as f64
            } else {
                kx as f64 - n as f64
            };
            let k = (fx * fx + fy * fy).sqrt().round() as usize;
            if total.len() <= k {
                total.resize(k + 1, 0.0);
                count.resize(k + 1, 0);
            }
            total[k] += power[ky * n + kx];
            count[k] += 1;
        }
    }
    (total, count)
}

pub fn naive_taylor(p: &[f64], o: &[f64]) -> (f64, f64, f64) {
    let n = p.len() as f64;
    let mut mp = 0.0;
    let mut mo = 0.0;
    for i in 0..p.len() {
        mp += p[i];
        mo += o[i];
    }
    mp /= n;
    mo /= n;
    let (mut spp, mut soo, mut spo, mut sd) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let (a, b) = (p[i] - mp, o[i] - mo);
        spp += a * a;
        soo += b * b;
        spo += a * b;
        sd += (a - b) * (a - b);
    }
    (
        spo / (spp.sqrt() * soo.sqrt()),
        (spp / n).sqrt() / (soo / n).sqrt(),
        (sd / n).sqrt(),
    )
}

pub fn naive_cosine(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..a.len() / dim {
        for j in 0..b.len() / dim {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..dim {
                dot += a[i * dim + k] * b[j * dim + k];
            }
            for k in 0..dim {
                na += a[i * dim + k] * a[i * dim + k];
                nb += b[j * dim + k] * b[j * dim + k];
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            out.push(if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            });
        }
    }
    out
}
