//! Fusion quality metrics: Q_NCIE, Q_P, VIF, SSIM and Q^AB/F, plus a
//! directory evaluation harness.
//!
//! Every metric takes the two sources and the fused image and is symmetric in
//! the sources. Images are luminance planes with values in [0, 1].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix3;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::io::{load_image, match_stems, split_luma, write_atomic};
use crate::tensor::Tensor;

/// A single-channel image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Dimension(format!("{} values for a {h}x{w} image", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image contains non-finite values".into()));
        }
        Ok(GrayImage { h, w, values })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = (0..h * w).map(|i| f(i / w, i % w)).collect();
        GrayImage { h, w, values }
    }

    /// Accepts a (1, 1, h, w) tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.n() != 1 || s.c() != 1 {
            return Err(Error::Dimension(format!("expected one luminance plane, got {s}")));
        }
        Self::new(s.h(), s.w(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage { h: self.h, w: self.w, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &GrayImage, f: impl Fn(f64, f64) -> f64) -> GrayImage {
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        GrayImage { h: self.h, w: self.w, values }
    }

    fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_triple(a: &GrayImage, b: &GrayImage, f: &GrayImage, min_side: usize, metric: &str) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) || (a.h, a.w) != (f.h, f.w) {
        return Err(Error::Dimension(format!(
            "{metric}: image sizes differ: {}x{}, {}x{}, {}x{}",
            a.h, a.w, b.h, b.w, f.h, f.w
        )));
    }
    if a.h < min_side || a.w < min_side {
        return Err(Error::Data(format!(
            "{metric}: image {}x{} smaller than the {min_side}x{min_side} minimum",
            a.h, a.w
        )));
    }
    Ok(())
}

/// Normalised 1-D Gaussian of odd length `n`.
pub fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as f64;
    let k: Vec<f64> = (0..n).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with `k` in both directions over the valid region.
fn filter_valid(img: &GrayImage, k: &[f64]) -> GrayImage {
    let n = k.len();
    let (h, w) = (img.h + 1 - n, img.w + 1 - n);
    let mut rows = vec![0.0; img.h * w];
    for y in 0..img.h {
        let src = &img.values[y * img.w..(y + 1) * img.w];
        for x in 0..w {
            rows[y * w + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * w + x]).sum();
        }
    }
    GrayImage { h, w, values: out }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable correlation keeping the size, with mirrored borders.
fn filter_same(img: &GrayImage, k: &[f64]) -> GrayImage {
    let r = (k.len() / 2) as isize;
    let padded = GrayImage::from_fn(img.h + 2 * r as usize, img.w + 2 * r as usize, |y, x| {
        img.at(reflect(y as isize - r, img.h), reflect(x as isize - r, img.w))
    });
    filter_valid(&padded, k)
}

// ---------------------------------------------------------------- SSIM

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all window positions fully inside the image.
pub fn ssim(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    check_triple(x, y, y, SSIM_WINDOW, "ssim")?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let sxx = filter_valid(&x.map(|v| v * v), &k);
    let syy = filter_valid(&y.map(|v| v * v), &k);
    let sxy = filter_valid(&x.zip(y, |a, b| a * b), &k);
    let n = mx.values.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx.values[i], my.values[i]);
            let vx = sxx.values[i] - ux * ux;
            let vy = syy.values[i] - uy * uy;
            let cxy = sxy.values[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim_fusion(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    check_triple(a, b, f, SSIM_WINDOW, "ssim")?;
    Ok(0.5 * (ssim(f, a)? + ssim(f, b)?))
}

// ---------------------------------------------------------------- Q_NCIE

pub const NCIE_BINS: usize = 256;

/// Equal-population bin of every sample: samples are ranked by value (ties
/// by position) and the ranks split into `bins` groups.
fn rank_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
    let mut out = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / values.len();
    }
    out
}

fn entropy_term(p: f64, log_b: f64) -> f64 {
    if p > 0.0 {
        p * p.max(1e-12).ln() / log_b
    } else {
        0.0
    }
}

/// Nonlinear correlation coefficient of two equally sized samples, in [0, 1]:
/// the mutual information of the rank histograms over the geometric mean of
/// the marginal entropies, all in log base `b`. With equally populated bins
/// both marginal entropies are 1; normalising keeps `ncc(x, x) = 1` when `b`
/// does not divide the sample count.
pub fn nonlinear_correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let b = NCIE_BINS.min(n).max(2);
    let log_b = (b as f64).ln();
    let (bx, by) = (rank_bins(x, b), rank_bins(y, b));
    let mut joint = vec![0usize; b * b];
    let mut mx = vec![0usize; b];
    let mut my = vec![0usize; b];
    for (&i, &j) in bx.iter().zip(&by) {
        joint[i * b + j] += 1;
        mx[i] += 1;
        my[j] += 1;
    }
    let p = |c: usize| c as f64 / n as f64;
    let h = |counts: &[usize]| -counts.iter().map(|&c| entropy_term(p(c), log_b)).sum::<f64>();
    let (hx, hy) = (h(&mx), h(&my));
    (hx + hy - h(&joint)) / (hx * hy).sqrt()
}

fn ncie_from_eigenvalues(eig: [f64; 3]) -> f64 {
    let log256 = (NCIE_BINS as f64).ln();
    1.0 + eig
        .iter()
        .map(|&l| {
            let q = (l / 3.0).clamp(0.0, 1.0);
            if q > 1e-12 {
                q * q.ln() / log256
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

pub fn q_ncie(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    check_triple(a, b, f, 1, "q_ncie")?;
    let ab = nonlinear_correlation(&a.values, &b.values);
    let af = nonlinear_correlation(&a.values, &f.values);
    let bf = nonlinear_correlation(&b.values, &f.values);
    let r = Matrix3::new(1.0, ab, af, ab, 1.0, bf, af, bf, 1.0);
    let eig = r.symmetric_eigenvalues();
    Ok(ncie_from_eigenvalues([eig[0], eig[1], eig[2]]))
}

// ---------------------------------------------------------------- Q^AB/F

pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

/// Sobel strength and orientation with replicated borders.
fn edge_maps(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.h as isize, img.w as isize);
    let px = |y: isize, x: isize| img.at(y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize);
    let mut g = Vec::with_capacity(img.values.len());
    let mut a = Vec::with_capacity(img.values.len());
    for y in 0..h {
        for x in 0..w {
            let sx = (px(y - 1, x + 1) - px(y - 1, x - 1))
                + 2.0 * (px(y, x + 1) - px(y, x - 1))
                + (px(y + 1, x + 1) - px(y + 1, x - 1));
            let sy = (px(y + 1, x - 1) - px(y - 1, x - 1))
                + 2.0 * (px(y + 1, x) - px(y - 1, x))
                + (px(y + 1, x + 1) - px(y - 1, x + 1));
            g.push((sx * sx + sy * sy).sqrt());
            a.push(if sx == 0.0 { PI / 2.0 } else { (sy / sx).atan() });
        }
    }
    (g, a)
}

/// Edge preservation of one source in the fused image, per pixel.
fn edge_preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    (0..gs.len())
        .map(|i| {
            let (lo, hi) = if gs[i] > gf[i] { (gf[i], gs[i]) } else { (gs[i], gf[i]) };
            let g = if hi == 0.0 { 1.0 } else { lo / hi };
            let a = 1.0 - (as_[i] - af[i]).abs() / (PI / 2.0);
            let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
            let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
            qg * qa
        })
        .collect()
}

/// Edge-strength-weighted edge preservation; 0 when no source has edges.
pub fn qabf(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    check_triple(a, b, f, 1, "qabf")?;
    let (ga, aa) = edge_maps(a);
    let (gb, ab) = edge_maps(b);
    let (gf, af) = edge_maps(f);
    let qa = edge_preservation(&ga, &aa, &gf, &af);
    let qb = edge_preservation(&gb, &ab, &gf, &af);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ga.len() {
        num += qa[i] * ga[i] + qb[i] * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

// ---------------------------------------------------------------- VIF

pub const VIF_SCALES: usize = 4;
pub const VIF_NOISE_VAR: f64 = 2.0;
pub const VIF_MIN_SIDE: usize = 32;
const VIF_EPS: f64 = 1e-10;

/// Window length at VIF scale `s` (0-based): 17, 9, 5, 3.
pub fn vif_window(s: usize) -> usize {
    (1 << (VIF_SCALES - s)) + 1
}

fn downsample(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.h.div_ceil(2), img.w.div_ceil(2));
    GrayImage::from_fn(h, w, |y, x| img.at(2 * y, 2 * x))
}

/// Information terms (numerator, denominator) of one scale.
fn vif_scale(r: &GrayImage, d: &GrayImage, k: &[f64]) -> (f64, f64) {
    let mu1 = filter_valid(r, k);
    let mu2 = filter_valid(d, k);
    let s11 = filter_valid(&r.map(|v| v * v), k);
    let s22 = filter_valid(&d.map(|v| v * v), k);
    let s12 = filter_valid(&r.zip(d, |a, b| a * b), k);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..mu1.values.len() {
        let (m1, m2) = (mu1.values[i], mu2.values[i]);
        let mut sig1 = (s11.values[i] - m1 * m1).max(0.0);
        let sig2 = (s22.values[i] - m2 * m2).max(0.0);
        let sig12 = s12.values[i] - m1 * m2;
        let mut g = sig12 / (sig1 + VIF_EPS);
        let mut sv = sig2 - g * sig12;
        if sig1 < VIF_EPS {
            g = 0.0;
            sv = sig2;
            sig1 = 0.0;
        }
        if sig2 < VIF_EPS {
            g = 0.0;
            sv = 0.0;
        }
        if g < 0.0 {
            sv = sig2;
            g = 0.0;
        }
        sv = sv.max(VIF_EPS);
        num += (1.0 + g * g * sig1 / (sv + VIF_NOISE_VAR)).log10();
        den += (1.0 + sig1 / VIF_NOISE_VAR).log10();
    }
    (num, den)
}

/// Pixel-domain multi-scale VIF of `distorted` against `reference`, on
/// values scaled to [0, 255]. A reference without any local variance yields 1.
pub fn vif(reference: &GrayImage, distorted: &GrayImage) -> Result<f64> {
    check_triple(reference, distorted, distorted, VIF_MIN_SIDE, "vif")?;
    let mut r = reference.map(|v| v * 255.0);
    let mut d = distorted.map(|v| v * 255.0);
    let mut num = 0.0;
    let mut den = 0.0;
    for s in 0..VIF_SCALES {
        let n = vif_window(s);
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if s > 0 {
            r = downsample(&filter_same(&r, &k));
            d = downsample(&filter_same(&d, &k));
        }
        let (a, b) = vif_scale(&r, &d, &k);
        num += a;
        den += b;
    }
    Ok(if den == 0.0 { 1.0 } else { num / den })
}

pub fn vif_fusion(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    check_triple(a, b, f, VIF_MIN_SIDE, "vif")?;
    Ok(0.5 * (vif(a, f)? + vif(b, f)?))
}

// ---------------------------------------------------------------- Q_P

/// Log-Gabor filter bank settings for phase congruency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseCongruencyParams {
    pub scales: usize,
    pub orientations: usize,
    pub min_wavelength: f64,
    pub mult: f64,
    pub sigma_onf: f64,
    /// Noise threshold in standard deviations above the estimated mean.
    pub k: f64,
    pub cut_off: f64,
    pub g: f64,
}

impl Default for PhaseCongruencyParams {
    fn default() -> Self {
        PhaseCongruencyParams {
            scales: 4,
            orientations: 4,
            min_wavelength: 6.0,
            mult: 2.0,
            sigma_onf: 0.55,
            k: 2.0,
            cut_off: 0.5,
            g: 10.0,
        }
    }
}

pub const QP_MIN_SIDE: usize = 32;
/// Stabiliser in the feature-map correlation.
pub const QP_C: f64 = 1e-4;
const PC_EPS: f64 = 1e-4;

/// Phase congruency and the maximum and minimum moments of its orientation
/// covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFeatures {
    pub pc: GrayImage,
    pub max_moment: GrayImage,
    pub min_moment: GrayImage,
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Signed frequency of DFT index `k` out of `n`, in cycles per sample.
pub fn fft_freq(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Frequency-domain log-Gabor filter at `scale` and `orient`, row-major h×w.
pub fn log_gabor_filter(h: usize, w: usize, scale: usize, orient: usize, p: &PhaseCongruencyParams) -> Vec<f64> {
    let fo = 1.0 / (p.min_wavelength * p.mult.powi(scale as i32));
    let angle = orient as f64 * PI / p.orientations as f64;
    let denom = 2.0 * p.sigma_onf.ln().powi(2);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = fft_freq(y, h);
        for x in 0..w {
            let fx = fft_freq(x, w);
            if x == 0 && y == 0 {
                out.push(0.0);
                continue;
            }
            let radius = (fx * fx + fy * fy).sqrt();
            let lowpass = 1.0 / (1.0 + (radius / 0.45).powi(30));
            let radial = (-(radius / fo).ln().powi(2) / denom).exp() * lowpass;
            let theta = (-fy).atan2(fx);
            let ds = theta.sin() * angle.cos() - theta.cos() * angle.sin();
            let dc = theta.cos() * angle.cos() + theta.sin() * angle.sin();
            let dtheta = (ds.atan2(dc).abs() * p.orientations as f64 / 2.0).min(PI);
            let spread = (dtheta.cos() + 1.0) / 2.0;
            out.push(radial * spread);
        }
    }
    out
}

pub fn phase_congruency(img: &GrayImage, p: &PhaseCongruencyParams) -> Result<PhaseFeatures> {
    if p.scales < 2 || p.orientations == 0 {
        return Err(Error::Config("phase congruency needs ≥ 2 scales and ≥ 1 orientation".into()));
    }
    let (h, w) = (img.h, img.w);
    let n = h * w;
    let mut spectrum: Vec<Complex<f64>> = img.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut spectrum, h, w, false);
    let mut pc_num = vec![0.0; n];
    let mut pc_den = vec![0.0; n];
    let (mut covx, mut covy, mut covxy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for o in 0..p.orientations {
        let angle = o as f64 * PI / p.orientations as f64;
        let mut sum_an = vec![0.0; n];
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut max_an = vec![0.0; n];
        let mut responses = Vec::with_capacity(p.scales);
        let mut tau = 0.0;
        for s in 0..p.scales {
            let filter = log_gabor_filter(h, w, s, o, p);
            let mut eo: Vec<Complex<f64>> = spectrum.iter().zip(&filter).map(|(c, f)| c * f).collect();
            fft2(&mut eo, h, w, true);
            let an: Vec<f64> = eo.iter().map(|c| c.norm()).collect();
            for i in 0..n {
                sum_an[i] += an[i];
                sum_e[i] += eo[i].re;
                sum_o[i] += eo[i].im;
                max_an[i] = if s == 0 { an[i] } else { f64::max(max_an[i], an[i]) };
            }
            if s == 0 {
                tau = median(&sum_an) / 4f64.ln().sqrt();
            }
            responses.push(eo);
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let xe = (sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]).sqrt() + PC_EPS;
            let (me, mo) = (sum_e[i] / xe, sum_o[i] / xe);
            energy[i] = responses
                .iter()
                .map(|eo| {
                    let (e, od) = (eo[i].re, eo[i].im);
                    e * me + od * mo - (e * mo - od * me).abs()
                })
                .sum();
        }
        let inv = 1.0 / p.mult;
        let total_tau = tau * (1.0 - inv.powi(p.scales as i32)) / (1.0 - inv);
        let noise_mean = total_tau * (PI / 2.0).sqrt();
        let noise_sigma = total_tau * ((4.0 - PI) / 2.0).sqrt();
        let threshold = (noise_mean + p.k * noise_sigma).max(PC_EPS);
        for i in 0..n {
            let e = (energy[i] - threshold).max(0.0);
            let width = (sum_an[i] / (max_an[i] + PC_EPS) - 1.0) / (p.scales - 1) as f64;
            let weight = 1.0 / (1.0 + ((p.cut_off - width) * p.g).exp());
            let pc_o = weight * e / (sum_an[i] + PC_EPS);
            pc_num[i] += weight * e;
            pc_den[i] += sum_an[i];
            let (c, s) = (pc_o * angle.cos(), pc_o * angle.sin());
            covx[i] += c * c;
            covy[i] += s * s;
            covxy[i] += c * s;
        }
    }
    let half = p.orientations as f64 / 2.0;
    let mut max_m = vec![0.0; n];
    let mut min_m = vec![0.0; n];
    let mut pc = vec![0.0; n];
    for i in 0..n {
        let cx = covx[i] / half;
        let cy = covy[i] / half;
        let cxy = 4.0 * covxy[i] / p.orientations as f64;
        let denom = (cxy * cxy + (cx - cy).powi(2)).sqrt();
        max_m[i] = (cy + cx + denom) / 2.0;
        min_m[i] = (cy + cx - denom) / 2.0;
        pc[i] = pc_num[i] / (pc_den[i] + PC_EPS);
    }
    Ok(PhaseFeatures {
        pc: GrayImage { h, w, values: pc },
        max_moment: GrayImage { h, w, values: max_m },
        min_moment: GrayImage { h, w, values: min_m },
    })
}

/// `(σ_xy + C) / (σ_x σ_y + C)` over whole maps, with the moments summed
/// rather than averaged so that `C` only matters for near-empty maps.
pub fn feature_correlation(x: &GrayImage, y: &GrayImage) -> f64 {
    let (mx, my) = (x.mean(), y.mean());
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.values.iter().zip(&y.values) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    (sxy + QP_C) / (sxx.sqrt() * syy.sqrt() + QP_C)
}

/// Product over phase congruency, maximum moment and minimum moment of the
/// best correlation between the fused map and the source maps or their
/// pixelwise maximum.
pub fn q_p(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<f64> {
    check_triple(a, b, f, QP_MIN_SIDE, "q_p")?;
    let p = PhaseCongruencyParams::default();
    let (pa, pb, pf) = (phase_congruency(a, &p)?, phase_congruency(b, &p)?, phase_congruency(f, &p)?);
    let pick = |x: &PhaseFeatures, i: usize| match i {
        0 => x.pc.clone(),
        1 => x.max_moment.clone(),
        _ => x.min_moment.clone(),
    };
    let mut q = 1.0;
    for i in 0..3 {
        let (ma, mb, mf) = (pick(&pa, i), pick(&pb, i), pick(&pf, i));
        let ms = ma.zip(&mb, f64::max);
        let best = [&ma, &mb, &ms]
            .iter()
            .map(|m| feature_correlation(m, &mf))
            .fold(f64::NEG_INFINITY, f64::max);
        q *= best;
    }
    Ok(q)
}

// ---------------------------------------------------------------- reports

pub const METRIC_NAMES: [&str; 5] = ["q_ncie", "q_p", "vif", "ssim", "qabf"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValues {
    pub q_ncie: f64,
    pub q_p: f64,
    pub vif: f64,
    pub ssim: f64,
    pub qabf: f64,
}

impl MetricValues {
    pub fn compute(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> Result<Self> {
        Ok(MetricValues {
            q_ncie: q_ncie(a, b, f)?,
            q_p: q_p(a, b, f)?,
            vif: vif_fusion(a, b, f)?,
            ssim: ssim_fusion(a, b, f)?,
            qabf: qabf(a, b, f)?,
        })
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.q_ncie, self.q_p, self.vif, self.ssim, self.qabf]
    }

    fn from_array(v: [f64; 5]) -> Self {
        MetricValues { q_ncie: v[0], q_p: v[1], vif: v[2], ssim: v[3], qabf: v[4] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, MetricValues)>,
    pub mean: MetricValues,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<(String, MetricValues)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no images to evaluate".into()));
        }
        let mut sum = [0.0; 5];
        for (_, v) in &rows {
            for (s, x) in sum.iter_mut().zip(v.as_array()) {
                *s += x;
            }
        }
        let mean = MetricValues::from_array(sum.map(|s| s / rows.len() as f64));
        Ok(MetricReport { rows, mean })
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// Tab-separated records, one per image, then a `MEAN` line.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("stem\t{}\n", METRIC_NAMES.join("\t"));
        let mut line = |name: &str, v: &MetricValues| {
            let cols: Vec<String> = v.as_array().iter().map(|x| format!("{x:.17e}")).collect();
            let _ = writeln!(out, "{name}\t{}", cols.join("\t"));
        };
        for (stem, v) in &self.rows {
            line(stem, v);
        }
        line("MEAN", &self.mean);
        out
    }

    /// Aligned table for terminals.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(4);
        let mut out = format!("{:<width$}", "image");
        for name in ["Q_NCIE", "Q_P", "VIF", "SSIM", "Q^AB/F"] {
            let _ = write!(out, " {name:>8}");
        }
        out.push('\n');
        let mut line = |name: &str, v: &MetricValues| {
            let _ = write!(out, "{name:<width$}");
            for x in v.as_array() {
                let _ = write!(out, " {x:>8.4}");
            }
            out.push('\n');
        };
        for (stem, v) in &self.rows {
            line(stem, v);
        }
        line("MEAN", &self.mean);
        out
    }
}

fn load_luma(path: &Path) -> Result<GrayImage> {
    GrayImage::from_tensor(&split_luma(&load_image(path)?)?.luma)
}

/// Evaluates every stem present in all three directories. Images are scored
/// in parallel; rows are in stem order.
pub fn eval_dir(dir_a: &Path, dir_b: &Path, dir_f: &Path) -> Result<MetricReport> {
    let matched = match_stems(&[dir_a, dir_b, dir_f])?;
    let rows = matched
        .par_iter()
        .map(|(stem, paths)| {
            let a = load_luma(&paths[0])?;
            let b = load_luma(&paths[1])?;
            let f = load_luma(&paths[2])?;
            let v = MetricValues::compute(&a, &b, &f).map_err(|e| Error::Data(format!("{stem}: {e}")))?;
            Ok((stem.clone(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows)
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    write_atomic(path, report.to_tsv().as_bytes())
}
