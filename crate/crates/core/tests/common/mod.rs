//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the library's metric code.

#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upfusion::metrics::GrayImage;

type Grid = Vec<Vec<f64>>;

pub fn noise(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(h, w, |_, _| rng.gen::<f64>())
}

/// Smooth random texture in [0, 1]: a few random plane waves plus mild noise.
pub fn textured(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6), rng.gen_range(0.0..6.0), rng.gen_range(0.05..0.15)))
        .collect();
    let jitter: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..0.1)).collect();
    GrayImage::from_fn(h, w, |y, x| {
        let s: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin()).sum();
        (0.45 + s + jitter[y * w + x]).clamp(0.0, 1.0)
    })
}

fn grid(img: &GrayImage) -> Grid {
    (0..img.height()).map(|y| (0..img.width()).map(|x| img.at(y, x)).collect()).collect()
}

/// Normalised 2-D Gaussian window of side `n`.
fn window(n: usize, sigma: f64) -> Grid {
    let r = (n / 2) as f64;
    let mut k = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            *v = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

/// Weighted mean, variances and covariance of two patches at (y0, x0).
fn patch_stats(x: &Grid, y: &Grid, k: &Grid, y0: usize, x0: usize) -> (f64, f64, f64, f64, f64) {
    let n = k.len();
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            mx += k[i][j] * x[y0 + i][x0 + j];
            my += k[i][j] * y[y0 + i][x0 + j];
        }
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (x[y0 + i][x0 + j] - mx, y[y0 + i][x0 + j] - my);
            vx += k[i][j] * dx * dx;
            vy += k[i][j] * dy * dy;
            cxy += k[i][j] * dx * dy;
        }
    }
    (mx, my, vx, vy, cxy)
}

pub fn ssim_ref(x: &GrayImage, y: &GrayImage) -> f64 {
    let (gx, gy) = (grid(x), grid(y));
    let k = window(11, 1.5);
    let (c1, c2) = (1e-4, 9e-4);
    let (mut total, mut count) = (0.0, 0usize);
    for y0 in 0..=x.height() - 11 {
        for x0 in 0..=x.width() - 11 {
            let (mx, my, vx, vy, cxy) = patch_stats(&gx, &gy, &k, y0, x0);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn ssim_fusion_ref(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    0.5 * (ssim_ref(f, a) + ssim_ref(f, b))
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

fn blur_decimate(img: &Grid, k: &Grid) -> Grid {
    let (h, w) = (img.len(), img[0].len());
    let r = (k.len() / 2) as isize;
    let mut out = vec![vec![0.0; w.div_ceil(2)]; h.div_ceil(2)];
    for (oy, row) in out.iter_mut().enumerate() {
        for (ox, v) in row.iter_mut().enumerate() {
            for (i, krow) in k.iter().enumerate() {
                for (j, kv) in krow.iter().enumerate() {
                    let sy = mirror(2 * oy as isize + i as isize - r, h);
                    let sx = mirror(2 * ox as isize + j as isize - r, w);
                    *v += kv * img[sy][sx];
                }
            }
        }
    }
    out
}

pub fn vif_ref(reference: &GrayImage, distorted: &GrayImage) -> f64 {
    let eps = 1e-10;
    let noise_var = 2.0;
    let scale = |g: Grid| g.into_iter().map(|r| r.into_iter().map(|v| v * 255.0).collect()).collect::<Grid>();
    let mut r = scale(grid(reference));
    let mut d = scale(grid(distorted));
    let (mut num, mut den) = (0.0, 0.0);
    for s in 0..4u32 {
        let n = 2usize.pow(4 - s) + 1;
        let k = window(n, n as f64 / 5.0);
        if s > 0 {
            r = blur_decimate(&r, &k);
            d = blur_decimate(&d, &k);
        }
        for y0 in 0..=r.len() - n {
            for x0 in 0..=r[0].len() - n {
                let (_, _, v1, v2, c12) = patch_stats(&r, &d, &k, y0, x0);
                let (mut s1, s2) = (v1.max(0.0), v2.max(0.0));
                let mut g = c12 / (s1 + eps);
                let mut sv = s2 - g * c12;
                if s1 < eps {
                    g = 0.0;
                    sv = s2;
                    s1 = 0.0;
                }
                if s2 < eps {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = s2;
                    g = 0.0;
                }
                let sv = sv.max(eps);
                num += (1.0 + g * g * s1 / (sv + noise_var)).log10();
                den += (1.0 + s1 / noise_var).log10();
            }
        }
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn vif_fusion_ref(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    0.5 * (vif_ref(a, f) + vif_ref(b, f))
}

fn sobel(img: &GrayImage) -> (Vec<f64>, Vec<f64>) {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (mut g, mut a) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = img.at((y + i - 1).clamp(0, h - 1) as usize, (x + j - 1).clamp(0, w - 1) as usize);
                    sx += KX[i as usize][j as usize] * v;
                    sy += KY[i as usize][j as usize] * v;
                }
            }
            g.push(sx.hypot(sy));
            a.push(if sx == 0.0 { PI / 2.0 } else { (sy / sx).atan() });
        }
    }
    (g, a)
}

pub fn qabf_ref(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    let sig = |gamma: f64, kappa: f64, sigma: f64, v: f64| gamma / (1.0 + (kappa * (v - sigma)).exp());
    let preservation = |gs: f64, as_: f64, gf: f64, af: f64| {
        let g = if gs == 0.0 && gf == 0.0 {
            1.0
        } else if gs > gf {
            gf / gs
        } else {
            gs / gf
        };
        let alpha = 1.0 - (as_ - af).abs() * 2.0 / PI;
        sig(0.9994, -15.0, 0.5, g) * sig(0.9879, -22.0, 0.8, alpha)
    };
    let ((ga, aa), (gb, ab), (gf, af)) = (sobel(a), sobel(b), sobel(f));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..ga.len() {
        num += preservation(ga[i], aa[i], gf[i], af[i]) * ga[i] + preservation(gb[i], ab[i], gf[i], af[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn ncc_ref(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let b = n.clamp(2, 256);
    let bins = |v: &[f64]| {
        let mut pairs: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
        pairs.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
        let mut out = vec![0; n];
        for (rank, (_, i)) in pairs.into_iter().enumerate() {
            out[i] = rank * b / n;
        }
        out
    };
    let (bx, by) = (bins(x), bins(y));
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mx: HashMap<usize, usize> = HashMap::new();
    let mut my: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        *joint.entry((bx[i], by[i])).or_default() += 1;
        *mx.entry(bx[i]).or_default() += 1;
        *my.entry(by[i]).or_default() += 1;
    }
    let entropy = |counts: Vec<usize>| -> f64 {
        counts
            .into_iter()
            .map(|c| {
                let p = c as f64 / n as f64;
                -p * p.log(b as f64)
            })
            .sum()
    };
    let (hx, hy) = (entropy(mx.into_values().collect()), entropy(my.into_values().collect()));
    (hx + hy - entropy(joint.into_values().collect())) / (hx * hy).sqrt()
}

/// Eigenvalues of a symmetric 3×3 matrix by the trigonometric closed form.
pub fn symmetric_eigenvalues_3(m: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
    if p1 == 0.0 {
        return [m[0][0], m[1][1], m[2][2]];
    }
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut bm = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            bm[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = bm[0][0] * (bm[1][1] * bm[2][2] - bm[1][2] * bm[2][1]) - bm[0][1] * (bm[1][0] * bm[2][2] - bm[1][2] * bm[2][0])
        + bm[0][2] * (bm[1][0] * bm[2][1] - bm[1][1] * bm[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

pub fn q_ncie_ref(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    let (ab, af, bf) = (ncc_ref(a.values(), b.values()), ncc_ref(a.values(), f.values()), ncc_ref(b.values(), f.values()));
    let eig = symmetric_eigenvalues_3([[1.0, ab, af], [ab, 1.0, bf], [af, bf, 1.0]]);
    1.0 + eig
        .iter()
        .map(|&l| {
            let r = l / 3.0;
            if r > 1e-12 {
                r * r.log(256.0)
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Separable naive DFT over rows then columns; `sign` is -1 forward, +1 inverse.
fn dft2(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    let dft1 = |xr: &[f64], xi: &[f64]| {
        let n = xr.len();
        let mut out = (vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            for t in 0..n {
                let ang = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                let (s, c) = ang.sin_cos();
                out.0[k] += xr[t] * c - xi[t] * s;
                out.1[k] += xr[t] * s + xi[t] * c;
            }
        }
        out
    };
    for y in 0..h {
        let (r, i) = dft1(&re[y * w..(y + 1) * w], &im[y * w..(y + 1) * w]);
        re[y * w..(y + 1) * w].copy_from_slice(&r);
        im[y * w..(y + 1) * w].copy_from_slice(&i);
    }
    for x in 0..w {
        let col_r: Vec<f64> = (0..h).map(|y| re[y * w + x]).collect();
        let col_i: Vec<f64> = (0..h).map(|y| im[y * w + x]).collect();
        let (r, i) = dft1(&col_r, &col_i);
        for y in 0..h {
            re[y * w + x] = r[y];
            im[y * w + x] = i[y];
        }
    }
    if sign > 0.0 {
        let s = 1.0 / (h * w) as f64;
        re.iter_mut().chain(im.iter_mut()).for_each(|v| *v *= s);
    }
}

/// Phase congruency, maximum moment and minimum moment maps.
pub fn phase_congruency_ref(img: &GrayImage) -> [Vec<f64>; 3] {
    let (nscale, norient, min_wl, mult, sigma_onf, k, cut_off, g) = (4, 4, 6.0, 2.0f64, 0.55f64, 2.0, 0.5, 10.0);
    let eps = 1e-4;
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut sre = img.values().to_vec();
    let mut sim = vec![0.0; n];
    dft2(&mut sre, &mut sim, h, w, -1.0);
    let freq = |k: usize, n: usize| if 2 * k < n { k as f64 / n as f64 } else { k as f64 / n as f64 - 1.0 };
    let (mut num, mut den) = (vec![0.0; n], vec![0.0; n]);
    let (mut cx, mut cy, mut cxy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for o in 0..norient {
        let angle = o as f64 * PI / norient as f64;
        let (mut sum_an, mut sum_e, mut sum_o, mut max_an) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut eo = Vec::new();
        let mut tau = 0.0;
        for s in 0..nscale {
            let fo = 1.0 / (min_wl * mult.powi(s));
            let (mut re, mut im) = (sre.clone(), sim.clone());
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (freq(y, h), freq(x, w));
                    let r = fx.hypot(fy);
                    let filt = if r == 0.0 {
                        0.0
                    } else {
                        let radial = (-(r / fo).ln().powi(2) / (2.0 * sigma_onf.ln().powi(2))).exp() / (1.0 + (r / 0.45).powi(30));
                        let mut d = (-fy).atan2(fx) - angle;
                        while d > PI {
                            d -= 2.0 * PI;
                        }
                        while d <= -PI {
                            d += 2.0 * PI;
                        }
                        let d = (d.abs() * norient as f64 / 2.0).min(PI);
                        radial * (d.cos() + 1.0) / 2.0
                    };
                    re[y * w + x] *= filt;
                    im[y * w + x] *= filt;
                }
            }
            dft2(&mut re, &mut im, h, w, 1.0);
            for i in 0..n {
                let an = re[i].hypot(im[i]);
                sum_an[i] += an;
                sum_e[i] += re[i];
                sum_o[i] += im[i];
                max_an[i] = if s == 0 { an } else { max_an[i].max(an) };
            }
            if s == 0 {
                let mut sorted = sum_an.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
                tau = med / (4f64.ln()).sqrt();
            }
            eo.push((re, im));
        }
        let total_tau = tau * (1.0 - (1.0 / mult).powi(nscale)) / (1.0 - 1.0 / mult);
        let threshold = (total_tau * (PI / 2.0).sqrt() + k * total_tau * ((4.0 - PI) / 2.0).sqrt()).max(eps);
        for i in 0..n {
            let xe = sum_e[i].hypot(sum_o[i]) + eps;
            let (me, mo) = (sum_e[i] / xe, sum_o[i] / xe);
            let mut energy = 0.0;
            for (re, im) in &eo {
                energy += re[i] * me + im[i] * mo - (re[i] * mo - im[i] * me).abs();
            }
            let e = (energy - threshold).max(0.0);
            let width = (sum_an[i] / (max_an[i] + eps) - 1.0) / (nscale - 1) as f64;
            let weight = 1.0 / (1.0 + ((cut_off - width) * g).exp());
            let pc_o = weight * e / (sum_an[i] + eps);
            num[i] += weight * e;
            den[i] += sum_an[i];
            cx[i] += (pc_o * angle.cos()).powi(2);
            cy[i] += (pc_o * angle.sin()).powi(2);
            cxy[i] += pc_o * angle.cos() * pc_o * angle.sin();
        }
    }
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let (a, b, c) = (cx[i] * 2.0 / norient as f64, cy[i] * 2.0 / norient as f64, cxy[i] * 4.0 / norient as f64);
        let d = (c * c + (a - b).powi(2)).sqrt();
        out[0][i] = num[i] / (den[i] + eps);
        out[1][i] = (a + b + d) / 2.0;
        out[2][i] = (a + b - d) / 2.0;
    }
    out
}

pub fn q_p_ref(a: &GrayImage, b: &GrayImage, f: &GrayImage) -> f64 {
    let corr = |x: &[f64], y: &[f64]| {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>();
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>();
        let cxy = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>();
        (cxy + 1e-4) / (vx.sqrt() * vy.sqrt() + 1e-4)
    };
    let (pa, pb, pf) = (phase_congruency_ref(a), phase_congruency_ref(b), phase_congruency_ref(f));
    (0..3)
        .map(|m| {
            let joint: Vec<f64> = pa[m].iter().zip(&pb[m]).map(|(x, y)| x.max(*y)).collect();
            corr(&pa[m], &pf[m]).max(corr(&pb[m], &pf[m])).max(corr(&joint, &pf[m]))
        })
        .product()
}

/// Largest absolute difference relative to max(1, |reference|).
pub fn rel_diff(got: f64, reference: f64) -> f64 {
    (got - reference).abs() / reference.abs().max(1.0)
}
