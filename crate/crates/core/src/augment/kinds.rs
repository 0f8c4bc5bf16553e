use std::f64::consts::PI;

use ndarray::ArrayViewMut2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Prefix<'a, 'b> = &'a mut ArrayViewMut2<'b, f64>;

pub(super) fn add_noise<R: Rng + ?Sized>(x: Prefix, scale: f64, rng: &mut R) {
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += scale * z;
    }
}

/// Symmetric flat-top window (same coefficients as the usual signal-processing
/// libraries) of length `n`.
pub fn flattop_window(n: usize) -> Vec<f64> {
    const A: [f64; 5] = [
        0.215_578_95,
        0.416_631_58,
        0.277_263_158,
        0.083_578_947,
        0.006_947_368,
    ];
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let x = 2.0 * PI * i as f64 / (n - 1) as f64;
            A[0] - A[1] * x.cos() + A[2] * (2.0 * x).cos() - A[3] * (3.0 * x).cos()
                + A[4] * (4.0 * x).cos()
        })
        .collect()
}

/// Mirror index without edge repetition: `... c b | a b c d | c b ...`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub(super) fn convolve(x: Prefix, window: usize) {
    let mut w = flattop_window(window);
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let n = x.ncols();
    let half = (window / 2) as isize;
    for mut row in x.rows_mut() {
        let src: Vec<f64> = row.to_vec();
        for t in 0..n {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * src[reflect_index(t as isize + k as isize - half, n)];
            }
            row[t] = acc;
        }
    }
}

pub(super) fn permute<R: Rng + ?Sized>(x: Prefix, min_seg: usize, max_seg: usize, rng: &mut R) {
    let n = x.ncols();
    let k = rng.random_range(min_seg..=max_seg).min(n);
    if k <= 1 {
        return;
    }
    let mut cuts: Vec<usize> = index::sample(rng, n - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    bounds.extend(cuts);
    bounds.push(n);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    for mut row in x.rows_mut() {
        let src: Vec<f64> = row.to_vec();
        let mut t = 0;
        for &seg in &order {
            for v in &src[bounds[seg]..bounds[seg + 1]] {
                row[t] = *v;
                t += 1;
            }
        }
    }
}

/// Fritsch–Carlson monotone cubic interpolation through `(xs, ys)` evaluated
/// at integer positions `0..n`.
fn monotone_cubic(xs: &[f64], ys: &[f64], n: usize) -> Vec<f64> {
    let m = xs.len();
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..m - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
    let mut slope = vec![0.0; m];
    slope[0] = delta[0];
    slope[m - 1] = delta[m - 2];
    for i in 1..m - 1 {
        if delta[i - 1] * delta[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            slope[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for t in 0..n {
        let x = t as f64;
        while seg + 1 < m - 1 && x > xs[seg + 1] {
            seg += 1;
        }
        let s = (x - xs[seg]) / h[seg];
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s).powi(2),
            s * (1.0 - s).powi(2),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        out.push(
            h00 * ys[seg] + h10 * h[seg] * slope[seg] + h01 * ys[seg + 1] + h11 * h[seg] * slope[seg + 1],
        );
    }
    out
}

pub(super) fn drift<R: Rng + ?Sized>(x: Prefix, max_drift: f64, n_points: usize, rng: &mut R) {
    let n = x.ncols();
    let knots = n_points + 2;
    let xs: Vec<f64> = (0..knots)
        .map(|i| i as f64 * (n - 1).max(1) as f64 / (knots - 1) as f64)
        .collect();
    for mut row in x.rows_mut() {
        let mut ys = vec![0.0; knots];
        for y in ys.iter_mut().take(knots - 1).skip(1) {
            *y = rng.random_range(-1.0..1.0);
        }
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let range = hi - lo;
        if n < 2 || range <= 0.0 {
            continue;
        }
        let curve = monotone_cubic(&xs, &ys, n);
        let peak = curve.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak <= 0.0 {
            continue;
        }
        let gain = max_drift * range / peak;
        for (v, c) in row.iter_mut().zip(curve) {
            *v += gain * c;
        }
    }
}

pub(super) fn dropout<R: Rng + ?Sized>(x: Prefix, p: f64, fill: f64, rng: &mut R) {
    for v in x.iter_mut() {
        if rng.random_bool(p) {
            *v = fill;
        }
    }
}

pub(super) fn pool(x: Prefix, size: usize) {
    for mut row in x.rows_mut() {
        let n = row.len();
        let mut start = 0;
        while start < n {
            let end = (start + size).min(n);
            let mut window = row.slice_mut(ndarray::s![start..end]);
            // shifted mean: a constant window keeps its exact value
            let base = window[0];
            let mean = base + window.iter().map(|v| v - base).sum::<f64>() / (end - start) as f64;
            window.fill(mean);
            start = end;
        }
    }
}

pub(super) fn quantize(x: Prefix, levels: usize) {
    let steps = (levels - 1) as f64;
    for mut row in x.rows_mut() {
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if hi <= lo {
            continue;
        }
        row.mapv_inplace(|v| {
            let idx = ((v - lo) / (hi - lo) * steps).round().clamp(0.0, steps);
            // convex combination keeps both endpoints exact, which makes the
            // transform idempotent
            let f = idx / steps;
            lo * (1.0 - f) + hi * f
        });
    }
}

pub(super) fn scale<R: Rng + ?Sized>(x: Prefix, loc: f64, sigma: f64, rng: &mut R) {
    let dist = Normal::new(loc, sigma).expect("validated sigma");
    for mut row in x.rows_mut() {
        let factor = dist.sample(rng);
        row.mapv_inplace(|v| v * factor);
    }
}

pub(super) fn reverse(x: Prefix) {
    for mut row in x.rows_mut() {
        let flipped: Vec<f64> = row.iter().rev().copied().collect();
        row.iter_mut().zip(flipped).for_each(|(d, s)| *d = s);
    }
}

pub(super) fn time_warp<R: Rng + ?Sized>(x: Prefix, n_speed_change: usize, max_ratio: f64, rng: &mut R) {
    let n = x.ncols();
    let steps = n - 1;
    let segments = n_speed_change.min(steps).max(1);
    let mut cuts: Vec<usize> = if segments > 1 {
        index::sample(rng, steps - 1, segments - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect()
    } else {
        Vec::new()
    };
    cuts.sort_unstable();
    // log-uniform speeds in [r^-1/2, r^1/2] keep every pairwise ratio <= r
    let half_log = 0.5 * max_ratio.ln();
    let speeds: Vec<f64> = (0..segments)
        .map(|_| {
            if half_log > 0.0 {
                rng.random_range(-half_log..=half_log).exp()
            } else {
                1.0
            }
        })
        .collect();
    let mut source = vec![0.0; n];
    let mut seg = 0;
    for t in 0..steps {
        while seg < cuts.len() && t >= cuts[seg] {
            seg += 1;
        }
        source[t + 1] = source[t] + speeds[seg];
    }
    let norm = steps as f64 / source[steps];
    source.iter_mut().for_each(|s| *s *= norm);
    source[steps] = steps as f64;

    for mut row in x.rows_mut() {
        let src: Vec<f64> = row.to_vec();
        for (t, &pos) in source.iter().enumerate() {
            let i = (pos.floor() as usize).min(steps - 1);
            let frac = pos - i as f64;
            row[t] = src[i] * (1.0 - frac) + src[i + 1] * frac;
        }
    }
}
