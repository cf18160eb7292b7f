//! Brute-force dip used as a test oracle. It shares no code with the
//! production algorithm: it bisects on the distance `d` and, for every
//! candidate mode, asks directly whether some unimodal cdf fits inside the
//! band of half-width `d` around the empirical cdf.
//!
//! A unimodal cdf is convex left of its mode and concave right of it, with a
//! possible atom at the mode. It suffices to consider piecewise-linear fits
//! with knots at the distinct sample values and the mode at one of them.
//! On each side, the three-point condition "no lower band point above the
//! chord of two upper band points" decides feasibility in O(k^2).

#![allow(dead_code)]

/// Smallest value the fit at each knot can take for the convex side ending at
/// knot `m`, or `None` when no convex nondecreasing fit exists up to `m`.
fn convex_side(z: &[f64], lower: &[f64], upper: &[f64], mode_lower: &[f64], mode_upper: &[f64]) -> Vec<Option<f64>> {
    let k = z.len();
    // Steepest slope forced into knot i by an upper point to its left.
    let mut slope = vec![0.0f64; k];
    for i in 0..k {
        for j in 0..i {
            slope[i] = slope[i].max((lower[i] - upper[j]) / (z[i] - z[j]));
        }
    }
    let forced = |l: usize| (0..l).map(|i| lower[i] + slope[i] * (z[l] - z[i])).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![None; k];
    let mut prefix_ok = true;
    for m in 0..k {
        if prefix_ok {
            let vmin = mode_lower[m].max(forced(m));
            if vmin <= mode_upper[m] {
                out[m] = Some(vmin);
            }
        }
        let low = lower[m].max(forced(m));
        prefix_ok &= low <= upper[m];
    }
    out
}

fn feasible(z: &[f64], cdf: &[f64], d: f64) -> bool {
    let k = z.len();
    let prev = |j: usize| if j == 0 { 0.0 } else { cdf[j - 1] };
    let lower: Vec<f64> = (0..k).map(|j| (cdf[j] - d).max(0.0)).collect();
    let upper: Vec<f64> = (0..k).map(|j| (prev(j) + d).min(1.0)).collect();
    let left_lo: Vec<f64> = (0..k).map(|j| (prev(j) - d).max(0.0)).collect();
    let left_hi: Vec<f64> = (0..k).map(|j| (prev(j) + d).min(1.0)).collect();
    let val_lo: Vec<f64> = (0..k).map(|j| (cdf[j] - d).max(0.0)).collect();
    let val_hi: Vec<f64> = (0..k).map(|j| (cdf[j] + d).min(1.0)).collect();

    let left = convex_side(z, &lower, &upper, &left_lo, &left_hi);

    // The concave side is the convex problem under x -> -x, F -> 1 - F.
    let rz: Vec<f64> = z.iter().rev().map(|v| -v).collect();
    let flip = |v: &[f64]| -> Vec<f64> { v.iter().rev().map(|x| 1.0 - x).collect() };
    let right = convex_side(&rz, &flip(&upper), &flip(&lower), &flip(&val_hi), &flip(&val_lo));

    (0..k).any(|m| match (left[m], right[k - 1 - m]) {
        (Some(vmin_left), Some(vmin_flipped)) => vmin_left.max(val_lo[m]) <= 1.0 - vmin_flipped,
        _ => false,
    })
}

/// Dip of an arbitrary (unsorted) sample.
pub fn reference_dip(sample: &[f64]) -> f64 {
    let n = sample.len();
    if n == 0 {
        return 0.0;
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut z = Vec::new();
    let mut cdf = Vec::new();
    for (i, &x) in sorted.iter().enumerate() {
        if z.last() == Some(&x) {
            *cdf.last_mut().unwrap() = (i + 1) as f64 / n as f64;
        } else {
            z.push(x);
            cdf.push((i + 1) as f64 / n as f64);
        }
    }
    if z.len() == 1 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if feasible(&z, &cdf, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
