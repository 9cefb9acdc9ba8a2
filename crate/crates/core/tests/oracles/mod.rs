//! Independent reference implementations used by the integration and
//! acceptance tests. They share no code with the library beyond its public
//! types.
#![allow(dead_code)]

use clinexplain::features::Aggregation;
use clinexplain::predictor::Model;

/// Shapley values by averaging marginal contributions over every ordering
/// of the features, with `v(S)` the background mean of `f` on hybrids.
pub fn brute_force_shapley(
    f: &dyn Fn(&[Option<f64>]) -> f64,
    x: &[Option<f64>],
    background: &[Vec<Option<f64>>],
) -> (f64, Vec<f64>) {
    let m = x.len();
    let value = |members: &[bool]| -> f64 {
        let mut total = 0.0;
        for b in background {
            let z: Vec<Option<f64>> = (0..m).map(|i| if members[i] { x[i] } else { b[i] }).collect();
            total += f(&z);
        }
        total / background.len() as f64
    };
    let mut phi = vec![0.0; m];
    let mut perm: Vec<usize> = (0..m).collect();
    let mut count = 0usize;
    loop {
        let mut members = vec![false; m];
        let mut prev = value(&members);
        for &i in &perm {
            members[i] = true;
            let cur = value(&members);
            phi[i] += cur - prev;
            prev = cur;
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    for p in &mut phi {
        *p /= count as f64;
    }
    (value(&vec![false; m]), phi)
}

/// Lexicographic successor; false after the last ordering.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Closed-form interventional Shapley values of the model's logit for
/// numeric, fully observed inputs: `w_i / sd_i * (x_i - mean_b x_i)`.
pub fn linear_logit_shapley(model: &Model, x: &[f64], background: &[Vec<f64>]) -> Vec<f64> {
    let mut phi = vec![0.0; x.len()];
    for c in &model.columns {
        let i = c.feature;
        let mean_b = background.iter().map(|b| b[i]).sum::<f64>() / background.len() as f64;
        phi[i] += c.weight / c.sd * (x[i] - mean_b);
    }
    phi
}

/// Aggregations written out directly.
pub fn aggregate(agg: Aggregation, t: &[f64], y: &[f64]) -> Option<f64> {
    let n = y.len();
    match agg {
        Aggregation::Count => Some(n as f64),
        _ if n == 0 => None,
        Aggregation::Mean => Some(y.iter().sum::<f64>() / n as f64),
        Aggregation::Min => Some(y.iter().cloned().fold(f64::INFINITY, f64::min)),
        Aggregation::Max => Some(y.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        Aggregation::Sd => {
            if n < 2 {
                return None;
            }
            let (_, var) = welford(y);
            Some(var.sqrt())
        }
        Aggregation::Trend => {
            if n < 2 {
                return None;
            }
            let (slope, _) = ls_line(t, y)?;
            Some(slope)
        }
    }
}

/// `(mean, sample variance)` by Welford's update.
pub fn welford(y: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let var = if y.len() > 1 {
        m2 / (y.len() - 1) as f64
    } else {
        f64::NAN
    };
    (mean, var)
}

/// Least-squares `(slope, intercept at t = 0)` via centred sums.
pub fn ls_line(t: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..t.len() {
        num += (t[i] - tm) * (y[i] - ym);
        den += (t[i] - tm).powi(2);
    }
    if den == 0.0 {
        return None;
    }
    let slope = num / den;
    Some((slope, ym - slope * tm))
}

/// Occlusion influence recomputed from scratch for every window.
pub fn naive_occlusion(agg: Aggregation, t: &[f64], y: &[f64], k: usize) -> (f64, Vec<f64>) {
    let x = aggregate(agg, t, y).expect("defined on the original series");
    let mut v = vec![0.0; y.len()];
    for start in 0..=y.len() - k {
        let mut copy = y.to_vec();
        let tw = &t[start..start + k];
        match ls_line(tw, &y[start..start + k]) {
            Some((slope, icpt)) => {
                for j in 0..k {
                    copy[start + j] = icpt + slope * tw[j];
                }
            }
            None => {
                let m = y[start..start + k].iter().sum::<f64>() / k as f64;
                copy[start..start + k].fill(m);
            }
        }
        let x2 = aggregate(agg, t, &copy).expect("defined after occlusion");
        let inc = if x.abs() < 1e-9 { x - x2 } else { (x - x2) / x.abs() };
        for item in v.iter_mut().skip(start).take(k) {
            *item += inc;
        }
    }
    (x, v)
}

/// Exhaustive scoring of the z grid; returns the chosen `(theta, z)`. Walks
/// from the largest z down and keeps strict improvements so the largest z
/// wins ties.
pub fn brute_force_threshold(v: &[f64], grid: &[f64]) -> Option<(f64, f64)> {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let sigma = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
    if sigma == 0.0 {
        return None;
    }
    let mut zs = grid.to_vec();
    zs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut best: Option<(f64, f64, f64)> = None;
    for z in zs {
        let theta = mu + z * sigma;
        let above: Vec<usize> = (0..v.len()).filter(|&i| v[i] > theta).collect();
        if above.is_empty() || above.len() == v.len() {
            continue;
        }
        let rest: Vec<f64> = v.iter().copied().filter(|&x| x <= theta).collect();
        let rn = rest.len() as f64;
        let rmu = rest.iter().sum::<f64>() / rn;
        let rsigma = (rest.iter().map(|x| (x - rmu).powi(2)).sum::<f64>() / rn).sqrt();
        let mut runs = 0;
        for (j, &i) in above.iter().enumerate() {
            if j == 0 || above[j - 1] + 1 != i {
                runs += 1;
            }
        }
        let dmu = if mu == 0.0 { 0.0 } else { (mu - rmu) / mu };
        let score = (dmu + (sigma - rsigma) / sigma) / (above.len() + runs * runs) as f64;
        if best.is_none_or(|(s, _, _)| score > s) {
            best = Some((score, theta, z));
        }
    }
    best.map(|(_, t, z)| (t, z))
}

/// AUC by comparing every positive with every negative.
pub fn all_pairs_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut twice = 0u64;
    let (mut np, mut nn) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    if np == 0 || nn == 0 {
        return None;
    }
    Some(twice as f64 / (2 * np * nn) as f64)
}

/// Intersection over union of two inclusive index intervals sets.
pub fn jaccard(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = a.iter().flat_map(|&(s, e)| s..=e).collect();
    let sb: BTreeSet<usize> = b.iter().flat_map(|&(s, e)| s..=e).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Reference range `(mean, sd, low, high)` from Welford moments.
pub fn reference_oracle(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if values.len() < 2 {
        return None;
    }
    let (m, var) = welford(values);
    let sd = var.sqrt();
    Some((m, sd, m - 1.96 * sd, m + 1.96 * sd))
}
