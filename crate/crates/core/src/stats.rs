//! Small numeric helpers shared by the analysis modules.

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Coefficient of determination of a fitted line.
pub fn r_squared(points: &[(f64, f64)], slope: f64, intercept: f64) -> f64 {
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Least squares through the origin: `Σ x y / Σ x²`.
pub fn origin_fit(points: &[(f64, f64)]) -> f64 {
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    sxy / sxx
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Coordinate-wise mean of equal-length vectors.
pub fn mean_vec(vs: &[Vec<f64>]) -> Vec<f64> {
    let d = vs[0].len();
    let mut m = vec![0.0; d];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= vs.len() as f64);
    m
}

/// Unbiased sample covariance matrix (row-major `d × d`).
pub fn covariance(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = vs[0].len();
    let m = mean_vec(vs);
    let mut c = vec![vec![0.0; d]; d];
    if vs.len() < 2 {
        return c;
    }
    for v in vs {
        for i in 0..d {
            let di = v[i] - m[i];
            for j in i..d {
                c[i][j] += di * (v[j] - m[j]);
            }
        }
    }
    let denom = (vs.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            c[i][j] /= denom;
            c[j][i] = c[i][j];
        }
    }
    c
}

pub fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mixes a master seed with cell coordinates into a per-cell seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x51_7c_c1_b7_27_22_0a_95);
    for &p in parts {
        h = splitmix(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_recovered() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 * i as f64 - 2.0)).collect();
        let (s, b) = linear_fit(&pts);
        assert!((s - 3.0).abs() < 1e-12 && (b + 2.0).abs() < 1e-12);
        assert!((r_squared(&pts, s, b) - 1.0).abs() < 1e-12);
        assert!((origin_fit(&[(1.0, 2.0), (2.0, 4.0)]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn seeds_differ_per_cell() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[2, 3]), derive_seed(5, &[2, 3]));
    }
}
