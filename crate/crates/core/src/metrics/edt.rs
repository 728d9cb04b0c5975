//! Exact squared Euclidean distance transform (Felzenszwalb–Huttenlocher).

const FAR: f64 = 1e20;

/// Squared distance from every pixel of an `h×w` grid to the nearest `true`
/// pixel of `targets`. With no targets every entry is `1e20`.
pub fn squared_distance_to(targets: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(targets.len(), h * w, "target mask size");
    let mut grid: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        envelope(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// One-dimensional pass: `d[q] = min_p (q − p)² + f[p]`.
fn envelope(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let p = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            // Only reachable with k == 0: the new parabola dominates.
            v[0] = q;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k] as f64;
        *out = (q as f64 - p).powi(2) + f[v[k]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for &(h, w) in &[(1, 1), (1, 7), (6, 1), (8, 8), (5, 13), (16, 9)] {
            for _ in 0..20 {
                let t: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.15)).collect();
                if !t.iter().any(|&b| b) {
                    continue;
                }
                let d = squared_distance_to(&t, h, w);
                for i in 0..h * w {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    let best = (0..h * w)
                        .filter(|&j| t[j])
                        .map(|j| ((j / w) as f64 - y).powi(2) + ((j % w) as f64 - x).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(d[i], best, "{h}x{w} at {i}");
                }
            }
        }
    }
}
