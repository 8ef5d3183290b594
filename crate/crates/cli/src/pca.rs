//! Two-component PCA via cyclic Jacobi eigen-decomposition of the sample
//! covariance. Small and exact enough for projecting one episode's features.

/// Project `n` row-major `d`-dimensional points onto their top two principal
/// axes. Returns row-major `n x 2` coordinates.
pub fn project_2d(points: &[f64], n: usize, d: usize) -> Vec<f64> {
    assert_eq!(points.len(), n * d);
    assert!(n >= 2 && d >= 2, "need at least two points in two dimensions");

    let mut centered = points.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| points[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] -= mean;
        }
    }

    // Sample covariance X'X / (n - 1).
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    let norm = 1.0 / (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] *= norm;
            cov[b * d + a] = cov[a * d + b];
        }
    }

    let (eigenvalues, vectors) = jacobi_eigen(&mut cov, d);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    for (c, axis) in axes.iter_mut().enumerate() {
        let col = order[c];
        for j in 0..d {
            axis[j] = vectors[j * d + col];
        }
        // Sign convention: the largest-magnitude coordinate points positive,
        // so the projection does not flip between otherwise identical runs.
        let lead = (0..d).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap();
        if axis[lead] < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
    }

    let mut out = vec![0.0; n * 2];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for (c, axis) in axes.iter().enumerate() {
            out[i * 2 + c] = row.iter().zip(axis).map(|(x, a)| x * a).sum();
        }
    }
    out
}

/// Cyclic Jacobi rotations on a symmetric matrix. Returns the eigenvalues
/// (diagonal after convergence) and the column-eigenvector matrix.
fn jacobi_eigen(m: &mut [f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += m[p * d + q].abs();
            }
        }
        if off <= 1e-12 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-15 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| m[i * d + i]).collect();
    (eigenvalues, v)
}

/// Spearman rank correlation between two equally long value lists.
/// Ties get the mean of the ranks they span.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean).powi(2);
        var_b += (y - mean).powi(2);
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_in_three_dimensions_projects_onto_its_direction() {
        // Points at t * (1, 2, 2) for t = 0..6; the only variance direction
        // has length 3, so component 1 must be t * 3 minus the mean shift.
        let n = 6;
        let points: Vec<f64> = (0..n).flat_map(|t| {
            let t = t as f64;
            [t, 2.0 * t, 2.0 * t]
        }).collect();
        let proj = project_2d(&points, n, 3);
        let mean_t = (0..n).map(|t| t as f64).sum::<f64>() / n as f64;
        for t in 0..n {
            let expect = (t as f64 - mean_t) * 3.0;
            assert!((proj[t * 2] - expect).abs() < 1e-9, "{} vs {}", proj[t * 2], expect);
            assert!(proj[t * 2 + 1].abs() < 1e-9);
        }
    }

    #[test]
    fn planar_rotation_preserves_pairwise_distances() {
        let raw = [0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 3.0, 1.0, -1.0, -2.0];
        let n = 5;
        let (c, s) = (0.6f64, 0.8f64);
        // Embed the plane rotated into 4 dimensions.
        let rotated: Vec<f64> = (0..n).flat_map(|i| {
            let (x, y) = (raw[i * 2], raw[i * 2 + 1]);
            [c * x - s * y, s * x + c * y, 0.5 * x, 0.25 * y]
        }).collect();
        let proj = project_2d(&rotated, n, 4);
        for i in 0..n {
            for j in i + 1..n {
                let orig = ((raw[i * 2] - raw[j * 2]).powi(2) + (raw[i * 2 + 1] - raw[j * 2 + 1]).powi(2)).sqrt();
                let after = ((proj[i * 2] - proj[j * 2]).powi(2) + (proj[i * 2 + 1] - proj[j * 2 + 1]).powi(2)).sqrt();
                // The extra scaled coordinates stretch the plane slightly, so
                // compare against the true embedded distance instead.
                let embedded = (0..4).map(|k| (rotated[i * 4 + k] - rotated[j * 4 + k]).powi(2)).sum::<f64>().sqrt();
                assert!((after - embedded).abs() < 1e-9, "pair {i},{j}: {after} vs {embedded}");
                assert!(after >= orig - 1e-9);
            }
        }
    }

    #[test]
    fn jacobi_recovers_diagonal_eigenvalues() {
        let mut m = vec![0.0; 9];
        m[0] = 3.0;
        m[4] = 1.0;
        m[8] = 2.0;
        let (vals, vecs) = jacobi_eigen(&mut m, 3);
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, vec![1.0, 2.0, 3.0]);
        // Eigenvector matrix of a diagonal input stays a signed permutation.
        for i in 0..3 {
            let norm: f64 = (0..3).map(|j| vecs[j * 3 + i].powi(2)).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spearman_detects_monotone_and_reversed_orderings() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [10.0, 100.0, 1000.0, 10000.0, 100000.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &rev) + 1.0).abs() < 1e-12);
    }
}
