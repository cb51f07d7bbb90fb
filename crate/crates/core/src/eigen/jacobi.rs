//! Cyclic Jacobi eigendecomposition for small dense symmetric matrices.

/// Eigenvalues (ascending) and the matching unit eigenvectors of a symmetric
/// matrix stored row-major in `entries` (`d × d`).
#[derive(Debug, Clone)]
pub struct SymmetricSpectrum {
    pub values: Vec<f64>,
    /// `vectors[k]` is the eigenvector for `values[k]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

const MAX_SWEEPS: usize = 100;

/// Returns `None` if the off-diagonal mass fails to vanish within the sweep cap.
pub fn symmetric_eigen(entries: &[f64], d: usize) -> Option<SymmetricSpectrum> {
    assert_eq!(entries.len(), d * d);
    let mut a = entries.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sweeps = 0;
    let mut converged = d < 2;
    while !converged && sweeps < MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * 1e-2 * frob || off == 0.0 {
            converged = true;
            break;
        }
        sweeps += 1;
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;

                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return None;
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| a[x * d + x].total_cmp(&a[y * d + y]));
    let values = order.iter().map(|&k| a[k * d + k]).collect();
    let vectors = order
        .iter()
        .map(|&k| (0..d).map(|i| v[i * d + k]).collect())
        .collect();
    Some(SymmetricSpectrum {
        values,
        vectors,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_fixed_point() {
        let s = symmetric_eigen(&[3.0, 0.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(s.values, vec![-1.0, 3.0]);
        assert_eq!(s.sweeps, 0);
    }

    #[test]
    fn swap_matrix() {
        let s = symmetric_eigen(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert!((s.values[0] + 1.0).abs() < 1e-15);
        assert!((s.values[1] - 1.0).abs() < 1e-15);
        let top = &s.vectors[1];
        assert!((top[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((top[0] - top[1]).abs() < 1e-15);
    }

    #[test]
    fn reconstructs_matrix() {
        let m = [4.0, 1.0, -2.0, 1.0, 2.0, 0.5, -2.0, 0.5, -3.0];
        let s = symmetric_eigen(&m, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| s.values[k] * s.vectors[k][i] * s.vectors[k][j]).sum();
                assert!((r - m[i * 3 + j]).abs() < 1e-13);
            }
        }
    }
}
