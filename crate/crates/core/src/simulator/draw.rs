use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::SimulationError;
use crate::population::Z_SUM_TOLERANCE;

/// Simple random sample without replacement of `n` indices out of `0..universe`,
/// sorted ascending.
pub fn draw_srswor<R: Rng + ?Sized>(
    universe: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SimulationError> {
    if n == 0 || n > universe {
        return Err(SimulationError::SampleSize { n, universe });
    }
    let mut out = index::sample(rng, universe, n).into_vec();
    out.sort_unstable();
    Ok(out)
}

/// Hartley-Rao systematic πps: shuffle the PSUs, lay their sizes `m z̃_i`
/// end to end and take the PSUs hit by `u, u + 1, …, u + m − 1` with
/// `u ~ U[0, 1)`. Returns `m` distinct indices, sorted.
pub fn draw_hartley_rao<R: Rng + ?Sized>(
    z_tilde: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SimulationError> {
    let big_m = z_tilde.len();
    if m == 0 || m > big_m {
        return Err(SimulationError::SampleSize { n: m, universe: big_m });
    }
    let sum: f64 = z_tilde.iter().sum();
    if (sum - 1.0).abs() > Z_SUM_TOLERANCE || z_tilde.iter().any(|z| z.is_nan() || *z <= 0.0) {
        return Err(SimulationError::SizeMeasure(format!(
            "size measures must be positive and sum to 1 (sum {sum})"
        )));
    }
    let mf = m as f64;
    if let Some(i) = z_tilde.iter().position(|z| mf * z > 1.0 + 1e-12) {
        return Err(SimulationError::InclusionOverflow {
            psu: i,
            pi: mf * z_tilde[i],
        });
    }

    let mut order: Vec<usize> = (0..big_m).collect();
    order.shuffle(rng);
    let u: f64 = rng.random();
    let mut out = Vec::with_capacity(m);
    let mut upper = 0.0;
    let mut k = 0;
    for (pos, &i) in order.iter().enumerate() {
        upper += mf * z_tilde[i];
        let last = pos + 1 == big_m;
        while k < m && (u + (k as f64) < upper || last) {
            out.push(i);
            k += 1;
        }
    }
    out.sort_unstable();
    out.dedup();
    debug_assert_eq!(out.len(), m);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_universe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_srswor(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(
            draw_hartley_rao(&[0.25; 4], 4, &mut rng).unwrap(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn bad_sizes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            draw_srswor(5, 0, &mut rng),
            Err(SimulationError::SampleSize { n: 0, .. })
        ));
        assert!(draw_srswor(5, 6, &mut rng).is_err());
        assert!(matches!(
            draw_hartley_rao(&[0.6, 0.4], 2, &mut rng),
            Err(SimulationError::InclusionOverflow { psu: 0, .. })
        ));
        assert!(matches!(
            draw_hartley_rao(&[0.5, 0.4], 1, &mut rng),
            Err(SimulationError::SizeMeasure(_))
        ));
    }

    #[test]
    fn hartley_rao_returns_m_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = [0.05, 0.15, 0.1, 0.3, 0.2, 0.2];
        for _ in 0..1000 {
            let s = draw_hartley_rao(&z, 3, &mut rng).unwrap();
            assert_eq!(s.len(), 3);
        }
    }
}
