//! Integer sample sizes from a real-valued allocation.
//!
//! First stage: cells above capacity are capped and their surplus spread
//! proportionally over the rest until nothing exceeds its cap, then a
//! largest-remainder apportionment with a floor of one per sampled cell hits
//! `round(x)` exactly. Second stage, per first-stage cell: per-PSU targets are
//! rescaled by `x_real / x_int` so the product `x z` that enters the variance
//! is kept, rounded to the nearest integer, then nudged one unit at a time
//! towards the real expected second-stage count. Each nudge moves that count
//! by an inclusion probability `α m ≤ 1`, so the stratum ends within half a
//! unit of its target unless caps bind. Fixed-SSU cells share one per-PSU size
//! and round `x_real z_real / x_int` directly.

use super::{actual_precision, AllocationError, AllocationResult};
use crate::population::SecondStageKey;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundingOptions {
    /// Give zero-variance cells (real size 0) one unit anyway.
    pub observe_zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundedAllocation {
    pub first_stage: Vec<Vec<u64>>,
    pub second_stage: Vec<Vec<Vec<u64>>>,
    /// Achieved squared CV per subpopulation at the integer sizes.
    pub per_subpop_t: Vec<f64>,
    /// `max_j (T_j^int − T_j^real) / T_j^real`.
    pub max_degradation: f64,
    /// Some cell hit its capacity, so the result is not an equal-precision
    /// optimum.
    pub capped: bool,
    /// Expected second-stage units per first-stage cell at the integer sizes.
    pub expected_second_stage: Vec<Vec<f64>>,
    /// The same quantity at the real-valued sizes.
    pub target_second_stage: Vec<Vec<f64>>,
}

impl RoundedAllocation {
    pub fn first_stage_total(&self) -> u64 {
        self.first_stage.iter().flatten().sum()
    }

    pub fn expected_second_stage_total(&self) -> f64 {
        self.expected_second_stage.iter().flatten().sum()
    }
}

pub fn round_allocation(
    result: &AllocationResult,
    options: &RoundingOptions,
) -> Result<RoundedAllocation, AllocationError> {
    let coeffs = &result.coefficients;
    let shape: Vec<usize> = coeffs.subpops.iter().map(|s| s.cells.len()).collect();
    let flat_real: Vec<f64> = result.first_stage.iter().flatten().copied().collect();
    let flat_cap: Vec<u64> = coeffs
        .subpops
        .iter()
        .flat_map(|s| &s.cells)
        .map(|c| c.capacity)
        .collect();
    let flat_lo: Vec<u64> = flat_real
        .iter()
        .map(|&x| u64::from(x > 0.0 || options.observe_zero_variance))
        .collect();

    let target = result.budgets.x.round();
    if target.is_nan() || target < 1.0 {
        return Err(AllocationError::InfeasibleCap(format!(
            "first-stage budget {} rounds to zero",
            result.budgets.x
        )));
    }
    let target = target as u64;
    let (adjusted, mut capped) = cap_and_redistribute(&flat_real, &flat_cap, target as f64)?;
    let flat_int = apportion(&adjusted, &flat_lo, &flat_cap, target)?;

    let mut first_stage = Vec::with_capacity(shape.len());
    let mut offset = 0;
    for &len in &shape {
        first_stage.push(flat_int[offset..offset + len].to_vec());
        offset += len;
    }

    let mut second_stage = Vec::with_capacity(shape.len());
    let mut expected = Vec::with_capacity(shape.len());
    let mut targets = Vec::with_capacity(shape.len());
    for (j, sp) in coeffs.subpops.iter().enumerate() {
        let mut zs = Vec::with_capacity(sp.cells.len());
        let mut es = Vec::with_capacity(sp.cells.len());
        let mut ts = Vec::with_capacity(sp.cells.len());
        for (h, cell) in sp.cells.iter().enumerate() {
            let x_real = result.first_stage[j][h];
            let x_int = first_stage[j][h];
            let z_real = &result.second_stage[j][h];
            let target: f64 = cell
                .second
                .iter()
                .zip(z_real)
                .map(|(s, z)| s.alpha * x_real * z)
                .sum();
            let (ints, hit_cap) = if x_int == 0 {
                (vec![0; cell.second.len()], false)
            } else if cell.second.len() == 1 && cell.second[0].key == SecondStageKey::Stratum {
                let s = &cell.second[0];
                let lo = u64::from(z_real[0] > 0.0 || options.observe_zero_variance);
                let want = (x_real * z_real[0] / x_int as f64).round();
                let n = clamp(want, lo, s.capacity);
                (vec![n], want > s.capacity as f64)
            } else {
                let scale = x_real / x_int as f64;
                let wanted: Vec<f64> = z_real.iter().map(|z| z * scale).collect();
                let weights: Vec<f64> = cell.second.iter().map(|s| s.alpha * x_int as f64).collect();
                let lo: Vec<u64> = z_real
                    .iter()
                    .map(|&z| u64::from(z > 0.0 || options.observe_zero_variance))
                    .collect();
                let caps: Vec<u64> = cell.second.iter().map(|s| s.capacity).collect();
                nudge_to_target(&wanted, &weights, &lo, &caps, target)
            };
            capped |= hit_cap;
            let e: f64 = cell
                .second
                .iter()
                .zip(&ints)
                .map(|(s, &n)| s.alpha * x_int as f64 * n as f64)
                .sum();
            zs.push(ints);
            es.push(e);
            ts.push(target);
        }
        second_stage.push(zs);
        expected.push(es);
        targets.push(ts);
    }

    let as_f64 = |v: &Vec<Vec<u64>>| -> Vec<Vec<f64>> {
        v.iter().map(|r| r.iter().map(|&n| n as f64).collect()).collect()
    };
    let first_f: Vec<Vec<f64>> = as_f64(&first_stage);
    let second_f: Vec<Vec<Vec<f64>>> = second_stage.iter().map(as_f64).collect();
    let per_subpop_t = actual_precision(coeffs, &first_f, &second_f)?;
    let max_degradation = per_subpop_t
        .iter()
        .zip(&result.per_subpop_t)
        .map(|(t, r)| (t - r) / r)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(RoundedAllocation {
        first_stage,
        second_stage,
        per_subpop_t,
        max_degradation,
        capped,
        expected_second_stage: expected,
        target_second_stage: targets,
    })
}

fn clamp(x: f64, lo: u64, hi: u64) -> u64 {
    if x <= lo as f64 {
        lo
    } else if x >= hi as f64 {
        hi
    } else {
        x as u64
    }
}

/// Caps cells at capacity and rescales the uncapped ones so the total stays
/// `total`, repeating until no cell exceeds its cap.
fn cap_and_redistribute(
    real: &[f64],
    cap: &[u64],
    total: f64,
) -> Result<(Vec<f64>, bool), AllocationError> {
    let cap_sum: f64 = cap.iter().map(|&c| c as f64).sum();
    if total > cap_sum {
        return Err(AllocationError::InfeasibleCap(format!(
            "first-stage budget {total} exceeds the total capacity {cap_sum}"
        )));
    }
    let mut fixed = vec![false; real.len()];
    let mut values = real.to_vec();
    let mut any = false;
    loop {
        let over: Vec<usize> = (0..values.len())
            .filter(|&i| !fixed[i] && values[i] > cap[i] as f64)
            .collect();
        if over.is_empty() {
            return Ok((values, any));
        }
        any = true;
        for i in over {
            fixed[i] = true;
            values[i] = cap[i] as f64;
        }
        let fixed_sum: f64 = (0..values.len()).filter(|&i| fixed[i]).map(|i| values[i]).sum();
        let free_sum: f64 = (0..values.len()).filter(|&i| !fixed[i]).map(|i| values[i]).sum();
        let left = total - fixed_sum;
        if free_sum <= 0.0 {
            if left > 1e-9 * total {
                return Err(AllocationError::InfeasibleCap(format!(
                    "{left} first-stage units left after capping with no uncapped cell"
                )));
            }
            return Ok((values, any));
        }
        let scale = left / free_sum;
        for i in 0..values.len() {
            if !fixed[i] {
                values[i] *= scale;
            }
        }
    }
}

/// Largest-remainder apportionment of `total` with per-cell bounds. Ties go
/// to the lower index.
fn apportion(real: &[f64], lo: &[u64], hi: &[u64], total: u64) -> Result<Vec<u64>, AllocationError> {
    let lo_sum: u64 = lo.iter().sum();
    let hi_sum: u64 = hi.iter().sum();
    if total < lo_sum || total > hi_sum {
        return Err(AllocationError::InfeasibleCap(format!(
            "cannot place {total} units in cells with bounds summing to [{lo_sum}, {hi_sum}]"
        )));
    }
    if let Some(i) = (0..lo.len()).find(|&i| lo[i] > hi[i]) {
        return Err(AllocationError::InfeasibleCap(format!("cell {i} has zero capacity")));
    }
    let mut ints: Vec<u64> = real
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| clamp(x.floor(), l, h))
        .collect();
    let mut sum: u64 = ints.iter().sum();
    while sum < total {
        let i = best(real.len(), |i| (ints[i] < hi[i]).then(|| real[i] - ints[i] as f64));
        ints[i] += 1;
        sum += 1;
    }
    while sum > total {
        let i = best(real.len(), |i| (ints[i] > lo[i]).then(|| ints[i] as f64 - real[i]));
        ints[i] -= 1;
        sum -= 1;
    }
    Ok(ints)
}

/// Index with the largest score; the first wins ties. Panics if no index
/// qualifies, which the callers' feasibility checks rule out.
fn best(n: usize, score: impl Fn(usize) -> Option<f64>) -> usize {
    let mut pick: Option<(usize, f64)> = None;
    for i in 0..n {
        if let Some(s) = score(i) {
            if pick.is_none_or(|(_, b)| s > b) {
                pick = Some((i, s));
            }
        }
    }
    pick.expect("a cell with room").0
}

/// Rounds `wanted` to the nearest integers within bounds, then applies ±1
/// moves while they bring `Σ weight · n` closer to `target`, preferring the
/// cell whose integer is furthest from its real value in the move direction.
fn nudge_to_target(
    wanted: &[f64],
    weight: &[f64],
    lo: &[u64],
    hi: &[u64],
    target: f64,
) -> (Vec<u64>, bool) {
    let mut hit_cap = false;
    let mut ints: Vec<u64> = wanted
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&z, (&l, &h))| {
            hit_cap |= z > h as f64;
            clamp(z.round(), l, h)
        })
        .collect();
    let mut expected: f64 = ints.iter().zip(weight).map(|(&n, w)| n as f64 * w).sum();
    for _ in 0..=ints.iter().sum::<u64>() as usize + wanted.len() {
        let gap = target - expected;
        let pick = if gap > 0.0 {
            candidates(wanted.len(), |i| {
                (ints[i] < hi[i] && (gap - weight[i]).abs() < gap.abs())
                    .then(|| wanted[i] - ints[i] as f64)
            })
            .map(|i| (i, 1i64))
        } else {
            candidates(wanted.len(), |i| {
                (ints[i] > lo[i] && (gap + weight[i]).abs() < gap.abs())
                    .then(|| ints[i] as f64 - wanted[i])
            })
            .map(|i| (i, -1i64))
        };
        let Some((i, step)) = pick else { break };
        ints[i] = ints[i].saturating_add_signed(step);
        expected += step as f64 * weight[i];
    }
    (ints, hit_cap)
}

fn candidates(n: usize, score: impl Fn(usize) -> Option<f64>) -> Option<usize> {
    (0..n).any(|i| score(i).is_some()).then(|| best(n, score))
}
