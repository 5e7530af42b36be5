//! Tracking accuracy metric: OSPA (optimal subpattern assignment) over
//! position estimates, with an exact O(n^3) rectangular assignment solver.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Exact minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), by the Jonker-Volgenant style shortest augmenting path
/// algorithm with dual potentials. Returns the column chosen for each row
/// and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let m = cost[0].len();
    if m < n || cost.iter().any(|row| row.len() != m) {
        return Err(Error::InvalidArgument(
            "cost matrix must be rectangular with rows <= cols".into(),
        ));
    }

    const INF: f64 = f64::INFINITY;
    // 1-based arrays; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
            total += cost[p[j] - 1][j - 1];
        }
    }
    Ok((assignment, total))
}

/// OSPA distance of order `order` with cutoff `cutoff` between two sets of
/// positions. Both empty gives 0; one empty gives `cutoff`. Distances are
/// Euclidean, clipped at the cutoff; cardinality mismatches pay the full
/// cutoff per unmatched element.
pub fn ospa(
    xs: &[Vector3<f64>],
    ys: &[Vector3<f64>],
    cutoff: f64,
    order: f64,
) -> Result<f64> {
    if !(cutoff > 0.0) || !(order >= 1.0) {
        return Err(Error::InvalidArgument(
            "cutoff must be positive and order >= 1".into(),
        ));
    }
    let (small, large) = if xs.len() <= ys.len() { (xs, ys) } else { (ys, xs) };
    let (m, n) = (small.len(), large.len());
    if n == 0 {
        return Ok(0.0);
    }
    if m == 0 {
        return Ok(cutoff);
    }
    let cost: Vec<Vec<f64>> = small
        .iter()
        .map(|a| {
            large
                .iter()
                .map(|b| (a - b).norm().min(cutoff).powf(order))
                .collect()
        })
        .collect();
    let (_, matched) = hungarian(&cost)?;
    let total = matched + cutoff.powf(order) * (n - m) as f64;
    Ok((total / n as f64).powf(1.0 / order))
}

/// Minimum-cost assignment by explicit enumeration of all row-to-column
/// injections. Exponential; the oracle [`hungarian`] is validated against.
pub fn brute_force_assignment_cost(cost: &[Vec<f64>]) -> Result<f64> {
    let n = cost.len();
    if n == 0 {
        return Ok(0.0);
    }
    let m = cost[0].len();
    if m < n {
        return Err(Error::InvalidArgument("rows must not exceed cols".into()));
    }
    fn recurse(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for (j, u) in used.clone().iter().enumerate() {
            if !u {
                used[j] = true;
                recurse(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    recurse(cost, 0, &mut vec![false; m], 0.0, &mut best);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn p(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn hungarian_known_square_case() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let (assign, total) = hungarian(&cost).unwrap();
        assert_relative_eq!(total, 5.0, epsilon = 1e-12);
        assert_eq!(assign, vec![1, 0, 2]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(n..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let (_, total) = hungarian(&cost).unwrap();
            let exact = brute_force_assignment_cost(&cost).unwrap();
            assert!((total - exact).abs() < 1e-10, "{total} vs {exact}");
        }
    }

    #[test]
    fn ospa_identical_sets_is_zero() {
        let xs = vec![p(1.0, 2.0, 3.0), p(-1.0, 0.0, 5.0)];
        assert_relative_eq!(ospa(&xs, &xs, 50.0, 1.0).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ospa_empty_cases() {
        let xs = vec![p(0.0, 0.0, 0.0)];
        assert_relative_eq!(ospa(&[], &[], 50.0, 1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(ospa(&xs, &[], 50.0, 1.0).unwrap(), 50.0, epsilon = 1e-12);
        assert_relative_eq!(ospa(&[], &xs, 50.0, 1.0).unwrap(), 50.0, epsilon = 1e-12);
    }

    #[test]
    fn ospa_cardinality_penalty() {
        // One perfect match plus one unmatched element: ((0 + c) / 2).
        let xs = vec![p(0.0, 0.0, 0.0)];
        let ys = vec![p(0.0, 0.0, 0.0), p(1000.0, 0.0, 0.0)];
        assert_relative_eq!(ospa(&xs, &ys, 50.0, 1.0).unwrap(), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn ospa_distance_saturates_at_cutoff() {
        let xs = vec![p(0.0, 0.0, 0.0)];
        let ys = vec![p(1e6, 0.0, 0.0)];
        assert_relative_eq!(ospa(&xs, &ys, 50.0, 1.0).unwrap(), 50.0, epsilon = 1e-12);
    }

    #[test]
    fn ospa_order_one_simple_value() {
        // Two pairs at distances 2 and 4: mean is 3.
        let xs = vec![p(0.0, 0.0, 0.0), p(10.0, 0.0, 0.0)];
        let ys = vec![p(2.0, 0.0, 0.0), p(10.0, 4.0, 0.0)];
        assert_relative_eq!(ospa(&xs, &ys, 50.0, 1.0).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ospa_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let xs: Vec<Vector3<f64>> = (0..rng.gen_range(0..5))
                .map(|_| p(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), 0.0))
                .collect();
            let ys: Vec<Vector3<f64>> = (0..rng.gen_range(0..5))
                .map(|_| p(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), 0.0))
                .collect();
            let a = ospa(&xs, &ys, 5.0, 1.0).unwrap();
            let b = ospa(&ys, &xs, 5.0, 1.0).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-12);
            assert!(a <= 5.0 + 1e-12);
        }
    }

    #[test]
    fn ospa_triangle_inequality() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let random_set = |rng: &mut ChaCha12Rng| -> Vec<Vector3<f64>> {
            (0..rng.gen_range(0..4))
                .map(|_| p(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), 0.0))
                .collect()
        };
        for _ in 0..200 {
            let a = random_set(&mut rng);
            let b = random_set(&mut rng);
            let c = random_set(&mut rng);
            let ab = ospa(&a, &b, 5.0, 1.0).unwrap();
            let bc = ospa(&b, &c, 5.0, 1.0).unwrap();
            let ac = ospa(&a, &c, 5.0, 1.0).unwrap();
            assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
        }
    }
}
