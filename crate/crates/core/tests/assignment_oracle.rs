//! Solver optimality against exhaustive enumeration, plus the algebraic
//! identities a correct assignment solver must satisfy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsecrowd::assignment::{solve_assignment, CostMatrix};

/// Minimum total cost over all injective row -> column maps, by plain
/// enumeration with a column-used mask. Totals accumulate in row order
/// (the same left-to-right fold the solver reports), so "exactly equal"
/// is well defined at the bit level.
fn brute_force_min(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.rows() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for j in 0..cost.cols() {
            if used[j] {
                continue;
            }
            used[j] = true;
            rec(cost, row + 1, used, acc + cost.at(row, j), best);
            used[j] = false;
        }
    }
    let mut used = vec![false; cost.cols()];
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut used, 0.0, &mut best);
    best
}

fn random_matrix(rng: &mut ChaCha8Rng, max_side: usize) -> CostMatrix {
    let rows = rng.random_range(1..=max_side);
    let cols = rng.random_range(rows..=max_side);
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    CostMatrix::new(rows, cols, values).unwrap()
}

#[test]
fn solver_matches_brute_force_on_random_rectangles() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    for case in 0..1000 {
        let cost = random_matrix(&mut rng, 7);
        let asg = solve_assignment(&cost);

        // injectivity
        let mut seen = vec![false; cost.cols()];
        for &j in &asg.matches {
            assert!(!seen[j], "case {case}: column {j} used twice");
            seen[j] = true;
        }
        // total is recomputable from the matched entries
        let recomputed: f64 = asg
            .matches
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.at(i, j))
            .sum();
        assert_eq!(asg.total_cost, recomputed, "case {case}");

        let oracle = brute_force_min(&cost);
        assert_eq!(
            asg.total_cost, oracle,
            "case {case}: solver {} vs oracle {oracle} on {}x{}",
            asg.total_cost,
            cost.rows(),
            cost.cols()
        );
    }
}

#[test]
fn constant_shift_moves_total_by_rows_times_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let cost = random_matrix(&mut rng, 7);
        let shift = rng.random::<f64>() * 4.0 - 2.0;
        let mut shifted_values = Vec::with_capacity(cost.rows() * cost.cols());
        for i in 0..cost.rows() {
            for j in 0..cost.cols() {
                shifted_values.push(cost.at(i, j) + shift);
            }
        }
        let shifted = CostMatrix::new(cost.rows(), cost.cols(), shifted_values).unwrap();
        let base = solve_assignment(&cost);
        let moved = solve_assignment(&shifted);
        let expect = base.total_cost + cost.rows() as f64 * shift;
        assert!(
            (moved.total_cost - expect).abs() < 1e-9,
            "shift identity violated: {} vs {expect}",
            moved.total_cost
        );
        // the base optimum stays optimal after the shift
        let base_cost_on_shifted: f64 = base
            .matches
            .iter()
            .enumerate()
            .map(|(i, &j)| shifted.at(i, j))
            .sum();
        assert!((base_cost_on_shifted - moved.total_cost).abs() < 1e-9);
    }
}

#[test]
fn column_permutation_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let cost = random_matrix(&mut rng, 7);
        let cols = cost.cols();
        // random permutation of columns
        let mut perm: Vec<usize> = (0..cols).collect();
        for i in (1..cols).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut permuted_values = Vec::with_capacity(cost.rows() * cols);
        for i in 0..cost.rows() {
            for j in 0..cols {
                permuted_values.push(cost.at(i, perm[j]));
            }
        }
        let permuted = CostMatrix::new(cost.rows(), cols, permuted_values).unwrap();

        let base = solve_assignment(&cost);
        let alt = solve_assignment(&permuted);
        assert!(
            (base.total_cost - alt.total_cost).abs() < 1e-9,
            "permutation changed the optimal cost"
        );
        // mapping the permuted matching back gives an equally cheap matching
        let mapped_cost: f64 = alt
            .matches
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.at(i, perm[j]))
            .sum();
        assert!((mapped_cost - base.total_cost).abs() < 1e-9);
    }
}

#[test]
fn unmatched_columns_are_exactly_the_surplus() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let cost = random_matrix(&mut rng, 7);
        let asg = solve_assignment(&cost);
        assert_eq!(
            asg.unmatched_columns(cost.cols()).len(),
            cost.cols() - cost.rows()
        );
    }
}
