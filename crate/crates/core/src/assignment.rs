//! Square linear assignment via the Hungarian method (shortest augmenting
//! paths with row/column potentials), generic over any totally ordered
//! additive cost group.
//!
//! The generic form lets the edit planner solve over lexicographic cost
//! vectors, so "infinite" and tie-breaking components stay exact.

use std::ops::{Add, Sub};

pub trait AssignmentCost: Copy + Ord + Add<Output = Self> + Sub<Output = Self> {
    fn zero() -> Self;
    /// Larger than any reduced cost the solver can encounter.
    fn unbounded() -> Self;
}

impl AssignmentCost for i64 {
    fn zero() -> Self {
        0
    }

    fn unbounded() -> Self {
        i64::MAX / 4
    }
}

/// Cost vector compared lexicographically, added componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LexCost<const N: usize>(pub [i64; N]);

impl<const N: usize> Add for LexCost<N> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        LexCost(out)
    }
}

impl<const N: usize> Sub for LexCost<N> {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o -= r;
        }
        LexCost(out)
    }
}

impl<const N: usize> AssignmentCost for LexCost<N> {
    fn zero() -> Self {
        LexCost([0; N])
    }

    fn unbounded() -> Self {
        let mut v = [0; N];
        if N > 0 {
            v[0] = i64::MAX / 4;
        }
        LexCost(v)
    }
}

/// Returns `assignment[row] = column` minimizing the summed cost.
///
/// `costs` must be square. Runs in O(n^3).
pub fn solve<C: AssignmentCost>(costs: &[Vec<C>]) -> Vec<usize> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(costs.iter().all(|row| row.len() == n), "cost matrix must be square");

    let inf = C::unbounded();
    // 1-based with a virtual column 0, as in the classic formulation
    let mut u = vec![C::zero(); n + 1];
    let mut v = vec![C::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = inf;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = costs[r - 1][col - 1] - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] = u[owner[col]] + delta;
                    v[col] = v[col] - delta;
                } else {
                    minv[col] = minv[col] - delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    assignment
}

pub fn total<C: AssignmentCost>(costs: &[Vec<C>], assignment: &[usize]) -> C {
    assignment
        .iter()
        .enumerate()
        .fold(C::zero(), |acc, (r, &c)| acc + costs[r][c])
}
