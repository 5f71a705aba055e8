//! Sparse Cholesky for the shift-invert eigensolver: reverse Cuthill-McKee
//! reordering followed by an envelope (profile) factorization.

use std::collections::VecDeque;

use super::laplacian::CsrMatrix;
use crate::error::{Error, Result};

/// Reverse Cuthill-McKee ordering; `perm[new] = old`.
pub(crate) fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.dim();
    let degree: Vec<usize> = (0..n)
        .map(|i| a.row(i).filter(|&(j, _)| j != i).count())
        .collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_last = |start: usize, visited: &[bool]| -> usize {
        // Farthest node from `start` inside its component, for pseudo-peripheral start.
        let mut seen = visited.to_vec();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            last = v;
            for (u, _) in a.row(v) {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        last
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node exists");
        let start = bfs_last(bfs_last(seed, &visited), &visited);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = a.row(v).map(|(u, _)| u).filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// `L Lᵀ` factor of `A + diag(shift)` stored row-wise inside the envelope.
#[derive(Debug, Clone)]
pub(crate) struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    row_start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &CsrMatrix, shift: &[f64]) -> Result<Self> {
        let n = a.dim();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let first: Vec<usize> = (0..n)
            .map(|i| {
                a.row(perm[i])
                    .map(|(j, _)| inv[j])
                    .min()
                    .unwrap_or(i)
                    .min(i)
            })
            .collect();
        let mut row_start = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        for i in 0..n {
            row_start.push(total);
            total += i - first[i] + 1;
        }
        row_start.push(total);

        let mut data = vec![0.0; total];
        for i in 0..n {
            let old = perm[i];
            for (j_old, v) in a.row(old) {
                let j = inv[j_old];
                if j <= i {
                    data[row_start[i] + j - first[i]] += v;
                }
            }
            data[row_start[i] + i - first[i]] += shift[old];
        }

        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let ri = row_start[i] - fi;
                let rj = row_start[j] - fj;
                let mut s = data[ri + j];
                for k in lo..j {
                    s -= data[ri + k] * data[rj + k];
                }
                if j < i {
                    s /= data[rj + j];
                    data[ri + j] = s;
                } else {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite {
                            pivot: old_index(&perm, i),
                            value: s,
                        });
                    }
                    data[ri + i] = s.sqrt();
                }
            }
        }
        Ok(EnvelopeCholesky {
            perm,
            first,
            row_start,
            data,
        })
    }

    /// Solves `(A + diag(shift)) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let ri = self.row_start[i] - fi;
            let mut s = y[i];
            for k in fi..i {
                s -= self.data[ri + k] * y[k];
            }
            y[i] = s / self.data[ri + i];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let ri = self.row_start[i] - fi;
            y[i] /= self.data[ri + i];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.data[ri + k] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    #[cfg(test)]
    fn envelope_size(&self) -> usize {
        self.data.len()
    }
}

fn old_index(perm: &[usize], new: usize) -> usize {
    perm[new]
}
