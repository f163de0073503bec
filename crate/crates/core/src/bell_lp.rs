//! Membership in the shared-randomness polytope, the convex hull of
//! deterministic factorized policies.
//!
//! A phase-one simplex over the vertex weights either finds a convex
//! decomposition of the policy or, through its dual, a linear inequality
//! that every vertex satisfies and the policy violates.

use crate::error::{Error, Result};
use crate::games::{classical_optimum, NonlocalGame};
use crate::policies::{FiniteHistorySpace, JointPolicy};

/// Largest number of vertices [`enumerate_vertices`] will produce.
pub const VERTEX_BUDGET: u128 = 1_000_000;
/// A decomposition with larger residual is not accepted as inside.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Violations at or below this are reported as inside (boundary).
pub const VIOLATION_FLOOR: f64 = 1e-7;

const PIVOT_TOL: f64 = 1e-12;
const REDUCED_COST_TOL: f64 = 1e-12;
const VERIFY_WEIGHT_TOL: f64 = 1e-8;

/// Conditional probabilities `π(a|h)` flattened as `[h * A + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    values: Vec<f64>,
}

impl PolicyTable {
    pub fn new(space: &FiniteHistorySpace, values: Vec<f64>) -> Result<Self> {
        let (nh, na) = (space.num_joint_histories(), space.num_joint_actions());
        if values.len() != nh * na {
            return Err(Error::Shape(format!(
                "policy table needs {} entries",
                nh * na
            )));
        }
        for row in values.chunks_exact(na) {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Shape(format!("row {row:?} is not a distribution")));
            }
        }
        Ok(Self { values })
    }

    pub fn from_policy(policy: &dyn JointPolicy<f64>) -> Result<Self> {
        let values = policy.distribution_table()?.into_iter().flatten().collect();
        Self::new(policy.space(), values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn vertex_count(space: &FiniteHistorySpace) -> u128 {
    (0..space.agents())
        .map(|i| (space.actions()[i] as u128).pow(space.histories()[i] as u32))
        .product()
}

/// Deterministic strategy of vertex `index`: `profile[i][hᵢ]`.
pub fn vertex_profile(space: &FiniteHistorySpace, mut index: usize) -> Vec<Vec<usize>> {
    let n = space.agents();
    let mut profile: Vec<Vec<usize>> = (0..n).map(|i| vec![0; space.histories()[i]]).collect();
    for i in (0..n).rev() {
        for h in (0..space.histories()[i]).rev() {
            let m = space.actions()[i];
            profile[i][h] = index % m;
            index /= m;
        }
    }
    profile
}

fn vertex_table(space: &FiniteHistorySpace, profile: &[Vec<usize>]) -> Vec<f64> {
    let na = space.num_joint_actions();
    let mut t = vec![0.0; space.num_joint_histories() * na];
    for hk in 0..space.num_joint_histories() {
        let h = space.history(hk);
        let a: Vec<usize> = (0..space.agents()).map(|i| profile[i][h[i]]).collect();
        t[hk * na + space.action_index(&a)] = 1.0;
    }
    t
}

/// All deterministic factorized policies as 0/1 tables, in the order used by
/// [`vertex_profile`].
pub fn enumerate_vertices(space: &FiniteHistorySpace) -> Result<Vec<PolicyTable>> {
    let count = vertex_count(space);
    if count > VERTEX_BUDGET {
        return Err(Error::BudgetExceeded {
            needed: count,
            budget: VERTEX_BUDGET,
        });
    }
    Ok((0..count as usize)
        .map(|k| PolicyTable {
            values: vertex_table(space, &vertex_profile(space, k)),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Inside,
    Outside,
}

/// `c·v ≤ bound` for every vertex `v`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperplane {
    pub coefficients: Vec<f64>,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BellCertificate {
    pub verdict: Verdict,
    /// `(vertex index, weight)` pairs of a convex decomposition (inside only).
    pub weights: Vec<(usize, f64)>,
    /// Separating inequality (outside only).
    pub hyperplane: Option<Hyperplane>,
    /// `c·p − bound` when a hyperplane is present, otherwise 0.
    pub violation: f64,
    /// Max-norm error of the decomposition (inside only).
    pub residual: f64,
    /// True when the LP found no decomposition but the violation was below
    /// [`VIOLATION_FLOOR`].
    pub boundary: bool,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `rows + 1` rows of `cols + 1` entries; the last row holds reduced
    /// costs and the last column the right-hand side.
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.cols + 1;
        let p = self.at(pr, pc);
        for c in 0..w {
            self.data[pr * w + c] /= p;
        }
        let (before, rest) = self.data.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        for row in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = row[pc];
            if f != 0.0 {
                for (x, &y) in row.iter_mut().zip(prow.iter()) {
                    *x -= f * y;
                }
                row[pc] = 0.0;
            }
        }
        self.basis[pr] = pc;
    }

    /// Bland's rule until optimal.
    fn solve(&mut self, max_iter: usize) -> Result<()> {
        let obj = self.rows;
        for _ in 0..max_iter {
            let Some(pc) = (0..self.cols).find(|&c| self.at(obj, c) < -REDUCED_COST_TOL) else {
                return Ok(());
            };
            let mut pr: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    let ratio = self.at(r, self.cols) / a;
                    pr = match pr {
                        None => Some((r, ratio)),
                        Some((br, bv)) => {
                            if ratio < bv - 1e-15
                                || (ratio <= bv + 1e-15 && self.basis[r] < self.basis[br])
                            {
                                Some((r, ratio))
                            } else {
                                Some((br, bv))
                            }
                        }
                    };
                }
            }
            let Some((pr, _)) = pr else {
                return Err(Error::Lp("phase-one problem reported unbounded".into()));
            };
            self.pivot(pr, pc);
        }
        Err(Error::Lp(format!(
            "no convergence within {max_iter} pivots"
        )))
    }
}

/// Decides whether `p` is a mixture of deterministic factorized policies.
pub fn membership(p: &PolicyTable, space: &FiniteHistorySpace) -> Result<BellCertificate> {
    let vertices = enumerate_vertices(space)?;
    let dim = p.values.len();
    if vertices.first().map(|v| v.values.len()) != Some(dim) {
        return Err(Error::Shape("policy table does not match the space".into()));
    }
    let nv = vertices.len();
    let rows = dim + 1;
    let cols = nv + rows;
    let w = cols + 1;
    let mut data = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        for (v, vert) in vertices.iter().enumerate() {
            data[r * w + v] = if r < dim { vert.values[r] } else { 1.0 };
        }
        data[r * w + nv + r] = 1.0;
        data[r * w + cols] = if r < dim { p.values[r].max(0.0) } else { 1.0 };
    }
    // Reduced costs for the all-artificial starting basis.
    for c in 0..=cols {
        if (nv..cols).contains(&c) {
            continue;
        }
        let s: f64 = (0..rows).map(|r| data[r * w + c]).sum();
        data[rows * w + c] = -s;
    }
    let mut tab = Tableau {
        rows,
        cols,
        data,
        basis: (nv..cols).collect(),
    };
    tab.solve(100_000 + 50 * cols)?;

    let mut weights: Vec<(usize, f64)> = (0..rows)
        .filter(|&r| tab.basis[r] < nv)
        .map(|r| (tab.basis[r], tab.at(r, cols).max(0.0)))
        .filter(|&(_, x)| x > 0.0)
        .collect();
    weights.sort_by_key(|&(v, _)| v);
    let residual = decomposition_residual(&weights, &vertices, p);
    if residual <= FEASIBILITY_TOL {
        return Ok(BellCertificate {
            verdict: Verdict::Inside,
            weights,
            hyperplane: None,
            violation: 0.0,
            residual,
            boundary: false,
        });
    }

    // Farkas certificate from the phase-one duals y_i = 1 − r(artificial_i).
    let y: Vec<f64> = (0..rows).map(|r| 1.0 - tab.at(rows, nv + r)).collect();
    let mut coefficients = y[..dim].to_vec();
    let scale = coefficients.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale > 0.0 {
        for c in coefficients.iter_mut() {
            *c /= scale;
        }
    }
    let bound = vertices
        .iter()
        .map(|v| dot(&coefficients, &v.values))
        .fold(f64::NEG_INFINITY, f64::max);
    let violation = dot(&coefficients, &p.values) - bound;
    if violation > VIOLATION_FLOOR {
        Ok(BellCertificate {
            verdict: Verdict::Outside,
            weights: Vec::new(),
            hyperplane: Some(Hyperplane {
                coefficients,
                bound,
            }),
            violation,
            residual,
            boundary: false,
        })
    } else {
        Ok(BellCertificate {
            verdict: Verdict::Inside,
            weights,
            hyperplane: None,
            violation: 0.0,
            residual,
            boundary: true,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn decomposition_residual(
    weights: &[(usize, f64)],
    vertices: &[PolicyTable],
    p: &PolicyTable,
) -> f64 {
    let mut mix = vec![0.0; p.values.len()];
    let mut total = 0.0;
    for &(v, x) in weights {
        total += x;
        for (m, &t) in mix.iter_mut().zip(&vertices[v].values) {
            *m += x * t;
        }
    }
    mix.iter()
        .zip(&p.values)
        .map(|(m, q)| (m - q).abs())
        .fold((total - 1.0).abs(), f64::max)
}

/// Re-checks a certificate by direct arithmetic.
pub fn verify_certificate(
    cert: &BellCertificate,
    p: &PolicyTable,
    space: &FiniteHistorySpace,
) -> bool {
    let Ok(vertices) = enumerate_vertices(space) else {
        return false;
    };
    if vertices.first().map(|v| v.values.len()) != Some(p.values.len()) {
        return false;
    }
    match cert.verdict {
        Verdict::Inside => {
            cert.weights
                .iter()
                .all(|&(v, x)| v < vertices.len() && x >= 0.0)
                && decomposition_residual(&cert.weights, &vertices, p) <= VERIFY_WEIGHT_TOL
        }
        Verdict::Outside => {
            let Some(h) = &cert.hyperplane else {
                return false;
            };
            if h.coefficients.len() != p.values.len() {
                return false;
            }
            let slack = 1e-12 * (1.0 + h.bound.abs());
            vertices
                .iter()
                .all(|v| dot(&h.coefficients, &v.values) <= h.bound + slack)
                && dot(&h.coefficients, &p.values) - h.bound >= cert.violation - 1e-9
                && cert.violation > 0.0
        }
    }
}

/// Certificate from the game's own Bell inequality: coefficients
/// `μ(h)V(a|h)` and the classical optimum as bound, so the violation is the
/// win probability in excess of what any shared-randomness policy attains.
pub fn game_certificate(game: &NonlocalGame, p: &PolicyTable) -> Result<BellCertificate> {
    let space = game.space();
    let na = space.num_joint_actions();
    if p.values.len() != space.num_joint_histories() * na {
        return Err(Error::Shape("policy table does not match the game".into()));
    }
    let coefficients: Vec<f64> = (0..p.values.len())
        .map(|k| {
            let (h, a) = (k / na, k % na);
            if game.wins_flat(h, a) {
                game.mu_table()[h]
            } else {
                0.0
            }
        })
        .collect();
    let bound = classical_optimum(game)?.value;
    let violation = dot(&coefficients, &p.values) - bound;
    let outside = violation > VIOLATION_FLOOR;
    Ok(BellCertificate {
        verdict: if outside {
            Verdict::Outside
        } else {
            Verdict::Inside
        },
        weights: Vec::new(),
        hyperplane: outside.then_some(Hyperplane {
            coefficients,
            bound,
        }),
        violation: if outside { violation } else { 0.0 },
        residual: f64::NAN,
        boundary: false,
    })
}
