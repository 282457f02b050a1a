//! Quasi-static equilibrium of a spring system pressed by rigid primitives.
//!
//! Minimizes
//!
//! ```text
//! E(x) = Σ_springs ½ κ (|x_p − x_q| − L₀)² + Σ_points Σ_prims ½ k_c depth(x)²
//! ```
//!
//! over the free points with damped Newton steps (Levenberg–Marquardt
//! shift, Armijo backtracking).

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lattice::{Spring, SpringSystem};
use super::primitive::Primitive;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop once `‖∇E‖∞` over free coordinates is below this.
    pub tol: f64,
    pub max_iters: usize,
    pub contact_stiffness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub energy: f64,
    /// Energy after every accepted step, starting with the initial state.
    pub energy_trace: Vec<f64>,
}

/// Energy of the system at `x`.
pub fn energy(springs: &[Spring], prims: &[Primitive], k_c: f64, x: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for s in springs {
        let l = dist(x[s.p], x[s.q]);
        e += 0.5 * s.stiffness * (l - s.rest_length) * (l - s.rest_length);
    }
    for &p in x {
        for prim in prims {
            let d = prim.penetration_depth(p);
            e += 0.5 * k_c * d * d;
        }
    }
    e
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    libm::sqrt((0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum())
}

/// Full gradient (pinned points included).
pub fn gradient(springs: &[Spring], prims: &[Primitive], k_c: f64, x: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut g = vec![[0.0; 3]; x.len()];
    for s in springs {
        let d = [x[s.q][0] - x[s.p][0], x[s.q][1] - x[s.p][1], x[s.q][2] - x[s.p][2]];
        let l = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        if l == 0.0 {
            continue;
        }
        let f = s.stiffness * (l - s.rest_length) / l;
        for a in 0..3 {
            g[s.q][a] += f * d[a];
            g[s.p][a] -= f * d[a];
        }
    }
    for (i, &p) in x.iter().enumerate() {
        for prim in prims {
            if let Some(j) = prim.jet(p) {
                for a in 0..3 {
                    g[i][a] += k_c * j.depth * j.grad[a];
                }
            }
        }
    }
    g
}

/// Per-point share of spring energy: each spring gives half its energy to
/// each endpoint.
pub fn point_energy(springs: &[Spring], x: &[[f64; 3]]) -> Vec<f64> {
    let mut e = vec![0.0; x.len()];
    for s in springs {
        let l = dist(x[s.p], x[s.q]);
        let half = 0.25 * s.stiffness * (l - s.rest_length) * (l - s.rest_length);
        e[s.p] += half;
        e[s.q] += half;
    }
    e
}

/// Largest gradient entry over unpinned points.
pub fn free_residual(g: &[[f64; 3]], pinned: &[bool]) -> f64 {
    g.iter()
        .zip(pinned)
        .filter(|(_, &p)| !p)
        .flat_map(|(g, _)| g.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
}

fn hessian(springs: &[Spring], prims: &[Primitive], k_c: f64, x: &[[f64; 3]], slot: &[Option<usize>], n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::<f64>::zeros(n, n);
    let add_block = |h: &mut DMatrix<f64>, a: usize, b: usize, m: &[[f64; 3]; 3], sign: f64| {
        if let (Some(ia), Some(ib)) = (slot[a], slot[b]) {
            for r in 0..3 {
                for c in 0..3 {
                    h[(3 * ia + r, 3 * ib + c)] += sign * m[r][c];
                }
            }
        }
    };
    for s in springs {
        let d = [x[s.q][0] - x[s.p][0], x[s.q][1] - x[s.p][1], x[s.q][2] - x[s.p][2]];
        let l = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        if l == 0.0 {
            continue;
        }
        let u = [d[0] / l, d[1] / l, d[2] / l];
        let t = 1.0 - s.rest_length / l;
        let mut k = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { 1.0 } else { 0.0 };
                k[r][c] = s.stiffness * (u[r] * u[c] + t * (id - u[r] * u[c]));
            }
        }
        add_block(&mut h, s.p, s.p, &k, 1.0);
        add_block(&mut h, s.q, s.q, &k, 1.0);
        add_block(&mut h, s.p, s.q, &k, -1.0);
        add_block(&mut h, s.q, s.p, &k, -1.0);
    }
    for (i, &p) in x.iter().enumerate() {
        for prim in prims {
            if let Some(j) = prim.jet(p) {
                let mut k = [[0.0; 3]; 3];
                for r in 0..3 {
                    for c in 0..3 {
                        k[r][c] = k_c * (j.grad[r] * j.grad[c] + j.depth * j.hess[r][c]);
                    }
                }
                add_block(&mut h, i, i, &k, 1.0);
            }
        }
    }
    h
}

/// Equilibrium positions reached from `start`. Pinned points stay put.
pub fn solve_quasistatic(
    system: &SpringSystem,
    pinned: &[bool],
    prims: &[Primitive],
    start: &[[f64; 3]],
    cfg: &SolverConfig,
) -> Result<(Vec<[f64; 3]>, SolveReport)> {
    let n_pts = system.len();
    if start.len() != n_pts || pinned.len() != n_pts {
        return Err(Error::Config("solver start state and pin mask must match the system".into()));
    }
    if start.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "solve_quasistatic", index: 0 });
    }
    let springs = &system.springs;
    let k_c = cfg.contact_stiffness;
    let mut slot = vec![None; n_pts];
    let mut free = 0;
    for (i, &p) in pinned.iter().enumerate() {
        if !p {
            slot[i] = Some(free);
            free += 1;
        }
    }
    let n = 3 * free;

    let mut x = start.to_vec();
    let mut e = energy(springs, prims, k_c, &x);
    let mut g = gradient(springs, prims, k_c, &x);
    let mut residual = free_residual(&g, pinned);
    let mut trace = vec![e];
    let mut lambda = 1e-6;
    let mut iterations = 0;

    while residual >= cfg.tol {
        if iterations >= cfg.max_iters {
            return Err(Error::NonConvergence { iterations, residual });
        }
        iterations += 1;
        let mut grad = DVector::<f64>::zeros(n);
        for (i, s) in slot.iter().enumerate() {
            if let Some(s) = *s {
                for a in 0..3 {
                    grad[3 * s + a] = g[i][a];
                }
            }
        }
        let mut h = hessian(springs, prims, k_c, &x, &slot, n);
        let scale = (0..n).map(|i| h[(i, i)].abs()).fold(1e-12, f64::max);
        for i in 0..n {
            h[(i, i)] += lambda * scale;
        }
        let Some(chol) = h.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let dir = -chol.solve(&grad);
        let slope = grad.dot(&dir);

        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..40 {
            let mut trial = x.clone();
            for (i, s) in slot.iter().enumerate() {
                if let Some(s) = *s {
                    for a in 0..3 {
                        trial[i][a] += t * dir[3 * s + a];
                    }
                }
            }
            let e_new = energy(springs, prims, k_c, &trial);
            let armijo = e_new <= e + 1e-4 * t * slope;
            // At the round-off floor the energy cannot resolve progress, so a
            // step that leaves it unchanged and shrinks the gradient is kept.
            let flat = (e_new - e).abs() <= 1e-14 * e.abs().max(1e-300);
            let g_new = gradient(springs, prims, k_c, &trial);
            let r_new = free_residual(&g_new, pinned);
            if armijo || (flat && r_new < residual) {
                x = trial;
                e = e_new;
                g = g_new;
                residual = r_new;
                trace.push(e);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if accepted {
            lambda = (lambda / 3.0).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Err(Error::NonConvergence { iterations, residual });
            }
        }
    }
    Ok((
        x,
        SolveReport {
            iterations,
            residual,
            energy: e,
            energy_trace: trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::lattice::build_lattice;

    fn cfg() -> SolverConfig {
        SolverConfig {
            tol: 1e-10,
            max_iters: 200,
            contact_stiffness: 1000.0,
        }
    }

    #[test]
    fn rest_state_is_already_converged() {
        let sys = build_lattice([3, 3, 2], 0.5, [0.0; 3], 1.0, 0.2, 4).unwrap();
        let pinned = vec![false; sys.len()];
        let (x, rep) = solve_quasistatic(&sys, &pinned, &[], &sys.rest_positions, &cfg()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(x, sys.rest_positions);
    }

    #[test]
    fn released_spring_returns_to_rest_length() {
        let sys = SpringSystem {
            rest_positions: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            springs: vec![Spring {
                p: 0,
                q: 1,
                rest_length: 1.0,
                stiffness: 3.0,
            }],
            material: vec![1.0, 1.0],
        };
        let start = [[0.0, 0.0, 0.0], [1.7, 0.2, -0.1]];
        let (x, rep) = solve_quasistatic(&sys, &[false, false], &[], &start, &cfg()).unwrap();
        // Closed form: the energy gradient is κ (l − L₀) along the spring.
        assert!((dist(x[0], x[1]) - 1.0).abs() * 3.0 < 1e-10);
        assert!(rep.residual < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sys = build_lattice([2, 2, 2], 0.5, [0.0; 3], 1.5, 0.3, 2).unwrap();
        let prims = [
            Primitive::Sphere {
                center: [0.25, 0.25, 1.0],
                radius: 0.6,
            },
            Primitive::Box {
                center: [-0.04, 0.25, 0.25],
                half: [0.1, 0.5, 0.5],
            },
        ];
        let x: Vec<[f64; 3]> = sys
            .rest_positions
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + 0.03 * (i as f64).sin(), p[1] - 0.02 * (i as f64).cos(), p[2] + 0.01 * i as f64])
            .collect();
        let g = gradient(&sys.springs, &prims, 100.0, &x);
        for i in 0..x.len() {
            for a in 0..3 {
                let h = 1e-6;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i][a] += h;
                xm[i][a] -= h;
                let fd = (energy(&sys.springs, &prims, 100.0, &xp) - energy(&sys.springs, &prims, 100.0, &xm)) / (2.0 * h);
                assert!((fd - g[i][a]).abs() < 1e-6, "point {i} axis {a}: {fd} vs {}", g[i][a]);
            }
        }
    }

    #[test]
    fn pressed_plane_energy_bound_and_monotone_energy() {
        let sys = build_lattice([3, 3, 3], 0.5, [0.0; 3], 1.0, 0.1, 5).unwrap();
        let pinned: Vec<bool> = sys.rest_positions.iter().map(|p| p[2] == 0.0).collect();
        // Solid above z = 0.9 pressing down on the top face at z = 1.
        let plane = Primitive::HalfSpace {
            normal: [0.0, 0.0, -1.0],
            offset: -0.9,
        };
        let c = cfg();
        let (x, rep) = solve_quasistatic(&sys, &pinned, &[plane], &sys.rest_positions, &c).unwrap();
        assert!(rep.residual < c.tol);
        let bound = libm::sqrt(2.0 * rep.energy / c.contact_stiffness);
        for p in &x {
            assert!(plane.penetration_depth(*p) <= bound);
        }
        assert!(x.iter().any(|p| plane.penetration_depth(*p) > 0.0));
        for w in rep.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-14 * w[0].abs());
        }
        let g = gradient(&sys.springs, &[plane], c.contact_stiffness, &x);
        assert!(free_residual(&g, &pinned) < c.tol);
    }

    #[test]
    fn reports_non_convergence() {
        let sys = build_lattice([3, 3, 3], 0.5, [0.0; 3], 1.0, 0.1, 5).unwrap();
        let pinned: Vec<bool> = sys.rest_positions.iter().map(|p| p[2] == 0.0).collect();
        let plane = Primitive::HalfSpace {
            normal: [0.0, 0.0, -1.0],
            offset: -0.8,
        };
        let c = SolverConfig { max_iters: 1, ..cfg() };
        assert!(matches!(
            solve_quasistatic(&sys, &pinned, &[plane], &sys.rest_positions, &c),
            Err(Error::NonConvergence { .. })
        ));
    }
}
