//! Rigid primitives and their penalty penetration depth.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Solid where `normal · x < offset`; `normal` is unit length.
    HalfSpace { normal: [f64; 3], offset: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half: [f64; 3] },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Depth, its gradient and its Hessian at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthJet {
    pub depth: f64,
    pub grad: [f64; 3],
    pub hess: [[f64; 3]; 3],
}

impl Primitive {
    pub fn translated(&self, t: [f64; 3]) -> Primitive {
        let add = |a: [f64; 3]| [a[0] + t[0], a[1] + t[1], a[2] + t[2]];
        match *self {
            Primitive::HalfSpace { normal, offset } => Primitive::HalfSpace {
                normal,
                offset: offset + dot(normal, t),
            },
            Primitive::Sphere { center, radius } => Primitive::Sphere { center: add(center), radius },
            Primitive::Box { center, half } => Primitive::Box { center: add(center), half },
        }
    }

    /// How far `x` lies inside the primitive; 0 outside.
    pub fn penetration_depth(&self, x: [f64; 3]) -> f64 {
        self.jet(x).map_or(0.0, |j| j.depth)
    }

    /// Depth with derivatives, or `None` when `x` is not inside.
    pub fn jet(&self, x: [f64; 3]) -> Option<DepthJet> {
        match *self {
            Primitive::HalfSpace { normal, offset } => {
                let depth = offset - dot(normal, x);
                (depth > 0.0).then(|| DepthJet {
                    depth,
                    grad: [-normal[0], -normal[1], -normal[2]],
                    hess: [[0.0; 3]; 3],
                })
            }
            Primitive::Sphere { center, radius } => {
                let d = sub(x, center);
                let rho = libm::sqrt(dot(d, d));
                let depth = radius - rho;
                if depth <= 0.0 || rho == 0.0 {
                    return None;
                }
                let u = [d[0] / rho, d[1] / rho, d[2] / rho];
                let mut hess = [[0.0; 3]; 3];
                for (a, row) in hess.iter_mut().enumerate() {
                    for (b, h) in row.iter_mut().enumerate() {
                        let id = if a == b { 1.0 } else { 0.0 };
                        *h = -(id - u[a] * u[b]) / rho;
                    }
                }
                Some(DepthJet {
                    depth,
                    grad: [-u[0], -u[1], -u[2]],
                    hess,
                })
            }
            Primitive::Box { center, half } => {
                let d = sub(x, center);
                let mut best = (f64::INFINITY, 0);
                for a in 0..3 {
                    let gap = half[a] - d[a].abs();
                    if gap < best.0 {
                        best = (gap, a);
                    }
                }
                let (depth, a) = best;
                if depth <= 0.0 {
                    return None;
                }
                let mut grad = [0.0; 3];
                grad[a] = if d[a] >= 0.0 { -1.0 } else { 1.0 };
                Some(DepthJet {
                    depth,
                    grad,
                    hess: [[0.0; 3]; 3],
                })
            }
        }
    }

    /// Points on the surface used to represent the primitive in scenes.
    pub fn surface_points(&self, count: usize) -> Vec<[f64; 3]> {
        match *self {
            Primitive::Sphere { center, radius } => fibonacci_sphere(count)
                .into_iter()
                .map(|u| [center[0] + radius * u[0], center[1] + radius * u[1], center[2] + radius * u[2]])
                .collect(),
            Primitive::Box { center, half } => {
                let mut out = Vec::with_capacity(26);
                for k in -1i32..=1 {
                    for j in -1i32..=1 {
                        for i in -1i32..=1 {
                            if (i, j, k) != (0, 0, 0) {
                                out.push([
                                    center[0] + i as f64 * half[0],
                                    center[1] + j as f64 * half[1],
                                    center[2] + k as f64 * half[2],
                                ]);
                            }
                        }
                    }
                }
                out
            }
            Primitive::HalfSpace { normal, offset } => {
                let base = [normal[0] * offset, normal[1] * offset, normal[2] * offset];
                let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
                let t1 = normalize(cross(normal, helper));
                let t2 = cross(normal, t1);
                let mut out = Vec::with_capacity(9);
                for j in -1i32..=1 {
                    for i in -1i32..=1 {
                        out.push([
                            base[0] + i as f64 * t1[0] + j as f64 * t2[0],
                            base[1] + i as f64 * t1[1] + j as f64 * t2[1],
                            base[2] + i as f64 * t1[2] + j as f64 * t2[2],
                        ]);
                    }
                }
                out
            }
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = libm::sqrt(dot(a, a));
    [a[0] / n, a[1] / n, a[2] / n]
}

fn fibonacci_sphere(count: usize) -> Vec<[f64; 3]> {
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = libm::sqrt(1.0 - z * z);
            let phi = golden * i as f64;
            [r * libm::cos(phi), r * libm::sin(phi), z]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_examples() {
        let plane = Primitive::HalfSpace {
            normal: [0.0, 0.0, 1.0],
            offset: 0.0,
        };
        assert_eq!(plane.penetration_depth([3.0, -2.0, 0.0]), 0.0);
        assert!((plane.penetration_depth([0.0, 0.0, -0.1]) - 0.1).abs() < 1e-15);
        assert_eq!(plane.penetration_depth([0.0, 0.0, 0.5]), 0.0);

        let sphere = Primitive::Sphere {
            center: [1.0, 1.0, 1.0],
            radius: 0.8,
        };
        assert!((sphere.penetration_depth([1.4, 1.0, 1.0]) - 0.4).abs() < 1e-15);
        assert_eq!(sphere.penetration_depth([3.0, 1.0, 1.0]), 0.0);

        let b = Primitive::Box {
            center: [0.0; 3],
            half: [1.0, 2.0, 3.0],
        };
        assert!((b.penetration_depth([0.75, 0.0, 0.0]) - 0.25).abs() < 1e-15);
        assert_eq!(b.penetration_depth([1.5, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn depth_is_continuous_across_the_surface() {
        let sphere = Primitive::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        };
        for eps in [1e-3, 1e-6, 1e-9] {
            assert!(sphere.penetration_depth([1.0 - eps, 0.0, 0.0]) <= eps * 1.000_001);
        }
    }

    #[test]
    fn jets_match_finite_differences() {
        let prims = [
            Primitive::HalfSpace {
                normal: [0.6, 0.0, 0.8],
                offset: 0.5,
            },
            Primitive::Sphere {
                center: [0.1, -0.2, 0.3],
                radius: 1.0,
            },
            Primitive::Box {
                center: [0.0; 3],
                half: [0.5, 0.7, 0.9],
            },
        ];
        let x = [0.2, 0.1, 0.05];
        for p in prims {
            let j = p.jet(x).unwrap();
            for d in 0..3 {
                let h = 1e-6;
                let (mut xp, mut xm) = (x, x);
                xp[d] += h;
                xm[d] -= h;
                let fd = (p.penetration_depth(xp) - p.penetration_depth(xm)) / (2.0 * h);
                assert!((fd - j.grad[d]).abs() < 1e-7, "{p:?} axis {d}");
                let gp = p.jet(xp).unwrap().grad;
                let gm = p.jet(xm).unwrap().grad;
                for e in 0..3 {
                    let fd2 = (gp[e] - gm[e]) / (2.0 * h);
                    assert!((fd2 - j.hess[d][e]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn translation_moves_depth_field() {
        let b = Primitive::Box {
            center: [0.0; 3],
            half: [1.0; 3],
        };
        let t = [0.3, -0.2, 0.5];
        let x = [0.4, 0.1, -0.2];
        let moved = [x[0] + t[0], x[1] + t[1], x[2] + t[2]];
        assert!((b.penetration_depth(x) - b.translated(t).penetration_depth(moved)).abs() < 1e-15);
        let s = Primitive::HalfSpace {
            normal: [0.0, 0.0, 1.0],
            offset: 1.0,
        };
        assert!((s.penetration_depth(x) - s.translated(t).penetration_depth(moved)).abs() < 1e-15);
    }
}
