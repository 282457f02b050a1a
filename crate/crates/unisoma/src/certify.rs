//! Re-checks oracle equilibria from the energy definition alone.
//!
//! Written separately from the solver's gradient code so a bug in one does
//! not hide in the other.

use std::path::Path;

use unisoma_core::scene::{SceneSample, GEOMETRY};
use unisoma_core::worlds::Primitive;

use crate::error::{Error, Result};

/// Largest free-point gradient entry an emitted sample may have.
pub const CERTIFICATE_TOL: f64 = 1e-8;

fn depth_and_normal(prim: &Primitive, x: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *prim {
        Primitive::HalfSpace { normal, offset } => {
            let d = offset - (normal[0] * x[0] + normal[1] * x[1] + normal[2] * x[2]);
            (d > 0.0).then_some((d, [-normal[0], -normal[1], -normal[2]]))
        }
        Primitive::Sphere { center, radius } => {
            let r = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
            let dist = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            let d = radius - dist;
            if d <= 0.0 {
                return None;
            }
            if dist == 0.0 {
                return Some((d, [0.0; 3]));
            }
            Some((d, [-r[0] / dist, -r[1] / dist, -r[2] / dist]))
        }
        Primitive::Box { center, half } => {
            let mut best: Option<(f64, usize, f64)> = None;
            for axis in 0..3 {
                let off = x[axis] - center[axis];
                let gap = half[axis] - off.abs();
                if gap <= 0.0 {
                    return None;
                }
                if best.is_none_or(|(g, _, _)| gap < g) {
                    best = Some((gap, axis, if off >= 0.0 { 1.0 } else { -1.0 }));
                }
            }
            let (gap, axis, sign) = best?;
            let mut n = [0.0; 3];
            n[axis] = -sign;
            Some((gap, n))
        }
    }
}

/// Target geometry the certificate refers to, concatenated over solids.
fn certified_state(sample: &SceneSample) -> std::result::Result<Vec<[f64; 3]>, String> {
    let cert = sample.certificate.as_ref().ok_or("sample carries no oracle certificate")?;
    let mut x = Vec::new();
    for name in &cert.solids {
        let i = sample
            .deformables
            .iter()
            .position(|d| &d.name == name)
            .ok_or_else(|| format!("certificate names unknown solid `{name}`"))?;
        let target = &sample.targets[i];
        let q = target.quantity(GEOMETRY).ok_or("target has no geometry quantity")?;
        for r in 0..target.values.rows() {
            let row = &target.values.row(r)[q.start..q.start + 3];
            x.push([row[0], row[1], row[2]]);
        }
    }
    Ok(x)
}

/// `‖∇E‖∞` over the free points of the certified state.
pub fn residual(sample: &SceneSample) -> std::result::Result<f64, String> {
    let cert = sample.certificate.as_ref().ok_or("sample carries no oracle certificate")?;
    let x = certified_state(sample)?;
    let mut g = vec![[0.0f64; 3]; x.len()];
    for s in &cert.springs {
        if s.p >= x.len() || s.q >= x.len() {
            return Err(format!("spring ({}, {}) references a missing point", s.p, s.q));
        }
        let d = [x[s.p][0] - x[s.q][0], x[s.p][1] - x[s.q][1], x[s.p][2] - x[s.q][2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if len == 0.0 {
            continue;
        }
        let f = s.stiffness * (len - s.rest_length) / len;
        for a in 0..3 {
            g[s.p][a] += f * d[a];
            g[s.q][a] -= f * d[a];
        }
    }
    for prim in &cert.primitives {
        for (p, gp) in x.iter().zip(g.iter_mut()) {
            if let Some((depth, n)) = depth_and_normal(prim, *p) {
                for a in 0..3 {
                    gp[a] += cert.contact_stiffness * depth * n[a];
                }
            }
        }
    }
    for &p in &cert.pinned {
        if p >= g.len() {
            return Err(format!("pinned point {p} is out of range"));
        }
        g[p] = [0.0; 3];
    }
    Ok(g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Fails unless every frame's certificate holds at [`CERTIFICATE_TOL`].
pub fn verify_frames(frames: &[SceneSample], path: &Path) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in frames {
        let r = residual(s).map_err(|m| Error::invalid(path, unisoma_core::Error::InvalidScene(m)))?;
        if !(r < CERTIFICATE_TOL) {
            return Err(Error::Certificate {
                path: path.to_path_buf(),
                residual: r,
                tol: CERTIFICATE_TOL,
            });
        }
        worst = worst.max(r);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use unisoma_core::worlds::{certificate_residual, generate_trajectory, ScenarioConfig};

    #[test]
    fn agrees_with_the_solver_gradient() {
        for cfg in [ScenarioConfig::cavity_grip(), ScenarioConfig::bilateral_press()] {
            let cfg = ScenarioConfig { steps: 3, ..cfg };
            for s in generate_trajectory(&cfg, 11).unwrap() {
                let ours = residual(&s).unwrap();
                let theirs = certificate_residual(&s).unwrap();
                assert!(ours < CERTIFICATE_TOL);
                assert!((ours - theirs).abs() < 1e-12, "{ours} vs {theirs}");
            }
        }
    }

    #[test]
    fn perturbed_state_fails() {
        let cfg = ScenarioConfig {
            steps: 2,
            ..ScenarioConfig::cavity_grip()
        };
        let mut s = generate_trajectory(&cfg, 5).unwrap().remove(1);
        let v = s.targets[0].values.at(40, 0);
        s.targets[0].values.set(40, 0, v + 1e-3);
        assert!(residual(&s).unwrap() > 1e-4);
        assert!(matches!(verify_frames(&[s], Path::new("x")), Err(Error::Certificate { .. })));
    }

    #[test]
    fn box_depth_uses_nearest_face() {
        let b = Primitive::Box {
            center: [0.0; 3],
            half: [1.0, 2.0, 3.0],
        };
        let (d, n) = depth_and_normal(&b, [0.5, 0.0, 0.0]).unwrap();
        assert_eq!(d, 0.5);
        assert_eq!(n, [-1.0, 0.0, 0.0]);
        assert!(depth_and_normal(&b, [1.5, 0.0, 0.0]).is_none());
    }
}
