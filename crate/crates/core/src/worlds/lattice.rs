//! Mass-spring lattices on structured index grids.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// A spring between points `p` and `q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub p: usize,
    pub q: usize,
    pub rest_length: f64,
    pub stiffness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpringSystem {
    pub rest_positions: Vec<[f64; 3]>,
    pub springs: Vec<Spring>,
    /// Per-point stiffness multiplier, exported as a property channel.
    pub material: Vec<f64>,
}

impl SpringSystem {
    pub fn len(&self) -> usize {
        self.rest_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rest_positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.material.len() != n {
            return Err(Error::InvalidScene(format!("{} material values for {n} points", self.material.len())));
        }
        for s in &self.springs {
            if s.p >= n || s.q >= n || s.p == s.q {
                return Err(Error::InvalidScene(format!("spring ({}, {}) references invalid points", s.p, s.q)));
            }
            if !(s.stiffness > 0.0 && s.rest_length > 0.0) {
                return Err(Error::InvalidScene(format!("spring ({}, {}) needs positive stiffness and length", s.p, s.q)));
            }
        }
        Ok(())
    }

    /// Appends `other`, shifting its indices, and returns the offset used.
    pub fn append(&mut self, other: &SpringSystem) -> usize {
        let offset = self.len();
        self.rest_positions.extend_from_slice(&other.rest_positions);
        self.material.extend_from_slice(&other.material);
        self.springs.extend(other.springs.iter().map(|s| Spring {
            p: s.p + offset,
            q: s.q + offset,
            ..*s
        }));
        offset
    }

    /// Adds a spring at its current rest distance with the mean stiffness of
    /// its endpoints scaled by `base`.
    pub fn connect(&mut self, p: usize, q: usize, base: f64) {
        let (a, b) = (self.rest_positions[p], self.rest_positions[q]);
        self.springs.push(Spring {
            p,
            q,
            rest_length: distance(a, b),
            stiffness: base * 0.5 * (self.material[p] + self.material[q]),
        });
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    libm::sqrt((0..3).map(|d| (a[d] - b[d]) * (a[d] - b[d])).sum())
}

/// Index grid `nx × ny × nz` with `x` varying fastest; axis 1 may wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub wrap_y: bool,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    fn step(&self, c: [usize; 3], o: [isize; 3]) -> Option<usize> {
        let mut n = [0usize; 3];
        for d in 0..3 {
            let v = c[d] as isize + o[d];
            let size = self.dims[d] as isize;
            n[d] = if d == 1 && self.wrap_y {
                v.rem_euclid(size) as usize
            } else if (0..size).contains(&v) {
                v as usize
            } else {
                return None;
            };
        }
        Some(self.index(n[0], n[1], n[2]))
    }

    /// Unordered neighbor pairs: axis, face-diagonal and body-diagonal
    /// offsets, each listed once.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut offsets = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let o = [dx, dy, dz];
                    // Keep one of each ±offset pair: first nonzero component positive.
                    if o.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0) {
                        offsets.push(o);
                    }
                }
            }
        }
        let mut pairs = Vec::new();
        for idx in 0..self.len() {
            let c = self.coords(idx);
            for &o in &offsets {
                if let Some(n) = self.step(c, o) {
                    if n != idx {
                        pairs.push((idx.min(n), idx.max(n)));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    /// Pairs whose index offset has exactly one nonzero component.
    pub fn axis_pairs(&self) -> Vec<(usize, usize)> {
        self.neighbor_pairs()
            .into_iter()
            .filter(|&(a, b)| {
                let (ca, cb) = (self.coords(a), self.coords(b));
                (0..3).filter(|&d| ca[d] != cb[d]).count() == 1
            })
            .collect()
    }
}

/// Per-point stiffness multipliers in `[1 - jitter, 1 + jitter]`.
pub fn material_multipliers(n: usize, jitter: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Scenario);
    (0..n)
        .map(|_| if jitter > 0.0 { 1.0 + rng.random_range(-jitter..jitter) } else { 1.0 })
        .collect()
}

fn system_on_grid(grid: Grid, position: impl Fn([usize; 3]) -> [f64; 3], stiffness: f64, jitter: f64, seed: u64) -> SpringSystem {
    let mut sys = SpringSystem {
        rest_positions: (0..grid.len()).map(|i| position(grid.coords(i))).collect(),
        springs: Vec::new(),
        material: material_multipliers(grid.len(), jitter, seed),
    };
    for (p, q) in grid.neighbor_pairs() {
        sys.connect(p, q, stiffness);
    }
    sys
}

/// Box lattice with axis, face-diagonal and body-diagonal springs, anchored
/// at `origin`.
pub fn build_lattice(dims: [usize; 3], spacing: f64, origin: [f64; 3], stiffness: f64, jitter: f64, seed: u64) -> Result<SpringSystem> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Config(format!("lattice dims must be at least 2, got {dims:?}")));
    }
    if !(spacing > 0.0 && stiffness > 0.0) || !(0.0..1.0).contains(&jitter) {
        return Err(Error::Config("lattice needs positive spacing and stiffness and jitter in [0, 1)".into()));
    }
    let grid = Grid { dims, wrap_y: false };
    Ok(system_on_grid(
        grid,
        |[i, j, k]| [origin[0] + i as f64 * spacing, origin[1] + j as f64 * spacing, origin[2] + k as f64 * spacing],
        stiffness,
        jitter,
        seed,
    ))
}

/// Hollow cylinder around the `z` axis through `center`: `layers` radial
/// shells between `inner` and `outer`, `around` points per ring, `rings`
/// rings spaced by `height_step`.
#[allow(clippy::too_many_arguments)]
pub fn build_tube(
    layers: usize,
    around: usize,
    rings: usize,
    inner: f64,
    outer: f64,
    height_step: f64,
    center: [f64; 3],
    stiffness: f64,
    jitter: f64,
    seed: u64,
) -> Result<SpringSystem> {
    if layers < 2 || around < 4 || rings < 2 || !(outer > inner && inner > 0.0) || !(height_step > 0.0 && stiffness > 0.0) {
        return Err(Error::Config("tube needs ≥2 layers, ≥4 points per ring, ≥2 rings and 0 < inner < outer".into()));
    }
    let grid = Grid {
        dims: [layers, around, rings],
        wrap_y: true,
    };
    let position = |[i, j, k]: [usize; 3]| {
        let r = inner + (outer - inner) * i as f64 / (layers - 1) as f64;
        let theta = core::f64::consts::TAU * j as f64 / around as f64;
        [
            center[0] + r * libm::cos(theta),
            center[1] + r * libm::sin(theta),
            center[2] + k as f64 * height_step,
        ]
    };
    Ok(system_on_grid(grid, position, stiffness, jitter, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cube_counts() {
        let sys = build_lattice([2, 2, 2], 0.5, [0.0; 3], 1.0, 0.0, 1).unwrap();
        assert_eq!(sys.len(), 8);
        let grid = Grid {
            dims: [2, 2, 2],
            wrap_y: false,
        };
        assert_eq!(grid.axis_pairs().len(), 12);
        // 12 axis + 12 face diagonals + 4 body diagonals.
        assert_eq!(sys.springs.len(), 28);
        for (p, q) in grid.axis_pairs() {
            let s = sys.springs.iter().find(|s| s.p == p && s.q == q).unwrap();
            assert_eq!(s.rest_length, 0.5);
        }
    }

    #[test]
    fn seeded_and_validated() {
        let a = build_lattice([3, 2, 2], 1.0, [0.0; 3], 2.0, 0.3, 9).unwrap();
        assert_eq!(a, build_lattice([3, 2, 2], 1.0, [0.0; 3], 2.0, 0.3, 9).unwrap());
        assert_ne!(a, build_lattice([3, 2, 2], 1.0, [0.0; 3], 2.0, 0.3, 10).unwrap());
        a.validate().unwrap();
        assert!(build_lattice([1, 2, 2], 1.0, [0.0; 3], 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn tube_wraps_around() {
        let t = build_tube(2, 8, 3, 0.3, 0.45, 0.2, [0.0; 3], 1.0, 0.0, 0).unwrap();
        t.validate().unwrap();
        assert_eq!(t.len(), 48);
        let grid = Grid {
            dims: [2, 8, 3],
            wrap_y: true,
        };
        let (first, last) = (grid.index(0, 0, 0), grid.index(0, 7, 0));
        assert!(t.springs.iter().any(|s| s.p == first && s.q == last));
    }
}
