use serde::Serialize;
use thiserror::Error;

use crate::limits::{RescaledPath, ScaleKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OccupationError {
    #[error("window [{0}, {1}] is empty")]
    EmptyWindow(f64, f64),
    #[error("window [{0}, {1}] is not inside the path span")]
    WindowOutsidePath(f64, f64),
    #[error("occupation measures are taken on Z-scaled paths")]
    WrongScale,
    #[error("bin edges must be at least two strictly increasing values")]
    BadBins,
}

/// Time the second component spends in each bin over a window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupationHistogram {
    pub edges: Vec<f64>,
    /// `masses[j]` is the time spent in `[edges[j], edges[j+1])`; the last bin is closed.
    pub masses: Vec<f64>,
    pub underflow: f64,
    pub overflow: f64,
    pub window: (f64, f64),
}

impl OccupationHistogram {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.underflow + self.overflow
    }

    pub fn window_length(&self) -> f64 {
        self.window.1 - self.window.0
    }

    /// Fraction of the window spent in bin `j`.
    pub fn fraction(&self, j: usize) -> f64 {
        self.masses[j] / self.window_length()
    }
}

/// Integrates the grid path (held constant from each grid point to the next)
/// over the window.
pub fn occupation_measure(
    path: &RescaledPath,
    edges: &[f64],
    window: (f64, f64),
) -> Result<OccupationHistogram, OccupationError> {
    if path.kind != ScaleKind::Z {
        return Err(OccupationError::WrongScale);
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(OccupationError::BadBins);
    }
    let (t0, t1) = window;
    if !(t0 < t1) {
        return Err(OccupationError::EmptyWindow(t0, t1));
    }
    let g = &path.grid;
    if path.values.len() != g.len() || g.is_empty() || t0 < g[0] || t1 > g[g.len() - 1] {
        return Err(OccupationError::WindowOutsidePath(t0, t1));
    }
    let mut hist = OccupationHistogram {
        edges: edges.to_vec(),
        masses: vec![0.0; edges.len() - 1],
        underflow: 0.0,
        overflow: 0.0,
        window,
    };
    let last = edges[edges.len() - 1];
    for i in 0..g.len() - 1 {
        let dt = g[i + 1].min(t1) - g[i].max(t0);
        if dt <= 0.0 {
            continue;
        }
        let z = path.values[i][1];
        if z < edges[0] {
            hist.underflow += dt;
        } else if z > last {
            hist.overflow += dt;
        } else {
            let j = edges.partition_point(|&e| e <= z).min(edges.len() - 1) - 1;
            hist.masses[j] += dt;
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(grid: Vec<f64>, z2: Vec<f64>) -> RescaledPath {
        RescaledPath {
            kind: ScaleKind::Z,
            values: z2.iter().map(|&z| [1.0, z, 1.0]).collect(),
            grid,
            divisors: [1.0; 3],
        }
    }

    #[test]
    fn constant_path_is_a_point_mass() {
        let p = path(vec![0.0, 1.0, 2.0, 3.0], vec![1.0; 4]);
        let h = occupation_measure(&p, &[0.9, 1.1, 2.0], (1.0, 3.0)).unwrap();
        assert_eq!(h.masses, vec![2.0, 0.0]);
        assert_eq!(h.fraction(0), 1.0);
    }

    #[test]
    fn staircase_by_hand() {
        // 0.5 on [0,1), 1.5 on [1,2), 2.5 on [2,4); window [0.5, 3]
        let p = path(vec![0.0, 1.0, 2.0, 4.0], vec![0.5, 1.5, 2.5, 9.0]);
        let h = occupation_measure(&p, &[0.0, 1.0, 2.0, 3.0], (0.5, 3.0)).unwrap();
        assert_eq!(h.masses, vec![0.5, 1.0, 1.0]);
        assert_eq!(h.underflow + h.overflow, 0.0);
        let h = occupation_measure(&p, &[1.0, 2.0], (0.0, 4.0)).unwrap();
        assert_eq!((h.underflow, h.masses[0], h.overflow), (1.0, 1.0, 2.0));
    }

    #[test]
    fn errors() {
        let p = path(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert_eq!(occupation_measure(&p, &[0.0, 1.0], (0.5, 0.5)), Err(OccupationError::EmptyWindow(0.5, 0.5)));
        assert!(matches!(occupation_measure(&p, &[0.0, 1.0], (0.5, 2.0)), Err(OccupationError::WindowOutsidePath(..))));
        assert_eq!(occupation_measure(&p, &[1.0], (0.0, 1.0)), Err(OccupationError::BadBins));
        let mut q = p.clone();
        q.kind = ScaleKind::Y;
        assert_eq!(occupation_measure(&q, &[0.0, 1.0], (0.0, 1.0)), Err(OccupationError::WrongScale));
    }

    proptest! {
        #[test]
        fn mass_equals_window(
            steps in proptest::collection::vec((0.01f64..1.0, 0.0f64..3.0), 2..40),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let mut grid = vec![0.0];
            for (dt, _) in &steps {
                grid.push(grid.last().unwrap() + dt);
            }
            let mut z: Vec<f64> = steps.iter().map(|s| s.1).collect();
            z.push(0.0);
            let end = *grid.last().unwrap();
            let (lo, hi) = (a.min(b) * end, a.max(b) * end);
            prop_assume!(hi > lo);
            let h = occupation_measure(&path(grid, z), &[0.5, 1.0, 2.0], (lo, hi)).unwrap();
            prop_assert!(h.masses.iter().all(|&m| m >= 0.0));
            prop_assert!((h.total_mass() - (hi - lo)).abs() < 1e-12 * (1.0 + end));
        }
    }
}
