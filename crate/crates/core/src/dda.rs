//! Amanatides-Woo voxel traversal. Visits every cell a ray passes through,
//! in order, with exact crossing parameters.

/// Ray walker over a unit-cell lattice. Positions are in cell units; the ray
/// parameter `t` stays in the caller's units (set `velocity` accordingly,
/// e.g. `dir / voxel_size` for a world-unit direction and `t` in meters).
pub(crate) struct GridRay {
    cell: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    t_entry: f64,
}

impl GridRay {
    pub fn new(start: [f64; 3], velocity: [f64; 3]) -> Self {
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            cell[a] = start[a].floor() as i64;
            if velocity[a] > 0.0 {
                step[a] = 1;
                t_max[a] = ((cell[a] + 1) as f64 - start[a]) / velocity[a];
                t_delta[a] = 1.0 / velocity[a];
            } else if velocity[a] < 0.0 {
                step[a] = -1;
                t_max[a] = (cell[a] as f64 - start[a]) / velocity[a];
                t_delta[a] = -1.0 / velocity[a];
            }
        }
        GridRay { cell, step, t_max, t_delta, t_entry: 0.0 }
    }

    #[inline]
    pub fn cell(&self) -> [i64; 3] {
        self.cell
    }

    /// Ray parameter at which the current cell was entered.
    #[inline]
    pub fn t_entry(&self) -> f64 {
        self.t_entry
    }

    /// Advance to the next cell along the ray.
    #[inline]
    pub fn advance(&mut self) {
        let axis = if self.t_max[0] < self.t_max[1] {
            if self.t_max[0] < self.t_max[2] { 0 } else { 2 }
        } else if self.t_max[1] < self.t_max[2] {
            1
        } else {
            2
        };
        self.t_entry = self.t_max[axis];
        self.cell[axis] += self.step[axis];
        self.t_max[axis] += self.t_delta[axis];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_ray_visits_cells_in_order() {
        let mut ray = GridRay::new([0.5, 0.5, 0.5], [1.0, 0.0, 0.0]);
        assert_eq!(ray.cell(), [0, 0, 0]);
        ray.advance();
        assert_eq!(ray.cell(), [1, 0, 0]);
        assert_eq!(ray.t_entry(), 0.5);
        ray.advance();
        assert_eq!(ray.cell(), [2, 0, 0]);
        assert_eq!(ray.t_entry(), 1.5);
    }

    #[test]
    fn diagonal_ray_never_skips_adjacent_cells() {
        let mut ray = GridRay::new([0.1, 0.2, 0.3], [1.0, 0.7, -0.4]);
        let mut prev = ray.cell();
        for _ in 0..100 {
            ray.advance();
            let c = ray.cell();
            let moved: i64 = (0..3).map(|a| (c[a] - prev[a]).abs()).sum();
            assert_eq!(moved, 1, "one axis per step");
            prev = c;
        }
    }

    #[test]
    fn negative_direction_from_boundary() {
        let mut ray = GridRay::new([2.0, 0.5, 0.5], [-1.0, 0.0, 0.0]);
        assert_eq!(ray.cell(), [2, 0, 0]);
        ray.advance();
        assert_eq!(ray.cell(), [1, 0, 0]);
        assert_eq!(ray.t_entry(), 0.0);
    }
}
