//! Occupancy grid geometry.
//!
//! The grid sits in the ego vehicle's relative frame: `x` points forward,
//! `y` to the left. Cells are indexed 1-based, `w` longitudinally and `l`
//! laterally, and every cell plus one out-of-map state maps to a flat class
//! id in `1..=q_w * q_l + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell counts along each axis; enough to flatten and unflatten class ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub q_w: usize,
    pub q_l: usize,
}

impl GridDims {
    pub const fn new(q_w: usize, q_l: usize) -> Self {
        Self { q_w, q_l }
    }

    /// Total class count, including the out-of-map class.
    pub const fn num_classes(&self) -> usize {
        self.q_w * self.q_l + 1
    }

    pub const fn out_of_map(&self) -> FlatClass {
        FlatClass(self.num_classes())
    }

    pub fn flatten(&self, cell: GridCell) -> FlatClass {
        match cell {
            GridCell::InMap { w, l } => {
                debug_assert!((1..=self.q_w).contains(&w) && (1..=self.q_l).contains(&l));
                FlatClass((w - 1) * self.q_l + l)
            }
            GridCell::OutOfMap => self.out_of_map(),
        }
    }

    pub fn unflatten(&self, q: FlatClass) -> Result<GridCell> {
        let id = q.0;
        if id == 0 || id > self.num_classes() {
            return Err(Error::InvalidInput(format!(
                "class id {id} outside 1..={}",
                self.num_classes()
            )));
        }
        if id == self.num_classes() {
            return Ok(GridCell::OutOfMap);
        }
        Ok(GridCell::InMap {
            w: (id - 1) / self.q_l + 1,
            l: (id - 1) % self.q_l + 1,
        })
    }

    /// Zero-based embedding columns `(w, l)` for a class; out-of-map uses the
    /// extra last column on both axes.
    pub fn embedding_columns(&self, q: FlatClass) -> Result<(usize, usize)> {
        Ok(match self.unflatten(q)? {
            GridCell::InMap { w, l } => (w - 1, l - 1),
            GridCell::OutOfMap => (self.q_w, self.q_l),
        })
    }
}

impl Default for GridDims {
    fn default() -> Self {
        Self::new(36, 21)
    }
}

/// Position on the occupancy grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridCell {
    InMap { w: usize, l: usize },
    OutOfMap,
}

/// Flat class id, 1-based. The highest id is the out-of-map class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatClass(pub usize);

impl FlatClass {
    /// Zero-based index into a probability map.
    pub fn index(self) -> usize {
        self.0 - 1
    }

    pub fn from_index(i: usize) -> Self {
        FlatClass(i + 1)
    }
}

impl std::fmt::Display for FlatClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Metric geometry of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub q_w: usize,
    pub q_l: usize,
    /// Longitudinal cell size, meters.
    pub cell_len: f64,
    /// Lateral cell size, meters.
    pub cell_wid: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Lateral coordinate of the lower edge of cell `l = 1`.
    pub lateral_origin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            q_w: 36,
            q_l: 21,
            cell_len: 5.0,
            cell_wid: 0.875,
            x_min: 0.0,
            x_max: 180.0,
            y_min: -9.2,
            y_max: 9.2,
            lateral_origin: -9.1875,
        }
    }
}

impl GridSpec {
    pub fn dims(&self) -> GridDims {
        GridDims::new(self.q_w, self.q_l)
    }

    pub fn num_classes(&self) -> usize {
        self.dims().num_classes()
    }

    fn lateral_top(&self) -> f64 {
        self.lateral_origin + self.q_l as f64 * self.cell_wid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("grid: {msg}")));
        if self.q_w == 0 || self.q_l == 0 {
            return bad("cell counts must be positive".into());
        }
        if !(self.cell_len > 0.0 && self.cell_wid > 0.0) {
            return bad("cell sizes must be positive".into());
        }
        let span = self.q_w as f64 * self.cell_len;
        if (span - (self.x_max - self.x_min)).abs() > 1e-9 {
            return bad(format!(
                "q_w * cell_len = {span} does not match x range {}",
                self.x_max - self.x_min
            ));
        }
        if self.lateral_origin < self.y_min - 0.025 || self.lateral_top() > self.y_max + 0.025 {
            return bad(format!(
                "lateral coverage [{}, {}] exceeds y range [{}, {}]",
                self.lateral_origin,
                self.lateral_top(),
                self.y_min,
                self.y_max
            ));
        }
        Ok(())
    }

    /// Maps a relative position to its grid cell.
    ///
    /// Cells are half-open `[low, high)`; the topmost lateral cell is closed at
    /// its upper edge. Lateral positions inside `[y_min, y_max]` but outside
    /// the covered span are clamped into the nearest edge cell.
    pub fn quantize(&self, x: f64, y: f64) -> Result<GridCell> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite position ({x}, {y})"
            )));
        }
        if x < self.x_min || x >= self.x_max || y < self.y_min || y > self.y_max {
            return Ok(GridCell::OutOfMap);
        }
        let w = (((x - self.x_min) / self.cell_len).floor() as usize + 1).min(self.q_w);
        let y = y.clamp(self.lateral_origin, self.lateral_top());
        let l =
            (((y - self.lateral_origin) / self.cell_wid).floor() as usize + 1).clamp(1, self.q_l);
        Ok(GridCell::InMap { w, l })
    }

    pub fn quantize_class(&self, x: f64, y: f64) -> Result<FlatClass> {
        Ok(self.dims().flatten(self.quantize(x, y)?))
    }

    pub fn cell_center(&self, cell: GridCell) -> Result<(f64, f64)> {
        match cell {
            GridCell::InMap { w, l }
                if (1..=self.q_w).contains(&w) && (1..=self.q_l).contains(&l) =>
            {
                Ok((
                    self.x_min + (w as f64 - 0.5) * self.cell_len,
                    self.lateral_origin + (l as f64 - 0.5) * self.cell_wid,
                ))
            }
            GridCell::InMap { w, l } => Err(Error::InvalidInput(format!(
                "cell ({w}, {l}) outside the {}x{} grid",
                self.q_w, self.q_l
            ))),
            GridCell::OutOfMap => Err(Error::InvalidInput("out-of-map cell has no center".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn default_geometry_is_consistent() {
        let s = spec();
        s.validate().unwrap();
        assert_eq!(s.num_classes(), 757);
    }

    #[test]
    fn quantize_examples() {
        let s = spec();
        assert_eq!(
            s.quantize(2.0, 0.0).unwrap(),
            GridCell::InMap { w: 1, l: 11 }
        );
        assert_eq!(s.quantize(185.0, 0.0).unwrap(), GridCell::OutOfMap);
        assert_eq!(
            s.quantize(0.0, -9.1875).unwrap(),
            GridCell::InMap { w: 1, l: 1 }
        );
    }

    #[test]
    fn quantize_boundaries_and_clamping() {
        let s = spec();
        // x_max itself is outside (half-open).
        assert_eq!(s.quantize(180.0, 0.0).unwrap(), GridCell::OutOfMap);
        assert_eq!(
            s.quantize(179.999, 0.0).unwrap(),
            GridCell::InMap { w: 36, l: 11 }
        );
        assert_eq!(s.quantize(-0.001, 0.0).unwrap(), GridCell::OutOfMap);
        // Cell edges belong to the upper cell.
        assert_eq!(
            s.quantize(5.0, 0.0).unwrap(),
            GridCell::InMap { w: 2, l: 11 }
        );
        // Residual lateral margins clamp into the edge cells.
        assert_eq!(
            s.quantize(10.0, -9.2).unwrap(),
            GridCell::InMap { w: 3, l: 1 }
        );
        assert_eq!(
            s.quantize(10.0, -9.19).unwrap(),
            GridCell::InMap { w: 3, l: 1 }
        );
        assert_eq!(
            s.quantize(10.0, 9.2).unwrap(),
            GridCell::InMap { w: 3, l: 21 }
        );
        assert_eq!(
            s.quantize(10.0, 9.1875).unwrap(),
            GridCell::InMap { w: 3, l: 21 }
        );
        assert_eq!(s.quantize(10.0, 9.2001).unwrap(), GridCell::OutOfMap);
        assert_eq!(s.quantize(10.0, -9.2001).unwrap(), GridCell::OutOfMap);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let s = spec();
        assert!(matches!(
            s.quantize(f64::NAN, 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            s.quantize(0.0, f64::INFINITY),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn flatten_examples() {
        let d = GridDims::default();
        assert_eq!(d.flatten(GridCell::InMap { w: 1, l: 1 }), FlatClass(1));
        assert_eq!(d.flatten(GridCell::InMap { w: 1, l: 11 }), FlatClass(11));
        assert_eq!(d.flatten(GridCell::InMap { w: 36, l: 21 }), FlatClass(756));
        assert_eq!(d.flatten(GridCell::OutOfMap), FlatClass(757));
        assert!(d.unflatten(FlatClass(0)).is_err());
        assert!(d.unflatten(FlatClass(758)).is_err());
    }

    #[test]
    fn flat_class_bijection() {
        let d = GridDims::default();
        for q in 1..=757 {
            let cell = d.unflatten(FlatClass(q)).unwrap();
            assert_eq!(d.flatten(cell), FlatClass(q));
        }
    }

    #[test]
    fn cell_center_examples() {
        let s = spec();
        let (x, y) = s.cell_center(GridCell::InMap { w: 1, l: 11 }).unwrap();
        assert_eq!((x, y), (2.5, 0.0));
        let (x, y) = s.cell_center(GridCell::InMap { w: 36, l: 21 }).unwrap();
        assert_eq!((x, y), (177.5, 8.75));
        assert!(s.cell_center(GridCell::OutOfMap).is_err());
        assert!(s.cell_center(GridCell::InMap { w: 37, l: 1 }).is_err());
    }

    #[test]
    fn center_round_trip_is_exhaustive() {
        let s = spec();
        for w in 1..=36 {
            for l in 1..=21 {
                let c = GridCell::InMap { w, l };
                let (x, y) = s.cell_center(c).unwrap();
                assert_eq!(s.quantize(x, y).unwrap(), c);
            }
        }
    }

    #[test]
    fn embedding_columns_for_out_of_map() {
        let d = GridDims::default();
        assert_eq!(d.embedding_columns(FlatClass(757)).unwrap(), (36, 21));
        assert_eq!(d.embedding_columns(FlatClass(1)).unwrap(), (0, 0));
    }

    proptest! {
        #[test]
        fn quantize_stays_in_range(x in -50.0f64..250.0, y in -15.0f64..15.0) {
            let s = spec();
            match s.quantize(x, y).unwrap() {
                GridCell::InMap { w, l } => {
                    prop_assert!((1..=36).contains(&w));
                    prop_assert!((1..=21).contains(&l));
                }
                GridCell::OutOfMap => {
                    prop_assert!(!(0.0..180.0).contains(&x) || !(-9.2..=9.2).contains(&y));
                }
            }
        }

        #[test]
        fn quantize_monotone_in_x(x1 in 0.0f64..180.0, x2 in 0.0f64..180.0, y in -9.2f64..9.2) {
            let s = spec();
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            if let (GridCell::InMap { w: wa, .. }, GridCell::InMap { w: wb, .. }) =
                (s.quantize(lo, y).unwrap(), s.quantize(hi, y).unwrap())
            {
                prop_assert!(wa <= wb);
            }
        }
    }
}
