//! Fixed-size square windows centered on a grid cell.
//!
//! Observations hand policies a `side x side` patch of the world centered on
//! the observing agent. `Window` stores the patch row-major and is indexed
//! either by raw window coordinates or by signed offsets from the center.

/// A square, odd-sided patch of per-cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct Window<T> {
    side: usize,
    cells: Vec<T>,
}

impl<T: Clone> Window<T> {
    /// A window with every cell set to `value`. Panics unless `side` is odd
    /// and at least 3.
    pub fn filled(side: usize, value: T) -> Self {
        assert!(side >= 3 && side % 2 == 1, "window side must be odd and >= 3");
        Window { side, cells: vec![value; side * side] }
    }
}

impl<T> Window<T> {
    /// Builds a window by calling `f(dr, dc)` for every offset from the
    /// center, row by row. Offsets range over `[-radius, radius]`.
    pub fn from_fn(side: usize, mut f: impl FnMut(i64, i64) -> T) -> Self {
        assert!(side >= 3 && side % 2 == 1, "window side must be odd and >= 3");
        let r = (side / 2) as i64;
        let mut cells = Vec::with_capacity(side * side);
        for dr in -r..=r {
            for dc in -r..=r {
                cells.push(f(dr, dc));
            }
        }
        Window { side, cells }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of cells between the center and the window edge.
    pub fn radius(&self) -> usize {
        self.side / 2
    }

    /// Cell at signed offset `(dr, dc)` from the center. Panics if the offset
    /// falls outside the window.
    pub fn get(&self, dr: i64, dc: i64) -> &T {
        let r = self.radius() as i64;
        assert!(dr.abs() <= r && dc.abs() <= r, "offset ({dr}, {dc}) outside window radius {r}");
        &self.cells[((dr + r) as usize) * self.side + (dc + r) as usize]
    }

    /// Mutable access at signed offset `(dr, dc)` from the center.
    pub fn get_mut(&mut self, dr: i64, dc: i64) -> &mut T {
        let r = self.radius() as i64;
        assert!(dr.abs() <= r && dc.abs() <= r, "offset ({dr}, {dc}) outside window radius {r}");
        &mut self.cells[((dr + r) as usize) * self.side + (dc + r) as usize]
    }

    /// Cell at raw window coordinates, `(0, 0)` being the top-left corner.
    pub fn at(&self, row: usize, col: usize) -> &T {
        assert!(row < self.side && col < self.side);
        &self.cells[row * self.side + col]
    }

    /// Row-major view of all cells.
    pub fn cells(&self) -> &[T] {
        &self.cells
    }
}
