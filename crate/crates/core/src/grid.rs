//! Uniform partition of a room's floor plan into local areas.
//!
//! A room of size `x_len * y_len` is split into `m_x * m_y` equal rectangles.
//! Area indices are 1-based and run along the y axis first: index `m` sits in
//! column `(m-1) / m_y` and row `(m-1) % m_y`. Cells are half-open on both
//! axes; points exactly on the far wall are clamped into the last cell so the
//! partition tiles the closed room.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("room dimension {axis} must be positive and finite, got {value}")]
    BadRoomDim { axis: char, value: f64 },
    #[error("grid counts must be at least 1x1, got {m_x}x{m_y}")]
    BadCounts { m_x: usize, m_y: usize },
    #[error("coordinate {axis}={value} outside room extent [0, {limit}]")]
    OutOfRoom { axis: char, value: f64, limit: f64 },
    #[error("area index {index} outside valid range 1..={m_total}")]
    IndexOutOfRange { index: usize, m_total: usize },
}

/// Room extents in meters. `z_len` is carried for the acoustics but the grid
/// itself is two-dimensional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomDims {
    pub x_len: f64,
    pub y_len: f64,
    pub z_len: f64,
}

impl RoomDims {
    pub fn new(x_len: f64, y_len: f64, z_len: f64) -> Result<Self, GridError> {
        for (axis, value) in [('x', x_len), ('y', y_len), ('z', z_len)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GridError::BadRoomDim { axis, value });
            }
        }
        Ok(RoomDims { x_len, y_len, z_len })
    }

    pub fn volume(&self) -> f64 {
        self.x_len * self.y_len * self.z_len
    }

    /// Total surface area of the six walls.
    pub fn surface_area(&self) -> f64 {
        2.0 * (self.x_len * self.y_len + self.x_len * self.z_len + self.y_len * self.z_len)
    }
}

/// A 2D point on the room's floor plan, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }
}

/// 1-based index of a local area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AreaIndex(usize);

impl AreaIndex {
    /// Caller is responsible for range; grid operations validate on use.
    pub fn new(value: usize) -> Self {
        AreaIndex(value)
    }

    pub fn get(&self) -> usize {
        self.0
    }
}

/// One-hot position code over the `m_total` areas of a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotCode {
    dim: usize,
    hot: AreaIndex,
}

impl OneHotCode {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hot(&self) -> AreaIndex {
        self.hot
    }

    /// Dense form: all zeros except a single 1 at the hot index (1-based
    /// index, 0-based storage).
    pub fn dense<R: Float>(&self) -> Vec<R> {
        let mut v = vec![R::zero(); self.dim];
        v[self.hot.get() - 1] = R::one();
        v
    }
}

/// Partition of a room into `m_x * m_y` equal local areas.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    room: RoomDims,
    m_x: usize,
    m_y: usize,
}

impl GridSpec {
    pub fn new(room: RoomDims, m_x: usize, m_y: usize) -> Result<Self, GridError> {
        if m_x == 0 || m_y == 0 {
            return Err(GridError::BadCounts { m_x, m_y });
        }
        Ok(GridSpec { room, m_x, m_y })
    }

    pub fn room(&self) -> &RoomDims {
        &self.room
    }

    pub fn m_x(&self) -> usize {
        self.m_x
    }

    pub fn m_y(&self) -> usize {
        self.m_y
    }

    pub fn m_total(&self) -> usize {
        self.m_x * self.m_y
    }

    /// Cell resolution along x, meters.
    pub fn r_x(&self) -> f64 {
        self.room.x_len / self.m_x as f64
    }

    /// Cell resolution along y, meters.
    pub fn r_y(&self) -> f64 {
        self.room.y_len / self.m_y as f64
    }

    fn check_index(&self, m: AreaIndex) -> Result<usize, GridError> {
        let v = m.get();
        if v == 0 || v > self.m_total() {
            return Err(GridError::IndexOutOfRange { index: v, m_total: self.m_total() });
        }
        Ok(v)
    }

    /// Index of the local area containing `p`. Cells are half-open; the far
    /// walls are clamped into the last row/column.
    pub fn locate_area(&self, p: Point2) -> Result<AreaIndex, GridError> {
        let col = Self::axis_cell('x', p.x, self.room.x_len, self.r_x(), self.m_x)?;
        let row = Self::axis_cell('y', p.y, self.room.y_len, self.r_y(), self.m_y)?;
        Ok(AreaIndex(col * self.m_y + row + 1))
    }

    fn axis_cell(axis: char, value: f64, limit: f64, res: f64, count: usize) -> Result<usize, GridError> {
        if !(value.is_finite() && (0.0..=limit).contains(&value)) {
            return Err(GridError::OutOfRoom { axis, value, limit });
        }
        let cell = libm::floor(value / res) as usize;
        Ok(cell.min(count - 1))
    }

    /// Half-open bounds `(x_start, x_end, y_start, y_end)` of area `m`.
    pub fn area_bounds(&self, m: AreaIndex) -> Result<(f64, f64, f64, f64), GridError> {
        let v = self.check_index(m)?;
        let col = (v - 1) / self.m_y;
        let row = (v - 1) % self.m_y;
        let (rx, ry) = (self.r_x(), self.r_y());
        Ok((col as f64 * rx, (col + 1) as f64 * rx, row as f64 * ry, (row + 1) as f64 * ry))
    }

    /// Center of area `m`; the coordinate a predicted index reconstructs to.
    pub fn area_center(&self, m: AreaIndex) -> Result<Point2, GridError> {
        let v = self.check_index(m)?;
        let col = (v - 1) / self.m_y;
        let row = (v - 1) % self.m_y;
        Ok(Point2::new((col as f64 + 0.5) * self.r_x(), (row as f64 + 0.5) * self.r_y()))
    }

    /// One-hot code of area `m` over this grid's `m_total` classes.
    pub fn one_hot(&self, m: AreaIndex) -> Result<OneHotCode, GridError> {
        self.check_index(m)?;
        Ok(OneHotCode { dim: self.m_total(), hot: m })
    }

    /// Worst-case distance from any in-cell point to its cell center.
    pub fn max_center_dist(&self) -> f64 {
        0.5 * libm::hypot(self.r_x(), self.r_y())
    }
}
