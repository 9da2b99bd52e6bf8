use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{EkiError, Result};

/// Cell-centred tensor grid on the rectangle [x_min, x_max] × [y_min, y_max].
///
/// Values are stored with the x index fastest: cell (i, j) lives at
/// `i + n1 * j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub n1: usize,
    pub n2: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub h1: f64,
    pub h2: f64,
}

impl GridGeometry {
    /// n × n cells covering the square [−1, 1]² that encloses the unit disc.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, -1.0, -1.0, 2.0 / n as f64, 2.0 / n as f64)
    }

    pub fn new(n1: usize, n2: usize, x_min: f64, y_min: f64, h1: f64, h2: f64) -> Result<Self> {
        if n1 < 2 || n2 < 2 {
            return Err(EkiError::InvalidParameter(format!("grid must be at least 2x2, got {n1}x{n2}")));
        }
        if !(h1 > 0.0 && h2 > 0.0) {
            return Err(EkiError::InvalidParameter("grid spacing must be positive".into()));
        }
        Ok(GridGeometry {
            n1,
            n2,
            x_min,
            y_min,
            h1,
            h2,
        })
    }

    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.n1 * j
    }

    pub fn centre(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.h1,
            self.y_min + (j as f64 + 0.5) * self.h2,
        )
    }

    /// Bilinear interpolation stencil at (x, y): four (index, weight) pairs.
    /// Points outside the ring of cell centres are clamped to it.
    pub fn bilinear_stencil(&self, x: f64, y: f64) -> [(usize, f64); 4] {
        let fx = ((x - self.x_min) / self.h1 - 0.5).clamp(0.0, (self.n1 - 1) as f64);
        let fy = ((y - self.y_min) / self.h2 - 0.5).clamp(0.0, (self.n2 - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.n1 - 2);
        let j0 = (fy.floor() as usize).min(self.n2 - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        [
            (self.index(i0, j0), (1.0 - tx) * (1.0 - ty)),
            (self.index(i0 + 1, j0), tx * (1.0 - ty)),
            (self.index(i0, j0 + 1), (1.0 - tx) * ty),
            (self.index(i0 + 1, j0 + 1), tx * ty),
        ]
    }
}

/// Scalar field on a [`GridGeometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(EkiError::DimensionMismatch(format!(
                "grid has {} cells but {} values were given",
                geometry.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EkiError::InvalidParameter("grid field contains non-finite values".into()));
        }
        Ok(GridField { geometry, values })
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Self {
        GridField {
            geometry,
            values: vec![value; geometry.len()],
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.geometry.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridField {
        GridField {
            geometry: self.geometry,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        self.geometry
            .bilinear_stencil(x, y)
            .iter()
            .map(|(k, w)| w * self.values[*k])
            .sum()
    }
}

const GRID_MAGIC: &[u8; 4] = b"GRD1";

/// Flat little-endian layout: magic, n1, n2 (u64), h1, h2 (f64), values.
pub fn write_grid_binary<W: Write>(f: &GridField, mut w: W) -> Result<()> {
    let g = f.geometry();
    w.write_all(GRID_MAGIC)?;
    w.write_all(&(g.n1 as u64).to_le_bytes())?;
    w.write_all(&(g.n2 as u64).to_le_bytes())?;
    w.write_all(&g.h1.to_le_bytes())?;
    w.write_all(&g.h2.to_le_bytes())?;
    for v in f.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a GRD1 field; the origin is recovered by centring the grid at 0.
pub fn read_grid_binary<R: Read>(mut r: R) -> Result<GridField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(EkiError::Format(format!("bad grid magic {magic:?}")));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n1 = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let n2 = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let h1 = f64::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let h2 = f64::from_le_bytes(word);
    let geometry = GridGeometry::new(n1, n2, -0.5 * h1 * n1 as f64, -0.5 * h2 * n2 as f64, h1, h2)?;
    let mut values = Vec::with_capacity(n1 * n2);
    for _ in 0..n1 * n2 {
        r.read_exact(&mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    GridField::new(geometry, values)
}

/// CSV matrix with one row per y index (bottom row first).
pub fn write_grid_csv<W: Write>(f: &GridField, mut w: W) -> Result<()> {
    let g = f.geometry();
    for j in 0..g.n2 {
        let row: Vec<String> = (0..g.n1).map(|i| format!("{:e}", f.get(i, j))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
