//! Uniform cell-centered tensor grids on phase-space windows.
//!
//! Node ordering is row-major with the position axes outermost: the flat
//! index of node `(i_1..i_d, j_1..j_d)` runs `i_1` slowest and `j_d`
//! fastest, so every velocity fiber `{x fixed}` is a contiguous slice.
//! All integrals are midpoint Riemann sums.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::geometry::{PhaseWindow, Rect};

/// A uniform grid of `n` cell centers per axis over a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XGrid {
    pub window: Rect,
    pub n: usize,
}

impl XGrid {
    pub fn new(window: Rect, n: usize) -> Result<Self> {
        if !window.is_proper() {
            return config("grid window must be bounded and nondegenerate");
        }
        if n == 0 {
            return config("grid needs at least one point per axis");
        }
        Ok(Self { window, n })
    }

    pub fn dim(&self) -> usize {
        self.window.dim()
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.window
            .lengths()
            .iter()
            .map(|l| l / self.n as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    /// Multi-index of a flat index, slowest axis first.
    pub fn multi_index(&self, mut k: usize, out: &mut [usize]) {
        for i in (0..self.dim()).rev() {
            out[i] = k % self.n;
            k /= self.n;
        }
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    /// Coordinates of node `k`.
    pub fn node(&self, k: usize, out: &mut [f64]) {
        let d = self.dim();
        let mut k = k;
        for i in (0..d).rev() {
            let h = (self.window.hi[i] - self.window.lo[i]) / self.n as f64;
            out[i] = self.window.lo[i] + ((k % self.n) as f64 + 0.5) * h;
            k /= self.n;
        }
    }

    /// Index of the cell containing `p`, if inside the window.
    pub fn locate(&self, p: &[f64]) -> Option<usize> {
        let mut k = 0;
        for (i, &c) in p.iter().enumerate() {
            let (lo, hi) = (self.window.lo[i], self.window.hi[i]);
            if !(c >= lo && c <= hi) {
                return None;
            }
            let j = (((c - lo) / (hi - lo)) * self.n as f64).floor() as usize;
            k = k * self.n + j.min(self.n - 1);
        }
        Some(k)
    }
}

/// A phase-space grid: `nx` points per position axis, `nv` per velocity axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub window: PhaseWindow,
    pub nx: usize,
    pub nv: usize,
}

impl PhaseGrid {
    pub fn new(window: PhaseWindow, nx: usize, nv: usize) -> Result<Self> {
        check_dim(window.x.dim(), window.v.dim())?;
        XGrid::new(window.x.clone(), nx)?;
        XGrid::new(window.v.clone(), nv)?;
        Ok(Self { window, nx, nv })
    }

    pub fn dim(&self) -> usize {
        self.window.dim()
    }

    pub fn x_grid(&self) -> XGrid {
        XGrid {
            window: self.window.x.clone(),
            n: self.nx,
        }
    }

    pub fn v_grid(&self) -> XGrid {
        XGrid {
            window: self.window.v.clone(),
            n: self.nv,
        }
    }

    pub fn n_x_nodes(&self) -> usize {
        self.nx.pow(self.dim() as u32)
    }

    /// Length of one velocity fiber.
    pub fn n_v_nodes(&self) -> usize {
        self.nv.pow(self.dim() as u32)
    }

    pub fn len(&self) -> usize {
        self.n_x_nodes() * self.n_v_nodes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume_x(&self) -> f64 {
        self.x_grid().cell_volume()
    }

    pub fn cell_volume_v(&self) -> f64 {
        self.v_grid().cell_volume()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume_x() * self.cell_volume_v()
    }

    /// Largest position and velocity spacings.
    pub fn max_spacing(&self) -> (f64, f64) {
        let m = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
        (m(self.x_grid().spacing()), m(self.v_grid().spacing()))
    }
}

/// Values of a phase-space function at the nodes of a [`PhaseGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGridFunction {
    grid: PhaseGrid,
    values: Vec<f64>,
    mass: f64,
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    dim: usize,
    window: PhaseWindow,
    nx: usize,
    nv: usize,
}

impl PhaseGridFunction {
    pub fn new(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Format(format!(
                "grid has {} nodes but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value at node {k}")));
        }
        let mass = values.iter().sum::<f64>() * grid.cell_volume();
        Ok(Self { grid, values, mass })
    }

    pub fn zeros(grid: PhaseGrid) -> Self {
        let values = vec![0.0; grid.len()];
        Self {
            grid,
            values,
            mass: 0.0,
        }
    }

    /// Samples `f(x, v)` at every node.
    pub fn sample(grid: PhaseGrid, f: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> Result<Self> {
        let values = fill_fibers(&grid, |x, v, _| Ok(f(x, v)))?;
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Riemann-sum integral.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Riemann-sum integral of `|f|`.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    /// Velocity fiber at position node `ix`.
    pub fn fiber(&self, ix: usize) -> &[f64] {
        let n = self.grid.n_v_nodes();
        &self.values[ix * n..(ix + 1) * n]
    }

    pub fn fibers(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.grid.n_v_nodes())
    }

    /// Value of the cell containing `(x, v)`; zero outside the window.
    pub fn nearest(&self, x: &[f64], v: &[f64]) -> f64 {
        match (self.grid.x_grid().locate(x), self.grid.v_grid().locate(v)) {
            (Some(ix), Some(iv)) => self.values[ix * self.grid.n_v_nodes() + iv],
            _ => 0.0,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.grid.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `a·self + b·other` on a shared grid.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.grid != other.grid {
            return config("grid functions live on different grids");
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.grid.clone(), values)
    }

    fn header(&self) -> Result<String> {
        Ok(serde_json::to_string(&GridHeader {
            dim: self.grid.dim(),
            window: self.grid.window.clone(),
            nx: self.grid.nx,
            nv: self.grid.nv,
        })?)
    }

    fn grid_from_header(line: &str) -> Result<PhaseGrid> {
        let h: GridHeader = serde_json::from_str(line.trim())?;
        check_dim(h.dim, h.window.dim())?;
        PhaseGrid::new(h.window, h.nx, h.nv)
    }

    /// JSON header line, then one value per line.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.header()?)?;
        for v in &self.values {
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn read_csv(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing header".into()))??;
        let grid = Self::grid_from_header(&header)?;
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            values.push(
                line.parse::<f64>()
                    .map_err(|e| Error::Format(format!("{e}: {line}")))?,
            );
        }
        Self::new(grid, values)
    }

    /// JSON header line, then little-endian `f64` values.
    pub fn write_binary(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.header()?)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut reader: impl BufRead) -> Result<Self> {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let grid = Self::grid_from_header(&header)?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * grid.len() {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                8 * grid.len(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(grid, values)
    }
}

/// Fills a value vector fiber by fiber in parallel. The callback receives
/// the node coordinates `x`, `v` and the concatenated state buffer `z`
/// (prefilled with `(x, v)`), which it may overwrite.
pub(crate) fn fill_fibers(
    grid: &PhaseGrid,
    node: impl Fn(&[f64], &[f64], &mut [f64]) -> Result<f64> + Sync,
) -> Result<Vec<f64>> {
    let d = grid.dim();
    let xg = grid.x_grid();
    let vg = grid.v_grid();
    let mut values = vec![0.0; grid.len()];
    values
        .par_chunks_mut(grid.n_v_nodes())
        .enumerate()
        .try_for_each(|(ix, fiber)| -> Result<()> {
            let mut x = vec![0.0; d];
            let mut v = vec![0.0; d];
            let mut z = vec![0.0; 2 * d];
            xg.node(ix, &mut x);
            for (iv, out) in fiber.iter_mut().enumerate() {
                vg.node(iv, &mut v);
                z[..d].copy_from_slice(&x);
                z[d..].copy_from_slice(&v);
                *out = node(&x, &v, &mut z)?;
            }
            Ok(())
        })?;
    Ok(values)
}

/// A function of position on an [`XGrid`], such as a velocity moment.
#[derive(Clone, Debug, PartialEq)]
pub struct XGridFunction {
    pub grid: XGrid,
    pub values: Vec<f64>,
}

impl XGridFunction {
    pub fn new(grid: XGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Format(format!(
                "grid has {} nodes but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn sample(grid: XGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|k| {
                grid.node(k, &mut x);
                f(&x)
            })
            .collect();
        Self { grid, values }
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// Rows `x₁..x_d, value` with a header line.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let d = self.grid.dim();
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        writeln!(out, "{}", header.join(","))?;
        let mut x = vec![0.0; d];
        for (k, v) in self.values.iter().enumerate() {
            self.grid.node(k, &mut x);
            let mut row: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            row.push(v.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid1(n: usize) -> PhaseGrid {
        PhaseGrid::new(PhaseWindow::cube(1, 0.0, 1.0).unwrap(), n, n).unwrap()
    }

    #[test]
    fn node_layout_is_x_outermost() {
        let g = PhaseGrid::new(
            PhaseWindow::new(
                Rect::cube(1, 0.0, 2.0).unwrap(),
                Rect::cube(1, -1.0, 1.0).unwrap(),
            )
            .unwrap(),
            2,
            4,
        )
        .unwrap();
        let f = PhaseGridFunction::sample(g, |x, v| 10.0 * x[0] + v[0]).unwrap();
        assert_eq!(f.fiber(0), &[4.25, 4.75, 5.25, 5.75]);
        assert_eq!(f.fiber(1)[0], 14.25);
    }

    #[test]
    fn mass_cache_matches_riemann_sum() {
        let f = PhaseGridFunction::sample(grid1(16), |x, v| x[0] * v[0]).unwrap();
        let direct: f64 = f.values().iter().sum::<f64>() / 256.0;
        assert!((f.mass() - direct).abs() < 1e-12);
        // midpoint rule is exact for bilinear integrands
        assert!((f.mass() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PhaseGridFunction::new(grid1(2), vec![0.0; 3]).is_err());
        assert!(PhaseGridFunction::new(grid1(1), vec![f64::NAN]).is_err());
        assert!(PhaseGrid::new(PhaseWindow::cube(1, 0.0, 0.0).unwrap(), 2, 2).is_err());
    }

    #[test]
    fn locate_and_nearest() {
        let g = XGrid::new(Rect::cube(2, 0.0, 1.0).unwrap(), 4).unwrap();
        assert_eq!(g.locate(&[0.1, 0.9]), Some(3));
        assert_eq!(g.locate(&[1.0, 1.0]), Some(15));
        assert_eq!(g.locate(&[1.1, 0.0]), None);
        let f = PhaseGridFunction::sample(grid1(4), |x, _| x[0]).unwrap();
        assert_eq!(f.nearest(&[0.3], &[0.5]), 0.375);
        assert_eq!(f.nearest(&[2.0], &[0.5]), 0.0);
    }

    #[test]
    fn rho_csv_rows() {
        let g = XGrid::new(Rect::cube(1, 0.0, 1.0).unwrap(), 2).unwrap();
        let r = XGridFunction::new(g, vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "x1,value\n0.25,1\n0.75,2\n"
        );
    }

    proptest! {
        #[test]
        fn serialization_roundtrips(vals in proptest::collection::vec(-1e6f64..1e6, 16), binary in any::<bool>()) {
            let f = PhaseGridFunction::new(
                PhaseGrid::new(PhaseWindow::cube(1, -0.5, 2.0).unwrap(), 4, 4).unwrap(),
                vals,
            ).unwrap();
            let mut buf = Vec::new();
            let back = if binary {
                f.write_binary(&mut buf).unwrap();
                PhaseGridFunction::read_binary(&buf[..]).unwrap()
            } else {
                f.write_csv(&mut buf).unwrap();
                PhaseGridFunction::read_csv(&buf[..]).unwrap()
            };
            prop_assert_eq!(back, f);
        }

        #[test]
        fn flat_and_multi_index_agree(k in 0usize..125) {
            let g = XGrid::new(Rect::cube(3, 0.0, 1.0).unwrap(), 5).unwrap();
            let mut idx = [0usize; 3];
            g.multi_index(k, &mut idx);
            prop_assert_eq!(g.flat_index(&idx), k);
        }
    }
}
