//! Axis-aligned boxes in position space, velocity space and phase space.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Result};

/// A closed axis-aligned box `[lo_1, hi_1] × … × [lo_d, hi_d]`.
///
/// Bounds may be infinite, which is how "no restriction in this variable"
/// is expressed (for example the velocity support of `1_A(x)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return config("box must have at least one axis");
        }
        for (a, b) in lo.iter().zip(&hi) {
            if a.is_nan() || b.is_nan() || a > b {
                return config(format!("invalid box axis [{a}, {b}]"));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[lo, hi]^d`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    /// All of `R^d`.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; dim],
            hi: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (a, b))| *x >= *a && *x <= *b)
    }

    /// Side lengths.
    pub fn lengths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lengths().iter().product()
    }

    /// Nondegenerate and bounded on every axis.
    pub fn is_proper(&self) -> bool {
        self.lo
            .iter()
            .zip(&self.hi)
            .all(|(a, b)| a.is_finite() && b.is_finite() && b > a)
    }

    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|a| a - margin).collect(),
            hi: self.hi.iter().map(|b| b + margin).collect(),
        }
    }

    /// Grows the box so that it contains `p`.
    pub fn include(&mut self, p: &[f64]) {
        for (i, &x) in p.iter().enumerate() {
            self.lo[i] = self.lo[i].min(x);
            self.hi[i] = self.hi[i].max(x);
        }
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &Rect) -> Self {
        let mut out = self.clone();
        out.include(&other.lo);
        out.include(&other.hi);
        out
    }

    /// Iterates over the `2^d` corners.
    pub fn corners(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let d = self.dim();
        (0..1usize << d).map(move |mask| {
            (0..d)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        self.hi[i]
                    } else {
                        self.lo[i]
                    }
                })
                .collect()
        })
    }
}

/// A rectangular window `X × V` in phase space `R^d × R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub x: Rect,
    pub v: Rect,
}

impl PhaseWindow {
    pub fn new(x: Rect, v: Rect) -> Result<Self> {
        check_dim(x.dim(), v.dim())?;
        Ok(Self { x, v })
    }

    /// `[lo, hi]^{2d}`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(Rect::cube(dim, lo, hi)?, Rect::cube(dim, lo, hi)?)
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            x: Rect::unbounded(dim),
            v: Rect::unbounded(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn contains(&self, x: &[f64], v: &[f64]) -> bool {
        self.x.contains(x) && self.v.contains(v)
    }

    /// Membership test for a concatenated state `(x, v)`.
    pub fn contains_state(&self, z: &[f64]) -> bool {
        let d = self.dim();
        self.contains(&z[..d], &z[d..])
    }

    pub fn volume(&self) -> f64 {
        self.x.volume() * self.v.volume()
    }

    pub fn is_proper(&self) -> bool {
        self.x.is_proper() && self.v.is_proper()
    }

    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            x: self.x.inflate(margin),
            v: self.v.inflate(margin),
        }
    }

    pub fn hull(&self, other: &PhaseWindow) -> Self {
        Self {
            x: self.x.hull(&other.x),
            v: self.v.hull(&other.v),
        }
    }

    /// Concatenated `(x, v)` corners, `4^d` of them.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for cx in self.x.corners() {
            for cv in self.v.corners() {
                let mut z = cx.clone();
                z.extend_from_slice(&cv);
                out.push(z);
            }
        }
        out
    }
}
