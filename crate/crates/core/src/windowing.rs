//! Window geometry: padding to whole windows, partition and reverse, cyclic
//! shift, and the window-level aggregation used by global attention together
//! with its inverse.
//!
//! One convention is used everywhere: windows are numbered row-major over
//! the padded map, window `(x', y')` has its top-left token at
//! `(M·x', M·y')`, and slots inside a window are row-major too. Padding is
//! appended at the bottom and right only.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, FeatureMap, Tensor};

/// `(rows, cols, C)` map with one aggregated token per window.
pub type AggregatedMap = Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: usize,
    /// Per-offset weights, `window²` entries in row-major slot order.
    pub alpha: Vec<f64>,
}

impl WindowConfig {
    /// Equal weights for every token.
    pub fn new(window: usize) -> Result<Self> {
        Self::with_alpha(window, vec![1.0; window * window])
    }

    pub fn with_alpha(window: usize, alpha: Vec<f64>) -> Result<Self> {
        let cfg = Self { window, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        if self.alpha.len() != self.window * self.window {
            return Err(Error::Config(format!(
                "alpha needs {} entries, got {}",
                self.window * self.window,
                self.alpha.len()
            )));
        }
        if self.alpha_sum() <= 0.0 {
            return Err(Error::Config("aggregation weights must have a positive sum".into()));
        }
        Ok(())
    }

    fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// `alpha / sum(alpha)` per slot.
    fn normalized_alpha(&self) -> Result<Vec<f64>> {
        let s = self.alpha_sum();
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::Config("aggregation weights must have a positive sum".into()));
        }
        Ok(self.alpha.iter().map(|a| a / s).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub window: usize,
    pub h: usize,
    pub w: usize,
    pub h_pad: usize,
    pub w_pad: usize,
    /// Windows along the height.
    pub rows: usize,
    /// Windows along the width.
    pub cols: usize,
    pub pad_b: usize,
    pub pad_r: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, window: usize) -> Result<Self> {
        if h == 0 || w == 0 || window == 0 {
            return Err(Error::Config(format!("invalid grid {h}x{w} with window {window}")));
        }
        let h_pad = h.div_ceil(window) * window;
        let w_pad = w.div_ceil(window) * window;
        Ok(Self {
            window,
            h,
            w,
            h_pad,
            w_pad,
            rows: h_pad / window,
            cols: w_pad / window,
            pad_b: h_pad - h,
            pad_r: w_pad - w,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.rows * self.cols
    }

    pub fn slots(&self) -> usize {
        self.window * self.window
    }

    /// Top-left token `(row, col)` of window `index`.
    pub fn window_origin(&self, index: usize) -> (usize, usize) {
        (self.window * (index / self.cols), self.window * (index % self.cols))
    }

    pub fn window_at(&self, row: usize, col: usize) -> usize {
        (row / self.window) * self.cols + col / self.window
    }

    /// For every window slot (window-major, slot row-major), the unpadded
    /// token it reads after a cyclic shift by `shift`; `None` for padding.
    pub fn slot_sources(&self, shift: usize) -> Vec<Option<usize>> {
        let m = self.window;
        let mut out = Vec::with_capacity(self.num_windows() * self.slots());
        for win in 0..self.num_windows() {
            let (r0, c0) = self.window_origin(win);
            for r in 0..m {
                for c in 0..m {
                    let y = (r0 + r + shift) % self.h_pad;
                    let x = (c0 + c + shift) % self.w_pad;
                    out.push((y < self.h && x < self.w).then_some(y * self.w + x));
                }
            }
        }
        out
    }

    /// For every unpadded token, its row in the window-slot layout produced
    /// by [`slot_sources`](Self::slot_sources) with the same shift.
    pub fn token_slots(&self, shift: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.h * self.w];
        for (slot, src) in self.slot_sources(shift).into_iter().enumerate() {
            if let Some(t) = src {
                out[t] = slot;
            }
        }
        out
    }

    /// Aggregation groups over unpadded tokens: one group per window with
    /// weights `alpha / sum(alpha)`. Padding tokens are zero and add nothing.
    pub fn aggregate_groups(&self, cfg: &WindowConfig) -> Result<Vec<Vec<(usize, f64)>>> {
        self.check_cfg(cfg)?;
        let weights = cfg.normalized_alpha()?;
        let sources = self.slot_sources(0);
        Ok(sources
            .chunks(self.slots())
            .map(|slots| {
                slots
                    .iter()
                    .zip(&weights)
                    .filter_map(|(s, &w)| s.map(|t| (t, w)))
                    .collect()
            })
            .collect())
    }

    /// Inverse aggregation onto every window slot (padding included).
    pub fn broadcast_slot_groups(&self, cfg: &WindowConfig) -> Result<Vec<Vec<(usize, f64)>>> {
        self.check_cfg(cfg)?;
        let mut out = Vec::with_capacity(self.num_windows() * self.slots());
        for win in 0..self.num_windows() {
            for &a in &cfg.alpha {
                out.push(vec![(win, a)]);
            }
        }
        Ok(out)
    }

    /// Inverse aggregation onto the unpadded tokens.
    pub fn broadcast_token_groups(&self, cfg: &WindowConfig) -> Result<Vec<Vec<(usize, f64)>>> {
        self.check_cfg(cfg)?;
        let m = self.window;
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let slot = (y % m) * m + x % m;
                out.push(vec![(self.window_at(y, x), cfg.alpha[slot])]);
            }
        }
        Ok(out)
    }

    fn check_cfg(&self, cfg: &WindowConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.window != self.window {
            return Err(Error::Config(format!(
                "window config M={} does not match grid M={}",
                cfg.window, self.window
            )));
        }
        Ok(())
    }
}

fn dims3(op: &'static str, z: &FeatureMap) -> Result<(usize, usize, usize)> {
    match z.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        other => shape_err(op, other, &[0, 0, 0]),
    }
}

/// Zero-pads bottom and right to whole windows.
pub fn pad_to_windows(z: &FeatureMap, cfg: &WindowConfig) -> Result<(FeatureMap, WindowGrid)> {
    let (h, w, c) = dims3("pad_to_windows", z)?;
    let grid = WindowGrid::new(h, w, cfg.window)?;
    let mut out = vec![0.0; grid.h_pad * grid.w_pad * c];
    for y in 0..h {
        let src = &z.data()[y * w * c..(y + 1) * w * c];
        out[y * grid.w_pad * c..y * grid.w_pad * c + w * c].copy_from_slice(src);
    }
    Ok((Tensor::new(vec![grid.h_pad, grid.w_pad, c], out)?, grid))
}

/// `(H_pad, W_pad, C)` → `(nW, M, M, C)`, windows row-major.
pub fn window_partition(z: &FeatureMap, grid: &WindowGrid) -> Result<Tensor> {
    let (h, w, c) = dims3("window_partition", z)?;
    if (h, w) != (grid.h_pad, grid.w_pad) {
        return Err(Error::Usage(format!(
            "window_partition expects a padded {}x{} map, got {h}x{w}",
            grid.h_pad, grid.w_pad
        )));
    }
    let padded = WindowGrid::new(h, w, grid.window)?;
    let idx = padded.slot_sources(0);
    let rows = ops::gather_rows(&z.reshape(&[h * w, c])?, &idx)?;
    rows.reshape(&[grid.num_windows(), grid.window, grid.window, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, grid: &WindowGrid) -> Result<FeatureMap> {
    let m = grid.window;
    let c = match windows.shape() {
        [n, a, b, c] if *n == grid.num_windows() && *a == m && *b == m => *c,
        other => return shape_err("window_reverse", other, &[grid.num_windows(), m, m, 0]),
    };
    let padded = WindowGrid::new(grid.h_pad, grid.w_pad, m)?;
    let slots: Vec<Option<usize>> = padded.token_slots(0).into_iter().map(Some).collect();
    let rows = ops::gather_rows(&windows.reshape(&[grid.num_windows() * m * m, c])?, &slots)?;
    rows.reshape(&[grid.h_pad, grid.w_pad, c])
}

fn roll(z: &FeatureMap, dy: isize, dx: isize) -> Result<FeatureMap> {
    let (h, w, c) = dims3("cyclic_shift", z)?;
    let mut out = vec![0.0; z.numel()];
    for y in 0..h {
        let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
            let src = (sy * w + sx) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&z.data()[src..src + c]);
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Torus roll by `(-shift, -shift)`: output `(y, x)` reads input
/// `(y + shift, x + shift)`.
pub fn cyclic_shift(z: &FeatureMap, shift: usize) -> Result<FeatureMap> {
    roll(z, shift as isize, shift as isize)
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift(z: &FeatureMap, shift: usize) -> Result<FeatureMap> {
    roll(z, -(shift as isize), -(shift as isize))
}

/// Weighted window means of a padded map.
pub fn aggregate(z: &FeatureMap, cfg: &WindowConfig, grid: &WindowGrid) -> Result<AggregatedMap> {
    let windows = window_partition(z, grid)?;
    grid.check_cfg(cfg)?;
    let weights = cfg.normalized_alpha()?;
    let (m2, c) = (grid.slots(), windows.shape()[3]);
    let mut out = vec![0.0; grid.num_windows() * c];
    for win in 0..grid.num_windows() {
        for (slot, &wt) in weights.iter().enumerate() {
            let row = &windows.data()[(win * m2 + slot) * c..(win * m2 + slot + 1) * c];
            for (o, v) in out[win * c..(win + 1) * c].iter_mut().zip(row) {
                *o += wt * v;
            }
        }
    }
    Tensor::new(vec![grid.rows, grid.cols, c], out)
}

/// Broadcasts each aggregated token back over its window, weighted by alpha.
pub fn inverse_aggregate(zbar: &AggregatedMap, cfg: &WindowConfig, grid: &WindowGrid) -> Result<FeatureMap> {
    let (r, k, c) = dims3("inverse_aggregate", zbar)?;
    if (r, k) != (grid.rows, grid.cols) {
        return shape_err("inverse_aggregate", zbar.shape(), &[grid.rows, grid.cols, c]);
    }
    grid.check_cfg(cfg)?;
    let m = grid.window;
    let mut out = vec![0.0; grid.h_pad * grid.w_pad * c];
    for y in 0..grid.h_pad {
        for x in 0..grid.w_pad {
            let a = cfg.alpha[(y % m) * m + x % m];
            let win = (y / m) * grid.cols + x / m;
            for ch in 0..c {
                out[(y * grid.w_pad + x) * c + ch] = a * zbar.data()[win * c + ch];
            }
        }
    }
    Tensor::new(vec![grid.h_pad, grid.w_pad, c], out)
}

/// Crops a padded map back to `(h, w)`.
pub fn crop(z: &FeatureMap, h: usize, w: usize) -> Result<FeatureMap> {
    let (hp, wp, c) = dims3("crop", z)?;
    if h > hp || w > wp {
        return shape_err("crop", z.shape(), &[h, w, c]);
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        out.extend_from_slice(&z.data()[y * wp * c..(y * wp + w) * c]);
    }
    Tensor::new(vec![h, w, c], out)
}
