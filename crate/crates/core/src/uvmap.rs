//! UV-space parameter maps: rasterization of per-vertex attributes into the
//! atlas and differentiable bilinear sampling at continuous coordinates.
//!
//! Texel `(i, j)` has its center at `((i + 0.5) / W, (j + 0.5) / H)`; `u` runs
//! along columns and `v` along rows. Sampling clamps to the grid of centers.

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{AtlasRegion, MorphableModel, Region};

/// `H × W × C` multichannel image over the UV square.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major `[row][col][channel]`.
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl UvMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(width >= 1 && height >= 1, "map must be at least 1x1");
        UvMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            valid: vec![false; width * height],
        }
    }

    /// Builds an all-valid map from raw data.
    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::invalid("map data does not match its dimensions"));
        }
        Ok(UvMap {
            width,
            height,
            channels,
            data,
            valid: vec![true; width * height],
        })
    }

    pub fn texel(&self, col: usize, row: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn texel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &UvMap) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Elementwise sum of two maps; validity is the union.
    pub fn add(&self, other: &UvMap) -> Result<UvMap> {
        if !self.same_shape(other) {
            return Err(Error::invalid("map shapes differ"));
        }
        Ok(UvMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            valid: self.valid.iter().zip(&other.valid).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Copies channels `[start, start + count)` into a new map.
    pub fn channel_slice(&self, start: usize, count: usize) -> UvMap {
        let mut data = Vec::with_capacity(self.width * self.height * count);
        for t in 0..self.width * self.height {
            let o = t * self.channels + start;
            data.extend_from_slice(&self.data[o..o + count]);
        }
        UvMap {
            width: self.width,
            height: self.height,
            channels: count,
            data,
            valid: self.valid.clone(),
        }
    }

    /// Fills invalid texels that touch a valid one with the mean of their
    /// valid 4-neighbours (one pass).
    pub fn dilate_once(&mut self) {
        let (w, h, c) = (self.width, self.height, self.channels);
        let src = self.clone();
        for row in 0..h {
            for col in 0..w {
                if src.valid[row * w + col] {
                    continue;
                }
                let mut acc = vec![0.0; c];
                let mut n = 0;
                let neighbours = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)];
                for (dx, dy) in neighbours {
                    let (x, y) = (col as i64 + dx, row as i64 + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let (x, y) = (x as usize, y as usize);
                    if src.valid[y * w + x] {
                        for (a, v) in acc.iter_mut().zip(src.texel(x, y)) {
                            *a += v;
                        }
                        n += 1;
                    }
                }
                if n > 0 {
                    let t = self.texel_mut(col, row);
                    for (dst, a) in t.iter_mut().zip(acc) {
                        *dst = a / n as f64;
                    }
                    self.valid[row * w + col] = true;
                }
            }
        }
    }
}

/// Diagnostics of a UV rasterization pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UvRasterReport {
    pub degenerate_faces: usize,
    pub covered_texels: usize,
}

/// Rasterizes `attributes` (`V × channels`, row-major) into a `width × height`
/// map by barycentric interpolation over each face's UV triangle.
pub fn rasterize_uv(
    model: &MorphableModel,
    attributes: &[f64],
    channels: usize,
    width: usize,
    height: usize,
) -> Result<(UvMap, UvRasterReport)> {
    if attributes.len() != model.vertex_count() * channels {
        return Err(Error::invalid(format!(
            "attribute count {} does not match {} vertices x {} channels",
            attributes.len(),
            model.vertex_count(),
            channels
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("map must be at least 1x1"));
    }
    let mut degenerate = vec![false; model.faces.len()];
    for (f, uv) in model.uv_coords.iter().enumerate() {
        let area = tri_area(uv);
        degenerate[f] = area.abs() < 1e-12;
    }
    let rows: Vec<(Vec<f64>, Vec<bool>)> = exec::map_range(height, |row| {
        let mut data = vec![0.0; width * channels];
        let mut valid = vec![false; width];
        let y = (row as f64 + 0.5) / height as f64;
        for (f, uv) in model.uv_coords.iter().enumerate() {
            if degenerate[f] {
                continue;
            }
            let vmin = uv[0][1].min(uv[1][1]).min(uv[2][1]);
            let vmax = uv[0][1].max(uv[1][1]).max(uv[2][1]);
            if y < vmin || y > vmax {
                continue;
            }
            let umin = uv[0][0].min(uv[1][0]).min(uv[2][0]);
            let umax = uv[0][0].max(uv[1][0]).max(uv[2][0]);
            let c0 = ((umin * width as f64 - 0.5).floor().max(0.0)) as usize;
            let c1 = ((umax * width as f64 - 0.5).ceil().max(0.0) as usize).min(width - 1);
            let face = model.faces[f];
            for col in c0..=c1 {
                let x = (col as f64 + 0.5) / width as f64;
                if let Some(bary) = barycentric(uv, x, y) {
                    for ch in 0..channels {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            acc += bary[k] * attributes[face[k] as usize * channels + ch];
                        }
                        data[col * channels + ch] = acc;
                    }
                    valid[col] = true;
                }
            }
        }
        (data, valid)
    });
    let mut map = UvMap::zeros(width, height, channels);
    for (row, (d, v)) in rows.into_iter().enumerate() {
        map.data[row * width * channels..(row + 1) * width * channels].copy_from_slice(&d);
        map.valid[row * width..(row + 1) * width].copy_from_slice(&v);
    }
    let report = UvRasterReport {
        degenerate_faces: degenerate.iter().filter(|d| **d).count(),
        covered_texels: map.valid_count(),
    };
    Ok((map, report))
}

fn tri_area(uv: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((uv[1][0] - uv[0][0]) * (uv[2][1] - uv[0][1]) - (uv[2][0] - uv[0][0]) * (uv[1][1] - uv[0][1]))
}

fn barycentric(uv: &[[f64; 2]; 3], x: f64, y: f64) -> Option<[f64; 3]> {
    let [a, b, c] = *uv;
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let l0 = ((b[1] - c[1]) * (x - c[0]) + (c[0] - b[0]) * (y - c[1])) / det;
    let l1 = ((c[1] - a[1]) * (x - c[0]) + (a[0] - c[0]) * (y - c[1])) / det;
    let l2 = 1.0 - l0 - l1;
    const EPS: f64 = -1e-12;
    (l0 >= EPS && l1 >= EPS && l2 >= EPS).then_some([l0, l1, l2])
}

/// The four texels and weights of a bilinear lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

impl BilinearTaps {
    pub fn new(width: usize, height: usize, u: f64, v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("sample ({u}, {v}) outside [0,1]^2")));
        }
        let (x0, x1, tx) = axis(u, width);
        let (y0, y1, ty) = axis(v, height);
        Ok(BilinearTaps {
            index: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weight: [
                (1.0 - tx) * (1.0 - ty),
                tx * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * ty,
            ],
        })
    }

    /// Weighted sum of the tapped texels into `out` (length = channels).
    pub fn gather(&self, data: &[f64], channels: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..4 {
            let w = self.weight[k];
            if w == 0.0 {
                continue;
            }
            let t = &data[self.index[k] * channels..(self.index[k] + 1) * channels];
            for (o, x) in out.iter_mut().zip(t) {
                *o += w * x;
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather).
    pub fn scatter(&self, grad: &mut [f64], channels: usize, upstream: &[f64]) {
        for k in 0..4 {
            let w = self.weight[k];
            if w == 0.0 {
                continue;
            }
            let t = &mut grad[self.index[k] * channels..(self.index[k] + 1) * channels];
            for (g, u) in t.iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
    }
}

fn axis(coord: f64, n: usize) -> (usize, usize, f64) {
    let x = (coord * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let x0 = (x.floor() as usize).min(n - 1);
    let x1 = (x0 + 1).min(n - 1);
    let t = if x1 == x0 { 0.0 } else { x - x0 as f64 };
    (x0, x1, t)
}

/// Bilinear interpolation of the map at `(u, v)`.
pub fn bilinear_sample(map: &UvMap, u: f64, v: f64) -> Result<Vec<f64>> {
    let taps = BilinearTaps::new(map.width, map.height, u, v)?;
    let mut out = vec![0.0; map.channels];
    taps.gather(&map.data, map.channels, &mut out);
    Ok(out)
}

/// Gradient of `⟨upstream, bilinear_sample(map, u, v)⟩` with respect to every
/// texel of `map` (same layout as `map.data`).
pub fn bilinear_sample_backward(map: &UvMap, u: f64, v: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != map.channels {
        return Err(Error::invalid("upstream gradient has wrong channel count"));
    }
    let taps = BilinearTaps::new(map.width, map.height, u, v)?;
    let mut grad = vec![0.0; map.data.len()];
    taps.scatter(&mut grad, map.channels, upstream);
    Ok(grad)
}

/// Regular grid of UV sample positions inside one region's chart.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub region: Region,
    pub cols: usize,
    pub rows: usize,
    /// Row-major `rows × cols` coordinates.
    pub coords: Vec<[f64; 2]>,
}

impl SampleGrid {
    /// `cols × rows` cell-centered samples over the chart shrunk by `inset`
    /// (UV units) on every side.
    pub fn for_region(chart: &AtlasRegion, cols: usize, rows: usize, inset: [f64; 2]) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::invalid("sample grid must be nonempty"));
        }
        let u0 = chart.uv_min[0] + inset[0];
        let u1 = chart.uv_max[0] - inset[0];
        let v0 = chart.uv_min[1] + inset[1];
        let v1 = chart.uv_max[1] - inset[1];
        if u1 <= u0 || v1 <= v0 {
            return Err(Error::invalid("inset leaves an empty chart"));
        }
        let mut coords = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                coords.push([
                    u0 + (c as f64 + 0.5) / cols as f64 * (u1 - u0),
                    v0 + (r as f64 + 0.5) / rows as f64 * (v1 - v0),
                ]);
            }
        }
        Self::new(chart.region, cols, rows, coords)
    }

    pub fn new(region: Region, cols: usize, rows: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != cols * rows || coords.is_empty() {
            return Err(Error::invalid("sample grid size does not match its layout"));
        }
        if coords.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("sample coordinate outside [0,1]^2"));
        }
        Ok(SampleGrid {
            region,
            cols,
            rows,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Verifies that every bilinear tap of every sample, and of its one-texel
    /// neighbours used for tangent estimation, lands on a valid texel.
    pub fn check_coverage(&self, map: &UvMap) -> Result<()> {
        let du = 1.0 / map.width as f64;
        let dv = 1.0 / map.height as f64;
        for (i, &[u, v]) in self.coords.iter().enumerate() {
            for (ou, ov) in [(0.0, 0.0), (du, 0.0), (-du, 0.0), (0.0, dv), (0.0, -dv)] {
                let taps = BilinearTaps::new(map.width, map.height, (u + ou).clamp(0.0, 1.0), (v + ov).clamp(0.0, 1.0))?;
                for k in 0..4 {
                    if taps.weight[k] > 0.0 && !map.valid[taps.index[k]] {
                        return Err(Error::invalid(format!(
                            "{} sample {i} at ({u:.4}, {v:.4}) touches an invalid texel",
                            self.region.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
