//! Minimal PNG charts without text; the numbers travel in accompanying CSV files.

use std::path::Path;

use crate::io::write_atomic;
use crate::{Error, Result};

/// RGB raster.
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

const WHITE: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [60, 60, 60];
const LINE: [u8; 3] = [31, 119, 180];
const MARK: [u8; 3] = [214, 39, 40];

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![WHITE; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.pixels[y * self.width + x] = c;
            }
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            w.write_image_data(&flat).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png()?)
    }
}

/// Dark blue (0) through teal to yellow (1).
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [
        [68.0, 1.0, 84.0],
        [49.0, 104.0, 142.0],
        [53.0, 183.0, 121.0],
        [253.0, 231.0, 37.0],
    ];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 1.0 };
    let pos = v * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let mut c = [0u8; 3];
    for (k, ch) in c.iter_mut().enumerate() {
        *ch = (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    }
    c
}

/// Heatmap of `values[row][col]`, colour-scaled to the finite min/max.
/// `highlight` outlines one cell.
pub fn heatmap(values: &[Vec<f64>], highlight: Option<(usize, usize)>, cell: usize) -> Canvas {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let finite = values.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut c = Canvas::new(cols * cell + 2, rows * cell + 2);
    for (r, row) in values.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            c.fill_rect(1 + k * cell, 1 + r * cell, cell, cell, colormap(t));
        }
    }
    if let Some((r, k)) = highlight {
        let (x0, y0) = ((1 + k * cell) as i64, (1 + r * cell) as i64);
        let (x1, y1) = (x0 + cell as i64 - 1, y0 + cell as i64 - 1);
        for inset in 0..2 {
            let (a, b, p, q) = (x0 + inset, y0 + inset, x1 - inset, y1 - inset);
            c.line((a, b), (p, b), MARK);
            c.line((p, b), (p, q), MARK);
            c.line((p, q), (a, q), MARK);
            c.line((a, q), (a, b), MARK);
        }
    }
    c
}

/// Line chart of `(x, y)` series sharing axes; `log_y` plots `log10(y)`.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: usize, height: usize, log_y: bool) -> Canvas {
    let mut c = Canvas::new(width, height);
    let margin = 20i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    c.line((margin, margin), (margin, margin + h), AXIS);
    c.line((margin, margin + h), (margin + w, margin + h), AXIS);
    let ty = |y: f64| if log_y { y.max(1e-12).log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flatten()
        .map(|&(x, y)| (x, ty(y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return c;
    }
    let (xl, xh) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (yl, yh) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = |x: f64| margin + if xh > xl { ((x - xl) / (xh - xl) * w as f64) as i64 } else { w / 2 };
    let sy = |y: f64| margin + h - if yh > yl { ((y - yl) / (yh - yl) * h as f64) as i64 } else { h / 2 };
    let palette = [LINE, MARK, [44, 160, 44], [148, 103, 189]];
    for (i, s) in series.iter().enumerate() {
        let col = palette[i % palette.len()];
        let mapped: Vec<(i64, i64)> = s
            .iter()
            .map(|&(x, y)| (x, ty(y)))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| (sx(x), sy(y)))
            .collect();
        for pair in mapped.windows(2) {
            c.line(pair[0], pair[1], col);
        }
        if mapped.len() == 1 {
            c.set(mapped[0].0, mapped[0].1, col);
        }
    }
    c
}
