//! Raster plots: metric curves and Input | Output | Target montages.

use std::path::Path;

use font8x8::UnicodeFonts;
use image::GrayImage;

const GLYPH: usize = 8;
const WHITE: u8 = 255;
const BLACK: u8 = 0;
const GRID: u8 = 200;

pub const MONTAGE_COLUMNS: [&str; 3] = ["Input", "Output", "Target"];

/// 8-bit grayscale drawing surface.
pub struct Canvas {
    width: usize,
    height: usize,
    px: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            px: vec![WHITE; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = v;
        }
    }

    #[cfg(test)]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.px[y * self.width + x]
    }

    #[cfg(test)]
    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, v);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, v: u8) {
        for (i, ch) in s.chars().enumerate() {
            let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
                continue;
            };
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..GLYPH {
                    if bits & (1 << col) != 0 {
                        self.set(x + (i * GLYPH + col) as i64, y + row as i64, v);
                    }
                }
            }
        }
    }

    pub fn text_width(s: &str) -> usize {
        s.chars().count() * GLYPH
    }

    /// Copies a `[0, 255]` image with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, x: usize, y: usize, w: usize, h: usize, pixels: &[f64]) {
        for r in 0..h {
            for c in 0..w {
                let v = pixels[r * w + c].round().clamp(0.0, 255.0) as u8;
                self.set((x + c) as i64, (y + r) as i64, v);
            }
        }
    }

    pub fn save(&self, path: &Path) -> image::ImageResult<()> {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.px.clone())
            .expect("buffer size matches")
            .save(path)
    }
}

/// One labelled series for a curve panel.
pub struct Series<'a> {
    pub title: &'a str,
    pub values: Vec<f64>,
}

const PANEL_W: usize = 360;
const PANEL_H: usize = 170;
const LEFT: usize = 64;
const TOP: usize = 20;
const BOTTOM: usize = 14;
const RIGHT: usize = 12;

/// Stacks one line-chart panel per series.
pub fn curves(series: &[Series]) -> Canvas {
    let mut canvas = Canvas::new(PANEL_W, PANEL_H * series.len().max(1));
    for (i, s) in series.iter().enumerate() {
        panel(&mut canvas, i * PANEL_H, s);
    }
    canvas
}

fn panel(canvas: &mut Canvas, y0: usize, s: &Series) {
    let (px0, py0) = (LEFT as i64, (y0 + TOP) as i64);
    let (px1, py1) = ((PANEL_W - RIGHT) as i64, (y0 + PANEL_H - BOTTOM) as i64);
    canvas.text(LEFT as i64, y0 as i64 + 6, s.title, BLACK);
    canvas.line((px0, py0), (px0, py1), BLACK);
    canvas.line((px0, py1), (px1, py1), BLACK);
    let finite: Vec<f64> = s.values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    canvas.line((px0, py0), (px1, py0), GRID);
    canvas.text(2, py0 - 3, &short(hi), BLACK);
    canvas.text(2, py1 - 5, &short(lo), BLACK);
    let n = s.values.len();
    let to_xy = |i: usize, v: f64| {
        let fx = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let fy = (v - lo) / (hi - lo);
        (
            px0 + 2 + (fx * (px1 - px0 - 4) as f64).round() as i64,
            py1 - 2 - (fy * (py1 - py0 - 4) as f64).round() as i64,
        )
    };
    let mut prev: Option<(i64, i64)> = None;
    for (i, &v) in s.values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = to_xy(i, v);
        match prev {
            Some(q) => canvas.line(q, p, BLACK),
            None => canvas.set(p.0, p.1, BLACK),
        }
        prev = Some(p);
    }
}

fn short(v: f64) -> String {
    let s = format!("{v:.4}");
    s.chars().take(7).collect()
}

pub const HEADER: usize = 16;
pub const GAP: usize = 4;

/// Grid with one row per image triple and a header row naming the columns.
pub fn montage(rows: &[[(usize, usize, Vec<f64>); 3]]) -> Canvas {
    let tile_w = rows.iter().flat_map(|r| r.iter().map(|t| t.1)).max().unwrap_or(64);
    let tile_h = rows.iter().flat_map(|r| r.iter().map(|t| t.0)).max().unwrap_or(64);
    let width = 3 * tile_w + 4 * GAP;
    let height = HEADER + rows.len() * (tile_h + GAP) + GAP;
    let mut canvas = Canvas::new(width, height);
    for (c, label) in MONTAGE_COLUMNS.iter().enumerate() {
        let x = GAP + c * (tile_w + GAP) + tile_w.saturating_sub(Canvas::text_width(label)) / 2;
        canvas.text(x as i64, 4, label, BLACK);
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, (h, w, pixels)) in row.iter().enumerate() {
            canvas.blit(GAP + c * (tile_w + GAP), HEADER + r * (tile_h + GAP), *w, *h, pixels);
        }
    }
    canvas
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_layout() {
        let tile = |v: f64| (32, 32, vec![v; 32 * 32]);
        let m = montage(&[[tile(10.0), tile(20.0), tile(30.0)], [tile(40.0), tile(50.0), tile(60.0)]]);
        assert_eq!(m.size(), (3 * 32 + 4 * GAP, HEADER + 2 * (32 + GAP) + GAP));
        assert_eq!(m.get(GAP, HEADER), 10);
        assert_eq!(m.get(GAP + 2 * (32 + GAP), HEADER + 32 + GAP), 60);
        let header_ink = (0..m.size().0).filter(|&x| (0..HEADER).any(|y| m.get(x, y) == BLACK)).count();
        assert!(header_ink > 0);
    }

    #[test]
    fn curves_draw_each_panel() {
        let c = curves(&[
            Series { title: "a", values: vec![1.0, 2.0, 3.0] },
            Series { title: "b", values: vec![f64::NAN, 1.0] },
        ]);
        assert_eq!(c.size(), (PANEL_W, 2 * PANEL_H));
    }
}
