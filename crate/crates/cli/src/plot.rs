//! Static raster charts drawn directly into RGB images.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GUIDE: Rgb<u8> = Rgb([170, 170, 170]);

/// Series colours, cycled when there are more series than entries.
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// Plot area with a linear map from data coordinates to pixels.
struct Canvas {
    img: RgbImage,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
        let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN);
        for x in x0..=x1 {
            img.put_pixel(x, y1, AXIS);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, AXIS);
        }
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        Self {
            img,
            x_range: widen(x_range),
            y_range: widen(y_range),
        }
    }

    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN as f64 + (x - lo) / (hi - lo) * (WIDTH - 2 * MARGIN) as f64
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        (HEIGHT - MARGIN) as f64 - (y - lo) / (hi - lo) * (HEIGHT - 2 * MARGIN) as f64
    }

    fn dot(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Segment in data coordinates, two pixels thick.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (ax, ay, bx, by) = (self.px(a.0), self.py(a.1), self.px(b.0), self.py(b.1));
        let steps = (bx - ax).abs().max((by - ay).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (ax + t * (bx - ax)).round() as i64;
            let y = (ay + t * (by - ay)).round() as i64;
            self.dot(x, y, c);
            self.dot(x, y + 1, c);
        }
    }

    fn marker(&mut self, p: (f64, f64), c: Rgb<u8>) {
        let (x, y) = (self.px(p.0).round() as i64, self.py(p.1).round() as i64);
        for dx in -2..=2 {
            for dy in -2..=2 {
                self.dot(x + dx, y + dy, c);
            }
        }
    }

    /// Filled rectangle spanning `[x0, x1]` horizontally from the baseline.
    fn bar(&mut self, x0: f64, x1: f64, height: f64, c: Rgb<u8>) {
        let (l, r) = (self.px(x0).round() as i64, self.px(x1).round() as i64);
        let (top, base) = (
            self.py(height).round() as i64,
            self.py(self.y_range.0).round() as i64,
        );
        for x in l..r {
            for y in top.min(base)..base {
                self.dot(x, y, c);
            }
        }
    }

    fn save(&self, path: &Path) -> anyhow::Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Polylines with markers; every series shares the x positions `1..=len`.
pub fn line_chart(path: &Path, series: &[Vec<f64>], y_range: (f64, f64)) -> anyhow::Result<()> {
    let n = series.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut cv = Canvas::new((0.5, n as f64 + 0.5), y_range);
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64, v))
            .collect();
        for w in pts.windows(2) {
            cv.segment(w[0], w[1], c);
        }
        for &p in &pts {
            cv.marker(p, c);
        }
    }
    cv.save(path)
}

/// One reliability bin: lower edge, upper edge and, when the bin is
/// occupied, its accuracy and mean confidence.
pub type BinStats = (f64, f64, Option<(f64, f64)>);

/// Reliability diagram: bar heights are per-bin accuracy, with the ideal
/// diagonal and per-bin mean confidence markers overlaid.
pub fn reliability_chart(path: &Path, bins: &[BinStats]) -> anyhow::Result<()> {
    let mut cv = Canvas::new((0.0, 1.0), (0.0, 1.0));
    for &(lo, hi, stats) in bins {
        if let Some((acc, conf)) = stats {
            cv.bar(lo, hi, acc, PALETTE[0]);
            cv.marker(((lo + hi) / 2.0, conf), PALETTE[1]);
        }
    }
    cv.segment((0.0, 0.0), (1.0, 1.0), GUIDE);
    cv.save(path)
}

/// Overlaid histograms of several samples over a shared range.
pub fn histogram_chart(path: &Path, samples: &[Vec<f64>], n_bins: usize) -> anyhow::Result<()> {
    let all = samples.iter().flatten().copied();
    let hi = all.fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let counts: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut h = vec![0.0; n_bins];
            for &v in s {
                let b = ((v / hi) * n_bins as f64).floor() as usize;
                h[b.min(n_bins - 1)] += 1.0;
            }
            let total = s.len().max(1) as f64;
            h.iter().map(|c| c / total).collect()
        })
        .collect();
    let top = counts.iter().flatten().copied().fold(0.0, f64::max);
    let mut cv = Canvas::new((0.0, hi), (0.0, top.max(1e-9)));
    let width = hi / n_bins as f64;
    let k = samples.len().max(1) as f64;
    for (j, h) in counts.iter().enumerate() {
        for (b, &v) in h.iter().enumerate() {
            let x0 = b as f64 * width + j as f64 * width / k;
            cv.bar(x0, x0 + width / k, v, PALETTE[j % PALETTE.len()]);
        }
    }
    cv.save(path)
}

/// Grouped bars: one group per task, one colour per series, plus a guide
/// line at `reference`.
pub fn grouped_bar_chart(path: &Path, series: &[Vec<f64>], reference: f64) -> anyhow::Result<()> {
    let groups = series.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let top = series.iter().flatten().copied().fold(reference, f64::max);
    let mut cv = Canvas::new((0.0, groups as f64), (0.0, top));
    let k = series.len().max(1) as f64;
    for (j, s) in series.iter().enumerate() {
        for (g, &v) in s.iter().enumerate() {
            let x0 = g as f64 + 0.1 + 0.8 * j as f64 / k;
            cv.bar(x0, x0 + 0.8 / k, v, PALETTE[j % PALETTE.len()]);
        }
    }
    cv.segment((0.0, reference), (groups as f64, reference), GUIDE);
    cv.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_write_png_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        line_chart(
            &p.join("a.png"),
            &[vec![0.9, 0.7, 0.5], vec![0.8]],
            (0.0, 1.0),
        )
        .unwrap();
        reliability_chart(
            &p.join("b.png"),
            &[(0.0, 0.5, Some((0.3, 0.4))), (0.5, 1.0, None)],
        )
        .unwrap();
        histogram_chart(&p.join("c.png"), &[vec![0.1, 0.2, 0.9], vec![]], 8).unwrap();
        grouped_bar_chart(&p.join("d.png"), &[vec![0.2, 0.8]], 0.5).unwrap();
        for f in ["a", "b", "c", "d"] {
            let img = image::open(p.join(format!("{f}.png"))).unwrap();
            assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        }
    }
}
