//! Deterministic raster plots: accuracy-vs-lambda curves and robustness
//! bars. Drawn directly into an RGB buffer; no text, so values are also
//! returned in a summary for callers that need them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advtrain::RobustnessTable;
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const SWEEP_SCHEMA_VERSION: u32 = 1;

const W: usize = 480;
const H: usize = 320;
const MARGIN: usize = 32;
const BG: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const COLORS: [[u8; 3]; 5] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub lambda: f64,
    pub clean: f64,
    pub robust: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepReport {
    pub schema_version: u32,
    /// Threat whose accuracy fills `robust`.
    pub threat: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Lambda,
    Robustness,
}

/// What was drawn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub kind: PlotKind,
    /// Polylines with at least two vertices.
    pub curves: usize,
    pub markers: usize,
    pub bars: usize,
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut img = RgbImage::new(H, W);
        img.data.iter_mut().zip(BG.iter().cycle()).for_each(|(p, b)| *p = *b);
        Self { img }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            self.img.set(y as usize, x as usize, c);
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
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

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    /// Frame plus horizontal grid lines at every 0.1 of accuracy.
    fn axes(&mut self) {
        for i in 0..=10 {
            let y = ypix(i as f64 / 10.0);
            self.line((MARGIN as i64, y), ((W - MARGIN) as i64, y), GRID);
        }
        let (l, r, t, b) = (MARGIN as i64, (W - MARGIN) as i64, MARGIN as i64, (H - MARGIN) as i64);
        self.line((l, t), (l, b), AXIS);
        self.line((l, b), (r, b), AXIS);
    }
}

fn ypix(v: f64) -> i64 {
    let span = (H - 2 * MARGIN) as f64;
    (H - MARGIN) as i64 - (v.clamp(0.0, 1.0) * span).round() as i64
}

fn xpix(t: f64) -> i64 {
    MARGIN as i64 + 8 + (t * (W - 2 * MARGIN - 16) as f64).round() as i64
}

fn check_unit(values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Schema(format!("accuracy {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Clean and robust accuracy against lambda, one curve each.
pub fn render_sweep(report: &SweepReport, out: &Path) -> Result<PlotSummary> {
    if report.points.is_empty() {
        return Err(Error::Schema("sweep report has no points".into()));
    }
    if report.points.iter().any(|p| !(p.lambda >= 0.0)) {
        return Err(Error::Schema("lambda values must be finite and >= 0".into()));
    }
    check_unit(report.points.iter().flat_map(|p| [p.clean, p.robust]))?;
    let mut pts = report.points.clone();
    pts.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let lo = pts[0].lambda;
    let span = pts[pts.len() - 1].lambda - lo;
    let x = |l: f64| xpix(if span > 0.0 { (l - lo) / span } else { 0.5 });
    let mut c = Canvas::new();
    c.axes();
    let series: [(fn(&SweepPoint) -> f64, [u8; 3]); 2] = [(|p| p.clean, COLORS[0]), (|p| p.robust, COLORS[1])];
    let mut markers = 0;
    for (get, color) in series {
        for w in pts.windows(2) {
            c.line((x(w[0].lambda), ypix(get(&w[0]))), (x(w[1].lambda), ypix(get(&w[1]))), color);
        }
        for p in &pts {
            let (px, py) = (x(p.lambda), ypix(get(p)));
            c.rect(px - 3, py - 3, px + 3, py + 3, color);
            markers += 1;
        }
    }
    c.img.save_png(out)?;
    let curves = if pts.len() >= 2 { 2 } else { 0 };
    Ok(PlotSummary { kind: PlotKind::Lambda, curves, markers, bars: 0 })
}

/// One bar for clean accuracy and one per threat, in name order.
pub fn render_robustness(table: &RobustnessTable, out: &Path) -> Result<PlotSummary> {
    if table.num_samples == 0 {
        return Err(Error::Schema("robustness report covers no samples".into()));
    }
    check_unit(std::iter::once(table.clean).chain(table.attacks.values().copied()))?;
    let values: Vec<f64> = std::iter::once(table.clean).chain(table.attacks.values().copied()).collect();
    let mut c = Canvas::new();
    c.axes();
    let n = values.len();
    let slot = (W - 2 * MARGIN - 16) as f64 / n as f64;
    for (i, v) in values.iter().enumerate() {
        let x0 = MARGIN as i64 + 8 + (i as f64 * slot + slot * 0.15).round() as i64;
        let x1 = MARGIN as i64 + 8 + ((i + 1) as f64 * slot - slot * 0.15).round() as i64;
        c.rect(x0, ypix(*v), x1, (H - MARGIN - 1) as i64, COLORS[i % COLORS.len()]);
    }
    c.img.save_png(out)?;
    Ok(PlotSummary { kind: PlotKind::Robustness, curves: 0, markers: 0, bars: n })
}

/// Renders whichever report kind `json` holds (or `kind` if given).
pub fn render_report(json: &str, kind: Option<PlotKind>, out: &Path) -> Result<PlotSummary> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| Error::Schema(format!("report is not JSON: {e}")))?;
    let kind = match kind {
        Some(k) => k,
        None if value.get("points").is_some() => PlotKind::Lambda,
        None if value.get("attacks").is_some() => PlotKind::Robustness,
        None => return Err(Error::Schema("report is neither a sweep nor a robustness table".into())),
    };
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    match kind {
        PlotKind::Lambda => {
            if version != Some(SWEEP_SCHEMA_VERSION as u64) {
                return Err(Error::Schema(format!("sweep schema_version {version:?}, expected {SWEEP_SCHEMA_VERSION}")));
            }
            let r: SweepReport = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
            render_sweep(&r, out)
        }
        PlotKind::Robustness => {
            let want = crate::advtrain::REPORT_SCHEMA_VERSION as u64;
            if version != Some(want) {
                return Err(Error::Schema(format!("robustness schema_version {version:?}, expected {want}")));
            }
            let r: RobustnessTable = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
            render_robustness(&r, out)
        }
    }
}
