//! CSV tables (canonical output) and hand-written SVG figures.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AvoidResult, AvoidTrial, BendProfile, StitchResult};
use crate::error::{Error, Result};
use crate::world::{collision_points, Env, Obstacle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchRow {
    pub label: String,
    /// `sample` or `summary`.
    pub row: String,
    pub sample: Option<usize>,
    pub error: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub max_jump: Option<f64>,
    pub endpoint_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvoidRow {
    pub label: String,
    /// `trial` or `summary`.
    pub row: String,
    pub radius: f64,
    pub trial: Option<usize>,
    pub success: Option<bool>,
    pub min_sdf: Option<f64>,
    pub goal_error: Option<f64>,
    pub rate: Option<f64>,
    pub scale: f64,
    pub use_split: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BendRow {
    pub label: String,
    pub step: u64,
    pub translate: f64,
    pub bend: f64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        k => Error::Config(format!("csv: {k:?}")),
    }
}

/// Serialises rows with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn stitch_rows(results: &[StitchResult]) -> Vec<StitchRow> {
    let mut rows = Vec::new();
    for r in results {
        for (i, e) in r.errors.iter().enumerate() {
            rows.push(StitchRow {
                label: r.label.clone(),
                row: "sample".into(),
                sample: Some(i),
                error: Some(*e),
                mean: None,
                std: None,
                max_jump: None,
                endpoint_error: None,
            });
        }
        rows.push(StitchRow {
            label: r.label.clone(),
            row: "summary".into(),
            sample: None,
            error: None,
            mean: Some(r.mean),
            std: Some(r.std),
            max_jump: Some(r.max_jump),
            endpoint_error: Some(r.endpoint_error),
        });
    }
    rows
}

pub fn avoid_rows(result: &AvoidResult, trials: &[AvoidTrial]) -> Vec<AvoidRow> {
    let mut rows: Vec<AvoidRow> = trials
        .iter()
        .map(|t| AvoidRow {
            label: result.label.clone(),
            row: "trial".into(),
            radius: t.radius,
            trial: Some(t.trial),
            success: Some(t.success),
            min_sdf: t.min_sdf.is_finite().then_some(t.min_sdf),
            goal_error: Some(t.goal_error),
            rate: None,
            scale: result.scale,
            use_split: result.use_split,
        })
        .collect();
    for (r, rate) in result.radii.iter().zip(&result.success_rates) {
        rows.push(AvoidRow {
            label: result.label.clone(),
            row: "summary".into(),
            radius: *r,
            trial: None,
            success: None,
            min_sdf: None,
            goal_error: None,
            rate: Some(*rate),
            scale: result.scale,
            use_split: result.use_split,
        });
    }
    rows
}

pub fn bend_rows(label: &str, profile: &[BendProfile]) -> Vec<BendRow> {
    profile
        .iter()
        .map(|p| BendRow {
            label: label.to_string(),
            step: p.step,
            translate: p.translate,
            bend: p.bend,
        })
        .collect()
}

/// `t,s0,s1,…` rows for a `[T, D]` trajectory.
pub fn trajectory_csv(traj: &[f64], d: usize) -> String {
    let mut s = String::from("t");
    for j in 0..d {
        let _ = write!(s, ",s{j}");
    }
    s.push('\n');
    for (k, row) in traj.chunks_exact(d).enumerate() {
        let _ = write!(s, "{k}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let d = r.headers().map_err(csv_err)?.len().saturating_sub(1);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        for f in rec.iter().skip(1) {
            out.push(f.parse::<f64>().map_err(|_| {
                Error::Config(format!("{}: `{f}` is not a number", path.display()))
            })?);
        }
    }
    if d == 0 || out.is_empty() {
        return Err(Error::Config(format!(
            "{}: no trajectory rows",
            path.display()
        )));
    }
    Ok((out, d))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Affine map from data coordinates onto a square-ish canvas.
struct Canvas {
    w: f64,
    h: f64,
    pad: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    body: String,
}

impl Canvas {
    fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        let span = |i: usize| if hi[i] > lo[i] { hi[i] - lo[i] } else { 1.0 };
        let lo = [lo[0] - 0.05 * span(0), lo[1] - 0.05 * span(1)];
        let hi = [hi[0] + 0.05 * span(0), hi[1] + 0.05 * span(1)];
        Self {
            w: 480.0,
            h: 480.0,
            pad: 40.0,
            lo,
            hi,
            body: String::new(),
        }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        let sx = (self.w - 2.0 * self.pad) / (self.hi[0] - self.lo[0]).max(1e-12);
        let sy = (self.h - 2.0 * self.pad) / (self.hi[1] - self.lo[1]).max(1e-12);
        (
            self.pad + (p[0] - self.lo[0]) * sx,
            self.h - self.pad - (p[1] - self.lo[1]) * sy,
        )
    }

    fn polyline(&mut self, pts: &[[f64; 2]], color: &str) {
        let mut s = String::new();
        for p in pts {
            let (x, y) = self.px(*p);
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5" stroke-opacity="0.8"/>"#,
            s.trim_end()
        );
    }

    fn circle(&mut self, c: [f64; 2], r_data: f64, fill: &str) {
        let (x, y) = self.px(c);
        let (x2, _) = self.px([c[0] + r_data, c[1]]);
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}" fill="{fill}" fill-opacity="0.35" stroke="black"/>"#,
            (x2 - x).abs()
        );
    }

    fn marker(&mut self, c: [f64; 2], label: &str) {
        let (x, y) = self.px(c);
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="black"/>"#
        );
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">{label}</text>"#,
            x + 7.0,
            y - 7.0
        );
    }

    fn text(&mut self, x: f64, y: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="12">{s}</text>"#
        );
    }

    fn finish(self, title: &str) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{tx}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n{body}</svg>\n",
            w = self.w,
            h = self.h,
            tx = self.w / 2.0,
            body = self.body
        )
    }
}

fn workspace_path(env: &Env, traj: &[f64]) -> Vec<[f64; 2]> {
    traj.chunks_exact(env.state_dim())
        .map(|x| collision_points(env, x).last().expect("collision point").0)
        .collect()
}

/// Workspace overlay of trajectories (end-effector path for the arm) with
/// obstacles and the first trajectory's endpoints.
pub fn trajectories_svg(
    env: &Env,
    trajs: &[&[f64]],
    obstacles: &[Obstacle],
    title: &str,
) -> String {
    let paths: Vec<Vec<[f64; 2]>> = trajs.iter().map(|t| workspace_path(env, t)).collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut grow = |p: [f64; 2]| {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    };
    paths.iter().flatten().for_each(|p| grow(*p));
    for o in obstacles {
        grow([o.center[0] - o.radius, o.center[1] - o.radius]);
        grow([o.center[0] + o.radius, o.center[1] + o.radius]);
    }
    if !lo[0].is_finite() {
        lo = [-1.0; 2];
        hi = [1.0; 2];
    }
    let mut c = Canvas::new(lo, hi);
    for o in obstacles {
        c.circle(o.center, o.radius, "#888888");
    }
    for (i, p) in paths.iter().enumerate() {
        c.polyline(p, PALETTE[i % PALETTE.len()]);
    }
    if let Some(p) = paths.first().filter(|p| !p.is_empty()) {
        c.marker(p[0], "start");
        c.marker(p[p.len() - 1], "goal");
    }
    c.finish(title)
}

/// Success rate against obstacle radius, one curve per label.
pub fn success_svg(results: &[(String, Vec<(f64, f64)>)]) -> String {
    let rmax = results
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.0))
        .fold(0.0, f64::max)
        .max(1e-9);
    let mut c = Canvas::new([0.0, 0.0], [rmax, 1.0]);
    for (i, (label, curve)) in results.iter().enumerate() {
        let pts: Vec<[f64; 2]> = curve.iter().map(|(r, s)| [*r, *s]).collect();
        let color = PALETTE[i % PALETTE.len()];
        c.polyline(&pts, color);
        c.text(60.0, 50.0 + 16.0 * i as f64, &format!("{label} ({color})"));
    }
    c.text(200.0, 470.0, "obstacle radius");
    c.text(5.0, 240.0, "success");
    c.finish("Collision-free success rate")
}

/// Bar chart of mean stitching error per label.
pub fn stitch_svg(summary: &[(String, f64, f64)]) -> String {
    let top = summary
        .iter()
        .map(|(_, m, s)| m + s)
        .fold(0.0, f64::max)
        .max(1e-9);
    let n = summary.len().max(1) as f64;
    let mut c = Canvas::new([0.0, 0.0], [n, top]);
    for (i, (label, mean, std)) in summary.iter().enumerate() {
        let (x0, y0) = c.px([i as f64 + 0.15, 0.0]);
        let (x1, y1) = c.px([i as f64 + 0.85, *mean]);
        let _ = writeln!(
            c.body,
            r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            x1 - x0,
            y0 - y1,
            PALETTE[i % PALETTE.len()]
        );
        let (xm, ya) = c.px([i as f64 + 0.5, mean + std]);
        let (_, yb) = c.px([i as f64 + 0.5, (mean - std).max(0.0)]);
        let _ = writeln!(
            c.body,
            r#"<line x1="{xm:.2}" y1="{ya:.2}" x2="{xm:.2}" y2="{yb:.2}" stroke="black"/>"#
        );
        c.text(x0, y0 + 14.0, label);
    }
    c.finish("Stitching error (mean ± std)")
}

/// Bend and translate metrics over training steps.
pub fn bend_svg(rows: &[BendRow]) -> String {
    let smax = rows
        .iter()
        .map(|r| r.step as f64)
        .fold(0.0, f64::max)
        .max(1.0);
    let vlo = rows
        .iter()
        .flat_map(|r| [r.bend, r.translate])
        .fold(0.0, f64::min);
    let vhi = rows
        .iter()
        .flat_map(|r| [r.bend, r.translate])
        .fold(0.0, f64::max)
        .max(1e-9);
    let mut c = Canvas::new([0.0, vlo], [smax, vhi]);
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.dedup();
    for (i, label) in labels.iter().enumerate() {
        let sel: Vec<&BendRow> = rows.iter().filter(|r| r.label == *label).collect();
        let bend: Vec<[f64; 2]> = sel.iter().map(|r| [r.step as f64, r.bend]).collect();
        let tr: Vec<[f64; 2]> = sel.iter().map(|r| [r.step as f64, r.translate]).collect();
        let color = PALETTE[i % PALETTE.len()];
        c.polyline(&bend, color);
        c.polyline(&tr, "#999999");
        c.text(
            60.0,
            50.0 + 16.0 * i as f64,
            &format!("{label} bend ({color}); translate grey"),
        );
    }
    c.finish("Guided-plan bend over training")
}
