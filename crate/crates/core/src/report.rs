//! SVG panels, the context-size chart and summary tables rendered from
//! pipeline artifacts. Output depends only on the artifacts: colormaps and
//! number formatting are fixed, so regenerating is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::eval::{read_metrics, MetricsRow, Split};
use crate::pipeline::{load_dataset, load_prediction, read_timing, Stage, BO_MODEL, META_MODEL, PNS_MODEL};

pub const SUMMARY_FILE: &str = "summary.md";
pub const TABLE_FILE: &str = "table.csv";
pub const SWEEP_CHART: &str = "sweep_cc.svg";
/// Frames shown per panel row.
pub const PANEL_FRAMES: usize = 4;

const CELL: f64 = 120.0;
const LABEL_WIDTH: f64 = 150.0;
const HEADER: f64 = 24.0;

/// Eight-stop ramp for potentials in `[0, 1]`.
const POTENTIAL_RAMP: [[u8; 3]; 8] = [
    [13, 8, 135],
    [84, 2, 163],
    [139, 10, 165],
    [185, 50, 137],
    [219, 92, 104],
    [244, 136, 73],
    [254, 188, 43],
    [240, 249, 33],
];

fn lerp_ramp(ramp: &[[u8; 3]], t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (ramp.len() - 1) as f64;
    let i = (pos.floor() as usize).min(ramp.len() - 2);
    let f = pos - i as f64;
    let c: Vec<u8> = (0..3).map(|k| (ramp[i][k] as f64 + f * (ramp[i + 1][k] as f64 - ramp[i][k] as f64)).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScale {
    /// Potentials, `[0, 1]`.
    Potential,
    /// Absolute errors, white at 0 to red at 1.
    Difference,
}

impl ColorScale {
    pub fn color(self, v: f64) -> String {
        match self {
            ColorScale::Potential => lerp_ramp(&POTENTIAL_RAMP, v),
            ColorScale::Difference => lerp_ramp(&[[255, 255, 255], [178, 24, 43]], v),
        }
    }
}

pub struct PanelRow<'a> {
    pub label: String,
    pub values: &'a Mat,
    pub scale: ColorScale,
}

/// Evenly spaced interior frames of a `frames`-long sequence.
pub fn panel_frames(frames: usize) -> Vec<usize> {
    (1..=PANEL_FRAMES).map(|k| (k * frames / (PANEL_FRAMES + 1)).min(frames.saturating_sub(1))).collect()
}

pub fn abs_difference(pred: &Mat, truth: &Mat) -> Result<Mat> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    Ok((pred - truth).mapv(f64::abs))
}

/// One row per entry and one column per frame; nodes are drawn at their
/// `(x, y)` coordinates scaled into each cell.
pub fn panel_svg(title: &str, coords: &[[f64; 3]], rows: &[PanelRow], frames: &[usize]) -> Result<String> {
    for r in rows {
        if r.values.ncols() != coords.len() {
            return Err(Error::Shape(format!("row `{}` has {} nodes, mesh has {}", r.label, r.values.ncols(), coords.len())));
        }
        if let Some(&f) = frames.iter().find(|&&f| f >= r.values.nrows()) {
            return Err(Error::Shape(format!("frame {f} outside row `{}`", r.label)));
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in coords {
        for d in 0..2 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let pad = 8.0;
    let scale = (CELL - 2.0 * pad) / span;
    let radius = (0.45 * scale * span / (coords.len() as f64).sqrt()).clamp(1.0, 6.0);
    let width = LABEL_WIDTH + CELL * frames.len() as f64;
    let height = HEADER + CELL * rows.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    for (ci, f) in frames.iter().enumerate() {
        let x = LABEL_WIDTH + CELL * (ci as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="16" text-anchor="middle">frame {f}</text>"#);
    }
    for (ri, row) in rows.iter().enumerate() {
        let y0 = HEADER + CELL * ri as f64;
        let _ = writeln!(s, r#"<g class="row" data-label="{}">"#, escape(&row.label));
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">{}</text>"#, y0 + CELL / 2.0, escape(&row.label));
        for (ci, &f) in frames.iter().enumerate() {
            let x0 = LABEL_WIDTH + CELL * ci as f64;
            for (n, c) in coords.iter().enumerate() {
                let cx = x0 + pad + (c[0] - lo[0]) * scale;
                let cy = y0 + CELL - pad - (c[1] - lo[1]) * scale;
                let fill = row.scale.color(row.values[[f, n]]);
                let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{radius:.2}" fill="{fill}"/>"#);
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Target-split CC against context size with ±1 std bars, one series per model.
pub fn sweep_chart_svg(rows: &[MetricsRow]) -> String {
    let mut models: Vec<&str> = rows.iter().map(|r| r.model.as_str()).collect();
    models.sort();
    models.dedup();
    let pooled: Vec<&MetricsRow> = rows.iter().filter(|r| r.subject == "all" && r.split == Split::Target).collect();
    let nu_max = pooled.iter().map(|r| r.nu).max().unwrap_or(1).max(1) as f64;
    let (w, h, m) = (480.0, 320.0, 48.0);
    let px = |nu: usize| m + (w - 2.0 * m) * (nu as f64 - 1.0) / (nu_max - 1.0).max(1.0);
    let py = |cc: f64| h - m - (h - 2.0 * m) * (cc.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<line x1="{m}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{:.1}" stroke="black"/>"#, h - m);
    for tick in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.1}</text>"#, m - 4.0, py(tick) + 4.0);
    }
    for nu in 1..=nu_max as usize {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{nu}</text>"#, px(nu), h - m + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">context size</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">target CC</text>"#, h / 2.0, h / 2.0);
    for (k, model) in models.iter().enumerate() {
        let color = colors[k % colors.len()];
        let mut series: Vec<&&MetricsRow> = pooled.iter().filter(|r| r.model == *model).collect();
        series.sort_by_key(|r| r.nu);
        let points: Vec<String> = series.iter().map(|r| format!("{:.1},{:.1}", px(r.nu), py(r.cc_mean))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, points.join(" "));
        for r in &series {
            let (x, y) = (px(r.nu), py(r.cc_mean));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#,
                py(r.cc_mean - r.cc_std),
                py(r.cc_mean + r.cc_std)
            );
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#, w - m - 80.0, m + 14.0 * k as f64, escape(model));
    }
    s.push_str("</svg>\n");
    s
}

pub fn table_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("model,split,subject,nu,n,mse_mean,mse_std,cc_mean,cc_std,dc_mean,dc_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4}",
            r.model, r.split, r.subject, r.nu, r.n, r.mse_mean, r.mse_std, r.cc_mean, r.cc_std, r.dc_mean, r.dc_std
        );
    }
    s
}

fn summary_md(rows: &[MetricsRow], timing: Option<&crate::pipeline::Timing>) -> String {
    let mut s = String::from("# Results\n\nPooled over subjects, mean ± std.\n\n");
    s.push_str("| model | split | ν | n | MSE | CC | DC |\n|---|---|---|---|---|---|---|\n");
    for r in rows.iter().filter(|r| r.subject == "all") {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} ± {:.4} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
            r.model, r.split, r.nu, r.n, r.mse_mean, r.mse_std, r.cc_mean, r.cc_std, r.dc_mean, r.dc_std
        );
    }
    if let Some(t) = timing {
        let _ = write!(
            s,
            "\n## Cost per sequence\n\n| simulator (s) | surrogate rollout (s) | context embedding (s) | speedup |\n|---|---|---|---|\n| {:.4} | {:.4} | {:.4} | {:.1}× |\n",
            t.simulate_seconds, t.rollout_seconds, t.embed_seconds, t.speedup
        );
    }
    s
}

fn read_optional(dir: &Path) -> Result<Vec<MetricsRow>> {
    match read_metrics(dir) {
        Ok(rows) => Ok(rows),
        Err(Error::MissingArtifact { .. }) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Writes panels, the sweep chart and summary tables under `root/plots`.
pub fn render_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let (bank, hier) = load_dataset(root)?;
    let eval_rows = read_metrics(&Stage::Eval.dir(root))?;
    let sweep_rows = read_metrics(&Stage::Sweep.dir(root))?;
    let baseline_rows = read_optional(&Stage::Baselines.dir(root))?;
    let timing = read_timing(root).ok();
    let dir = Stage::Plots.dir(root);
    fs::create_dir_all(&dir)?;
    let mut out = Vec::new();

    let coords = &hier.finest().node_coords;
    for subject in &bank.subjects {
        let Some(truth) = load_prediction(root, &subject.key, "truth")? else {
            continue;
        };
        let mut preds = Vec::new();
        for model in [META_MODEL, PNS_MODEL, BO_MODEL] {
            if let Some(p) = load_prediction(root, &subject.key, model)? {
                let diff = abs_difference(&p, &truth)?;
                preds.push((model, p, diff));
            }
        }
        let mut rows = vec![PanelRow { label: "truth".into(), values: &truth, scale: ColorScale::Potential }];
        for (model, p, d) in &preds {
            rows.push(PanelRow { label: (*model).into(), values: p, scale: ColorScale::Potential });
            rows.push(PanelRow { label: format!("|{model} - truth|"), values: d, scale: ColorScale::Difference });
        }
        let svg = panel_svg(&subject.key, coords, &rows, &panel_frames(truth.nrows()))?;
        let path = dir.join(format!("panel_{}.svg", subject.key));
        fs::write(&path, svg)?;
        out.push(path);
    }

    let mut sweep_all = sweep_rows.clone();
    sweep_all.extend(baseline_rows.iter().filter(|r| r.split == Split::Target).cloned());
    let path = dir.join(SWEEP_CHART);
    fs::write(&path, sweep_chart_svg(&sweep_all))?;
    out.push(path);

    let mut all: Vec<MetricsRow> = eval_rows;
    all.extend(baseline_rows);
    let path = dir.join(TABLE_FILE);
    fs::write(&path, table_csv(&all))?;
    out.push(path);
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, summary_md(&all, timing.as_ref()))?;
    out.push(path);
    Ok(out)
}
