//! Run reports, sweep-unit speedups, CSV tables and SVG plots.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adjoint::SweepCounter;
use crate::error::{Error, Result};
use crate::linalg::rel_l2;
use crate::newton::NewtonResult;
use crate::store::StoreStats;

/// Cost of each kind of work in sweep units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepWeights {
    pub forward: f64,
    pub adjoint: f64,
    pub assembly: f64,
    /// Per consolidated vector.
    pub compress: f64,
    pub decompress: f64,
}

impl Default for SweepWeights {
    fn default() -> Self {
        Self { forward: 1.0, adjoint: 1.0, assembly: 1.0, compress: 0.0, decompress: 0.0 }
    }
}

/// Total work of `c` in sweep units. Incremental sweeps cost the same as
/// their ordinary counterparts and recomputation costs forward sweeps.
pub fn sweep_units(c: &SweepCounter, w: &SweepWeights) -> f64 {
    w.forward * ((c.forward_sweeps + c.incfwd_sweeps) as f64 + c.recompute_sweeps)
        + w.adjoint * (c.adjoint_sweeps + c.incadj_sweeps) as f64
        + w.assembly * c.assemblies as f64
        + w.compress * c.compress_calls as f64
        + w.decompress * c.decompress_calls as f64
}

/// `units(baseline) / units(variant)`.
pub fn modeled_speedup(baseline: &SweepCounter, variant: &SweepCounter, w: &SweepWeights) -> Result<f64> {
    let den = sweep_units(variant, w);
    if den == 0.0 {
        return Err(Error::Solver("speedup undefined: variant did no work".into()));
    }
    Ok(sweep_units(baseline, w) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub backend: String,
    pub dofs: usize,
    /// Everything the run spent.
    pub total: SweepCounter,
    /// Summed over gradient evaluations.
    pub grad_counter: SweepCounter,
    pub n_grad: usize,
    /// Summed over Hessian actions.
    pub hvp_counter: SweepCounter,
    pub n_hvp: usize,
    pub ratio_paper: f64,
    pub ratio_true: f64,
    /// Against the reference run, in percent.
    pub rel_l2_err_pct: Option<f64>,
    pub speedup_grad: Option<f64>,
    pub speedup_hvp: Option<f64>,
    pub wall_s: f64,
}

impl RunReport {
    pub fn from_result(run_id: &str, backend: &str, dofs: usize, result: &NewtonResult, stats: StoreStats, wall_s: f64) -> Self {
        let mut grad_counter = SweepCounter::default();
        let mut hvp_counter = SweepCounter::default();
        let mut n_hvp = 0;
        for rec in &result.history {
            grad_counter += rec.grad_counter;
            hvp_counter += rec.hvp_counter;
            n_hvp += rec.n_hvp;
        }
        Self {
            run_id: run_id.into(),
            backend: backend.into(),
            dofs,
            total: result.total,
            grad_counter,
            n_grad: result.history.len(),
            hvp_counter,
            n_hvp,
            ratio_paper: stats.compression_ratio_paper,
            ratio_true: stats.compression_ratio_true,
            rel_l2_err_pct: None,
            speedup_grad: None,
            speedup_hvp: None,
            wall_s,
        }
    }

    /// Mean sweep units per gradient and per Hessian action.
    pub fn unit_costs(&self, w: &SweepWeights) -> (Option<f64>, Option<f64>) {
        let per = |c: &SweepCounter, n: usize| (n > 0).then(|| sweep_units(c, w) / n as f64);
        (per(&self.grad_counter, self.n_grad), per(&self.hvp_counter, self.n_hvp))
    }
}

/// Fills errors and speedups against `reports[reference]`; `fields[i]` is run `i`'s solution.
pub fn compare(reports: &mut [RunReport], fields: &[Vec<f64>], reference: usize, w: &SweepWeights) -> Result<()> {
    if reports.len() != fields.len() || reference >= reports.len() {
        return Err(Error::Config("one solution per report and a valid reference run are required".into()));
    }
    let (ref_grad, ref_hvp) = reports[reference].unit_costs(w);
    for (rep, u) in reports.iter_mut().zip(fields) {
        if u.len() != fields[reference].len() {
            return Err(Error::Shape { expected: fields[reference].len(), got: u.len() });
        }
        rep.rel_l2_err_pct = Some(100.0 * rel_l2(u, &fields[reference]));
        let (g, h) = rep.unit_costs(w);
        rep.speedup_grad = ref_grad.zip(g).filter(|(_, g)| *g > 0.0).map(|(r, g)| r / g);
        rep.speedup_hvp = ref_hvp.zip(h).filter(|(_, h)| *h > 0.0).map(|(r, h)| r / h);
    }
    Ok(())
}

pub const CSV_HEADER: &str = "run_id,backend,dofs,fwd,adj,incfwd,incadj,recompute,compress,decompress,ratio_paper,ratio_true,rel_l2_err_pct,speedup_grad,speedup_hvp,wall_s";

pub fn write_csv(mut w: impl Write, reports: &[RunReport]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        let c = &r.total;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            r.run_id,
            r.backend,
            r.dofs,
            c.forward_sweeps,
            c.adjoint_sweeps,
            c.incfwd_sweeps,
            c.incadj_sweeps,
            c.recompute_sweeps,
            c.compress_calls,
            c.decompress_calls,
            r.ratio_paper,
            r.ratio_true,
            opt(r.rel_l2_err_pct),
            opt(r.speedup_grad),
            opt(r.speedup_hvp),
            r.wall_s
        )?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line plot of several series against their index; `log_y` plots log₁₀ of positive values.
pub fn line_plot_svg(title: &str, series: &[(String, Vec<f64>)], log_y: bool) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let tf = |v: f64| if log_y { v.max(f64::MIN_POSITIVE).log10() } else { v };
    let pts: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().map(|&v| tf(v))).filter(|v| v.is_finite()).collect();
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let nmax = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(svg, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * m, h - 2.0 * m);
    let label = |v: f64| if log_y { format!("1e{v:.1}") } else { format!("{v:.3e}") };
    let _ = writeln!(svg, r#"<text x="4" y="{}">{}</text>"#, m + 4.0, label(hi));
    let _ = writeln!(svg, r#"<text x="4" y="{}">{}</text>"#, h - m, label(lo));
    for (k, (name, s)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| tf(**v).is_finite())
            .map(|(i, &v)| {
                let x = m + (w - 2.0 * m) * i as f64 / (nmax - 1) as f64;
                let y = h - m - (h - 2.0 * m) * (tf(v) - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, w - m + 4.0 - 120.0, m + 16.0 * (k + 1) as f64, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Heat map of a field on an `n0 × n1` grid (index `i1·n0 + i0`, `i1` drawn upward).
pub fn heatmap_svg(title: &str, shape: [usize; 2], field: &[f64]) -> Result<String> {
    let [n0, n1] = shape;
    if n0 * n1 != field.len() {
        return Err(Error::Shape { expected: n0 * n1, got: field.len() });
    }
    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (400.0 / n0.max(n1) as f64).max(1.0);
    let (w, h) = (cell * n0 as f64 + 20.0, cell * n1 as f64 + 50.0);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<text x="10" y="16">{} [{lo:.4}, {hi:.4}]</text>"#, escape(title));
    for i1 in 0..n1 {
        for i0 in 0..n0 {
            let t = (field[i1 * n0 + i0] - lo) / span;
            let (r, g, b) = colormap(t);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({r},{g},{b})"/>"#,
                10.0 + cell * i0 as f64,
                30.0 + cell * (n1 - 1 - i1) as f64
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn colormap(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, s: f64| (a + (b - a) * s).round() as u8;
    if t < 0.5 {
        let s = 2.0 * t;
        (lerp(59.0, 221.0, s), lerp(76.0, 221.0, s), lerp(192.0, 221.0, s))
    } else {
        let s = 2.0 * t - 1.0;
        (lerp(221.0, 180.0, s), lerp(221.0, 4.0, s), lerp(221.0, 38.0, s))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_counter(checkpoint: bool) -> SweepCounter {
        SweepCounter {
            forward_sweeps: 1,
            adjoint_sweeps: 1,
            assemblies: 1,
            recompute_sweeps: if checkpoint { 1.0 } else { 0.0 },
            ..Default::default()
        }
    }

    fn hvp_counter(checkpoint: bool) -> SweepCounter {
        SweepCounter {
            incfwd_sweeps: 1,
            incadj_sweeps: 1,
            adjoint_sweeps: 1,
            assemblies: 1,
            recompute_sweeps: if checkpoint { 2.0 } else { 0.0 },
            ..Default::default()
        }
    }

    #[test]
    fn ideal_speedups() {
        let w = SweepWeights::default();
        assert_eq!(modeled_speedup(&grad_counter(true), &grad_counter(false), &w).unwrap(), 4.0 / 3.0);
        assert_eq!(modeled_speedup(&hvp_counter(true), &hvp_counter(false), &w).unwrap(), 1.5);
        assert_eq!(modeled_speedup(&hvp_counter(true), &hvp_counter(true), &w).unwrap(), 1.0);
        assert!(modeled_speedup(&hvp_counter(true), &SweepCounter::default(), &w).is_err());
    }

    #[test]
    fn csv_has_schema_columns() {
        let rep = RunReport {
            run_id: "a".into(),
            backend: "full".into(),
            dofs: 10,
            total: grad_counter(false),
            grad_counter: grad_counter(false),
            n_grad: 1,
            hvp_counter: SweepCounter::default(),
            n_hvp: 0,
            ratio_paper: 1.0,
            ratio_true: 1.0,
            rel_l2_err_pct: Some(0.0),
            speedup_grad: None,
            speedup_hvp: None,
            wall_s: 0.5,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[rep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].split(',').count(), 16);
        assert_eq!(lines[1].split(',').count(), 16);
    }

    #[test]
    fn plots_are_svg() {
        let s = line_plot_svg("conv <1>", &[("g".into(), vec![1.0, 0.1, 0.01])], true);
        assert!(s.starts_with("<svg") && s.contains("polyline") && s.contains("&lt;1&gt;"));
        let hm = heatmap_svg("u", [2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(hm.matches("<rect").count(), 4);
        assert!(heatmap_svg("u", [2, 2], &[0.0]).is_err());
    }
}
