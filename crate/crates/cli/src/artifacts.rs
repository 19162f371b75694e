use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

/// Output directory bookkeeping: records every file written so the manifest
/// can list them.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating {}", root.display()))
            .map_err(Failure::io)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> Result<PathBuf, Failure> {
        let p = self.root.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Failure::io(e.into()))?;
        }
        self.written.push(name.to_string());
        Ok(p)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.path(name)?;
        fs::write(&p, bytes)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::io)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), Failure> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| Failure::io(e.into()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn files(&self) -> &[String] {
        &self.written
    }
}

pub struct Manifest {
    pub command: &'static str,
    pub args: Vec<String>,
    pub config: Value,
    pub inputs: Value,
    pub seed: u64,
    pub jobs: usize,
    pub started: Instant,
}

impl Manifest {
    /// Writes `manifest.json`. Everything except `wall_clock_seconds` is a
    /// function of the inputs.
    pub fn finish(self, out: &mut OutDir) -> Result<(), Failure> {
        let mut outputs: Vec<String> = out.files().to_vec();
        outputs.sort();
        let v = serde_json::json!({
            "command": self.command,
            "args": self.args,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "seed": self.seed,
            "jobs": self.jobs,
            "tool": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        out.write_json("manifest.json", &v)
    }
}

/// Self-contained line plot. Axes are logarithmic when every value on them
/// is positive.
pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (80.0, 20.0, 40.0, 60.0);
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let xlog = !pts.is_empty() && pts.iter().all(|p| p.0 > 0.0);
    let ylog = !pts.is_empty() && pts.iter().all(|p| p.1 > 0.0);
    let tx = |v: f64| if xlog { v.log10() } else { v };
    let ty = |v: f64| if ylog { v.log10() } else { v };
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(pts.iter().map(|p| tx(p.0)).collect());
    let (y0, y1) = range(pts.iter().map(|p| ty(p.1)).collect());
    let px = |v: f64| left + (tx(v) - x0) / (x1 - x0) * (w - left - right);
    let py = |v: f64| h - bottom - (ty(v) - y0) / (y1 - y0) * (h - top - bottom);
    let label = |v: f64, log: bool| {
        if log {
            format!("{:.2e}", 10f64.powf(v))
        } else {
            format!("{v:.4}")
        }
    };

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    s += &format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    s += &format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        w - left - right,
        h - top - bottom
    );
    for j in 0..=4 {
        let f = j as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let gx = left + f * (w - left - right);
        let gy = h - bottom - f * (h - top - bottom);
        s += &format!(
            "<line x1=\"{gx:.1}\" y1=\"{top}\" x2=\"{gx:.1}\" y2=\"{}\" stroke=\"#ddd\"/>\n",
            h - bottom
        );
        s += &format!(
            "<line x1=\"{left}\" y1=\"{gy:.1}\" x2=\"{}\" y2=\"{gy:.1}\" stroke=\"#ddd\"/>\n",
            w - right
        );
        s += &format!(
            "<text x=\"{gx:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            h - bottom + 18.0,
            label(xv, xlog)
        );
        s += &format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            left - 6.0,
            gy + 4.0,
            label(yv, ylog)
        );
    }
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (left + w - right) / 2.0,
        h - 16.0,
        escape(xlabel)
    );
    s += &format!(
        "<text x=\"18\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0})\">{1}</text>\n",
        (top + h - bottom) / 2.0,
        escape(ylabel)
    );
    if !pts.is_empty() {
        let line: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
            .collect();
        s += &format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\"/>\n",
            line.join(" ")
        );
        for p in &pts {
            s += &format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f5fa8\"/>\n",
                px(p.0),
                py(p.1)
            );
        }
    }
    s += "</svg>\n";
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_self_contained() {
        let s = line_plot_svg(
            "d vs mu",
            "mu",
            "h1 distance",
            &[(1.0, 1.6), (0.5, 0.9), (0.25, 0.4)],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(!s.contains("href"));
        assert_eq!(s.matches("<circle").count(), 3);
        let empty = line_plot_svg("x", "a", "b", &[]);
        assert!(!empty.contains("polyline"));
    }
}
