use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bdlp_core::estimators::{DensityEstimate, PairCorrelationEstimate};
use bdlp_core::simulator::Trajectory;

/// Output directory that remembers which files were written.
pub struct OutputDir {
    root: PathBuf,
    pub files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write_with<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
    {
        let path = self.root.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        body(&mut out)
            .and_then(|_| out.flush())
            .with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

pub fn write_density_csv<W: Write>(mut out: W, est: &DensityEstimate) -> io::Result<()> {
    writeln!(
        out,
        "# t [time], mean_density [1/volume], stderr [1/volume], replicates [count]"
    )?;
    writeln!(out, "t,mean_density,stderr,replicates")?;
    for (k, t) in est.times.iter().enumerate() {
        writeln!(out, "{},{},{},{}", t, est.mean[k], est.stderr[k], est.replicates)?;
    }
    Ok(())
}

pub fn write_paircorr_csv<W: Write>(mut out: W, rows: &[(f64, PairCorrelationEstimate)]) -> io::Result<()> {
    writeln!(
        out,
        "# t [time], r_lo/r_hi [length], q_mean/q_stderr [1/volume^2], replicates [count]"
    )?;
    writeln!(out, "t,r_lo,r_hi,q_mean,q_stderr,replicates")?;
    for (t, est) in rows {
        for b in 0..est.q_mean.len() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t,
                est.edges[b],
                est.edges[b + 1],
                est.q_mean[b],
                est.q_stderr[b],
                est.replicates
            )?;
        }
    }
    Ok(())
}

pub fn write_positions_csv<W: Write>(mut out: W, trajectories: &[Trajectory], dim: usize) -> io::Result<()> {
    let coords: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    writeln!(out, "# t [time], coordinates [length]")?;
    writeln!(out, "replicate,t,particle_id,{}", coords.join(","))?;
    for (r, traj) in trajectories.iter().enumerate() {
        for (t, snap) in traj.record_times.iter().zip(&traj.snapshots) {
            let Some(pos) = snap.positions() else { continue };
            for (i, x) in pos.chunks(dim).enumerate() {
                let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{r},{t},{i},{}", xs.join(","))?;
            }
        }
    }
    Ok(())
}

pub struct CompareRow {
    pub t: f64,
    pub quantity: &'static str,
    pub r: Option<(f64, f64)>,
    pub simulated: f64,
    pub stderr: f64,
    pub moments: f64,
}

impl CompareRow {
    /// Standardized difference using the simulation stderr only.
    pub fn z(&self) -> f64 {
        (self.simulated - self.moments) / self.stderr
    }
}

pub fn write_compare_csv<W: Write>(mut out: W, rows: &[CompareRow]) -> io::Result<()> {
    writeln!(
        out,
        "# t [time], r_lo/r_hi [length], density rows in 1/volume, q rows in 1/volume^2, z [dimensionless]"
    )?;
    writeln!(out, "t,quantity,r_lo,r_hi,simulated,stderr,moments,z")?;
    for row in rows {
        let (lo, hi) = row.r.map(|(a, b)| (a.to_string(), b.to_string())).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.t,
            row.quantity,
            lo,
            hi,
            row.simulated,
            row.stderr,
            row.moments,
            row.z()
        )?;
    }
    Ok(())
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal SVG line chart.
pub fn write_line_svg<W: Write>(
    mut out: W,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> io::Result<()> {
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )?;
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    )?;
    writeln!(
        out,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin
    )?;
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 15.0,
        escape(x_label)
    )?;
    writeln!(
        out,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    )?;
    for (v, anchor, x, y) in [
        (x0, "middle", sx(x0), h - margin + 16.0),
        (x1, "middle", sx(x1), h - margin + 16.0),
        (y0, "end", margin - 6.0, sy(y0) + 4.0),
        (y1, "end", margin - 6.0, sy(y1) + 4.0),
    ] {
        writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v:.3}</text>"#
        )?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )?;
        let ly = margin + 16.0 * i as f64;
        writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            w - margin,
            escape(&s.label)
        )?;
    }
    writeln!(out, "</svg>")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
