//! CSV tables and PGM images written by the stages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use stdai_core::filter::Plane;
use stdai_core::metrics::{Density, MetricsReport, Scores};
use stdai_core::pipeline::{LogRecord, Phase, Toggles};

use crate::error::{Result, StdaiError};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(StdaiError::io(path))
}

/// Binary PGM of `values * scale`, rounded and clamped to `[0, 255]`.
pub fn pgm_bytes(plane: &Plane, scale: f32) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend(plane.data.iter().map(|&v| {
        let s = (v * scale).round();
        if s.is_nan() {
            0
        } else {
            s.clamp(0.0, 255.0) as u8
        }
    }));
    out
}

pub fn write_pgm(path: &Path, plane: &Plane, scale: f32) -> Result<()> {
    fs::write(path, pgm_bytes(plane, scale)).map_err(StdaiError::io(path))
}

pub fn log_csv(records: &[LogRecord]) -> String {
    let mut s = String::from("phase,section,epoch,L_central,L_adj,total,lr\n");
    for r in records {
        let phase = match r.phase {
            Phase::Pretrain => "pretrain",
            Phase::Refine => "refine",
        };
        writeln!(s, "{phase},{},{},{},{},{},{}", r.section, r.epoch, r.l_central, r.l_adj, r.total, r.lr).unwrap();
    }
    s
}

/// One row per section and gene, plus a `mean` row per section.
pub fn metrics_csv(genes: &[String], reports: &[(usize, MetricsReport)]) -> String {
    let mut s = String::from("section,gene,population,psnr_db,ssim,mae,pcc\n");
    let mut row = |section: usize, gene: &str, pop: &str, m: &Scores| {
        writeln!(s, "{section},{gene},{pop},{},{},{},{}", m.psnr, m.ssim, m.mae, m.pcc).unwrap();
    };
    for (section, r) in reports {
        let pop = r.population.as_str();
        for (g, m) in r.per_gene.iter().enumerate() {
            row(*section, &genes[g], pop, m);
        }
        row(*section, "mean", pop, &r.mean);
    }
    s
}

/// Scores averaged over sections, each section already averaged over genes.
pub fn section_mean(reports: &[(usize, MetricsReport)]) -> Scores {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&Scores) -> f64| reports.iter().map(|(_, r)| f(&r.mean)).sum::<f64>() / n;
    Scores { psnr: sum(|s| s.psnr), ssim: sum(|s| s.ssim), mae: sum(|s| s.mae), pcc: sum(|s| s.pcc) }
}

pub fn ablation_csv(rows: &[(Toggles, Scores)]) -> String {
    let mut s = String::from("csa,fmdr,pdl,csg,dco,psnr_db,ssim,mae,pcc\n");
    for (t, m) in rows {
        let b = |v: bool| u8::from(v);
        writeln!(s, "{},{},{},{},{},{},{},{},{}", b(t.csa), b(t.fmdr), b(t.pdl), b(t.csg), b(t.dco), m.psnr, m.ssim, m.mae, m.pcc)
            .unwrap();
    }
    s
}

pub struct DensityRow<'a> {
    pub section: usize,
    pub gene: &'a str,
    pub density: Density,
}

pub fn density_csv(rows: &[DensityRow<'_>]) -> String {
    let mut s = String::from("section,gene,bin_center,density,histogram\n");
    for r in rows {
        let d = &r.density;
        for ((c, k), h) in d.bin_centers.iter().zip(&d.smoothed).zip(&d.histogram) {
            writeln!(s, "{},{},{c},{k},{h}", r.section, r.gene).unwrap();
        }
    }
    s
}
