//! The pipeline stages as library calls. Each subcommand of the binary is a
//! thin wrapper around one function here.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::Serialize;
use stdai_core::alignment::TransformFamily;
use stdai_core::metrics::{error_map, evaluate, expression_density, MetricsReport, Scores};
use stdai_core::phantom::synth_phantom;
use stdai_core::pipeline::{Phase, Reconstruction, Reconstructor, Refined, Toggles};
use stdai_core::sample::{normalize_expression, normalize_map, Mask, Role, Sample};
use stdai_core::sampling::make_grid_mask;
use stdai_core::Tensor;

use crate::artifacts::{finished, run_root, StageDir};
use crate::bundle::{read_bundle, read_truth, section_dir, store_transform, write_bundle, write_f32, MANIFEST};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Result, StageExt, StdaiError};
use crate::features::load_feature_dir;
use crate::report::{ablation_csv, density_csv, log_csv, metrics_csv, section_mean, write_pgm, write_text, DensityRow};

/// A bundle opened for processing under one configuration.
pub struct Session {
    pub cfg: RunConfig,
    /// Normalized expression.
    pub sample: Sample,
    /// Normalized dense truth in stack order, when the bundle has sidecars.
    pub truth: Option<Vec<Tensor>>,
    pub features: BTreeMap<usize, Tensor>,
    /// `<out>/<id>-<hash>-s<seed>`.
    pub root: PathBuf,
}

impl Session {
    pub fn open(bundle: &Path, cfg: RunConfig, out: &Path) -> Result<Self> {
        let raw = read_bundle(bundle)?;
        let truth_raw = read_truth(bundle)?;
        let sample = if raw.stats.is_some() { raw } else { normalize_expression(&raw)? };
        let stats = sample.stats.clone().expect("normalized");
        let truth = match truth_raw {
            Some(t) => Some(t.iter().map(|m| normalize_map(m, &stats)).collect::<stdai_core::Result<Vec<_>>>()?),
            None => None,
        };
        let features = match &cfg.features {
            Some(dir) => load_feature_dir(Path::new(dir), &sample)?,
            None => BTreeMap::new(),
        };
        let root = run_root(out, &sample.id, &cfg.hash(), cfg.train.seed);
        fs::create_dir_all(&root).map_err(StdaiError::io(&root))?;
        let cfg_path = root.join("config.json");
        if !cfg_path.exists() {
            let json = serde_json::to_string_pretty(&cfg).map_err(|source| StdaiError::Json { path: cfg_path.clone(), source })?;
            write_text(&cfg_path, &(json + "\n"))?;
        }
        Ok(Self { cfg, sample, truth, features, root })
    }

    pub fn reconstructor(&self) -> Result<Reconstructor<'_>> {
        let r = Reconstructor::new(&self.sample, self.cfg.reconstruct())?;
        Ok(r.with_features(self.features.clone())?)
    }

    fn adjacent(&self) -> Vec<(usize, usize)> {
        self.sample.adjacent_positions().map(|p| (p, self.sample.sections[p].index)).collect()
    }

    fn require_truth(&self) -> Result<&[Tensor]> {
        self.truth.as_deref().ok_or_else(|| StdaiError::Config(String::from("bundle has no ground-truth sidecars to evaluate against")))
    }
}

/// Writes a phantom bundle with ground-truth sidecars and returns its path.
pub fn synth(cfg: &RunConfig, dest: &Path) -> Result<PathBuf> {
    let mut pc = cfg.phantom.clone();
    pc.spacing = cfg.spacing;
    if cfg.offset != [0, 0] {
        return Err(StdaiError::Config(String::from("phantoms are sampled at offset 0,0; resample with `stdai sample`")));
    }
    let ph = synth_phantom(&pc)?;
    write_bundle(&ph.sample, dest, Some(&ph.truth), None)?;
    let transforms: Vec<[f64; 6]> = ph.transforms.iter().map(|t| t.matrix).collect();
    let path = dest.join("truth_transforms.json");
    write_text(&path, &(serde_json::to_string(&transforms).expect("numbers serialize") + "\n"))?;
    Ok(dest.to_path_buf())
}

/// Resamples every adjacent section on a new grid.
///
/// Newly sampled pixels take their values from the ground-truth sidecar.
/// Without `dest` the bundle is rewritten in place.
pub fn resample(bundle: &Path, spacing: usize, offset: [usize; 2], dest: Option<&Path>) -> Result<PathBuf> {
    let mut sample = read_bundle(bundle)?;
    let truth = read_truth(bundle)?;
    let truth = match (&truth, &sample.stats) {
        (Some(t), Some(st)) => Some(t.iter().map(|m| normalize_map(m, st)).collect::<stdai_core::Result<Vec<_>>>()?),
        _ => truth,
    };
    let grid = make_grid_mask(sample.height(), sample.width(), spacing, (offset[0], offset[1]))?;
    let plane = sample.height() * sample.width();
    for (pos, s) in sample.sections.iter_mut().enumerate() {
        if s.role == Role::Central {
            continue;
        }
        let mut expr = Tensor::zeros(s.expression.shape());
        for i in (0..plane).filter(|&i| grid.mask().is_set(i)) {
            let src = if s.mask.is_set(i) {
                &s.expression
            } else {
                &truth.as_ref().ok_or_else(|| {
                    StdaiError::Config(format!("section {} pixel {i} was never measured and the bundle has no truth sidecar", s.index))
                })?[pos]
            };
            for g in 0..s.expression.shape()[0] {
                expr.data_mut()[g * plane + i] = src.data()[g * plane + i];
            }
        }
        s.expression = expr;
        s.mask = grid.mask().clone();
    }
    match dest {
        Some(d) => {
            let raw_truth = read_truth(bundle)?;
            write_bundle(&sample, d, raw_truth.as_deref(), None)?;
            Ok(d.to_path_buf())
        }
        None => {
            for s in sample.sections.iter().filter(|s| s.role == Role::Adjacent) {
                let dir = section_dir(bundle, s.index);
                write_f32(&dir.join("expression.f32"), s.expression.data())?;
                let mask = dir.join("mask.u8");
                fs::write(&mask, s.mask.data()).map_err(StdaiError::io(&mask))?;
            }
            Ok(bundle.to_path_buf())
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AlignRecord {
    pub index: usize,
    pub matrix: [f64; 6],
    pub family: TransformFamily,
    /// `registered`, `manifest` or `identity`.
    pub source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inlier_ratio: Option<f64>,
}

fn align_records(s: &Session, r: &mut Reconstructor<'_>, csa: bool) -> Result<Vec<AlignRecord>> {
    let mut out = Vec::new();
    for (pos, index) in s.adjacent() {
        let (t, reg) = r.transform_for(pos, csa)?;
        let source = match (&reg, csa) {
            (Some(_), _) => "registered",
            (None, true) => "manifest",
            (None, false) => "identity",
        };
        out.push(AlignRecord {
            index,
            matrix: t.matrix,
            family: t.family,
            source,
            matches: reg.as_ref().map(|g| g.matches),
            inlier_ratio: reg.as_ref().map(|g| g.ransac.inlier_ratio),
        });
    }
    Ok(out)
}

/// Registers the central section to adjacent sections and records the
/// transforms in the bundle manifest.
pub fn align_bundle(bundle: &Path, cfg: &RunConfig, pair: Option<(usize, usize)>) -> Result<Vec<AlignRecord>> {
    let sample = read_bundle(bundle)?;
    let sample = if sample.stats.is_some() { sample } else { normalize_expression(&sample)? };
    let mut sample = sample;
    // Registration uses histology only; stored transforms must not short-circuit it.
    for s in &mut sample.sections {
        s.transform = None;
    }
    let targets: Vec<usize> = match pair {
        Some((c, a)) => {
            if sample.central().index != c {
                return Err(StdaiError::Config(format!("section {c} is not the central section")));
            }
            match sample.position_of(a) {
                Some(p) if sample.sections[p].role == Role::Adjacent => vec![p],
                _ => return Err(StdaiError::Config(format!("section {a} is not an adjacent section"))),
            }
        }
        None => sample.adjacent_positions().collect(),
    };
    let mut r = Reconstructor::new(&sample, cfg.reconstruct())?;
    let mut out = Vec::new();
    for pos in targets {
        let index = sample.sections[pos].index;
        let reg = r.registration(pos)?.clone();
        store_transform(bundle, index, &reg.transform)?;
        out.push(AlignRecord {
            index,
            matrix: reg.transform.matrix,
            family: reg.transform.family,
            source: "registered",
            matches: Some(reg.matches),
            inlier_ratio: Some(reg.ransac.inlier_ratio),
        });
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|source| StdaiError::Json { path: path.to_path_buf(), source })?;
    write_text(path, &(json + "\n"))
}

pub fn align_stage(s: &Session, r: &mut Reconstructor<'_>) -> Result<PathBuf> {
    let dir = StageDir::create(&s.root, "align")?;
    let records = align_records(s, r, s.cfg.toggles.csa)?;
    write_json(&dir.path("transforms.json"), &records)?;
    dir.finish()
}

fn theta0_file(index: usize) -> String {
    format!("theta0_s{index}.ckpt")
}

pub fn pretrain_stage(s: &Session, r: &mut Reconstructor<'_>) -> Result<PathBuf> {
    let dir = StageDir::create(&s.root, "pretrain")?;
    let mut log = Vec::new();
    for (pos, index) in s.adjacent() {
        let (t, _) = r.transform_for(pos, s.cfg.toggles.csa)?;
        let (theta0, records) = r.theta0(pos, &t)?;
        save_checkpoint(&dir.path(&theta0_file(index)), &theta0)?;
        log.extend(records);
    }
    write_text(&dir.path("log.csv"), &log_csv(&log))?;
    dir.finish()
}

/// Installs the pseudo-label networks of a finished pretrain stage.
pub fn load_pretrained(s: &Session, r: &mut Reconstructor<'_>) -> Result<()> {
    let dir = finished(&s.root, "pretrain")?;
    for (pos, index) in s.adjacent() {
        let (t, _) = r.transform_for(pos, s.cfg.toggles.csa)?;
        r.set_theta0(pos, &t, load_checkpoint(&dir.join(theta0_file(index)))?)?;
    }
    Ok(())
}

/// Installs the refined branches of a finished refine stage.
pub fn load_refined(s: &Session, r: &mut Reconstructor<'_>) -> Result<()> {
    let dir = finished(&s.root, "refine")?;
    for (pos, index) in s.adjacent() {
        let (t, _) = r.transform_for(pos, s.cfg.toggles.csa)?;
        let refined = Refined {
            theta1: load_checkpoint(&dir.join(format!("theta1_s{index}.ckpt")))?,
            theta2: load_checkpoint(&dir.join(format!("theta2_s{index}.ckpt")))?,
        };
        r.set_refined(pos, &t, s.cfg.toggles, refined)?;
    }
    Ok(())
}

pub fn refine_stage(s: &Session, rec: &Reconstruction) -> Result<PathBuf> {
    let dir = StageDir::create(&s.root, "refine")?;
    for pair in &rec.pairs {
        let refined = pair.refined.as_ref().ok_or_else(|| StdaiError::Config(String::from("refinement is switched off")))?;
        save_checkpoint(&dir.path(&format!("theta1_s{}.ckpt", pair.index)), &refined.theta1)?;
        save_checkpoint(&dir.path(&format!("theta2_s{}.ckpt", pair.index)), &refined.theta2)?;
        if let Some(c) = &pair.confidence {
            write_pgm(&dir.path(&format!("wtilde_s{}.pgm", pair.index)), &c.w_tilde, 128.0)?;
        }
    }
    let log: Vec<_> = rec.log.iter().filter(|l| l.phase == Phase::Refine).copied().collect();
    write_text(&dir.path("log.csv"), &log_csv(&log))?;
    dir.finish()
}

/// The reconstructed volume as a bundle: dense maps, full masks, provenance
/// in the manifest and the normalization stats of the input.
pub fn infer_stage(s: &Session, rec: &Reconstruction) -> Result<PathBuf> {
    let dir = StageDir::create(&s.root, "infer")?;
    let mut volume = s.sample.clone();
    for (pos, sec) in volume.sections.iter_mut().enumerate() {
        sec.expression = rec.volume.slice(pos);
        sec.mask = Mask::full(sec.height(), sec.width());
    }
    write_bundle(&volume, &dir.path("volume"), None, Some(&rec.volume.provenance))?;
    dir.finish()
}

/// Dense prediction per section in stack order, read back from a finished infer stage.
pub fn load_volume(s: &Session) -> Result<Vec<Tensor>> {
    let dir = finished(&s.root, "infer")?.join("volume");
    let v = read_bundle(&dir)?;
    if v.sections.len() != s.sample.sections.len() || v.genes != s.sample.genes {
        return Err(StdaiError::format(&dir.join(MANIFEST), "volume does not match the input bundle"));
    }
    Ok(v.sections.into_iter().map(|x| x.expression).collect())
}

/// Metrics of every adjacent section against the normalized truth.
pub fn score(s: &Session, volume: &[Tensor]) -> Result<Vec<(usize, MetricsReport)>> {
    let truth = s.require_truth()?;
    s.adjacent()
        .into_iter()
        .map(|(pos, index)| Ok((index, evaluate(&volume[pos], &truth[pos], &s.sample.sections[pos].mask, s.cfg.population)?)))
        .collect()
}

pub fn eval_stage(s: &Session, volume: &[Tensor]) -> Result<PathBuf> {
    let reports = score(s, volume)?;
    let truth = s.require_truth()?;
    let dir = StageDir::create(&s.root, "eval")?;
    write_text(&dir.path("metrics.csv"), &metrics_csv(&s.sample.genes, &reports))?;
    let (h, w) = (s.sample.height(), s.sample.width());
    let mut densities = Vec::new();
    for (pos, sec) in s.sample.sections.iter().enumerate() {
        for (g, gene) in s.sample.genes.iter().enumerate() {
            if sec.role == Role::Adjacent {
                let err = error_map(volume[pos].channel(g), truth[pos].channel(g), h, w);
                write_pgm(&dir.path(&format!("error_s{}_{gene}.pgm", sec.index)), &err, 255.0)?;
            }
            let observed: Vec<f32> =
                sec.expression.channel(g).iter().enumerate().filter(|(i, _)| sec.mask.is_set(*i)).map(|(_, &v)| v).collect();
            densities.push(DensityRow { section: sec.index, gene, density: expression_density(&observed, s.cfg.density_bins)? });
        }
    }
    write_text(&dir.path("density.csv"), &density_csv(&densities))?;
    dir.finish()
}

/// Paths of the finished stages of one end-to-end run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub root: PathBuf,
    pub metrics: Option<PathBuf>,
}

/// Every stage in order on one bundle. Evaluation is skipped when the bundle
/// carries no ground truth.
pub fn run(s: &Session) -> Result<RunOutput> {
    let mut r = s.reconstructor().stage("load")?;
    if s.cfg.toggles.csa {
        align_stage(s, &mut r).stage("align")?;
    }
    pretrain_stage(s, &mut r).stage("pretrain")?;
    let rec = r.run(s.cfg.toggles).stage("refine")?;
    if s.cfg.toggles.fmdr {
        refine_stage(s, &rec).stage("refine")?;
    }
    infer_stage(s, &rec).stage("infer")?;
    let metrics = if s.truth.is_some() {
        let volume: Vec<Tensor> = (0..s.sample.sections.len()).map(|p| rec.volume.slice(p)).collect();
        Some(eval_stage(s, &volume).stage("eval")?.join("metrics.csv"))
    } else {
        log::warn!("bundle has no ground truth; skipping evaluation");
        None
    };
    Ok(RunOutput { root: s.root.clone(), metrics })
}

/// Reads `STDAI_THREADS`, defaulting to one worker.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("STDAI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(StdaiError::Config(format!("STDAI_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn volume_of(rec: &Reconstruction, n: usize) -> Vec<Tensor> {
    (0..n).map(|p| rec.volume.slice(p)).collect()
}

/// The seven ablation configurations. With more than one worker the rows
/// are split across threads, each with its own reconstructor; a single
/// worker shares pretrained networks between rows.
pub fn ablate(s: &Session, threads: usize) -> Result<(PathBuf, Vec<(Toggles, Scores)>)> {
    s.require_truth()?;
    let n = s.sample.sections.len();
    let rows = Toggles::ABLATION;
    let run_rows = |ids: &[usize]| -> Result<Vec<(usize, Vec<(usize, MetricsReport)>)>> {
        let mut r = s.reconstructor()?;
        ids.iter().map(|&k| Ok((k, score(s, &volume_of(&r.run(rows[k])?, n))?))).collect()
    };
    let workers = threads.clamp(1, rows.len());
    let mut results: Vec<(usize, Vec<(usize, MetricsReport)>)> = if workers == 1 {
        run_rows(&(0..rows.len()).collect::<Vec<_>>())?
    } else {
        let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..rows.len()).step_by(workers).collect()).collect();
        thread::scope(|scope| {
            let handles: Vec<_> = chunks.iter().map(|c| scope.spawn(|| run_rows(c))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    results.sort_by_key(|(k, _)| *k);
    let dir = StageDir::create(&s.root, "ablate")?;
    let mut table = Vec::with_capacity(rows.len());
    for (k, reports) in &results {
        let sub = dir.path(&format!("row{k}"));
        fs::create_dir_all(&sub).map_err(StdaiError::io(&sub))?;
        write_text(&sub.join("metrics.csv"), &metrics_csv(&s.sample.genes, reports))?;
        table.push((rows[*k], section_mean(reports)));
    }
    write_text(&dir.path("ablation.csv"), &ablation_csv(&table))?;
    Ok((dir.finish()?, table))
}
