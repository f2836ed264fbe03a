//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use stdai_core::alignment::TransformFamily;
use stdai_core::pipeline::Toggles;

use crate::commands::{self, Session};
use crate::config::{Overrides, RunConfig};
use crate::error::{Result, StageExt, StdaiError};

#[derive(Debug, Parser)]
#[command(name = "stdai", version, about = "2.5D spatial transcriptomics imputation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom bundle at --bundle.
    Synth(Common),
    /// Resample the adjacent sections of a bundle on a new grid.
    Sample(Common),
    /// Register the central section and store transforms in the manifest.
    Align {
        #[command(flatten)]
        common: Common,
        /// Central and adjacent section indices; all adjacent sections when omitted.
        #[arg(long, num_args = 2, value_names = ["CENTRAL", "ADJACENT"])]
        pair: Option<Vec<usize>>,
    },
    /// Train the pseudo-label network for every adjacent section.
    Pretrain(Common),
    /// Refine the pretrained networks.
    Refine(Common),
    /// Predict the dense volume from stored checkpoints.
    Infer(Common),
    /// Score the inferred volume against the ground truth.
    Eval(Common),
    /// Every stage end to end; synthesizes a phantom without --bundle.
    Run(Common),
    /// The seven ablation configurations.
    Ablate(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// JSON run configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory (for `sample`, a new bundle instead of rewriting in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma list of csa,fmdr,pdl,csg,dco, or all / none.
    #[arg(long, value_parser = parse_toggles)]
    pub toggle: Option<Toggles>,
    #[arg(long)]
    pub spacing: Option<usize>,
    /// Grid offset as ROW,COL.
    #[arg(long, value_parser = parse_offset)]
    pub offset: Option<[usize; 2]>,
    #[arg(long, value_parser = parse_family)]
    pub family: Option<TransformFamily>,
    /// Use pseudo labels as adjacent targets at measured pixels too.
    #[arg(long)]
    pub literal_eq5: bool,
}

fn parse_toggles(s: &str) -> std::result::Result<Toggles, String> {
    s.parse().map_err(|e: stdai_core::Error| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<TransformFamily, String> {
    s.parse().map_err(|e: stdai_core::Error| e.to_string())
}

fn parse_offset(s: &str) -> std::result::Result<[usize; 2], String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected ROW,COL, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok([p(r)?, p(c)?])
}

impl Common {
    pub fn config(&self) -> Result<RunConfig> {
        let o = Overrides {
            seed: self.seed,
            toggles: self.toggle,
            spacing: self.spacing,
            offset: self.offset,
            family: self.family,
            literal_eq5: self.literal_eq5,
        };
        RunConfig::load(self.config.as_deref(), &o)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn bundle(&self) -> Result<&Path> {
        self.bundle.as_deref().ok_or_else(|| StdaiError::Config(String::from("--bundle is required")))
    }

    fn session(&self) -> Result<Session> {
        let cfg = self.config()?;
        Session::open(self.bundle()?, cfg, &self.out()).stage("load")
    }
}

/// Runs one command and returns the lines to print.
pub fn execute(command: Command) -> Result<Vec<String>> {
    let show = |p: PathBuf| vec![p.display().to_string()];
    match command {
        Command::Synth(c) => {
            let cfg = c.config()?;
            Ok(show(commands::synth(&cfg, c.bundle()?).stage("synth")?))
        }
        Command::Sample(c) => {
            let cfg = c.config()?;
            Ok(show(commands::resample(c.bundle()?, cfg.spacing, cfg.offset, c.out.as_deref()).stage("sample")?))
        }
        Command::Align { common, pair } => {
            let cfg = common.config()?;
            let pair = pair.map(|p| (p[0], p[1]));
            let records = commands::align_bundle(common.bundle()?, &cfg, pair).stage("align")?;
            Ok(records.iter().map(|r| format!("section {}: {:?} ({:?})", r.index, r.matrix, r.family)).collect())
        }
        Command::Pretrain(c) => {
            let s = c.session()?;
            let mut r = s.reconstructor().stage("pretrain")?;
            Ok(show(commands::pretrain_stage(&s, &mut r).stage("pretrain")?))
        }
        Command::Refine(c) => {
            let s = c.session()?;
            if !s.cfg.toggles.fmdr {
                return Err(StdaiError::Config(String::from("refinement is switched off (add fmdr to --toggle)")));
            }
            let rec = (|| {
                let mut r = s.reconstructor()?;
                commands::load_pretrained(&s, &mut r)?;
                Ok::<_, StdaiError>(r.run(s.cfg.toggles)?)
            })()
            .stage("refine")?;
            Ok(show(commands::refine_stage(&s, &rec).stage("refine")?))
        }
        Command::Infer(c) => {
            let s = c.session()?;
            let rec = (|| {
                let mut r = s.reconstructor()?;
                commands::load_pretrained(&s, &mut r)?;
                if s.cfg.toggles.fmdr {
                    commands::load_refined(&s, &mut r)?;
                }
                Ok::<_, StdaiError>(r.run(s.cfg.toggles)?)
            })()
            .stage("infer")?;
            Ok(show(commands::infer_stage(&s, &rec).stage("infer")?))
        }
        Command::Eval(c) => {
            let s = c.session()?;
            let volume = commands::load_volume(&s).stage("eval")?;
            Ok(show(commands::eval_stage(&s, &volume).stage("eval")?))
        }
        Command::Run(c) => {
            let cfg = c.config()?;
            let bundle = match &c.bundle {
                Some(b) => b.clone(),
                None => {
                    let dest = c.out().join(format!("phantom-{}-s{}", &cfg.hash()[..12], cfg.phantom.seed));
                    if !dest.join(crate::bundle::MANIFEST).exists() {
                        commands::synth(&cfg, &dest).stage("synth")?;
                    }
                    dest
                }
            };
            let s = Session::open(&bundle, cfg, &c.out()).stage("load")?;
            let out = commands::run(&s)?;
            Ok(show(out.metrics.unwrap_or(out.root)))
        }
        Command::Ablate(c) => {
            let threads = commands::worker_threads()?;
            let s = c.session()?;
            let (dir, table) = commands::ablate(&s, threads).stage("ablate")?;
            let mut lines = show(dir.join("ablation.csv"));
            lines.extend(table.iter().map(|(t, m)| format!("{:<22} psnr {:.3} ssim {:.4} mae {:.4} pcc {:.4}", t.label(), m.psnr, m.ssim, m.mae, m.pcc)));
            Ok(lines)
        }
    }
}
