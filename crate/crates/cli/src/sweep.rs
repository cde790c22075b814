//! Parameter sweeps. Grid points run in parallel; rows come out in the
//! lexicographic order of the (sorted) axes regardless of scheduling.

use std::io::Write;
use std::path::Path;

use latentedit::config::{RunConfig, ScenarioSection};
use latentedit::EditMode;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{load, run_edit};
use crate::SweepArgs;

/// One CSV row: configuration columns, then metrics, then call counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: &'static str,
    pub sampler: &'static str,
    pub steps: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub block_size: usize,
    pub seed: u64,
    pub alpha_mix: f64,
    pub alpha_init: f64,
    pub background_psnr: f64,
    pub background_mse: f64,
    pub ssim: Option<f64>,
    pub edit_distance: Option<f64>,
    pub nfe_inversion: usize,
    pub nfe_denoise: usize,
    pub nfe_total: usize,
}

/// Sweep axes. Empty axes fall back to the config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub modes: Vec<EditMode>,
    pub steps: Vec<usize>,
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub block_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
struct Point {
    mode: EditMode,
    steps: usize,
    gamma: f64,
    lambda: f64,
    block_size: usize,
    seed: u64,
}

fn axis<T: Copy>(values: &[T], fallback: T, cmp: impl Fn(&T, &T) -> std::cmp::Ordering) -> Vec<T> {
    let mut v = if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    };
    v.sort_by(&cmp);
    v.dedup_by(|a, b| cmp(a, b).is_eq());
    v
}

fn mode_key(m: &EditMode) -> u8 {
    match m {
        EditMode::Inversion => 0,
        EditMode::InversionFree => 1,
    }
}

impl SweepGrid {
    fn points(&self, cfg: &RunConfig) -> Vec<Point> {
        let steps_default = cfg
            .sampler
            .steps
            .unwrap_or(cfg.sampler.kind.default_steps());
        let modes = axis(&self.modes, cfg.fusion.mode, |a, b| {
            mode_key(a).cmp(&mode_key(b))
        });
        let steps = axis(&self.steps, steps_default, Ord::cmp);
        let gammas = axis(&self.gammas, cfg.fusion.gamma, f64::total_cmp);
        let lambdas = axis(&self.lambdas, cfg.fusion.lambda, f64::total_cmp);
        let blocks = axis(&self.block_sizes, cfg.fusion.block_size, Ord::cmp);
        let seeds = axis(&self.seeds, cfg.sampler.seed, Ord::cmp);
        let mut out = Vec::new();
        for &mode in &modes {
            for &steps in &steps {
                for &gamma in &gammas {
                    for &lambda in &lambdas {
                        for &block_size in &blocks {
                            for &seed in &seeds {
                                out.push(Point {
                                    mode,
                                    steps,
                                    gamma,
                                    lambda,
                                    block_size,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn run_point(cfg: &RunConfig, base: &Path, p: Point) -> anyhow::Result<SweepRow> {
    let mut cfg = cfg.clone();
    cfg.fusion.mode = p.mode;
    cfg.sampler.steps = Some(p.steps);
    cfg.fusion.gamma = p.gamma;
    cfg.fusion.lambda = p.lambda;
    cfg.fusion.block_size = p.block_size;
    cfg.sampler.seed = p.seed;
    if let ScenarioSection::Generated(g) = &mut cfg.scenario {
        g.seed = p.seed;
    }
    let (fusion, _, report, eval) = run_edit(&cfg, base, p.mode)?;
    Ok(SweepRow {
        mode: p.mode.as_str(),
        sampler: fusion.sampler.as_str(),
        steps: fusion.steps,
        gamma: fusion.sharpen.gamma,
        lambda: fusion.sharpen.lambda,
        block_size: fusion.block_size,
        seed: p.seed,
        alpha_mix: fusion.alpha_mix,
        alpha_init: fusion.alpha_init,
        background_psnr: eval.background_psnr,
        background_mse: eval.background_mse,
        ssim: eval.ssim,
        edit_distance: eval.edit_distance,
        nfe_inversion: report.nfe_inversion,
        nfe_denoise: report.nfe_denoise,
        nfe_total: report.nfe_total(),
    })
}

/// Runs every grid point and returns the rows in grid order.
pub fn sweep(cfg: &RunConfig, base: &Path, grid: &SweepGrid) -> anyhow::Result<Vec<SweepRow>> {
    grid.points(cfg)
        .into_par_iter()
        .map(|p| run_point(cfg, base, p))
        .collect()
}

pub fn to_csv(rows: &[SweepRow]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn run(args: &SweepArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let (cfg, base, _) = load(&args.config, None)?;
    let grid = SweepGrid {
        modes: args.modes.iter().map(|&m| m.into()).collect(),
        steps: args.steps.clone(),
        gammas: args.gammas.clone(),
        lambdas: args.lambdas.clone(),
        block_sizes: args.block_sizes.clone(),
        seeds: args.seeds.clone(),
    };
    let rows = if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()?
            .install(|| sweep(&cfg, &base, &grid))?
    } else {
        sweep(&cfg, &base, &grid)?
    };
    let bytes = to_csv(&rows)?;
    match &args.out {
        Some(path) => {
            latentedit::io::write_atomic(path, &bytes)?;
            tracing::info!(rows = rows.len(), path = %path.display(), "sweep written");
        }
        None => stdout.write_all(&bytes)?,
    }
    Ok(())
}
