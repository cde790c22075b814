use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use latentedit::config::RunConfig;
use latentedit::io::{self, GrayScale};
use latentedit::metrics::{mse_masked, psnr_masked};
use latentedit::{
    invert_trajectory, mse, psnr, ssim, CountingDenoiser, EditMode, EditReport, FusionConfig,
    LatentGrid, Scenario, StepRecord,
};
use serde::Serialize;

use crate::{ExportArgs, MetricsArgs, RunArgs};

/// Fidelity of an edited latent against the scenario's source latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    /// PSNR outside the edit region; `inf` when identical there.
    pub background_psnr: f64,
    pub background_mse: f64,
    /// Whole-latent SSIM; absent when the latent is smaller than the window.
    pub ssim: Option<f64>,
    /// RMS distance to the nearest target attractor inside the edit region.
    pub edit_distance: Option<f64>,
}

pub fn evaluate(scenario: &Scenario, edited: &LatentGrid) -> latentedit::Result<Evaluation> {
    let range = scenario.dynamic_range();
    let bg = scenario.background_mask();
    let src = &scenario.z0_source;
    let s = src.shape();
    let ssim = if s.height >= latentedit::metrics::SSIM_WINDOW
        && s.width >= latentedit::metrics::SSIM_WINDOW
    {
        Some(ssim(edited, src, range)?)
    } else {
        None
    };
    Ok(Evaluation {
        background_psnr: psnr_masked(edited, src, range, &bg)?,
        background_mse: mse_masked(edited, src, &bg)?,
        ssim,
        edit_distance: match scenario.edit_mask {
            Some(_) => Some(scenario.edit_distance_to_target(edited)?),
            None => None,
        },
    })
}

/// Loads a config and resolves the output directory against it.
pub fn load(config: &Path, out: Option<&Path>) -> anyhow::Result<(RunConfig, PathBuf, PathBuf)> {
    let (cfg, base) = RunConfig::load(config)?;
    let out_dir = match out {
        Some(o) => o.to_path_buf(),
        None => base.join(&cfg.output.directory),
    };
    Ok((cfg, base, out_dir))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn invert(args: &RunArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let (cfg, base, out_dir) = load(&args.config, args.out.as_deref())?;
    let fusion = cfg.fusion_config()?;
    let scenario = cfg.build_scenario(&base)?;
    let schedule = fusion.schedule()?;
    let model = CountingDenoiser::new(&scenario.model);
    let traj = invert_trajectory(
        &scenario.z0_source,
        &model,
        &scenario.source_cond,
        &schedule,
    )?;
    let dir = out_dir.join("trajectory");
    create_dir(&dir)?;
    for (i, z) in traj.entries().iter().enumerate() {
        io::write_latent(dir.join(format!("step_{i:03}.lted")), z)?;
    }
    writeln!(
        stdout,
        "wrote {} latents to {} nfe={}",
        traj.len(),
        dir.display(),
        model.count()
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Nfe {
    inversion: usize,
    denoise: usize,
    total: usize,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a FusionConfig,
    nfe: Nfe,
    metrics: Evaluation,
    trace: &'a [StepRecord],
}

/// Runs the configured editor in `mode` and returns the report with its evaluation.
pub fn run_edit(
    cfg: &RunConfig,
    base: &Path,
    mode: EditMode,
) -> anyhow::Result<(FusionConfig, Scenario, EditReport, Evaluation)> {
    let mut fusion = cfg.fusion_config()?;
    fusion.mode = mode;
    let scenario = cfg.build_scenario(base)?;
    let report = latentedit::edit(
        &scenario.z0_source,
        &scenario.model,
        &scenario.source_cond,
        &scenario.target_cond,
        &fusion,
    )?;
    let eval = evaluate(&scenario, &report.edited)?;
    Ok((fusion, scenario, report, eval))
}

pub fn edit(args: &RunArgs, mode: EditMode, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let (cfg, base, out_dir) = load(&args.config, args.out.as_deref())?;
    let (fusion, scenario, report, eval) = run_edit(&cfg, &base, mode)?;
    tracing::info!(mode = mode.as_str(), steps = fusion.steps, "edit finished");

    create_dir(&out_dir)?;
    io::write_latent(out_dir.join("source.lted"), &scenario.z0_source)?;
    io::write_latent(out_dir.join("edited.lted"), &report.edited)?;
    let file = ReportFile {
        config: &fusion,
        nfe: Nfe {
            inversion: report.nfe_inversion,
            denoise: report.nfe_denoise,
            total: report.nfe_total(),
        },
        metrics: eval,
        trace: &report.steps,
    };
    let mut json = serde_json::to_vec_pretty(&file)?;
    json.push(b'\n');
    io::write_atomic(&out_dir.join("report.json"), &json)?;

    if cfg.output.export_maps {
        let dir = out_dir.join("maps");
        create_dir(&dir)?;
        for (rec, map) in report.steps.iter().zip(&report.maps) {
            let name = format!("step_{:03}", rec.index);
            let (h, w) = map.dims();
            let grid =
                LatentGrid::from_vec(latentedit::Shape::new(1, h, w)?, map.values().to_vec())?;
            io::write_latent(dir.join(format!("{name}.lted")), &grid)?;
            io::export_map_pgm(map, dir.join(format!("{name}.pgm")), GrayScale::Unit)?;
        }
    }
    if cfg.output.export_pgm {
        io::export_latent_pgm(
            &report.edited,
            0,
            out_dir.join("edited.pgm"),
            GrayScale::MinMax,
        )?;
        io::export_latent_pgm(
            &scenario.z0_source,
            0,
            out_dir.join("source.pgm"),
            GrayScale::MinMax,
        )?;
    }

    writeln!(
        stdout,
        "mode={} sampler={} steps={} nfe={} background_psnr={} out={}",
        mode.as_str(),
        fusion.sampler.as_str(),
        fusion.steps,
        report.nfe_total(),
        eval.background_psnr,
        out_dir.display()
    )?;
    Ok(())
}

fn read_input(path: &Path, images: bool) -> anyhow::Result<LatentGrid> {
    let grid = if images {
        io::read_pgm(path)?
    } else {
        io::read_latent(path)?
    };
    Ok(grid)
}

pub fn metrics(args: &MetricsArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let a = read_input(&args.a, args.images)?;
    let b = read_input(&args.b, args.images)?;
    a.ensure_same_shape(&b)?;
    let range = match args.range {
        Some(r) => r,
        None if args.images => 255.0,
        None => {
            let v = a.as_slice();
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };
    let ssim = match ssim(&a, &b, range) {
        Ok(v) => v,
        Err(latentedit::Error::WindowTooLarge { .. }) => {
            tracing::warn!("inputs are smaller than the SSIM window; reporting nan");
            f64::NAN
        }
        Err(e) => return Err(e.into()),
    };
    writeln!(
        stdout,
        "mse={} psnr={} ssim={}",
        mse(&a, &b)?,
        psnr(&a, &b, range)?,
        ssim
    )?;
    Ok(())
}

pub fn export(args: &ExportArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let grid = io::read_latent(&args.input)?;
    io::export_latent_pgm(&grid, args.channel, &args.output, args.range.into())?;
    writeln!(stdout, "wrote {}", args.output.display())?;
    Ok(())
}
