//! Command implementations behind the CLI surface.

use crate::config::{parse_condition, RunConfig};
use crate::svg;
use anyhow::{bail, Context, Result};
use ccfg_core::checkpoint;
use ccfg_core::data::{make_threenode, LabeledPoint, MixtureSpec};
use ccfg_core::metrics::{
    error_rate, mean_loglik, node_occupancy, sliced_wasserstein, RunReport, REPORT_CSV_HEADER,
};
use ccfg_core::model::{train_epsilon, Condition, EpsModel, TrainConfig};
use ccfg_core::rng::{mix_seed, GaussStream};
use ccfg_core::sampler::{chain_seed, ddim_step, sample, step_pairs, SampleRun, Variant};
use ccfg_core::{guidance, GuidanceSpec, Schedule};
use std::fs;
use std::path::{Path, PathBuf};

pub const DEFAULT_SCALES: &[f64] = &[1.0, 2.0, 4.0, 7.5];
pub const DEFAULT_METHODS: &[&str] = &["ncfg", "dng", "ccfg-neg"];
pub const EQUIV_TOLERANCE: f64 = 1e-9;
const REFERENCE_STREAM: u64 = 0x5eed;

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub dataset_csv: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn build_schedule(cfg: &RunConfig) -> Result<Schedule> {
    Ok(Schedule::linear(
        cfg.schedule.t,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?)
}

fn load_matching_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<(EpsModel, Schedule)> {
    let (model, schedule) = checkpoint::load(ckpt)?;
    let expected = build_schedule(cfg)?;
    if schedule != expected {
        bail!(
            "checkpoint {} was trained with a different schedule than the config",
            ckpt.display()
        );
    }
    Ok((model, schedule))
}

pub fn write_dataset_csv(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    let mut out = String::from("x,y,class,node\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.x[0], p.x[1], p.class, p.node));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<LabeledPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().context("empty dataset file")?;
    if header != "x,y,class,node" {
        bail!("unexpected dataset header '{header}'");
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.split(',');
            let mut next = || {
                parts
                    .next()
                    .with_context(|| format!("dataset line {}: missing field", i + 2))
            };
            Ok(LabeledPoint {
                x: vec![next()?.parse::<f64>()?, next()?.parse::<f64>()?],
                class: next()?.parse()?,
                node: next()?.parse()?,
            })
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let (_, dataset) = make_threenode(cfg.dataset.seed, cfg.dataset.n)?;
    let schedule = build_schedule(cfg)?;
    let train_cfg = TrainConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch,
        lr: cfg.training.lr,
        drop_prob: cfg.training.drop_prob,
        hidden: cfg.training.hidden.clone(),
        embed_dim: cfg.training.embed_dim,
        seed: cfg.training.seed,
    };
    let (model, report) = train_epsilon(&dataset, 2, &schedule, &train_cfg)?;

    let ckpt_path = dir.join("model.ckpt");
    checkpoint::save(&ckpt_path, &model, &schedule)?;

    let loss_path = dir.join("train_loss.csv");
    let mut loss_csv = String::from("epoch,loss\n");
    for (epoch, loss) in report.epoch_loss.iter().enumerate() {
        loss_csv.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(&loss_path, loss_csv)?;

    let dataset_path = dir.join("dataset.csv");
    write_dataset_csv(&dataset_path, &dataset)?;
    fs::write(dir.join("config.txt"), cfg.serialize())?;

    Ok(TrainArtifacts {
        checkpoint: ckpt_path,
        loss_log: loss_path,
        dataset_csv: dataset_path,
    })
}

fn sample_run(cfg: &RunConfig, spec: GuidanceSpec) -> Result<SampleRun> {
    let sm = &cfg.sampling;
    Ok(SampleRun {
        seed: sm.seed,
        nfe: sm.nfe,
        record_trajectory: false,
        spec,
        cond: parse_condition(&sm.cond)?,
        cond2: sm.cond2.as_deref().map(parse_condition).transpose()?,
        variant: match sm.variant.as_str() {
            "posterior-mean" => Variant::PosteriorMean,
            _ => Variant::NoiseSpace,
        },
    })
}

pub fn cmd_sample(
    cfg: &RunConfig,
    ckpt: &Path,
    with_svg: bool,
    with_trajectories: bool,
) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let (model, schedule) = load_matching_checkpoint(cfg, ckpt)?;
    let spec = cfg.guidance_spec(&cfg.sampling.method, cfg.sampling.scale)?;
    let mut run = sample_run(cfg, spec)?;
    run.record_trajectory = with_trajectories;
    let set = sample(&model, &schedule, &run, cfg.sampling.n)?;

    let path = dir.join("samples.csv");
    let mut csv = String::from("x,y,chain,seed\n");
    for (chain, p) in set.points.iter().enumerate() {
        csv.push_str(&format!("{},{},{chain},{}\n", p[0], p[1], run.seed));
    }
    fs::write(&path, csv)?;

    if let Some(trajectories) = &set.trajectories {
        let traj_dir = dir.join("traj");
        ensure_dir(&traj_dir)?;
        for (chain, states) in trajectories.iter().enumerate() {
            let mut csv = String::from("step,x,y\n");
            for (step, x) in states.iter().enumerate() {
                csv.push_str(&format!("{step},{},{}\n", x[0], x[1]));
            }
            fs::write(traj_dir.join(format!("chain_{chain}.csv")), csv)?;
        }
    }

    if with_svg {
        let (mix, _) = make_threenode(cfg.dataset.seed, 1)?;
        svg::scatter_by_class(&dir.join("samples.svg"), &mix, &set.points)?;
    }
    Ok(path)
}

/// One sweep cell: sample with the given method and scale, evaluate
/// against the mixture, never abort the sweep on a per-run failure.
#[allow(clippy::too_many_arguments)]
fn sweep_cell(
    cfg: &RunConfig,
    model: &EpsModel,
    schedule: &Schedule,
    mix: &MixtureSpec,
    reference: &[Vec<f64>],
    forbidden: usize,
    method: &str,
    scale: f64,
) -> RunReport {
    let sm = &cfg.sampling;
    let attempt = || -> Result<RunReport> {
        let spec = cfg.guidance_spec(method, scale)?;
        let run = sample_run(cfg, spec)?;
        let set = sample(model, schedule, &run, sm.n)?;
        let er = error_rate(mix, &set.points, forbidden)?;
        let (occupancy, off_support) = node_occupancy(mix, &set.points, 4.0)?;
        let sliced_w = sliced_wasserstein(&set.points, reference, 64, mix_seed(sm.seed, 0x7e57))?;
        let loglik = mean_loglik(mix, &set.points, Some(forbidden))?;
        let report = RunReport {
            method: method.to_string(),
            scale,
            error_rate: er,
            off_support,
            sliced_w,
            occupancy,
            mean_loglik: loglik,
            n: sm.n,
            seed: sm.seed,
            nfe: sm.nfe,
            failed: false,
        };
        report.validate()?;
        Ok(report)
    };
    attempt().unwrap_or_else(|_| RunReport::failed(method, scale, sm.n, sm.seed, sm.nfe))
}

pub struct SweepOutcome {
    pub path: PathBuf,
    pub failed_cells: usize,
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    ckpt: &Path,
    scales: &[f64],
    methods: &[String],
) -> Result<SweepOutcome> {
    cfg.validate()?;
    if scales.is_empty() {
        bail!("sweep needs a non-empty scale list");
    }
    if methods.is_empty() {
        bail!("sweep needs at least one method");
    }
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let (model, schedule) = load_matching_checkpoint(cfg, ckpt)?;
    let (mix, _) = make_threenode(cfg.dataset.seed, 1)?;
    let forbidden = match parse_condition(&cfg.sampling.cond)? {
        Condition::Class(id) => id,
        Condition::Null => bail!("sweep needs a class condition to forbid"),
    };
    let reference: Vec<Vec<f64>> = mix
        .sample_points(mix_seed(cfg.sampling.seed, REFERENCE_STREAM), cfg.sampling.n)
        .into_iter()
        .map(|p| p.x)
        .collect();

    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    let mut failed_cells = 0;
    for method in methods {
        for &scale in scales {
            let report = sweep_cell(
                cfg, &model, &schedule, &mix, &reference, forbidden, method, scale,
            );
            failed_cells += usize::from(report.failed);
            csv.push_str(&report.to_csv_row());
            csv.push('\n');
        }
    }
    let path = dir.join("sweep.csv");
    fs::write(&path, csv)?;
    Ok(SweepOutcome { path, failed_cells })
}

/// Inclusive `start:end:step` grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("grid must be start:end:step, got '{text}'");
    }
    let (start, end, step): (f64, f64, f64) =
        (parts[0].parse()?, parts[1].parse()?, parts[2].parse()?);
    if !(step > 0.0 && end >= start && start >= 0.0) {
        bail!("grid bounds must satisfy 0 <= start <= end with step > 0");
    }
    let count = ((end - start) / step).round() as usize;
    let mut grid: Vec<f64> = (0..=count).map(|i| start + i as f64 * step).collect();
    if let Some(last) = grid.last_mut() {
        if (*last - end).abs() < step * 1e-9 {
            *last = end;
        }
    }
    grid.retain(|&v| v <= end + step * 1e-9);
    Ok(grid)
}

pub fn cmd_curves(
    tau: f64,
    omega: f64,
    grid: &str,
    dir: &Path,
    with_svg: bool,
) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let grid = parse_grid(grid)?;
    let rows = guidance::emit_curves(tau, omega, &grid)?;
    let mut csv = String::from(guidance::CURVES_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.to_csv_row());
        csv.push('\n');
    }
    let path = dir.join("curves.csv");
    fs::write(&path, csv)?;
    if with_svg {
        svg::coefficient_curves(&dir.join("curves.svg"), &rows)?;
    }
    Ok(path)
}

pub struct EquivReport {
    pub per_seed: Vec<f64>,
    pub max_deviation: f64,
}

/// Maximum per-step deviation between the noise-space loop at constant ω
/// and the posterior-mean loop; the latter runs with the matched per-step
/// scale, or deliberately with the constant ω under `wrong_rho`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_equiv(
    ckpt: &Path,
    omega: f64,
    tau: f64,
    mode: &str,
    seeds: u64,
    nfe: usize,
    wrong_rho: bool,
    dir: &Path,
) -> Result<EquivReport> {
    ensure_dir(dir)?;
    let (model, schedule) = checkpoint::load(ckpt)?;
    let spec = match mode {
        "pos" => GuidanceSpec::CcfgPos { omega, tau },
        "neg" => GuidanceSpec::CcfgNeg { omega, tau },
        other => bail!("mode must be pos or neg, got '{other}'"),
    };
    if seeds == 0 {
        bail!("need at least one seed");
    }
    let pairs = step_pairs(&schedule, nfe)?;
    let mut per_seed = Vec::with_capacity(seeds as usize);
    for seed in 0..seeds {
        let noise_run = SampleRun {
            seed,
            nfe,
            record_trajectory: true,
            spec,
            cond: Condition::Class(ccfg_core::data::RED),
            cond2: None,
            variant: Variant::NoiseSpace,
        };
        let reference = sample(&model, &schedule, &noise_run, 1)?;
        let ref_traj = &reference.trajectories.as_ref().unwrap()[0];

        // Posterior-mean loop, run explicitly so the wrong-rho control can
        // substitute the constant scale.
        let mut rng = GaussStream::new(chain_seed(seed, 0));
        let mut x = rng.gauss_vec(model.data_dim());
        let mut max_dev = max_abs_diff(&x, &ref_traj[0]);
        for (i, &(t, t_prev)) in pairs.iter().enumerate() {
            let eps_null = model.predict_eps(&x, t, Condition::Null)?;
            let eps_cond = model.predict_eps(&x, t, Condition::Class(ccfg_core::data::RED))?;
            let scale = if wrong_rho {
                omega
            } else {
                ccfg_core::sampler::rho_t(omega, &schedule, t, t_prev)?
            };
            let out = guidance::guide(&spec.with_scale(scale)?, &eps_null, &eps_cond, None, None)?;
            x = ddim_step(&schedule, t, t_prev, &x, &out.guided, &eps_null)?;
            max_dev = max_dev.max(max_abs_diff(&x, &ref_traj[i + 1]));
        }
        per_seed.push(max_dev);
    }
    let max_deviation = per_seed.iter().cloned().fold(0.0, f64::max);

    let mut csv = String::from("seed,max_deviation\n");
    for (seed, dev) in per_seed.iter().enumerate() {
        csv.push_str(&format!("{seed},{dev}\n"));
    }
    fs::write(dir.join("equiv.csv"), csv)?;

    Ok(EquivReport {
        per_seed,
        max_deviation,
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
