//! `metrokit`: synthetic data, training, fusion and evaluation from the shell.

mod config;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use metrokit::geometry::Vec3;
use metrokit::io;
use metrokit::synth::{generate, write_bundle, Shape, SyntheticSpec};

use config::PipelineConfig;
use stages::{stage, Stage};

#[derive(Parser)]
#[command(name = "metrokit", version, about = "Desk-scale surfel reconstruction pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scene bundle supplying any inputs the configuration leaves unset.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    colmap: Option<PathBuf>,
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    #[arg(long, global = true)]
    pointmaps: Option<PathBuf>,
    #[arg(long, global = true)]
    mono: Option<PathBuf>,
    /// Reference point cloud for geometry scores.
    #[arg(long, global = true)]
    gt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle.
    Synth {
        #[arg(long)]
        shape: Option<Shape>,
        /// Number of training views.
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        test_views: Option<usize>,
        /// Image width and height.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        depth_noise: Option<f64>,
        #[arg(long)]
        image_noise: Option<f64>,
        #[arg(long)]
        gain_jitter: Option<f64>,
    },
    /// Parse the SfM reconstruction and images; writes scene.json.
    Ingest,
    /// Split the view graph into clusters; writes partition.json.
    Partition {
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Align pointmaps to the SfM frame; writes dense.ply and transforms.json.
    Align,
    /// Optimize the surfels; writes model/, train_log.csv and checkpoints.
    Train {
        #[arg(long)]
        iters: Option<usize>,
        /// Write refined, filtered and restored depth maps to mvs/.
        #[arg(long)]
        dump_mvs: bool,
    },
    /// Render a trained model.
    Render {
        /// `train`, `test`, `all`, or comma-separated view names.
        #[arg(long, default_value = "all")]
        views: String,
    },
    /// Fuse rendered depths of the training views into mesh.ply.
    Fuse,
    /// Score mesh.ply and held-out renders; writes metrics.json.
    Eval {
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Ingest, dense initialization, training, rendering, fusion and evaluation.
    Pipeline {
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        dump_mvs: bool,
    },
}

fn pipeline_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.colmap, &g.colmap),
        (&mut p.images, &g.images),
        (&mut p.pointmaps, &g.pointmaps),
        (&mut p.mono, &g.mono),
        (&mut p.gt, &g.gt),
        (&mut p.output, &g.out),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    if let Some(data) = &g.data {
        cfg.fill_from_bundle(data);
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn set_iters(cfg: &mut PipelineConfig, iters: Option<usize>) {
    if let Some(n) = iters {
        let t = &mut cfg.train;
        // keep the stage split and densification window proportional
        let scale = |v: usize| (v * n).checked_div(t.total_iters).unwrap_or(0);
        t.stage_switch_iter = scale(t.stage_switch_iter).clamp(n.min(1), n);
        t.densify_until = scale(t.densify_until).min(n);
        t.densify_from = scale(t.densify_from);
        t.total_iters = n;
    }
}

fn synth(g: &GlobalArgs, cmd: &Command) -> Result<()> {
    let Command::Synth {
        shape,
        views,
        test_views,
        size,
        depth_noise,
        image_noise,
        gain_jitter,
    } = cmd
    else {
        unreachable!()
    };
    stage(Stage::Synth, || {
        let mut spec = match &g.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SyntheticSpec::default(),
        };
        if let Some(v) = shape {
            spec.shape = *v;
        }
        if let Some(v) = views {
            spec.view_count = *v;
        }
        if let Some(v) = test_views {
            spec.test_view_count = *v;
        }
        if let Some(v) = size {
            (spec.width, spec.height) = (*v, *v);
        }
        if let Some(v) = depth_noise {
            spec.depth_noise = *v;
        }
        if let Some(v) = image_noise {
            spec.image_noise = *v;
        }
        if let Some(v) = gain_jitter {
            spec.gain_jitter = *v;
        }
        if let Some(v) = g.seed {
            spec.seed = v;
        }
        let out = g.out.clone().unwrap_or_else(|| PathBuf::from("scene"));
        let scene = generate(&spec)?;
        write_bundle(&scene, &out)?;
        info!(
            "wrote {} training and {} test views to {}",
            scene.train.len(),
            scene.test.len(),
            out.display()
        );
        Ok(())
    })
}

fn mesh_vertices(path: &Path) -> Result<Vec<Vec3>> {
    Ok(io::read_point_cloud(path)
        .with_context(|| format!("reading mesh {}", path.display()))?
        .0)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Command::Synth { .. } = cli.command {
        return synth(g, &cli.command);
    }
    let mut cfg = pipeline_config(g)?;
    match &cli.command {
        Command::Partition { clusters: Some(n) } => cfg.clusters = *n,
        Command::Eval { tau: Some(t) } | Command::Pipeline { tau: Some(t), .. } => cfg.tau = *t,
        _ => {}
    }
    if let Command::Train { iters, .. } | Command::Pipeline { iters, .. } = &cli.command {
        set_iters(&mut cfg, *iters);
    }
    cfg.validate().context("invalid configuration")?;
    let out = cfg.output();
    stages::create_dir(&out)?;

    match &cli.command {
        Command::Synth { .. } => unreachable!(),
        Command::Ingest => {
            stages::check_inputs(&cfg, &[Stage::Ingest])?;
            let ing = stages::ingest(&cfg)?;
            stages::write_scene_summary(&ing, &out)?;
        }
        Command::Partition { .. } => {
            stages::check_inputs(&cfg, &[Stage::Partition])?;
            stages::partition(&cfg, &out)?;
        }
        Command::Align => {
            stages::check_inputs(&cfg, &[Stage::Ingest, Stage::DenseInit])?;
            let ing = stages::ingest(&cfg)?;
            let dense = stages::dense_init(&cfg, &ing.sparse)?;
            match dense {
                Some(d) => stages::write_dense(&d, &out)?,
                None => anyhow::bail!("dense-init stage failed: no pointmaps available"),
            }
        }
        Command::Train { dump_mvs, .. } => {
            stages::check_inputs(&cfg, &[Stage::Ingest, Stage::DenseInit, Stage::Train])?;
            let ing = stages::ingest(&cfg)?;
            let dense = stages::dense_init(&cfg, &ing.sparse)?;
            stages::train(&cfg, ing, dense, &out, *dump_mvs)?;
        }
        Command::Render { views } => {
            let (state, train, test) = stage(Stage::Render, || {
                let state = stages::load_model(&out)?;
                let (train, test) = stages::cameras(&cfg)?;
                Ok((state, train, test))
            })?;
            let selected = stage(Stage::Render, || stages::select_views(views, &train, &test))?;
            let renders = stages::render(&state, &selected, &train)?;
            stages::write_renders(&renders, &out)?;
        }
        Command::Fuse => {
            let (state, train) = stage(Stage::Fuse, || {
                Ok((stages::load_model(&out)?, stages::cameras(&cfg)?.0))
            })?;
            let renders = stages::render(&state, &train, &train)?;
            let ids: Vec<_> = train.iter().map(|c| c.view_id).collect();
            let mesh = stages::fuse(&cfg, &renders, &ids)?;
            mesh.save_ply(&out.join("mesh.ply"))?;
        }
        Command::Eval { .. } => {
            stages::check_inputs(&cfg, &[Stage::Eval])?;
            let (state, train, test, vertices) = stage(Stage::Eval, || {
                let (train, test) = stages::cameras(&cfg)?;
                Ok((
                    stages::load_model(&out)?,
                    train,
                    test,
                    mesh_vertices(&out.join("mesh.ply"))?,
                ))
            })?;
            let renders = stages::render(&state, &test, &train)?;
            let metrics = stages::eval(&cfg, &vertices, None, &renders)?;
            stages::write_metrics(&metrics, &out)?;
        }
        Command::Pipeline { dump_mvs, .. } => {
            stages::check_inputs(&cfg, &[Stage::Ingest, Stage::DenseInit, Stage::Train, Stage::Eval])?;
            let ing = stages::ingest(&cfg)?;
            stages::write_scene_summary(&ing, &out)?;
            if cfg.clusters > 1 {
                stages::partition(&cfg, &out)?;
            }
            let dense = stages::dense_init(&cfg, &ing.sparse)?;
            if let Some(d) = &dense {
                stages::write_dense(d, &out)?;
            }
            let (state, data) = stages::train(&cfg, ing, dense, &out, *dump_mvs)?;
            let (_, test) = stage(Stage::Render, || stages::cameras(&cfg))?;
            let all: Vec<_> = data.views.iter().chain(&test).cloned().collect();
            let renders = stages::render(&state, &all, &data.views)?;
            stages::write_renders(&renders, &out)?;
            let ids: Vec<_> = data.views.iter().map(|c| c.view_id).collect();
            let mesh = stages::fuse(&cfg, &renders, &ids)?;
            mesh.save_ply(&out.join("mesh.ply"))?;
            let test_renders: Vec<_> = renders
                .into_iter()
                .filter(|r| !ids.contains(&r.camera.view_id))
                .collect();
            let metrics = stages::eval(&cfg, &mesh.vertices, Some(mesh.is_watertight()), &test_renders)?;
            stages::write_metrics(&metrics, &out)?;
            info!("metrics: {}", serde_json::to_string(&metrics)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    metrokit::parallel::init_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
