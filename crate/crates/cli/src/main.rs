use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use regmod::geometry::load_obj;
use regmod::optim::GradcheckOptions;
use regmod::pipeline::adapt::{adapt, trailing_mean, write_metrics, TrainingData};
use regmod::pipeline::cache::PreprocessCache;
use regmod::pipeline::config::{load_poses, poses_to_toml, AdaptConfig};
use regmod::pipeline::gradcheck::desk_gradcheck;
use regmod::pipeline::model::{infer, load_head, AdapterModel};
use regmod::pipeline::synth::SynthSpec;
use regmod::pipeline::visualize::{render, VisMode};
use regmod::pipeline::ring_scene;
use regmod::plane::FeaturePlane;

#[derive(Parser)]
#[command(name = "regmod", version, about = "Mesh-rigged feature registers and LoRA adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an icosphere mesh and a ring of camera poses.
    Scene {
        #[arg(long, default_value_t = 3)]
        subdiv: u32,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        mesh_out: PathBuf,
        #[arg(long)]
        poses_out: PathBuf,
    },
    /// Precompute visibility, contours and k-NN tables for every pose.
    Preprocess {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic target features for every cached pose.
    Synth {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the register and the LoRA head.
    Adapt {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the LoRA head and run it on a pose's features.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        pose: usize,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one PCA component of a feature plane as a PPM image.
    Visualize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        component: usize,
        #[arg(long, default_value = "dino")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn feature_path(dir: &Path, pose: usize) -> PathBuf {
    dir.join(format!("pose_{pose:03}.fpln"))
}

fn load_config(path: Option<&Path>) -> Result<AdaptConfig> {
    match path {
        Some(p) => Ok(AdaptConfig::load(p)?),
        None => Ok(AdaptConfig::default()),
    }
}

fn load_verified_cache(mesh: &Path, poses: &Path, cfg: &AdaptConfig, cache: &Path) -> Result<(regmod::geometry::TriMesh, PreprocessCache)> {
    let mesh = load_obj(mesh)?;
    let poses = load_poses(poses)?;
    let cache = PreprocessCache::load(cache).with_context(|| format!("reading cache {}", cache.display()))?;
    cache.verify(&mesh, &poses, cfg)?;
    Ok((mesh, cache))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scene {
            subdiv,
            count,
            mesh_out,
            poses_out,
        } => {
            let (mesh, poses) = ring_scene(subdiv, count)?;
            std::fs::write(&mesh_out, mesh.to_obj())?;
            std::fs::write(&poses_out, poses_to_toml(&poses))?;
            println!("wrote {} vertices and {} poses", mesh.vertex_count(), poses.len());
        }
        Command::Preprocess {
            mesh,
            poses,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mesh = load_obj(&mesh)?;
            let poses = load_poses(&poses)?;
            let (cache, failures) = PreprocessCache::build(&mesh, &poses, &cfg)?;
            for f in &failures {
                warn!("pose {} skipped: {}", f.pose_index, f.error);
                eprintln!("pose {}: {}", f.pose_index, f.error);
            }
            cache.save(&out)?;
            println!("cached {} of {} poses", cache.frames.len(), poses.len());
        }
        Command::Synth {
            mesh,
            poses,
            config,
            cache,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (mesh, cache) = load_verified_cache(&mesh, &poses, &cfg, &cache)?;
            std::fs::create_dir_all(&out)?;
            let spec = SynthSpec::from_seed(cfg.dim_out, seed);
            for f in &cache.frames {
                spec.render(&mesh, &f.frame)?.save(feature_path(&out, f.pose_index))?;
            }
            println!("wrote {} feature planes", cache.frames.len());
        }
        Command::Adapt {
            mesh,
            poses,
            config,
            cache,
            features,
            iters,
            batch,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.iterations = iters.unwrap_or(cfg.iterations);
            cfg.batch_size = batch.unwrap_or(cfg.batch_size);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let (mesh, cache) = load_verified_cache(&mesh, &poses, &cfg, &cache)?;
            let targets = cache
                .frames
                .iter()
                .map(|f| {
                    let p = feature_path(&features, f.pose_index);
                    FeaturePlane::load(&p)
                        .map(|t| t.cast::<f64>())
                        .with_context(|| format!("reading {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let data = TrainingData::new(&cache, targets, cfg.dim_out)?;
            let mut model = AdapterModel::init(mesh.vertex_count(), cfg.dim, cfg.dim_out, cfg.rank, cfg.seed)?;
            let log = adapt(&mut model, &data, &cfg)?;
            std::fs::create_dir_all(&out)?;
            model.save(&out)?;
            write_metrics(out.join("metrics.csv"), &log)?;
            let first = log[0].losses.l_register;
            let last = trailing_mean(&log, 50);
            println!("L_register {first:.6} -> {last:.6} (trailing mean of 50)");
        }
        Command::Infer {
            checkpoint,
            pose,
            features,
            out,
        } => {
            let head = load_head(&checkpoint)?;
            let base = head.rows() * head.cols();
            let input = feature_path(&features, pose);
            let f_src = FeaturePlane::load(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .cast::<f64>();
            let result = infer(&head, &f_src)?;
            if result.parameter_count != base {
                bail!("merged head has {} parameters, base head has {base}", result.parameter_count);
            }
            result.features.save(&out)?;
            info!("inference on pose {pose} features");
            println!("merged head parameters: {} (base {base})", result.parameter_count);
        }
        Command::Visualize {
            input,
            component,
            mode,
            out,
        } => {
            let mode: VisMode = mode.parse()?;
            let plane = FeaturePlane::load(&input).with_context(|| format!("reading {}", input.display()))?;
            let img = render(&plane, component, mode)?;
            img.save_ppm(&out)?;
            println!("wrote {}x{} image", img.width, img.height);
        }
        Command::Gradcheck { scale, seed } => {
            if scale != "desk" {
                bail!("unknown scale {scale:?}; only \"desk\" is available");
            }
            let r = desk_gradcheck(seed, &GradcheckOptions::default())?;
            for (name, rep) in [("register", &r.register), ("lora head", &r.head)] {
                println!(
                    "{name}: {} coordinates, max rel err {:.3e}, mean {:.3e} -> {}",
                    rep.checked,
                    rep.max_rel_err,
                    rep.mean_rel_err,
                    if rep.passed { "PASS" } else { "FAIL" }
                );
            }
            if !r.passed() {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
