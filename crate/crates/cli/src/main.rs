use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

use aosrnet::degrade::{sample_spec, synth_pair, AtmoLightSet, SceneKind, SynthRanges};
use aosrnet::harness::{
    build_manifest, derive_seed, load_sweep_sets, ols_sweep, parse_grid, run_ablation, AblationKind, DatasetManifest,
    ManifestEntry, ManifestPlan, SceneMix, Split, TrainConfig,
};
use aosrnet::imaging::{load_depth, load_image, save_image};
use aosrnet::metrics::{evaluate_split, list_images, NiqeModel};
use aosrnet::net::{aosrnet_forward, Checkpoint};
use aosrnet::priors::OlsParams;

#[derive(Parser)]
#[command(name = "aosrnet", version, about = "All-in-one scene recovery: synthesis, training, restoration, evaluation")]
#[command(propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade every PNG in a clean directory and write the pairs plus a manifest.
    Synth {
        #[arg(long, value_name = "DIR")]
        clean: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_parser = parse_scene)]
        scene: SceneKind,
        /// Depth maps named like the clean images; required for haze and sand.
        #[arg(long, value_name = "DIR")]
        depth: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        atmo_set: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a training manifest from a clean corpus.
    Manifest {
        #[arg(long, value_name = "DIR")]
        clean: PathBuf,
        #[arg(long, value_name = "DIR")]
        depth: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        haze: f64,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        sand: f64,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        lowlight: f64,
        #[arg(long, default_value_t = 0.0)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network; writes checkpoint.safetensors and train_log.csv into --out.
    Train {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Restore every PNG in --in, keeping file names.
    Restore {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score restored images against ground truth (CSV report plus a JSON twin).
    Eval {
        #[arg(long, value_name = "DIR")]
        restored: PathBuf,
        #[arg(long, value_name = "DIR")]
        truth: PathBuf,
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// NIQE pristine model file; the built-in model is used otherwise.
        #[arg(long, value_name = "FILE", conflicts_with = "no_niqe")]
        niqe_model: Option<PathBuf>,
        #[arg(long)]
        no_niqe: bool,
        #[arg(long, default_value = "eval")]
        dataset: String,
    },
    /// Score OLS adjustment pairs on <eval>/{haze,sand,lowlight}/{degraded,clean}.
    Sweep {
        #[arg(long, value_name = "FILE")]
        grid: PathBuf,
        #[arg(long, value_name = "DIR")]
        eval: PathBuf,
        /// Defaults to <eval>/ols_sweep.csv.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        p_min: f64,
        #[arg(long, default_value_t = 0.99)]
        p_max: f64,
    },
    /// Train one variant per table row and report PSNR/SSIM.
    Ablate {
        #[arg(long, value_parser = parse_ablation)]
        kind: AblationKind,
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Defaults to ablation_<kind>.csv next to the config.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn parse_scene(s: &str) -> Result<SceneKind, String> {
    s.parse().map_err(|e: aosrnet::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<AblationKind, String> {
    s.parse().map_err(|e: aosrnet::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Cmd::Synth { scene, depth: None, .. } = &cli.cmd {
        if scene.needs_depth() {
            Cli::command()
                .error(ErrorKind::MissingRequiredArgument, format!("--depth <DIR> is required for --scene {scene}"))
                .exit();
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { clean, out, scene, depth, atmo_set, seed } => {
            synth(&clean, &out, scene, depth.as_deref(), atmo_set.as_deref(), seed)
        }
        Cmd::Manifest { clean, depth, out, haze, sand, lowlight, test_fraction, seed } => {
            let plan = ManifestPlan { scene_mix: SceneMix { haze, sand, lowlight }, test_fraction };
            let m = build_manifest(&clean, depth.as_deref(), &plan, seed)?;
            m.save(&out)?;
            log::info!("wrote {} entries to {}", m.entries.len(), out.display());
            Ok(())
        }
        Cmd::Train { config, manifest, out } => {
            let cfg = TrainConfig::load(&config)?;
            let m = DatasetManifest::load(&manifest)?;
            let o = aosrnet::harness::train(&cfg, &m, Some(&out))?;
            let last = o.log.rows.last().context("no epochs ran")?;
            log::info!("done: {} steps, final loss {:.5}", o.checkpoint.meta.steps, last.total);
            Ok(())
        }
        Cmd::Restore { ckpt, input, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let files = list_images(&input)?;
            if files.is_empty() {
                bail!("no PNG images in {}", input.display());
            }
            create_dir(&out)?;
            for f in files {
                let name = f.file_name().context("file name")?;
                let r = aosrnet_forward(&load_image(&f)?, &ck)?;
                save_image(&r, out.join(name))?;
                log::info!("restored {}", name.to_string_lossy());
            }
            Ok(())
        }
        Cmd::Eval { restored, truth, report, niqe_model, no_niqe, dataset } => {
            let model = match (no_niqe, niqe_model) {
                (true, _) => None,
                (false, Some(p)) => Some(NiqeModel::load(p)?),
                (false, None) => Some(NiqeModel::builtin()),
            };
            let r = evaluate_split(&restored, &truth, &dataset, model.as_ref())?;
            write(&report, r.to_csv()?)?;
            write(&report.with_extension("json"), r.to_json()?)?;
            eprintln!("{}", r.summary());
            Ok(())
        }
        Cmd::Sweep { grid, eval, out, p_min, p_max } => {
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let points = parse_grid(&text, &grid.display().to_string())?;
            let sets = load_sweep_sets(&eval)?;
            let r = ols_sweep(&points, &sets, &OlsParams::new(p_min, p_max, 0.0, 0.0)?)?;
            write(&out.unwrap_or_else(|| eval.join("ols_sweep.csv")), r.to_csv()?)?;
            for (k, (a, b)) in &r.best {
                eprintln!("{k}: best p_a_min={a} p_a_max={b}");
            }
            Ok(())
        }
        Cmd::Ablate { kind, config, manifest, out } => {
            let cfg = TrainConfig::load(&config)?;
            let m = DatasetManifest::load(&manifest)?;
            let r = run_ablation(kind, &cfg, &m)?;
            let default = config.with_file_name(format!("ablation_{kind}.csv"));
            write(&out.unwrap_or(default), r.to_csv()?)
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, text: String) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn synth(
    clean_dir: &Path,
    out: &Path,
    scene: SceneKind,
    depth_dir: Option<&Path>,
    atmo_set: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let lights = match atmo_set {
        Some(p) if scene.needs_depth() => {
            let s = AtmoLightSet::load(p)?;
            s.validate_for(scene)?;
            Some(s)
        }
        Some(_) => {
            log::warn!("--atmo-set is ignored for --scene {scene}");
            None
        }
        None => None,
    };
    let files = list_images(clean_dir)?;
    if files.is_empty() {
        bail!("no PNG images in {}", clean_dir.display());
    }
    create_dir(&out.join("degraded"))?;
    create_dir(&out.join("clean"))?;
    let mut entries = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let name = f.file_name().context("file name")?.to_string_lossy().into_owned();
        let clean = load_image(f)?;
        let depth = match depth_dir {
            Some(d) if scene.needs_depth() => {
                let p = d.join(&name);
                if !p.is_file() {
                    bail!("no depth map {} for {name}", p.display());
                }
                Some(load_depth(&p)?)
            }
            _ => None,
        };
        let spec = sample_spec(scene, &SynthRanges::default(), lights.as_ref(), derive_seed(&[seed, i as u64]))?;
        let (degraded, clean) = synth_pair(&clean, depth.as_ref(), &spec)?;
        save_image(&degraded, out.join("degraded").join(&name))?;
        save_image(&clean, out.join("clean").join(&name))?;
        entries.push(ManifestEntry {
            id: name.clone(),
            kind: scene,
            clean: Path::new("clean").join(&name),
            depth: None,
            degraded: Some(Path::new("degraded").join(&name)),
            spec: Some(spec),
            split: Split::Train,
        });
    }
    let m = DatasetManifest { entries };
    m.save(out.join("manifest.json"))?;
    log::info!("wrote {} {scene} pairs to {}", m.entries.len(), out.display());
    Ok(())
}
