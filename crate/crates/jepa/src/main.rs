//! Command-line surface: pretraining, probing, evaluation, patch-feature
//! analysis, and model inspection.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 checkpoint error, 1 anything else.

use clap::{Args, Parser, Subcommand};
use jepa::checkpoint::{load_checkpoint, save_checkpoint};
use jepa::config::TrainConfig;
use jepa::data::{parse_synth_spec, synth_dataset, Dataset};
use jepa::error::{Error, Result};
use jepa::model::ScottVit;
use jepa::module::Module;
use jepa::optim::{ema_at, lr_at, wd_at};
use jepa::pca::{
    foreground_split, pca, projections_csv, second_stage_pca_render, FeatureMatrix, PcaResult,
    RenderedImage,
};
use jepa::probe::{evaluate, train_probe, Probe, ProbeConfig, ProbeKind};
use jepa::tensor::Tensor;
use jepa::trainer::{pretrain, ModelState};
use jepa::transformer::BackboneConfig;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "jepa", version, about = "Masked latent-prediction pretraining with a sparse convolutional tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand honors uniformly.
#[derive(Args)]
struct Common {
    /// Random seed (overrides any config-file seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Thread cap for internal parallelism (compute is currently single-threaded)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone with masked latent prediction
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Config file (key=value lines); defaults apply for missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset: a directory of class subdirectories, or synth:<n>x<classes>x<size>
        #[arg(long)]
        data: String,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the resolved config and step count, then exit without touching files
        #[arg(long)]
        dry_run: bool,
    },
    /// Train a probe on frozen backbone features
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// linear | attentive
        #[arg(long, default_value = "linear")]
        kind: String,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Evaluate a trained probe; prints JSON metrics and appends a results CSV
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        data: String,
    },
    /// PCA over patch features: per-image PNG renders plus a projections CSV
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images: a dataset directory or synth:<n>x<classes>x<size>
        #[arg(long)]
        images: String,
        /// Foreground split plus a second PCA over foreground patches
        #[arg(long)]
        second_stage: bool,
        /// Comma-separated image indices to pool (default: all images together)
        #[arg(long)]
        group: Option<String>,
    },
    /// Print parameter counts and schedule tables
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to break down per submodule (reference variants print regardless)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest {
    config_digest: String,
    code_version: String,
    seed: u64,
    started_unix: u64,
    finished_unix: u64,
    outputs: BTreeMap<String, String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn check_threads(common: &Common) -> Result<()> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(())
}

/// Resolve `synth:<n>x<classes>x<size>` or a dataset directory.
fn resolve_dataset(arg: &str, seed: u64) -> Result<Dataset<f32>> {
    if let Some(parsed) = parse_synth_spec(arg) {
        let (n, classes, size) = parsed?;
        return synth_dataset(n, classes, size, seed);
    }
    let path = Path::new(arg);
    if !path.is_dir() {
        return Err(Error::Data(format!("dataset directory not found: {arg}")));
    }
    Dataset::from_dir(path)
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => 2,
                Error::Data(_) => 3,
                Error::Checkpoint(_) => 4,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, config, data, resume, dry_run } => {
            cmd_pretrain(&common, config.as_deref(), &data, resume.as_deref(), dry_run)
        }
        Command::Probe { common, checkpoint, data, kind, epochs, batch } => {
            cmd_probe(&common, &checkpoint, &data, &kind, epochs, batch)
        }
        Command::Eval { common, checkpoint, probe, data } => {
            cmd_eval(&common, &checkpoint, &probe, &data)
        }
        Command::Features { common, checkpoint, images, second_stage, group } => {
            cmd_features(&common, &checkpoint, &images, second_stage, group.as_deref())
        }
        Command::Inspect { common, checkpoint } => cmd_inspect(&common, checkpoint.as_deref()),
    }
}

fn cmd_pretrain(
    common: &Common,
    config: Option<&Path>,
    data: &str,
    resume: Option<&Path>,
    dry_run: bool,
) -> Result<()> {
    check_threads(common)?;
    let mut cfg = match config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dataset = resolve_dataset(data, cfg.seed)?;

    let spe = (dataset.len() as u64).div_ceil(cfg.batch as u64);
    let total_steps = cfg.epochs as u64 * spe;
    let step_cap = if cfg.max_steps > 0 {
        total_steps.min(cfg.max_steps as u64)
    } else {
        total_steps
    };
    if dry_run {
        print!("{}", cfg.canonical());
        println!("# digest {}", cfg.digest());
        println!("# dataset {} samples, {} classes", dataset.len(), dataset.num_classes());
        println!("# steps_per_epoch {spe}");
        println!("# total_steps {step_cap}");
        return Ok(());
    }

    let started = now_unix();
    let (state, outputs) = pretrain(&dataset, &cfg, &common.out, resume, |m| {
        println!(
            "step {} epoch {} loss {:.6} lr {:.3e} wd {:.4} ema {:.6} target_std {:.4} grad_norm {:.4}",
            m.step, m.epoch, m.loss, m.lr, m.wd, m.ema_m, m.target_std, m.grad_norm
        );
    })?;
    let mut paths = BTreeMap::new();
    paths.insert("last_checkpoint".into(), outputs.last_checkpoint.display().to_string());
    paths.insert("best_checkpoint".into(), outputs.best_checkpoint.display().to_string());
    paths.insert("metrics".into(), outputs.metrics.display().to_string());
    let manifest = RunManifest {
        config_digest: cfg.digest(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: now_unix(),
        outputs: paths,
    };
    let manifest_path = common.out.join("manifest.json");
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::State(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, manifest_json + "\n")?;
    println!("finished at step {}; manifest {}", state.step, manifest_path.display());
    Ok(())
}

/// The EMA target encoder is the artifact every downstream command consumes.
fn load_backbone(path: &Path) -> Result<(ModelState<f32>, ScottVit<f32>)> {
    let state = ModelState::<f32>::load(path)?;
    let backbone = state.target.clone();
    Ok((state, backbone))
}

fn cmd_probe(
    common: &Common,
    checkpoint: &Path,
    data: &str,
    kind: &str,
    epochs: usize,
    batch: usize,
) -> Result<()> {
    check_threads(common)?;
    let kind: ProbeKind = kind.parse()?;
    let (state, backbone) = load_backbone(checkpoint)?;
    let dataset = resolve_dataset(data, state.cfg.seed)?;
    let mut cfg = ProbeConfig::new(kind, dataset.num_classes())?;
    cfg.epochs = epochs;
    cfg.batch = batch;
    cfg.seed = common.seed.unwrap_or(0);
    let probe = train_probe(&backbone, &dataset, &state.cfg, &cfg, |epoch, loss| {
        println!("probe epoch {epoch} loss {loss:.6}");
    })?;
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("probe.ckpt");
    save_probe(&path, &probe, &state.cfg, cfg.seed)?;
    println!("probe saved to {}", path.display());
    Ok(())
}

/// Probes reuse the checkpoint container: parameters under a `probe.` prefix
/// plus a two-element `probe_meta` tensor encoding (kind, classes).
fn save_probe(path: &Path, probe: &Probe<f32>, cfg: &TrainConfig, seed: u64) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    probe.visit("probe", &mut |name, t| tensors.push((name.to_string(), t.clone())));
    let kind_tag = match probe.kind() {
        ProbeKind::Linear => 0.0,
        ProbeKind::Attentive => 1.0,
    };
    tensors.push((
        "probe_meta".into(),
        Tensor::from_vec(vec![kind_tag, probe.classes() as f32], &[2])?,
    ));
    save_checkpoint(path, cfg, &tensors, seed, 0)
}

fn load_probe(path: &Path, d: usize) -> Result<Probe<f32>> {
    let data = load_checkpoint::<f32>(path)?;
    let meta = data
        .tensors
        .get("probe_meta")
        .ok_or_else(|| Error::Checkpoint("not a probe checkpoint (probe_meta missing)".into()))?;
    let kind = match meta.data()[0] {
        v if v == 0.0 => ProbeKind::Linear,
        v if v == 1.0 => ProbeKind::Attentive,
        v => return Err(Error::Checkpoint(format!("unknown probe kind tag {v}"))),
    };
    let classes = meta.data()[1] as usize;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(data.seed);
    let mut probe = Probe::init(kind, d, classes, &mut rng);
    let mut err = None;
    probe.visit_mut("probe", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match data.tensors.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(_) => err = Some(Error::Checkpoint(format!("tensor {name}: shape mismatch"))),
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    err.map_or(Ok(probe), Err)
}

fn cmd_eval(common: &Common, checkpoint: &Path, probe_path: &Path, data: &str) -> Result<()> {
    check_threads(common)?;
    let (state, backbone) = load_backbone(checkpoint)?;
    let probe = load_probe(probe_path, state.cfg.embed_dim)?;
    let dataset = resolve_dataset(data, state.cfg.seed)?;
    let (top1, top5) = evaluate(&backbone, &probe, &dataset, &state.cfg)?;
    println!("{}", serde_json::json!({ "top1": top1, "top5": top5 }));
    std::fs::create_dir_all(&common.out)?;
    let csv = common.out.join("results.csv");
    let fresh = !csv.exists();
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&csv)?;
    if fresh {
        writeln!(file, "dataset,probe_kind,top1,top5,checkpoint_digest")?;
    }
    let kind = match probe.kind() {
        ProbeKind::Linear => "linear",
        ProbeKind::Attentive => "attentive",
    };
    writeln!(file, "{data},{kind},{top1},{top5},{}", state.cfg.digest())?;
    Ok(())
}

fn cmd_features(
    common: &Common,
    checkpoint: &Path,
    images: &str,
    second_stage: bool,
    group: Option<&str>,
) -> Result<()> {
    check_threads(common)?;
    let (state, backbone) = load_backbone(checkpoint)?;
    let dataset = resolve_dataset(images, state.cfg.seed)?;
    let selected: Vec<usize> = match group {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!("--group: {s:?} is not an image index"))
                })
            })
            .collect::<Result<_>>()?,
        None => (0..dataset.len()).collect(),
    };
    if let Some(&bad) = selected.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Data(format!(
            "--group index {bad} out of range for {} images",
            dataset.len()
        )));
    }
    if selected.is_empty() {
        return Err(Error::Data("no images selected".into()));
    }

    let grid = state.cfg.image_size / 16;
    let aug = state.cfg.augment();
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    let mut dim = 0;
    for &idx in &selected {
        let view = jepa::augment::eval_transform(&dataset.samples[idx], state.cfg.image_size, &aug)?;
        let feats = backbone.forward_dense(&view)?;
        dim = feats.shape()[1];
        rows.extend(feats.to_f64_vec());
        provenance.extend((0..feats.shape()[0]).map(|p| (idx, p)));
    }
    let n_rows = provenance.len();
    let matrix = FeatureMatrix::new(rows, n_rows, dim, provenance)?;

    let k = 3.min(n_rows);
    let first = pca(&matrix, k)?;
    let fg = foreground_split(&first, 0.0);
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("projections.csv"), projections_csv(&matrix, &first, &fg))?;

    let renders = if second_stage {
        let (_, renders) = second_stage_pca_render(&matrix, &fg, grid, grid)?;
        renders
    } else {
        render_first_stage(&matrix, &first, grid)
    };
    for (id, render) in &renders {
        let path = common.out.join(format!("image_{id:04}.png"));
        render.write_png(&path, 16)?;
    }
    println!(
        "{} images, {} patch rows, {} foreground; outputs in {}",
        selected.len(),
        n_rows,
        fg.iter().filter(|&&b| b).count(),
        common.out.display()
    );
    Ok(())
}

/// First-stage render: min-max scale the first three projections over all
/// patches, no foreground masking.
fn render_first_stage(
    x: &FeatureMatrix,
    result: &PcaResult,
    grid: usize,
) -> Vec<(usize, RenderedImage)> {
    let k = result.k;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for row in result.projections.chunks(k) {
        for (c, &v) in row.iter().enumerate() {
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }
    let scale = |c: usize, v: f64| -> u8 {
        if hi[c] - lo[c] < 1e-12 {
            128
        } else {
            (255.0 * (v - lo[c]) / (hi[c] - lo[c])).round().clamp(0.0, 255.0) as u8
        }
    };
    let mut image_ids: Vec<usize> = x.provenance.iter().map(|&(id, _)| id).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    image_ids
        .into_iter()
        .map(|id| {
            let mut colors = vec![[128u8; 3]; grid * grid];
            for (row, &(img, patch)) in x.provenance.iter().enumerate() {
                if img != id || patch >= colors.len() {
                    continue;
                }
                let proj = &result.projections[row * k..(row + 1) * k];
                let mut color = [128u8; 3];
                for c in 0..k {
                    color[c] = scale(c, proj[c]);
                }
                colors[patch] = color;
            }
            (id, RenderedImage { grid_h: grid, grid_w: grid, patch_colors: colors })
        })
        .collect()
}

fn cmd_inspect(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    check_threads(common)?;
    use jepa::model::ModelConfig;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for (name, backbone) in [
        ("SCOTT-7/16", BackboneConfig::scott7()),
        ("SCOTT-12/16", BackboneConfig::scott12()),
    ] {
        let model = ScottVit::<f32>::init(ModelConfig::new(backbone), &mut rng)?;
        println!("{name}: {} parameters", model.param_count());
    }
    let Some(path) = checkpoint else {
        return Ok(());
    };
    let state = ModelState::<f32>::load(path)?;
    println!("\ncheckpoint {} (step {}, seed {})", path.display(), state.step, state.cfg.seed);
    println!("config digest {}", state.cfg.digest());

    // parameter counts grouped by top-level submodule
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut count_into = |root: &str, m: &dyn Fn(&mut dyn FnMut(&str, &Tensor<f32>))| {
        m(&mut |name, t| {
            let group = match name.split('.').nth(1) {
                Some(child) => format!("{root}.{child}"),
                None => root.to_string(),
            };
            *counts.entry(group).or_default() += t.data().len();
        });
    };
    count_into("context", &|f| state.trainable.context.visit("context", f));
    count_into("predictor", &|f| state.trainable.predictor.visit("predictor", f));
    count_into("target", &|f| state.target.visit("target", f));
    println!("\nparameters per submodule:");
    for (group, count) in &counts {
        println!("  {group:<24} {count}");
    }

    println!("\nschedules (fraction: lr / weight decay / ema momentum):");
    let warmup = state.cfg.warmup_epochs as f64 / state.cfg.epochs as f64;
    let mut fracs = vec![0.0, warmup, 0.25, 0.5, 0.75, 1.0];
    fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fracs.dedup();
    for frac in fracs {
        println!(
            "  {frac:>6.3}: {:.6e} / {:.4} / {:.6}",
            lr_at(frac, &state.cfg),
            wd_at(frac, &state.cfg),
            ema_at(frac, &state.cfg)
        );
    }
    Ok(())
}
