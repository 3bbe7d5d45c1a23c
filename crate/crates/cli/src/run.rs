use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use ccvc::config::{parse_config, parse_config_str, parse_override, ExperimentConfig};
use ccvc::datagen::{load_folder_dataset, prepare_data, PreparedData, Scene};
use ccvc::eval::evaluate;
use ccvc::trainer::{load_checkpoint, train_loop, EpochRecord, LoopOptions, TrainState};

use crate::{ConfigArgs, Failure, OutArgs};

pub const MANIFEST: &str = "manifest.json";

/// Where the data of a run came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetDescriptor {
    Synthetic {
        data_seed: u64,
        scenes: usize,
        num_classes: usize,
        image_size: usize,
        labelled: usize,
        unlabelled: usize,
        val: usize,
    },
    Folder {
        path: String,
        labelled: usize,
        unlabelled: usize,
        val: usize,
    },
}

impl DatasetDescriptor {
    pub fn of(cfg: &ExperimentConfig, d: &PreparedData) -> Self {
        let (labelled, unlabelled, val) = (
            d.split.labelled.len(),
            d.split.unlabelled.len(),
            d.val.len(),
        );
        match &cfg.data_dir {
            Some(path) => DatasetDescriptor::Folder {
                path: path.clone(),
                labelled,
                unlabelled,
                val,
            },
            None => DatasetDescriptor::Synthetic {
                data_seed: cfg.data_seed,
                scenes: cfg.scenes,
                num_classes: cfg.num_classes,
                image_size: cfg.image_size,
                labelled,
                unlabelled,
                val,
            },
        }
    }
}

/// Everything needed to re-run and identify a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub dataset: DatasetDescriptor,
    pub output_dir: String,
    pub version: String,
    pub git: Option<String>,
    pub started_unix: u64,
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, dataset: DatasetDescriptor, dir: &Path) -> Self {
        Self {
            config: config.clone(),
            dataset,
            output_dir: dir.display().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git: option_env!("CCVC_GIT_REV").map(str::to_string),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_clock_secs: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(dir.join(MANIFEST), text + "\n").map_err(|e| io_failure(dir, e))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("bad manifest {}: {e}", path.display())))
    }
}

pub fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Assembles overrides in precedence order: `--set` values, then the
/// `--seed` and `--epochs` shorthands.
fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for s in &args.set {
        out.push(parse_override(s)?);
    }
    if let Some(seed) = args.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(e) = args.epochs {
        out.push(("epochs".into(), e.to_string()));
    }
    Ok(out)
}

pub fn build_config(
    args: &ConfigArgs,
    base: Option<&ExperimentConfig>,
) -> Result<ExperimentConfig, Failure> {
    let ov = overrides(args)?;
    match (&args.config, base) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!(
                    "config file {} not found",
                    path.display()
                )));
            }
            Ok(parse_config(path, &ov)?)
        }
        (None, Some(base)) => {
            let mut cfg = base.clone();
            for (k, v) in &ov {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok(cfg)
        }
        (None, None) => Ok(parse_config_str("", &ov)?),
    }
}

pub fn out_root() -> PathBuf {
    std::env::var_os("CCVC_OUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn remove_if_exists(path: &Path) -> Result<(), Failure> {
    let res = if path.is_dir() {
        std::fs::remove_dir_all(path)
    } else {
        std::fs::remove_file(path)
    };
    match res {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_failure(path, e)),
        _ => Ok(()),
    }
}

/// Creates `dir`, refusing to reuse one that already holds a run unless
/// `force` is set, in which case the previous run's outputs are removed.
pub fn prepare_run_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.join(MANIFEST).exists() {
        if !force {
            return Err(Failure::Usage(format!(
                "{} already contains a run; pass --force to replace it",
                dir.display()
            )));
        }
        for entry in std::fs::read_dir(dir).map_err(|e| io_failure(dir, e))? {
            let path = entry.map_err(|e| io_failure(dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let ours = name == MANIFEST
                || name == "metrics.jsonl"
                || name == "summary.txt"
                || name == "curves"
                || name == "ablation.tsv"
                || name.starts_with("row-")
                || (name.starts_with("ckpt-") && name.ends_with(".bin"));
            if ours {
                remove_if_exists(&path)?;
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<PreparedData, Failure> {
    if let Some(dir) = &cfg.data_dir {
        let dir = Path::new(dir);
        for sub in ["images", "labels"] {
            if !dir.join(sub).is_dir() {
                return Err(Failure::Usage(format!(
                    "dataset directory {} not found",
                    dir.join(sub).display()
                )));
            }
        }
    }
    Ok(prepare_data(cfg)?)
}

pub fn print_epoch(label: &str, total: usize, e: &EpochRecord) {
    eprintln!(
        "{label}epoch {}/{total}: val mIoU {:.4}, train mIoU {:.4}, feature cosine {:.3}, confident {:.3}",
        e.epoch, e.val_miou, e.train_miou, e.mean_feature_cosine, e.confident_frac
    );
}

/// Trains one configuration into `dir`, writing the manifest first and
/// again with the elapsed time at the end.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    dir: &Path,
    resume: Option<TrainState>,
    label: &str,
) -> Result<TrainState, Failure> {
    let mut manifest = RunManifest::new(cfg, DatasetDescriptor::of(cfg, data), dir);
    manifest.write(dir)?;
    let start = Instant::now();
    let total = cfg.epochs;
    let mut progress = |e: &EpochRecord| print_epoch(label, total, e);
    let state = train_loop(
        &data.split,
        &data.val,
        cfg,
        LoopOptions {
            out_dir: Some(dir),
            resume,
            stop_after: None,
            on_epoch: Some(&mut progress),
        },
    )?;
    manifest.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    manifest.write(dir)?;
    Ok(state)
}

pub fn train(
    args: &ConfigArgs,
    out: &OutArgs,
    manifest: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let base = manifest
        .map(RunManifest::read)
        .transpose()?
        .map(|m| m.config);
    let cfg = build_config(args, base.as_ref())?;
    let resume_state = match resume {
        Some(p) if !p.is_file() => {
            return Err(Failure::Usage(format!(
                "checkpoint {} not found",
                p.display()
            )))
        }
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let dir = out
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("train-seed{}", cfg.seed)));
    if resume_state.is_none() {
        prepare_run_dir(&dir, out.force)?;
    } else {
        std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    }
    let data = load_data(&cfg)?;
    let state = run_training(&cfg, &data, &dir, resume_state, "")?;
    match state.epoch_log.last() {
        Some(e) => println!(
            "{}: {} epochs, val mIoU {:.4}, train mIoU {:.4}, feature cosine {:.4}",
            dir.display(),
            e.epoch,
            e.val_miou,
            e.train_miou,
            e.mean_feature_cosine
        ),
        None => println!("{}: 0 epochs, initial checkpoint written", dir.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: String,
    split: &'a str,
    scenes: usize,
    miou: f64,
    per_class: Vec<Option<f64>>,
    confident_frac: f64,
    confident_acc: Option<f64>,
    confident_miou: Option<f64>,
    mean_cosine: f64,
    mapped_cosine: f64,
}

pub fn eval(checkpoint: &Path, split: &str, data_dir: Option<&Path>) -> Result<(), Failure> {
    if !checkpoint.is_file() {
        return Err(Failure::Usage(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let state = load_checkpoint(checkpoint)?;
    let cfg = &state.config;
    let scenes: Vec<Scene> = match data_dir {
        Some(dir) => {
            let (i, l) = (dir.join("images"), dir.join("labels"));
            if !i.is_dir() || !l.is_dir() {
                return Err(Failure::Usage(format!(
                    "dataset directory {} needs images/ and labels/",
                    dir.display()
                )));
            }
            load_folder_dataset(&i, &l, cfg.num_classes)?
        }
        None => {
            let d = load_data(cfg)?;
            match split {
                "val" => d.val,
                "train" => d.split.labelled,
                "all" => d.split.labelled.into_iter().chain(d.val).collect(),
                other => {
                    return Err(Failure::Usage(format!(
                        "unknown split `{other}` (use val, train or all)"
                    )))
                }
            }
        }
    };
    let ev = evaluate(&state.model, &scenes, cfg.confidence_threshold)?;
    let out = EvalOutput {
        checkpoint: checkpoint.display().to_string(),
        split: if data_dir.is_some() { "folder" } else { split },
        scenes: scenes.len(),
        miou: ev.miou,
        per_class: ev.per_class,
        confident_frac: ev.confidence.confident_frac,
        confident_acc: ev.confidence.confident_acc,
        confident_miou: ev.confidence.confident_miou,
        mean_cosine: ev.mean_cosine,
        mapped_cosine: ev.mapped_cosine,
    };
    println!("{}", serde_json::to_string(&out).expect("serialises"));
    Ok(())
}

pub fn report(metrics: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let file = if metrics.is_dir() {
        metrics.join("metrics.jsonl")
    } else {
        metrics.to_path_buf()
    };
    if !file.is_file() {
        return Err(Failure::Usage(format!(
            "metrics log {} not found",
            file.display()
        )));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| {
        file.parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    let summary = ccvc::eval::report(&file, &dir)?;
    for f in &summary.files {
        println!("{}", f.display());
    }
    Ok(())
}
