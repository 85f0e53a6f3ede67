use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dlsc::checkpoint::{load_checkpoint, save_checkpoint};
use dlsc::data::{synth_gmm, write_csv, Dataset, Scaler};
use dlsc::eval::{assign, export_embeddings, ClusterReport};
use dlsc::losses::Ablation;
use dlsc::nets::generator_forward;
use dlsc::prior::{compose, one_hot, LatentBatch};
use dlsc::tensor::Array;
use dlsc::trainer::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{load_dataset, RunConfig};
use crate::error::{io_err, CliError};
use crate::manifest::RunManifest;

pub const OUT_ENV: &str = "DLSC_OUT";

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SCALER_FILE: &str = "scaler.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.dlsc";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn run_name(config: Option<&Path>, suffix: &str, seed: u64) -> String {
    let stem = config
        .and_then(|p| p.file_stem())
        .map_or("run".to_string(), |s| s.to_string_lossy().into_owned());
    format!("{stem}{suffix}-seed{seed}")
}

fn report_for(trainer: &Trainer, ds: &Dataset) -> Result<Option<ClusterReport>, CliError> {
    let Some(labels) = &ds.labels else { return Ok(None) };
    let pred = assign(&trainer.e, &ds.x)?;
    Ok(Some(ClusterReport::new(&pred, labels, trainer.config.clusters)?))
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub embeddings: bool,
    pub quiet: bool,
}

/// Outcome of one training run in a run directory.
pub struct RunResult {
    pub dir: PathBuf,
    pub report: Option<ClusterReport>,
}

/// Trains, writing config, manifest and scaler before the first step and
/// checkpoint, history and report after the last.
pub fn cmd_train(args: &TrainArgs) -> Result<RunResult, CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let ds = load_dataset(&cfg.data)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(run_name(args.config.as_deref(), "", cfg.trainer.seed)));
    train_in(&cfg, &ds, &dir, args.resume.as_deref(), args.embeddings, args.quiet)
}

fn train_in(
    cfg: &RunConfig,
    ds: &Dataset,
    dir: &Path,
    resume: Option<&Path>,
    embeddings: bool,
    quiet: bool,
) -> Result<RunResult, CliError> {
    let tc = cfg.train_config();
    let mut trainer = match resume {
        Some(p) => {
            let mut t = load_checkpoint(p)?;
            let mut expected = tc.clone();
            expected.total_steps = t.config.total_steps;
            if t.config != expected {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different configuration",
                    p.display()
                )));
            }
            t.config.total_steps = tc.total_steps;
            t
        }
        None => Trainer::new(tc, ds.dim(), ds.len())?,
    };
    if trainer.data_dim != ds.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features, dataset has {}",
            trainer.data_dim,
            ds.dim()
        )));
    }

    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    write(&dir.join(MANIFEST_FILE), RunManifest::new(cfg, ds).to_toml())?;
    write(&dir.join(SCALER_FILE), toml::to_string(&ds.scaler).expect("scaler serializes"))?;

    let mut metrics = String::from("step,acc,nmi,ari,purity\n");
    let ckpt = dir.join(CHECKPOINT_FILE);
    // features only: labels stay in `ds` for the evaluation hook
    let x = ds.x.clone();
    let result = trainer.run(&x, |t| {
        save_checkpoint(&ckpt, t)?;
        if let Some(r) = report_for(t, ds).map_err(|e| dlsc::Error::Usage(e.to_string()))? {
            let _ = writeln!(metrics, "{},{},{},{},{}", t.step, r.acc, r.nmi, r.ari, r.purity);
            if !quiet {
                println!("step {:>7}  acc {:.4}  nmi {:.4}  ari {:.4}", t.step, r.acc, r.nmi, r.ari);
            }
        } else if !quiet {
            println!("step {:>7}", t.step);
        }
        Ok(())
    });
    write(&dir.join(HISTORY_FILE), trainer.history.to_csv())?;
    write(&dir.join(METRICS_FILE), &metrics)?;
    result?;

    save_checkpoint(&ckpt, &trainer)?;
    let report = report_for(&trainer, ds)?;
    if let Some(r) = &report {
        write(&dir.join(REPORT_FILE), r.to_text())?;
    }
    if embeddings {
        export_embeddings(&trainer.e, &ds.x, ds.labels.as_deref(), dir.join(EMBEDDINGS_FILE))?;
    }
    Ok(RunResult {
        dir: dir.to_path_buf(),
        report,
    })
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the run directory's `config.toml`.
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub report: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<ClusterReport, CliError> {
    let trainer = load_checkpoint(&args.checkpoint)?;
    let run_dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let config = args.config.clone().or_else(|| {
        let p = run_dir.join(CONFIG_FILE);
        p.is_file().then_some(p)
    });
    let cfg = RunConfig::load(config.as_deref(), &args.overrides)?;
    let ds = load_dataset(&cfg.data)?;
    if ds.labels.is_none() {
        return Err(CliError::Data("dataset has no labels; metrics need ground truth".into()));
    }
    if ds.dim() != trainer.data_dim {
        return Err(CliError::Data(format!(
            "checkpoint expects {} features, dataset has {}",
            trainer.data_dim,
            ds.dim()
        )));
    }
    let report = report_for(&trainer, &ds)?.expect("labels checked");
    println!("{:>8} {:>8} {:>8} {:>8}", "acc", "nmi", "ari", "purity");
    println!("{:>8.4} {:>8.4} {:>8.4} {:>8.4}", report.acc, report.nmi, report.ari, report.purity);
    let path = args.report.clone().unwrap_or_else(|| run_dir.join(REPORT_FILE));
    write(&path, report.to_text())?;
    Ok(report)
}

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    /// `Ok(report)` when training finished; `Err(status)` otherwise.
    pub outcome: Result<Option<(f64, f64, f64)>, String>,
}

pub const ABLATION_FILE: &str = "ablation.csv";

/// Runs the full setting and each single-term removal with shared seeds.
/// A failed run is recorded and the grid continues.
pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>, CliError> {
    let base = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let ds = load_dataset(&base.data)?;
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(run_name(args.config.as_deref(), "-ablation", base.trainer.seed)));
    let mut settings: Vec<(String, Option<Ablation>)> = vec![("full".into(), None)];
    settings.extend(Ablation::ALL.iter().map(|a| (format!("no-{}", a.label()), Some(*a))));

    let mut rows = Vec::new();
    for (name, removed) in settings {
        let mut cfg = base.clone();
        if let Some(a) = removed {
            if !cfg.trainer.ablate.contains(&a) {
                cfg.trainer.ablate.push(a);
            }
        }
        let outcome = match train_in(&cfg, &ds, &root.join(&name), None, false, true) {
            Ok(r) => Ok(r.report.map(|r| (r.acc, r.nmi, r.ari))),
            Err(CliError::Divergence(_)) => Err("did not converge".to_string()),
            Err(e) => Err(format!("failed: {e}")),
        };
        let row = AblationRow { setting: name, outcome };
        println!("{}", format_row(&row));
        rows.push(row);
    }
    let mut csv = String::from("setting,status,acc,nmi,ari\n");
    for r in &rows {
        match &r.outcome {
            Ok(Some((a, n, ar))) => {
                let _ = writeln!(csv, "{},ok,{a},{n},{ar}", r.setting);
            }
            Ok(None) => {
                let _ = writeln!(csv, "{},ok,,,", r.setting);
            }
            Err(s) => {
                let _ = writeln!(csv, "{},\"{}\",,,", r.setting, s.replace('"', "'"));
            }
        }
    }
    write(&root.join(ABLATION_FILE), csv)?;
    Ok(rows)
}

fn format_row(r: &AblationRow) -> String {
    match &r.outcome {
        Ok(Some((a, n, ar))) => format!("{:<8} acc {a:.4}  nmi {n:.4}  ari {ar:.4}", r.setting),
        Ok(None) => format!("{:<8} finished (no labels)", r.setting),
        Err(s) => format!("{:<8} {s}", r.setting),
    }
}

pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub cluster: usize,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Samples `count` points from one cluster. Output is in data units when
/// the run directory has a `scaler.toml`, model units otherwise.
pub fn cmd_generate(args: &GenerateArgs) -> Result<usize, CliError> {
    let t = load_checkpoint(&args.checkpoint)?;
    let (k, dn, d) = (t.config.clusters, t.config.latent_dim, t.data_dim);
    if args.cluster >= k {
        return Err(CliError::Config(format!("cluster {} outside 0..{k}", args.cluster)));
    }
    let scaler_path = args.checkpoint.parent().unwrap_or(Path::new(".")).join(SCALER_FILE);
    let scaler: Scaler = match fs::read_to_string(&scaler_path) {
        Ok(text) => toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", scaler_path.display())))?,
        Err(_) => Scaler::identity(d),
    };
    let mut out: String = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    if args.count > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let normal = Normal::new(0.0, t.config.sigma).expect("validated sigma");
        let zn = Array::new(
            vec![args.count, dn],
            (0..args.count * dn).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        let batch = LatentBatch::new(one_hot(&vec![args.cluster; args.count], k), zn)?;
        let x = generator_forward(&t.g.frozen(), &compose(&batch)?)?;
        let raw = scaler.invert(x.value());
        for i in 0..args.count {
            let row: Vec<String> = raw.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    write(&args.out, out)?;
    Ok(args.count)
}

pub struct SynthArgs {
    pub clusters: usize,
    pub dim: usize,
    pub per_cluster: usize,
    pub mean_scale: f64,
    pub std: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<usize, CliError> {
    let ds = synth_gmm(args.clusters, args.dim, args.per_cluster, args.mean_scale, args.std, args.seed)
        .map_err(|e| match e {
            dlsc::Error::Config(m) => CliError::Config(m),
            other => other.into(),
        })?;
    write_csv(&ds, &args.out).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(ds.len())
}
