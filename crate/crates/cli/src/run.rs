use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use pccs::data::{generate_synthetic, make_splits, ClassMode, Dataset, Split, SplitManifest};
use pccs::trainer::ablation::{run_ablation, table4_grid};
use pccs::trainer::{checkpoint, evaluate_split, RunOptions, TrainConfig};
use pccs::PccsError;

use crate::{CliError, CliResult};

/// Written to every run directory next to the resolved `config.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: String,
    pub revision: String,
    pub start_unix: u64,
    pub end_unix: u64,
    pub out_dir: String,
    pub data_dir: String,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub toggles: String,
    pub steps: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub fn gen_data(
    out: &Path,
    n: usize,
    classes: ClassMode,
    seed: u64,
    size: usize,
    fraction: f64,
) -> CliResult<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::Usage(format!(
            "--labeled-fraction {fraction} must lie in (0, 1]"
        )));
    }
    let summary =
        generate_synthetic(out, n, classes, size, seed, fraction).map_err(|e| match e {
            PccsError::Domain(m) => CliError::Usage(m),
            other => other.into(),
        })?;
    println!(
        "wrote {} samples ({}x{}, {} classes) to {}",
        summary.n,
        size,
        size,
        summary.num_classes,
        out.display()
    );
    let total: usize = summary.class_histogram.iter().sum();
    for (c, count) in summary.class_histogram.iter().enumerate() {
        println!(
            "  class {c}: {count} px ({:.2}%)",
            100.0 * *count as f64 / total as f64
        );
    }
    for (kind, count) in &summary.kinds {
        println!("  {kind}: {count} images");
    }
    Ok(())
}

/// Reads a configuration file: a JSON object, or `key = value` lines (`#` comments).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let mut config = match path {
        None => TrainConfig::desk(2),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            if text.trim_start().starts_with('{') {
                TrainConfig::from_json(&text)?
            } else {
                let lines: Vec<&str> = text
                    .lines()
                    .map(|l| l.split('#').next().unwrap().trim())
                    .filter(|l| !l.is_empty())
                    .collect();
                let preset = lines
                    .iter()
                    .find_map(|l| {
                        l.strip_prefix("preset")
                            .and_then(|r| r.trim().strip_prefix('='))
                    })
                    .map(str::trim);
                let mut c = TrainConfig::from_json(&match preset {
                    Some(p) => format!("{{\"preset\": \"{p}\"}}"),
                    None => "{}".into(),
                })?;
                for l in lines.iter().filter(|l| !l.starts_with("preset")) {
                    c.apply_override(l)?;
                }
                c
            }
        }
    };
    for o in overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    Ok(config)
}

fn load_splits(data: &Path, splits: Option<&Path>) -> CliResult<SplitManifest> {
    let path = splits.map_or_else(|| data.join("splits.csv"), Path::to_path_buf);
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::Runtime(format!(
            "cannot read split manifest {}: {e}",
            path.display()
        ))
    })?;
    Ok(SplitManifest::from_csv(&text)?)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub splits: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub resume: Option<PathBuf>,
    pub stop_at: Option<u64>,
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let start = now();
    let dataset = Dataset::load(&args.data)?;
    let mut config = load_config(args.config.as_deref(), &args.overrides)?;
    if args.config.is_none() {
        config.net.num_classes = dataset.num_classes.max(2);
    }
    config.paths.data = Some(args.data.display().to_string());
    config.paths.out = Some(args.out.display().to_string());
    let splits = load_splits(&args.data, args.splits.as_deref())?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&config).map_err(PccsError::from)?,
    )?;
    fs::write(args.out.join("splits.csv"), splits.to_csv())?;
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume.clone(),
        stop_at: args.stop_at,
    };
    let outcome = pccs::trainer::train(&config, &dataset, &splits, &opts)?;
    if let Some(test) = &outcome.test {
        println!(
            "test metrics ({} images):\n{}",
            test.num_images,
            test.to_table()
        );
    } else {
        println!("stopped at step {} of {}", outcome.state.step, config.t_max);
    }
    let manifest = RunManifest {
        command: "train".into(),
        config_path: args.config.map(|p| p.display().to_string()),
        config_hash: config.hash(),
        revision: revision(),
        start_unix: start,
        end_unix: now(),
        out_dir: args.out.display().to_string(),
        data_dir: args.data.display().to_string(),
        labeled_fraction: splits.labeled_fraction,
        seed: config.seed,
        toggles: config.toggles.label(),
        steps: outcome.state.step,
    };
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(PccsError::from)?,
    )?;
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    split: Split,
    splits: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    if !ckpt.join("manifest.json").exists() {
        return Err(CliError::Runtime(format!(
            "no checkpoint at {}",
            ckpt.display()
        )));
    }
    let (_, state) = checkpoint::load_any(ckpt)?;
    let dataset = Dataset::load(data)?;
    let splits = load_splits(data, splits)?;
    let report = evaluate_split(&state.student, &dataset, &splits, split)?;
    let name = match split {
        Split::Val => "val",
        Split::Test => "test",
    };
    let dest = out.map_or_else(
        || ckpt.join(format!("{name}_metrics.csv")),
        Path::to_path_buf,
    );
    fs::write(&dest, report.to_csv())?;
    println!(
        "{name} split, {} images, per-image 2D metrics",
        report.num_images
    );
    print!("{}", report.to_table());
    Ok(())
}

pub fn ablate(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    fractions: &[f64],
    seeds: &[u64],
    sets: &[String],
) -> CliResult<()> {
    let start = now();
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::Usage(
            "labeled fractions must lie in (0, 1]".into(),
        ));
    }
    let dataset = Dataset::load(data)?;
    let mut base = load_config(config, sets)?;
    if config.is_none() {
        base.net.num_classes = dataset.num_classes.max(2);
    }
    // Fail early on an unusable split rather than halfway through the grid.
    let ids = dataset.ids();
    for &f in fractions {
        make_splits(&ids, None, f, 0)?;
    }
    fs::create_dir_all(out)?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&base).map_err(PccsError::from)?,
    )?;
    let table = run_ablation(&base, &dataset, &table4_grid(), fractions, seeds, Some(out))?;
    print!("{}", table.to_csv());
    let manifest = RunManifest {
        command: "ablate".into(),
        config_path: config.map(|p| p.display().to_string()),
        config_hash: base.hash(),
        revision: revision(),
        start_unix: start,
        end_unix: now(),
        out_dir: out.display().to_string(),
        data_dir: data.display().to_string(),
        labeled_fraction: fractions[0],
        seed: seeds[0],
        toggles: "table4".into(),
        steps: base.t_max,
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(PccsError::from)?,
    )?;
    Ok(())
}
