use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pccs::losses::lambda_c_schedule;
use pccs::trainer::ablation::{mean_std, AblationTable};
use pccs::trainer::{read_loss_log, LossRecord, TrainConfig};

use crate::plot::{line_plot, Series, PALETTE};
use crate::run::RunManifest;
use crate::{CliError, CliResult};

type Column = Box<dyn Fn(&RunSummary) -> String>;

struct RunSummary {
    name: String,
    losses: Vec<LossRecord>,
    /// `(dice, jaccard, hd95, assd)` of the mean row of `final_metrics.csv`.
    test: Option<[Option<f64>; 4]>,
    labeled_fraction: Option<f64>,
    toggles: Option<String>,
    config: Option<TrainConfig>,
}

fn read_mean_row(path: &Path) -> Option<[Option<f64>; 4]> {
    let text = fs::read_to_string(path).ok()?;
    let row = text.lines().find(|l| l.starts_with("mean,"))?;
    let v: Vec<Option<f64>> = row.split(',').skip(1).map(|x| x.parse().ok()).collect();
    (v.len() == 4).then(|| [v[0], v[1], v[2], v[3]])
}

fn load_run(dir: &Path) -> CliResult<RunSummary> {
    let text = fs::read_to_string(dir.join("losses.csv"))?;
    let manifest: Option<RunManifest> = fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let config: Option<TrainConfig> = fs::read_to_string(dir.join("config.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let name = dir.file_name().map_or_else(
        || dir.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    Ok(RunSummary {
        name,
        losses: read_loss_log(&text)?,
        test: read_mean_row(&dir.join("final_metrics.csv")),
        labeled_fraction: manifest.as_ref().map(|m| m.labeled_fraction),
        toggles: manifest
            .map(|m| m.toggles)
            .or_else(|| config.as_ref().map(|c| c.toggles.label())),
        config,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

/// Emits loss curves, the consistency-weight schedule, a comparison table and a labelled
/// fraction plot for run directories, and a toggle-table summary for ablation directories.
pub fn report(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut runs = Vec::new();
    let mut ablations = Vec::new();
    for p in inputs {
        if p.join("ablation.json").exists() {
            let t: AblationTable = serde_json::from_str(&fs::read_to_string(
                p.join("ablation.json"),
            )?)
            .map_err(|e| CliError::Runtime(format!("bad ablation.json in {}: {e}", p.display())))?;
            ablations.push(t);
        } else if p.join("losses.csv").exists() {
            runs.push(load_run(p)?);
        }
    }
    if runs.is_empty() && ablations.is_empty() {
        return Err(CliError::Runtime(
            "no run or ablation directories found".into(),
        ));
    }
    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;

    for run in &runs {
        let curve = |f: fn(&LossRecord) -> f64| -> Vec<(f64, f64)> {
            run.losses.iter().map(|r| (r.step as f64, f(r))).collect()
        };
        let series = vec![
            Series {
                points: curve(|r| r.bundle.l_total),
                color: PALETTE[0],
                markers: false,
            },
            Series {
                points: curve(|r| r.bundle.l_sup),
                color: PALETTE[1],
                markers: false,
            },
            Series {
                points: curve(|r| r.bundle.l_c),
                color: PALETTE[2],
                markers: false,
            },
            Series {
                points: curve(|r| r.bundle.lambda_aux * r.bundle.l_aux),
                color: PALETTE[3],
                markers: false,
            },
            Series {
                points: curve(|r| r.bundle.lambda_pc * r.bundle.l_pc),
                color: PALETTE[4],
                markers: false,
            },
        ];
        line_plot(&series, &plots.join(format!("{}_losses.png", run.name)))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{}: {} steps logged", run.name, run.losses.len());
    }

    if let Some(first) = runs.first() {
        let (t_max, t_ramp) = first.config.as_ref().map_or(
            (first.losses.len() as u64, first.losses.len() as u64),
            |c| (c.t_max, c.t_ramp),
        );
        let points: Vec<(f64, f64)> = (0..=200)
            .map(|k| k * t_max.max(1) / 200)
            .map(|t| (t as f64, lambda_c_schedule(t, t_ramp)))
            .collect();
        line_plot(
            &[Series {
                points,
                color: PALETTE[0],
                markers: false,
            }],
            &plots.join("lambda_c.png"),
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }

    if runs.len() >= 2 {
        let mut csv = String::from("metric");
        for r in &runs {
            let _ = write!(csv, ",{}", r.name);
        }
        csv.push('\n');
        let rows: [(&str, Column); 6] = [
            ("labeled_fraction", Box::new(|r| fmt(r.labeled_fraction))),
            (
                "toggles",
                Box::new(|r| r.toggles.clone().unwrap_or_else(|| "NA".into())),
            ),
            ("dice", Box::new(|r| fmt(r.test.and_then(|t| t[0])))),
            ("jaccard", Box::new(|r| fmt(r.test.and_then(|t| t[1])))),
            ("hd95", Box::new(|r| fmt(r.test.and_then(|t| t[2])))),
            ("assd", Box::new(|r| fmt(r.test.and_then(|t| t[3])))),
        ];
        for (name, f) in &rows {
            csv.push_str(name);
            for r in &runs {
                let _ = write!(csv, ",{}", f(r));
            }
            csv.push('\n');
        }
        fs::write(out.join("comparison.csv"), &csv)?;
        print!("{csv}");

        let mut by_fraction: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
        for r in &runs {
            if let (Some(f), Some(d)) = (r.labeled_fraction, r.test.and_then(|t| t[0])) {
                by_fraction
                    .entry(format!("{f:.4}"))
                    .or_insert((f, vec![]))
                    .1
                    .push(d);
            }
        }
        if !by_fraction.is_empty() {
            let mut table = String::from("labeled_fraction,dice_mean,dice_std,runs\n");
            let mut points = Vec::new();
            let mut ordered: Vec<_> = by_fraction.into_values().collect();
            ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (f, dice) in ordered {
                let (m, s) = mean_std(&dice);
                let _ = writeln!(table, "{f},{m:.4},{s:.4},{}", dice.len());
                points.push((f, m));
            }
            fs::write(out.join("fraction_vs_dice.csv"), &table)?;
            line_plot(
                &[Series {
                    points,
                    color: PALETTE[0],
                    markers: true,
                }],
                &plots.join("fraction_vs_dice.png"),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }

    for (k, table) in ablations.iter().enumerate() {
        let name = if ablations.len() == 1 {
            "ablation_summary.csv".to_string()
        } else {
            format!("ablation_summary_{k}.csv")
        };
        fs::write(out.join(&name), table.to_csv())?;
        println!(
            "{name}: {} arms x {} fractions",
            table.rows.len(),
            table.fractions.len()
        );
        print!("{}", table.to_csv());
    }
    Ok(())
}
