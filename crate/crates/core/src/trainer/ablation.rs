//! Toggle-grid ablations over labelled fractions and seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, RunOptions, TrainConfig};
use crate::data::{make_splits, Dataset};
use crate::error::{domain, Result};
use crate::losses::Toggles;

/// The six toggle rows of the published ablation table, in order.
pub fn table4_grid() -> Vec<Toggles> {
    let t = |l_con, l_u, l_aux, l_pc| Toggles {
        l_con,
        l_u,
        l_aux,
        l_pc,
    };
    vec![
        t(true, false, false, false),
        t(false, true, false, false),
        t(true, true, false, false),
        t(false, false, true, true),
        t(true, true, true, false),
        t(true, true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub toggles: Toggles,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub dice: f64,
    pub jaccard: f64,
}

/// Trains one arm on a split drawn with `seed` and returns its mean test metrics.
pub fn run_arm(
    base: &TrainConfig,
    dataset: &Dataset,
    toggles: Toggles,
    labeled_fraction: f64,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ArmResult> {
    let mut config = base.clone();
    config.toggles = toggles;
    config.seed = seed;
    let ids = dataset.ids();
    let strata = dataset.strata(&ids);
    let splits = make_splits(&ids, strata.as_deref(), labeled_fraction, seed)?;
    let opts = RunOptions {
        out_dir: out_dir.map(Path::to_path_buf),
        ..RunOptions::default()
    };
    let outcome = train(&config, dataset, &splits, &opts)?;
    let test = outcome
        .test
        .ok_or_else(|| crate::PccsError::Domain("dataset has no test split".into()))?;
    Ok(ArmResult {
        toggles,
        labeled_fraction,
        seed,
        dice: test.mean.dice,
        jaccard: test.mean.jaccard,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub jaccard_mean: f64,
    pub jaccard_std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    /// One cell per labelled fraction.
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fractions: Vec<f64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<ArmResult>,
}

impl AblationTable {
    /// Groups run results by toggles (first-seen order) and fraction.
    pub fn from_runs(fractions: &[f64], runs: Vec<ArmResult>) -> Self {
        let mut arms: Vec<Toggles> = Vec::new();
        for r in &runs {
            if !arms.contains(&r.toggles) {
                arms.push(r.toggles);
            }
        }
        let rows = arms
            .into_iter()
            .map(|toggles| {
                let cells = fractions
                    .iter()
                    .map(|&f| {
                        let sel: Vec<&ArmResult> = runs
                            .iter()
                            .filter(|r| r.toggles == toggles && r.labeled_fraction == f)
                            .collect();
                        let (dice_mean, dice_std) =
                            mean_std(&sel.iter().map(|r| r.dice).collect::<Vec<_>>());
                        let (jaccard_mean, jaccard_std) =
                            mean_std(&sel.iter().map(|r| r.jaccard).collect::<Vec<_>>());
                        AblationCell {
                            dice_mean,
                            dice_std,
                            jaccard_mean,
                            jaccard_std,
                            runs: sel.len(),
                        }
                    })
                    .collect();
                AblationRow { toggles, cells }
            })
            .collect();
        Self {
            fractions: fractions.to_vec(),
            rows,
            runs,
        }
    }

    /// Toggle columns (1/0) then mean and std of Dice and Jaccard (in percent) per fraction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("l_con,l_u,l_aux,l_pc");
        for f in &self.fractions {
            let p = f * 100.0;
            let _ = write!(
                out,
                ",dice_mean@{p}%,dice_std@{p}%,jaccard_mean@{p}%,jaccard_std@{p}%"
            );
        }
        out.push('\n');
        for row in &self.rows {
            let t = row.toggles;
            let _ = write!(
                out,
                "{},{},{},{}",
                u8::from(t.l_con),
                u8::from(t.l_u),
                u8::from(t.l_aux),
                u8::from(t.l_pc)
            );
            for c in &row.cells {
                let _ = write!(
                    out,
                    ",{:.2},{:.2},{:.2},{:.2}",
                    100.0 * c.dice_mean,
                    100.0 * c.dice_std,
                    100.0 * c.jaccard_mean,
                    100.0 * c.jaccard_std
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every `(toggles, fraction, seed)` combination with otherwise identical settings.
/// Per-run outputs go to `out_dir/<arm>/f<fraction>/seed<seed>` when a directory is given.
pub fn run_ablation(
    base: &TrainConfig,
    dataset: &Dataset,
    grid: &[Toggles],
    fractions: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if grid.is_empty() || fractions.is_empty() || seeds.is_empty() {
        return domain("ablation needs at least one arm, fraction and seed");
    }
    let mut runs = Vec::new();
    for &toggles in grid {
        for &f in fractions {
            for &seed in seeds {
                let dir = out_dir.map(|d| {
                    d.join(toggles.label())
                        .join(format!("f{f}"))
                        .join(format!("seed{seed}"))
                });
                log::info!("ablation arm {} fraction {f} seed {seed}", toggles.label());
                runs.push(run_arm(base, dataset, toggles, f, seed, dir.as_deref())?);
            }
        }
    }
    let table = AblationTable::from_runs(fractions, runs);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.csv"), table.to_csv())?;
        std::fs::write(
            dir.join("ablation.json"),
            serde_json::to_string_pretty(&table)?,
        )?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_six_distinct_rows() {
        let g = table4_grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[5], Toggles::ALL);
        for (i, a) in g.iter().enumerate() {
            assert!(g[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn table_groups_runs() {
        let r = |toggles, f, seed, dice| ArmResult {
            toggles,
            labeled_fraction: f,
            seed,
            dice,
            jaccard: dice / 2.0,
        };
        let runs = vec![
            r(Toggles::ALL, 0.1, 0, 0.5),
            r(Toggles::ALL, 0.1, 1, 0.7),
            r(Toggles::NONE, 0.1, 0, 0.4),
            r(Toggles::NONE, 0.1, 1, 0.4),
        ];
        let t = AblationTable::from_runs(&[0.1], runs);
        assert_eq!(t.rows.len(), 2);
        let c = &t.rows[0].cells[0];
        assert!((c.dice_mean - 0.6).abs() < 1e-12);
        assert!((c.dice_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.rows[1].cells[0].dice_std, 0.0);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("l_con,l_u,l_aux,l_pc,dice_mean@10%"));
    }
}
