//! Grid sweeps: one training run per grid cell and seed, in parallel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;

use ffs_core::experiment::run_experiment;
use ffs_core::experiment::ExperimentConfig;

use crate::commands::{load_config, RESOLVED};
use crate::config::{config_err, RunConfig};

/// Keys a grid file may vary. `seeds` sets both the data and training seed.
pub const GRID_KEYS: &[&str] = &["k", "s", "tau", "M", "H", "W", "alpha", "seeds"];

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Varied keys with their values as written, in file order.
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
}

impl Grid {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        let mut seeds = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, values)) = line.split_once('=') else {
                return Err(config_err(format!("grid line {}: expected 'key = v1, v2, ...'", idx + 1)));
            };
            let key = key.trim();
            if !GRID_KEYS.contains(&key) {
                return Err(config_err(format!("grid line {}: unknown grid key '{key}'", idx + 1)));
            }
            if key == "seeds" && seeds.is_some() || axes.iter().any(|(k, _)| k == key) {
                return Err(config_err(format!("grid line {}: '{key}' given twice", idx + 1)));
            }
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(config_err(format!("grid line {}: empty value for '{key}'", idx + 1)));
            }
            if key == "seeds" {
                let parsed = values
                    .iter()
                    .map(|v| v.parse::<u64>().map_err(|e| config_err(format!("grid line {}: seed '{v}': {e}", idx + 1))))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                seeds = Some(parsed);
            } else {
                axes.push((key.to_string(), values));
            }
        }
        Ok(Self { axes, seeds: seeds.unwrap_or_else(|| vec![0]) })
    }

    /// Every combination of axis values, the last axis varying fastest.
    pub fn cells(&self) -> Vec<Vec<&str>> {
        let mut cells: Vec<Vec<&str>> = vec![Vec::new()];
        for (_, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push(v.as_str());
                    next
                }))
                .collect();
        }
        cells
    }
}

struct Job {
    cell: usize,
    values: Vec<String>,
    seed: u64,
    cfg: RunConfig,
}

fn thread_count() -> usize {
    std::env::var("FFS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run(config: Option<&Path>, grid_path: &Path, out: &Path) -> anyhow::Result<()> {
    let base = load_config(config)?;
    let text = fs::read_to_string(grid_path).with_context(|| format!("reading grid {}", grid_path.display()))?;
    let grid = Grid::parse(&text)?;

    let mut jobs = Vec::new();
    for (cell, values) in grid.cells().into_iter().enumerate() {
        for &seed in &grid.seeds {
            let mut cfg = base.clone();
            for ((key, _), v) in grid.axes.iter().zip(&values) {
                cfg.set(key, v).map_err(config_err)?;
            }
            cfg.data.seed = seed;
            cfg.train.seed = seed;
            cfg.validate().map_err(|e| config_err(format!("cell {cell}, seed {seed}: {}", e.0)))?;
            jobs.push(Job { cell, values: values.iter().map(|v| v.to_string()).collect(), seed, cfg });
        }
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_count()).build()?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|job| -> anyhow::Result<String> {
                let exp = ExperimentConfig { data: job.cfg.data.clone(), train: job.cfg.train };
                let outcome = run_experiment(&exp).with_context(|| format!("cell {} seed {}", job.cell, job.seed))?;
                let dir = out.join(format!("cell-{:03}-seed-{}", job.cell, job.seed));
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                fs::write(dir.join("metrics.json"), outcome.metrics.to_json())?;
                fs::write(dir.join(RESOLVED), job.cfg.to_text())?;
                let m = &outcome.metrics;
                let mut row = job.values.join(",");
                if !row.is_empty() {
                    row.push(',');
                }
                write!(row, "{},{:?},{:?},{:?}", job.seed, m.fpr95, m.auroc, m.inlier_accuracy).expect("string write");
                Ok(row)
            })
            .collect::<anyhow::Result<Vec<String>>>()
    })?;

    let mut csv = String::new();
    for (key, _) in &grid.axes {
        write!(csv, "{key},").expect("string write");
    }
    csv.push_str("seed,fpr95,auroc,inlier_accuracy\n");
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    fs::write(out.join("results.csv"), csv).with_context(|| format!("writing {}", out.join("results.csv").display()))?;
    let mut echo = base.to_text();
    write!(echo, "# grid {}\n{text}", grid_path.display()).expect("string write");
    fs::write(out.join(RESOLVED), echo)?;
    Ok(())
}
