use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::run::{run_scenario, CoreOutput, RoundRecord};
use super::scenario::{Ablation, Scenario};
use super::HarnessError;

pub const CSV_HEADER: &str = "round,accuracy,mini_rounds,byz_fraction,ablation";

/// Accuracy-per-round series. `accuracy` is test-split accuracy.
pub fn records_csv(scenario: &Scenario, records: &[RoundRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{:.6},{},{},{}",
            r.round,
            r.test_accuracy,
            r.mini_rounds,
            scenario.byz_cone_fraction,
            scenario.ablation.as_str()
        )
        .unwrap();
    }
    out
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: u64,
    pub accuracy: f64,
    pub mini_rounds: u32,
    pub byz_fraction: f64,
    pub ablation: String,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(HarnessError::Config("missing CSV header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || HarnessError::Config(format!("bad CSV row {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(CsvRow {
                round: f[0].parse().map_err(|_| bad())?,
                accuracy: f[1].parse().map_err(|_| bad())?,
                mini_rounds: f[2].parse().map_err(|_| bad())?,
                byz_fraction: f[3].parse().map_err(|_| bad())?,
                ablation: f[4].to_string(),
            })
        })
        .collect()
}

/// Scenarios for every `(fraction, ablation)` pair; the fraction applies to
/// both compute nodes and sellers.
pub fn ablation_grid(base: &Scenario, fractions: &[f64], ablations: &[Ablation]) -> Vec<Scenario> {
    let mut out = Vec::new();
    for &f in fractions {
        for &a in ablations {
            let mut s = base.clone();
            s.byz_cone_fraction = f;
            s.byz_seller_fraction = f;
            s.ablation = a;
            s.name = format!(
                "{}-byz{:02}-{}",
                base.name,
                (f * 100.0).round() as u32,
                a.as_str()
            );
            out.push(s);
        }
    }
    out
}

/// A grid file: sweep axes plus a base scenario under `[base]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default = "default_ablations")]
    pub ablations: Vec<Ablation>,
    /// Empty means the base seed only.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: Scenario,
}

fn default_ablations() -> Vec<Ablation> {
    vec![Ablation::Full, Ablation::NoKrum, Ablation::NoYoda]
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<GridSpec, HarnessError> {
        let g: GridSpec = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        g.base.validate()?;
        Ok(g)
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::new();
        for &seed in &seeds {
            let mut base = self.base.clone();
            base.seed = seed;
            if self.seeds.len() > 1 {
                base.name = format!("{}-seed{seed}", base.name);
            }
            out.extend(ablation_grid(&base, &self.fractions, &self.ablations));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub name: String,
    pub csv_path: Option<PathBuf>,
    pub final_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridReport {
    pub entries: Vec<GridEntry>,
}

impl GridReport {
    pub fn failures(&self) -> impl Iterator<Item = &GridEntry> {
        self.entries.iter().filter(|e| e.error.is_some())
    }
}

/// Runs scenarios on the scoped worker pool; results come back in input
/// order regardless of scheduling.
pub fn run_parallel(scenarios: &[Scenario]) -> Vec<Result<CoreOutput, HarnessError>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(scenarios.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CoreOutput, HarnessError>>>> =
        Mutex::new((0..scenarios.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                let r = run_scenario(&scenarios[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every scenario ran"))
        .collect()
}

/// Writes `<name>.csv` per scenario into `out_dir`. A failing scenario is
/// recorded in the report and the rest still run.
pub fn run_experiment_grid(
    scenarios: &[Scenario],
    out_dir: &Path,
) -> Result<GridReport, HarnessError> {
    if scenarios.is_empty() {
        return Ok(GridReport::default());
    }
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(scenarios.len());
    for (s, result) in scenarios.iter().zip(run_parallel(scenarios)) {
        let entry = match result {
            Ok(out) => {
                let path = out_dir.join(format!("{}.csv", s.name));
                std::fs::write(&path, records_csv(s, &out.records))?;
                GridEntry {
                    name: s.name.clone(),
                    csv_path: Some(path),
                    final_accuracy: Some(out.final_test_accuracy),
                    error: None,
                }
            }
            Err(e) => GridEntry {
                name: s.name.clone(),
                csv_path: None,
                final_accuracy: None,
                error: Some(e.to_string()),
            },
        };
        entries.push(entry);
    }
    Ok(GridReport { entries })
}
