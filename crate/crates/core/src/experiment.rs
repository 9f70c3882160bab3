//! Ablation and labeled-budget experiments with CSV/markdown output.
//!
//! A run trains every `(budget, seed, variant)` combination on one training
//! pool, evaluates on a disjoint labeled test set and appends one CSV row per
//! model as soon as it finishes. The result file therefore always holds a
//! valid prefix, even if the process dies half way.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::MetricReport;
use crate::model::{equivariance_gap, ModelConfig, SegModel};
use crate::trainer::{self, stream_rng, RegularizationScope, TrainConfig, TrainHistory};
use crate::transform::TransformOp;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SWEEP_FILE: &str = "sweep.csv";

const STREAM_DATA_TRAIN: u64 = 10;
const STREAM_DATA_TEST: u64 = 11;
const STREAM_SPLIT: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SupervisedOnly,
    SupervisedWithReg,
    MethodA,
    MethodB,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SupervisedOnly,
        Variant::SupervisedWithReg,
        Variant::MethodA,
        Variant::MethodB,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SupervisedOnly => "supervised_only",
            Variant::SupervisedWithReg => "supervised_with_reg",
            Variant::MethodA => "method_a",
            Variant::MethodB => "method_b",
            Variant::Full => "full",
        }
    }

    /// Whether the variant sees the unlabeled part of the pool.
    pub fn uses_unlabeled(self) -> bool {
        matches!(self, Variant::MethodA | Variant::MethodB | Variant::Full)
    }

    /// The variant's switches applied on top of `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (scope, transform, noise) = match self {
            Variant::SupervisedOnly => (RegularizationScope::None, true, true),
            Variant::SupervisedWithReg => (RegularizationScope::LabeledOnly, true, true),
            Variant::MethodA => (RegularizationScope::All, false, true),
            Variant::MethodB => (RegularizationScope::All, true, false),
            Variant::Full => (RegularizationScope::All, true, true),
        };
        cfg.regularization_scope = scope;
        cfg.enable_transform_consistency = transform;
        cfg.enable_noise_dropout = noise;
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n_train: usize,
        n_test: usize,
        artifact_level: f64,
        data_seed: u64,
    },
    Directory {
        train_images: PathBuf,
        train_masks: PathBuf,
        test_images: PathBuf,
        test_masks: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            n_train: 500,
            n_test: 100,
            artifact_level: 0.3,
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub labeled: Vec<usize>,
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub overwrite: bool,
    /// Give labeled-only variants as many iterations as the pooled variants.
    pub match_iterations: bool,
    /// Held-out images used for the equivariance gap column.
    pub gap_images: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            labeled: vec![25],
            variants: vec![Variant::SupervisedOnly, Variant::Full],
            model: ModelConfig {
                base_channels: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig::for_epochs(60),
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs/experiment"),
            overwrite: false,
            match_iterations: true,
            gap_images: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if self.labeled.is_empty() {
            return Err(Error::Config("at least one labeled budget is required".into()));
        }
        if let Some(&b) = self.labeled.iter().find(|&&b| b == 0 || b > pool_size) {
            return Err(Error::Config(format!(
                "labeled budget {b} outside 1..={pool_size}"
            )));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Variant,
    pub labeled: usize,
    pub unlabeled: usize,
    pub seed: u64,
    pub ja: f64,
    pub di: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
    pub n_images: usize,
    pub equivariance_gap: f64,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn report(&self) -> MetricReport {
        MetricReport {
            ja: self.ja,
            di: self.di,
            ac: self.ac,
            se: self.se,
            sp: self.sp,
            n_images: self.n_images,
        }
    }
}

/// Training pool (with masks) and test set for a data source.
pub fn prepare_data(source: &DataSource, size: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match source {
        DataSource::Synthetic {
            n_train,
            n_test,
            artifact_level,
            data_seed,
        } => {
            let train = data::generate_dataset(
                &mut stream_rng(*data_seed, STREAM_DATA_TRAIN, 0),
                *n_train,
                size,
                *artifact_level,
            )?;
            let mut test = data::generate_dataset(
                &mut stream_rng(*data_seed, STREAM_DATA_TEST, 0),
                *n_test,
                size,
                *artifact_level,
            )?;
            for s in &mut test {
                s.id = s.id.replace("synth-", "test-");
            }
            Ok((train, test))
        }
        DataSource::Directory {
            train_images,
            train_masks,
            test_images,
            test_masks,
        } => {
            let train = data::load_directory(train_images, Some(train_masks), size)?;
            let test = data::load_directory(test_images, Some(test_masks), size)?;
            if let Some(s) = test.iter().find(|s| s.mask.is_none()) {
                return Err(Error::Config(format!("test sample {} has no mask", s.id)));
            }
            Ok((train, test))
        }
    }
}

/// Split of `pool` for a budget and seed; shared by every variant of that seed.
pub fn split_for(pool: &[Sample], labeled: usize, seed: u64) -> Result<DatasetSplit> {
    data::split(pool, labeled, &mut stream_rng(seed, STREAM_SPLIT, labeled as u64))
}

/// Split of a pool that may already contain unlabeled samples.
///
/// Samples without masks always end up unlabeled. `labeled = None` keeps every
/// available mask; otherwise that many masked samples are drawn as in
/// [`split_for`].
pub fn split_pool(pool: &[Sample], labeled: Option<usize>, seed: u64) -> Result<DatasetSplit> {
    let (masked, unmasked): (Vec<Sample>, Vec<Sample>) =
        pool.iter().cloned().partition(|s| s.mask.is_some());
    if masked.is_empty() {
        return Err(Error::Parameter("training pool has no labeled samples".into()));
    }
    let budget = labeled.unwrap_or(masked.len());
    let base = split_for(&masked, budget, seed)?;
    let mut unlabeled = base.unlabeled;
    unlabeled.extend(unmasked);
    DatasetSplit::new(base.labeled, unlabeled)
}

/// Training configuration of one variant on one split.
///
/// With `match_iterations`, labeled-only variants get their epoch count (and
/// ramp length) stretched so their optimizer sees as many minibatches as a
/// run over the whole pool.
pub fn variant_train_config(
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
    split: &DatasetSplit,
    match_iterations: bool,
) -> TrainConfig {
    let mut cfg = variant.configure(base);
    cfg.seed = seed;
    if match_iterations && !variant.uses_unlabeled() {
        let pool_batches = base.batches_per_epoch(split.len());
        let own_batches = base.batches_per_epoch(split.labeled.len());
        let target = base.epochs * pool_batches;
        cfg.epochs = target.div_ceil(own_batches);
        cfg.schedule.ramp_epochs =
            (base.schedule.ramp_epochs * cfg.epochs).div_ceil(base.epochs.max(1));
    }
    cfg
}

/// Trains one variant on `split` and returns the model with its history.
pub fn train_variant(
    split: &DatasetSplit,
    variant: Variant,
    seed: u64,
    model: &ModelConfig,
    base: &TrainConfig,
    match_iterations: bool,
) -> Result<(SegModel, TrainHistory)> {
    let cfg = variant_train_config(base, variant, seed, split, match_iterations);
    let data = if variant.uses_unlabeled() {
        split.clone()
    } else {
        split.labeled_only()
    };
    trainer::train(&data, None, model, &cfg)
}

fn test_images(test: &[Sample], count: usize) -> Vec<Grid<f64>> {
    test.iter().take(count.max(1)).map(|s| s.image.clone()).collect()
}

/// Runs every `(budget, seed, variant)` combination and writes the results.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let (pool, test) = prepare_data(&config.data, config.model.size)?;
    config.validate(pool.len())?;
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let out = &config.out_dir;
    let results_path = out.join(RESULTS_FILE);
    if results_path.exists() && !config.overwrite {
        return Err(Error::Exists(results_path));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(config)?)?;

    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&results_path)?;
    let mut writer = csv::Writer::from_writer(file);
    let gap_set = test_images(&test, config.gap_images);
    let ops = TransformOp::all();

    let mut rows = Vec::new();
    for &labeled in &config.labeled {
        for &seed in &config.seeds {
            let split = split_pool(&pool, Some(labeled), seed)?;
            for &variant in &config.variants {
                let start = Instant::now();
                let (model, _) =
                    train_variant(&split, variant, seed, &config.model, &config.train, config.match_iterations)?;
                let report = trainer::evaluate(&model, &test)?;
                let gap = equivariance_gap(&model, &gap_set, &ops)?;
                let row = ResultRow {
                    variant,
                    labeled,
                    unlabeled: if variant.uses_unlabeled() {
                        split.unlabeled.len()
                    } else {
                        0
                    },
                    seed,
                    ja: report.ja,
                    di: report.di,
                    ac: report.ac,
                    se: report.se,
                    sp: report.sp,
                    n_images: report.n_images,
                    equivariance_gap: gap,
                    wall_seconds: start.elapsed().as_secs_f64(),
                };
                writer.serialize(&row)?;
                writer.flush()?;
                rows.push(row);
            }
        }
    }
    drop(writer);

    let groups = summarize(&rows);
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&groups)?)?;
    Ok(rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-aggregated metrics of one `(variant, labeled)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub variant: Variant,
    pub labeled: usize,
    pub n_seeds: usize,
    pub ja: (f64, f64),
    pub di: (f64, f64),
    pub ac: (f64, f64),
    pub se: (f64, f64),
    pub sp: (f64, f64),
    pub equivariance_gap: (f64, f64),
}

pub fn summarize(rows: &[ResultRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(usize, Variant), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.labeled, r.variant)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((labeled, variant), rs)| {
            let col = |f: fn(&ResultRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            GroupSummary {
                variant,
                labeled,
                n_seeds: rs.len(),
                ja: col(|r| r.ja),
                di: col(|r| r.di),
                ac: col(|r| r.ac),
                se: col(|r| r.se),
                sp: col(|r| r.sp),
                equivariance_gap: col(|r| r.equivariance_gap),
            }
        })
        .collect()
}

/// One point of the labeled-budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: usize,
    pub variant: Variant,
    pub mean_ja: f64,
    pub std_ja: f64,
}

/// Runs supervised-only and the full method at every budget.
pub fn sweep_labeled_budget(config: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    if config.labeled.len() < 2 {
        return Err(Error::Config("a sweep needs at least two budgets".into()));
    }
    let mut cfg = config.clone();
    cfg.variants = vec![Variant::SupervisedOnly, Variant::Full];
    let rows = run_experiment(&cfg)?;
    let points = sweep_points(&rows);
    write_sweep(&points, &cfg.out_dir)?;
    Ok(points)
}

pub fn sweep_points(rows: &[ResultRow]) -> Vec<SweepPoint> {
    summarize(rows)
        .into_iter()
        .map(|g| SweepPoint {
            budget: g.labeled,
            variant: g.variant,
            mean_ja: g.ja.0,
            std_ja: g.ja.1,
        })
        .collect()
}

fn write_sweep(points: &[SweepPoint], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join(SWEEP_FILE))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    for (name, series) in series_by_variant(points) {
        write_series(&out.join(format!("series_{name}.txt")), &series)?;
    }
    Ok(())
}

fn series_by_variant(points: &[SweepPoint]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for p in points {
        out.entry(p.variant.name().to_string())
            .or_default()
            .push((p.budget, p.mean_ja));
    }
    for v in out.values_mut() {
        v.sort_by_key(|&(b, _)| b);
    }
    out
}

fn write_series(path: &Path, series: &[(usize, f64)]) -> Result<()> {
    let mut f = File::create(path)?;
    for (x, y) in series {
        writeln!(f, "{x} {y}")?;
    }
    Ok(())
}

/// Markdown table and plot series built from a results directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub groups: Vec<GroupSummary>,
    pub markdown: String,
    /// Per variant: `(labeled budget, mean JA)` sorted by budget.
    pub series: BTreeMap<String, Vec<(usize, f64)>>,
}

impl Report {
    /// Writes `summary.md` and `series_<variant>.txt` files into `out`.
    pub fn write_to(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join("summary.md"), &self.markdown)?;
        for (name, series) in &self.series {
            write_series(&out.join(format!("series_{name}.txt")), series)?;
        }
        Ok(())
    }
}

fn pm((mean, std): (f64, f64)) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

/// Reads `results.csv` from `dir` without modifying anything there.
pub fn report(dir: &Path) -> Result<Report> {
    let rows = read_results(&dir.join(RESULTS_FILE))?;
    if rows.is_empty() {
        return Err(Error::Parameter(format!("no result rows in {}", dir.display())));
    }
    let groups = summarize(&rows);
    let mut md = String::from(
        "| variant | labeled | seeds | JA | DI | AC | SE | SP |\n|---|---|---|---|---|---|---|---|\n",
    );
    for g in &groups {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            g.variant,
            g.labeled,
            g.n_seeds,
            pm(g.ja),
            pm(g.di),
            pm(g.ac),
            pm(g.se),
            pm(g.sp)
        ));
    }
    let points: Vec<SweepPoint> = groups
        .iter()
        .map(|g| SweepPoint {
            budget: g.labeled,
            variant: g.variant,
            mean_ja: g.ja.0,
            std_ja: g.ja.1,
        })
        .collect();
    Ok(Report {
        series: series_by_variant(&points),
        groups,
        markdown: md,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, seed: u64, ja: f64) -> ResultRow {
        ResultRow {
            variant,
            labeled: 25,
            unlabeled: 0,
            seed,
            ja,
            di: 2.0 * ja / (1.0 + ja),
            ac: 0.9,
            se: 0.8,
            sp: 0.95,
            n_images: 10,
            equivariance_gap: 0.01,
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_switches() {
        let base = TrainConfig::for_epochs(4);
        let a = Variant::MethodA.configure(&base);
        assert!(!a.enable_transform_consistency && a.enable_noise_dropout);
        let b = Variant::MethodB.configure(&base);
        assert!(b.enable_transform_consistency && !b.enable_noise_dropout);
        assert_eq!(
            Variant::SupervisedOnly.configure(&base).regularization_scope,
            RegularizationScope::None
        );
        assert_eq!(
            Variant::SupervisedWithReg.configure(&base).regularization_scope,
            RegularizationScope::LabeledOnly
        );
    }

    #[test]
    fn iteration_matching() {
        let ds = data::generate_dataset(&mut stream_rng(0, 1, 0), 100, 16, 0.0).unwrap();
        let split = split_for(&ds, 20, 3).unwrap();
        let base = TrainConfig::for_epochs(5);
        let sup = variant_train_config(&base, Variant::SupervisedOnly, 3, &split, true);
        // pool: 10 batches/epoch * 5 = 50 iterations; labeled: 2 batches/epoch
        assert_eq!(sup.epochs, 25);
        assert_eq!(sup.schedule.ramp_epochs, 20);
        let full = variant_train_config(&base, Variant::Full, 3, &split, true);
        assert_eq!(full.epochs, 5);
        let plain = variant_train_config(&base, Variant::SupervisedOnly, 3, &split, false);
        assert_eq!(plain.epochs, 5);
    }

    #[test]
    fn summary_and_report() {
        let rows: Vec<_> = (0..3)
            .flat_map(|s| {
                [
                    row(Variant::SupervisedOnly, s, 0.5 + 0.1 * s as f64),
                    row(Variant::Full, s, 0.6 + 0.05 * s as f64),
                ]
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let mut w = csv::Writer::from_path(dir.path().join(RESULTS_FILE)).unwrap();
        for r in &rows {
            w.serialize(r).unwrap();
        }
        w.flush().unwrap();
        drop(w);

        let before: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
        let rep = report(dir.path()).unwrap();
        let after: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(before, after);

        assert_eq!(rep.groups.len(), 2);
        let table_rows = rep.markdown.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| variant")).count();
        assert_eq!(table_rows, 2);
        let sup = rep.groups.iter().find(|g| g.variant == Variant::SupervisedOnly).unwrap();
        assert!((sup.ja.0 - (0.5 + 0.6 + 0.7) / 3.0).abs() < 1e-12);
        assert!((sup.ja.1 - 0.1).abs() < 1e-12);
        assert_eq!(rep.series["full"].len(), 1);
        assert!(report(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn split_pool_keeps_unmasked_samples_unlabeled() {
        let mut ds = data::generate_dataset(&mut stream_rng(0, 1, 0), 10, 16, 0.0).unwrap();
        let full = split_pool(&ds, Some(4), 1).unwrap();
        assert_eq!(full, split_for(&ds, 4, 1).unwrap());
        for s in &mut ds[..3] {
            s.mask = None;
        }
        let all = split_pool(&ds, None, 1).unwrap();
        assert_eq!((all.labeled.len(), all.unlabeled.len()), (7, 3));
        let some = split_pool(&ds, Some(2), 1).unwrap();
        assert_eq!((some.labeled.len(), some.unlabeled.len()), (2, 8));
        assert!(split_pool(&ds, Some(8), 1).is_err());
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
