use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};

use super::stages::{base_train, evaluate, finetune, train_generator, EvalReport};
use super::{GenLoss, StageConfig};
use crate::dataio::{kshot_sample, make_synthetic_dataset, DatasetSpec, SyntheticDataset};
use crate::error::{Error, Result};
use crate::numerics::RngState;

pub const CSV_HEADER: &str = "variant,seed,shots,base_mean,novel_mean,overall_mean";

/// Split labels of the per-seed random streams.
pub const STREAM_BASE: u64 = 1;
pub const STREAM_GEN: u64 = 2;
pub const STREAM_FINETUNE: u64 = 3;
pub const STREAM_KSHOT: u64 = 4;

/// Fine-tuning arm of the main experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No synthetic features (`alpha = 0`).
    Baseline,
    /// Synthetic features from the trained generator.
    Augmented,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub stage: StageConfig,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    /// Generator losses compared by the ablation runner.
    pub ablation_variants: Vec<GenLoss>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            stage: StageConfig::default(),
            shots: vec![1, 2, 3, 5, 10],
            seeds: (0..10).collect(),
            workers: 1,
            ablation_variants: GenLoss::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.stage.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::InvalidConfig("shots must be a nonempty list of counts >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        if let Some(&s) = self.shots.iter().find(|&&s| s > self.dataset.pool_per_class) {
            return Err(Error::InvalidConfig(format!(
                "{s} shots requested but the pool holds {} samples per class",
                self.dataset.pool_per_class
            )));
        }
        Ok(())
    }
}

/// Stops a run early. Cells already reported stay reported.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub stop: Arc<AtomicBool>,
    /// Stop once this many cells have been reported.
    pub stop_after: Option<usize>,
}

impl RunControl {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    pub shots: usize,
    pub report: EvalReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn csv_row(c: &CellResult) -> String {
    format!(
        "{},{},{},{},{},{}",
        c.variant,
        c.seed,
        c.shots,
        fmt_opt(c.report.base_mean),
        fmt_opt(c.report.novel_mean),
        fmt_opt(c.report.overall_mean)
    )
}

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for c in cells {
        s.push_str(&csv_row(c));
        s.push('\n');
    }
    s
}

enum Msg<T> {
    Item(usize, usize, Result<T>),
    Done(usize, usize),
}

/// Runs `work` for every seed on a pool of `workers` threads. Results are
/// handed to `sink` in seed order, then in the order each seed produced them,
/// as soon as every earlier result has been handed over. `work` receives an
/// `emit` callback that returns `false` once the run has been stopped.
fn run_pool<T, W>(
    seeds: &[u64],
    workers: usize,
    control: &RunControl,
    work: W,
    sink: &mut dyn FnMut(&T) -> Result<()>,
) -> Result<(Vec<T>, bool)>
where
    T: Send,
    W: Fn(u64, &mut dyn FnMut(Result<T>) -> bool) + Sync,
{
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Msg<T>>();
    let mut out = Vec::new();
    let mut failure = None;
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(seeds.len()) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= seeds.len() || control.stopped() {
                    break;
                }
                let mut k = 0;
                work(seeds[j], &mut |r| {
                    let failed = r.is_err();
                    if tx.send(Msg::Item(j, k, r)).is_err() {
                        return false;
                    }
                    k += 1;
                    !failed && !control.stopped()
                });
                if tx.send(Msg::Done(j, k)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<(usize, usize), Result<T>> = BTreeMap::new();
        let mut done: BTreeMap<usize, usize> = BTreeMap::new();
        let (mut cur_j, mut cur_k) = (0, 0);
        for msg in rx.iter() {
            if failure.is_some() || control.stopped() {
                continue;
            }
            match msg {
                Msg::Item(j, k, r) => {
                    pending.insert((j, k), r);
                }
                Msg::Done(j, count) => {
                    done.insert(j, count);
                }
            }
            loop {
                if let Some(r) = pending.remove(&(cur_j, cur_k)) {
                    cur_k += 1;
                    match r.and_then(|v| sink(&v).map(|()| v)) {
                        Ok(v) => out.push(v),
                        Err(e) => {
                            failure = Some(e);
                            control.stop.store(true, Ordering::SeqCst);
                            break;
                        }
                    }
                    if control.stop_after.is_some_and(|n| out.len() >= n) {
                        control.stop.store(true, Ordering::SeqCst);
                        break;
                    }
                } else if done.get(&cur_j) == Some(&cur_k) {
                    cur_j += 1;
                    cur_k = 0;
                } else {
                    break;
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((out, control.stopped()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: usize,
    pub variant: String,
    pub runs: usize,
    pub novel_mean: f64,
    pub novel_std: f64,
    pub base_mean: f64,
    pub base_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub shots: usize,
    pub seed: u64,
    pub novel_delta: f64,
    pub base_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub shots: usize,
    pub pairs: usize,
    pub novel_delta_mean: f64,
    pub novel_delta_std: f64,
    pub base_delta_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub summary: Vec<ShotSummary>,
    pub deltas: Vec<PairedDelta>,
    pub delta_summary: Vec<DeltaSummary>,
    pub interrupted: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Mean and sample standard deviation per (shots, variant), and paired
/// augmented-minus-baseline deltas per (shots, seed).
pub fn summarize(cells: &[CellResult]) -> (Vec<ShotSummary>, Vec<PairedDelta>, Vec<DeltaSummary>) {
    let mut groups: BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut pairs: BTreeMap<(usize, u64), BTreeMap<String, &EvalReport>> = BTreeMap::new();
    for c in cells {
        let g = groups.entry((c.shots, c.variant.clone())).or_default();
        if let Some(v) = c.report.novel_mean {
            g.0.push(v);
        }
        if let Some(v) = c.report.base_mean {
            g.1.push(v);
        }
        pairs
            .entry((c.shots, c.seed))
            .or_default()
            .insert(c.variant.clone(), &c.report);
    }
    let summary = groups
        .into_iter()
        .map(|((shots, variant), (novel, base))| {
            let (nm, ns) = mean_std(&novel);
            let (bm, bs) = mean_std(&base);
            ShotSummary {
                shots,
                variant,
                runs: novel.len().max(base.len()),
                novel_mean: nm,
                novel_std: ns,
                base_mean: bm,
                base_std: bs,
            }
        })
        .collect();
    let deltas: Vec<PairedDelta> = pairs
        .into_iter()
        .filter_map(|((shots, seed), m)| {
            let b = m.get(Variant::Baseline.name())?;
            let a = m.get(Variant::Augmented.name())?;
            Some(PairedDelta {
                shots,
                seed,
                novel_delta: a.novel_mean? - b.novel_mean?,
                base_delta: a.base_mean? - b.base_mean?,
            })
        })
        .collect();
    let mut by_shot: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for d in &deltas {
        let e = by_shot.entry(d.shots).or_default();
        e.0.push(d.novel_delta);
        e.1.push(d.base_delta);
    }
    let delta_summary = by_shot
        .into_iter()
        .map(|(shots, (n, b))| {
            let (nm, ns) = mean_std(&n);
            DeltaSummary {
                shots,
                pairs: n.len(),
                novel_delta_mean: nm,
                novel_delta_std: ns,
                base_delta_mean: mean_std(&b).0,
            }
        })
        .collect();
    (summary, deltas, delta_summary)
}

impl ExperimentOutcome {
    /// Plain-text table of the summary and the paired deltas.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:<10} {:>4}  {:>17}  {:>17}",
            "shots", "variant", "runs", "novel acc", "base acc"
        );
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:>5}  {:<10} {:>4}  {:>7.2} +- {:>6.2}  {:>7.2} +- {:>6.2}",
                r.shots,
                r.variant,
                r.runs,
                100.0 * r.novel_mean,
                100.0 * r.novel_std,
                100.0 * r.base_mean,
                100.0 * r.base_std
            );
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "{:>5}  {:>5}  {:>23}  {:>10}",
            "shots", "pairs", "novel delta", "base delta"
        );
        for d in &self.delta_summary {
            let _ = writeln!(
                s,
                "{:>5}  {:>5}  {:>+10.2} +- {:>8.2}  {:>+10.2}",
                d.shots,
                d.pairs,
                100.0 * d.novel_delta_mean,
                100.0 * d.novel_delta_std,
                100.0 * d.base_delta_mean
            );
        }
        s
    }
}

fn seed_cells(
    data: &SyntheticDataset,
    cfg: &ExperimentConfig,
    seed: u64,
    emit: &mut dyn FnMut(Result<CellResult>) -> bool,
) {
    let root = RngState::new(seed);
    let prepared = base_train(&data.base_train, &cfg.stage, &root.split(STREAM_BASE)).and_then(|b| {
        let g = train_generator(&b.classifier, &data.base_train, &cfg.stage, &root.split(STREAM_GEN))?;
        Ok((b.classifier, g.generator))
    });
    let (cls, gen) = match prepared {
        Ok(v) => v,
        Err(e) => {
            emit(Err(e));
            return;
        }
    };
    for &shots in &cfg.shots {
        let kshot = match kshot_sample(
            &data.kshot_pool,
            shots,
            &mut root.split(STREAM_KSHOT).split(shots as u64),
        ) {
            Ok(k) => k,
            Err(e) => {
                emit(Err(e));
                return;
            }
        };
        let ft_rng = root.split(STREAM_FINETUNE).split(shots as u64);
        for variant in [Variant::Baseline, Variant::Augmented] {
            let mut stage = cfg.stage.clone();
            if variant == Variant::Baseline {
                stage.alpha = 0.0;
            }
            let cell = finetune(Some(&gen), &cls, &kshot, &stage, &ft_rng)
                .and_then(|ft| evaluate(&ft.classifier, &data.test, shots, seed))
                .map(|report| CellResult {
                    variant: variant.name().to_string(),
                    seed,
                    shots,
                    report,
                });
            if !emit(cell) {
                return;
            }
        }
    }
}

/// Runs base training and generator training once per seed, then for every
/// shot count fine-tunes a baseline and an augmented classifier from the same
/// K-shot draw and evaluates both. `sink` sees each cell as soon as it and
/// all cells before it (in seed, shots, variant order) are done.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    control: &RunControl,
    sink: &mut dyn FnMut(&CellResult) -> Result<()>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = make_synthetic_dataset(&cfg.dataset)?;
    let (cells, interrupted) = run_pool(
        &cfg.seeds,
        cfg.workers,
        control,
        |seed, emit| seed_cells(&data, cfg, seed, emit),
        sink,
    )?;
    let (summary, deltas, delta_summary) = summarize(&cells);
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        cells,
        summary,
        deltas,
        delta_summary,
        interrupted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: GenLoss,
    pub seed: u64,
    pub shots: usize,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn as_cell(&self) -> CellResult {
        CellResult {
            variant: self.variant.name().to_string(),
            seed: self.seed,
            shots: self.shots,
            report: self.report.clone(),
        }
    }
}

fn ablation_cells(
    data: &SyntheticDataset,
    cfg: &ExperimentConfig,
    variants: &[GenLoss],
    seed: u64,
    emit: &mut dyn FnMut(Result<AblationRow>) -> bool,
) {
    let root = RngState::new(seed);
    let cls = match base_train(&data.base_train, &cfg.stage, &root.split(STREAM_BASE)) {
        Ok(b) => b.classifier,
        Err(e) => {
            emit(Err(e));
            return;
        }
    };
    for &variant in variants {
        let stage = StageConfig {
            gen_loss: variant,
            ..cfg.stage.clone()
        };
        let gen = match train_generator(&cls, &data.base_train, &stage, &root.split(STREAM_GEN)) {
            Ok(g) => g.generator,
            Err(e) => {
                emit(Err(e));
                return;
            }
        };
        for &shots in &cfg.shots {
            let row = kshot_sample(
                &data.kshot_pool,
                shots,
                &mut root.split(STREAM_KSHOT).split(shots as u64),
            )
            .and_then(|kshot| {
                let ft_rng = root.split(STREAM_FINETUNE).split(shots as u64);
                finetune(Some(&gen), &cls, &kshot, &stage, &ft_rng)
            })
            .and_then(|ft| evaluate(&ft.classifier, &data.test, shots, seed))
            .map(|report| AblationRow {
                variant,
                seed,
                shots,
                report,
            });
            if !emit(row) {
                return;
            }
        }
    }
}

/// Trains one generator per loss variant and seed, fine-tunes with it at
/// every shot count and evaluates. Rows arrive in (seed, variant, shots)
/// order.
pub fn run_ablation_genloss(
    cfg: &ExperimentConfig,
    variants: &[GenLoss],
    control: &RunControl,
    sink: &mut dyn FnMut(&AblationRow) -> Result<()>,
) -> Result<(Vec<AblationRow>, bool)> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no ablation variants selected".into()));
    }
    let data = make_synthetic_dataset(&cfg.dataset)?;
    run_pool(
        &cfg.seeds,
        cfg.workers,
        control,
        |seed, emit| ablation_cells(&data, cfg, variants, seed, emit),
        sink,
    )
}

/// Aligned text table, one line per row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>6} {:>5} {:>9} {:>9} {:>9}",
        "variant", "seed", "shots", "base", "novel", "overall"
    );
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into());
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>5} {:>9} {:>9} {:>9}",
            r.variant.name(),
            r.seed,
            r.shots,
            pct(r.report.base_mean),
            pct(r.report.novel_mean),
            pct(r.report.overall_mean)
        );
    }
    s
}
