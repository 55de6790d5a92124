use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GenLoss, GeneratorInit, StageConfig};
use crate::clustering::{kmeans, ClusterResult};
use crate::dataio::{LabeledFeatureSet, Split};
use crate::error::{Error, Result};
use crate::nnet::{
    extend_classifier, sgd_step_classifier, sgd_step_generator, ClassifierParams, GenGrads,
    GeneratorParams, SgdState,
};
use crate::numerics::{axpy, cost_matrix, squared_distance, MassDistribution, Matrix, RngState};
use crate::transport::{ot_loss, ot_loss_grad_centroids, sinkhorn, TransportPlan};

/// Variance floor for the Gaussian fits of the KL variant.
pub const KL_VAR_FLOOR: f64 = 1e-6;
/// Rows generated per forward call when filling the fine-tuning bank.
const GEN_CHUNK: usize = 4096;

/// Draws mini-batches by walking a shuffled order, reshuffling at the end of
/// each pass.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: RngState,
}

impl BatchSampler {
    fn new(n: usize, rng: RngState) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Classifier row of every sample in `set`.
fn rows_for(cls: &ClassifierParams, set: &LabeledFeatureSet) -> Result<Vec<usize>> {
    set.labels()
        .iter()
        .map(|&l| {
            cls.row_of(l)
                .ok_or_else(|| Error::Roster(format!("class {l} has no classifier row")))
        })
        .collect()
}

fn accuracy(cls: &ClassifierParams, xs: &Matrix, rows: &[usize]) -> Result<f64> {
    let pred = cls.predict_batch(xs)?;
    let hits = pred.iter().zip(rows).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / rows.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseTrainOutcome {
    pub classifier: ClassifierParams,
    pub train_accuracy: f64,
    /// Training accuracy reached 95%.
    pub separable: bool,
}

/// Fits a cosine classifier over the base classes of `base_set` with
/// mini-batch SGD on cross-entropy.
pub fn base_train(
    base_set: &LabeledFeatureSet,
    cfg: &StageConfig,
    rng: &RngState,
) -> Result<BaseTrainOutcome> {
    cfg.validate()?;
    if let Some(&l) = base_set
        .labels()
        .iter()
        .find(|&&l| base_set.split_of(l) != Some(Split::Base))
    {
        return Err(Error::InsufficientData(format!(
            "base training set contains novel class {l}"
        )));
    }
    let by_class = base_set.indices_by_class();
    let ids: Vec<u32> = base_set.class_ids(Split::Base);
    if ids.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "base training needs at least 2 classes, got {}",
            ids.len()
        )));
    }
    if let Some(id) = ids.iter().find(|id| by_class[id].len() < 2) {
        return Err(Error::InsufficientData(format!(
            "base class {id} has {} samples, at least 2 required",
            by_class[id].len()
        )));
    }
    let d = base_set.dim();
    let mut init = rng.split(0);
    let mut protos = Matrix::zeros(ids.len(), d);
    init.fill_normal(protos.as_mut_slice());
    let sd = 1.0 / (d as f64).sqrt();
    protos.as_mut_slice().iter_mut().for_each(|v| *v *= sd);
    let mut cls = ClassifierParams::new(protos, cfg.classifier_scale, ids)?;

    let rows = rows_for(&cls, base_set)?;
    let feats = base_set.features();
    let batch = cfg.base_batch.min(base_set.len());
    let mut sampler = BatchSampler::new(base_set.len(), rng.split(1));
    let mut state = SgdState::default();
    let mut grad = Matrix::zeros(cls.num_classes(), d);
    for step in 0..cfg.base_iterations {
        let idx = sampler.next(batch);
        let xs = gather(feats, &idx);
        let ys: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
        grad.as_mut_slice().fill(0.0);
        cls.accumulate(&xs, &ys, 1.0 / batch as f64, Some(&mut grad), None)?;
        sgd_step_classifier(&mut cls, &grad, &cfg.base_sgd, &mut state, step)?;
    }
    cls.validate()?;
    let train_accuracy = accuracy(&cls, feats, &rows)?;
    Ok(BaseTrainOutcome {
        classifier: cls,
        train_accuracy,
        separable: train_accuracy >= 0.95,
    })
}

/// One line of the generator training log. `l_ot` holds the distribution
/// term of whichever loss variant is active; `l_syn` is absent when the
/// classifier term is switched off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenLogRecord {
    pub step: usize,
    pub l_ot: f64,
    pub l_syn: Option<f64>,
    pub l_gen: f64,
    pub sinkhorn_converged: bool,
    pub sinkhorn_iterations: usize,
}

/// Losses, gradients and intermediate results of one generator step.
#[derive(Debug, Clone)]
pub struct GenStep {
    pub l_dist: f64,
    pub l_syn: Option<f64>,
    pub l_gen: f64,
    pub grads: GenGrads,
    /// One entry per transport problem (one, or one per class).
    pub clusters: Vec<ClusterResult>,
    pub plans: Vec<TransportPlan>,
    pub classifier_calls: usize,
}

/// Clusters `synth`, transports `reals` onto the centroids and returns the
/// loss with its gradient on every synthetic row. Each centroid's gradient is
/// shared equally among its members (assignments held fixed).
fn ot_term(
    reals: &Matrix,
    synth: &Matrix,
    k: usize,
    cfg: &StageConfig,
    rng: &mut RngState,
) -> Result<(f64, Matrix, ClusterResult, TransportPlan)> {
    let cluster = kmeans(synth, k.min(synth.rows()), cfg.kmeans_iterations, rng)?;
    let cost = cost_matrix(reals, &cluster.centroids)?;
    let r = MassDistribution::uniform(reals.rows())?;
    let plan = sinkhorn(&cost, &r, &cluster.mass, &cfg.sinkhorn)?;
    let loss = ot_loss(&plan, &cost)?;
    let g_centroid = ot_loss_grad_centroids(reals, &cluster.centroids, &plan)?;
    let mut up = Matrix::zeros(synth.rows(), synth.cols());
    for (m, &a) in cluster.assignment.iter().enumerate() {
        let share = 1.0 / cluster.counts[a] as f64;
        axpy(share, g_centroid.row(a), up.row_mut(m));
    }
    Ok((loss, up, cluster, plan))
}

/// KL(real || synthetic) between diagonal Gaussian fits (population
/// variances plus [`KL_VAR_FLOOR`]), with its gradient on every synthetic row.
pub fn kl_diag_gaussian(real: &Matrix, synth: &Matrix) -> Result<(f64, Matrix)> {
    if real.rows() == 0 || synth.rows() == 0 {
        return Err(Error::EmptyInput("gaussian fit needs samples"));
    }
    if real.cols() != synth.cols() {
        return Err(Error::DimensionMismatch {
            expected: real.cols(),
            found: synth.cols(),
        });
    }
    let moments = |m: &Matrix| {
        let n = m.rows() as f64;
        let mean: Vec<f64> = m.col_sums().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - mu) * (x - mu);
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n + KL_VAR_FLOOR);
        (mean, var)
    };
    let (mr, vr) = moments(real);
    let (ms, vs) = moments(synth);
    let mut loss = 0.0;
    let mut d_mean = vec![0.0; real.cols()];
    let mut d_var = vec![0.0; real.cols()];
    for i in 0..real.cols() {
        let diff = mr[i] - ms[i];
        loss += 0.5 * ((vs[i] / vr[i]).ln() + (vr[i] + diff * diff) / vs[i] - 1.0);
        d_mean[i] = -diff / vs[i];
        d_var[i] = 0.5 * (1.0 / vs[i] - (vr[i] + diff * diff) / (vs[i] * vs[i]));
    }
    let m = synth.rows() as f64;
    let mut grad = Matrix::zeros(synth.rows(), synth.cols());
    for (g, x) in synth.iter_rows().enumerate() {
        let row = grad.row_mut(g);
        for i in 0..x.len() {
            row[i] = (d_mean[i] + d_var[i] * 2.0 * (x[i] - ms[i])) / m;
        }
    }
    Ok((loss, grad))
}

/// Computes the generator loss on one batch and its parameter gradients.
///
/// `reals` holds N conditioning features with classifier rows `rows`;
/// `noise` holds `N * t_gen` noise vectors, where synthetic row `m` is
/// conditioned on real row `m / t_gen`.
pub fn generator_step(
    gen: &GeneratorParams,
    cls: &ClassifierParams,
    reals: &Matrix,
    rows: &[usize],
    noise: &Matrix,
    cfg: &StageConfig,
    kmeans_rng: &mut RngState,
) -> Result<GenStep> {
    let n = reals.rows();
    let t = cfg.t_gen;
    if rows.len() != n || noise.rows() != n * t {
        return Err(Error::ShapeMismatch(format!(
            "{n} reals, {} labels, {} noise rows for t_gen = {t}",
            rows.len(),
            noise.rows()
        )));
    }
    let cond: Vec<usize> = (0..n * t).map(|m| m / t).collect();
    let inputs = GeneratorParams::concat_inputs(&gather(reals, &cond), noise)?;
    let (synth, cache) = gen.forward_batch(&inputs)?;

    let mut clusters = Vec::new();
    let mut plans = Vec::new();
    let (l_dist, mut upstream) = match cfg.gen_loss {
        GenLoss::Ot if !cfg.per_class_ot => {
            let (l, up, c, p) = ot_term(reals, &synth, cfg.k_centroids, cfg, kmeans_rng)?;
            clusters.push(c);
            plans.push(p);
            (l, up)
        }
        GenLoss::Ot => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &r) in rows.iter().enumerate() {
                groups.entry(r).or_default().push(i);
            }
            let mut up = Matrix::zeros(synth.rows(), synth.cols());
            let mut total = 0.0;
            for members in groups.values() {
                let weight = members.len() as f64 / n as f64;
                let synth_idx: Vec<usize> =
                    members.iter().flat_map(|&i| i * t..(i + 1) * t).collect();
                let k = ((cfg.k_centroids as f64 * weight).round() as usize).max(1);
                let (l, g, c, p) =
                    ot_term(&gather(reals, members), &gather(&synth, &synth_idx), k, cfg, kmeans_rng)?;
                total += weight * l;
                for (local, &m) in synth_idx.iter().enumerate() {
                    axpy(weight, g.row(local), up.row_mut(m));
                }
                clusters.push(c);
                plans.push(p);
            }
            (total, up)
        }
        GenLoss::L2 => {
            let m = synth.rows() as f64;
            let mut up = Matrix::zeros(synth.rows(), synth.cols());
            let mut total = 0.0;
            for (s, &c) in cond.iter().enumerate() {
                let x = reals.row(c);
                let xh = synth.row(s);
                total += squared_distance(xh, x);
                for ((g, a), b) in up.row_mut(s).iter_mut().zip(xh).zip(x) {
                    *g = 2.0 * (a - b) / m;
                }
            }
            (total / m, up)
        }
        GenLoss::Kl => kl_diag_gaussian(reals, &synth)?,
    };

    let mut classifier_calls = 0;
    let l_syn = if cfg.beta > 0.0 {
        let labels: Vec<usize> = cond.iter().map(|&c| rows[c]).collect();
        classifier_calls += 1;
        let sum = cls.accumulate(&synth, &labels, cfg.beta / n as f64, None, Some(&mut upstream))?;
        Some(sum / n as f64)
    } else {
        None
    };
    let l_gen = l_dist + cfg.beta * l_syn.unwrap_or(0.0);
    if !l_gen.is_finite() {
        return Err(Error::NonFinite("generator loss"));
    }
    let grads = gen.backward_batch(&cache, &upstream)?;
    Ok(GenStep {
        l_dist,
        l_syn,
        l_gen,
        grads,
        clusters,
        plans,
        classifier_calls,
    })
}

#[derive(Debug, Clone)]
pub struct GenTrainOutcome {
    pub generator: GeneratorParams,
    pub log: Vec<GenLogRecord>,
    /// Number of classifier evaluations made while training.
    pub classifier_calls: usize,
}

/// Per-axis standard deviation of features around their class means.
fn pooled_within_class_std(set: &LabeledFeatureSet) -> Vec<f64> {
    let d = set.dim();
    let mut var = vec![0.0; d];
    let feats = set.features();
    for idx in set.indices_by_class().values().filter(|v| !v.is_empty()) {
        let mut mean = vec![0.0; d];
        for &i in idx {
            axpy(1.0, feats.row(i), &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        for &i in idx {
            for ((v, x), m) in var.iter_mut().zip(feats.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    var.iter().map(|v| (v / set.len().max(1) as f64).sqrt()).collect()
}

/// Initial generator for `cfg` on a dataset.
pub fn init_generator(
    set: &LabeledFeatureSet,
    cfg: &StageConfig,
    rng: &mut RngState,
) -> Result<GeneratorParams> {
    let d = set.dim();
    match cfg.generator_init {
        GeneratorInit::FanIn => {
            GeneratorParams::new_random(d, &cfg.hidden_widths(d), cfg.activation, rng)
        }
        GeneratorInit::NearIdentity { jitter } => {
            let widths = cfg.hidden_widths(d);
            if widths.iter().any(|&w| w != 2 * d) {
                return Err(Error::InvalidConfig(
                    "near-identity init needs every hidden width equal to 2 x dim".into(),
                ));
            }
            let std = pooled_within_class_std(set);
            GeneratorParams::near_identity(d, widths.len(), &std, cfg.activation, jitter, rng)
        }
    }
}

/// Trains the generator against a frozen classifier on `base_set`.
pub fn train_generator(
    frozen_cls: &ClassifierParams,
    base_set: &LabeledFeatureSet,
    cfg: &StageConfig,
    rng: &RngState,
) -> Result<GenTrainOutcome> {
    cfg.validate()?;
    if base_set.is_empty() {
        return Err(Error::EmptyInput("generator training set is empty"));
    }
    let mut cls = frozen_cls.clone();
    cls.freeze_all();
    let rows = rows_for(&cls, base_set)?;
    let d = base_set.dim();
    let mut gen = init_generator(base_set, cfg, &mut rng.split(0))?;
    let mut sampler = BatchSampler::new(base_set.len(), rng.split(1));
    let mut noise_rng = rng.split(2);
    let mut kmeans_rng = rng.split(3);
    let mut state = SgdState::default();
    let n = cfg.batch_real.min(base_set.len());
    let mut noise = Matrix::zeros(n * cfg.t_gen, d);
    let mut log = Vec::with_capacity(cfg.gen_iterations);
    let mut classifier_calls = 0;
    for step in 0..cfg.gen_iterations {
        let idx = sampler.next(n);
        let reals = gather(base_set.features(), &idx);
        let ys: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
        noise_rng.fill_normal(noise.as_mut_slice());
        let s = generator_step(&gen, &cls, &reals, &ys, &noise, cfg, &mut kmeans_rng)?;
        classifier_calls += s.classifier_calls;
        sgd_step_generator(&mut gen, &s.grads, &cfg.gen_sgd, &mut state, step)?;
        log.push(GenLogRecord {
            step,
            l_ot: s.l_dist,
            l_syn: s.l_syn,
            l_gen: s.l_gen,
            sinkhorn_converged: s.plans.iter().all(|p| p.converged),
            sinkhorn_iterations: s.plans.iter().map(|p| p.iterations_used).max().unwrap_or(0),
        });
    }
    gen.validate()?;
    Ok(GenTrainOutcome {
        generator: gen,
        log,
        classifier_calls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub classifier: ClassifierParams,
    /// Number of generator forward calls; zero when the synthetic term is off.
    pub generator_calls: usize,
}

/// Fine-tunes the classifier on a K-shot set covering base and novel classes.
///
/// Novel classes without a classifier row are appended, initialised from the
/// normalised mean of their shots. When `alpha > 0`, every real sample gets
/// `t_finetune` synthetic features drawn once up front from the frozen
/// generator; each step then uses the synthetic features of the batch's real
/// samples, labelled like their conditioning sample.
pub fn finetune(
    frozen_gen: Option<&GeneratorParams>,
    cls: &ClassifierParams,
    kshot_set: &LabeledFeatureSet,
    cfg: &StageConfig,
    rng: &RngState,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let by_class = kshot_set.indices_by_class();
    for id in kshot_set.class_ids(Split::Novel) {
        if by_class[&id].is_empty() {
            return Err(Error::MissingNovelClasses { class: id });
        }
    }
    if kshot_set.is_empty() {
        return Err(Error::EmptyInput("fine-tuning set is empty"));
    }
    let use_gen = cfg.alpha > 0.0;
    let gen = match (use_gen, frozen_gen) {
        (true, Some(g)) => Some(g),
        (true, None) => {
            return Err(Error::InvalidConfig("alpha > 0 requires a generator".into()));
        }
        (false, _) => None,
    };
    if let Some(g) = gen {
        if g.feature_dim != kshot_set.dim() {
            return Err(Error::DimensionMismatch {
                expected: kshot_set.dim(),
                found: g.feature_dim,
            });
        }
    }

    let missing: Vec<u32> = kshot_set
        .roster()
        .iter()
        .filter(|c| cls.row_of(c.id).is_none())
        .map(|c| c.id)
        .collect();
    if let Some(id) = missing.iter().find(|&&id| kshot_set.split_of(id) != Some(Split::Novel)) {
        return Err(Error::Roster(format!("base class {id} has no classifier row")));
    }
    let mut cls = if missing.is_empty() {
        cls.clone()
    } else {
        let init: Vec<Matrix> = missing
            .iter()
            .map(|id| gather(kshot_set.features(), &by_class[id]))
            .collect();
        extend_classifier(cls, &missing, Some(&init), cfg.freeze_base, &mut rng.split(0))?
    };
    if cfg.freeze_base {
        for id in kshot_set.class_ids(Split::Base) {
            if let Some(r) = cls.row_of(id) {
                cls.frozen_rows.insert(r);
            }
        }
    }

    let rows = rows_for(&cls, kshot_set)?;
    let feats = kshot_set.features();
    let d = kshot_set.dim();
    let t = cfg.t_finetune;
    let mut generator_calls = 0;
    let bank = match gen {
        Some(g) => {
            let mut noise_rng = rng.split(2);
            let total = kshot_set.len() * t;
            let mut bank = Matrix::zeros(total, d);
            let mut start = 0;
            while start < total {
                let end = (start + GEN_CHUNK).min(total);
                let cond: Vec<usize> = (start..end).map(|m| m / t).collect();
                let mut noise = Matrix::zeros(end - start, d);
                noise_rng.fill_normal(noise.as_mut_slice());
                let inputs = GeneratorParams::concat_inputs(&gather(feats, &cond), &noise)?;
                let out = g.generate(&inputs)?;
                generator_calls += 1;
                bank.as_mut_slice()[start * d..end * d].copy_from_slice(out.as_slice());
                start = end;
            }
            Some(bank)
        }
        None => None,
    };

    let batch = cfg.finetune_batch.min(kshot_set.len());
    let mut sampler = BatchSampler::new(kshot_set.len(), rng.split(1));
    let mut state = SgdState::default();
    let mut grad = Matrix::zeros(cls.num_classes(), d);
    for step in 0..cfg.finetune_iterations {
        let idx = sampler.next(batch);
        let xs = gather(feats, &idx);
        let ys: Vec<usize> = idx.iter().map(|&i| rows[i]).collect();
        grad.as_mut_slice().fill(0.0);
        cls.accumulate(&xs, &ys, 1.0 / batch as f64, Some(&mut grad), None)?;
        if let Some(bank) = &bank {
            let synth_idx: Vec<usize> = idx.iter().flat_map(|&i| i * t..(i + 1) * t).collect();
            let synth = gather(bank, &synth_idx);
            let labels: Vec<usize> = synth_idx.iter().map(|&m| rows[m / t]).collect();
            cls.accumulate(&synth, &labels, cfg.alpha / batch as f64, Some(&mut grad), None)?;
        }
        sgd_step_classifier(&mut cls, &grad, &cfg.finetune_sgd, &mut state, step)?;
    }
    cls.validate()?;
    Ok(FinetuneOutcome {
        classifier: cls,
        generator_calls,
    })
}

/// Per-class accuracy with base, novel and overall means. A mean is `None`
/// when its group has no test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_accuracy: BTreeMap<u32, f64>,
    pub base_mean: Option<f64>,
    pub novel_mean: Option<f64>,
    pub overall_mean: Option<f64>,
    pub shots: usize,
    pub seed: u64,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Argmax prediction on every test sample, summarised per class. Classes
/// without test samples are left out.
pub fn evaluate(
    cls: &ClassifierParams,
    test_set: &LabeledFeatureSet,
    shots: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(test_set.len());
    for &l in test_set.labels() {
        rows.push(cls.row_of(l).ok_or(Error::UnknownClassInTestSet { class: l })?);
    }
    let pred = cls.predict_batch(test_set.features())?;
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for ((&l, &r), &p) in test_set.labels().iter().zip(&rows).zip(&pred) {
        let e = tally.entry(l).or_default();
        e.0 += (r == p) as usize;
        e.1 += 1;
    }
    let per_class_accuracy: BTreeMap<u32, f64> = tally
        .iter()
        .map(|(&c, &(hit, n))| (c, hit as f64 / n as f64))
        .collect();
    let group = |split: Split| -> Vec<f64> {
        per_class_accuracy
            .iter()
            .filter(|(c, _)| test_set.split_of(**c) == Some(split))
            .map(|(_, a)| *a)
            .collect()
    };
    let all: Vec<f64> = per_class_accuracy.values().copied().collect();
    Ok(EvalReport {
        base_mean: mean(&group(Split::Base)),
        novel_mean: mean(&group(Split::Novel)),
        overall_mean: mean(&all),
        per_class_accuracy,
        shots,
        seed,
    })
}
