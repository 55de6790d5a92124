use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, softmax_into, Matrix, RngState};

pub const DEFAULT_SCALE: f64 = 20.0;
/// Standard deviation of randomly drawn prototypes.
pub const RANDOM_PROTOTYPE_STD: f64 = 0.01;

/// Cosine-similarity classifier: one prototype row per class, logits are
/// `scale * cos(x, w_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub prototypes: Matrix,
    pub scale: f64,
    /// Rows that training must not touch.
    pub frozen_rows: BTreeSet<usize>,
    /// Dataset class id carried by each row.
    pub class_ids: Vec<u32>,
}

impl ClassifierParams {
    pub fn new(prototypes: Matrix, scale: f64, class_ids: Vec<u32>) -> Result<Self> {
        let p = Self {
            prototypes,
            scale,
            frozen_rows: BTreeSet::new(),
            class_ids,
        };
        p.validate()?;
        Ok(p)
    }

    /// Prototypes drawn from `N(0, RANDOM_PROTOTYPE_STD^2)`.
    pub fn random(dim: usize, class_ids: Vec<u32>, scale: f64, rng: &mut RngState) -> Result<Self> {
        let mut protos = Matrix::zeros(class_ids.len(), dim);
        random_rows(&mut protos, rng);
        Self::new(protos, scale, class_ids)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn row_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn freeze_all(&mut self) {
        self.frozen_rows = (0..self.num_classes()).collect();
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "classifier scale must be positive, got {}",
                self.scale
            )));
        }
        if self.class_ids.len() != self.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "{} class ids for {} prototypes",
                self.class_ids.len(),
                self.num_classes()
            )));
        }
        if let Some(&r) = self.frozen_rows.iter().next_back() {
            if r >= self.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: r,
                    classes: self.num_classes(),
                });
            }
        }
        if !self.prototypes.is_finite() {
            return Err(Error::NonFinite("classifier prototypes"));
        }
        self.prototype_norms().map(|_| ())
    }

    fn prototype_norms(&self) -> Result<Vec<f64>> {
        self.prototypes
            .iter_rows()
            .enumerate()
            .map(|(j, w)| {
                let n = norm(w);
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(Error::ZeroNormVector { index: j })
                }
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let n = norm(x);
        if n > 0.0 && n.is_finite() {
            Ok(n)
        } else if n > 0.0 {
            Err(Error::NonFinite("classifier input"))
        } else {
            Err(Error::ZeroNormVector { index: 0 })
        }
    }

    fn logits_with(&self, x: &[f64], x_norm: f64, norms: &[f64], out: &mut [f64]) {
        for ((o, w), wn) in out.iter_mut().zip(self.prototypes.iter_rows()).zip(norms) {
            *o = self.scale * dot(x, w) / (x_norm * wn);
        }
    }

    /// Per-class logits for one feature.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let norms = self.prototype_norms()?;
        let xn = self.check_input(x)?;
        let mut out = vec![0.0; self.num_classes()];
        self.logits_with(x, xn, &norms, &mut out);
        Ok(out)
    }

    /// Row index of the largest logit (lowest index on ties) for every row of `xs`.
    pub fn predict_batch(&self, xs: &Matrix) -> Result<Vec<usize>> {
        let norms = self.prototype_norms()?;
        let mut logits = vec![0.0; self.num_classes()];
        xs.iter_rows()
            .map(|x| {
                let xn = self.check_input(x)?;
                self.logits_with(x, xn, &norms, &mut logits);
                let mut best = 0;
                for (j, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = j;
                    }
                }
                Ok(best)
            })
            .collect()
    }

    /// Cross-entropy of one sample with prototype and input gradients.
    /// Frozen rows get a zero gradient.
    pub fn loss_and_grad(&self, x: &[f64], label: usize) -> Result<(f64, Matrix, Vec<f64>)> {
        let xs = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let mut pg = Matrix::zeros(self.num_classes(), self.dim());
        let mut ig = Matrix::zeros(1, self.dim());
        let loss = self.accumulate(&xs, &[label], 1.0, Some(&mut pg), Some(&mut ig))?;
        Ok((loss, pg, ig.into_vec()))
    }

    /// Sums the cross-entropy over the rows of `xs` and adds `weight` times its
    /// gradients into `proto_grad` (summed over rows, skipping frozen rows)
    /// and `input_grad` (one row per sample). Returns the unweighted loss sum.
    pub fn accumulate(
        &self,
        xs: &Matrix,
        labels: &[usize],
        weight: f64,
        mut proto_grad: Option<&mut Matrix>,
        mut input_grad: Option<&mut Matrix>,
    ) -> Result<f64> {
        let c = self.num_classes();
        if labels.len() != xs.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                xs.rows()
            )));
        }
        if let Some(g) = proto_grad.as_deref() {
            if g.rows() != c || g.cols() != self.dim() {
                return Err(Error::ShapeMismatch("prototype gradient".into()));
            }
        }
        if let Some(g) = input_grad.as_deref() {
            if g.rows() != xs.rows() || g.cols() != self.dim() {
                return Err(Error::ShapeMismatch("input gradient".into()));
            }
        }
        let norms = self.prototype_norms()?;
        let mut logits = vec![0.0; c];
        let mut probs = vec![0.0; c];
        let mut total = 0.0;
        for (b, (x, &label)) in xs.iter_rows().zip(labels).enumerate() {
            if label >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            let xn = self.check_input(x)?;
            self.logits_with(x, xn, &norms, &mut logits);
            softmax_into(&logits, &mut probs);
            total += log_sum_exp(&logits) - logits[label];

            for j in 0..c {
                // dL/dlogit_j
                let g = probs[j] - if j == label { 1.0 } else { 0.0 };
                if g == 0.0 {
                    continue;
                }
                let w = self.prototypes.row(j);
                let cos = logits[j] / self.scale;
                let coef = weight * g * self.scale;
                if let Some(pg) = proto_grad.as_deref_mut() {
                    if !self.frozen_rows.contains(&j) {
                        // d cos / d w = x/(|x||w|) - cos w/|w|^2
                        let row = pg.row_mut(j);
                        axpy(coef / (xn * norms[j]), x, row);
                        axpy(-coef * cos / (norms[j] * norms[j]), w, row);
                    }
                }
                if let Some(ig) = input_grad.as_deref_mut() {
                    let row = ig.row_mut(b);
                    axpy(coef / (xn * norms[j]), w, row);
                    axpy(-coef * cos / (xn * xn), x, row);
                }
            }
        }
        Ok(total)
    }

    pub(crate) fn trainable_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes()).filter(|j| !self.frozen_rows.contains(j))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn random_rows(m: &mut Matrix, rng: &mut RngState) {
    for v in m.as_mut_slice() {
        *v = RANDOM_PROTOTYPE_STD * rng.normal();
    }
    // A zero row is practically impossible but would break the invariant.
    for j in 0..m.rows() {
        if norm(m.row(j)) == 0.0 {
            m.row_mut(j)[0] = RANDOM_PROTOTYPE_STD;
        }
    }
}

/// Appends one prototype per novel class. With `init_features`, each new row
/// is the normalised mean of that class's features; otherwise rows are small
/// Gaussian draws. With `freeze_base`, every existing row becomes frozen.
pub fn extend_classifier(
    base: &ClassifierParams,
    novel_ids: &[u32],
    init_features: Option<&[Matrix]>,
    freeze_base: bool,
    rng: &mut RngState,
) -> Result<ClassifierParams> {
    if novel_ids.is_empty() {
        return Err(Error::InvalidConfig("at least one novel class is required".into()));
    }
    if let Some(dup) = novel_ids.iter().find(|id| base.class_ids.contains(id)) {
        return Err(Error::Roster(format!("class {dup} is already in the classifier")));
    }
    let d = base.dim();
    let mut novel = Matrix::zeros(novel_ids.len(), d);
    match init_features {
        Some(sets) => {
            if sets.len() != novel_ids.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} init sets for {} novel classes",
                    sets.len(),
                    novel_ids.len()
                )));
            }
            for (k, set) in sets.iter().enumerate() {
                if set.rows() == 0 {
                    return Err(Error::EmptyInitClass { class: k });
                }
                if set.cols() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: set.cols(),
                    });
                }
                let row = novel.row_mut(k);
                for x in set.iter_rows() {
                    axpy(1.0, x, row);
                }
                let n = norm(row);
                if n == 0.0 {
                    return Err(Error::ZeroNormVector { index: k });
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        None => random_rows(&mut novel, rng),
    }
    let mut prototypes = base.prototypes.clone();
    for row in novel.iter_rows() {
        prototypes.push_row(row)?;
    }
    let mut class_ids = base.class_ids.clone();
    class_ids.extend_from_slice(novel_ids);
    let mut frozen_rows = base.frozen_rows.clone();
    if freeze_base {
        frozen_rows.extend(0..base.num_classes());
    }
    let out = ClassifierParams {
        prototypes,
        scale: base.scale,
        frozen_rows,
        class_ids,
    };
    out.validate()?;
    Ok(out)
}
