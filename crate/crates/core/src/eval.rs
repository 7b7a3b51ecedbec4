//! Nearest-prototype classification of sampled semantics and GZSL metrics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{GzslDataset, Split};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::rng::RngState;
use crate::sampling::{sample, GuidanceConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// `1 − ⟨a,b⟩/(‖a‖‖b‖)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine_distance", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine distance of a zero vector".into(),
        ));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Which prototypes the nearest-neighbour search considers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Unseen classes only.
    Zsl,
    /// Seen and unseen classes.
    #[default]
    Gzsl,
}

/// Class attribute rows and the seen/unseen partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    /// One row per class id, `[n_classes × d_s]`.
    pub attributes: Tensor<f64>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl ClassPrototypes {
    pub fn new(attributes: Tensor<f64>, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        let n = attributes.rows();
        let s: HashSet<_> = seen.iter().collect();
        if unseen.iter().any(|c| s.contains(c)) {
            return Err(Error::InvalidArgument(
                "seen and unseen classes overlap".into(),
            ));
        }
        if let Some(&c) = seen.iter().chain(&unseen).find(|&&c| c >= n) {
            return Err(Error::InvalidArgument(format!(
                "class {c} has no prototype row"
            )));
        }
        for &c in seen.iter().chain(&unseen) {
            if attributes.row(c).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has an all-zero prototype"
                )));
            }
        }
        Ok(ClassPrototypes {
            attributes,
            seen,
            unseen,
        })
    }

    pub fn from_dataset(ds: &GzslDataset) -> Result<Self> {
        Self::new(
            ds.attributes.cast(),
            ds.seen_classes.clone(),
            ds.unseen_classes.clone(),
        )
    }

    /// Candidate class ids in ascending order.
    pub fn candidates(&self, mode: EvalMode) -> Vec<usize> {
        let mut ids = match mode {
            EvalMode::Zsl => self.unseen.clone(),
            EvalMode::Gzsl => self.seen.iter().chain(&self.unseen).copied().collect(),
        };
        ids.sort_unstable();
        ids
    }
}

/// Nearest prototype under cosine distance; ties go to the lowest class id.
pub fn nn_classify(
    query: &[f64],
    protos: &ClassPrototypes,
    mode: EvalMode,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for c in protos.candidates(mode) {
        let d = cosine_distance(query, protos.attributes.row(c))?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((c, d));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no candidate classes".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub split: Split,
    pub accuracy: f64,
    pub n: usize,
}

/// Per-class accuracies over `classes` (classes without samples are skipped).
pub fn class_accuracies(
    predictions: &[usize],
    truths: &[usize],
    classes: &[usize],
) -> Result<BTreeMap<usize, (usize, usize)>> {
    if predictions.len() != truths.len() {
        return Err(Error::dims(
            "per_class_accuracy",
            &[predictions.len()],
            &[truths.len()],
        ));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("empty class set".into()));
    }
    let set: HashSet<_> = classes.iter().collect();
    let mut counts = BTreeMap::new();
    for (&p, &t) in predictions.iter().zip(truths) {
        if !set.contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "truth {t} is not in the class set"
            )));
        }
        let e = counts.entry(t).or_insert((0, 0));
        e.0 += (p == t) as usize;
        e.1 += 1;
    }
    Ok(counts)
}

/// Unweighted mean of per-class accuracies.
pub fn per_class_accuracy(
    predictions: &[usize],
    truths: &[usize],
    classes: &[usize],
) -> Result<f64> {
    let counts = class_accuracies(predictions, truths, classes)?;
    if counts.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = counts.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(sum / counts.len() as f64)
}

/// `2SU/(S+U)`, zero when both are zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub zsl_unseen: f64,
    pub per_class: Vec<ClassAccuracy>,
}

impl GzslMetrics {
    /// Plain-text table: headline metrics in percent, then one line per class.
    pub fn table(&self) -> String {
        let mut out = format!(
            "S={:.1} U={:.1} H={:.1} zsl_unseen={:.1}\n",
            100.0 * self.s,
            100.0 * self.u,
            100.0 * self.h,
            100.0 * self.zsl_unseen
        );
        out.push_str("class  split   accuracy      n\n");
        for c in &self.per_class {
            let split = match c.split {
                Split::Seen => "seen",
                Split::Unseen => "unseen",
            };
            out.push_str(&format!(
                "{:>5}  {:<6}  {:>8.1}  {:>5}\n",
                c.class_id,
                split,
                100.0 * c.accuracy,
                c.n
            ));
        }
        out
    }
}

/// Produces one semantic estimate in `[0,1]^{d_s}` per feature row.
pub trait SemanticSampler {
    /// `truths` holds the ground-truth class of each row; only oracle stubs read it.
    fn sample(&mut self, features: &Tensor<f32>, truths: &[usize]) -> Result<Tensor<f64>>;
}

/// Guided diffusion sampling, averaging `n_draws` independent draws per row.
pub struct ModelSampler<'a> {
    pub model: &'a mut Denoiser<f32>,
    pub schedule: &'a NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub n_draws: usize,
}

impl SemanticSampler for ModelSampler<'_> {
    fn sample(&mut self, features: &Tensor<f32>, _truths: &[usize]) -> Result<Tensor<f64>> {
        let draws = self.n_draws.max(1);
        let mut acc = Tensor::<f64>::zeros(&[features.rows(), self.model.config.d_s]);
        for k in 0..draws {
            let mut g = self.guidance;
            if k > 0 {
                g.seed = RngState::derive(self.guidance.seed, k as u64).next_u64();
            }
            let s = sample(self.model, features, self.schedule, &g)?;
            acc.axpy(1.0 / draws as f64, &s.cast())?;
        }
        Ok(acc)
    }
}

/// Returns each row's true class attribute.
pub struct PrototypeEcho<'a>(pub &'a Tensor<f32>);

impl SemanticSampler for PrototypeEcho<'_> {
    fn sample(&mut self, _features: &Tensor<f32>, truths: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.0.select_rows(truths).cast())
    }
}

/// Returns the same vector for every row.
pub struct ConstantSampler(pub Vec<f64>);

impl SemanticSampler for ConstantSampler {
    fn sample(&mut self, features: &Tensor<f32>, _truths: &[usize]) -> Result<Tensor<f64>> {
        let rows = vec![self.0.clone(); features.rows()];
        Tensor::from_rows(&rows)
    }
}

/// Samples every seen-test and unseen-test row, then scores S/U/H in gzsl mode
/// and unseen accuracy in zsl mode. `per_class` follows `mode`.
pub fn evaluate(
    ds: &GzslDataset,
    sampler: &mut dyn SemanticSampler,
    mode: EvalMode,
) -> Result<GzslMetrics> {
    if ds.test_seen.is_empty() && ds.test_unseen.is_empty() {
        return Err(Error::Dataset("no test rows to evaluate".into()));
    }
    let protos = ClassPrototypes::from_dataset(ds)?;
    let rows: Vec<usize> = ds
        .test_seen
        .iter()
        .chain(&ds.test_unseen)
        .copied()
        .collect();
    let truths: Vec<usize> = rows.iter().map(|&r| ds.labels[r]).collect();
    let sampled = sampler.sample(&ds.features.select_rows(&rows), &truths)?;
    if sampled.dims() != [rows.len(), ds.d_s()] {
        return Err(Error::dims(
            "evaluate",
            sampled.dims(),
            &[rows.len(), ds.d_s()],
        ));
    }
    let classify = |m: EvalMode| -> Result<Vec<usize>> {
        (0..rows.len())
            .map(|i| {
                let q = sampled.row(i);
                if q.iter().all(|&v| v == 0.0) {
                    // an all-zero sample has no direction and matches no class
                    return Ok(usize::MAX);
                }
                nn_classify(q, &protos, m).map(|p| p.0)
            })
            .collect()
    };
    let gzsl = classify(EvalMode::Gzsl)?;
    let zsl = classify(EvalMode::Zsl)?;
    let n_seen = ds.test_seen.len();
    let (seen_t, unseen_t) = truths.split_at(n_seen);
    let score = |pred: &[usize], truth: &[usize], classes: &[usize]| -> Result<f64> {
        if truth.is_empty() {
            Ok(0.0)
        } else {
            per_class_accuracy(pred, truth, classes)
        }
    };
    let s = score(&gzsl[..n_seen], seen_t, &ds.seen_classes)?;
    let u = score(&gzsl[n_seen..], unseen_t, &ds.unseen_classes)?;
    let zsl_unseen = score(&zsl[n_seen..], unseen_t, &ds.unseen_classes)?;

    let mut per_class = Vec::new();
    let mut push = |pred: &[usize], truth: &[usize], classes: &[usize], split| -> Result<()> {
        if truth.is_empty() {
            return Ok(());
        }
        for (class_id, (correct, n)) in class_accuracies(pred, truth, classes)? {
            per_class.push(ClassAccuracy {
                class_id,
                split,
                accuracy: correct as f64 / n as f64,
                n,
            });
        }
        Ok(())
    };
    match mode {
        EvalMode::Gzsl => {
            push(&gzsl[..n_seen], seen_t, &ds.seen_classes, Split::Seen)?;
            push(&gzsl[n_seen..], unseen_t, &ds.unseen_classes, Split::Unseen)?;
        }
        EvalMode::Zsl => push(&zsl[n_seen..], unseen_t, &ds.unseen_classes, Split::Unseen)?,
    }
    Ok(GzslMetrics {
        s,
        u,
        h: harmonic_mean(s, u),
        zsl_unseen,
        per_class,
    })
}
