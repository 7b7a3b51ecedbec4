use serde::{Deserialize, Serialize};

use crate::data::dataset::GzslDataset;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAX_REJECTIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_s: usize,
    pub d_x: usize,
    pub per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_seen: 5,
            n_unseen: 3,
            d_s: 8,
            d_x: 16,
            per_class: 200,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Random binary class prototypes with pairwise Hamming distance at least `⌈d_s/3⌉`.
fn prototypes(n: usize, d_s: usize, rng: &mut RngState) -> Result<Vec<Vec<u8>>> {
    let min_dist = d_s.div_ceil(3);
    let mut out: Vec<Vec<u8>> = Vec::with_capacity(n);
    let mut rejections = 0;
    while out.len() < n {
        let cand: Vec<u8> = (0..d_s).map(|_| rng.bernoulli(0.5) as u8).collect();
        let ok = cand.contains(&1) && out.iter().all(|p| hamming(p, &cand) >= min_dist);
        if ok {
            out.push(cand);
        } else {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::InvalidArgument(format!(
                    "cannot place {n} binary prototypes of width {d_s} at Hamming distance \
                     {min_dist} within {MAX_REJECTIONS} rejections"
                )));
            }
        }
    }
    Ok(out)
}

/// Linearly embedded binary prototypes plus Gaussian feature noise.
///
/// Classes `0..n_seen` are seen; each seen class is split 80/20 into
/// train/test, and every unseen row goes to the unseen test pool.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GzslDataset> {
    if spec.n_seen == 0 || spec.n_unseen == 0 {
        return Err(Error::InvalidArgument(
            "n_seen and n_unseen must be at least 1".into(),
        ));
    }
    if spec.d_s == 0 || spec.d_x == 0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument(
            "d_s, d_x and per_class must be positive".into(),
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be non-negative, got {}",
            spec.noise_sigma
        )));
    }
    let mut rng = RngState::new(spec.seed);
    let n_classes = spec.n_seen + spec.n_unseen;
    let protos = prototypes(n_classes, spec.d_s, &mut rng)?;
    let attr: Vec<f32> = protos.iter().flatten().map(|&b| b as f32).collect();
    let attributes = Tensor::new(vec![n_classes, spec.d_s], attr)?;

    let map: Tensor<f64> = rng
        .gaussian(&[spec.d_s, spec.d_x])
        .scale(1.0 / (spec.d_s as f64).sqrt());
    let clean = attributes.cast::<f64>().matmul(&map)?;

    let n = n_classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.d_x);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for _ in 0..spec.per_class {
            for &v in clean.row(c) {
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * rng.standard_normal()
                } else {
                    0.0
                };
                features.push((v + noise) as f32);
            }
            labels.push(c);
        }
    }

    let n_train = (spec.per_class * 4).div_ceil(5).min(spec.per_class);
    let (mut train_seen, mut test_seen, mut test_unseen) = (vec![], vec![], vec![]);
    for c in 0..n_classes {
        let mut rows: Vec<usize> = (c * spec.per_class..(c + 1) * spec.per_class).collect();
        if c < spec.n_seen {
            rng.shuffle(&mut rows);
            let (tr, te) = rows.split_at(n_train);
            train_seen.extend_from_slice(tr);
            test_seen.extend_from_slice(te);
        } else {
            test_unseen.extend(rows);
        }
    }
    train_seen.sort_unstable();
    test_seen.sort_unstable();

    let ds = GzslDataset {
        name: format!("synthetic-{}", spec.seed),
        features: Tensor::new(vec![n, spec.d_x], features)?,
        labels,
        attributes,
        train_seen,
        test_seen,
        test_unseen,
        seen_classes: (0..spec.n_seen).collect(),
        unseen_classes: (spec.n_seen..n_classes).collect(),
    };
    ds.validate()?;
    Ok(ds)
}
