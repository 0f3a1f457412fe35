use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FeatureSet, Modality, ModalitySetting};
use crate::kgdata::{Dataset, Triple};

/// Bound on negative resampling when every candidate collides with a train triple.
const MAX_RESAMPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub dim: usize,
    pub margin: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { dim: 64, margin: 1.0, negatives: 1, epochs: 200, learning_rate: 0.01, seed: 0 }
    }
}

/// Triple as entity and relation indices into a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdTriple {
    pub h: u32,
    pub r: u32,
    pub t: u32,
}

impl IdTriple {
    pub fn new(h: usize, r: usize, t: usize) -> Self {
        Self { h: h as u32, r: r as u32, t: t as u32 }
    }
}

/// Maps dataset triples to indices. Panics on ids foreign to `dataset`.
pub fn id_triples(dataset: &Dataset, triples: &[Triple]) -> Vec<IdTriple> {
    triples
        .iter()
        .map(|t| {
            IdTriple::new(
                dataset.entity_index(&t.head).expect("unknown head"),
                dataset.relation_index(&t.relation).expect("unknown relation"),
                dataset.entity_index(&t.tail).expect("unknown tail"),
            )
        })
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("setting activates {0:?} but no features were supplied for it")]
    MissingFeatures(Modality),
    #[error("features cover {features} entities, dataset has {dataset}")]
    FeatureMismatch { features: usize, dataset: usize },
    #[error(
        "loss became {loss} in epoch {epoch} with learning rate {learning_rate}; \
         lower the learning rate (try {suggested}) or check feature values"
    )]
    NonFinite { epoch: usize, loss: f64, learning_rate: f64, suggested: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean margin loss per sampled negative, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Translational model over gated modality embeddings.
///
/// Projections are stored input-major: input feature `j` owns
/// `proj[j*dim .. (j+1)*dim]`. Text and generated text share one projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub hyper: HyperParams,
    pub setting: ModalitySetting,
    pub entity_count: usize,
    pub relation_count: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Base gate per active modality; renormalized per entity over available inputs.
    pub gates: BTreeMap<Modality, f64>,
    pub entity_struct: Vec<f64>,
    pub relations: Vec<f64>,
    pub text_projection: Vec<f64>,
    pub image_projection: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn clip_norm(v: &mut [f64], max: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max {
        v.iter_mut().for_each(|x| *x *= max / n);
    }
}

impl Model {
    /// Seeded initialization; structure rows and relations start at unit norm.
    pub fn init(
        entity_count: usize,
        relation_count: usize,
        features: &FeatureSet,
        setting: &ModalitySetting,
        hyper: &HyperParams,
    ) -> Self {
        let d = hyper.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let bound = 6.0 / (d as f64).sqrt();
        let mut entity_struct = uniform(&mut rng, entity_count * d, bound);
        let mut relations = uniform(&mut rng, relation_count * d, bound);
        for row in entity_struct.chunks_mut(d).chain(relations.chunks_mut(d)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        let xavier = |fan_in: usize| (6.0 / (fan_in + d) as f64).sqrt();
        let text_projection = uniform(&mut rng, features.text_dim * d, xavier(features.text_dim));
        let image_projection = uniform(&mut rng, features.image_dim * d, xavier(features.image_dim.max(1)));
        let active = setting.modalities();
        let gates = active.iter().map(|m| (*m, 1.0 / active.len() as f64)).collect();
        Self {
            hyper: hyper.clone(),
            setting: setting.clone(),
            entity_count,
            relation_count,
            text_dim: features.text_dim,
            image_dim: features.image_dim,
            gates,
            entity_struct,
            relations,
            text_projection,
            image_projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim
    }

    /// Renormalized gate weights for entity `i`, indexed like [`Modality::ALL`].
    pub fn entity_gates(&self, features: &FeatureSet, i: usize) -> [f64; 4] {
        let mut w = [0.0; 4];
        for (&m, &g) in &self.gates {
            let available = match m {
                Modality::Structure => true,
                Modality::Text => !features.text[i].is_zero(),
                Modality::Generated => features.generated.get(i).is_some_and(|v| !v.is_zero()),
                Modality::Image => features.image[i].as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0)),
            };
            if available {
                w[m as usize] = g;
            }
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
        w
    }

    /// E(i) written into `out`; returns the gate weights used.
    pub fn embed_entity(&self, features: &FeatureSet, i: usize, out: &mut [f64]) -> [f64; 4] {
        let d = self.dim();
        let w = self.entity_gates(features, i);
        out.iter_mut().for_each(|x| *x = 0.0);
        if w[0] > 0.0 {
            for (o, s) in out.iter_mut().zip(&self.entity_struct[i * d..(i + 1) * d]) {
                *o += w[0] * s;
            }
        }
        for (slot, vec) in [(1, &features.text), (2, &features.generated)] {
            if w[slot] > 0.0 {
                for (j, f) in vec[i].iter() {
                    let col = &self.text_projection[j * d..(j + 1) * d];
                    for (o, c) in out.iter_mut().zip(col) {
                        *o += w[slot] * f * c;
                    }
                }
            }
        }
        if w[3] > 0.0 {
            for (j, f) in features.image[i].as_deref().unwrap_or_default().iter().enumerate() {
                let col = &self.image_projection[j * d..(j + 1) * d];
                for (o, c) in out.iter_mut().zip(col) {
                    *o += w[3] * f * c;
                }
            }
        }
        w
    }

    pub fn relation(&self, r: usize) -> &[f64] {
        &self.relations[r * self.dim()..(r + 1) * self.dim()]
    }

    /// Entity and relation embeddings ready for scoring.
    pub fn embed(&self, features: &FeatureSet) -> Embeddings {
        let d = self.dim();
        let mut entities = vec![0.0; self.entity_count * d];
        for (i, row) in entities.chunks_mut(d).enumerate() {
            self.embed_entity(features, i, row);
        }
        Embeddings { dim: d, entities, relations: self.relations.clone() }
    }

    /// Applies `-lr * grad` to every parameter feeding E(i).
    fn step_entity(&mut self, features: &FeatureSet, i: usize, w: &[f64; 4], grad: &[f64], lr: f64) {
        let d = self.dim();
        if w[0] > 0.0 {
            for (s, g) in self.entity_struct[i * d..(i + 1) * d].iter_mut().zip(grad) {
                *s -= lr * w[0] * g;
            }
        }
        for (slot, vec) in [(1, &features.text), (2, &features.generated)] {
            if w[slot] > 0.0 {
                for (j, f) in vec[i].iter() {
                    for (c, g) in self.text_projection[j * d..(j + 1) * d].iter_mut().zip(grad) {
                        *c -= lr * w[slot] * f * g;
                    }
                }
            }
        }
        if w[3] > 0.0 {
            for (j, f) in features.image[i].as_deref().unwrap_or_default().iter().enumerate() {
                for (c, g) in self.image_projection[j * d..(j + 1) * d].iter_mut().zip(grad) {
                    *c -= lr * w[3] * f * g;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        [&self.entity_struct, &self.relations, &self.text_projection, &self.image_projection]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn check_features(dataset: &Dataset, features: &FeatureSet, setting: &ModalitySetting) -> Result<(), TrainError> {
    if features.entity_count() != dataset.entities.len() || features.image.len() != dataset.entities.len() {
        return Err(TrainError::FeatureMismatch { features: features.entity_count(), dataset: dataset.entities.len() });
    }
    if setting.is_active(Modality::Generated) && features.generated.len() != dataset.entities.len() {
        return Err(TrainError::MissingFeatures(Modality::Generated));
    }
    if setting.is_active(Modality::Image) && !features.has_images() {
        return Err(TrainError::MissingFeatures(Modality::Image));
    }
    Ok(())
}

/// Difference vector E(h)+R(r)-E(t) and its norm.
struct Side {
    wh: [f64; 4],
    wt: [f64; 4],
    diff: Vec<f64>,
    dist: f64,
}

fn side(model: &Model, features: &FeatureSet, t: IdTriple, eh: &mut [f64], et: &mut [f64]) -> Side {
    let wh = model.embed_entity(features, t.h as usize, eh);
    let wt = model.embed_entity(features, t.t as usize, et);
    let diff: Vec<f64> =
        eh.iter().zip(model.relation(t.r as usize)).zip(et.iter()).map(|((h, r), t)| h + r - t).collect();
    let dist = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    Side { wh, wt, diff, dist }
}

/// Margin-ranking SGD with uniform head/tail corruption, deterministic in `hyper.seed`.
pub fn train(
    dataset: &Dataset,
    features: &FeatureSet,
    setting: &ModalitySetting,
    hyper: &HyperParams,
) -> Result<(Model, TrainLog), TrainError> {
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    check_features(dataset, features, setting)?;
    let n = dataset.entities.len();
    let mut model = Model::init(n, dataset.relations.len(), features, setting, hyper);
    let train = id_triples(dataset, &dataset.train);
    let known: HashSet<IdTriple> = train.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let d = hyper.dim;
    let lr = hyper.learning_rate;
    let (mut eh, mut et) = (vec![0.0; d], vec![0.0; d]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let pos = train[k];
            for _ in 0..hyper.negatives.max(1) {
                let mut neg = pos;
                for _ in 0..MAX_RESAMPLE {
                    let e = rng.gen_range(0..n) as u32;
                    neg = if rng.gen_bool(0.5) { IdTriple { h: e, ..pos } } else { IdTriple { t: e, ..pos } };
                    if !known.contains(&neg) {
                        break;
                    }
                }
                let p = side(&model, features, pos, &mut eh, &mut et);
                let q = side(&model, features, neg, &mut eh, &mut et);
                let loss = (hyper.margin + p.dist - q.dist).max(0.0);
                total += loss;
                if loss <= 0.0 {
                    continue;
                }
                let unit = |s: &Side| -> Vec<f64> {
                    if s.dist > 0.0 {
                        s.diff.iter().map(|x| x / s.dist).collect()
                    } else {
                        vec![0.0; d]
                    }
                };
                let gp = unit(&p);
                let gn: Vec<f64> = unit(&q).into_iter().map(|x| -x).collect();
                let neg_gp: Vec<f64> = gp.iter().map(|x| -x).collect();
                let neg_gn: Vec<f64> = gn.iter().map(|x| -x).collect();
                let rel = pos.r as usize;
                for (j, x) in model.relations[rel * d..(rel + 1) * d].iter_mut().enumerate() {
                    *x -= lr * (gp[j] + gn[j]);
                }
                model.step_entity(features, pos.h as usize, &p.wh, &gp, lr);
                model.step_entity(features, pos.t as usize, &p.wt, &neg_gp, lr);
                model.step_entity(features, neg.h as usize, &q.wh, &gn, lr);
                model.step_entity(features, neg.t as usize, &q.wt, &neg_gn, lr);
                for e in [pos.h, pos.t, neg.h, neg.t] {
                    let e = e as usize;
                    clip_norm(&mut model.entity_struct[e * d..(e + 1) * d], 1.0);
                }
            }
        }
        let mean = total / (train.len() * hyper.negatives.max(1)) as f64;
        tracing::debug!(epoch, loss = mean, "epoch done");
        if !mean.is_finite() || !model.all_finite() {
            return Err(TrainError::NonFinite { epoch, loss: mean, learning_rate: lr, suggested: lr / 10.0 });
        }
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}

/// Entity-major embedding table; scores are negative L2 distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub entities: Vec<f64>,
    pub relations: Vec<f64>,
}

impl Embeddings {
    pub fn entity(&self, i: usize) -> &[f64] {
        &self.entities[i * self.dim..(i + 1) * self.dim]
    }

    pub fn relation(&self, r: usize) -> &[f64] {
        &self.relations[r * self.dim..(r + 1) * self.dim]
    }

    pub fn score(&self, h: usize, r: usize, t: usize) -> f64 {
        let (eh, rr, et) = (self.entity(h), self.relation(r), self.entity(t));
        -(0..self.dim).map(|k| (eh[k] + rr[k] - et[k]).powi(2)).sum::<f64>().sqrt()
    }
}

impl super::Scorer for Embeddings {
    fn entity_count(&self) -> usize {
        self.entities.len() / self.dim.max(1)
    }

    fn score(&self, h: usize, r: usize, t: usize) -> f64 {
        Embeddings::score(self, h, r, t)
    }
}
