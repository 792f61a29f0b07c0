//! Per-example optimization and evaluation metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::config::{EmbeddingMode, OptimizerKind, TrainConfig};
use crate::data::{write_atomic, CorpusExample, Embeddings};
use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamStore};
use crate::model::{PreparedExample, QsanModel};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
/// Fraction of a corpus kept for training by [`train_test_split`].
pub const TRAIN_FRACTION: f64 = 0.75;

/// First-order optimizer over a parameter store. Real and imaginary planes
/// are updated as independent real coordinates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    /// First and second moments per parameter, `[re…, im…]`.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: usize) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            moments: vec![None; params],
        }
    }

    /// Applies one update. Parameters without a gradient entry are untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = g.len();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, dx) in p.value.re_mut().iter_mut().zip(g.re()) {
                        *x -= self.lr * dx;
                    }
                    for (x, dx) in p.value.im_mut().iter_mut().zip(g.im()) {
                        *x -= self.lr * dx;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; 2 * n], vec![0.0; 2 * n]));
                    let (re, im) = (g.re(), g.im());
                    for j in 0..2 * n {
                        let gj = if j < n { re[j] } else { im[j - n] };
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                        let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
                        if j < n {
                            p.value.re_mut()[j] -= update;
                        } else {
                            p.value.im_mut()[j - n] -= update;
                        }
                    }
                }
            }
        }
    }
}

/// Name of the first parameter with a non-finite value, else the first with a
/// non-finite gradient.
fn offending_group(store: &ParamStore, grads: &Gradients) -> String {
    store
        .iter()
        .find(|(_, p)| !p.value.is_finite())
        .or_else(|| store.iter().find(|(id, _)| grads.get(*id).is_some_and(|g| !g.is_finite())))
        .map_or_else(|| "input".to_owned(), |(_, p)| p.name.clone())
}

/// Trains a fresh model on `corpus` and returns it with the per-epoch mean loss.
pub fn fit(corpus: &[CorpusExample], cfg: &TrainConfig, embeddings: Option<&Embeddings>) -> Result<(QsanModel, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Argument("cannot train on an empty corpus".into()));
    }
    let mut model = QsanModel::new(cfg.clone(), corpus, embeddings)?;
    let history = fit_model(&mut model, corpus, |_, _, _| {})?;
    Ok((model, history))
}

/// Runs `model.config().epochs` epochs of shuffled per-example updates,
/// calling `observer(epoch, mean_loss, model)` after each epoch (1-based).
pub fn fit_model(
    model: &mut QsanModel,
    corpus: &[CorpusExample],
    mut observer: impl FnMut(usize, f64, &QsanModel),
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Argument("cannot train on an empty corpus".into()));
    }
    let prepared: Vec<PreparedExample> = corpus.iter().map(|ex| model.prepare(ex)).collect::<Result<_>>()?;
    let cfg = model.config().clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.store().len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = model.loss_and_gradients(&prepared[i])?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    group: offending_group(model.store(), &grads),
                    epoch,
                });
            }
            total += loss;
            optimizer.apply(model.store_mut(), &grads);
        }
        if let Some((_, p)) = model.store().iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFinite {
                group: p.name.clone(),
                epoch,
            });
        }
        let mean = total / prepared.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
        observer(epoch, mean, model);
    }
    Ok(history)
}

/// Confusion counts and derived scores with the false class (label 1) as
/// positive. An undefined precision or recall is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    /// Builds metrics from `(truth, prediction)` label pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (truth, pred) in pairs {
            match (truth, pred) {
                (1, 1) => tp += 1,
                (0, 1) => fp += 1,
                (1, 0) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

pub fn evaluate(model: &QsanModel, corpus: &[CorpusExample]) -> Result<Metrics> {
    if corpus.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty corpus".into()));
    }
    let pairs = corpus
        .iter()
        .map(|ex| Ok((ex.label, model.predict(ex)?.label())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_pairs(pairs))
}

/// Seeded random split with `round(0.75 n)` training examples.
pub fn train_test_split(corpus: &[CorpusExample], seed: u64) -> (Vec<CorpusExample>, Vec<CorpusExample>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let n_train = (corpus.len() as f64 * TRAIN_FRACTION).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| corpus[i].clone()).collect();
    (pick(&idx[..n_train]), pick(&idx[n_train..]))
}

/// Two columns: 1-based epoch and mean loss.
pub fn format_loss_history(history: &[f64]) -> String {
    history
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\t{l}\n", i + 1))
        .collect()
}

pub fn write_loss_history(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    write_atomic(path, format_loss_history(history).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmat::CMat;
    use crate::graph::ParamKind;
    use rand::Rng;

    fn corpus() -> Vec<CorpusExample> {
        (0..4)
            .map(|i| CorpusExample {
                id: format!("p{i}"),
                label: (i % 2) as u8,
                post: vec![if i % 2 == 0 { "calm sunny weather today" } else { "shocking secret cure found" }.into()],
                comments: vec!["interesting read here".into(), "i do not believe this".into(), "thanks for sharing".into()],
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            d: 3,
            k: 2,
            z: 2,
            epochs: 3,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let c = TrainConfig { epochs: 0, ..cfg() };
        let (model, history) = fit(&corpus(), &c, None).unwrap();
        let fresh = QsanModel::new(c, &corpus(), None).unwrap();
        assert!(history.is_empty());
        for ((_, a), (_, b)) in model.store().iter().zip(fresh.store().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn deterministic_history() {
        let (_, a) = fit(&corpus(), &cfg(), None).unwrap();
        let (_, b) = fit(&corpus(), &cfg(), None).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(fit(&[], &cfg(), None).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", CMat::from_parts(1, 2, vec![1.0, 1.0], vec![0.0, 2.0]).unwrap(), ParamKind::Complex).unwrap();
        let frozen = store.add("f", CMat::scalar(5.0, 0.0), ParamKind::Real).unwrap();
        let mut grads = Gradients::empty(2);
        grads.set(id, CMat::from_parts(1, 2, vec![0.5, -3.0], vec![0.0, 1e-3]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        opt.apply(&mut store, &grads);
        let v = store.value(id);
        assert!((v.re()[0] - 0.9).abs() < 1e-6);
        assert!((v.re()[1] - 1.1).abs() < 1e-6);
        assert_eq!(v.im()[0], 0.0);
        assert!((v.im()[1] - 1.9).abs() < 1e-4);
        assert_eq!(store.value(frozen).re()[0], 5.0);

        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
        sgd.apply(&mut store, &grads);
        assert!((store.value(id).re()[0] - 0.85).abs() < 1e-6);
    }

    #[test]
    fn metric_examples() {
        let perfect = Metrics::from_pairs([(1, 1), (0, 0), (1, 1)]);
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
        let balanced = Metrics::from_pairs([(1, 1), (0, 1), (1, 0), (0, 0)]);
        assert_eq!((balanced.accuracy, balanced.precision, balanced.recall, balanced.f1), (0.5, 0.5, 0.5, 0.5));
        let none = Metrics::from_pairs([(0, 0), (0, 0)]);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_match_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<(u8, u8)> = (0..200).map(|_| (rng.random_range(0..2), rng.random_range(0..2))).collect();
        let m = Metrics::from_pairs(pairs.clone());
        let count = |t, p| pairs.iter().filter(|&&x| x == (t, p)).count() as f64;
        let (tp, fp, fn_, tn) = (count(1, 1), count(0, 1), count(1, 0), count(0, 0));
        assert_eq!(m.accuracy, (tp + tn) / 200.0);
        assert_eq!(m.precision, tp / (tp + fp));
        assert_eq!(m.recall, tp / (tp + fn_));
        assert_eq!(m.f1, 2.0 * m.precision * m.recall / (m.precision + m.recall));
        assert_eq!(serde_json::to_value(m).unwrap()["fn"], fn_ as usize);
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let corpus: Vec<_> = (0..10).flat_map(|_| corpus()).enumerate().map(|(i, mut e)| {
            e.id = i.to_string();
            e
        }).collect();
        let (a, b) = train_test_split(&corpus, 3);
        assert_eq!((a.len(), b.len()), (30, 10));
        assert_eq!(train_test_split(&corpus, 3), (a.clone(), b.clone()));
        let mut ids: Vec<_> = a.iter().chain(&b).map(|e| e.id.parse::<usize>().unwrap()).collect();
        ids.sort();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn loss_history_format() {
        assert_eq!(format_loss_history(&[0.5, 0.25]), "1\t0.5\n2\t0.25\n");
    }

    #[test]
    fn non_finite_loss_names_group() {
        let mut model = QsanModel::new(cfg(), &corpus(), None).unwrap();
        let id = model.ids().weight;
        model.store_mut().get_mut(id).value.re_mut()[0] = f64::NAN;
        let err = fit_model(&mut model, &corpus(), |_, _, _| {}).unwrap_err();
        assert!(err.to_string().contains("classifier.weight"), "{err}");
    }
}
