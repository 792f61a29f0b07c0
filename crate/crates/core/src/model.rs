//! The full network: parameters, vocabulary and the per-post forward graph.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attention_nodes, Attention, AttentionBundle, AttentionNodes};
use crate::cmat::CMat;
use crate::config::{EmbeddingMode, TrainConfig};
use crate::data::{tokenize, CorpusExample, Embeddings, EMPTY_TOKEN};
use crate::encoder::{sentence_node, Gru, SentenceInputs};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Gradients, Graph, NodeId, ParamId, ParamKind, ParamStore};
use crate::measurement::{classification, logits_node, measure_node, target_index, Classification, CLASSES};

const OOV_SIGMA: f64 = 0.1;
const LOGIT_INIT: f64 = 0.1;
const ATTENTION_INIT: f64 = 0.1;

/// Parameter handles in registration order.
#[derive(Clone, Debug)]
pub struct ModelIds {
    pub amplitude: ParamId,
    pub phase: ParamId,
    pub gru_amplitude: Gru<ParamId>,
    pub gru_phase: Gru<ParamId>,
    pub logits: ParamId,
    pub attention: Attention<ParamId>,
    pub states: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A token resolved against the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Known(usize),
    Unknown(String),
}

/// Tokenized post after applying the sentence, comment and token caps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedExample {
    pub sentences: Vec<Vec<Token>>,
    pub comments: Vec<Vec<Token>>,
    pub label: u8,
}

/// Result of a forward pass over one post.
#[derive(Clone, Debug)]
pub struct Forward {
    pub classification: Classification,
    /// Concatenated measurement vector fed to the classifier.
    pub measurements: Vec<f64>,
    pub bundle: AttentionBundle,
}

pub(crate) struct ForwardNodes {
    pub attention: AttentionNodes,
    pub measurements: NodeId,
    pub logits: NodeId,
    pub loss: NodeId,
}

#[derive(Clone, Debug)]
pub struct QsanModel {
    config: TrainConfig,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    store: ParamStore,
    ids: ModelIds,
}

/// Names, shapes and kinds of every parameter, in registration order.
pub fn layout(cfg: &TrainConfig, vocab_len: usize) -> Vec<(String, (usize, usize), ParamKind)> {
    let d = cfg.d;
    let mut out = vec![
        ("embed.amplitude".to_owned(), (vocab_len, d), ParamKind::Real),
        ("embed.phase".to_owned(), (vocab_len, d), ParamKind::Real),
    ];
    for stream in ["amp", "phase"] {
        for f in Gru::<()>::FIELDS {
            let shape = if f.starts_with('b') { (1, d) } else { (d, d) };
            out.push((format!("gru.{stream}.{f}"), shape, ParamKind::Real));
        }
    }
    out.push(("mixture.logits".to_owned(), (1, cfg.max_tokens), ParamKind::Real));
    for f in Attention::<()>::FIELDS {
        let shape = if f.starts_with('w') { (d * d, cfg.k) } else { (1, cfg.k) };
        out.push((format!("attn.{f}"), shape, ParamKind::Complex));
    }
    out.push(("measure.states".to_owned(), (cfg.z, d), ParamKind::Complex));
    out.push(("classifier.weight".to_owned(), (CLASSES, cfg.classifier_width()), ParamKind::Real));
    out.push(("classifier.bias".to_owned(), (1, CLASSES), ParamKind::Real));
    out
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic amplitude and phase rows for a token without a pretrained
/// vector: a normal draw (σ = 0.1) normalized to unit length, and uniform
/// phases, both seeded by the token's hash.
pub fn hashed_embedding(token: &str, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token));
    let normal = Normal::new(0.0, OOV_SIGMA).expect("valid sigma");
    let mut r: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        r.iter_mut().for_each(|x| *x /= norm);
    }
    let phase = (0..d).map(|_| rng.random_range(-PI..=PI)).collect();
    (r, phase)
}

/// Vocabulary in first-appearance order over posts then comments, with the
/// empty-sentence token first.
pub fn build_vocab(corpus: &[CorpusExample]) -> Vec<String> {
    let mut vocab = vec![EMPTY_TOKEN.to_owned()];
    let mut seen: std::collections::HashSet<String> = vocab.iter().cloned().collect();
    for ex in corpus {
        for text in ex.post.iter().chain(&ex.comments) {
            for t in tokenize(text) {
                if seen.insert(t.clone()) {
                    vocab.push(t);
                }
            }
        }
    }
    vocab
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl QsanModel {
    /// Fresh model with the vocabulary of `corpus`.
    pub fn new(config: TrainConfig, corpus: &[CorpusExample], embeddings: Option<&Embeddings>) -> Result<Self> {
        Self::with_vocab(config, build_vocab(corpus), embeddings)
    }

    /// Fresh model over an explicit vocabulary, initialized from `config.seed`.
    pub fn with_vocab(config: TrainConfig, vocab: Vec<String>, embeddings: Option<&Embeddings>) -> Result<Self> {
        config.validate()?;
        if let Some(e) = embeddings {
            if e.dim != config.d {
                return Err(Error::Argument(format!("embedding dimension {} does not match d = {}", e.dim, config.d)));
            }
        }
        let pretrained: HashMap<&str, &[f64]> = embeddings
            .map(|e| e.entries.iter().map(|(t, v)| (t.as_str(), v.as_slice())).collect())
            .unwrap_or_default();
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = Vec::new();
        for (name, (rows, cols), kind) in layout(&config, vocab.len()) {
            let value = match name.as_str() {
                "embed.amplitude" => {
                    let mut re = Vec::with_capacity(rows * cols);
                    for t in &vocab {
                        match pretrained.get(t.as_str()) {
                            Some(v) => re.extend_from_slice(v),
                            None => re.extend(hashed_embedding(t, d).0),
                        }
                    }
                    CMat::from_real(rows, cols, re)?
                }
                "embed.phase" => match config.embedding_mode {
                    EmbeddingMode::Complex => CMat::from_real(rows, cols, uniform(&mut rng, rows, cols, PI))?,
                    EmbeddingMode::Real => CMat::zeros(rows, cols),
                },
                "mixture.logits" => CMat::from_real(rows, cols, uniform(&mut rng, rows, cols, LOGIT_INIT))?,
                "measure.states" => {
                    let re = uniform(&mut rng, rows, cols, 1.0);
                    CMat::from_parts(rows, cols, re, uniform(&mut rng, rows, cols, 1.0))?
                }
                "classifier.weight" => {
                    let bound = 1.0 / (cols as f64).sqrt();
                    CMat::from_real(rows, cols, uniform(&mut rng, rows, cols, bound))?
                }
                "classifier.bias" => CMat::zeros(rows, cols),
                n if n.starts_with("gru.") => {
                    CMat::from_real(rows, cols, uniform(&mut rng, rows, cols, 1.0 / (d as f64).sqrt()))?
                }
                n if n.starts_with("attn.") => {
                    let re = uniform(&mut rng, rows, cols, ATTENTION_INIT);
                    CMat::from_parts(rows, cols, re, uniform(&mut rng, rows, cols, ATTENTION_INIT))?
                }
                other => unreachable!("no initializer for {other}"),
            };
            tensors.push((name, value, kind));
        }
        Self::assemble(config, vocab, tensors)
    }

    /// Builds a model from named tensors that must match [`layout`] exactly.
    pub fn from_tensors(config: TrainConfig, vocab: Vec<String>, tensors: Vec<(String, CMat)>) -> Result<Self> {
        config.validate()?;
        let mut by_name: HashMap<String, CMat> = tensors.into_iter().collect();
        let expected = layout(&config, vocab.len());
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape, kind) in expected {
            let value = by_name
                .remove(&name)
                .ok_or_else(|| Error::Argument(format!("missing tensor `{name}`")))?;
            if value.shape() != shape {
                return Err(Error::Argument(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    value.shape()
                )));
            }
            ordered.push((name, value, kind));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Argument(format!("unexpected tensor `{extra}`")));
        }
        Self::assemble(config, vocab, ordered)
    }

    fn assemble(config: TrainConfig, vocab: Vec<String>, tensors: Vec<(String, CMat, ParamKind)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let mut store = ParamStore::new();
        for (name, value, kind) in tensors {
            store.add(name, value, kind)?;
        }
        let id = |name: &str| store.id(name).expect("registered by layout");
        let ids = ModelIds {
            amplitude: id("embed.amplitude"),
            phase: id("embed.phase"),
            gru_amplitude: Gru::from_fn(|f| Ok(id(&format!("gru.amp.{f}"))))?,
            gru_phase: Gru::from_fn(|f| Ok(id(&format!("gru.phase.{f}"))))?,
            logits: id("mixture.logits"),
            attention: Attention::from_fn(|f| Ok(id(&format!("attn.{f}"))))?,
            states: id("measure.states"),
            weight: id("classifier.weight"),
            bias: id("classifier.bias"),
        };
        if config.embedding_mode == EmbeddingMode::Real {
            if store.value(ids.phase).re().iter().any(|&p| p != 0.0) {
                return Err(Error::Argument("real embedding mode needs all phases at zero".into()));
            }
            store.set_trainable(ids.phase, false);
            for (_, &p) in ids.gru_phase.iter() {
                store.set_trainable(p, false);
            }
        }
        Ok(Self {
            config,
            vocab,
            index,
            store,
            ids,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Value of the parameter called `name`.
    pub fn param(&self, name: &str) -> Option<&CMat> {
        self.store.id(name).map(|id| self.store.value(id))
    }

    fn resolve(&self, text: &str) -> Vec<Token> {
        let mut tokens = tokenize(text);
        tokens.truncate(self.config.max_tokens);
        tokens
            .into_iter()
            .map(|t| match self.index.get(&t) {
                Some(&i) => Token::Known(i),
                None => Token::Unknown(t),
            })
            .collect()
    }

    /// Tokenizes a post and applies the sentence, comment and token caps
    /// (excess items are dropped from the tail).
    pub fn prepare(&self, ex: &CorpusExample) -> Result<PreparedExample> {
        if ex.post.is_empty() || ex.comments.is_empty() {
            return Err(Error::Argument(format!(
                "post `{}` needs at least one sentence and one comment",
                ex.id
            )));
        }
        target_index(ex.label)?;
        let sentences = ex.post.iter().take(self.config.max_sentences).map(|s| self.resolve(s)).collect();
        let comments = ex.comments.iter().take(self.config.max_comments).map(|s| self.resolve(s)).collect();
        Ok(PreparedExample {
            sentences,
            comments,
            label: ex.label,
        })
    }

    fn rows_node(&self, g: &mut Graph, table: ParamId, tokens: &[Token], phase: bool) -> Result<NodeId> {
        let known: Option<Vec<usize>> = tokens
            .iter()
            .map(|t| match t {
                Token::Known(i) => Some(*i),
                Token::Unknown(_) => None,
            })
            .collect();
        if let Some(idx) = known {
            return g.gather(table, &idx);
        }
        let d = self.config.d;
        let mut rows = Vec::with_capacity(tokens.len());
        for t in tokens {
            rows.push(match t {
                Token::Known(i) => g.gather(table, &[*i])?,
                Token::Unknown(s) => {
                    let (r, p) = hashed_embedding(s, d);
                    g.constant(CMat::from_real(1, d, if phase { p } else { r })?)
                }
            });
        }
        g.vstack(&rows)
    }

    /// Builds the forward graph of one prepared post over `g`'s store.
    pub(crate) fn build(&self, g: &mut Graph, ex: &PreparedExample) -> Result<ForwardNodes> {
        let complex = self.config.embedding_mode == EmbeddingMode::Complex;
        let gru_amplitude = self.ids.gru_amplitude.nodes(g);
        let gru_phase = if complex {
            self.ids.gru_phase.nodes(g)
        } else {
            gru_amplitude.clone()
        };
        let logits = g.param(self.ids.logits);
        let encode = |g: &mut Graph, texts: &[Vec<Token>]| -> Result<Vec<NodeId>> {
            texts
                .iter()
                .map(|tokens| {
                    let amplitude = self.rows_node(g, self.ids.amplitude, tokens, false)?;
                    let phase = if complex {
                        Some(self.rows_node(g, self.ids.phase, tokens, true)?)
                    } else {
                        None
                    };
                    let logits = g.cols(logits, 0, tokens.len())?;
                    sentence_node(
                        g,
                        SentenceInputs {
                            amplitude,
                            phase,
                            gru_amplitude: &gru_amplitude,
                            gru_phase: &gru_phase,
                            logits,
                        },
                    )
                })
                .collect()
        };
        let sentences = encode(g, &ex.sentences)?;
        let comments = encode(g, &ex.comments)?;
        let w = self.ids.attention.nodes(g);
        let attention = attention_nodes(g, &sentences, &comments, &w, self.config.attention_mode)?;
        let states = g.param(self.ids.states);
        let mut qs = Vec::new();
        for f in attention.features() {
            qs.push(measure_node(g, f, states)?);
        }
        let measurements = g.hconcat(&qs)?;
        let (weight, bias) = (g.param(self.ids.weight), g.param(self.ids.bias));
        let logits = logits_node(g, measurements, weight, bias)?;
        let loss = g.cross_entropy(logits, target_index(ex.label)?)?;
        Ok(ForwardNodes {
            attention,
            measurements,
            logits,
            loss,
        })
    }

    pub fn forward_prepared(&self, ex: &PreparedExample) -> Result<Forward> {
        let mut g = Graph::new(&self.store);
        let nodes = self.build(&mut g, ex)?;
        let l = g.value(nodes.logits).re();
        Ok(Forward {
            classification: classification([l[0], l[1]], target_index(ex.label)?),
            measurements: g.value(nodes.measurements).re().to_vec(),
            bundle: nodes.attention.bundle(&g),
        })
    }

    pub fn forward(&self, ex: &CorpusExample) -> Result<Forward> {
        self.forward_prepared(&self.prepare(ex)?)
    }

    pub fn predict(&self, ex: &CorpusExample) -> Result<Classification> {
        Ok(self.forward(ex)?.classification)
    }

    /// Summed loss over `examples` and its gradients, evaluated with the
    /// parameter values in `store` (which must share this model's layout).
    pub fn loss_with_store(&self, store: &ParamStore, examples: &[PreparedExample]) -> Result<(f64, Gradients)> {
        let mut total = 0.0;
        let mut grads = Gradients::empty(store.len());
        for ex in examples {
            let mut g = Graph::new(store);
            let nodes = self.build(&mut g, ex)?;
            total += g.value(nodes.loss).re()[0];
            for (id, grad) in g.backward(nodes.loss)?.iter() {
                let sum = match grads.get(id) {
                    Some(prev) => prev.add(grad)?,
                    None => grad.clone(),
                };
                grads.set(id, sum);
            }
        }
        Ok((total, grads))
    }

    pub fn loss_and_gradients(&self, ex: &PreparedExample) -> Result<(f64, Gradients)> {
        self.loss_with_store(&self.store, std::slice::from_ref(ex))
    }

    /// Finite-difference check of every trainable parameter on `examples`.
    pub fn grad_check(&self, examples: &[PreparedExample], cfg: GradCheckConfig) -> Result<GradCheckReport> {
        let mut store = self.store.clone();
        grad_check(&mut store, |s| self.loss_with_store(s, examples), cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AttentionMode;

    fn corpus() -> Vec<CorpusExample> {
        vec![
            CorpusExample {
                id: "a".into(),
                label: 1,
                post: vec!["The moon is made of cheese.".into(), "Scientists confirm it!".into()],
                comments: vec![
                    "this is obviously fake news".into(),
                    "wow the moon really is cheese".into(),
                    "source please, not convinced".into(),
                ],
            },
            CorpusExample {
                id: "b".into(),
                label: 0,
                post: vec!["Water boils at 100 degrees at sea level.".into()],
                comments: vec!["yes that is basic physics".into(), "correct at standard pressure".into()],
            },
        ]
    }

    fn small(mode: AttentionMode, emb: EmbeddingMode) -> TrainConfig {
        TrainConfig {
            d: 4,
            k: 3,
            z: 4,
            attention_mode: mode,
            embedding_mode: emb,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn vocab_order_and_hashing() {
        let v = build_vocab(&corpus());
        assert_eq!(&v[..4], &[EMPTY_TOKEN, "the", "moon", "is"]);
        let (a, p) = hashed_embedding("cheese", 6);
        assert_eq!(hashed_embedding("cheese", 6), (a.clone(), p));
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_ne!(hashed_embedding("chalk", 6).0, a);
    }

    #[test]
    fn pretrained_rows_are_used() {
        let emb = Embeddings {
            dim: 4,
            entries: vec![("moon".into(), vec![1.0, 2.0, 3.0, 4.0])],
        };
        let m = QsanModel::new(small(AttentionMode::Signed, EmbeddingMode::Complex), &corpus(), Some(&emb)).unwrap();
        let row = &m.param("embed.amplitude").unwrap().re()[2 * 4..3 * 4];
        assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        let bad = Embeddings { dim: 3, entries: vec![] };
        assert!(QsanModel::new(small(AttentionMode::Signed, EmbeddingMode::Complex), &corpus(), Some(&bad)).is_err());
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        for mode in [AttentionMode::Signed, AttentionMode::Co] {
            let cfg = small(mode, EmbeddingMode::Complex);
            let m = QsanModel::new(cfg.clone(), &corpus(), None).unwrap();
            assert_eq!(m.param("classifier.weight").unwrap().shape(), (2, cfg.classifier_width()));
            let f = m.forward(&corpus()[0]).unwrap();
            assert_eq!(f.measurements.len(), cfg.classifier_width());
            assert_eq!(f.bundle.m.shape(), (2, 3));
            assert_eq!(f.bundle.comment_pos.weights.shape(), (1, 3));
            assert!((f.classification.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(f.bundle.comment_neg.is_some(), mode == AttentionMode::Signed);
        }
    }

    #[test]
    fn unknown_tokens_and_caps() {
        let cfg = TrainConfig {
            max_tokens: 2,
            max_comments: 1,
            ..small(AttentionMode::Signed, EmbeddingMode::Complex)
        };
        let m = QsanModel::new(cfg, &corpus()[..1], None).unwrap();
        let ex = CorpusExample {
            id: "x".into(),
            label: 0,
            post: vec!["the unseenword moon".into(), "!!!".into()],
            comments: vec!["moon".into(), "ignored".into()],
        };
        let p = m.prepare(&ex).unwrap();
        assert_eq!(p.sentences[0], vec![Token::Known(1), Token::Unknown("unseenword".into())]);
        assert_eq!(p.sentences[1], vec![Token::Known(0)]);
        assert_eq!(p.comments.len(), 1);
        let a = m.forward_prepared(&p).unwrap();
        let b = m.forward_prepared(&p).unwrap();
        assert_eq!(a.classification, b.classification);

        let empty = CorpusExample { comments: vec![], ..ex };
        assert!(m.prepare(&empty).is_err());
    }

    #[test]
    fn real_mode_freezes_phase() {
        let m = QsanModel::new(small(AttentionMode::Signed, EmbeddingMode::Real), &corpus(), None).unwrap();
        assert!(m.param("embed.phase").unwrap().re().iter().all(|&p| p == 0.0));
        let p = m.prepare(&corpus()[0]).unwrap();
        let (_, grads) = m.loss_and_gradients(&p).unwrap();
        assert!(grads.get(m.ids().phase).is_none());
        assert!(grads.get(m.ids().gru_phase.w_z).is_none());
        assert!(grads.get(m.ids().amplitude).is_some());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (mode, emb) in [
            (AttentionMode::Signed, EmbeddingMode::Complex),
            (AttentionMode::Co, EmbeddingMode::Real),
        ] {
            let m = QsanModel::new(small(mode, emb), &corpus(), None).unwrap();
            let p: Vec<_> = corpus().iter().map(|e| m.prepare(e).unwrap()).collect();
            let report = m.grad_check(&p, GradCheckConfig::default()).unwrap();
            let worst = report.worst().unwrap();
            assert!(worst.max_rel_error < 1e-4, "{mode:?} {emb:?}: {worst:?}");
        }
    }

    #[test]
    fn from_tensors_checks_layout() {
        let m = QsanModel::new(small(AttentionMode::Signed, EmbeddingMode::Complex), &corpus(), None).unwrap();
        let tensors: Vec<_> = m.store().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let back = QsanModel::from_tensors(m.config().clone(), m.vocab().to_vec(), tensors.clone()).unwrap();
        assert_eq!(back.forward(&corpus()[0]).unwrap().measurements, m.forward(&corpus()[0]).unwrap().measurements);
        assert!(QsanModel::from_tensors(m.config().clone(), m.vocab().to_vec(), tensors[1..].to_vec()).is_err());
    }
}
