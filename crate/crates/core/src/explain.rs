//! Comment stance and importance from the comment attention channels.
//!
//! For comment `j` the raw pair `(re⁺, im⁺)` comes from the positive
//! channel's pre-softmax row and `(re⁻, im⁻)` from the negative channel's.
//! `s±` are their moduli, `sn±` the moduli of the normalized weights, and
//! `imp = |sn⁺ − sn⁻|`. In co mode the negative values are all zero.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionBundle;
use crate::data::CorpusExample;
use crate::error::{Error, Result};
use crate::model::QsanModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Supporting,
    Opposing,
    Neutral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommentSignature {
    pub re_pos: f64,
    pub im_pos: f64,
    pub re_neg: f64,
    pub im_neg: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub sn_plus: f64,
    pub sn_minus: f64,
    pub imp: f64,
    pub stance: Stance,
}

impl CommentSignature {
    /// Signature from raw and normalized pairs; the stance is left neutral.
    pub fn from_parts(raw_pos: (f64, f64), raw_neg: (f64, f64), norm_pos: (f64, f64), norm_neg: (f64, f64)) -> Self {
        let sn_plus = norm_pos.0.hypot(norm_pos.1);
        let sn_minus = norm_neg.0.hypot(norm_neg.1);
        Self {
            re_pos: raw_pos.0,
            im_pos: raw_pos.1,
            re_neg: raw_neg.0,
            im_neg: raw_neg.1,
            s_plus: raw_pos.0.hypot(raw_pos.1),
            s_minus: raw_neg.0.hypot(raw_neg.1),
            sn_plus,
            sn_minus,
            imp: (sn_plus - sn_minus).abs(),
            stance: Stance::Neutral,
        }
    }

    fn positive_pattern(&self) -> bool {
        self.re_pos > 0.0 && self.im_pos > 0.0
    }

    fn negative_pattern(&self) -> bool {
        self.re_neg < 0.0 && self.im_neg < 0.0
    }
}

fn raw_signatures(bundle: &AttentionBundle) -> Vec<CommentSignature> {
    let t = bundle.comment_pos.raw.cols();
    (0..t)
        .map(|j| {
            let (raw_neg, norm_neg) = match &bundle.comment_neg {
                Some(c) => (c.raw.get(0, j), c.weights.get(0, j)),
                None => ((0.0, 0.0), (0.0, 0.0)),
            };
            CommentSignature::from_parts(
                bundle.comment_pos.raw.get(0, j),
                raw_neg,
                bundle.comment_pos.weights.get(0, j),
                norm_neg,
            )
        })
        .collect()
}

/// Signatures with stance labels for every comment of the bundle.
pub fn signatures(bundle: &AttentionBundle) -> Vec<CommentSignature> {
    let raw = raw_signatures(bundle);
    raw.iter()
        .map(|s| CommentSignature {
            stance: stance_label(s, &raw),
            ..*s
        })
        .collect()
}

/// Signature of comment `index`.
pub fn comment_signature(bundle: &AttentionBundle, index: usize) -> Result<CommentSignature> {
    let t = bundle.comment_pos.raw.cols();
    if index >= t {
        return Err(Error::Argument(format!("comment index {index} out of range for {t} comments")));
    }
    Ok(signatures(bundle)[index])
}

/// Dense rank of `value` among `values`, 1 for the largest.
fn dense_rank(value: f64, values: impl Iterator<Item = f64>) -> usize {
    let mut greater: Vec<f64> = values.filter(|&v| v > value).collect();
    greater.sort_by(f64::total_cmp);
    greater.dedup();
    greater.len() + 1
}

/// Stance by sign patterns of the raw pairs. When both patterns hold, the
/// side whose modulus ranks higher among `all` wins; equal ranks are neutral.
pub fn stance_label(sig: &CommentSignature, all: &[CommentSignature]) -> Stance {
    match (sig.positive_pattern(), sig.negative_pattern()) {
        (true, false) => Stance::Supporting,
        (false, true) => Stance::Opposing,
        (true, true) => {
            let plus = dense_rank(sig.s_plus, all.iter().map(|s| s.s_plus));
            let minus = dense_rank(sig.s_minus, all.iter().map(|s| s.s_minus));
            match plus.cmp(&minus) {
                Ordering::Less => Stance::Supporting,
                Ordering::Greater => Stance::Opposing,
                Ordering::Equal => Stance::Neutral,
            }
        }
        (false, false) => Stance::Neutral,
    }
}

/// Comment indices of the four explanation lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rankings {
    pub important: Vec<usize>,
    pub unimportant: Vec<usize>,
    pub supporting: Vec<usize>,
    pub opposing: Vec<usize>,
}

fn top_k(sigs: &[CommentSignature], k: usize, key: impl Fn(&CommentSignature) -> f64, descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sigs.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = key(&sigs[a]).total_cmp(&key(&sigs[b]));
        (if descending { ord.reverse() } else { ord }).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Top-k by `imp`, bottom-k by `imp`, top-k by `sn⁺` and top-k by `sn⁻`.
/// `k` is clipped to the number of comments; ties go to the lower index.
pub fn importance_rank(sigs: &[CommentSignature], k: usize) -> Result<Rankings> {
    if k == 0 {
        return Err(Error::Argument("explanation lists need k ≥ 1".into()));
    }
    Ok(Rankings {
        important: top_k(sigs, k, |s| s.imp, true),
        unimportant: top_k(sigs, k, |s| s.imp, false),
        supporting: top_k(sigs, k, |s| s.sn_plus, true),
        opposing: top_k(sigs, k, |s| s.sn_minus, true),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommentItem {
    pub comment_index: usize,
    pub text: String,
    pub s_plus: f64,
    pub s_minus: f64,
    pub sn_plus: f64,
    pub sn_minus: f64,
    pub imp: f64,
    pub stance: Stance,
}

/// One explanation record per post.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    /// Predicted label (1 = false).
    pub prediction: u8,
    pub p_false: f64,
    pub important: Vec<CommentItem>,
    pub unimportant: Vec<CommentItem>,
    pub supporting: Vec<CommentItem>,
    pub opposing: Vec<CommentItem>,
}

pub fn report(example: &CorpusExample, model: &QsanModel, k: usize) -> Result<Explanation> {
    let forward = model.forward(example)?;
    let sigs = signatures(&forward.bundle);
    let ranks = importance_rank(&sigs, k)?;
    let items = |ids: &[usize]| -> Vec<CommentItem> {
        ids.iter()
            .map(|&j| {
                let s = &sigs[j];
                CommentItem {
                    comment_index: j,
                    text: example.comments[j].clone(),
                    s_plus: s.s_plus,
                    s_minus: s.s_minus,
                    sn_plus: s.sn_plus,
                    sn_minus: s.sn_minus,
                    imp: s.imp,
                    stance: s.stance,
                }
            })
            .collect()
    };
    Ok(Explanation {
        id: example.id.clone(),
        prediction: forward.classification.label(),
        p_false: forward.classification.p_false(),
        important: items(&ranks.important),
        unimportant: items(&ranks.unimportant),
        supporting: items(&ranks.supporting),
        opposing: items(&ranks.opposing),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ChannelWeights;
    use crate::cmat::CMat;
    use crate::config::{AttentionMode, TrainConfig};
    use crate::synth::separable_corpus;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(rp: f64, ip: f64, rn: f64, in_: f64) -> CommentSignature {
        CommentSignature::from_parts((rp, ip), (rn, in_), (0.0, 0.0), (0.0, 0.0))
    }

    fn with_norm(sn_plus: f64, sn_minus: f64) -> CommentSignature {
        CommentSignature::from_parts((0.0, 0.0), (0.0, 0.0), (sn_plus, 0.0), (sn_minus, 0.0))
    }

    #[test]
    fn modulus_examples() {
        let s = raw(0.5, 0.3, -0.2, -0.1);
        assert_abs_diff_eq!(s.s_plus, 0.34f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.s_minus, 0.05f64.sqrt(), epsilon = 1e-15);
        let z = raw(0.0, 0.0, 0.0, 0.0);
        assert_eq!((z.s_plus, z.s_minus), (0.0, 0.0));
        assert_abs_diff_eq!(with_norm(0.9, 0.1).imp, 0.8, epsilon = 1e-15);
        assert_eq!(with_norm(0.3, 0.3).imp, 0.0);
    }

    #[test]
    fn stance_rules() {
        let a = raw(0.4, 0.2, 0.1, -0.3);
        assert_eq!(stance_label(&a, &[a]), Stance::Supporting);
        let b = raw(-0.1, 0.3, -0.2, -0.5);
        assert_eq!(stance_label(&b, &[b]), Stance::Opposing);
        let c = raw(0.4, 0.2, -0.2, -0.5);
        let others = [raw(0.9, 0.9, -0.1, 0.0), raw(0.6, 0.6, 0.0, -0.1), raw(0.1, 0.0, -0.1, -0.1), raw(0.0, 0.1, 0.0, 0.0)];
        let mut all = others.to_vec();
        all.push(c);
        assert_eq!(dense_rank(c.s_minus, all.iter().map(|s| s.s_minus)), 1);
        assert_eq!(dense_rank(c.s_plus, all.iter().map(|s| s.s_plus)), 3);
        assert_eq!(stance_label(&c, &all), Stance::Opposing);
        let tie = raw(0.3, 0.4, -0.3, -0.4);
        assert_eq!(stance_label(&tie, &[tie]), Stance::Neutral);
        assert_eq!(stance_label(&raw(0.3, -0.1, 0.2, -0.1), &[]), Stance::Neutral);
    }

    #[test]
    fn stance_is_invariant_to_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let sigs: Vec<_> = (0..6)
                .map(|_| raw(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let c = rng.random_range(0.1..10.0);
            let scaled: Vec<_> = sigs.iter().map(|s| raw(c * s.re_pos, c * s.im_pos, c * s.re_neg, c * s.im_neg)).collect();
            for (s, t) in sigs.iter().zip(&scaled) {
                assert_eq!(stance_label(s, &sigs), stance_label(t, &scaled));
            }
        }
    }

    #[test]
    fn rankings_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n = rng.random_range(1..9);
            let sigs: Vec<_> = (0..n)
                .map(|_| {
                    // Coarse values so ties occur.
                    let q = |r: &mut ChaCha8Rng| f64::from(r.random_range(0..4u8)) / 4.0;
                    with_norm(q(&mut rng), q(&mut rng))
                })
                .collect();
            let k = rng.random_range(1..12);
            let r = importance_rank(&sigs, k).unwrap();
            let brute = |key: &dyn Fn(usize) -> f64, desc: bool| {
                let mut all: Vec<(f64, usize)> = (0..n).map(|i| (if desc { -key(i) } else { key(i) }, i)).collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                all.into_iter().take(k.min(n)).map(|(_, i)| i).collect::<Vec<_>>()
            };
            assert_eq!(r.important, brute(&|i| sigs[i].imp, true));
            assert_eq!(r.unimportant, brute(&|i| sigs[i].imp, false));
            assert_eq!(r.supporting, brute(&|i| sigs[i].sn_plus, true));
            assert_eq!(r.opposing, brute(&|i| sigs[i].sn_minus, true));
            assert_eq!(importance_rank(&sigs, k).unwrap(), r);
        }
        assert!(importance_rank(&[], 0).is_err());
    }

    fn bundle(raw_pos: &[(f64, f64)], raw_neg: Option<&[(f64, f64)]>) -> AttentionBundle {
        let ch = |r: &[(f64, f64)]| ChannelWeights {
            raw: CMat::row_vector(r),
            weights: CMat::row_vector(&r.iter().map(|&(a, b)| (a / 2.0, b / 2.0)).collect::<Vec<_>>()),
        };
        let empty = ChannelWeights {
            raw: CMat::zeros(1, 1),
            weights: CMat::zeros(1, 1),
        };
        AttentionBundle {
            m: CMat::zeros(1, raw_pos.len()),
            l: CMat::zeros(1, raw_pos.len()),
            h_s: CMat::zeros(1, 1),
            h_c: CMat::zeros(raw_pos.len(), 1),
            sentence_pos: empty.clone(),
            sentence_neg: None,
            comment_pos: ch(raw_pos),
            comment_neg: raw_neg.map(ch),
        }
    }

    #[test]
    fn signature_reads_bundle_rows() {
        let b = bundle(&[(0.5, 0.3), (0.1, -0.2)], Some(&[(-0.2, -0.1), (0.3, 0.3)]));
        let s = comment_signature(&b, 0).unwrap();
        assert_eq!((s.re_pos, s.im_pos, s.re_neg, s.im_neg), (0.5, 0.3, -0.2, -0.1));
        assert_abs_diff_eq!(s.sn_plus, 0.34f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_eq!(s.stance, Stance::Supporting);
        assert!(comment_signature(&b, 2).is_err());
        let co = comment_signature(&bundle(&[(-0.5, -0.3)], None), 0).unwrap();
        assert_eq!((co.s_minus, co.sn_minus, co.stance), (0.0, 0.0, Stance::Neutral));
    }

    #[test]
    fn report_is_consistent_and_clipped() {
        for mode in [AttentionMode::Signed, AttentionMode::Co] {
            let corpus = separable_corpus(4, 3);
            let cfg = TrainConfig {
                d: 4,
                k: 3,
                z: 2,
                attention_mode: mode,
                ..TrainConfig::default()
            };
            let model = QsanModel::new(cfg, &corpus, None).unwrap();
            let ex = &corpus[0];
            let r = report(ex, &model, 50).unwrap();
            let t = ex.comments.len();
            assert_eq!((r.important.len(), r.supporting.len()), (t, t));
            assert_eq!(report(ex, &model, 50).unwrap(), r);
            let p = model.predict(ex).unwrap();
            assert_eq!((r.prediction, r.p_false), (p.label(), p.p_false()));
            for item in &r.important {
                assert_eq!(item.text, ex.comments[item.comment_index]);
                assert_abs_diff_eq!(item.imp, (item.sn_plus - item.sn_minus).abs(), epsilon = 1e-15);
            }
            let json = serde_json::to_value(&r).unwrap();
            assert!(json["important"][0]["stance"].is_string());
        }
    }
}
