//! Two-channel signed attention between post sentences and comments.
//!
//! Sentence and comment density matrices measure each other to form the
//! affinity `M_ij = tr(ρ^s_i ρ^c_j)`, `L = tanh(M)`. Attention maps
//!
//! ```text
//! H^s = ctanh(ρ^s W^s + L (ρ^c W^c))
//! H^c = ctanh(ρ^c W^c + Lᵀ (ρ^s W^s))
//! ```
//!
//! are scored by `1 × k` heads and normalized with `csoftmax` in the positive
//! channel and `−csoftmax(−·)` in the negative channel. Each channel's weights
//! mix the input density matrices into a complex feature matrix.
//!
//! `ρ W` contracts both matrix indices: `(ρ W)_{iz} = Σ_{a,b} ρ_i[a,b] W[a,b,z]`.
//! A `d × d × k` tensor is stored as a `d² × k` matrix with row `a·d + b`.

use serde::{Deserialize, Serialize};

use crate::cmat::{CMat, Channel};
use crate::encoder::{DensityKind, DensityMatrix};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamStore};

/// Largest tolerated imaginary residue of an affinity entry.
pub const AFFINITY_IMAG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Both the positive and the negative channel.
    #[default]
    Signed,
    /// Positive channel only (co-attention).
    Co,
}

impl AttentionMode {
    pub fn channels(self) -> usize {
        match self {
            AttentionMode::Signed => 2,
            AttentionMode::Co => 1,
        }
    }
}

/// Attention weights: `ws`/`wc` are `d² × k`; the four heads are `1 × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub ws: T,
    pub wc: T,
    pub s_pos: T,
    pub s_neg: T,
    pub c_pos: T,
    pub c_neg: T,
}

pub type AttentionParams = Attention<CMat>;

impl<T> Attention<T> {
    pub const FIELDS: [&'static str; 6] = ["ws", "wc", "s_pos", "s_neg", "c_pos", "c_neg"];

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            ws: f(&self.ws),
            wc: f(&self.wc),
            s_pos: f(&self.s_pos),
            s_neg: f(&self.s_neg),
            c_pos: f(&self.c_pos),
            c_neg: f(&self.c_neg),
        }
    }

    pub fn from_fn(mut f: impl FnMut(&'static str) -> Result<T>) -> Result<Attention<T>> {
        Ok(Attention {
            ws: f("ws")?,
            wc: f("wc")?,
            s_pos: f("s_pos")?,
            s_neg: f("s_neg")?,
            c_pos: f("c_pos")?,
            c_neg: f("c_neg")?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
        Self::FIELDS
            .into_iter()
            .zip([&self.ws, &self.wc, &self.s_pos, &self.s_neg, &self.c_pos, &self.c_neg])
    }
}

impl Attention<ParamId> {
    pub fn nodes(&self, g: &mut Graph) -> Attention<NodeId> {
        self.map(|&id| g.param(id))
    }
}

/// Raw scores `W·Hᵀ` and normalized weights of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    pub raw: CMat,
    pub weights: CMat,
}

/// Everything the attention stage computed for one post.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBundle {
    /// `N × T` affinity (real).
    pub m: CMat,
    /// `tanh(M)`.
    pub l: CMat,
    pub h_s: CMat,
    pub h_c: CMat,
    pub sentence_pos: ChannelWeights,
    pub sentence_neg: Option<ChannelWeights>,
    pub comment_pos: ChannelWeights,
    pub comment_neg: Option<ChannelWeights>,
}

/// Output of [`run_attention`]: the feature matrices plus the bundle.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub sentence_pos: DensityMatrix,
    pub sentence_neg: Option<DensityMatrix>,
    pub comment_pos: DensityMatrix,
    pub comment_neg: Option<DensityMatrix>,
    pub bundle: AttentionBundle,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelNodes {
    pub raw: NodeId,
    pub weights: NodeId,
}

#[derive(Clone, Debug)]
pub(crate) struct AttentionNodes {
    pub m: NodeId,
    pub l: NodeId,
    pub h_s: NodeId,
    pub h_c: NodeId,
    pub sentence_pos: ChannelNodes,
    pub sentence_neg: Option<ChannelNodes>,
    pub comment_pos: ChannelNodes,
    pub comment_neg: Option<ChannelNodes>,
    pub feat_s_pos: NodeId,
    pub feat_s_neg: Option<NodeId>,
    pub feat_c_pos: NodeId,
    pub feat_c_neg: Option<NodeId>,
}

impl AttentionNodes {
    pub fn bundle(&self, g: &Graph) -> AttentionBundle {
        let ch = |c: &ChannelNodes| ChannelWeights {
            raw: g.value(c.raw).clone(),
            weights: g.value(c.weights).clone(),
        };
        AttentionBundle {
            m: g.value(self.m).clone(),
            l: g.value(self.l).clone(),
            h_s: g.value(self.h_s).clone(),
            h_c: g.value(self.h_c).clone(),
            sentence_pos: ch(&self.sentence_pos),
            sentence_neg: self.sentence_neg.as_ref().map(ch),
            comment_pos: ch(&self.comment_pos),
            comment_neg: self.comment_neg.as_ref().map(ch),
        }
    }

    /// Feature matrices in classifier order: `s_pos, s_neg, c_pos, c_neg`
    /// (negative channels omitted in co mode).
    pub fn features(&self) -> Vec<NodeId> {
        [Some(self.feat_s_pos), self.feat_s_neg, Some(self.feat_c_pos), self.feat_c_neg]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// Stacks `d × d` matrices as rows of length `d²`, optionally transposing each
/// matrix first.
pub(crate) fn stack_flat(g: &mut Graph, rhos: &[NodeId], transpose: bool) -> Result<NodeId> {
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let (d, e) = g.shape(rho);
        let src = if transpose { g.transpose(rho) } else { rho };
        rows.push(g.reshape(src, 1, d * e)?);
    }
    g.vstack(&rows)
}

/// `M = Re(R^s · (R^c_T)ᵀ)` where the rows of `R^c_T` are the flattened
/// transposes of the comment matrices, so `M_ij = Σ_{ab} ρ^s_i[a,b] ρ^c_j[b,a]`.
pub(crate) fn affinity_nodes(g: &mut Graph, rs: NodeId, rc_t: NodeId) -> Result<(NodeId, NodeId)> {
    let rct = g.transpose(rc_t);
    let full = g.matmul(rs, rct)?;
    let v = g.value(full);
    for r in 0..v.rows() {
        for c in 0..v.cols() {
            let residue = v.get(r, c).1.abs();
            if residue >= AFFINITY_IMAG_TOLERANCE {
                return Err(Error::NonRealAffinity { row: r, col: c, residue });
            }
        }
    }
    let m = g.real_part(full);
    let l = g.tanh(m);
    Ok((m, l))
}

pub(crate) fn attention_map_nodes(
    g: &mut Graph,
    rs: NodeId,
    rc: NodeId,
    l: NodeId,
    ws: NodeId,
    wc: NodeId,
) -> Result<(NodeId, NodeId)> {
    let ps = g.matmul(rs, ws)?;
    let pc = g.matmul(rc, wc)?;
    let cross_s = g.matmul(l, pc)?;
    let pre_s = g.add(ps, cross_s)?;
    let h_s = g.tanh(pre_s);
    let lt = g.transpose(l);
    let cross_c = g.matmul(lt, ps)?;
    let pre_c = g.add(pc, cross_c)?;
    let h_c = g.tanh(pre_c);
    Ok((h_s, h_c))
}

pub(crate) fn channel_nodes(g: &mut Graph, h: NodeId, head: NodeId, channel: Channel) -> Result<ChannelNodes> {
    let ht = g.transpose(h);
    let raw = g.matmul(head, ht)?;
    let weights = g.csoftmax(raw, channel)?;
    Ok(ChannelNodes { raw, weights })
}

/// `Σ_i a_i ρ_i` as the product of the `1 × n` weights with the stacked
/// `n × d²` matrices, reshaped to `d × d`.
pub(crate) fn feature_node(g: &mut Graph, a: NodeId, stacked: NodeId, d: usize) -> Result<NodeId> {
    let flat = g.matmul(a, stacked)?;
    g.reshape(flat, d, d)
}

pub(crate) fn attention_nodes(
    g: &mut Graph,
    sentences: &[NodeId],
    comments: &[NodeId],
    w: &Attention<NodeId>,
    mode: AttentionMode,
) -> Result<AttentionNodes> {
    if sentences.is_empty() || comments.is_empty() {
        return Err(Error::Argument("attention needs at least one sentence and one comment".into()));
    }
    let d = g.shape(sentences[0]).0;
    let rs = stack_flat(g, sentences, false)?;
    let rc = stack_flat(g, comments, false)?;
    let rc_t = stack_flat(g, comments, true)?;
    let (m, l) = affinity_nodes(g, rs, rc_t)?;
    let (h_s, h_c) = attention_map_nodes(g, rs, rc, l, w.ws, w.wc)?;

    let sentence_pos = channel_nodes(g, h_s, w.s_pos, Channel::Pos)?;
    let comment_pos = channel_nodes(g, h_c, w.c_pos, Channel::Pos)?;
    let (sentence_neg, comment_neg) = match mode {
        AttentionMode::Signed => (
            Some(channel_nodes(g, h_s, w.s_neg, Channel::Neg)?),
            Some(channel_nodes(g, h_c, w.c_neg, Channel::Neg)?),
        ),
        AttentionMode::Co => (None, None),
    };

    let feat_s_pos = feature_node(g, sentence_pos.weights, rs, d)?;
    let feat_c_pos = feature_node(g, comment_pos.weights, rc, d)?;
    let feat_s_neg = sentence_neg.map(|c| feature_node(g, c.weights, rs, d)).transpose()?;
    let feat_c_neg = comment_neg.map(|c| feature_node(g, c.weights, rc, d)).transpose()?;

    Ok(AttentionNodes {
        m,
        l,
        h_s,
        h_c,
        sentence_pos,
        sentence_neg,
        comment_pos,
        comment_neg,
        feat_s_pos,
        feat_s_neg,
        feat_c_pos,
        feat_c_neg,
    })
}

fn check_dims(rhos: &[&DensityMatrix]) -> Result<usize> {
    let d = rhos
        .first()
        .ok_or_else(|| Error::Argument("empty list of density matrices".into()))?
        .dim();
    for r in rhos {
        if r.dim() != d {
            return Err(Error::shape("density matrices", (d, d), (r.dim(), r.dim())));
        }
    }
    Ok(d)
}

fn constants(g: &mut Graph, rhos: &[DensityMatrix]) -> Vec<NodeId> {
    rhos.iter().map(|r| g.constant(r.mat().clone())).collect()
}

/// Affinity `M` and `L = tanh(M)`, both `N × T` with zero imaginary plane.
pub fn affinity(sentences: &[DensityMatrix], comments: &[DensityMatrix]) -> Result<(CMat, CMat)> {
    check_dims(&sentences.iter().chain(comments).collect::<Vec<_>>())?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = constants(&mut g, sentences);
    let c = constants(&mut g, comments);
    let rs = stack_flat(&mut g, &s, false)?;
    let rc_t = stack_flat(&mut g, &c, true)?;
    let (m, l) = affinity_nodes(&mut g, rs, rc_t)?;
    Ok((g.value(m).clone(), g.value(l).clone()))
}

/// Attention maps `(H^s, H^c)` of shapes `N × k` and `T × k`.
pub fn attention_maps(
    sentences: &[DensityMatrix],
    comments: &[DensityMatrix],
    l: &CMat,
    params: &AttentionParams,
) -> Result<(CMat, CMat)> {
    let d = check_dims(&sentences.iter().chain(comments).collect::<Vec<_>>())?;
    if l.shape() != (sentences.len(), comments.len()) {
        return Err(Error::shape("attention_maps", (sentences.len(), comments.len()), l.shape()));
    }
    if params.ws.rows() != d * d || params.wc.rows() != d * d {
        return Err(Error::shape("attention_maps", (d * d, params.ws.cols()), params.ws.shape()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = constants(&mut g, sentences);
    let c = constants(&mut g, comments);
    let rs = stack_flat(&mut g, &s, false)?;
    let rc = stack_flat(&mut g, &c, false)?;
    let l = g.constant(l.clone());
    let ws = g.constant(params.ws.clone());
    let wc = g.constant(params.wc.clone());
    let (hs, hc) = attention_map_nodes(&mut g, rs, rc, l, ws, wc)?;
    Ok((g.value(hs).clone(), g.value(hc).clone()))
}

/// Both channels for one attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedWeights {
    pub pos: ChannelWeights,
    pub neg: ChannelWeights,
}

/// `raw_pos = W_pos·Hᵀ`, `raw_neg = W_neg·Hᵀ`, `a_pos = csoftmax(raw_pos)`,
/// `a_neg = −csoftmax(−raw_neg)`.
pub fn signed_weights(h: &CMat, w_pos: &CMat, w_neg: &CMat) -> Result<SignedWeights> {
    if h.rows() == 0 {
        return Err(Error::Argument("attention map has no rows".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let hn = g.constant(h.clone());
    let wp = g.constant(w_pos.clone());
    let wn = g.constant(w_neg.clone());
    let pos = channel_nodes(&mut g, hn, wp, Channel::Pos)?;
    let neg = channel_nodes(&mut g, hn, wn, Channel::Neg)?;
    let ch = |c: ChannelNodes| ChannelWeights {
        raw: g.value(c.raw).clone(),
        weights: g.value(c.weights).clone(),
    };
    Ok(SignedWeights { pos: ch(pos), neg: ch(neg) })
}

/// `Σ_i a_i ρ_i` with complex weights; the result is a feature matrix.
pub fn feature_matrices(a: &CMat, rhos: &[DensityMatrix]) -> Result<DensityMatrix> {
    let d = check_dims(&rhos.iter().collect::<Vec<_>>())?;
    if a.rows() != 1 || a.cols() != rhos.len() {
        return Err(Error::shape("feature_matrices", (1, rhos.len()), a.shape()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let r = constants(&mut g, rhos);
    let stacked = stack_flat(&mut g, &r, false)?;
    let an = g.constant(a.clone());
    let f = feature_node(&mut g, an, stacked, d)?;
    DensityMatrix::new(g.value(f).clone(), DensityKind::Feature)
}

/// Full attention stage for one post.
pub fn run_attention(
    sentences: &[DensityMatrix],
    comments: &[DensityMatrix],
    params: &AttentionParams,
    mode: AttentionMode,
) -> Result<AttentionOutput> {
    let d = check_dims(&sentences.iter().chain(comments).collect::<Vec<_>>())?;
    if params.ws.rows() != d * d || params.wc.shape() != params.ws.shape() {
        return Err(Error::shape("run_attention", (d * d, params.ws.cols()), params.wc.shape()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let s = constants(&mut g, sentences);
    let c = constants(&mut g, comments);
    let w = params.map(|m| g.constant(m.clone()));
    let nodes = attention_nodes(&mut g, &s, &c, &w, mode)?;
    let feat = |id: NodeId| DensityMatrix::new(g.value(id).clone(), DensityKind::Feature);
    Ok(AttentionOutput {
        sentence_pos: feat(nodes.feat_s_pos)?,
        sentence_neg: nodes.feat_s_neg.map(feat).transpose()?,
        comment_pos: feat(nodes.feat_c_pos)?,
        comment_neg: nodes.feat_c_neg.map(feat).transpose()?,
        bundle: nodes.bundle(&g),
    })
}
