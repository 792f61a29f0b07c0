//! Complex word states and sentence density matrices.
//!
//! A word is a unit vector `|w⟩ = [r_j e^{iφ_j}]` over `d` abstract basis
//! states. Words are contextualized by two real GRUs (one over amplitudes,
//! one over phases) and a sentence becomes the mixture
//! `ρ = Σ_i p_i |w_i⟩⟨w_i|` with softmax-normalized weights `p`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cmat::CMat;
use crate::error::{Error, Result};
use crate::graph::{wrap_angle, Graph, NodeId, ParamId, ParamStore, DEGENERATE_NORM};

/// Default cap on tokens per sentence or comment.
pub const DEFAULT_MAX_TOKENS: usize = 32;

/// A word as amplitude and phase vectors with `Σ r_j² = 1`, `r_j ≥ 0` and
/// `φ_j ∈ [−π, π]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WordState {
    amplitude: Vec<f64>,
    phase: Vec<f64>,
}

impl WordState {
    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn dim(&self) -> usize {
        self.amplitude.len()
    }

    /// The Cartesian `1 × d` row `[r_j cos φ_j + i r_j sin φ_j]`.
    pub fn to_cmat(&self) -> CMat {
        let entries: Vec<(f64, f64)> = self
            .amplitude
            .iter()
            .zip(&self.phase)
            .map(|(r, p)| (r * p.cos(), r * p.sin()))
            .collect();
        CMat::row_vector(&entries)
    }
}

/// Builds a normalized word state.
///
/// `r` is rescaled to unit L2 norm (the zero vector becomes uniform
/// `1/√d`). A negative amplitude is folded into the phase (`−r·e^{iφ} =
/// r·e^{i(φ+π)}`), so the complex vector is unchanged. Phases are wrapped into
/// `[−π, π]`.
pub fn word_to_state(r: &[f64], phase: &[f64]) -> Result<WordState> {
    if r.is_empty() || r.len() != phase.len() {
        return Err(Error::Argument(format!(
            "word state needs equal nonzero lengths, got {} and {}",
            r.len(),
            phase.len()
        )));
    }
    let d = r.len();
    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut amplitude = Vec::with_capacity(d);
    let mut out_phase = Vec::with_capacity(d);
    for (&x, &p) in r.iter().zip(phase) {
        let (a, p) = if norm < DEGENERATE_NORM {
            (1.0 / (d as f64).sqrt(), p)
        } else if x < 0.0 {
            (-x / norm, p + PI)
        } else {
            (x / norm, p)
        };
        amplitude.push(a);
        out_phase.push(wrap_angle(p));
    }
    Ok(WordState {
        amplitude,
        phase: out_phase,
    })
}

/// Adds two polar components `r₁e^{iφ₁} + r₂e^{iφ₂}` and returns the result in
/// polar form. Both summands zero yields `(0, 0)`.
pub fn superpose_polar(r1: f64, p1: f64, r2: f64, p2: f64) -> (f64, f64) {
    let y = r1 * p1.sin() + r2 * p2.sin();
    let x = r1 * p1.cos() + r2 * p2.cos();
    if x == 0.0 && y == 0.0 {
        return (0.0, 0.0);
    }
    let r = (r1 * r1 + r2 * r2 + 2.0 * r1 * r2 * (p1 - p2).cos()).max(0.0).sqrt();
    (r, y.atan2(x))
}

/// Per-dimension composition of two words, returned as `(amplitudes, phases)`.
/// The result is not renormalized.
pub fn superpose(w1: &WordState, w2: &WordState) -> Result<(Vec<f64>, Vec<f64>)> {
    if w1.dim() != w2.dim() {
        return Err(Error::shape("superpose", (1, w1.dim()), (1, w2.dim())));
    }
    Ok((0..w1.dim())
        .map(|j| superpose_polar(w1.amplitude[j], w1.phase[j], w2.amplitude[j], w2.phase[j]))
        .unzip())
}

/// Whether a density matrix is a proper mixture (Hermitian, PSD, unit trace)
/// or a complex-weighted attention feature that carries no such guarantee.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Proper,
    Feature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    mat: CMat,
    kind: DensityKind,
}

impl DensityMatrix {
    pub fn new(mat: CMat, kind: DensityKind) -> Result<Self> {
        if mat.rows() != mat.cols() || mat.is_empty() {
            return Err(Error::Argument(format!(
                "density matrix must be square and nonempty, got {:?}",
                mat.shape()
            )));
        }
        Ok(DensityMatrix { mat, kind })
    }

    /// `|ψ⟩⟨ψ|` for a row vector `ψ`.
    pub fn pure(psi: &CMat) -> Result<Self> {
        let outer = crate::cmat::cmul(&psi.transpose(), &psi.conj())?;
        Self::new(outer, DensityKind::Proper)
    }

    pub fn mat(&self) -> &CMat {
        &self.mat
    }

    pub fn kind(&self) -> DensityKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn trace(&self) -> (f64, f64) {
        self.mat.trace()
    }

    /// Largest entrywise deviation from the conjugate transpose.
    pub fn hermitian_defect(&self) -> f64 {
        self.mat.max_abs_diff(&self.mat.adjoint())
    }
}

/// Weights of one real gated recurrent unit with hidden size `d`:
///
/// ```text
/// z = σ(x·W_z + h·U_z + b_z)
/// r = σ(x·W_r + h·U_r + b_r)
/// n = tanh(x·W_n + (r ⊙ h)·U_n + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// `T` is a value ([`CMat`]), a parameter handle or a graph node.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru<T> {
    pub w_z: T,
    pub w_r: T,
    pub w_n: T,
    pub u_z: T,
    pub u_r: T,
    pub u_n: T,
    pub b_z: T,
    pub b_r: T,
    pub b_n: T,
}

pub type GruWeights = Gru<CMat>;

impl<T> Gru<T> {
    pub const FIELDS: [&'static str; 9] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Gru<U> {
        Gru {
            w_z: f(&self.w_z),
            w_r: f(&self.w_r),
            w_n: f(&self.w_n),
            u_z: f(&self.u_z),
            u_r: f(&self.u_r),
            u_n: f(&self.u_n),
            b_z: f(&self.b_z),
            b_r: f(&self.b_r),
            b_n: f(&self.b_n),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Gru<U>> {
        Ok(Gru {
            w_z: f(&self.w_z)?,
            w_r: f(&self.w_r)?,
            w_n: f(&self.w_n)?,
            u_z: f(&self.u_z)?,
            u_r: f(&self.u_r)?,
            u_n: f(&self.u_n)?,
            b_z: f(&self.b_z)?,
            b_r: f(&self.b_r)?,
            b_n: f(&self.b_n)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &T)> {
        Self::FIELDS.into_iter().zip([
            &self.w_z, &self.w_r, &self.w_n, &self.u_z, &self.u_r, &self.u_n, &self.b_z, &self.b_r, &self.b_n,
        ])
    }

    pub fn from_fn(mut f: impl FnMut(&'static str) -> Result<T>) -> Result<Gru<T>> {
        Ok(Gru {
            w_z: f("w_z")?,
            w_r: f("w_r")?,
            w_n: f("w_n")?,
            u_z: f("u_z")?,
            u_r: f("u_r")?,
            u_n: f("u_n")?,
            b_z: f("b_z")?,
            b_r: f("b_r")?,
            b_n: f("b_n")?,
        })
    }
}

impl GruWeights {
    pub fn zeros(d: usize) -> Self {
        Gru::from_fn(|name| Ok(if name.starts_with('b') { CMat::zeros(1, d) } else { CMat::zeros(d, d) }))
            .expect("infallible")
    }

    pub fn hidden(&self) -> usize {
        self.b_z.cols()
    }
}

/// The amplitude-stream and phase-stream GRUs.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub amplitude: GruWeights,
    pub phase: GruWeights,
}

impl Gru<ParamId> {
    pub fn nodes(&self, g: &mut Graph) -> Gru<NodeId> {
        self.map(|&id| g.param(id))
    }
}

/// Runs the GRU over the rows of `x` (`m × d`) from a zero initial state and
/// returns the stacked hidden states (`m × d`).
pub(crate) fn gru_sequence(g: &mut Graph, x: NodeId, w: &Gru<NodeId>) -> Result<NodeId> {
    let (m, d) = g.shape(x);
    let xz = g.matmul(x, w.w_z)?;
    let xr = g.matmul(x, w.w_r)?;
    let xn = g.matmul(x, w.w_n)?;
    let mut h = g.constant(CMat::zeros(1, d));
    let mut outputs = Vec::with_capacity(m);
    for t in 0..m {
        let gate = |g: &mut Graph, xw: NodeId, u: NodeId, b: NodeId, h: NodeId| -> Result<NodeId> {
            let xt = g.rows(xw, t, 1)?;
            let hu = g.matmul(h, u)?;
            let s = g.add(xt, hu)?;
            g.add(s, b)
        };
        let z_pre = gate(g, xz, w.u_z, w.b_z, h)?;
        let z = g.sigmoid(z_pre)?;
        let r_pre = gate(g, xr, w.u_r, w.b_r, h)?;
        let r = g.sigmoid(r_pre)?;
        let rh = g.mul(r, h)?;
        let n_pre = gate(g, xn, w.u_n, w.b_n, rh)?;
        let n = g.tanh(n_pre);
        let h_minus_n = g.sub(h, n)?;
        let zd = g.mul(z, h_minus_n)?;
        h = g.add(n, zd)?;
        outputs.push(h);
    }
    g.vstack(&outputs)
}

/// `ρ = Σ_i softmax(logits)_i |w_i⟩⟨w_i|` for word rows `w` (`m × d`) and a
/// real `1 × m` logit row.
pub(crate) fn mixture_node(g: &mut Graph, words: NodeId, logits: NodeId) -> Result<NodeId> {
    let p = g.softmax(logits)?;
    let weighted = g.scale_rows(words, p)?;
    let wt = g.transpose(weighted);
    let conj = g.conj(words);
    g.matmul(wt, conj)
}

/// Graph inputs for encoding one sentence.
pub(crate) struct SentenceInputs<'g> {
    pub amplitude: NodeId,
    pub phase: Option<NodeId>,
    pub gru_amplitude: &'g Gru<NodeId>,
    pub gru_phase: &'g Gru<NodeId>,
    pub logits: NodeId,
}

/// Encodes raw amplitude/phase rows into a sentence density matrix node.
/// With `phase = None` the words stay real (all phases zero).
pub(crate) fn sentence_node(g: &mut Graph, inputs: SentenceInputs<'_>) -> Result<NodeId> {
    let r0 = g.normalize_rows(inputs.amplitude)?;
    let ha = gru_sequence(g, r0, inputs.gru_amplitude)?;
    let r = g.normalize_rows(ha)?;
    let words = match inputs.phase {
        Some(phase) => {
            let p0 = g.wrap_phase(phase)?;
            let hp = gru_sequence(g, p0, inputs.gru_phase)?;
            let p = g.wrap_phase(hp)?;
            g.polar(r, p)?
        }
        None => r,
    };
    mixture_node(g, words, inputs.logits)
}

fn states_matrix(states: &[WordState]) -> Result<(CMat, CMat)> {
    let d = states[0].dim();
    let mut amp = Vec::with_capacity(states.len() * d);
    let mut phase = Vec::with_capacity(states.len() * d);
    for s in states {
        if s.dim() != d {
            return Err(Error::shape("word states", (1, d), (1, s.dim())));
        }
        amp.extend_from_slice(&s.amplitude);
        phase.extend_from_slice(&s.phase);
    }
    Ok((
        CMat::from_real(states.len(), d, amp)?,
        CMat::from_real(states.len(), d, phase)?,
    ))
}

/// Contextualizes a word sequence with the amplitude and phase GRUs. Sequences
/// longer than `max_tokens` are truncated.
pub fn contextualize(states: &[WordState], params: &GruParams, max_tokens: usize) -> Result<Vec<WordState>> {
    if states.is_empty() {
        return Err(Error::Argument("contextualize needs at least one word".into()));
    }
    let states = if states.len() > max_tokens {
        log::warn!("truncating sequence of {} words to {max_tokens}", states.len());
        &states[..max_tokens]
    } else {
        states
    };
    let d = states[0].dim();
    for w in [&params.amplitude, &params.phase] {
        if w.hidden() != d || w.w_z.shape() != (d, d) || w.u_z.shape() != (d, d) {
            return Err(Error::shape("contextualize", (d, d), w.w_z.shape()));
        }
    }
    let (amp, phase) = states_matrix(states)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let ga = params.amplitude.map(|m| g.constant(m.clone()));
    let gp = params.phase.map(|m| g.constant(m.clone()));
    let a = g.constant(amp);
    let p = g.constant(phase);
    let ha = gru_sequence(&mut g, a, &ga)?;
    let hp = gru_sequence(&mut g, p, &gp)?;
    let (ha, hp) = (g.value(ha), g.value(hp));
    (0..states.len())
        .map(|t| word_to_state(&ha.re()[t * d..(t + 1) * d], &hp.re()[t * d..(t + 1) * d]))
        .collect()
}

/// Mixes word states into a proper density matrix with `p = softmax(logits)`.
pub fn mixture(states: &[WordState], logits: &[f64]) -> Result<DensityMatrix> {
    if states.is_empty() || states.len() != logits.len() {
        return Err(Error::Argument(format!(
            "mixture of {} words with {} logits",
            states.len(),
            logits.len()
        )));
    }
    let rows: Vec<CMat> = states.iter().map(WordState::to_cmat).collect();
    let d = states[0].dim();
    let mut re = Vec::with_capacity(rows.len() * d);
    let mut im = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        if r.cols() != d {
            return Err(Error::shape("mixture", (1, d), r.shape()));
        }
        re.extend_from_slice(r.re());
        im.extend_from_slice(r.im());
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let words = g.constant(CMat::from_parts(rows.len(), d, re, im)?);
    let l = g.constant(CMat::from_real(1, logits.len(), logits.to_vec())?);
    let rho = mixture_node(&mut g, words, l)?;
    DensityMatrix::new(g.value(rho).clone(), DensityKind::Proper)
}
