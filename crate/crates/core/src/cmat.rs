//! Dense complex matrices stored as separate real and imaginary planes.
//!
//! Every value in the network (word states, density matrices, attention
//! parameters, measurement states) is a [`CMat`]. Real-valued tensors are
//! simply matrices whose imaginary plane is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `rows × cols` complex matrix in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMat {
    rows: usize,
    cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            re: vec![0.0; rows * cols],
            im: vec![0.0; rows * cols],
        }
    }

    pub fn from_parts(rows: usize, cols: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != rows * cols || im.len() != rows * cols {
            return Err(Error::Argument(format!(
                "planes of length {}/{} do not fit a {rows}x{cols} matrix",
                re.len(),
                im.len()
            )));
        }
        Ok(CMat { rows, cols, re, im })
    }

    pub fn from_real(rows: usize, cols: usize, re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::from_parts(rows, cols, re, im)
    }

    /// A `1 × n` row vector from complex entries.
    pub fn row_vector(entries: &[(f64, f64)]) -> Self {
        CMat {
            rows: 1,
            cols: entries.len(),
            re: entries.iter().map(|e| e.0).collect(),
            im: entries.iter().map(|e| e.1).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.re[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(re: f64, im: f64) -> Self {
        CMat {
            rows: 1,
            cols: 1,
            re: vec![re],
            im: vec![im],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.re.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    #[inline]
    pub fn re(&self) -> &[f64] {
        &self.re
    }

    #[inline]
    pub fn im(&self) -> &[f64] {
        &self.im
    }

    #[inline]
    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    #[inline]
    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.re, self.im)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> (f64, f64) {
        let i = r * self.cols + c;
        (self.re[i], self.im[i])
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: (f64, f64)) {
        let i = r * self.cols + c;
        self.re[i] = value.0;
        self.im[i] = value.1;
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }

    pub fn is_real(&self) -> bool {
        self.im.iter().all(|&v| v == 0.0)
    }

    /// Same matrix reinterpreted with a new shape of equal size.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.len() {
            return Err(Error::shape("reshape", self.shape(), (rows, cols)));
        }
        Ok(CMat {
            rows,
            cols,
            re: self.re.clone(),
            im: self.im.clone(),
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let src = r * self.cols + c;
                let dst = c * self.rows + r;
                out.re[dst] = self.re[src];
                out.im[dst] = self.im[src];
            }
        }
        out
    }

    pub fn conj(&self) -> Self {
        CMat {
            rows: self.rows,
            cols: self.cols,
            re: self.re.clone(),
            im: self.im.iter().map(|v| -v).collect(),
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        self.transpose().conj()
    }

    pub fn trace(&self) -> (f64, f64) {
        let n = self.rows.min(self.cols);
        (0..n).fold((0.0, 0.0), |acc, i| {
            let (r, im) = self.get(i, i);
            (acc.0 + r, acc.1 + im)
        })
    }

    pub fn add(&self, other: &CMat) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b, |a, b| a + b)
    }

    pub fn sub(&self, other: &CMat) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b, |a, b| a - b)
    }

    /// Multiplies every entry by a real factor.
    pub fn scale(&self, factor: f64) -> Self {
        CMat {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().map(|v| v * factor).collect(),
            im: self.im.iter().map(|v| v * factor).collect(),
        }
    }

    /// Multiplies every entry by the complex scalar `s`.
    pub fn scale_complex(&self, s: (f64, f64)) -> Self {
        let mut out = self.clone();
        for i in 0..self.len() {
            let (a, b) = (self.re[i], self.im[i]);
            out.re[i] = a * s.0 - b * s.1;
            out.im[i] = a * s.1 + b * s.0;
        }
        out
    }

    /// Entrywise complex product.
    pub fn hadamard(&self, other: &CMat) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("hadamard", self.shape(), other.shape()));
        }
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.len() {
            out.re[i] = self.re[i] * other.re[i] - self.im[i] * other.im[i];
            out.im[i] = self.re[i] * other.im[i] + self.im[i] * other.re[i];
        }
        Ok(out)
    }

    /// Largest entrywise deviation over both planes.
    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.re
            .iter()
            .zip(&other.re)
            .chain(self.im.iter().zip(&other.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn zip_with(
        &self,
        other: &CMat,
        op: &'static str,
        fre: impl Fn(f64, f64) -> f64,
        fim: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(CMat {
            rows: self.rows,
            cols: self.cols,
            re: self.re.iter().zip(&other.re).map(|(a, b)| fre(*a, *b)).collect(),
            im: self.im.iter().zip(&other.im).map(|(a, b)| fim(*a, *b)).collect(),
        })
    }
}

/// Complex matrix product from four real products:
/// `re = Ar·Br − Ai·Bi`, `im = Ar·Bi + Ai·Br`.
pub fn cmul(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.cols != b.rows {
        return Err(Error::shape("cmul", a.shape(), b.shape()));
    }
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = CMat::zeros(n, p);
    for i in 0..n {
        for k in 0..m {
            let ar = a.re[i * m + k];
            let ai = a.im[i * m + k];
            if ar == 0.0 && ai == 0.0 {
                continue;
            }
            let brow = k * p;
            let orow = i * p;
            for j in 0..p {
                let br = b.re[brow + j];
                let bi = b.im[brow + j];
                out.re[orow + j] += ar * br - ai * bi;
                out.im[orow + j] += ar * bi + ai * br;
            }
        }
    }
    Ok(out)
}

/// `tanh` applied independently to the real and imaginary parts.
pub fn ctanh(a: &CMat) -> CMat {
    CMat {
        rows: a.rows,
        cols: a.cols,
        re: a.re.iter().map(|v| v.tanh()).collect(),
        im: a.im.iter().map(|v| v.tanh()).collect(),
    }
}

/// Which softmax view to take: `Pos` is the ordinary softmax, `Neg` is
/// `−softmax(−v)`, which assigns the largest magnitude to the smallest input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Pos,
    Neg,
}

pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn signed_softmax_into(v: &[f64], channel: Channel, out: &mut [f64]) {
    match channel {
        Channel::Pos => softmax_into(v, out),
        Channel::Neg => {
            let negated: Vec<f64> = v.iter().map(|x| -x).collect();
            softmax_into(&negated, out);
            for o in out.iter_mut() {
                *o = -*o;
            }
        }
    }
}

/// Two-channel softmax over a real vector.
pub fn softmax_signed(v: &[f64], channel: Channel) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; v.len()];
    signed_softmax_into(v, channel, &mut out);
    Ok(out)
}

/// Complex softmax: [`softmax_signed`] on the real part and on the imaginary
/// part independently, with the same channel. Rows are treated separately.
pub fn csoftmax(v: &CMat, channel: Channel) -> Result<CMat> {
    if v.is_empty() {
        return Err(Error::Argument("csoftmax of an empty vector".into()));
    }
    let mut out = CMat::zeros(v.rows, v.cols);
    for r in 0..v.rows {
        let span = r * v.cols..(r + 1) * v.cols;
        signed_softmax_into(&v.re[span.clone()], channel, &mut out.re[span.clone()]);
        signed_softmax_into(&v.im[span.clone()], channel, &mut out.im[span]);
    }
    Ok(out)
}
