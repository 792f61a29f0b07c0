//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Gradients, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so that entries
    /// whose true gradient is (numerically) zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub worst_part: Part,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn get(&self, name: &str) -> Option<&ParamReport> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients returned by `objective` against central differences
/// on every entry of every trainable parameter. The store is perturbed in
/// place and restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, mut objective: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = objective(store)?;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();

    for id in ids {
        let (name, kind, len) = {
            let p = store.get(id);
            (p.name.clone(), p.kind, p.value.len())
        };
        let grad = analytic.get(id);
        let mut pr = ParamReport {
            name,
            entries_checked: 0,
            max_rel_error: 0.0,
            worst_entry: 0,
            worst_part: Part::Re,
            analytic: 0.0,
            numeric: 0.0,
        };
        let parts: &[Part] = match kind {
            ParamKind::Real => &[Part::Re],
            ParamKind::Complex => &[Part::Re, Part::Im],
        };
        for &part in parts {
            for k in 0..len {
                let original = entry(store, id, part, k);
                set_entry(store, id, part, k, original + cfg.step);
                let plus = objective(store).map(|r| r.0);
                set_entry(store, id, part, k, original - cfg.step);
                let minus = objective(store).map(|r| r.0);
                set_entry(store, id, part, k, original);
                let numeric = (plus? - minus?) / (2.0 * cfg.step);
                let a = grad
                    .map(|g| match part {
                        Part::Re => g.re()[k],
                        Part::Im => g.im()[k],
                    })
                    .unwrap_or(0.0);
                let err = relative_error(a, numeric, cfg.floor);
                pr.entries_checked += 1;
                if err > pr.max_rel_error || pr.entries_checked == 1 {
                    pr.max_rel_error = err;
                    pr.worst_entry = k;
                    pr.worst_part = part;
                    pr.analytic = a;
                    pr.numeric = numeric;
                }
            }
        }
        report.params.push(pr);
    }
    Ok(report)
}

fn entry(store: &ParamStore, id: crate::graph::ParamId, part: Part, k: usize) -> f64 {
    let v = store.value(id);
    match part {
        Part::Re => v.re()[k],
        Part::Im => v.im()[k],
    }
}

fn set_entry(store: &mut ParamStore, id: crate::graph::ParamId, part: Part, k: usize, x: f64) {
    let v = &mut store.get_mut(id).value;
    match part {
        Part::Re => v.re_mut()[k] = x,
        Part::Im => v.im_mut()[k] = x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmat::{CMat, Channel};
    use crate::graph::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
        let re = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        CMat::from_parts(rows, cols, re, im).unwrap()
    }

    fn random_real(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
        let re = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        CMat::from_real(rows, cols, re).unwrap()
    }

    /// Reduces any node to a real scalar `Re Σ w ⊙ x` with a fixed random
    /// complex `w`, so both planes of every entry reach the loss.
    fn project(g: &mut Graph, x: crate::graph::NodeId, rng: &mut ChaCha8Rng) -> crate::graph::NodeId {
        let (r, c) = g.shape(x);
        let w = g.constant(random(rng, r, c));
        let prod = g.mul(x, w).unwrap();
        let flat = g.reshape(prod, 1, r * c).unwrap();
        let s = g.row_sum(flat);
        g.real_part(s)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let id = store
            .add("x", CMat::from_real(1, 3, vec![0.3, -1.2, 2.0]).unwrap(), ParamKind::Real)
            .unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new(s);
                let x = g.param(id);
                let sq = g.mul(x, x).unwrap();
                let sum = g.row_sum(sq);
                Ok((g.value(sum).re()[0], g.backward(sum)?))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    /// Every differentiable op, each wired to its own random-shaped inputs.
    fn all_ops_objective(seed: u64) -> (ParamStore, impl FnMut(&ParamStore) -> Result<(f64, Gradients)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, p) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, m, n), ParamKind::Complex).unwrap();
        let b = store.add("b", random(&mut rng, n, p), ParamKind::Complex).unwrap();
        let c = store.add("c", random(&mut rng, m, n), ParamKind::Complex).unwrap();
        let r = store.add("r", random_real(&mut rng, m, n), ParamKind::Real).unwrap();
        let ph = store.add("phase", random_real(&mut rng, m, n), ParamKind::Real).unwrap();
        let s = store.add("s", random(&mut rng, 1, m), ParamKind::Complex).unwrap();
        let t = store.add("table", random_real(&mut rng, 4, n), ParamKind::Real).unwrap();
        let proj_seed = rng.random::<u64>();

        let f = move |st: &ParamStore| -> Result<(f64, Gradients)> {
            let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
            let mut g = Graph::new(st);
            let (an, bn, cn) = (g.param(a), g.param(b), g.param(c));
            let (rn, pn, sn) = (g.param(r), g.param(ph), g.param(s));
            let mut terms = Vec::new();

            let mm = g.matmul(an, bn)?;
            terms.push(mm);
            let sum = g.add(an, cn)?;
            let diff = g.sub(sum, an)?;
            let prod = g.mul(diff, an)?;
            terms.push(prod);
            let sr = g.scale_rows(cn, sn)?;
            let t1 = g.transpose(sr);
            terms.push(t1);
            let pol = g.polar(rn, pn)?;
            terms.push(pol);
            let th = g.tanh(an);
            let cj = g.conj(th);
            let sc = g.scale(cj, 1.7);
            let ad = g.add_scalar(sc, 0.3);
            terms.push(ad);
            let sig = g.sigmoid(rn)?;
            terms.push(sig);
            let sm = g.softmax(rn)?;
            terms.push(sm);
            let csp = g.csoftmax(an, Channel::Pos)?;
            terms.push(csp);
            let csn = g.csoftmax(cn, Channel::Neg)?;
            terms.push(csn);
            let nr = g.normalize_rows(rn)?;
            terms.push(nr);
            let cn2 = g.cnormalize_rows(an)?;
            terms.push(cn2);
            let wp = g.wrap_phase(pn)?;
            let rs = g.reshape(wp, 1, m * n)?;
            terms.push(rs);
            let rows = g.rows(an, 0, 1)?;
            terms.push(rows);
            let cols = g.cols(cn, n - 1, 1)?;
            terms.push(cols);
            let rsum = g.row_sum(an);
            terms.push(rsum);
            let vs = g.vstack(&[an, cn])?;
            terms.push(vs);
            let hc = g.hconcat(&[an, cn])?;
            terms.push(hc);
            let gat = g.gather(t, &[3, 1, 3])?;
            let gsum = g.row_sum(gat);
            terms.push(gsum);
            let re = g.real_part(an);
            terms.push(re);

            let mut total = None;
            for term in terms {
                let s = project(&mut g, term, &mut rng);
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s)?,
                });
            }
            let total = total.unwrap();
            // Finish with a cross-entropy over two learned logits.
            let first = g.rows(re, 0, 1)?;
            let first = g.cols(first, 0, 1)?;
            let two = g.hconcat(&[total, first])?;
            let ce = g.cross_entropy(two, 1)?;
            let loss = g.add(total, ce)?;
            Ok((g.value(loss).re()[0], g.backward(loss)?))
        };
        (store, f)
    }

    #[test]
    fn every_op_matches_central_differences_over_seeds() {
        for seed in 0..24 {
            let (mut store, f) = all_ops_objective(seed);
            let report = grad_check(&mut store, f, GradCheckConfig::default()).unwrap();
            assert!(
                report.max_rel_error() < 1e-4,
                "seed {seed}: {:?}",
                report.worst()
            );
        }
    }

    #[test]
    fn three_op_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 2, 3), ParamKind::Complex).unwrap();
        let b = store.add("b", random(&mut rng, 3, 2), ParamKind::Complex).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new(s);
                let (an, bn) = (g.param(a), g.param(b));
                let mm = g.matmul(an, bn)?;
                let th = g.tanh(mm);
                let re = g.real_part(th);
                let flat = g.reshape(re, 1, 4)?;
                let sum = g.row_sum(flat);
                Ok((g.value(sum).re()[0], g.backward(sum)?))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn broken_adjoint_is_caught() {
        // Hand-rolled sum(tanh(x)) whose adjoint wrongly uses 1 − y instead of 1 − y².
        let mut store = ParamStore::new();
        let id = store
            .add("x", CMat::from_real(1, 3, vec![0.4, -0.9, 1.3]).unwrap(), ParamKind::Real)
            .unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let x = s.value(id);
                let y: Vec<f64> = x.re().iter().map(|v| v.tanh()).collect();
                let loss = y.iter().sum();
                let bad: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
                let mut grads = Gradients::empty(s.len());
                grads.set(id, CMat::from_real(1, 3, bad).unwrap());
                Ok((loss, grads))
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() > 1e-2);
    }
}
