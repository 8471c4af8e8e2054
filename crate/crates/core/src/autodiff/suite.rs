//! Finite-difference checks over every differentiable tape operation and both heads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::grad_check;
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneKind};
use crate::error::Result;
use crate::graph::CsrMatrix;
use crate::head::{kl_on_tape, log_soft_selection, sample_gumbel, Head, HeadKind};
use crate::tensor::Tensor;

/// Worst relative error of one checked computation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
}

fn normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(rows, cols, data).expect("sizes agree")
}

/// Entries bounded away from zero, for operations with a kink there.
fn off_kink(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    normal(rows, cols, rng).map(|v| v.signum() * (v.abs() + 0.05))
}

fn random_graph(n: usize, rng: &mut impl Rng) -> Arc<CsrMatrix> {
    let mut t = Vec::new();
    for i in 0..n {
        t.push((i, i, rng.random_range(0.2..1.0)));
        for j in 0..i {
            if rng.random::<f64>() < 0.5 {
                let w = rng.random_range(0.1..0.6);
                t.push((i, j, w));
                t.push((j, i, w));
            }
        }
    }
    Arc::new(CsrMatrix::from_triplets(n, n, t).expect("valid triplets"))
}

/// `Σ out ⊙ R` for a fixed random `R`, so that no output direction is ignored.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let w = tape.constant(r.clone());
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

struct Case {
    name: &'static str,
    store: ParamStore,
    ids: Vec<ParamId>,
}

impl Case {
    fn new(name: &'static str, params: Vec<Tensor>) -> Self {
        let mut store = ParamStore::new();
        let ids = params
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("p{i}"), t))
            .collect();
        Case { name, store, ids }
    }

    fn check<F>(mut self, eps: f64, f: F) -> Result<GradCase>
    where
        F: FnMut(&mut Tape, &ParamStore, &[ParamId]) -> Result<Var>,
    {
        let ids = self.ids.clone();
        let mut f = f;
        let worst = grad_check(&mut self.store, &ids, eps, |tape, store| f(tape, store, &ids))?;
        Ok(GradCase { name: self.name, worst })
    }
}

/// Runs every case once with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, c) = (rng.random_range(3..6), rng.random_range(2..5), rng.random_range(2..5));
    let r_nd = normal(n, d, &mut rng);
    let r_nc = normal(n, c, &mut rng);
    let r_n1 = normal(n, 1, &mut rng);
    let adj = random_graph(n, &mut rng);
    let mut out = Vec::new();

    let unary: [(&'static str, fn(&mut Tape, Var) -> Result<Var>, bool); 7] = [
        ("relu", |t, a| t.relu(a), true),
        ("sigmoid", |t, a| t.sigmoid(a), false),
        ("log_sigmoid", |t, a| t.log_sigmoid(a), false),
        ("exp", |t, a| t.exp(a), false),
        ("clamp_min", |t, a| t.clamp_min(a, 0.0), true),
        ("row_log_softmax", |t, a| t.row_log_softmax(a), false),
        ("cumsum_cols_exclusive", |t, a| t.cumsum_cols_exclusive(a), false),
    ];
    for (name, op, kink) in unary {
        let x = if kink {
            off_kink(n, d, &mut rng)
        } else {
            normal(n, d, &mut rng)
        };
        let r = r_nd.clone();
        out.push(Case::new(name, vec![x]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let y = op(t, a)?;
            project(t, y, &r)
        })?);
    }

    let r = r_n1.clone();
    out.push(
        Case::new("row_logsumexp", vec![normal(n, d, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let y = t.row_logsumexp(a)?;
            project(t, y, &r)
        })?,
    );

    let r = r_nc.clone();
    out.push(
        Case::new("matmul", vec![normal(n, d, &mut rng), normal(d, c, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let b = t.param(s, ids[1]);
            let y = t.matmul(a, b)?;
            project(t, y, &r)
        })?,
    );

    let binary: [(&'static str, fn(&mut Tape, Var, Var) -> Result<Var>); 3] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in binary {
        let r = r_nd.clone();
        out.push(
            Case::new(name, vec![normal(n, d, &mut rng), normal(n, d, &mut rng)]).check(eps, move |t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.param(s, ids[1]);
                let y = op(t, a, b)?;
                project(t, y, &r)
            })?,
        );
    }

    let r = r_nd.clone();
    out.push(
        Case::new("add_row", vec![normal(n, d, &mut rng), normal(1, d, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let b = t.param(s, ids[1]);
            let y = t.add_row(a, b)?;
            project(t, y, &r)
        })?,
    );

    let factor = rng.random_range(-2.0..2.0);
    let r = r_nd.clone();
    out.push(
        Case::new("scale", vec![normal(n, d, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let y = t.scale(a, factor)?;
            project(t, y, &r)
        })?,
    );

    let r = r_nd.clone();
    let g = adj.clone();
    out.push(
        Case::new("aggregate", vec![normal(n, d, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let y = t.aggregate(&g, a)?;
            project(t, y, &r)
        })?,
    );

    let rows: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
    let r = normal(rows.len(), d, &mut rng);
    out.push(
        Case::new("gather_rows", vec![normal(n, d, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let y = t.gather_rows(a, &rows)?;
            project(t, y, &r)
        })?,
    );

    let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..d)).collect();
    let r = r_n1.clone();
    out.push(
        Case::new("pick_cols", vec![normal(n, d, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let y = t.pick_cols(a, &cols)?;
            project(t, y, &r)
        })?,
    );

    let r = normal(n, d + c, &mut rng);
    out.push(
        Case::new("concat_cols", vec![normal(n, d, &mut rng), normal(n, c, &mut rng)]).check(
            eps,
            move |t, s, ids| {
                let a = t.param(s, ids[0]);
                let b = t.param(s, ids[1]);
                let y = t.concat_cols(&[a, b])?;
                project(t, y, &r)
            },
        )?,
    );

    out.push(Case::new("sum", vec![normal(n, d, &mut rng)]).check(eps, |t, s, ids| {
        let a = t.param(s, ids[0]);
        let e = t.exp(a)?;
        t.sum(e)
    })?);
    out.push(Case::new("mean", vec![normal(n, d, &mut rng)]).check(eps, |t, s, ids| {
        let a = t.param(s, ids[0]);
        let e = t.sigmoid(a)?;
        t.mean(e)
    })?);

    let labels: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..c))).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
    mask[0] = true;
    out.push(
        Case::new("nll_loss", vec![normal(n, c, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let lp = t.row_log_softmax(a)?;
            t.nll_loss(lp, &labels, &mask)
        })?,
    );

    let depth = rng.random_range(1..4);
    for kind in [HeadKind::L2s, HeadKind::L2q] {
        let mut store = ParamStore::new();
        let head = Head::new(kind, depth, d, true, &mut store, &mut rng);
        let bias = *head.param_ids().last().expect("bias present");
        *store.value_mut(bias) = normal(1, depth + 1, &mut rng);
        let layers: Vec<ParamId> = (0..=depth)
            .map(|k| store.add(format!("h{k}"), normal(n, d, &mut rng)))
            .collect();
        let mut ids = head.param_ids();
        ids.extend(&layers);
        let r = normal(n, depth + 1, &mut rng);
        let worst = grad_check(&mut store, &ids, eps, |t, s| {
            let stack: Vec<Var> = layers.iter().map(|&l| t.param(s, l)).collect();
            let lq = head.log_posterior(t, s, &stack)?;
            project(t, lq, &r)
        })?;
        out.push(GradCase {
            name: match kind {
                HeadKind::L2s => "l2s_head",
                HeadKind::L2q => "l2q_head",
            },
            worst,
        });
    }

    let noise = sample_gumbel(n, depth + 1, &mut rng);
    let gamma = rng.random_range(0.3..2.0);
    let r = normal(n, depth + 1, &mut rng);
    out.push(
        Case::new("gumbel_soft_selection", vec![normal(n, depth + 1, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let lq = t.row_log_softmax(a)?;
            let sel = log_soft_selection(t, lq, &noise, gamma)?;
            let e = t.exp(sel)?;
            project(t, e, &r)
        })?,
    );

    let prior = log_prior_rows(n, depth + 1, &mut rng);
    out.push(
        Case::new("kl", vec![normal(n, depth + 1, &mut rng)]).check(eps, move |t, s, ids| {
            let a = t.param(s, ids[0]);
            let lq = t.row_log_softmax(a)?;
            kl_on_tape(t, lq, &prior)
        })?,
    );

    for kind in [BackboneKind::Appnp, BackboneKind::Gcn] {
        let cfg = BackboneConfig {
            kind,
            depth,
            hidden: 3,
            repr_dim: d,
            dropout: 0.5,
            alpha: rng.random_range(0.05..0.5),
            encoder_layers: 2,
        };
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg, c, c, &mut store, &mut rng)?;
        for id in bb.param_ids() {
            let shape = store.value(id).shape();
            *store.value_mut(id) = normal(shape.0, shape.1, &mut rng).map(|v| 0.7 * v);
        }
        let x = normal(n, c, &mut rng);
        let labels: Vec<Option<usize>> = (0..n).map(|_| Some(rng.random_range(0..c))).collect();
        let mask = vec![true; n];
        let ids = bb.param_ids();
        let g = adj.clone();
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let worst = grad_check(&mut store, &ids, eps, |t, s| {
            let xv = t.constant(x.clone());
            let layers = bb.forward(t, s, xv, &g, false, &mut eval_rng)?;
            let mut total: Option<Var> = None;
            for h in layers {
                let lp = bb.classify(t, s, h)?;
                let l = t.nll_loss(lp, &labels, &mask)?;
                total = Some(match total {
                    Some(acc) => t.add(acc, l)?,
                    None => l,
                });
            }
            Ok(total.expect("at least H_0"))
        })?;
        out.push(GradCase {
            name: match kind {
                BackboneKind::Appnp => "appnp_backbone",
                BackboneKind::Gcn => "gcn_backbone",
            },
            worst,
        });
    }
    Ok(out)
}

/// A random normalized log row repeated `n` times.
fn log_prior_rows(n: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let raw = normal(1, cols, rng);
    let lse = crate::tensor::log_sum_exp(raw.row(0));
    let mut t = Tensor::zeros(n, cols);
    for i in 0..n {
        for (o, v) in t.row_mut(i).iter_mut().zip(raw.row(0)) {
            *o = v - lse;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        for case in gradient_suite(7, 1e-5).unwrap() {
            assert!(case.worst < 1e-4, "{}: {}", case.name, case.worst);
        }
    }
}
