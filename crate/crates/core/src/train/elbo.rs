use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::head::{kl_on_tape, log_soft_selection, Prior, PropagationPosterior, SoftSelection, PROB_FLOOR};
use crate::tensor::{log_sum_exp, Tensor};

/// How the reconstruction term combines the per-depth likelihoods.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// `Σ_k q_k log p(y | k)`, the exact expectation.
    Expectation,
    /// `log Σ_k t̂_k p(y | k)` for relaxed samples `t̂`, averaged over the noise draws.
    Sample { noise: &'a [Tensor], temperature: f64 },
}

/// Terms of the negative evidence lower bound, averaged over nodes.
///
/// `total = −reconstruction + kl_weight · kl`; the weight is 1 unless configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub reconstruction: Var,
    pub kl: Var,
    pub total: Var,
}

impl ElboVars {
    pub fn values(&self, tape: &Tape) -> ElboBreakdown {
        ElboBreakdown {
            reconstruction: tape.scalar(self.reconstruction),
            kl: tape.scalar(self.kl),
            total: tape.scalar(self.total),
        }
    }
}

/// Negative ELBO from `M × (K+1)` per-depth label log-likelihoods and log-posteriors.
pub fn elbo_on_tape(
    tape: &mut Tape,
    ll: Var,
    log_q: Var,
    selection: Selection<'_>,
    prior: &Prior,
    kl_weight: f64,
) -> Result<ElboVars> {
    let (m, cols) = tape.value(ll).shape();
    if tape.value(log_q).shape() != (m, cols) {
        return Err(Error::dim(
            "elbo",
            format!("({m}, {cols})"),
            format!("{:?}", tape.value(log_q).shape()),
        ));
    }
    if m == 0 {
        return Err(Error::Numeric("ELBO over an empty node set".into()));
    }
    let reconstruction = match selection {
        Selection::Expectation => {
            let q = tape.exp(log_q)?;
            let weighted = tape.mul(q, ll)?;
            let s = tape.sum(weighted)?;
            tape.scale(s, 1.0 / m as f64)?
        }
        Selection::Sample { noise, temperature } => {
            if noise.is_empty() {
                return Err(Error::Config("at least one noise draw is required".into()));
            }
            let mut acc: Option<Var> = None;
            for g in noise {
                let log_t = log_soft_selection(tape, log_q, g, temperature)?;
                let joint = tape.add(log_t, ll)?;
                let per_node = tape.row_logsumexp(joint)?;
                let s = tape.sum(per_node)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            let total = acc.expect("noise is non-empty");
            tape.scale(total, 1.0 / (m * noise.len()) as f64)?
        }
    };
    let log_prior = prior_rows(prior, m, cols)?;
    let kl = kl_on_tape(tape, log_q, &log_prior)?;
    let neg = tape.scale(reconstruction, -1.0)?;
    let weighted_kl = tape.scale(kl, kl_weight)?;
    let total = tape.add(neg, weighted_kl)?;
    Ok(ElboVars {
        reconstruction,
        kl,
        total,
    })
}

pub(crate) fn prior_rows(prior: &Prior, rows: usize, cols: usize) -> Result<Tensor> {
    if cols == 0 {
        return Err(Error::dim("prior", "at least one depth", 0));
    }
    let row = prior.log_row(cols - 1)?;
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        t.row_mut(r).copy_from_slice(&row);
    }
    Ok(t)
}

/// `−mean_n Σ_k target_{n,k} log q_{n,k}`.
pub fn cross_entropy_on_tape(tape: &mut Tape, log_q: Var, target: &Tensor) -> Result<Var> {
    let rows = target.rows();
    if rows == 0 {
        return Err(Error::Numeric("cross-entropy over an empty node set".into()));
    }
    let t = tape.constant(target.clone());
    let prod = tape.mul(t, log_q)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / rows as f64)
}

/// Per-depth log-likelihood of each masked node's label, `M × (K+1)`.
pub(crate) fn label_log_likelihoods(
    per_depth_log_probs: &[Tensor],
    labels: &[Option<usize>],
    nodes: &[usize],
) -> Result<Tensor> {
    let mut ll = Tensor::zeros(nodes.len(), per_depth_log_probs.len());
    for (i, &n) in nodes.iter().enumerate() {
        let y = labels[n].ok_or_else(|| Error::Validation(format!("node {n} in the mask has no label")))?;
        for (k, lp) in per_depth_log_probs.iter().enumerate() {
            if y >= lp.cols() {
                return Err(Error::Validation(format!(
                    "label {y} of node {n} exceeds {} classes",
                    lp.cols()
                )));
            }
            ll.set(i, k, lp.get(n, y));
        }
    }
    Ok(ll)
}

/// Negative ELBO evaluated on plain values over the nodes in `mask`.
///
/// Without `sample` the reconstruction is the exact expectation under the
/// posterior; with it, the relaxed mixture `log Σ_k t̂_k p(y | k)`. The KL term
/// always uses the posterior.
pub fn negative_elbo(
    per_depth_log_probs: &[Tensor],
    posterior: &PropagationPosterior,
    sample: Option<&SoftSelection>,
    labels: &[Option<usize>],
    mask: &[bool],
    prior: &Prior,
) -> Result<ElboBreakdown> {
    let k1 = posterior.depth() + 1;
    if per_depth_log_probs.len() != k1 {
        return Err(Error::dim(
            "negative_elbo",
            format!("{k1} depths"),
            per_depth_log_probs.len(),
        ));
    }
    let n = posterior.num_nodes();
    if mask.len() != n || labels.len() != n || per_depth_log_probs.iter().any(|t| t.rows() != n) {
        return Err(Error::dim("negative_elbo", format!("{n} nodes"), mask.len()));
    }
    if let Some(s) = sample {
        if s.probs.shape() != posterior.probs().shape() {
            return Err(Error::dim(
                "negative_elbo",
                format!("{:?}", posterior.probs().shape()),
                format!("{:?}", s.probs.shape()),
            ));
        }
    }
    let nodes: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if nodes.is_empty() {
        return Err(Error::Numeric("ELBO over an empty mask".into()));
    }
    let ll = label_log_likelihoods(per_depth_log_probs, labels, &nodes)?;
    let log_prior = prior.log_row(k1 - 1)?;
    let (mut rec, mut kl) = (0.0, 0.0);
    for (i, &node) in nodes.iter().enumerate() {
        let q = posterior.row(node);
        let lli = ll.row(i);
        rec += match sample {
            None => q.iter().zip(lli).map(|(qk, l)| qk * l).sum::<f64>(),
            Some(s) => {
                let terms: Vec<f64> = s.probs.row(node).iter().zip(lli).map(|(t, l)| t.ln() + l).collect();
                log_sum_exp(&terms)
            }
        };
        kl += q
            .iter()
            .zip(&log_prior)
            .map(|(qk, lp)| qk * (qk.max(PROB_FLOOR).ln() - lp))
            .sum::<f64>();
    }
    let m = nodes.len() as f64;
    let (reconstruction, kl) = (rec / m, kl / m);
    Ok(ElboBreakdown {
        reconstruction,
        kl,
        total: -reconstruction + kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::uniform_prior;

    fn two_depth_instance() -> (Vec<Tensor>, Vec<Option<usize>>) {
        // one node, two classes; the true class has probability 0.8 at depth 0 and 0.4 at depth 1
        let lp0 = Tensor::from_rows(&[vec![0.8f64.ln(), 0.2f64.ln()]]).unwrap();
        let lp1 = Tensor::from_rows(&[vec![0.4f64.ln(), 0.6f64.ln()]]).unwrap();
        (vec![lp0, lp1], vec![Some(0)])
    }

    #[test]
    fn uniform_posterior_bound_example() {
        let (lp, labels) = two_depth_instance();
        let q = uniform_prior(1, 1);
        let b = negative_elbo(&lp, &q, None, &labels, &[true], &Prior::Uniform).unwrap();
        let elbo = 0.5 * (0.8f64.ln() + 0.4f64.ln());
        assert!((-b.total - elbo).abs() < 1e-12);
        assert!((elbo - (-0.5697)).abs() < 1e-4);
        assert!(-b.total <= 0.6f64.ln());
        assert_eq!(b.kl, 0.0);
    }

    #[test]
    fn one_hot_sample_is_depth_nll() {
        let (lp, labels) = two_depth_instance();
        let q = uniform_prior(1, 1);
        let s = SoftSelection {
            probs: Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            temperature: 0.5,
        };
        let b = negative_elbo(&lp, &q, Some(&s), &labels, &[true], &Prior::Uniform).unwrap();
        assert_eq!(b.reconstruction, 0.4f64.ln());
    }

    #[test]
    fn empty_mask_rejected() {
        let (lp, labels) = two_depth_instance();
        assert!(negative_elbo(&lp, &uniform_prior(1, 1), None, &labels, &[false], &Prior::Uniform).is_err());
    }

    #[test]
    fn tape_matches_values() {
        let (lp, labels) = two_depth_instance();
        let q = PropagationPosterior::new(Tensor::from_rows(&[vec![0.3, 0.7]]).unwrap()).unwrap();
        let prior = Prior::Geometric { ratio: 0.5 };
        let expect = negative_elbo(&lp, &q, None, &labels, &[true], &prior).unwrap();

        let mut tape = Tape::new();
        let ll = tape.constant(label_log_likelihoods(&lp, &labels, &[0]).unwrap());
        let lq = tape.constant(q.log_probs());
        let got = elbo_on_tape(&mut tape, ll, lq, Selection::Expectation, &prior, 1.0)
            .unwrap()
            .values(&tape);
        assert!((got.total - expect.total).abs() < 1e-14);
        assert!((got.kl - expect.kl).abs() < 1e-14);
    }
}
