//! Metrics and plot-ready exports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::head::PropagationPosterior;
use crate::tensor::{argmax_first, Tensor};

/// Fraction of masked nodes whose most probable class equals the label.
pub fn accuracy(predictions: &Tensor, labels: &[Option<usize>], mask: &[bool]) -> Result<f64> {
    if predictions.rows() != labels.len() || mask.len() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            predictions.rows(),
            format!("{} labels / {} mask", labels.len(), mask.len()),
        ));
    }
    let nodes: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    accuracy_on(predictions, labels, &nodes)
}

pub fn accuracy_on(predictions: &Tensor, labels: &[Option<usize>], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Numeric("accuracy over an empty mask".into()));
    }
    let mut correct = 0usize;
    for &n in nodes {
        let y = labels[n].ok_or_else(|| Error::Validation(format!("node {n} in the mask has no label")))?;
        if argmax_first(predictions.row(n)) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / nodes.len() as f64)
}

/// Mean and sample standard deviation; the deviation is absent below two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// CSV with columns `node_id, argmax_depth, q_0..q_K`, one row per node.
pub fn export_posteriors(posterior: &PropagationPosterior) -> String {
    let k = posterior.depth();
    let mut out = String::from("node_id,argmax_depth");
    for d in 0..=k {
        let _ = write!(out, ",q_{d}");
    }
    out.push('\n');
    for n in 0..posterior.num_nodes() {
        let row = posterior.row(n);
        let _ = write!(out, "{n},{}", argmax_first(row));
        for p in row {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

/// Parses [`export_posteriors`] output back into node ids and rows.
pub fn parse_posteriors(csv: &str) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("empty posterior CSV".into()))?;
    let cols = header.split(',').count();
    if cols < 3 || !header.starts_with("node_id,argmax_depth,q_0") {
        return Err(Error::Validation(format!("unexpected posterior CSV header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Validation(format!(
                "row {} has {} fields, expected {cols}",
                i + 1,
                fields.len()
            )));
        }
        let bad = |f: &str| Error::Validation(format!("row {}: cannot parse '{f}'", i + 1));
        let id = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let arg = fields[1].parse().map_err(|_| bad(fields[1]))?;
        let q = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(f)))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, arg, q));
    }
    Ok(rows)
}

/// Column-wise mean of the posterior rows selected by `nodes` (all rows when `None`).
pub fn average_posterior(posterior: &PropagationPosterior, nodes: Option<&[usize]>) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let nodes = match nodes {
        Some(n) => n,
        None => {
            all = (0..posterior.num_nodes()).collect();
            &all
        }
    };
    if nodes.is_empty() {
        return Err(Error::Numeric("average over zero posterior rows".into()));
    }
    let mut avg = vec![0.0; posterior.depth() + 1];
    for &n in nodes {
        for (a, p) in avg.iter_mut().zip(posterior.row(n)) {
            *a += p;
        }
    }
    let m = nodes.len() as f64;
    Ok(avg.into_iter().map(|a| a / m).collect())
}

/// Pairwise cosine similarities.
pub fn graph_correlation(vectors: &[Vec<f64>]) -> Result<Tensor> {
    let n = vectors.len();
    if let Some(first) = vectors.first() {
        if vectors.iter().any(|v| v.len() != first.len()) {
            return Err(Error::Validation("all distributions must have the same length".into()));
        }
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::Validation(format!("distribution {i} is the zero vector")));
    }
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        out.set(i, i, 1.0);
        for j in i + 1..n {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out.set(i, j, c);
            out.set(j, i, c);
        }
    }
    Ok(out)
}
