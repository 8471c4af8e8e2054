use proptest::prelude::*;

use l2p::analysis::{export_posteriors, graph_correlation, parse_posteriors};
use l2p::backbone::LayerStack;
use l2p::graph::{aggregate, normalize_adjacency, Graph};
use l2p::head::{l2q_posterior, l2q_quit, l2s_posterior, stick_break, HeadParams, Prior, PropagationPosterior};
use l2p::tensor::Tensor;
use l2p::train::{em_e_step_with_prior, negative_elbo};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

/// Node-by-depth scores passed through a width-one stack with unit head weights.
fn heads_on(logits: &Tensor) -> (LayerStack, HeadParams) {
    let layers = (0..logits.cols())
        .map(|k| Tensor::column((0..logits.rows()).map(|n| logits.get(n, k)).collect()))
        .collect();
    let head = HeadParams {
        weights: vec![Tensor::ones(1, 1); logits.cols()],
        bias: None,
    };
    (LayerStack::new(layers).unwrap(), head)
}

fn logits() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..9).prop_flat_map(|(n, k1)| matrix(n, k1, -30.0, 30.0))
}

fn graph_parts() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1usize..9).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..20)))
}

fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
    Graph::new(
        Tensor::zeros(n, 1),
        vec![None; n],
        edges.iter().copied(),
        vec![false; n],
        vec![false; n],
        vec![false; n],
    )
    .unwrap()
}

fn simplex_rows(n: usize, k1: usize) -> impl Strategy<Value = PropagationPosterior> {
    matrix(n, k1, -5.0, 5.0).prop_map(|t| PropagationPosterior::new(t.row_softmax()).unwrap())
}

proptest! {
    #[test]
    fn heads_produce_simplex_rows(z in logits()) {
        let (stack, head) = heads_on(&z);
        for q in [l2s_posterior(&stack, &head).unwrap(), l2q_posterior(&stack, &head).unwrap()] {
            for n in 0..q.num_nodes() {
                let row = q.row(n);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stick_breaking_telescopes(z in logits()) {
        let (stack, head) = heads_on(&z);
        let quit = l2q_quit(&stack, &head).unwrap();
        let q = stick_break(&quit);
        let logq = l2q_posterior(&stack, &head).unwrap();
        for n in 0..q.num_nodes() {
            let (mut cum, mut stay) = (0.0, 1.0);
            for k in 0..quit.probs().cols() {
                cum += q.row(n)[k];
                stay *= 1.0 - quit.probs().get(n, k);
                prop_assert!((cum - (1.0 - stay)).abs() < 1e-12);
            }
            for (a, b) in q.row(n).iter().zip(logq.row(n)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_is_linear((n, edges) in graph_parts(), a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000) {
        let g = graph(n, &edges);
        let adj = normalize_adjacency(&g);
        let h = Tensor::new(n, 2, (0..2 * n).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect()).unwrap();
        let k = h.map(|x| (x * 0.37).sin());
        let mut mix = h.map(|x| a * x);
        mix.add_scaled(&k, b).unwrap();
        let lhs = aggregate(&adj, &mix).unwrap();
        let mut rhs = aggregate(&adj, &h).unwrap().map(|x| a * x);
        rhs.add_scaled(&aggregate(&adj, &k).unwrap(), b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregate_commutes_with_relabeling((n, edges) in graph_parts(), perm_seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let g = graph(n, &edges);
        let moved: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let gp = graph(n, &moved);
        let h = Tensor::new(n, 3, (0..3 * n).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let mut hp = Tensor::zeros(n, 3);
        for i in 0..n {
            hp.row_mut(perm[i]).copy_from_slice(h.row(i));
        }
        let out = aggregate(&normalize_adjacency(&g), &h).unwrap();
        let outp = aggregate(&normalize_adjacency(&gp), &hp).unwrap();
        for i in 0..n {
            for (x, y) in out.row(i).iter().zip(outp.row(perm[i])) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_adjacency_symmetric((n, edges) in graph_parts()) {
        let adj = normalize_adjacency(&graph(n, &edges));
        let m = adj.matrix();
        for u in 0..n {
            prop_assert!(m.get(u, u) > 0.0);
            for v in 0..n {
                prop_assert!((m.get(u, v) - m.get(v, u)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_csv_round_trips(q in (1usize..6, 1usize..6).prop_flat_map(|(n, k)| simplex_rows(n, k))) {
        let rows = parse_posteriors(&export_posteriors(&q)).unwrap();
        prop_assert_eq!(rows.len(), q.num_nodes());
        for (n, (id, _, row)) in rows.iter().enumerate() {
            prop_assert_eq!(*id, n);
            prop_assert_eq!(row.as_slice(), q.row(n));
        }
    }

    #[test]
    fn correlation_gram_is_psd(
        vs in (1usize..6, 2usize..7).prop_flat_map(|(m, k)| prop::collection::vec(prop::collection::vec(0.01..1.0f64, k), m)),
        x in prop::collection::vec(-1.0..1.0f64, 6),
    ) {
        let g = graph_correlation(&vs).unwrap();
        let m = vs.len();
        let mut quad = 0.0;
        for i in 0..m {
            prop_assert!((g.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..m {
                prop_assert!((g.get(i, j) - g.get(j, i)).abs() < 1e-15);
                quad += x[i] * g.get(i, j) * x[j];
            }
        }
        prop_assert!(quad >= -1e-9);
    }

    #[test]
    fn e_step_never_worse_than_any_posterior(
        (ll, q) in (1usize..5, 1usize..5).prop_flat_map(|(n, k1)| (matrix(n, k1, -6.0, -0.01), simplex_rows(n, k1))),
        ratio in 0.2..1.5f64,
    ) {
        let (n, k1) = ll.shape();
        // two-class per-depth tables whose label-0 log-probabilities equal `ll`
        let per_depth: Vec<Tensor> = (0..k1)
            .map(|k| Tensor::from_rows(&(0..n).map(|i| {
                let l = ll.get(i, k);
                vec![l, (1.0 - l.exp()).ln()]
            }).collect::<Vec<_>>()).unwrap())
            .collect();
        let labels = vec![Some(0); n];
        let mask = vec![true; n];
        for prior in [Prior::Uniform, Prior::Geometric { ratio }] {
            let best = em_e_step_with_prior(&ll, &mask, &prior).unwrap();
            let f_best = negative_elbo(&per_depth, &best, None, &labels, &mask, &prior).unwrap().total;
            let f_q = negative_elbo(&per_depth, &q, None, &labels, &mask, &prior).unwrap().total;
            prop_assert!(f_best <= f_q + 1e-12);
        }
    }
}
