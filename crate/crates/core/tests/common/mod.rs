//! Helpers shared by the integration tests: tree enumeration and
//! exhaustive-enumeration oracles for the latent tree model.
#![allow(dead_code)]

use qosmon::tomography::DelayPmf;
use qosmon::topology::{LinkSpec, TopologySpec};
use qosmon::LogicalTree;
use rand::Rng;

/// Tree from a parent array: node `i + 1` hangs off `parents[i]`, via link `i + 1`.
pub fn tree_from_parents(parents: &[usize]) -> LogicalTree {
    let nodes: Vec<String> = (0..=parents.len()).map(|i| format!("n{i}")).collect();
    let links = parents
        .iter()
        .enumerate()
        .map(|(i, &p)| LinkSpec { id: i + 1, from: nodes[p].clone(), to: nodes[i + 1].clone() })
        .collect();
    LogicalTree::from_spec(&TopologySpec { root: "n0".into(), nodes, links })
        .expect("parent arrays always give valid trees")
}

/// Every rooted labelled tree with `links` edges where each node's parent
/// has a smaller number. Covers every unlabelled shape.
pub fn all_parent_arrays(links: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for i in 0..links {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..=i).map(move |q| {
                    let mut v = p.clone();
                    v.push(q);
                    v
                })
            })
            .collect();
    }
    out
}

/// Random parent array whose node `i + 1` picks a parent among `0..=i`.
pub fn random_parents<R: Rng>(rng: &mut R, links: usize) -> Vec<usize> {
    (0..links).map(|i| rng.random_range(0..=i)).collect()
}

/// Strictly positive random pmf over `0..=top`.
pub fn random_pmf<R: Rng>(rng: &mut R, top: usize) -> DelayPmf {
    let raw: Vec<f64> = (0..=top).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    DelayPmf::new(raw.iter().map(|x| x / s).collect()).unwrap()
}

/// Leaf units for one latent assignment, in `leaves()` order.
pub fn leaf_units(tree: &LogicalTree, paths: &[Vec<usize>], x: &[usize], top: usize) -> Vec<u16> {
    let _ = tree;
    paths
        .iter()
        .map(|p| p.iter().map(|&k| x[k]).sum::<usize>().min(top) as u16)
        .collect()
}

pub fn leaf_paths(tree: &LogicalTree) -> Vec<Vec<usize>> {
    tree.leaves()
        .iter()
        .map(|&v| tree.path_links(v).unwrap().iter().map(|k| k.index()).collect())
        .collect()
}

/// Exhaustive joint: every latent assignment with its probability and the
/// leaf pattern it produces.
pub fn enumerate_joint(tree: &LogicalTree, pmfs: &[DelayPmf]) -> Vec<(Vec<usize>, f64, Vec<u16>)> {
    let l = tree.link_count();
    let nb = pmfs[0].probs().len();
    let top = nb - 1;
    let paths = leaf_paths(tree);
    let total = nb.pow(l as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let x: Vec<usize> = (0..l)
            .map(|_| {
                let d = c % nb;
                c /= nb;
                d
            })
            .collect();
        let p: f64 = x.iter().enumerate().map(|(k, &xk)| pmfs[k].probs()[xk]).product();
        let y = leaf_units(tree, &paths, &x, top);
        out.push((x, p, y));
    }
    out
}

/// P(pattern) and per-link posteriors by brute force.
pub fn brute_posteriors(
    joint: &[(Vec<usize>, f64, Vec<u16>)],
    links: usize,
    nb: usize,
    pattern: &[u16],
) -> (f64, Vec<Vec<f64>>) {
    let mut prob = 0.0;
    let mut post = vec![vec![0.0; nb]; links];
    for (x, p, y) in joint {
        if y.as_slice() == pattern {
            prob += p;
            for (k, &xk) in x.iter().enumerate() {
                post[k][xk] += p;
            }
        }
    }
    if prob > 0.0 {
        for row in &mut post {
            for v in row.iter_mut() {
                *v /= prob;
            }
        }
    }
    (prob, post)
}

/// Distribution of leaf patterns, exactly.
pub fn pattern_distribution(tree: &LogicalTree, pmfs: &[DelayPmf]) -> Vec<(Vec<u16>, f64)> {
    let mut map = std::collections::BTreeMap::new();
    for (_, p, y) in enumerate_joint(tree, pmfs) {
        *map.entry(y).or_insert(0.0) += p;
    }
    map.into_iter().collect()
}

/// The three-link star used in several fixed examples:
/// link 1 s->a, link 2 a->d1, link 3 a->d2.
pub fn star3() -> LogicalTree {
    LogicalTree::from_json(
        r#"{"root":"s","nodes":["s","a","d1","d2"],
            "links":[{"id":1,"from":"s","to":"a"},{"id":2,"from":"a","to":"d1"},{"id":3,"from":"a","to":"d2"}]}"#,
    )
    .unwrap()
}

pub fn star3_truth() -> Vec<DelayPmf> {
    vec![
        DelayPmf::new(vec![0.8, 0.2]).unwrap(),
        DelayPmf::new(vec![0.9, 0.1]).unwrap(),
        DelayPmf::new(vec![0.7, 0.3]).unwrap(),
    ]
}

/// Rank interval of `v` in the sorted data (1-based, ties span the run).
pub fn rank_range(sorted: &[f64], v: f64) -> (usize, usize) {
    let lo = sorted.partition_point(|&x| x < v) + 1;
    let hi = sorted.partition_point(|&x| x <= v);
    (lo, hi.max(lo))
}
