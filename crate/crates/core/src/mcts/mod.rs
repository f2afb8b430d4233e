//! Batched tree search over a learned (or exact) model.
//!
//! All roots of a batch advance in lockstep: each simulation descends every
//! tree to a leaf, the leaves are expanded with one batched model call, and
//! the values are backed up. Trees live in flat arenas.

mod exact;
mod net;

pub use exact::{EnvModel, EnvState};
pub use net::{net_roots, NetState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::codec::softmax;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("model returned non-finite {what} at root {root}, simulation {simulation}")]
    NonFinite {
        what: &'static str,
        root: usize,
        simulation: usize,
    },
    #[error("model: {0}")]
    Model(String),
}

/// One model step's outputs for a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Running value prefix, or a per-step reward when the model says so.
    pub reward: f64,
    pub value: f64,
    pub policy_logits: Vec<f64>,
}

pub trait SearchModel {
    type State: Clone;

    /// Whether `Prediction::reward` is a running sum to be differenced.
    fn predicts_value_prefix(&self) -> bool;

    /// True when this state starts a fresh value-prefix window.
    fn is_reset(&self, state: &Self::State) -> bool;

    /// Terminal states are leaves worth zero and are never expanded.
    fn is_terminal(&self, _state: &Self::State) -> bool {
        false
    }

    fn recurrent(
        &self,
        parents: &[&Self::State],
        actions: &[usize],
    ) -> Result<Vec<(Self::State, Prediction)>, SearchError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Train,
    Reanalyze,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub num_simulations: usize,
    pub c1: f64,
    pub c2: f64,
    pub discount: f64,
    pub dirichlet_alpha: f64,
    pub dirichlet_frac: f64,
    pub softminmax_eps: f64,
}

impl SearchConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        SearchConfig {
            num_simulations: cfg.num_simulations,
            c1: cfg.uct_c1,
            c2: cfg.uct_c2,
            discount: cfg.discount,
            dirichlet_alpha: cfg.dirichlet_alpha,
            dirichlet_frac: cfg.dirichlet_frac,
            softminmax_eps: cfg.softminmax_eps,
        }
    }
}

/// A root already evaluated by the representation and prediction heads.
#[derive(Debug, Clone)]
pub struct RootInput<S> {
    pub state: S,
    pub value: f64,
    pub policy_logits: Vec<f64>,
    /// Seeds this root's Dirichlet sample.
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub visit_counts: Vec<u32>,
    /// Visit distribution at temperature 1.
    pub policy: Vec<f64>,
    /// Mean backed-up value at the root.
    pub root_value: f64,
    /// Most visited action, lowest index on ties.
    pub best_action: usize,
}

/// Observed Q range for normalization with an `ε` floor on the width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
    pub eps: f64,
}

impl MinMaxStats {
    pub fn new(eps: f64) -> Self {
        MinMaxStats {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            eps,
        }
    }

    pub fn update(&mut self, q: f64) {
        self.min = self.min.min(q);
        self.max = self.max.max(q);
    }

    /// `(q − min) / max(max − min, ε)`; 0 before anything was observed.
    pub fn normalize(&self, q: f64) -> f64 {
        if self.max < self.min {
            return 0.0;
        }
        (q - self.min) / (self.max - self.min).max(self.eps)
    }
}

/// `(1 − ρ)P + ρ·noise`.
pub fn mix_noise(priors: &[f64], noise: &[f64], frac: f64) -> Vec<f64> {
    priors.iter().zip(noise).map(|(p, n)| (1.0 - frac) * p + frac * n).collect()
}

/// Symmetric Dirichlet sample via normalized Gamma draws.
pub fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("dirichlet alpha > 0");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.into_iter().map(|d| d / sum).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// `N^{1/T} / Σ N^{1/T}`.
pub fn visit_policy(visits: &[u32], temperature: f64) -> Vec<f64> {
    let max = visits.iter().copied().max().unwrap_or(0) as f64;
    assert!(max > 0.0, "visit policy needs at least one visit");
    // scaled by the max count so large exponents stay finite
    let weights: Vec<f64> = visits
        .iter()
        .map(|&n| (n as f64 / max).powf(1.0 / temperature))
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / sum).collect()
}

/// Per-child inputs to the selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildStats {
    pub prior: f64,
    pub visits: u32,
    /// Normalized `Q̄(s, a)`; ignored when unvisited.
    pub q: f64,
}

/// Mean-Q value for unvisited children: `(Q̂(parent) + Σ visited Q̄) / (1 + count)`.
pub fn mean_q(parent_mean_q: f64, children: &[ChildStats]) -> f64 {
    let (sum, count) = children
        .iter()
        .filter(|c| c.visits > 0)
        .fold((0.0, 0usize), |(s, n), c| (s + c.q, n + 1));
    (parent_mean_q + sum) / (1 + count) as f64
}

/// UCT scores of every child given the node's mean-Q.
pub fn uct_scores(children: &[ChildStats], node_mean_q: f64, c1: f64, c2: f64) -> Vec<f64> {
    let total: f64 = children.iter().map(|c| c.visits as f64).sum();
    let explore = c1 + ((total + c2 + 1.0) / c2).ln();
    children
        .iter()
        .map(|c| {
            let q = if c.visits > 0 { c.q } else { node_mean_q };
            q + c.prior * total.sqrt() / (1.0 + c.visits as f64) * explore
        })
        .collect()
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Selected action and the node's mean-Q (handed down to the child).
pub fn uct_select(children: &[ChildStats], parent_mean_q: f64, c1: f64, c2: f64) -> (usize, f64) {
    let mq = mean_q(parent_mean_q, children);
    (argmax(&uct_scores(children, mq, c1, c2)), mq)
}

#[derive(Debug, Clone)]
struct Node<S> {
    action: usize,
    prior: f64,
    visits: u32,
    value_sum: f64,
    value_prefix: f64,
    is_reset: bool,
    terminal: bool,
    /// First child index and count; `None` until expanded.
    children: Option<(usize, usize)>,
    state: Option<S>,
}

impl<S> Node<S> {
    fn new(action: usize, prior: f64) -> Self {
        Node {
            action,
            prior,
            visits: 0,
            value_sum: 0.0,
            value_prefix: 0.0,
            is_reset: false,
            terminal: false,
            children: None,
            state: None,
        }
    }

    fn value(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeDump {
    pub id: usize,
    pub action: usize,
    pub prior: f64,
    pub visits: u32,
    pub value: f64,
    pub q: Option<f64>,
    pub value_prefix: f64,
    pub children: Vec<usize>,
}

/// One search tree in a flat arena. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct Tree<S> {
    nodes: Vec<Node<S>>,
    minmax: MinMaxStats,
    discount: f64,
    value_prefix: bool,
}

impl<S: Clone> Tree<S> {
    fn new(root_state: S, priors: &[f64], cfg: &SearchConfig, value_prefix: bool) -> Self {
        let mut tree = Tree {
            nodes: vec![Node::new(0, 1.0)],
            minmax: MinMaxStats::new(cfg.softminmax_eps),
            discount: cfg.discount,
            value_prefix,
        };
        tree.nodes[0].is_reset = true;
        tree.expand(0, root_state, 0.0, true, priors);
        tree
    }

    fn mark_terminal(&mut self, id: usize, state: S, value_prefix: f64, is_reset: bool) {
        let n = &mut self.nodes[id];
        n.state = Some(state);
        n.value_prefix = value_prefix;
        n.is_reset = is_reset;
        n.terminal = true;
    }

    fn expand(&mut self, id: usize, state: S, value_prefix: f64, is_reset: bool, priors: &[f64]) {
        let start = self.nodes.len();
        for (a, p) in priors.iter().enumerate() {
            self.nodes.push(Node::new(a, *p));
        }
        let n = &mut self.nodes[id];
        n.state = Some(state);
        n.value_prefix = value_prefix;
        n.is_reset = is_reset;
        n.children = Some((start, priors.len()));
    }

    fn child_ids(&self, id: usize) -> std::ops::Range<usize> {
        let (s, c) = self.nodes[id].children.expect("expanded node");
        s..s + c
    }

    fn edge_reward(&self, parent: usize, child: usize) -> f64 {
        let c = &self.nodes[child];
        let p = &self.nodes[parent];
        if !self.value_prefix || p.is_reset {
            c.value_prefix
        } else {
            c.value_prefix - p.value_prefix
        }
    }

    /// Raw `Q(s, a) = r + γ·V(child)`.
    fn q(&self, parent: usize, child: usize) -> f64 {
        self.edge_reward(parent, child) + self.discount * self.nodes[child].value()
    }

    fn child_stats(&self, id: usize) -> Vec<ChildStats> {
        self.child_ids(id)
            .map(|c| {
                let node = &self.nodes[c];
                ChildStats {
                    prior: node.prior,
                    visits: node.visits,
                    q: if node.visits > 0 {
                        self.minmax.normalize(self.q(id, c))
                    } else {
                        0.0
                    },
                }
            })
            .collect()
    }

    /// Descends to an unexpanded node; returns the path from the root.
    fn select_path(&self, c1: f64, c2: f64) -> Vec<usize> {
        let mut path = vec![0];
        let mut node = 0;
        let mut parent_mq = 0.0;
        while self.nodes[node].children.is_some() {
            let stats = self.child_stats(node);
            let (a, mq) = uct_select(&stats, parent_mq, c1, c2);
            parent_mq = mq;
            node = self.child_ids(node).start + a;
            path.push(node);
        }
        path
    }

    fn backup(&mut self, path: &[usize], leaf_value: f64) {
        let mut g = leaf_value;
        for i in (0..path.len()).rev() {
            let id = path[i];
            self.nodes[id].value_sum += g;
            self.nodes[id].visits += 1;
            if i == 0 {
                break;
            }
            let parent = path[i - 1];
            let r = self.edge_reward(parent, id);
            self.minmax.update(r + self.discount * self.nodes[id].value());
            g = r + self.discount * g;
        }
    }

    pub fn result(&self) -> SearchResult {
        let visit_counts: Vec<u32> = self.child_ids(0).map(|c| self.nodes[c].visits).collect();
        let total: u32 = visit_counts.iter().sum();
        let policy = if total > 0 {
            visit_counts.iter().map(|&n| n as f64 / total as f64).collect()
        } else {
            vec![1.0 / visit_counts.len() as f64; visit_counts.len()]
        };
        let counts: Vec<f64> = visit_counts.iter().map(|&n| n as f64).collect();
        SearchResult {
            best_action: argmax(&counts),
            visit_counts,
            policy,
            root_value: self.nodes[0].value(),
        }
    }

    pub fn minmax(&self) -> MinMaxStats {
        self.minmax
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Debug view of the expanded part of the tree.
    pub fn dump(&self) -> Vec<NodeDump> {
        let mut parent_of = vec![None; self.nodes.len()];
        for id in 0..self.nodes.len() {
            if self.nodes[id].children.is_some() {
                for c in self.child_ids(id) {
                    parent_of[c] = Some(id);
                }
            }
        }
        (0..self.nodes.len())
            .filter(|&id| id == 0 || self.nodes[id].visits > 0)
            .map(|id| {
                let n = &self.nodes[id];
                NodeDump {
                    id,
                    action: n.action,
                    prior: n.prior,
                    visits: n.visits,
                    value: n.value(),
                    q: parent_of[id].map(|p| self.q(p, id)),
                    value_prefix: n.value_prefix,
                    children: match n.children {
                        Some(_) => self.child_ids(id).filter(|c| self.nodes[*c].visits > 0).collect(),
                        None => Vec::new(),
                    },
                }
            })
            .collect()
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.dump()).expect("dump serializes")
    }
}

fn check_finite(p: &Prediction, root: usize, simulation: usize) -> Result<(), SearchError> {
    let bad = |what| SearchError::NonFinite { what, root, simulation };
    if !p.reward.is_finite() {
        return Err(bad("reward"));
    }
    if !p.value.is_finite() {
        return Err(bad("value"));
    }
    if p.policy_logits.iter().any(|l| !l.is_finite()) {
        return Err(bad("policy logits"));
    }
    Ok(())
}

/// Runs `num_simulations` simulations on every root and returns the trees.
pub fn search_trees<M: SearchModel>(
    model: &M,
    roots: &[RootInput<M::State>],
    cfg: &SearchConfig,
    mode: NoiseMode,
) -> Result<Vec<Tree<M::State>>, SearchError> {
    let vp = model.predicts_value_prefix();
    let mut trees = Vec::with_capacity(roots.len());
    for (i, root) in roots.iter().enumerate() {
        check_finite(
            &Prediction {
                reward: 0.0,
                value: root.value,
                policy_logits: root.policy_logits.clone(),
            },
            i,
            0,
        )?;
        let mut priors = softmax(&root.policy_logits);
        if mode != NoiseMode::Eval && cfg.dirichlet_frac > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(root.noise_seed);
            let noise = sample_dirichlet(&mut rng, cfg.dirichlet_alpha, priors.len());
            priors = mix_noise(&priors, &noise, cfg.dirichlet_frac);
        }
        trees.push(Tree::new(root.state.clone(), &priors, cfg, vp));
    }
    for sim in 0..cfg.num_simulations {
        let mut pending = Vec::with_capacity(trees.len());
        for (i, tree) in trees.iter_mut().enumerate() {
            let path = tree.select_path(cfg.c1, cfg.c2);
            if tree.nodes[*path.last().expect("non-empty path")].terminal {
                tree.backup(&path, 0.0);
            } else {
                pending.push((i, path));
            }
        }
        if pending.is_empty() {
            continue;
        }
        let mut parents = Vec::with_capacity(pending.len());
        let mut actions = Vec::with_capacity(pending.len());
        for (i, path) in &pending {
            let t = &trees[*i];
            let parent = path[path.len() - 2];
            parents.push(t.nodes[parent].state.as_ref().expect("expanded parent has state"));
            actions.push(t.nodes[path[path.len() - 1]].action);
        }
        let outputs = model.recurrent(&parents, &actions)?;
        if outputs.len() != pending.len() {
            return Err(SearchError::Model(format!(
                "recurrent returned {} outputs for {} leaves",
                outputs.len(),
                pending.len()
            )));
        }
        for ((i, path), (state, pred)) in pending.into_iter().zip(outputs) {
            check_finite(&pred, i, sim)?;
            let tree = &mut trees[i];
            let leaf = *path.last().expect("non-empty path");
            let reset = model.is_reset(&state);
            if model.is_terminal(&state) {
                tree.mark_terminal(leaf, state, pred.reward, reset);
                tree.backup(&path, 0.0);
            } else {
                tree.expand(leaf, state, pred.reward, reset, &softmax(&pred.policy_logits));
                tree.backup(&path, pred.value);
            }
        }
    }
    Ok(trees)
}

pub fn run_batch<M: SearchModel>(
    model: &M,
    roots: &[RootInput<M::State>],
    cfg: &SearchConfig,
    mode: NoiseMode,
) -> Result<Vec<SearchResult>, SearchError> {
    Ok(search_trees(model, roots, cfg, mode)?.iter().map(Tree::result).collect())
}
