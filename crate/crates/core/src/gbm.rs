//! Gradient-boosted decision trees for binary outcomes.
//!
//! Newton boosting on logistic loss with exact greedy split search over
//! presorted feature columns. Missing values (`NaN`) follow a per-node
//! default branch picked by gain. Cross-validated grid search, AUROC, and
//! the thresholded classification report live here too.

use std::io::Write;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::FeatureMatrix;
use crate::io::sha256_hex;
use crate::stats::{midranks, wilson_interval, Z_95};

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("training error: {0}")]
    Training(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("grid search error: {0}")]
    Grid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub max_depth: usize,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub min_child_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            max_depth: 3,
            learning_rate: 0.1,
            n_estimators: 100,
            subsample: 0.8,
            colsample_bytree: 0.8,
            gamma: 0.0,
            lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), GbmError> {
        let bad = |m: String| Err(GbmError::Input(m));
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, v) in [("subsample", self.subsample), ("colsample_bytree", self.colsample_bytree)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} {v} not in (0,1]"));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("min_child_weight", self.min_child_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be a nonnegative number"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => cover,
        }
    }
}

/// A tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Tree {
        Tree {
            nodes: vec![Node::Leaf { value, cover }],
        }
    }

    /// Leaf index reached by `row`.
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = row[feature];
                    let go_left = if v.is_nan() { default_left } else { v < threshold };
                    i = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    /// Cover-weighted mean leaf value.
    pub fn expected_value(&self) -> f64 {
        fn walk(t: &Tree, i: usize) -> f64 {
            match t.nodes[i] {
                Node::Leaf { value, .. } => value,
                Node::Split { left, right, cover, .. } => {
                    if cover <= 0.0 {
                        return 0.5 * (walk(t, left) + walk(t, right));
                    }
                    let cl = t.nodes[left].cover();
                    let cr = t.nodes[right].cover();
                    (cl * walk(t, left) + cr * walk(t, right)) / cover
                }
            }
        }
        walk(self, 0)
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }

    fn to_json(&self, i: usize) -> JsonNode {
        match self.nodes[i] {
            Node::Leaf { value, cover } => JsonNode::Leaf {
                leaf_value: value,
                cover,
            },
            Node::Split {
                feature,
                threshold,
                default_left,
                left,
                right,
                cover,
            } => JsonNode::Split {
                feature,
                threshold,
                default_left,
                cover,
                children: vec![self.to_json(left), self.to_json(right)],
            },
        }
    }

    fn from_json(root: &JsonNode, n_features: usize) -> Result<Tree, GbmError> {
        fn push(node: &JsonNode, nodes: &mut Vec<Node>, n_features: usize) -> Result<usize, GbmError> {
            let at = nodes.len();
            match node {
                JsonNode::Leaf { leaf_value, cover } => nodes.push(Node::Leaf {
                    value: *leaf_value,
                    cover: *cover,
                }),
                JsonNode::Split {
                    feature,
                    threshold,
                    default_left,
                    cover,
                    children,
                } => {
                    if children.len() != 2 {
                        return Err(GbmError::Input("split node needs exactly two children".into()));
                    }
                    if *feature >= n_features || !threshold.is_finite() {
                        return Err(GbmError::Input(format!("bad split on feature {feature}")));
                    }
                    nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
                    let left = push(&children[0], nodes, n_features)?;
                    let right = push(&children[1], nodes, n_features)?;
                    nodes[at] = Node::Split {
                        feature: *feature,
                        threshold: *threshold,
                        default_left: *default_left,
                        left,
                        right,
                        cover: *cover,
                    };
                }
            }
            Ok(at)
        }
        let mut nodes = Vec::new();
        push(root, &mut nodes, n_features)?;
        Ok(Tree { nodes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum JsonNode {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        cover: f64,
        children: Vec<JsonNode>,
    },
    Leaf {
        leaf_value: f64,
        cover: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    eta: f64,
    base_score: f64,
    feature_names: Vec<String>,
    params: TrainParams,
    trees: Vec<JsonNode>,
}

const MODEL_FORMAT: &str = "sdoh-gbm-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    /// Log-odds of the training base rate.
    pub base_score: f64,
    pub feature_names: Vec<String>,
    pub params: TrainParams,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Ensemble {
    pub fn predict_margin_row(&self, row: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict_proba_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.predict_margin_row(row))
    }

    pub fn check_schema(&self, m: &FeatureMatrix) -> Result<(), GbmError> {
        let names = m.column_names();
        if names != self.feature_names {
            return Err(GbmError::Input(format!(
                "feature schema mismatch: model has {} columns, matrix has {}",
                self.feature_names.len(),
                names.len()
            )));
        }
        Ok(())
    }

    pub fn predict_margin(&self, m: &FeatureMatrix) -> Result<Vec<f64>, GbmError> {
        self.check_schema(m)?;
        Ok((0..m.n_rows()).map(|r| self.predict_margin_row(m.row(r))).collect())
    }

    pub fn predict_proba(&self, m: &FeatureMatrix) -> Result<Vec<f64>, GbmError> {
        Ok(self.predict_margin(m)?.into_iter().map(sigmoid).collect())
    }

    pub fn to_json(&self) -> Result<String, GbmError> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            eta: self.learning_rate,
            base_score: self.base_score,
            feature_names: self.feature_names.clone(),
            params: self.params.clone(),
            trees: self.trees.iter().map(|t| t.to_json(0)).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Ensemble, GbmError> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != MODEL_FORMAT {
            return Err(GbmError::Input(format!("unknown model format {:?}", file.format)));
        }
        let d = file.feature_names.len();
        Ok(Ensemble {
            trees: file.trees.iter().map(|t| Tree::from_json(t, d)).collect::<Result<_, _>>()?,
            learning_rate: file.eta,
            base_score: file.base_score,
            feature_names: file.feature_names,
            params: file.params,
        })
    }

    /// SHA-256 of the serialized model.
    pub fn model_hash(&self) -> Result<String, GbmError> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

/// Row indices per feature sorted by value, with missing rows held apart.
struct Presorted {
    sorted: Vec<Vec<u32>>,
    missing: Vec<Vec<u32>>,
}

fn presort(x: &[f64], n: usize, d: usize) -> Presorted {
    let (sorted, missing) = (0..d)
        .into_par_iter()
        .map(|f| {
            let mut present: Vec<u32> = Vec::with_capacity(n);
            let mut absent = Vec::new();
            for r in 0..n {
                if x[r * d + f].is_nan() {
                    absent.push(r as u32);
                } else {
                    present.push(r as u32);
                }
            }
            present.sort_by(|&a, &b| x[a as usize * d + f].total_cmp(&x[b as usize * d + f]));
            (present, absent)
        })
        .unzip();
    Presorted { sorted, missing }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
    left: (f64, f64),
    right: (f64, f64),
}

const INACTIVE: u32 = u32::MAX;

struct Grower<'a> {
    x: &'a [f64],
    d: usize,
    pre: &'a Presorted,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a TrainParams,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    /// Best split per frontier slot for one feature.
    fn scan(&self, f: usize, pos: &[u32], slot_of: &[u32], totals: &[(f64, f64)]) -> Vec<Option<Candidate>> {
        let k = totals.len();
        let mut miss = vec![(0.0, 0.0, 0usize); k];
        for &r in &self.pre.missing[f] {
            let node = pos[r as usize];
            if node != INACTIVE {
                let s = slot_of[node as usize] as usize;
                miss[s].0 += self.grad[r as usize];
                miss[s].1 += self.hess[r as usize];
                miss[s].2 += 1;
            }
        }
        let mut acc = vec![(0.0, 0.0); k];
        let mut last = vec![f64::NAN; k];
        let mut best: Vec<Option<Candidate>> = vec![None; k];
        let mcw = self.params.min_child_weight;
        for &r in &self.pre.sorted[f] {
            let r = r as usize;
            let node = pos[r];
            if node == INACTIVE {
                continue;
            }
            let s = slot_of[node as usize] as usize;
            let v = self.x[r * self.d + f];
            if !last[s].is_nan() && v > last[s] {
                let (g, h) = totals[s];
                let parent = self.score(g, h);
                let mut threshold = 0.5 * (last[s] + v);
                if threshold <= last[s] {
                    threshold = v;
                }
                let (gm, hm, cm) = miss[s];
                let options: &[bool] = if cm > 0 { &[true, false] } else { &[true] };
                for &default_left in options {
                    let (gl, hl) = if default_left {
                        (acc[s].0 + gm, acc[s].1 + hm)
                    } else {
                        acc[s]
                    };
                    let (gr, hr) = (g - gl, h - hl);
                    if hl < mcw || hr < mcw {
                        continue;
                    }
                    let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent) - self.params.gamma;
                    if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                        best[s] = Some(Candidate {
                            gain,
                            feature: f,
                            threshold,
                            default_left,
                            left: (gl, hl),
                            right: (gr, hr),
                        });
                    }
                }
            }
            acc[s].0 += self.grad[r];
            acc[s].1 += self.hess[r];
            last[s] = v;
        }
        best
    }

    fn grow(&self, in_sample: &[bool], features: &[usize]) -> Tree {
        let n = in_sample.len();
        let lambda = self.params.lambda;
        let mut pos: Vec<u32> = in_sample.iter().map(|&s| if s { 0 } else { INACTIVE }).collect();
        let mut stats: Vec<(f64, f64)> = vec![(0.0, 0.0)];
        for r in 0..n {
            if in_sample[r] {
                stats[0].0 += self.grad[r];
                stats[0].1 += self.hess[r];
            }
        }
        let mut nodes = vec![Node::Leaf {
            value: 0.0,
            cover: stats[0].1,
        }];
        let mut frontier = vec![0usize];
        for _depth in 0..self.params.max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut slot_of = vec![INACTIVE; nodes.len()];
            for (s, &node) in frontier.iter().enumerate() {
                slot_of[node] = s as u32;
            }
            let totals: Vec<(f64, f64)> = frontier.iter().map(|&node| stats[node]).collect();
            let per_feature: Vec<Vec<Option<Candidate>>> = features
                .par_iter()
                .map(|&f| self.scan(f, &pos, &slot_of, &totals))
                .collect();
            // feature order reduction keeps ties deterministic
            let mut best: Vec<Option<Candidate>> = vec![None; frontier.len()];
            for cands in &per_feature {
                for (s, c) in cands.iter().enumerate() {
                    if let Some(c) = c {
                        if best[s].is_none_or(|b| c.gain > b.gain) {
                            best[s] = Some(*c);
                        }
                    }
                }
            }
            let mut next = Vec::new();
            let mut split_of: Vec<Option<Candidate>> = vec![None; nodes.len()];
            let mut child_base = vec![0usize; nodes.len()];
            for (s, &node) in frontier.iter().enumerate() {
                if let Some(c) = best[s] {
                    let left = nodes.len();
                    nodes.push(Node::Leaf {
                        value: 0.0,
                        cover: c.left.1,
                    });
                    nodes.push(Node::Leaf {
                        value: 0.0,
                        cover: c.right.1,
                    });
                    stats.push(c.left);
                    stats.push(c.right);
                    nodes[node] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        default_left: c.default_left,
                        left,
                        right: left + 1,
                        cover: stats[node].1,
                    };
                    split_of[node] = Some(c);
                    child_base[node] = left;
                    next.push(left);
                    next.push(left + 1);
                }
            }
            for r in 0..n {
                let node = pos[r];
                if node == INACTIVE {
                    continue;
                }
                let node = node as usize;
                match split_of[node] {
                    Some(c) => {
                        let v = self.x[r * self.d + c.feature];
                        let go_left = if v.is_nan() { c.default_left } else { v < c.threshold };
                        pos[r] = (child_base[node] + usize::from(!go_left)) as u32;
                    }
                    None => pos[r] = INACTIVE,
                }
            }
            frontier = next;
        }
        for (i, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf { value, .. } = node {
                let (g, h) = stats[i];
                *value = -g / (h + lambda);
            }
        }
        let mut tree = Tree { nodes };
        fix_covers(&mut tree, 0);
        tree
    }
}

/// Sets each split's cover to the sum of its children so the parent/child
/// identity holds exactly.
fn fix_covers(t: &mut Tree, i: usize) -> f64 {
    match t.nodes[i] {
        Node::Leaf { cover, .. } => cover,
        Node::Split { left, right, .. } => {
            let c = fix_covers(t, left) + fix_covers(t, right);
            if let Node::Split { cover, .. } = &mut t.nodes[i] {
                *cover = c;
            }
            c
        }
    }
}

fn labels_to_f64(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// Trains on a dense row-major block. `checkpoint` is called with the
/// ensemble size and the running training margins after each round.
fn train_dense(
    x: &[f64],
    n: usize,
    d: usize,
    labels: &[bool],
    params: &TrainParams,
    feature_names: Vec<String>,
) -> Result<Ensemble, GbmError> {
    params.validate()?;
    if labels.len() != n {
        return Err(GbmError::Input(format!("{} labels for {n} rows", labels.len())));
    }
    let positives = labels.iter().filter(|&&b| b).count();
    if positives == 0 || positives == n {
        return Err(GbmError::Training("labels contain a single class".into()));
    }
    if x.iter().any(|v| v.is_infinite()) {
        return Err(GbmError::Input("feature values must be finite or missing".into()));
    }
    let y = labels_to_f64(labels);
    let rate = positives as f64 / n as f64;
    let base_score = (rate / (1.0 - rate)).ln();
    let pre = presort(x, n, d);
    let mut margin = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_rows = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((params.colsample_bytree * d as f64).round() as usize).clamp(1, d.max(1));
    let mut trees = Vec::with_capacity(params.n_estimators);
    for _ in 0..params.n_estimators {
        for r in 0..n {
            let p = sigmoid(margin[r]);
            grad[r] = p - y[r];
            hess[r] = p * (1.0 - p);
        }
        let in_sample = if n_rows == n {
            vec![true; n]
        } else {
            let mut mask = vec![false; n];
            for i in sample(&mut rng, n, n_rows) {
                mask[i] = true;
            }
            mask
        };
        let features: Vec<usize> = if d == 0 {
            Vec::new()
        } else if n_cols == d {
            (0..d).collect()
        } else {
            let mut f = sample(&mut rng, d, n_cols).into_vec();
            f.sort_unstable();
            f
        };
        let grower = Grower {
            x,
            d,
            pre: &pre,
            grad: &grad,
            hess: &hess,
            params,
        };
        let tree = grower.grow(&in_sample, &features);
        for r in 0..n {
            margin[r] += params.learning_rate * tree.predict(&x[r * d..(r + 1) * d]);
        }
        trees.push(tree);
    }
    Ok(Ensemble {
        trees,
        learning_rate: params.learning_rate,
        base_score,
        feature_names,
        params: params.clone(),
    })
}

/// Fits an ensemble on every row of `m`.
pub fn train(m: &FeatureMatrix, labels: &[bool], params: &TrainParams) -> Result<Ensemble, GbmError> {
    train_dense(m.values(), m.n_rows(), m.n_cols(), labels, params, m.column_names())
}

/// Area under the ROC curve via the Mann-Whitney rank sum; tied scores
/// count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, GbmError> {
    if scores.len() != labels.len() {
        return Err(GbmError::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GbmError::Input("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GbmError::Undefined("AUROC needs both classes".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Stratified fold id per row: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut fold = vec![0; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub n_estimators: Vec<usize>,
    pub subsample: Vec<f64>,
    pub colsample_bytree: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ParamGrid {
    /// The full 3^6 lattice.
    pub fn full() -> ParamGrid {
        ParamGrid {
            max_depth: vec![3, 6, 9],
            learning_rate: vec![0.01, 0.1, 0.2],
            n_estimators: vec![100, 300, 500],
            subsample: vec![0.7, 0.8, 0.9],
            colsample_bytree: vec![0.7, 0.8, 0.9],
            gamma: vec![0.0, 0.1, 0.2],
        }
    }

    pub fn single(p: &TrainParams) -> ParamGrid {
        ParamGrid {
            max_depth: vec![p.max_depth],
            learning_rate: vec![p.learning_rate],
            n_estimators: vec![p.n_estimators],
            subsample: vec![p.subsample],
            colsample_bytree: vec![p.colsample_bytree],
            gamma: vec![p.gamma],
        }
    }

    pub fn len(&self) -> usize {
        self.max_depth.len()
            * self.learning_rate.len()
            * self.n_estimators.len()
            * self.subsample.len()
            * self.colsample_bytree.len()
            * self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in lattice order: max_depth varies slowest, gamma fastest.
    pub fn cells(&self, base: &TrainParams) -> Vec<TrainParams> {
        let mut out = Vec::with_capacity(self.len());
        for &max_depth in &self.max_depth {
            for &learning_rate in &self.learning_rate {
                for &n_estimators in &self.n_estimators {
                    for &subsample in &self.subsample {
                        for &colsample_bytree in &self.colsample_bytree {
                            for &gamma in &self.gamma {
                                out.push(TrainParams {
                                    max_depth,
                                    learning_rate,
                                    n_estimators,
                                    subsample,
                                    colsample_bytree,
                                    gamma,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub params: TrainParams,
    pub mean_auroc: f64,
    pub fold_aurocs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TrainParams,
    pub best_score: f64,
    pub cells: Vec<CellScore>,
    pub skipped_folds: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified k-fold grid search. Fold assignment depends only on the
/// labels, `k`, and `seed`. Cells that differ only in `n_estimators` share
/// one boosting run, scored at each requested ensemble size; boosting is
/// sequential so a prefix of a longer run is the shorter model.
pub fn grid_search_cv(
    m: &FeatureMatrix,
    labels: &[bool],
    grid: &ParamGrid,
    base: &TrainParams,
    k: usize,
    seed: u64,
) -> Result<GridResult, GbmError> {
    if k < 2 {
        return Err(GbmError::Grid(format!("need at least 2 folds, got {k}")));
    }
    if grid.is_empty() {
        return Err(GbmError::Grid("empty parameter grid".into()));
    }
    if labels.len() != m.n_rows() {
        return Err(GbmError::Input(format!("{} labels for {} rows", labels.len(), m.n_rows())));
    }
    let cells = grid.cells(base);
    for c in &cells {
        c.validate()?;
    }
    let fold = stratified_folds(labels, k, seed);
    let mut warnings = Vec::new();
    let mut skipped = Vec::new();
    let mut usable = Vec::new();
    for f in 0..k {
        let classes = |inside: bool| {
            let ys: Vec<bool> = (0..labels.len()).filter(|&i| (fold[i] == f) == inside).map(|i| labels[i]).collect();
            ys.contains(&true) && ys.contains(&false)
        };
        if classes(true) && classes(false) {
            usable.push(f);
        } else {
            warnings.push(format!("fold {f} skipped: a partition lacks one class"));
            skipped.push(f);
        }
    }
    if usable.is_empty() {
        return Err(GbmError::Grid("every fold lacks a class".into()));
    }

    // runs keyed by everything except n_estimators, in lattice order
    let mut runs: Vec<TrainParams> = Vec::new();
    for c in &cells {
        let key = TrainParams {
            n_estimators: 0,
            ..c.clone()
        };
        if !runs.contains(&key) {
            runs.push(key);
        }
    }
    let mut sizes = grid.n_estimators.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let max_trees = *sizes.last().expect("grid is nonempty");

    let folds: Vec<(FeatureMatrix, Vec<bool>, FeatureMatrix, Vec<bool>)> = usable
        .iter()
        .map(|&f| {
            let train_rows: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
            let valid_rows: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
            (
                m.select_rows(&train_rows),
                train_rows.iter().map(|&i| labels[i]).collect(),
                m.select_rows(&valid_rows),
                valid_rows.iter().map(|&i| labels[i]).collect(),
            )
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..runs.len()).flat_map(|r| (0..folds.len()).map(move |f| (r, f))).collect();
    let scores: Vec<Result<Vec<f64>, GbmError>> = jobs
        .par_iter()
        .map(|&(r, f)| {
            let (xt, yt, xv, yv) = &folds[f];
            let params = TrainParams {
                n_estimators: max_trees,
                ..runs[r].clone()
            };
            let model = train(xt, yt, &params)?;
            let mut margin = vec![model.base_score; xv.n_rows()];
            let mut out = Vec::with_capacity(sizes.len());
            let mut next = 0;
            for (t, tree) in model.trees.iter().enumerate() {
                for (row, m) in margin.iter_mut().enumerate() {
                    *m += model.learning_rate * tree.predict(xv.row(row));
                }
                while next < sizes.len() && sizes[next] == t + 1 {
                    out.push(auroc(&margin, yv)?);
                    next += 1;
                }
            }
            // zero-tree ensembles score the constant base margin
            while next < sizes.len() {
                out.push(auroc(&margin, yv)?);
                next += 1;
            }
            if sizes[0] == 0 {
                out[0] = 0.5;
            }
            Ok(out)
        })
        .collect();
    let scores: Vec<Vec<f64>> = scores.into_iter().collect::<Result<_, _>>()?;

    let mut out_cells = Vec::with_capacity(cells.len());
    for c in &cells {
        let key = TrainParams {
            n_estimators: 0,
            ..c.clone()
        };
        let r = runs.iter().position(|x| *x == key).expect("run exists");
        let s = sizes.binary_search(&c.n_estimators).expect("size exists");
        let fold_aurocs: Vec<f64> = (0..folds.len()).map(|f| scores[r * folds.len() + f][s]).collect();
        let mean_auroc = fold_aurocs.iter().sum::<f64>() / fold_aurocs.len() as f64;
        out_cells.push(CellScore {
            params: c.clone(),
            mean_auroc,
            fold_aurocs,
        });
    }
    let mut best = 0;
    for (i, c) in out_cells.iter().enumerate() {
        if c.mean_auroc > out_cells[best].mean_auroc {
            best = i;
        }
    }
    Ok(GridResult {
        best: out_cells[best].params.clone(),
        best_score: out_cells[best].mean_auroc,
        cells: out_cells,
        skipped_folds: skipped,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    /// Rows are true classes (negative, positive); each row sums to 100.
    pub fn row_percents(&self) -> [[f64; 2]; 2] {
        let row = |a: usize, b: usize| {
            let t = (a + b) as f64;
            if t == 0.0 {
                [0.0, 0.0]
            } else {
                [100.0 * a as f64 / t, 100.0 * b as f64 / t]
            }
        };
        [row(self.tn, self.fp), row(self.fn_, self.tp)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub n_pos: usize,
    pub auroc: f64,
    pub auroc_ci: Option<(f64, f64)>,
    pub threshold: f64,
    pub sensitivity: f64,
    pub sensitivity_ci: (f64, f64),
    pub specificity: f64,
    pub specificity_ci: (f64, f64),
    pub confusion: ConfusionMatrix,
    pub confusion_percent: [[f64; 2]; 2],
    pub bootstrap_resamples: usize,
}

/// Percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Thresholded metrics (score ≥ threshold is positive) plus an AUROC
/// interval from a stratified bootstrap with `bootstrap` resamples.
pub fn report(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    bootstrap: usize,
    seed: u64,
) -> Result<ClassificationReport, GbmError> {
    let point = auroc(scores, labels)?;
    let mut cm = ConfusionMatrix {
        tn: 0,
        fp: 0,
        fn_: 0,
        tp: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        match (y, s >= threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    let n_pos = cm.tp + cm.fn_;
    let n_neg = cm.tn + cm.fp;

    let auroc_ci = if bootstrap == 0 {
        None
    } else {
        let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| !y).map(|(&s, _)| s).collect();
        let mut y = vec![true; pos.len()];
        y.extend(std::iter::repeat_n(false, neg.len()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draws = Vec::with_capacity(bootstrap);
        let mut s = Vec::with_capacity(y.len());
        for _ in 0..bootstrap {
            s.clear();
            s.extend((0..pos.len()).map(|_| pos[rng.random_range(0..pos.len())]));
            s.extend((0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]));
            draws.push(auroc(&s, &y)?);
        }
        draws.sort_by(f64::total_cmp);
        Some((percentile(&draws, 0.025), percentile(&draws, 0.975)))
    };

    Ok(ClassificationReport {
        n: labels.len(),
        n_pos,
        auroc: point,
        auroc_ci,
        threshold,
        sensitivity: cm.tp as f64 / n_pos as f64,
        sensitivity_ci: wilson_interval(cm.tp as u64, n_pos as u64, Z_95),
        specificity: cm.tn as f64 / n_neg as f64,
        specificity_ci: wilson_interval(cm.tn as u64, n_neg as u64, Z_95),
        confusion_percent: cm.row_percents(),
        confusion: cm,
        bootstrap_resamples: bootstrap,
    })
}

/// One line of the model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub outcome: String,
    pub model: String,
    pub report: ClassificationReport,
}

pub fn write_reports_csv<W: Write>(writer: W, rows: &[ReportRow]) -> Result<(), GbmError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "outcome",
        "model",
        "n",
        "auroc",
        "auroc_ci_low",
        "auroc_ci_high",
        "sensitivity",
        "sensitivity_ci_low",
        "sensitivity_ci_high",
        "specificity",
        "specificity_ci_low",
        "specificity_ci_high",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in rows {
        let r = &row.report;
        wtr.write_record([
            row.outcome.clone(),
            row.model.clone(),
            r.n.to_string(),
            r.auroc.to_string(),
            opt(r.auroc_ci.map(|c| c.0)),
            opt(r.auroc_ci.map(|c| c.1)),
            r.sensitivity.to_string(),
            r.sensitivity_ci.0.to_string(),
            r.sensitivity_ci.1.to_string(),
            r.specificity.to_string(),
            r.specificity_ci.0.to_string(),
            r.specificity_ci.1.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{FeatureColumn, FeatureGroup};

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        let d = rows[0].len();
        FeatureMatrix::new(
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            (0..d).map(|j| FeatureColumn::continuous(format!("f{j}"), FeatureGroup::Clinical)).collect(),
            rows.concat(),
        )
        .unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(GbmError::Undefined(_))));
    }

    #[test]
    fn constant_feature_gives_single_leaves() {
        let m = matrix(&(0..20).map(|_| vec![1.0]).collect::<Vec<_>>());
        let y: Vec<bool> = (0..20).map(|i| i % 4 == 0).collect();
        let params = TrainParams {
            subsample: 1.0,
            ..TrainParams::default()
        };
        let e = train(&m, &y, &params).unwrap();
        assert!(e.trees.iter().all(|t| t.nodes.len() == 1));
        for p in e.predict_proba(&m).unwrap() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_stump() {
        let m = matrix(&(0..40).map(|i| vec![i as f64]).collect::<Vec<_>>());
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let params = TrainParams {
            max_depth: 1,
            n_estimators: 10,
            subsample: 1.0,
            colsample_bytree: 1.0,
            ..TrainParams::default()
        };
        let e = train(&m, &y, &params).unwrap();
        assert_eq!(auroc(&e.predict_proba(&m).unwrap(), &y).unwrap(), 1.0);
        match e.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(threshold, 19.5),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn empty_ensemble_predicts_base_rate() {
        let m = matrix(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let y = [true, false, false, false];
        let params = TrainParams {
            n_estimators: 0,
            ..TrainParams::default()
        };
        let e = train(&m, &y, &params).unwrap();
        for p in e.predict_proba(&m).unwrap() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_rejected() {
        let m = matrix(&[vec![0.0], vec![1.0]]);
        assert!(matches!(train(&m, &[true, true], &TrainParams::default()), Err(GbmError::Training(_))));
    }

    #[test]
    fn missing_values_follow_default_branch() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i % 5 == 0 { f64::NAN } else { i as f64 }])
            .collect();
        let m = matrix(&rows);
        // missing rows are all positive, so they should route with the high side
        let y: Vec<bool> = (0..40).map(|i| i >= 20 || i % 5 == 0).collect();
        let params = TrainParams {
            max_depth: 1,
            n_estimators: 1,
            subsample: 1.0,
            colsample_bytree: 1.0,
            ..TrainParams::default()
        };
        let e = train(&m, &y, &params).unwrap();
        match e.trees[0].nodes[0] {
            Node::Split { default_left, .. } => assert!(!default_left),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn json_round_trip() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 7) as f64, (i % 3) as f64]).collect();
        let m = matrix(&rows);
        let y: Vec<bool> = (0..60).map(|i| (i % 7) + (i % 3) > 4).collect();
        let e = train(&m, &y, &TrainParams::default()).unwrap();
        let back = Ensemble::from_json(&e.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), e.to_json().unwrap());
        assert_eq!(back.predict_margin(&m).unwrap(), e.predict_margin(&m).unwrap());
        assert_eq!(back.model_hash().unwrap(), e.model_hash().unwrap());
        let json: serde_json::Value = serde_json::from_str(&e.to_json().unwrap()).unwrap();
        assert!(json["trees"][0].get("cover").is_some());
    }

    #[test]
    fn cover_identity() {
        let rows: Vec<Vec<f64>> = (0..80).map(|i| vec![(i * 13 % 17) as f64, (i % 5) as f64]).collect();
        let m = matrix(&rows);
        let y: Vec<bool> = (0..80).map(|i| i * 13 % 17 > 8).collect();
        let e = train(&m, &y, &TrainParams::default()).unwrap();
        for t in &e.trees {
            for node in &t.nodes {
                if let Node::Split { left, right, cover, .. } = *node {
                    assert_eq!(cover, t.nodes[left].cover() + t.nodes[right].cover());
                }
            }
        }
    }

    #[test]
    fn schema_mismatch() {
        let m = matrix(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        let e = train(&m, &[true, false, true], &TrainParams::default()).unwrap();
        let other = matrix(&[vec![0.0], vec![1.0]]);
        assert!(matches!(e.predict_proba(&other), Err(GbmError::Input(_))));
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(ParamGrid::full().len(), 729);
        let cells = ParamGrid::full().cells(&TrainParams::default());
        assert_eq!(cells[0].max_depth, 3);
        assert_eq!(cells[1].gamma, 0.1);
        assert_eq!(cells[728].max_depth, 9);
    }

    #[test]
    fn prefix_scores_match_separate_training() {
        let rows: Vec<Vec<f64>> = (0..120).map(|i| vec![(i * 7 % 23) as f64, (i % 4) as f64]).collect();
        let m = matrix(&rows);
        let y: Vec<bool> = (0..120).map(|i| (i * 7 % 23) as f64 + 2.0 * (i % 4) as f64 > 13.0).collect();
        let grid = ParamGrid {
            n_estimators: vec![5, 20],
            ..ParamGrid::single(&TrainParams::default())
        };
        let result = grid_search_cv(&m, &y, &grid, &TrainParams::default(), 3, 9).unwrap();
        let fold = stratified_folds(&y, 3, 9);
        for cell in &result.cells {
            for f in 0..3 {
                let tr: Vec<usize> = (0..120).filter(|&i| fold[i] != f).collect();
                let va: Vec<usize> = (0..120).filter(|&i| fold[i] == f).collect();
                let model = train(&m.select_rows(&tr), &tr.iter().map(|&i| y[i]).collect::<Vec<_>>(), &cell.params).unwrap();
                let s = model.predict_margin(&m.select_rows(&va)).unwrap();
                let a = auroc(&s, &va.iter().map(|&i| y[i]).collect::<Vec<_>>()).unwrap();
                assert_eq!(a, cell.fold_aurocs[f]);
            }
        }
    }

    #[test]
    fn report_examples() {
        let y = [true, true, false, false];
        let r = report(&[0.9, 0.8, 0.2, 0.1], &y, 0.5, 200, 1).unwrap();
        assert_eq!((r.sensitivity, r.specificity), (1.0, 1.0));
        assert_eq!(r.auroc_ci, Some((1.0, 1.0)));
        let r = report(&[0.1, 0.2, 0.8, 0.9], &y, 0.5, 0, 1).unwrap();
        assert_eq!(r.auroc, 0.0);
        let a = report(&[0.4, 0.7, 0.6, 0.1], &y, 0.5, 1000, 3).unwrap();
        let b = report(&[0.4, 0.7, 0.6, 0.1], &y, 0.5, 1000, 3).unwrap();
        assert_eq!(a, b);
        for row in a.confusion_percent {
            assert!((row[0] + row[1] - 100.0).abs() < 1e-9);
        }
    }
}
