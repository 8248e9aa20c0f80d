//! Gradient boosted regression trees for squared error with exact greedy
//! split search, second-order leaf weights and learned missing-value routing.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub eta: f64,
    pub max_depth: usize,
    pub n_rounds: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self { eta: 0.1, max_depth: 4, n_rounds: 200, lambda: 1.0, gamma: 0.0, min_child_weight: 1.0, subsample: 0.8, seed: 0 }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0
            && self.eta <= 1.0
            && self.lambda >= 0.0
            && self.gamma >= 0.0
            && self.min_child_weight >= 0.0
            && self.subsample > 0.0
            && self.subsample <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("gbt parameters out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        weight: f64,
    },
    /// Rows with `x[feature] < threshold` go left; missing values follow `default_left`.
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        gain: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_of(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { .. } => return k,
                Node::Split { feature, threshold, default_left, left, right, .. } => {
                    let v = row[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    k = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        match self.nodes[self.leaf_of(row)] {
            Node::Leaf { weight } => weight,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn splits(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, gain, .. } => Some((*feature, *gain)),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub base_score: f64,
    pub eta: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    fn check(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(Error::Dimension(format!("ensemble has {} features, input {}", self.n_features, x.ncols())));
        }
        Ok(())
    }

    /// Contribution of tree `k` alone, already scaled by the shrinkage.
    pub fn tree_output(&self, k: usize, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check(x)?;
        Ok(x.rows().into_iter().map(|r| self.eta * self.trees[k].predict_row(r)).collect())
    }
}

pub fn predict_gbt(ens: &TreeEnsemble, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    ens.check(x)?;
    Ok(x.rows()
        .into_iter()
        .map(|r| ens.base_score + ens.eta * ens.trees.iter().map(|t| t.predict_row(r)).sum::<f64>())
        .collect())
}

/// Mean split gain per feature; features never used score 0.
pub fn gain_importance(ens: &TreeEnsemble) -> Vec<f64> {
    let mut sum = vec![0.0; ens.n_features];
    let mut count = vec![0usize; ens.n_features];
    for (f, g) in ens.trees.iter().flat_map(|t| t.splits()) {
        sum[f] += g;
        count[f] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

/// Per-feature row orders shared by every tree fitted on the same design.
pub struct Presorted<'a> {
    x: ArrayView2<'a, f64>,
    order: Vec<Vec<u32>>,
    /// Column values in `order`.
    sorted: Vec<Vec<f64>>,
    missing: Vec<Vec<u32>>,
}

impl<'a> Presorted<'a> {
    pub fn new(x: ArrayView2<'a, f64>) -> Result<Self> {
        if x.iter().any(|v| v.is_infinite()) {
            return Err(Error::NonFinite("gbt design".into()));
        }
        let mut order = Vec::with_capacity(x.ncols());
        let mut missing = Vec::with_capacity(x.ncols());
        let mut sorted = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let (mut present, absent): (Vec<u32>, Vec<u32>) = (0..x.nrows() as u32).partition(|&i| !col[i as usize].is_nan());
            present.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            sorted.push(present.iter().map(|&i| col[i as usize]).collect());
            order.push(present);
            missing.push(absent);
        }
        Ok(Self { x, order, sorted, missing })
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d > 0.0 { g * g / d } else { 0.0 }
}

fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d > 0.0 { -g / d } else { 0.0 }
}

/// Gain of splitting a node with totals `(g, h)` into `(gl, hl)` and the rest.
pub fn split_gain(g: f64, h: f64, gl: f64, hl: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (score(gl, hl, lambda) + score(g - gl, h - hl, lambda) - score(g, h, lambda)) - gamma
}

/// Level-wise exact greedy tree on gradients `grad` and hessians `hess`.
pub fn build_tree(design: &Presorted<'_>, grad: &[f64], hess: &[f64], params: &GbtParams) -> Tree {
    let x = design.x;
    let n = x.nrows();
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut sums = vec![(grad.iter().sum::<f64>(), hess.iter().sum::<f64>())];
    let mut node_of = vec![0usize; n];
    let mut open = vec![0usize];
    for _depth in 0..params.max_depth {
        if open.is_empty() {
            break;
        }
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &k) in open.iter().enumerate() {
            slot[k] = s;
        }
        let m = open.len();
        let mut best: Vec<Option<Candidate>> = vec![None; m];
        let (mut gm, mut hm, mut gl, mut hl) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut prev = vec![f64::NAN; m];
        for f in 0..x.ncols() {
            gm.fill(0.0);
            hm.fill(0.0);
            gl.fill(0.0);
            hl.fill(0.0);
            prev.fill(f64::NAN);
            for &i in &design.missing[f] {
                let s = slot[node_of[i as usize]];
                if s != usize::MAX {
                    gm[s] += grad[i as usize];
                    hm[s] += hess[i as usize];
                }
            }
            let defaults: &[bool] = if design.missing[f].is_empty() { &[false] } else { &[false, true] };
            for (&i, &v) in design.order[f].iter().zip(&design.sorted[f]) {
                let i = i as usize;
                let s = slot[node_of[i]];
                if s == usize::MAX {
                    continue;
                }
                if v > prev[s] {
                    let (g, h) = sums[open[s]];
                    for &default_left in defaults {
                        let (l_g, l_h) = if default_left { (gl[s] + gm[s], hl[s] + hm[s]) } else { (gl[s], hl[s]) };
                        if l_h < params.min_child_weight || h - l_h < params.min_child_weight {
                            continue;
                        }
                        let gain = split_gain(g, h, l_g, l_h, params.lambda, params.gamma);
                        if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                            best[s] = Some(Candidate { gain, feature: f, threshold: v, default_left });
                        }
                    }
                }
                gl[s] += grad[i];
                hl[s] += hess[i];
                prev[s] = v;
            }
        }
        let mut next = Vec::new();
        let mut child_of = vec![None; nodes.len()];
        for (s, &k) in open.iter().enumerate() {
            let Some(c) = best[s] else {
                let (g, h) = sums[k];
                nodes[k] = Node::Leaf { weight: leaf_weight(g, h, params.lambda) };
                continue;
            };
            let (left, right) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { weight: 0.0 });
            nodes.push(Node::Leaf { weight: 0.0 });
            sums.push((0.0, 0.0));
            sums.push((0.0, 0.0));
            nodes[k] = Node::Split { feature: c.feature, threshold: c.threshold, default_left: c.default_left, left, right, gain: c.gain };
            child_of[k] = Some((c, left, right));
            next.push(left);
            next.push(right);
        }
        for i in 0..n {
            if let Some((c, left, right)) = child_of[node_of[i]] {
                let v = x[[i, c.feature]];
                let go_left = if v.is_nan() { c.default_left } else { v < c.threshold };
                node_of[i] = if go_left { left } else { right };
                let s = &mut sums[node_of[i]];
                s.0 += grad[i];
                s.1 += hess[i];
            }
        }
        open = next;
    }
    for k in open {
        let (g, h) = sums[k];
        nodes[k] = Node::Leaf { weight: leaf_weight(g, h, params.lambda) };
    }
    Tree { nodes }
}

/// Fits one ensemble per column of `y` in lockstep. After every round the
/// callback sees the ensembles so far and may stop training by returning false.
pub fn fit_gbt_multi(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    params: &GbtParams,
    mut on_round: impl FnMut(usize, &[TreeEnsemble]) -> bool,
) -> Result<Vec<TreeEnsemble>> {
    params.validate()?;
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!("X has {} rows, y has {}", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidInput("gbt needs at least 2 rows".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gbt targets".into()));
    }
    let design = Presorted::new(x)?;
    let n = x.nrows();
    let mut ensembles: Vec<TreeEnsemble> = y
        .columns()
        .into_iter()
        .map(|c| TreeEnsemble { base_score: c.sum() / n as f64, eta: params.eta, n_features: x.ncols(), trees: Vec::new() })
        .collect();
    let mut preds: Vec<Vec<f64>> = ensembles.iter().map(|e| vec![e.base_score; n]).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..y.ncols())
        .map(|k| ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)))
        .collect();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for round in 1..=params.n_rounds {
        for (k, ens) in ensembles.iter_mut().enumerate() {
            for i in 0..n {
                let used = params.subsample >= 1.0 || rngs[k].random::<f64>() < params.subsample;
                grad[i] = if used { preds[k][i] - y[[i, k]] } else { 0.0 };
                hess[i] = if used { 1.0 } else { 0.0 };
            }
            let tree = build_tree(&design, &grad, &hess, params);
            for (i, row) in x.rows().into_iter().enumerate() {
                preds[k][i] += params.eta * tree.predict_row(row);
            }
            ens.trees.push(tree);
        }
        if !on_round(round, &ensembles) {
            break;
        }
    }
    Ok(ensembles)
}

pub fn fit_gbt(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, params: &GbtParams) -> Result<TreeEnsemble> {
    let y2 = y.to_owned().insert_axis(ndarray::Axis(1));
    Ok(fit_gbt_multi(x, y2.view(), params, |_, _| true)?.remove(0))
}

pub fn predict_multi(ensembles: &[TreeEnsemble], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), ensembles.len()));
    for (k, e) in ensembles.iter().enumerate() {
        out.column_mut(k).assign(&predict_gbt(e, x)?);
    }
    Ok(out)
}
