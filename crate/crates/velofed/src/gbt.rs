//! Second-order gradient-boosted regression trees with exact greedy split
//! search, squared-error objective (halved-loss convention: g = yhat - y,
//! h = 1), and portable JSON serialization.
//!
//! Invariants:
//! - leaf weights are stored unscaled; eta is applied at predict time only;
//! - routing is x[feature] < threshold -> left; thresholds are midpoints of
//!   adjacent distinct training values;
//! - split ties break toward the smaller feature index, then the smaller
//!   threshold, so results are independent of thread count;
//! - base_score is the training-target mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Regression-tree hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub n_trees: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            n_trees: 37,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::config("max_depth must be >= 1"));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::config(
                "lambda, gamma, min_child_weight must be non-negative",
            ));
        }
        if self.n_trees < 1 {
            return Err(Error::config("n_trees must be >= 1"));
        }
        Ok(())
    }
}

/// One tree node: route x[f] < t left, else right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Internal {
        f: usize,
        t: f64,
        l: Box<Node>,
        r: Box<Node>,
    },
    Leaf {
        w: f64,
    },
}

impl Node {
    /// Unscaled leaf weight this row routes to.
    pub fn output(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { w } => return *w,
                Node::Internal { f, t, l, r } => {
                    node = if row[*f] < *t { l } else { r };
                }
            }
        }
    }

    pub fn zero_leaf() -> Node {
        Node::Leaf { w: 0.0 }
    }

    /// Visit every numeric field (thresholds and leaf weights).
    fn for_each_value(&self, f: &mut impl FnMut(f64)) {
        match self {
            Node::Leaf { w } => f(*w),
            Node::Internal { t, l, r, .. } => {
                f(*t);
                l.for_each_value(f);
                r.for_each_value(f);
            }
        }
    }
}

/// A fitted boosted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub version: u32,
    pub base_score: f64,
    pub eta: f64,
    pub params: TreeParams,
    pub feature_names: Vec<String>,
    pub trees: Vec<Node>,
}

impl Ensemble {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }
}

/// Newton leaf weight -G / (H + lambda), with -0 normalized to 0.
pub fn leaf_weight(g_sum: f64, h_sum: f64, lambda: f64) -> f64 {
    let w = -g_sum / (h_sum + lambda);
    if w == 0.0 {
        0.0
    } else {
        w
    }
}

/// Best split found for one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Streaming candidate evaluation over rows of one node, one feature,
/// visited in ascending value order. Shared by the reference best_split and
/// the level-wise trainer so both use identical gain arithmetic.
struct SplitScan<'p> {
    params: &'p TreeParams,
    g_total: f64,
    h_total: f64,
    g_left: f64,
    h_left: f64,
    n_left: usize,
    prev_val: f64,
    started: bool,
    best_gain: f64,
    best_threshold: f64,
    found: bool,
}

impl<'p> SplitScan<'p> {
    fn new(g_total: f64, h_total: f64, params: &'p TreeParams) -> Self {
        SplitScan {
            params,
            g_total,
            h_total,
            g_left: 0.0,
            h_left: 0.0,
            n_left: 0,
            prev_val: 0.0,
            started: false,
            best_gain: 0.0,
            best_threshold: 0.0,
            found: false,
        }
    }

    #[inline]
    fn offer(&mut self, val: f64, g: f64, h: f64) {
        if self.started && val != self.prev_val && self.n_left > 0 {
            let h_right = self.h_total - self.h_left;
            if self.h_left >= self.params.min_child_weight
                && h_right >= self.params.min_child_weight
            {
                let g_right = self.g_total - self.g_left;
                let lambda = self.params.lambda;
                let gain = 0.5
                    * (self.g_left * self.g_left / (self.h_left + lambda)
                        + g_right * g_right / (h_right + lambda)
                        - self.g_total * self.g_total / (self.h_total + lambda))
                    - self.params.gamma;
                // Strict > keeps the smallest threshold on gain ties.
                if gain > self.best_gain {
                    let mut threshold = 0.5 * (self.prev_val + val);
                    // Guard against midpoint rounding onto the left value.
                    if threshold <= self.prev_val {
                        threshold = val;
                    }
                    self.best_gain = gain;
                    self.best_threshold = threshold;
                    self.found = true;
                }
            }
        }
        self.g_left += g;
        self.h_left += h;
        self.n_left += 1;
        self.prev_val = val;
        self.started = true;
    }

    fn finish(self, feature: usize) -> Option<Split> {
        // Positive gain required: best_gain started at 0 and comparisons are strict.
        self.found.then_some(Split {
            feature,
            threshold: self.best_threshold,
            gain: self.best_gain,
        })
    }
}

fn better(candidate: &Split, incumbent: &Option<Split>) -> bool {
    // Candidates arrive in ascending feature order, so strict > breaks gain
    // ties toward the smaller feature index.
    match incumbent {
        None => true,
        Some(b) => candidate.gain > b.gain,
    }
}

/// Exact greedy best split over the given rows: maximizes the regularized
/// gain over every feature and every midpoint of adjacent distinct values.
/// Returns None when no candidate has positive gain or satisfies
/// min_child_weight.
pub fn best_split(
    indices: &[usize],
    g: &[f64],
    h: &[f64],
    x: &DenseMatrix,
    params: &TreeParams,
) -> Option<Split> {
    if indices.len() < 2 {
        return None;
    }
    let g_total: f64 = indices.iter().map(|&i| g[i]).sum();
    let h_total: f64 = indices.iter().map(|&i| h[i]).sum();
    let mut best: Option<Split> = None;
    for j in 0..x.n_cols() {
        let mut vals: Vec<(f64, usize)> = indices.iter().map(|&i| (x.get(i, j), i)).collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut scan = SplitScan::new(g_total, h_total, params);
        for (v, i) in vals {
            scan.offer(v, g[i], h[i]);
        }
        if let Some(c) = scan.finish(j) {
            if better(&c, &best) {
                best = Some(c);
            }
        }
    }
    best
}

/// Per-feature presorted row order, reusable across trees and across tasks
/// that share the same training matrix.
pub struct Presorted {
    n_rows: usize,
    cols: Vec<SortedCol>,
}

struct SortedCol {
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl Presorted {
    pub fn new(x: &DenseMatrix) -> Presorted {
        let cols = (0..x.n_cols())
            .into_par_iter()
            .map(|j| {
                let mut pairs: Vec<(f64, u32)> =
                    (0..x.n_rows()).map(|i| (x.get(i, j), i as u32)).collect();
                pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                SortedCol {
                    idx: pairs.iter().map(|p| p.1).collect(),
                    val: pairs.iter().map(|p| p.0).collect(),
                }
            })
            .collect();
        Presorted {
            n_rows: x.n_rows(),
            cols,
        }
    }
}

const INACTIVE: u32 = u32::MAX;

struct FlatTree {
    feature: Vec<usize>,
    threshold: Vec<f64>,
    left: Vec<usize>,
    right: Vec<usize>,
    weight: Vec<f64>,
    is_leaf: Vec<bool>,
}

impl FlatTree {
    fn new() -> Self {
        FlatTree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            weight: Vec::new(),
            is_leaf: Vec::new(),
        }
    }

    fn push(&mut self) -> usize {
        self.feature.push(0);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.weight.push(0.0);
        self.is_leaf.push(true);
        self.feature.len() - 1
    }

    fn to_node(&self, id: usize) -> Node {
        if self.is_leaf[id] {
            Node::Leaf {
                w: self.weight[id],
            }
        } else {
            Node::Internal {
                f: self.feature[id],
                t: self.threshold[id],
                l: Box::new(self.to_node(self.left[id])),
                r: Box::new(self.to_node(self.right[id])),
            }
        }
    }
}

struct ActiveNode {
    arena_id: usize,
    g_sum: f64,
    h_sum: f64,
    n_rows: usize,
}

enum SlotFate {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left_slot: u32,
        right_slot: u32,
    },
}

/// Grow one tree level-wise on the current gradients. Returns the tree and
/// each row's unscaled leaf output.
fn grow_tree(
    x: &DenseMatrix,
    pre: &Presorted,
    g: &[f64],
    h: &[f64],
    params: &TreeParams,
    slot_of_row: &mut [u32],
    row_out: &mut [f64],
) -> Node {
    let n = x.n_rows();
    let mut flat = FlatTree::new();
    let root = flat.push();
    slot_of_row.fill(0);

    let mut active = vec![ActiveNode {
        arena_id: root,
        g_sum: g.iter().sum(),
        h_sum: h.iter().sum(),
        n_rows: n,
    }];

    for _depth in 0..params.max_depth {
        if active.is_empty() {
            break;
        }
        // Best candidate per active slot, scanned feature-parallel with a
        // deterministic in-order fold.
        let per_feature: Vec<Vec<Option<Split>>> = pre
            .cols
            .par_iter()
            .enumerate()
            .map(|(j, col)| {
                let mut scans: Vec<SplitScan> = active
                    .iter()
                    .map(|a| SplitScan::new(a.g_sum, a.h_sum, params))
                    .collect();
                for (pos, &row) in col.idx.iter().enumerate() {
                    let slot = slot_of_row[row as usize];
                    if slot == INACTIVE {
                        continue;
                    }
                    scans[slot as usize].offer(col.val[pos], g[row as usize], h[row as usize]);
                }
                scans.into_iter().map(|s| s.finish(j)).collect()
            })
            .collect();

        let mut best: Vec<Option<Split>> = vec![None; active.len()];
        for cands in &per_feature {
            for (slot, cand) in cands.iter().enumerate() {
                if let Some(c) = cand {
                    if better(c, &best[slot]) {
                        best[slot] = Some(*c);
                    }
                }
            }
        }

        let mut fates: Vec<SlotFate> = Vec::with_capacity(active.len());
        let mut next_active: Vec<ActiveNode> = Vec::new();
        let mut any_split = false;
        for (slot, node) in active.iter().enumerate() {
            match best[slot].filter(|_| node.n_rows >= 2) {
                Some(split) => {
                    any_split = true;
                    let l = flat.push();
                    let r = flat.push();
                    flat.is_leaf[node.arena_id] = false;
                    flat.feature[node.arena_id] = split.feature;
                    flat.threshold[node.arena_id] = split.threshold;
                    flat.left[node.arena_id] = l;
                    flat.right[node.arena_id] = r;
                    let left_slot = next_active.len() as u32;
                    next_active.push(ActiveNode {
                        arena_id: l,
                        g_sum: 0.0,
                        h_sum: 0.0,
                        n_rows: 0,
                    });
                    next_active.push(ActiveNode {
                        arena_id: r,
                        g_sum: 0.0,
                        h_sum: 0.0,
                        n_rows: 0,
                    });
                    fates.push(SlotFate::Split {
                        feature: split.feature,
                        threshold: split.threshold,
                        left_slot,
                        right_slot: left_slot + 1,
                    });
                }
                None => {
                    let w = leaf_weight(node.g_sum, node.h_sum, params.lambda);
                    flat.weight[node.arena_id] = w;
                    fates.push(SlotFate::Leaf(w));
                }
            }
        }

        for row in 0..n {
            let slot = slot_of_row[row];
            if slot == INACTIVE {
                continue;
            }
            match &fates[slot as usize] {
                SlotFate::Leaf(w) => {
                    row_out[row] = *w;
                    slot_of_row[row] = INACTIVE;
                }
                SlotFate::Split {
                    feature,
                    threshold,
                    left_slot,
                    right_slot,
                } => {
                    let child = if x.get(row, *feature) < *threshold {
                        *left_slot
                    } else {
                        *right_slot
                    };
                    slot_of_row[row] = child;
                    let c = &mut next_active[child as usize];
                    c.g_sum += g[row];
                    c.h_sum += h[row];
                    c.n_rows += 1;
                }
            }
        }
        active = next_active;
        if !any_split {
            break;
        }
    }

    // Depth cap reached: finalize whatever is still active.
    if !active.is_empty() {
        for node in &active {
            flat.weight[node.arena_id] = leaf_weight(node.g_sum, node.h_sum, params.lambda);
        }
        for row in 0..n {
            let slot = slot_of_row[row];
            if slot != INACTIVE {
                row_out[row] = flat.weight[active[slot as usize].arena_id];
                slot_of_row[row] = INACTIVE;
            }
        }
    }
    flat.to_node(0)
}

/// Validation data for tree-granularity early stopping.
pub struct EarlyStop<'a> {
    pub x_val: &'a DenseMatrix,
    pub y_val: &'a [f64],
    pub patience: usize,
}

fn val_rmse(preds: &[f64], y: &[f64]) -> f64 {
    let sum: f64 = preds.iter().zip(y).map(|(p, a)| (p - a) * (p - a)).sum();
    (sum / y.len() as f64).sqrt()
}

fn check_finite(x: &DenseMatrix, y: &[f64]) -> Result<()> {
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training targets".into()));
    }
    Ok(())
}

/// Fit a boosted ensemble, reusing an existing presort of `x`.
pub fn fit_ensemble_presorted(
    x: &DenseMatrix,
    pre: &Presorted,
    y: &[f64],
    params: &TreeParams,
    eta: f64,
    feature_names: Vec<String>,
    early_stop: Option<EarlyStop<'_>>,
) -> Result<Ensemble> {
    params.validate()?;
    if x.n_rows() == 0 {
        return Err(Error::invalid("cannot fit on zero rows"));
    }
    if x.n_rows() != y.len() {
        return Err(Error::shape(format!(
            "{} rows vs {} targets",
            x.n_rows(),
            y.len()
        )));
    }
    if pre.n_rows != x.n_rows() || pre.cols.len() != x.n_cols() {
        return Err(Error::shape("presort does not match the training matrix"));
    }
    if feature_names.len() != x.n_cols() {
        return Err(Error::shape(format!(
            "{} feature names for {} columns",
            feature_names.len(),
            x.n_cols()
        )));
    }
    check_finite(x, y)?;
    if let Some(es) = &early_stop {
        check_finite(es.x_val, es.y_val)?;
        if es.x_val.n_cols() != x.n_cols() || es.x_val.n_rows() != es.y_val.len() {
            return Err(Error::shape("validation matrix shape mismatch"));
        }
        if es.y_val.is_empty() {
            return Err(Error::invalid("empty validation set"));
        }
    }

    let n = x.n_rows();
    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut preds = vec![base_score; n];
    let mut g = vec![0.0; n];
    let h = vec![1.0; n];
    let mut slot_of_row = vec![0u32; n];
    let mut row_out = vec![0.0; n];

    let mut val_preds: Vec<f64> = early_stop
        .as_ref()
        .map(|es| vec![base_score; es.y_val.len()])
        .unwrap_or_default();
    let mut best_rmse = early_stop
        .as_ref()
        .map(|es| val_rmse(&val_preds, es.y_val))
        .unwrap_or(f64::INFINITY);
    let mut best_count = 0usize;
    let mut stale = 0usize;

    let mut trees = Vec::with_capacity(params.n_trees);
    for _m in 0..params.n_trees {
        for i in 0..n {
            g[i] = preds[i] - y[i];
        }
        let tree = grow_tree(x, pre, &g, &h, params, &mut slot_of_row, &mut row_out);
        for i in 0..n {
            preds[i] += eta * row_out[i];
        }
        if let Some(es) = &early_stop {
            for (i, vp) in val_preds.iter_mut().enumerate() {
                *vp += eta * tree.output(es.x_val.row(i));
            }
            trees.push(tree);
            let r = val_rmse(&val_preds, es.y_val);
            if r < best_rmse {
                best_rmse = r;
                best_count = trees.len();
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    break;
                }
            }
        } else {
            trees.push(tree);
        }
    }
    if early_stop.is_some() {
        trees.truncate(best_count);
    }

    Ok(Ensemble {
        version: MODEL_SCHEMA_VERSION,
        base_score,
        eta,
        params: params.clone(),
        feature_names,
        trees,
    })
}

/// Fit a boosted ensemble (presorts internally).
pub fn fit_ensemble(
    x: &DenseMatrix,
    y: &[f64],
    params: &TreeParams,
    eta: f64,
    feature_names: Vec<String>,
    early_stop: Option<EarlyStop<'_>>,
) -> Result<Ensemble> {
    let pre = Presorted::new(x);
    fit_ensemble_presorted(x, &pre, y, params, eta, feature_names, early_stop)
}

fn check_columns(e: &Ensemble, x: &DenseMatrix) -> Result<()> {
    if x.n_cols() != e.n_features() {
        return Err(Error::shape(format!(
            "matrix has {} columns, model expects {}",
            x.n_cols(),
            e.n_features()
        )));
    }
    Ok(())
}

/// base_score + eta * sum of unscaled tree outputs, per row.
pub fn predict(e: &Ensemble, x: &DenseMatrix) -> Result<Vec<f64>> {
    check_columns(e, x)?;
    Ok((0..x.n_rows())
        .map(|i| {
            let row = x.row(i);
            e.base_score + e.eta * e.trees.iter().map(|t| t.output(row)).sum::<f64>()
        })
        .collect())
}

/// Unscaled leaf outputs, one column per tree.
pub fn tree_outputs(e: &Ensemble, x: &DenseMatrix) -> Result<DenseMatrix> {
    check_columns(e, x)?;
    let mut out = DenseMatrix::zeros(x.n_rows(), e.trees.len());
    for i in 0..x.n_rows() {
        let row = x.row(i);
        for (m, tree) in e.trees.iter().enumerate() {
            out.set(i, m, tree.output(row));
        }
    }
    Ok(out)
}

fn check_model_finite(e: &Ensemble) -> Result<()> {
    let mut ok = e.base_score.is_finite() && e.eta.is_finite();
    for tree in &e.trees {
        tree.for_each_value(&mut |w| ok &= w.is_finite());
    }
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite("model document".into()))
    }
}

/// Model JSON: {version, base_score, eta, params, feature_names, trees}.
pub fn serialize(e: &Ensemble) -> Result<String> {
    check_model_finite(e)?;
    Ok(serde_json::to_string(e)?)
}

/// Parse and validate a model document.
pub fn deserialize(doc: &str) -> Result<Ensemble> {
    let e: Ensemble = serde_json::from_str(doc)?;
    if e.version != MODEL_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "model schema version {} unsupported (expected {MODEL_SCHEMA_VERSION})",
            e.version
        )));
    }
    check_model_finite(&e)?;
    Ok(e)
}
