//! Horizontal federated learning simulation.
//!
//! Protocol stages per task:
//! 1. every client fits a local boosted ensemble (early-stopped, padded to
//!    exactly M trees so the conv kernel geometry stays fixed);
//! 2. the server concatenates the ensembles into a global forest, blocks
//!    sorted by client id, and broadcasts it;
//! 3. each client precomputes the forest's tree outputs on its local data once;
//! 4. for each global round, clients are sampled Bernoulli(p_train) (whole
//!    selection redrawn while empty), run proximal mini-batch descent on the
//!    aggregation layer, and the server averages the updates by sample count.
//!
//! Determinism: every random draw comes from a ChaCha stream keyed by
//! (seed, purpose, round, client), so parallel and serial execution agree
//! bit for bit. The only payloads crossing the client/server boundary are
//! serialized ensembles and layer parameters, recorded in the Transcript.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbt::{self, Ensemble, Node, TreeParams};
use crate::matrix::DenseMatrix;

pub const FOREST_SCHEMA_VERSION: u32 = 1;
pub const LAYER_SCHEMA_VERSION: u32 = 1;

/// Federation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub n_clients: u32,
    pub p_train: f64,
    pub e_local: u32,
    pub e_global: u32,
    pub patience: u32,
    pub mu_prox: f64,
    pub trees_per_client: usize,
    pub channels: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub init: InitScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.01, batch: 256 }
    }
}

/// How the first global aggregation layer is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Deterministic warm start reproducing the mean of client predictions.
    WarmStart,
    /// One randomly selected client trains from the warm start first and its
    /// result becomes the initial global model.
    RandomParticipant,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            n_clients: 8,
            p_train: 0.25,
            e_local: 10,
            e_global: 15,
            patience: 5,
            mu_prox: 0.125,
            trees_per_client: 37,
            channels: 4,
            sgd: SgdConfig::default(),
            seed: 42,
            init: InitScheme::WarmStart,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("n_clients must be >= 1"));
        }
        if !(self.p_train > 0.0 && self.p_train <= 1.0) {
            return Err(Error::config("p_train must lie in (0, 1]"));
        }
        if self.mu_prox < 0.0 {
            return Err(Error::config("mu_prox must be non-negative"));
        }
        if self.trees_per_client < 1 || self.channels < 1 {
            return Err(Error::config("trees_per_client and channels must be >= 1"));
        }
        if self.sgd.lr <= 0.0 || self.sgd.batch < 1 {
            return Err(Error::config("sgd.lr must be positive and sgd.batch >= 1"));
        }
        Ok(())
    }
}

/// RNG stream purposes; part of the derivation key.
mod purpose {
    pub const SELECT: u64 = 1;
    pub const LOCAL: u64 = 2;
    pub const INIT: u64 = 3;
}

/// ChaCha stream keyed by (seed, purpose, round, client); little-endian packing.
pub fn derive_rng(seed: u64, purpose: u64, round: u64, client: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&round.to_le_bytes());
    key[24..32].copy_from_slice(&client.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// One client's supervised data for one task.
#[derive(Debug, Clone)]
pub struct ClientTask {
    pub client_id: u32,
    pub x_train: DenseMatrix,
    pub y_train: Vec<f64>,
    pub x_valid: DenseMatrix,
    pub y_valid: Vec<f64>,
}

/// Fit one early-stopped ensemble per client and pad each with zero-weight
/// leaves to exactly `params.n_trees` trees.
pub fn local_fit_ensembles(
    clients: &[ClientTask],
    feature_names: &[String],
    params: &TreeParams,
    eta: f64,
    patience: u32,
) -> Result<Vec<Ensemble>> {
    clients
        .par_iter()
        .map(|c| {
            if c.x_train.n_rows() == 0 {
                return Err(Error::invalid(format!(
                    "client {} has no training rows",
                    c.client_id
                )));
            }
            if c.x_valid.n_rows() == 0 {
                return Err(Error::invalid(format!(
                    "client {} has no validation rows",
                    c.client_id
                )));
            }
            let mut e = gbt::fit_ensemble(
                &c.x_train,
                &c.y_train,
                params,
                eta,
                feature_names.to_vec(),
                Some(gbt::EarlyStop {
                    x_val: &c.x_valid,
                    y_val: &c.y_valid,
                    patience: patience as usize,
                }),
            )?;
            while e.trees.len() < params.n_trees {
                e.trees.push(Node::zero_leaf());
            }
            Ok(e)
        })
        .collect()
}

/// Concatenation of all clients' ensembles, blocks in ascending client id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalForest {
    pub version: u32,
    pub trees_per_client: usize,
    pub feature_names: Vec<String>,
    pub client_order: Vec<u32>,
    pub base_scores: Vec<f64>,
    pub trees: Vec<Node>,
}

impl GlobalForest {
    pub fn n_clients(&self) -> usize {
        self.client_order.len()
    }

    pub fn width(&self) -> usize {
        self.n_clients() * self.trees_per_client
    }
}

/// Sort client blocks by id and concatenate. All ensembles must carry exactly
/// M trees and identical feature names.
pub fn aggregate_forest(ensembles: &[Ensemble], client_ids: &[u32]) -> Result<GlobalForest> {
    if ensembles.is_empty() || ensembles.len() != client_ids.len() {
        return Err(Error::shape("one ensemble per client id required"));
    }
    let m = ensembles[0].trees.len();
    let names = &ensembles[0].feature_names;
    for (e, id) in ensembles.iter().zip(client_ids) {
        if e.trees.len() != m {
            return Err(Error::shape(format!(
                "client {id} has {} trees, expected {m}",
                e.trees.len()
            )));
        }
        if &e.feature_names != names {
            return Err(Error::shape(format!(
                "client {id} disagrees on feature names"
            )));
        }
    }
    let mut order: Vec<usize> = (0..client_ids.len()).collect();
    order.sort_by_key(|&i| client_ids[i]);
    for pair in order.windows(2) {
        if client_ids[pair[0]] == client_ids[pair[1]] {
            return Err(Error::invalid(format!(
                "duplicate client id {}",
                client_ids[pair[0]]
            )));
        }
    }
    let mut trees = Vec::with_capacity(m * ensembles.len());
    for &i in &order {
        trees.extend(ensembles[i].trees.iter().cloned());
    }
    Ok(GlobalForest {
        version: FOREST_SCHEMA_VERSION,
        trees_per_client: m,
        feature_names: names.clone(),
        client_order: order.iter().map(|&i| client_ids[i]).collect(),
        base_scores: order.iter().map(|&i| ensembles[i].base_score).collect(),
        trees,
    })
}

/// Unscaled outputs of every forest tree: column (c*M + m) is tree m of
/// client block c.
pub fn forest_outputs(forest: &GlobalForest, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.n_cols() != forest.feature_names.len() {
        return Err(Error::shape(format!(
            "matrix has {} columns, forest expects {}",
            x.n_cols(),
            forest.feature_names.len()
        )));
    }
    let mut out = DenseMatrix::zeros(x.n_rows(), forest.width());
    for i in 0..x.n_rows() {
        let row = x.row(i);
        for (m, tree) in forest.trees.iter().enumerate() {
            out.set(i, m, tree.output(row));
        }
    }
    Ok(out)
}

/// One-layer 1D convolution (kernel = stride = M, one kernel per channel,
/// linear activation) plus a dense head: the learnable per-tree weighting.
///
/// Dense input is flattened block-major: index (block * channels + channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggLayer {
    pub version: u32,
    pub n_clients: usize,
    pub trees_per_client: usize,
    pub channels: usize,
    /// channels x trees_per_client, row-major per channel.
    pub conv_weights: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// n_clients * channels, block-major.
    pub dense_weights: Vec<f64>,
    pub dense_bias: f64,
}

impl AggLayer {
    pub fn n_params(&self) -> usize {
        self.channels * self.trees_per_client + self.channels + self.n_clients * self.channels + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        flat.extend_from_slice(&self.conv_weights);
        flat.extend_from_slice(&self.conv_bias);
        flat.extend_from_slice(&self.dense_weights);
        flat.push(self.dense_bias);
        flat
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::shape(format!(
                "{} parameters for a {}-parameter layer",
                flat.len(),
                self.n_params()
            )));
        }
        let cw = self.conv_weights.len();
        let cb = self.conv_bias.len();
        let dw = self.dense_weights.len();
        self.conv_weights.copy_from_slice(&flat[..cw]);
        self.conv_bias.copy_from_slice(&flat[cw..cw + cb]);
        self.dense_weights.copy_from_slice(&flat[cw + cb..cw + cb + dw]);
        self.dense_bias = flat[cw + cb + dw];
        Ok(())
    }

    pub fn same_shape(&self, other: &AggLayer) -> bool {
        self.n_clients == other.n_clients
            && self.trees_per_client == other.trees_per_client
            && self.channels == other.channels
    }

    pub fn l2_distance(&self, other: &AggLayer) -> f64 {
        self.to_flat()
            .iter()
            .zip(other.to_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Warm-start layer: every kernel entry eta, zero conv bias, uniform dense
/// weights 1/(K*C), dense bias = mean client base_score. With these values the
/// layer's output equals the arithmetic mean of client-local predictions.
pub fn init_agg_layer(forest: &GlobalForest, eta: f64, channels: usize) -> AggLayer {
    let k = forest.n_clients();
    let m = forest.trees_per_client;
    AggLayer {
        version: LAYER_SCHEMA_VERSION,
        n_clients: k,
        trees_per_client: m,
        channels,
        conv_weights: vec![eta; channels * m],
        conv_bias: vec![0.0; channels],
        dense_weights: vec![1.0 / (k as f64 * channels as f64); k * channels],
        dense_bias: forest.base_scores.iter().sum::<f64>() / k as f64,
    }
}

/// Forward pass for one precomputed tree-output row; fills z (K*C channel
/// activations, block-major) and returns the prediction.
fn forward_row(layer: &AggLayer, v: &[f64], z: &mut [f64]) -> f64 {
    let m = layer.trees_per_client;
    let c_out = layer.channels;
    let mut yhat = layer.dense_bias;
    for c in 0..layer.n_clients {
        let block = &v[c * m..(c + 1) * m];
        for o in 0..c_out {
            let kernel = &layer.conv_weights[o * m..(o + 1) * m];
            let mut acc = layer.conv_bias[o];
            for (w, x) in kernel.iter().zip(block) {
                acc += w * x;
            }
            z[c * c_out + o] = acc;
            yhat += layer.dense_weights[c * c_out + o] * acc;
        }
    }
    yhat
}

/// Layer output for one tree-output vector of length K*M.
pub fn agg_forward(layer: &AggLayer, tree_vec: &[f64]) -> Result<f64> {
    if tree_vec.len() != layer.n_clients * layer.trees_per_client {
        return Err(Error::shape(format!(
            "tree vector of {} for a {}x{} layer",
            tree_vec.len(),
            layer.n_clients,
            layer.trees_per_client
        )));
    }
    let mut z = vec![0.0; layer.n_clients * layer.channels];
    Ok(forward_row(layer, tree_vec, &mut z))
}

fn check_phi(layer: &AggLayer, phi: &DenseMatrix, y: &[f64]) -> Result<()> {
    if phi.n_cols() != layer.n_clients * layer.trees_per_client {
        return Err(Error::shape(format!(
            "tree-output matrix has {} columns, layer expects {}",
            phi.n_cols(),
            layer.n_clients * layer.trees_per_client
        )));
    }
    if phi.n_rows() != y.len() {
        return Err(Error::shape("tree-output rows and targets differ"));
    }
    Ok(())
}

/// Mean squared error of the layer over precomputed tree outputs.
pub fn layer_mse(layer: &AggLayer, phi: &DenseMatrix, y: &[f64]) -> Result<f64> {
    check_phi(layer, phi, y)?;
    if y.is_empty() {
        return Err(Error::shape("empty evaluation set"));
    }
    let mut z = vec![0.0; layer.n_clients * layer.channels];
    let mut sum = 0.0;
    for i in 0..phi.n_rows() {
        let d = forward_row(layer, phi.row(i), &mut z) - y[i];
        sum += d * d;
    }
    Ok(sum / y.len() as f64)
}

/// FedProx local objective: batch MSE + (mu/2) * ||w - anchor||^2.
pub fn prox_objective(
    layer: &AggLayer,
    anchor: &AggLayer,
    phi: &DenseMatrix,
    y: &[f64],
    mu: f64,
) -> Result<f64> {
    if !layer.same_shape(anchor) {
        return Err(Error::shape("layer and anchor shapes differ"));
    }
    let d = layer.l2_distance(anchor);
    Ok(layer_mse(layer, phi, y)? + 0.5 * mu * d * d)
}

/// Analytic gradient of the proximal objective over the given rows.
/// Flat layout matches AggLayer::to_flat.
fn gradient_on(
    layer: &AggLayer,
    anchor: &AggLayer,
    phi: &DenseMatrix,
    y: &[f64],
    rows: &[u32],
    mu: f64,
) -> (Vec<f64>, f64) {
    let k = layer.n_clients;
    let m = layer.trees_per_client;
    let c_out = layer.channels;
    let b = rows.len() as f64;

    let mut g_conv = vec![0.0; c_out * m];
    let mut g_conv_bias = vec![0.0; c_out];
    let mut g_dense = vec![0.0; k * c_out];
    let mut g_dense_bias = 0.0;
    let mut mse = 0.0;
    let mut z = vec![0.0; k * c_out];

    // d yhat / d conv_bias[o] = sum over blocks of dense weight (c, o).
    let mut dense_channel_sum = vec![0.0; c_out];
    for c in 0..k {
        for o in 0..c_out {
            dense_channel_sum[o] += layer.dense_weights[c * c_out + o];
        }
    }

    for &row in rows {
        let i = row as usize;
        let v = phi.row(i);
        let yhat = forward_row(layer, v, &mut z);
        let err = yhat - y[i];
        mse += err * err / b;
        let e = 2.0 * err / b;
        g_dense_bias += e;
        for (gz, zi) in g_dense.iter_mut().zip(&z) {
            *gz += e * zi;
        }
        for (gb, s) in g_conv_bias.iter_mut().zip(&dense_channel_sum) {
            *gb += e * s;
        }
        for o in 0..c_out {
            let g_kernel = &mut g_conv[o * m..(o + 1) * m];
            for c in 0..k {
                let coef = e * layer.dense_weights[c * c_out + o];
                if coef != 0.0 {
                    let block = &v[c * m..(c + 1) * m];
                    for (gk, x) in g_kernel.iter_mut().zip(block) {
                        *gk += coef * x;
                    }
                }
            }
        }
    }

    let mut grad = Vec::with_capacity(layer.n_params());
    grad.extend_from_slice(&g_conv);
    grad.extend_from_slice(&g_conv_bias);
    grad.extend_from_slice(&g_dense);
    grad.push(g_dense_bias);
    if mu != 0.0 {
        for (g, (w, w0)) in grad.iter_mut().zip(layer.to_flat().iter().zip(anchor.to_flat())) {
            *g += mu * (w - w0);
        }
    }
    (grad, mse)
}

/// Full-batch analytic gradient of the proximal objective (finite-difference
/// test hook). Flat layout matches AggLayer::to_flat.
pub fn prox_gradient(
    layer: &AggLayer,
    anchor: &AggLayer,
    phi: &DenseMatrix,
    y: &[f64],
    mu: f64,
) -> Result<Vec<f64>> {
    if !layer.same_shape(anchor) {
        return Err(Error::shape("layer and anchor shapes differ"));
    }
    check_phi(layer, phi, y)?;
    let rows: Vec<u32> = (0..phi.n_rows() as u32).collect();
    Ok(gradient_on(layer, anchor, phi, y, &rows, mu).0)
}

/// One client's precomputed tree outputs and targets for the layer stage.
#[derive(Debug, Clone)]
pub struct ClientLayerData {
    pub client_id: u32,
    pub phi_train: DenseMatrix,
    pub y_train: Vec<f64>,
    pub phi_valid: DenseMatrix,
    pub y_valid: Vec<f64>,
}

/// Train and validation losses of one client in one round (plain MSE,
/// proximal term excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub train: f64,
    pub valid: f64,
}

/// Up to e_local epochs of proximal mini-batch descent anchored at the global
/// parameters; returns the best-validation snapshot. The untouched global
/// model is the epoch-0 baseline, so a client never returns parameters worse
/// on its validation data than what it received.
pub fn local_prox_epochs(
    global: &AggLayer,
    data: &ClientLayerData,
    cfg: &FedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AggLayer, ClientLoss)> {
    check_phi(global, &data.phi_train, &data.y_train)?;
    check_phi(global, &data.phi_valid, &data.y_valid)?;
    let mut current = global.clone();
    let mut flat = current.to_flat();

    let mut best = current.clone();
    let mut best_valid = layer_mse(global, &data.phi_valid, &data.y_valid)?;
    let mut best_train = layer_mse(global, &data.phi_train, &data.y_train)?;
    let mut stale = 0u32;

    let mut order: Vec<u32> = (0..data.phi_train.n_rows() as u32).collect();
    for _epoch in 0..cfg.e_local {
        order.shuffle(rng);
        let mut epoch_mse = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.sgd.batch) {
            let (grad, mse) = gradient_on(&current, global, &data.phi_train, &data.y_train, batch, cfg.mu_prox);
            if !mse.is_finite() {
                return Err(Error::Divergence(format!(
                    "client {}: non-finite training loss (lower sgd.lr)",
                    data.client_id
                )));
            }
            for (w, g) in flat.iter_mut().zip(&grad) {
                *w -= cfg.sgd.lr * g;
            }
            current.set_flat(&flat)?;
            epoch_mse += mse;
            n_batches += 1;
        }
        let train_mse = epoch_mse / n_batches.max(1) as f64;
        let valid_mse = layer_mse(&current, &data.phi_valid, &data.y_valid)?;
        if !valid_mse.is_finite() {
            return Err(Error::Divergence(format!(
                "client {}: non-finite validation loss (lower sgd.lr)",
                data.client_id
            )));
        }
        if valid_mse < best_valid {
            best_valid = valid_mse;
            best_train = train_mse;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((
        best,
        ClientLoss {
            train: best_train,
            valid: best_valid,
        },
    ))
}

/// Parameter-wise average of updates, weighted by sample count.
pub fn fedprox_aggregate(updates: &[(AggLayer, usize)]) -> Result<AggLayer> {
    let (first, _) = updates.first().ok_or_else(|| Error::invalid("no updates to aggregate"))?;
    let total: f64 = updates.iter().map(|(_, n)| *n as f64).sum();
    if total <= 0.0 {
        return Err(Error::invalid("aggregate weights sum to zero"));
    }
    let mut acc = vec![0.0; first.n_params()];
    for (layer, n) in updates {
        if !layer.same_shape(first) {
            return Err(Error::shape("update shapes differ"));
        }
        let w = *n as f64 / total;
        for (a, v) in acc.iter_mut().zip(layer.to_flat()) {
            *a += w * v;
        }
    }
    let mut out = first.clone();
    out.set_flat(&acc)?;
    Ok(out)
}

/// Message crossing the simulated client/server wire. Payloads are the
/// serialized documents that would travel on a real network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireMessage {
    EnsembleUpload { client_id: u32, model_json: String },
    ForestBroadcast { forest_json: String },
    LayerBroadcast { round: u32, params_json: String },
    LayerUpload {
        round: u32,
        client_id: u32,
        params_json: String,
        n_samples: usize,
    },
}

/// Recorded wire traffic for the privacy-boundary assertion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub messages: Vec<WireMessage>,
}

impl Transcript {
    /// True if any payload contains the needle (sentinel scan).
    pub fn contains(&self, needle: &str) -> bool {
        self.messages.iter().any(|m| match m {
            WireMessage::EnsembleUpload { model_json, .. } => model_json.contains(needle),
            WireMessage::ForestBroadcast { forest_json } => forest_json.contains(needle),
            WireMessage::LayerBroadcast { params_json, .. } => params_json.contains(needle),
            WireMessage::LayerUpload { params_json, .. } => params_json.contains(needle),
        })
    }
}

/// Per-round record of a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub selected: Vec<u32>,
    pub client_losses: BTreeMap<u32, ClientLoss>,
    pub global_param_l2: f64,
}

/// Complete simulation output for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationRun {
    pub config: FedConfig,
    pub rounds: Vec<RoundLog>,
    pub forest: GlobalForest,
    pub layer: AggLayer,
}

impl FederationRun {
    /// JSON-lines round log, one record per round.
    pub fn round_log_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Bernoulli(p_train) selection over client ids in ascending order; the whole
/// draw repeats while empty.
fn select_clients(ids: &[u32], cfg: &FedConfig, round: u32) -> Vec<u32> {
    let mut rng = derive_rng(cfg.seed, purpose::SELECT, round as u64, 0);
    loop {
        let selected: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(cfg.p_train))
            .collect();
        if !selected.is_empty() {
            return selected;
        }
    }
}

/// Execute the full protocol for one task.
pub fn run_federation(
    clients: &[ClientTask],
    feature_names: &[String],
    tree_params: &TreeParams,
    eta: f64,
    cfg: &FedConfig,
    mut transcript: Option<&mut Transcript>,
) -> Result<FederationRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    if clients.len() as u32 != cfg.n_clients {
        return Err(Error::config(format!(
            "config declares {} clients, {} provided",
            cfg.n_clients,
            clients.len()
        )));
    }
    let params = TreeParams {
        n_trees: cfg.trees_per_client,
        ..tree_params.clone()
    };

    // Stage 1: local ensembles.
    let ensembles = local_fit_ensembles(clients, feature_names, &params, eta, cfg.patience)?;
    if let Some(t) = transcript.as_deref_mut() {
        for (c, e) in clients.iter().zip(&ensembles) {
            t.messages.push(WireMessage::EnsembleUpload {
                client_id: c.client_id,
                model_json: gbt::serialize(e)?,
            });
        }
    }

    // Stage 2: server-side aggregation, sorted by client id.
    let ids: Vec<u32> = clients.iter().map(|c| c.client_id).collect();
    let forest = aggregate_forest(&ensembles, &ids)?;
    if let Some(t) = transcript.as_deref_mut() {
        t.messages.push(WireMessage::ForestBroadcast {
            forest_json: serialize_forest(&forest)?,
        });
    }

    // Stage 3: every client precomputes tree outputs on its local data once.
    let layer_data: BTreeMap<u32, ClientLayerData> = clients
        .par_iter()
        .map(|c| {
            Ok((
                c.client_id,
                ClientLayerData {
                    client_id: c.client_id,
                    phi_train: forest_outputs(&forest, &c.x_train)?,
                    y_train: c.y_train.clone(),
                    phi_valid: forest_outputs(&forest, &c.x_valid)?,
                    y_valid: c.y_valid.clone(),
                },
            ))
        })
        .collect::<Result<_>>()?;

    // Stage 4: federated rounds over the aggregation layer.
    let mut global = init_agg_layer(&forest, eta, cfg.channels);
    if cfg.init == InitScheme::RandomParticipant {
        let mut rng = derive_rng(cfg.seed, purpose::INIT, 0, 0);
        let pick = forest.client_order[rng.gen_range(0..forest.n_clients())];
        let mut local_rng = derive_rng(cfg.seed, purpose::LOCAL, 0, pick as u64);
        global = local_prox_epochs(&global, &layer_data[&pick], cfg, &mut local_rng)?.0;
    }

    let sorted_ids = forest.client_order.clone();
    let mut rounds = Vec::with_capacity(cfg.e_global as usize);
    for round in 1..=cfg.e_global {
        let selected = select_clients(&sorted_ids, cfg, round);
        if let Some(t) = transcript.as_deref_mut() {
            t.messages.push(WireMessage::LayerBroadcast {
                round,
                params_json: serialize_layer(&global)?,
            });
        }
        let results: Vec<(AggLayer, ClientLoss, usize)> = selected
            .par_iter()
            .map(|&cid| {
                let mut rng = derive_rng(cfg.seed, purpose::LOCAL, round as u64, cid as u64);
                let data = &layer_data[&cid];
                let (layer, loss) = local_prox_epochs(&global, data, cfg, &mut rng)?;
                Ok((layer, loss, data.y_train.len()))
            })
            .collect::<Result<_>>()?;
        if let Some(t) = transcript.as_deref_mut() {
            for (cid, (layer, _, n)) in selected.iter().zip(&results) {
                t.messages.push(WireMessage::LayerUpload {
                    round,
                    client_id: *cid,
                    params_json: serialize_layer(layer)?,
                    n_samples: *n,
                });
            }
        }
        // Selection order is ascending client id, as the aggregation requires.
        let updates: Vec<(AggLayer, usize)> =
            results.iter().map(|(l, _, n)| (l.clone(), *n)).collect();
        global = fedprox_aggregate(&updates)?;
        rounds.push(RoundLog {
            round,
            selected: selected.clone(),
            client_losses: selected
                .iter()
                .zip(&results)
                .map(|(&cid, (_, loss, _))| (cid, *loss))
                .collect(),
            global_param_l2: global.l2_norm(),
        });
    }

    Ok(FederationRun {
        config: cfg.clone(),
        rounds,
        forest,
        layer: global,
    })
}

/// Global-model inference: layer output over forest tree outputs, clamped at 0.
pub fn predict_global(forest: &GlobalForest, layer: &AggLayer, x: &DenseMatrix) -> Result<Vec<f64>> {
    if layer.n_clients != forest.n_clients() || layer.trees_per_client != forest.trees_per_client {
        return Err(Error::shape("layer does not match forest geometry"));
    }
    let phi = forest_outputs(forest, x)?;
    let mut z = vec![0.0; layer.n_clients * layer.channels];
    Ok((0..phi.n_rows())
        .map(|i| forward_row(layer, phi.row(i), &mut z).max(0.0))
        .collect())
}

/// Serialized forest document, schema-versioned.
pub fn serialize_forest(f: &GlobalForest) -> Result<String> {
    Ok(serde_json::to_string(f)?)
}

pub fn deserialize_forest(doc: &str) -> Result<GlobalForest> {
    let f: GlobalForest = serde_json::from_str(doc)?;
    if f.version != FOREST_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "forest schema version {} unsupported (expected {FOREST_SCHEMA_VERSION})",
            f.version
        )));
    }
    Ok(f)
}

/// Serialized layer document, schema-versioned.
pub fn serialize_layer(l: &AggLayer) -> Result<String> {
    if !l.is_finite() {
        return Err(Error::NonFinite("layer parameters".into()));
    }
    Ok(serde_json::to_string(l)?)
}

pub fn deserialize_layer(doc: &str) -> Result<AggLayer> {
    let l: AggLayer = serde_json::from_str(doc)?;
    if l.version != LAYER_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "layer schema version {} unsupported (expected {LAYER_SCHEMA_VERSION})",
            l.version
        )));
    }
    if !l.is_finite() {
        return Err(Error::NonFinite("layer parameters".into()));
    }
    if l.conv_weights.len() != l.channels * l.trees_per_client
        || l.conv_bias.len() != l.channels
        || l.dense_weights.len() != l.n_clients * l.channels
    {
        return Err(Error::shape("layer parameter vectors disagree with shape"));
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_clients(seed: u64, k: u32, rows: usize, cols: usize) -> (Vec<ClientTask>, Vec<String>) {
        let mut rng = derive_rng(seed, 99, 0, 0);
        let names: Vec<String> = (0..cols).map(|i| format!("f{i}")).collect();
        let clients = (0..k)
            .map(|client_id| {
                let mk = |rng: &mut ChaCha8Rng, n: usize| {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|_| (0..cols).map(|_| rng.gen_range(0..12) as f64).collect())
                        .collect();
                    let x = DenseMatrix::from_rows(&rows).unwrap();
                    let y: Vec<f64> = rows
                        .iter()
                        .map(|r| r[0] + 0.5 * r[cols - 1] + rng.gen_range(0..3) as f64)
                        .collect();
                    (x, y)
                };
                let (x_train, y_train) = mk(&mut rng, rows);
                let (x_valid, y_valid) = mk(&mut rng, rows / 2);
                ClientTask {
                    client_id,
                    x_train,
                    y_train,
                    x_valid,
                    y_valid,
                }
            })
            .collect();
        (clients, names)
    }

    fn small_params(m: usize) -> TreeParams {
        TreeParams {
            max_depth: 2,
            n_trees: m,
            ..TreeParams::default()
        }
    }

    #[test]
    fn padding_preserves_predictions_and_geometry() {
        let (clients, names) = random_clients(1, 3, 40, 3);
        let m = 25;
        let ensembles = local_fit_ensembles(&clients, &names, &small_params(m), 0.3, 3).unwrap();
        for (e, c) in ensembles.iter().zip(&clients) {
            assert_eq!(e.trees.len(), m);
            // Zero-leaf padding adds nothing to predictions.
            let preds = gbt::predict(e, &c.x_valid).unwrap();
            let mut unpadded = e.clone();
            while unpadded
                .trees
                .last()
                .is_some_and(|t| *t == Node::zero_leaf())
            {
                unpadded.trees.pop();
            }
            assert_eq!(preds, gbt::predict(&unpadded, &c.x_valid).unwrap());
        }
    }

    #[test]
    fn empty_client_is_named_in_error() {
        let (mut clients, names) = random_clients(2, 2, 30, 2);
        clients[1].x_train = DenseMatrix::with_cols(2);
        clients[1].y_train.clear();
        let err = local_fit_ensembles(&clients, &names, &small_params(5), 0.3, 3).unwrap_err();
        assert!(err.to_string().contains("client 1"));
    }

    #[test]
    fn forest_aggregation_sorts_and_validates() {
        let (clients, names) = random_clients(3, 3, 40, 3);
        let m = 10;
        let ensembles = local_fit_ensembles(&clients, &names, &small_params(m), 0.3, 3).unwrap();
        let ids = [2u32, 0, 1];
        // Hand the ensembles over in scrambled id order.
        let scrambled: Vec<Ensemble> =
            vec![ensembles[2].clone(), ensembles[0].clone(), ensembles[1].clone()];
        let f1 = aggregate_forest(&scrambled, &ids).unwrap();
        let f2 = aggregate_forest(&ensembles, &[0, 1, 2]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.client_order, vec![0, 1, 2]);
        assert_eq!(f1.trees.len(), 3 * m);

        let single = aggregate_forest(&ensembles[..1], &[7]).unwrap();
        assert_eq!(single.trees, ensembles[0].trees);

        let mut bad = ensembles.clone();
        bad[1].feature_names[0] = "other".into();
        assert!(aggregate_forest(&bad, &[0, 1, 2]).is_err());
        assert!(aggregate_forest(&ensembles, &[0, 0, 1]).is_err());
    }

    #[test]
    fn forest_outputs_concatenate_client_tree_outputs() {
        let (clients, names) = random_clients(4, 2, 36, 3);
        let m = 8;
        let ensembles = local_fit_ensembles(&clients, &names, &small_params(m), 0.3, 3).unwrap();
        let forest = aggregate_forest(&ensembles, &[0, 1]).unwrap();
        let x = &clients[0].x_valid;
        let phi = forest_outputs(&forest, x).unwrap();
        assert_eq!(phi.n_cols(), 2 * m);
        let t0 = gbt::tree_outputs(&ensembles[0], x).unwrap();
        let t1 = gbt::tree_outputs(&ensembles[1], x).unwrap();
        for i in 0..x.n_rows() {
            for j in 0..m {
                assert_eq!(phi.get(i, j), t0.get(i, j));
                assert_eq!(phi.get(i, m + j), t1.get(i, j));
            }
        }
    }

    #[test]
    fn warm_start_reproduces_mean_of_client_predictions() {
        for k in [1usize, 3] {
            let (clients, names) = random_clients(5 + k as u64, k as u32, 40, 3);
            let m = 9;
            let eta = 0.3;
            let ensembles = local_fit_ensembles(&clients, &names, &small_params(m), eta, 3).unwrap();
            let ids: Vec<u32> = (0..k as u32).collect();
            let forest = aggregate_forest(&ensembles, &ids).unwrap();
            for channels in [1usize, 4] {
                let layer = init_agg_layer(&forest, eta, channels);
                assert_eq!(
                    layer.n_params(),
                    channels * m + channels + k * channels + 1
                );
                let x = &clients[0].x_valid;
                let phi = forest_outputs(&forest, x).unwrap();
                let locals: Vec<Vec<f64>> = ensembles
                    .iter()
                    .map(|e| gbt::predict(e, x).unwrap())
                    .collect();
                for i in 0..x.n_rows() {
                    let mean: f64 =
                        locals.iter().map(|p| p[i]).sum::<f64>() / k as f64;
                    let out = agg_forward(&layer, phi.row(i)).unwrap();
                    assert!((out - mean).abs() < 1e-9, "k={k} c={channels}: {out} vs {mean}");
                }
            }
        }
    }

    #[test]
    fn agg_forward_basics() {
        let layer = AggLayer {
            version: LAYER_SCHEMA_VERSION,
            n_clients: 2,
            trees_per_client: 3,
            channels: 2,
            conv_weights: vec![0.5; 6],
            conv_bias: vec![0.0, 0.0],
            dense_weights: vec![0.25; 4],
            dense_bias: 1.5,
        };
        assert_eq!(agg_forward(&layer, &[0.0; 6]).unwrap(), 1.5);
        assert!(agg_forward(&layer, &[0.0; 5]).is_err());
        // Linear in the input once the output bias is removed.
        let v = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let base = agg_forward(&layer, &v).unwrap() - layer.dense_bias;
        let scaled: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let out = agg_forward(&layer, &scaled).unwrap() - layer.dense_bias;
        assert!((out - 3.0 * base).abs() < 1e-12);
    }

    fn tiny_layer(vals: f64) -> AggLayer {
        AggLayer {
            version: LAYER_SCHEMA_VERSION,
            n_clients: 1,
            trees_per_client: 1,
            channels: 1,
            conv_weights: vec![vals],
            conv_bias: vec![vals],
            dense_weights: vec![vals],
            dense_bias: vals,
        }
    }

    #[test]
    fn aggregation_is_a_weighted_mean() {
        let a = tiny_layer(0.0);
        let b = tiny_layer(4.0);
        let avg = fedprox_aggregate(&[(a.clone(), 1), (b, 3)]).unwrap();
        assert_eq!(avg.to_flat(), vec![3.0; 4]);
        let solo = fedprox_aggregate(&[(a.clone(), 5)]).unwrap();
        assert_eq!(solo, a);
        let twin = fedprox_aggregate(&[(a.clone(), 2), (a.clone(), 2)]).unwrap();
        assert_eq!(twin, a);
        assert!(fedprox_aggregate(&[]).is_err());
    }

    fn layer_fixture(seed: u64) -> (AggLayer, DenseMatrix, Vec<f64>, DenseMatrix, Vec<f64>) {
        let mut rng = derive_rng(seed, 98, 0, 0);
        let (k, m, c) = (2usize, 4usize, 2usize);
        let mut layer = AggLayer {
            version: LAYER_SCHEMA_VERSION,
            n_clients: k,
            trees_per_client: m,
            channels: c,
            conv_weights: vec![0.0; c * m],
            conv_bias: vec![0.0; c],
            dense_weights: vec![0.0; k * c],
            dense_bias: 0.0,
        };
        let flat: Vec<f64> = (0..layer.n_params())
            .map(|_| rng.gen_range(-100..100) as f64 / 100.0)
            .collect();
        layer.set_flat(&flat).unwrap();
        let mk = |rng: &mut ChaCha8Rng, n: usize| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k * m).map(|_| rng.gen_range(-10..10) as f64 / 5.0).collect())
                .collect();
            let x = DenseMatrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / 4.0).collect();
            (x, y)
        };
        let (phi, y) = mk(&mut rng, 40);
        let (phiv, yv) = mk(&mut rng, 20);
        (layer, phi, y, phiv, yv)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (layer, phi, y, _, _) = layer_fixture(11);
        let anchor = tiny_anchor(&layer);
        let mu = 0.125;
        let grad = prox_gradient(&layer, &anchor, &phi, &y, mu).unwrap();
        let eps = 1e-6;
        let base_flat = layer.to_flat();
        for p in 0..layer.n_params() {
            let mut plus = layer.clone();
            let mut minus = layer.clone();
            let mut f = base_flat.clone();
            f[p] += eps;
            plus.set_flat(&f).unwrap();
            f[p] -= 2.0 * eps;
            minus.set_flat(&f).unwrap();
            let num = (prox_objective(&plus, &anchor, &phi, &y, mu).unwrap()
                - prox_objective(&minus, &anchor, &phi, &y, mu).unwrap())
                / (2.0 * eps);
            let denom = num.abs().max(grad[p].abs()).max(1e-8);
            assert!(
                ((num - grad[p]) / denom).abs() < 1e-5,
                "param {p}: numeric {num} vs analytic {}",
                grad[p]
            );
        }
    }

    fn tiny_anchor(layer: &AggLayer) -> AggLayer {
        let mut anchor = layer.clone();
        let flat: Vec<f64> = layer.to_flat().iter().map(|v| v * 0.9 + 0.01).collect();
        anchor.set_flat(&flat).unwrap();
        anchor
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (layer, phi, y, phiv, yv) = layer_fixture(12);
        let data = ClientLayerData {
            client_id: 0,
            phi_train: phi,
            y_train: y,
            phi_valid: phiv,
            y_valid: yv,
        };
        let cfg = FedConfig {
            e_local: 0,
            ..FedConfig::default()
        };
        let mut rng = derive_rng(1, purpose::LOCAL, 1, 0);
        let (out, _) = local_prox_epochs(&layer, &data, &cfg, &mut rng).unwrap();
        assert_eq!(out, layer);
    }

    #[test]
    fn larger_mu_pulls_parameters_toward_the_anchor() {
        let (layer, phi, y, phiv, yv) = layer_fixture(13);
        let data = ClientLayerData {
            client_id: 0,
            phi_train: phi,
            y_train: y,
            phi_valid: phiv,
            y_valid: yv,
        };
        let mut cfg = FedConfig {
            e_local: 20,
            patience: 20,
            n_clients: 1,
            // Stable for every mu tried: lr * mu stays well below 2.
            sgd: SgdConfig { lr: 0.002, batch: 8 },
            ..FedConfig::default()
        };
        let mut dists = Vec::new();
        for mu in [0.0, 1.0, 10.0, 100.0] {
            cfg.mu_prox = mu;
            let mut rng = derive_rng(2, purpose::LOCAL, 1, 0);
            let (out, _) = local_prox_epochs(&layer, &data, &cfg, &mut rng).unwrap();
            dists.push(out.l2_distance(&layer));
        }
        assert!(dists[0] > 1e-6, "free run must actually move: {dists:?}");
        for pair in dists.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{dists:?}");
        }
        assert!(dists[3] < 0.2 * dists[0], "{dists:?}");
    }

    fn fed_cfg(k: u32, seed: u64) -> FedConfig {
        FedConfig {
            n_clients: k,
            e_local: 2,
            e_global: 3,
            trees_per_client: 6,
            channels: 2,
            sgd: SgdConfig { lr: 0.003, batch: 16 },
            seed,
            ..FedConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let (clients, names) = random_clients(20, 3, 48, 3);
        let cfg = fed_cfg(3, 77);
        let params = small_params(6);
        let mut t1 = Transcript::default();
        let mut t2 = Transcript::default();
        let r1 = run_federation(&clients, &names, &params, 0.3, &cfg, Some(&mut t1)).unwrap();
        let r2 = run_federation(&clients, &names, &params, 0.3, &cfg, Some(&mut t2)).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        assert_eq!(t1, t2);
        assert_eq!(r1.rounds.len(), cfg.e_global as usize);
        assert!(r1.rounds.iter().all(|r| !r.selected.is_empty()));

        let other = FedConfig { seed: 78, ..cfg };
        let r3 = run_federation(&clients, &names, &params, 0.3, &other, None).unwrap();
        assert_ne!(
            serde_json::to_string(&r1.layer).unwrap(),
            serde_json::to_string(&r3.layer).unwrap()
        );
    }

    #[test]
    fn degenerate_protocol_reduces_to_local_descent() {
        let (clients, names) = random_clients(21, 1, 40, 3);
        let mut cfg = fed_cfg(1, 5);
        cfg.p_train = 1.0;
        cfg.mu_prox = 0.0;
        let params = small_params(6);
        let run = run_federation(&clients, &names, &params, 0.3, &cfg, None).unwrap();
        for r in &run.rounds {
            assert_eq!(r.selected, vec![0]);
        }

        // Replay the same chain through the public stage functions.
        let ensembles = local_fit_ensembles(&clients, &names, &TreeParams { n_trees: cfg.trees_per_client, ..params.clone() }, 0.3, cfg.patience).unwrap();
        let forest = aggregate_forest(&ensembles, &[0]).unwrap();
        let data = ClientLayerData {
            client_id: 0,
            phi_train: forest_outputs(&forest, &clients[0].x_train).unwrap(),
            y_train: clients[0].y_train.clone(),
            phi_valid: forest_outputs(&forest, &clients[0].x_valid).unwrap(),
            y_valid: clients[0].y_valid.clone(),
        };
        let mut layer = init_agg_layer(&forest, 0.3, cfg.channels);
        for round in 1..=cfg.e_global {
            let mut rng = derive_rng(cfg.seed, purpose::LOCAL, round as u64, 0);
            layer = local_prox_epochs(&layer, &data, &cfg, &mut rng).unwrap().0;
        }
        assert_eq!(layer, run.layer);
    }

    #[test]
    fn zero_rounds_returns_the_warm_start() {
        let (clients, names) = random_clients(22, 2, 40, 3);
        let mut cfg = fed_cfg(2, 9);
        cfg.e_global = 0;
        let params = small_params(6);
        let run = run_federation(&clients, &names, &params, 0.3, &cfg, None).unwrap();
        assert!(run.rounds.is_empty());
        assert_eq!(run.layer, init_agg_layer(&run.forest, 0.3, cfg.channels));
    }

    #[test]
    fn prediction_is_clamped_at_zero() {
        let (clients, names) = random_clients(23, 2, 40, 3);
        let cfg = fed_cfg(2, 10);
        let params = small_params(6);
        let mut run = run_federation(&clients, &names, &params, 0.3, &cfg, None).unwrap();
        run.layer.dense_bias = -1e6;
        let preds = predict_global(&run.forest, &run.layer, &clients[0].x_valid).unwrap();
        assert!(preds.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn layer_documents_round_trip() {
        let (layer, ..) = layer_fixture(31);
        let doc = serialize_layer(&layer).unwrap();
        assert_eq!(deserialize_layer(&doc).unwrap(), layer);
        let wrong = doc.replacen("\"version\":1", "\"version\":3", 1);
        assert!(deserialize_layer(&wrong).is_err());

        let (clients, names) = random_clients(32, 2, 36, 3);
        let ensembles = local_fit_ensembles(&clients, &names, &small_params(4), 0.3, 3).unwrap();
        let forest = aggregate_forest(&ensembles, &[0, 1]).unwrap();
        let fdoc = serialize_forest(&forest).unwrap();
        assert_eq!(deserialize_forest(&fdoc).unwrap(), forest);
    }

    #[test]
    fn selection_redraws_until_nonempty() {
        let cfg = FedConfig {
            n_clients: 2,
            p_train: 0.02,
            ..FedConfig::default()
        };
        for round in 1..=20 {
            let s = select_clients(&[0, 1], &cfg, round);
            assert!(!s.is_empty());
            assert_eq!(s, select_clients(&[0, 1], &cfg, round));
        }
    }
}
