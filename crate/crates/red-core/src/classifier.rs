//! Feed-forward MLP base classifier and the shared training engine that
//! also backs the two regression baselines.
//!
//! Training is full-batch and seeded, so a `(data, config)` pair always
//! produces the same parameters. The classifier head is softmax +
//! cross-entropy; the regressor head is a single linear output + squared
//! error.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::RedError;
use crate::Result;

/// Adam epsilon; the update denominator is `sqrt(v_hat) + EPSILON`.
/// Recorded in serialized model files.
pub const ADAM_EPSILON: f64 = 1e-8;
/// RMSprop squared-gradient decay.
pub const RMSPROP_DECAY: f64 = 0.9;
/// RMSprop epsilon.
pub const RMSPROP_EPSILON: f64 = 1e-8;

/// Gradient update rule for the shared engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

/// Classifier training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            max_epochs: 1000,
            patience: 10,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(RedError::Config("hidden layer sizes must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(RedError::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 {
            return Err(RedError::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Raw network parameters: `weights[l]` is (fan_in x fan_out), applied as
/// `z = a * W + b`. Serializes as explicit layer shapes with row-major
/// parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "NetRecord", into = "NetRecord")]
struct Net {
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    fan_in: usize,
    fan_out: usize,
    weights_row_major: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetRecord {
    layers: Vec<LayerRecord>,
}

impl From<Net> for NetRecord {
    fn from(net: Net) -> Self {
        let layers = net
            .weights
            .iter()
            .zip(net.biases.iter())
            .map(|(w, b)| LayerRecord {
                fan_in: w.nrows(),
                fan_out: w.ncols(),
                weights_row_major: w.transpose().as_slice().to_vec(),
                bias: b.as_slice().to_vec(),
            })
            .collect();
        NetRecord { layers }
    }
}

impl TryFrom<NetRecord> for Net {
    type Error = String;

    fn try_from(record: NetRecord) -> std::result::Result<Self, String> {
        let mut weights = Vec::with_capacity(record.layers.len());
        let mut biases = Vec::with_capacity(record.layers.len());
        for (idx, layer) in record.layers.into_iter().enumerate() {
            if layer.weights_row_major.len() != layer.fan_in * layer.fan_out {
                return Err(format!(
                    "layer {idx}: {} weights for shape {}x{}",
                    layer.weights_row_major.len(),
                    layer.fan_in,
                    layer.fan_out
                ));
            }
            if layer.bias.len() != layer.fan_out {
                return Err(format!("layer {idx}: bias length mismatch"));
            }
            weights.push(DMatrix::from_row_slice(
                layer.fan_in,
                layer.fan_out,
                &layer.weights_row_major,
            ));
            biases.push(DVector::from_vec(layer.bias));
        }
        Ok(Net { weights, biases })
    }
}

impl Net {
    /// Scaled uniform fan-in init, biases zero.
    fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut mat = DMatrix::zeros(fan_in, fan_out);
            for i in 0..fan_in {
                for j in 0..fan_out {
                    mat[(i, j)] = rng.gen_range(-bound..bound);
                }
            }
            weights.push(mat);
            biases.push(DVector::zeros(fan_out));
        }
        Self { weights, biases }
    }

    /// Forward pass keeping pre-activations for backprop.
    /// Returns (hidden activations including input, final linear output).
    fn forward(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let mut activations = vec![x.clone()];
        let last = self.weights.len() - 1;
        for l in 0..last {
            let mut z = &activations[l] * &self.weights[l];
            add_bias(&mut z, &self.biases[l]);
            z.apply(|v| *v = v.max(0.0)); // relu
            activations.push(z);
        }
        let mut out = &activations[last] * &self.weights[last];
        add_bias(&mut out, &self.biases[last]);
        (activations, out)
    }

    /// Backprop from the gradient at the final linear output.
    fn backward(
        &self,
        activations: &[DMatrix<f64>],
        mut d_out: DMatrix<f64>,
    ) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let layers = self.weights.len();
        let mut d_weights = vec![DMatrix::zeros(0, 0); layers];
        let mut d_biases = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            d_weights[l] = activations[l].transpose() * &d_out;
            d_biases[l] = column_sums(&d_out);
            if l > 0 {
                let mut d_act = d_out * self.weights[l].transpose();
                // relu mask: activations[l] stores the post-relu values
                for (dv, av) in d_act.iter_mut().zip(activations[l].iter()) {
                    if *av <= 0.0 {
                        *dv = 0.0;
                    }
                }
                d_out = d_act;
            }
        }
        (d_weights, d_biases)
    }
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            z[(i, j)] += b[j];
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for i in 0..out.nrows() {
        let row_max = out.row(i).max();
        let mut sum = 0.0;
        for j in 0..out.ncols() {
            let e = (out[(i, j)] - row_max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..out.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// Lowest-index argmax, the tie rule used throughout.
pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Softmax outputs of a classifier over a block of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierOutput {
    /// N x K, rows on the probability simplex.
    pub softmax: DMatrix<f64>,
    /// N x K pre-softmax values, when available. Fabricated adversarial
    /// outputs and probability-only files carry none.
    pub logits: Option<DMatrix<f64>>,
    /// Per-row argmax of `softmax` (lowest index wins ties).
    pub predicted: Vec<usize>,
    /// Per-row maximum class probability.
    pub max_prob: Vec<f64>,
}

impl ClassifierOutput {
    /// Validates rows against the simplex and recomputes `predicted` and
    /// `max_prob`. Row sums further than 1e-6 from 1 (or negative entries)
    /// are rejected; smaller drift is renormalized.
    pub fn from_softmax(softmax: DMatrix<f64>, logits: Option<DMatrix<f64>>) -> Result<Self> {
        let mut softmax = softmax;
        if let Some(l) = &logits {
            if l.shape() != softmax.shape() {
                return Err(RedError::Dimension(format!(
                    "logits {:?} vs softmax {:?}",
                    l.shape(),
                    softmax.shape()
                )));
            }
        }
        for i in 0..softmax.nrows() {
            let mut sum = 0.0;
            for j in 0..softmax.ncols() {
                let p = softmax[(i, j)];
                if !(0.0..=1.0 + 1e-6).contains(&p) {
                    return Err(RedError::Data(format!(
                        "row {i}: probability {p} outside [0, 1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(RedError::Data(format!(
                    "row {i}: probabilities sum to {sum}, off the simplex"
                )));
            }
            if sum != 1.0 {
                for j in 0..softmax.ncols() {
                    softmax[(i, j)] /= sum;
                }
            }
        }
        let predicted: Vec<usize> = (0..softmax.nrows())
            .map(|i| {
                let row: Vec<f64> = softmax.row(i).iter().copied().collect();
                argmax_row(&row)
            })
            .collect();
        let max_prob: Vec<f64> = predicted
            .iter()
            .enumerate()
            .map(|(i, &p)| softmax[(i, p)])
            .collect();
        Ok(Self {
            softmax,
            logits,
            predicted,
            max_prob,
        })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    /// Row subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let k = self.softmax.ncols();
        let softmax = DMatrix::from_fn(indices.len(), k, |i, j| self.softmax[(indices[i], j)]);
        let logits = self
            .logits
            .as_ref()
            .map(|l| DMatrix::from_fn(indices.len(), k, |i, j| l[(indices[i], j)]));
        Self {
            softmax,
            logits,
            predicted: indices.iter().map(|&i| self.predicted[i]).collect(),
            max_prob: indices.iter().map(|&i| self.max_prob[i]).collect(),
        }
    }
}

/// A trained MLP classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    net: Net,
    pub input_dim: usize,
    pub output_dim: usize,
    pub config: MlpConfig,
    pub adam_epsilon: f64,
    /// Validation cross-entropy at the returned (best) epoch.
    pub best_val_loss: f64,
    /// Epoch index (1-based) the returned parameters come from.
    pub best_epoch: usize,
}

impl MlpModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }

    /// Stable content hash of the serialized model, used to pin detector
    /// models to the classifier they were fitted against.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("model serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }
}

fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(labels.len(), k);
    for (i, &lab) in labels.iter().enumerate() {
        m[(i, lab)] = 1.0;
    }
    m
}

fn cross_entropy(softmax: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &lab) in labels.iter().enumerate() {
        loss -= softmax[(i, lab)].max(1e-300).ln();
    }
    loss / n
}

/// Internal optimizer state, one slot per parameter tensor.
struct OptState {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    step: usize,
}

impl OptState {
    fn new(net: &Net) -> Self {
        Self {
            m_w: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            v_w: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            m_b: net.biases.iter().map(|b| DVector::zeros(b.nrows())).collect(),
            v_b: net.biases.iter().map(|b| DVector::zeros(b.nrows())).collect(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        net: &mut Net,
        d_w: &[DMatrix<f64>],
        d_b: &[DVector<f64>],
        kind: OptimizerKind,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        for l in 0..net.weights.len() {
            match kind {
                OptimizerKind::Adam => {
                    adam_step(
                        net.weights[l].as_mut_slice(),
                        d_w[l].as_slice(),
                        self.m_w[l].as_mut_slice(),
                        self.v_w[l].as_mut_slice(),
                        t,
                        lr,
                        beta1,
                        beta2,
                    );
                    adam_step(
                        net.biases[l].as_mut_slice(),
                        d_b[l].as_slice(),
                        self.m_b[l].as_mut_slice(),
                        self.v_b[l].as_mut_slice(),
                        t,
                        lr,
                        beta1,
                        beta2,
                    );
                }
                OptimizerKind::RmsProp => {
                    rmsprop_step(
                        net.weights[l].as_mut_slice(),
                        d_w[l].as_slice(),
                        self.v_w[l].as_mut_slice(),
                        lr,
                    );
                    rmsprop_step(
                        net.biases[l].as_mut_slice(),
                        d_b[l].as_slice(),
                        self.v_b[l].as_mut_slice(),
                        lr,
                    );
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
) {
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
}

fn rmsprop_step(params: &mut [f64], grads: &[f64], cache: &mut [f64], lr: f64) {
    for i in 0..params.len() {
        cache[i] = RMSPROP_DECAY * cache[i] + (1.0 - RMSPROP_DECAY) * grads[i] * grads[i];
        params[i] -= lr * grads[i] / (cache[i].sqrt() + RMSPROP_EPSILON);
    }
}

/// Trains the classifier with Adam on mean cross-entropy, returning the
/// parameter snapshot from the best-validation-loss epoch. Early stopping
/// triggers after `patience` epochs without improvement.
pub fn train_mlp(
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &MlpConfig,
) -> Result<MlpModel> {
    cfg.validate()?;
    if train.m() != val.m() {
        return Err(RedError::Dimension(format!(
            "train has {} features, val has {}",
            train.m(),
            val.m()
        )));
    }
    let k = train.num_classes.max(val.num_classes);
    let mut dims = vec![train.m()];
    dims.extend_from_slice(&cfg.hidden_sizes);
    dims.push(k);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Net::init(&dims, &mut rng);
    let mut opt = OptState::new(&net);
    let targets = one_hot(&train.labels, k);
    let n = train.n() as f64;

    let mut best: Option<(Net, f64, usize)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let (acts, logits) = net.forward(&train.features);
        let probs = softmax_rows(&logits);
        let train_loss = cross_entropy(&probs, &train.labels);
        if !train_loss.is_finite() {
            return Err(RedError::Numerical(format!(
                "non-finite training loss at epoch {epoch}"
            )));
        }
        let d_out = (&probs - &targets) / n;
        let (d_w, d_b) = net.backward(&acts, d_out);
        opt.update(
            &mut net,
            &d_w,
            &d_b,
            OptimizerKind::Adam,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
        );

        let (_, val_logits) = net.forward(&val.features);
        let val_probs = softmax_rows(&val_logits);
        let val_loss = cross_entropy(&val_probs, &val.labels);
        if !val_loss.is_finite() {
            return Err(RedError::Numerical(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if improved {
            best = Some((net.clone(), val_loss, epoch));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    let (net, best_val_loss, best_epoch) = best.expect("at least one epoch ran");
    Ok(MlpModel {
        net,
        input_dim: train.m(),
        output_dim: k,
        config: cfg.clone(),
        adam_epsilon: ADAM_EPSILON,
        best_val_loss,
        best_epoch,
    })
}

/// Runs the classifier on a block of rows.
pub fn predict(model: &MlpModel, x: &DMatrix<f64>) -> Result<ClassifierOutput> {
    if x.ncols() != model.input_dim {
        return Err(RedError::Dimension(format!(
            "model expects {} features, got {}",
            model.input_dim,
            x.ncols()
        )));
    }
    let (_, logits) = model.net.forward(x);
    let softmax = softmax_rows(&logits);
    ClassifierOutput::from_softmax(softmax, Some(logits))
}

/// Reads classifier outputs from CSV: columns `p0..p{K-1}`, optional
/// `l0..l{K-1}`, anything else ignored. Predicted labels and max
/// probabilities are recomputed from the probabilities.
pub fn load_outputs(path: &Path, k: usize) -> Result<ClassifierOutput> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let p_cols: Vec<usize> = (0..k)
        .map(|j| {
            headers
                .iter()
                .position(|h| h == format!("p{j}"))
                .ok_or_else(|| RedError::Data(format!("missing probability column p{j}")))
        })
        .collect::<Result<_>>()?;
    let l_cols: Option<Vec<usize>> = (0..k)
        .map(|j| headers.iter().position(|h| h == format!("l{j}")))
        .collect();

    let mut probs: Vec<f64> = Vec::new();
    let mut logits: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        for (j, &idx) in p_cols.iter().enumerate() {
            let cell = record.get(idx).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| RedError::Parse {
                row: row_no,
                column: format!("p{j}"),
                message: format!("'{cell}' is not numeric"),
            })?;
            probs.push(v);
        }
        if let Some(cols) = &l_cols {
            for (j, &idx) in cols.iter().enumerate() {
                let cell = record.get(idx).unwrap_or("");
                let v: f64 = cell.trim().parse().map_err(|_| RedError::Parse {
                    row: row_no,
                    column: format!("l{j}"),
                    message: format!("'{cell}' is not numeric"),
                })?;
                logits.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(RedError::Data("empty outputs file".into()));
    }
    let softmax = DMatrix::from_row_slice(n, k, &probs);
    let logits = if l_cols.is_some() {
        Some(DMatrix::from_row_slice(n, k, &logits))
    } else {
        None
    };
    ClassifierOutput::from_softmax(softmax, logits)
}

/// Writes outputs as CSV with columns `p0..p{K-1}[, l0..l{K-1}], pred`.
pub fn save_outputs(path: &Path, outputs: &ClassifierOutput) -> Result<()> {
    let k = outputs.softmax.ncols();
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..k).map(|j| format!("p{j}")).collect();
    if outputs.logits.is_some() {
        header.extend((0..k).map(|j| format!("l{j}")));
    }
    header.push("pred".into());
    writer.write_record(&header)?;
    for i in 0..outputs.len() {
        let mut rec: Vec<String> = (0..k).map(|j| outputs.softmax[(i, j)].to_string()).collect();
        if let Some(l) = &outputs.logits {
            rec.extend((0..k).map(|j| l[(i, j)].to_string()));
        }
        rec.push(outputs.predicted[i].to_string());
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Regressor configuration for the shared engine (single linear output,
/// squared-error loss).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub hidden_sizes: Vec<usize>,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            max_epochs: 1000,
            patience: 10,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::RmsProp,
            seed: 0,
        }
    }
}

/// A trained scalar regressor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpRegressor {
    net: Net,
    pub input_dim: usize,
    pub best_val_loss: f64,
    /// Mean squared error on the training set after each epoch, for
    /// convergence checks.
    pub train_loss_trace: Vec<f64>,
}

impl MlpRegressor {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.input_dim {
            return Err(RedError::Dimension(format!(
                "regressor expects {} features, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let (_, out) = self.net.forward(x);
        Ok(out.column(0).into_owned())
    }
}

/// Trains a scalar MLP regressor with the same early-stopping protocol as
/// the classifier.
pub fn train_regressor(
    train_x: &DMatrix<f64>,
    train_y: &DVector<f64>,
    val_x: &DMatrix<f64>,
    val_y: &DVector<f64>,
    cfg: &RegressorConfig,
) -> Result<MlpRegressor> {
    if train_x.nrows() != train_y.nrows() || val_x.nrows() != val_y.nrows() {
        return Err(RedError::Dimension("targets do not match rows".into()));
    }
    if train_x.ncols() != val_x.ncols() {
        return Err(RedError::Dimension("train/val feature width differs".into()));
    }
    let mut dims = vec![train_x.ncols()];
    dims.extend_from_slice(&cfg.hidden_sizes);
    dims.push(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Net::init(&dims, &mut rng);
    let mut opt = OptState::new(&net);
    let n = train_x.nrows() as f64;

    let mut best: Option<(Net, f64)> = None;
    let mut since_best = 0usize;
    let mut trace = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let (acts, out) = net.forward(train_x);
        let resid = out.column(0) - train_y;
        let train_loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
        if !train_loss.is_finite() {
            return Err(RedError::Numerical(format!(
                "non-finite training loss at epoch {epoch}"
            )));
        }
        trace.push(train_loss);
        let d_out = DMatrix::from_fn(resid.nrows(), 1, |i, _| 2.0 * resid[i] / n);
        let (d_w, d_b) = net.backward(&acts, d_out);
        opt.update(
            &mut net,
            &d_w,
            &d_b,
            cfg.optimizer,
            cfg.learning_rate,
            0.9,
            0.999,
        );

        let (_, val_out) = net.forward(val_x);
        let val_resid = val_out.column(0) - val_y;
        let val_loss = val_resid.iter().map(|r| r * r).sum::<f64>() / val_y.nrows() as f64;
        if !val_loss.is_finite() {
            return Err(RedError::Numerical(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        let improved = best.as_ref().map_or(true, |(_, b)| val_loss < *b);
        if improved {
            best = Some((net.clone(), val_loss));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (net, best_val_loss) = best.expect("at least one epoch ran");
    Ok(MlpRegressor {
        net,
        input_dim: train_x.ncols(),
        best_val_loss,
        train_loss_trace: trace,
    })
}
