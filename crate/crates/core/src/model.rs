//! DLRM-lite CTR network with gate modulation at the input.
//!
//! Topology: embedding lookup per categorical field, a dense MLP turning the
//! continuous block into one slot-sized representation, optional pairwise
//! cross slots (element-wise products), a gate multiplier per slot, and a
//! top MLP from the concatenated slots to one click logit.
//!
//! Backward is explicit reverse-mode for this fixed topology; there is no
//! general tape. All hidden activations are ReLU, the output layer is linear,
//! and the loss is mean binary cross-entropy on logits.
//!
//! Slot order is fixed and drives mask indexing everywhere: the dense
//! representation first (when `continuous_dim > 0`), then categorical fields
//! in schema order, then cross slots in lexicographic pair order.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateState;
use crate::metrics::{self, Metrics};
use crate::optim::{adagrad_step, AdagradConfig};

/// One categorical input field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalField {
    pub name: String,
    pub cardinality: usize,
    pub embedding_dim: usize,
}

/// Input layout: which fields exist and how they map onto selectable slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub categorical_fields: Vec<CategoricalField>,
    pub continuous_dim: usize,
    /// Width of the dense representation slot.
    pub dense_rep_dim: usize,
    pub cross_enabled: bool,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        for f in &self.categorical_fields {
            if f.cardinality == 0 || f.embedding_dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "field `{}` needs positive cardinality and embedding_dim",
                    f.name
                )));
            }
        }
        if self.dense_rep_dim == 0 {
            return Err(Error::InvalidConfig("dense_rep_dim must be positive".into()));
        }
        if self.cross_enabled {
            // Element-wise products require equal widths across all slots.
            let mut dims: Vec<usize> = self
                .categorical_fields
                .iter()
                .map(|f| f.embedding_dim)
                .collect();
            if self.has_dense_slot() {
                dims.push(self.dense_rep_dim);
            }
            if dims.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::InvalidConfig(
                    "cross features require one shared embedding width".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn has_dense_slot(&self) -> bool {
        self.continuous_dim > 0
    }

    /// Base (non-cross) slots: dense representation plus categorical fields.
    pub fn base_slot_count(&self) -> usize {
        self.categorical_fields.len() + self.has_dense_slot() as usize
    }

    pub fn cross_slot_count(&self) -> usize {
        if self.cross_enabled {
            let b = self.base_slot_count();
            b * (b - 1) / 2
        } else {
            0
        }
    }

    /// Total selectable slot count N.
    pub fn slot_count(&self) -> usize {
        self.base_slot_count() + self.cross_slot_count()
    }

    /// Base slot index of categorical field `field`.
    pub fn base_slot_of_field(&self, field: usize) -> usize {
        field + self.has_dense_slot() as usize
    }

    /// Categorical field behind a base slot; `None` for the dense slot.
    pub fn field_of_base_slot(&self, base: usize) -> Option<usize> {
        if self.has_dense_slot() && base == 0 {
            None
        } else {
            Some(base - self.has_dense_slot() as usize)
        }
    }

    pub fn slot_width(&self, slot: usize) -> usize {
        if slot < self.base_slot_count() {
            match self.field_of_base_slot(slot) {
                None => self.dense_rep_dim,
                Some(f) => self.categorical_fields[f].embedding_dim,
            }
        } else {
            // Widths are uniform when crossing is legal.
            self.dense_rep_dim
        }
    }

    /// Lexicographic cross pair (i, j), i < j, for cross slot number `k`
    /// (0-based among cross slots).
    pub fn cross_pair(&self, k: usize) -> (usize, usize) {
        let b = self.base_slot_count();
        let mut k = k;
        for i in 0..b {
            let row = b - i - 1;
            if k < row {
                return (i, i + 1 + k);
            }
            k -= row;
        }
        panic!("cross slot index out of range");
    }

    /// Inverse of [`FeatureSchema::cross_pair`], returning the absolute slot
    /// index of the (i, j) cross slot.
    pub fn cross_slot_index(&self, i: usize, j: usize) -> usize {
        assert!(i < j && j < self.base_slot_count());
        let b = self.base_slot_count();
        self.base_slot_count() + i * (2 * b - i - 1) / 2 + (j - i - 1)
    }

    pub fn slot_name(&self, slot: usize) -> String {
        if slot < self.base_slot_count() {
            match self.field_of_base_slot(slot) {
                None => "dense".to_string(),
                Some(f) => self.categorical_fields[f].name.clone(),
            }
        } else {
            let (i, j) = self.cross_pair(slot - self.base_slot_count());
            format!("{}*{}", self.slot_name(i), self.slot_name(j))
        }
    }

    pub fn slot_names(&self) -> Vec<String> {
        (0..self.slot_count()).map(|s| self.slot_name(s)).collect()
    }

    /// Width of the top-MLP input when every slot is kept.
    pub fn concat_width(&self) -> usize {
        (0..self.slot_count()).map(|s| self.slot_width(s)).sum()
    }
}

/// One batch of training or evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minibatch {
    /// 0.0 / 1.0 click labels, length B.
    pub labels: Vec<f64>,
    /// B x n_fields category ids.
    pub categorical_ids: Array2<u32>,
    /// B x continuous_dim raw continuous features.
    pub continuous: Array2<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Affine layer, weight stored out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        // Uniform fan-in scaling.
        let bound = (6.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng)),
            bias: Array1::zeros(out_dim),
        }
    }

    fn zeros_like(&self) -> (Array2<f64>, Array1<f64>) {
        (Array2::zeros(self.weight.dim()), Array1::zeros(self.bias.dim()))
    }
}

/// Stack of affine layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs captured during the forward pass; `inputs[l]` feeds layer
/// `l`, and hidden inputs double as the ReLU mask for backward.
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

pub type MlpGrads = Vec<(Array2<f64>, Array1<f64>)>;

impl Mlp {
    /// Build from a dimension chain `[in, hidden.., out]`.
    fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[1], w[0], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(a.clone());
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            a = if l + 1 < self.layers.len() {
                z.mapv(|v| v.max(0.0))
            } else {
                z
            };
        }
        (a, MlpCache { inputs })
    }

    /// Reverse pass. Returns per-layer (dW, db) and the gradient with respect
    /// to the MLP input.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let mut grads: MlpGrads = self.layers.iter().map(Linear::zeros_like).collect();
        let mut dz = d_out.clone();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                // dz arriving here is dL/d(post-activation of layer l); mask
                // by the ReLU that produced layer l+1's input.
                let mask = &cache.inputs[l + 1];
                dz.zip_mut_with(mask, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            grads[l].0 = dz.t().dot(&cache.inputs[l]);
            grads[l].1 = dz.sum_axis(Axis(0));
            if l > 0 {
                dz = dz.dot(&self.layers[l].weight);
            } else {
                dz = dz.dot(&self.layers[l].weight);
                return (grads, dz);
            }
        }
        unreachable!()
    }

    fn zero_buffers(&self) -> MlpGrads {
        self.layers.iter().map(Linear::zeros_like).collect()
    }
}

/// Model hyperparameters that are not part of the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden sizes of the dense MLP; empty means a single affine layer.
    pub dense_hidden: Vec<usize>,
    /// Hidden sizes of the top MLP.
    pub top_hidden: Vec<usize>,
    pub adagrad: AdagradConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dense_hidden: vec![64],
            top_hidden: vec![256, 128],
            adagrad: AdagradConfig::default(),
            seed: 0,
        }
    }
}

/// The CTR network: parameters, Adagrad accumulators, and the slot mask that
/// says which slots still feed the top MLP (all of them before absorption).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtrModel {
    pub schema: FeatureSchema,
    /// One table per categorical field; `None` once physically removed.
    pub embeddings: Vec<Option<Array2<f64>>>,
    pub dense_mlp: Option<Mlp>,
    pub top_mlp: Mlp,
    /// Slots currently wired into the top MLP, in slot order.
    pub slot_mask: Vec<bool>,
    pub embed_accum: Vec<Option<Array2<f64>>>,
    pub dense_accum: Option<MlpGrads>,
    pub top_accum: MlpGrads,
    pub adagrad: AdagradConfig,
    pub global_step: u64,
}

/// Gradients for one batch, sparse over embedding rows.
pub struct Grads {
    /// Per field: touched row id -> accumulated row gradient.
    pub embeddings: Vec<HashMap<u32, Array1<f64>>>,
    pub dense_mlp: Option<MlpGrads>,
    pub top_mlp: MlpGrads,
    /// dLoss/dx per gate slot; `None` when run ungated.
    pub grad_x: Option<Vec<f64>>,
}

/// Forward result plus everything backward needs.
pub struct ForwardPass {
    pub logits: Array1<f64>,
    /// Post-rescale value of each base slot that had to be computed.
    base_values: Vec<Option<Array2<f64>>>,
    dense_cache: Option<MlpCache>,
    /// Pre-gate value of each kept slot.
    pre_gate: Vec<Option<Array2<f64>>>,
    top_cache: MlpCache,
    gate_values: Option<Vec<f64>>,
    rms_div: Option<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy on logits, numerically stable.
pub fn bce_with_logits(logits: &Array1<f64>, labels: &[f64]) -> f64 {
    let n = labels.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

impl CtrModel {
    pub fn init(schema: FeatureSchema, config: &ModelConfig) -> Result<Self> {
        schema.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut embeddings = Vec::with_capacity(schema.categorical_fields.len());
        for f in &schema.categorical_fields {
            let bound = 1.0 / (f.embedding_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            embeddings.push(Some(Array2::from_shape_fn(
                (f.cardinality, f.embedding_dim),
                |_| dist.sample(&mut rng),
            )));
        }

        let dense_mlp = if schema.has_dense_slot() {
            let mut dims = vec![schema.continuous_dim];
            dims.extend_from_slice(&config.dense_hidden);
            dims.push(schema.dense_rep_dim);
            Some(Mlp::init(&dims, &mut rng))
        } else {
            None
        };

        let mut top_dims = vec![schema.concat_width()];
        top_dims.extend_from_slice(&config.top_hidden);
        top_dims.push(1);
        let top_mlp = Mlp::init(&top_dims, &mut rng);

        let embed_accum = embeddings
            .iter()
            .map(|t| t.as_ref().map(|t| Array2::zeros(t.dim())))
            .collect();
        let dense_accum = dense_mlp.as_ref().map(Mlp::zero_buffers);
        let top_accum = top_mlp.zero_buffers();
        let slot_mask = vec![true; schema.slot_count()];

        Ok(Self {
            schema,
            embeddings,
            dense_mlp,
            top_mlp,
            slot_mask,
            embed_accum,
            dense_accum,
            top_accum,
            adagrad: config.adagrad,
            global_step: 0,
        })
    }

    pub fn kept_slots(&self) -> Vec<usize> {
        (0..self.schema.slot_count())
            .filter(|&s| self.slot_mask[s])
            .collect()
    }

    fn validate_batch(&self, batch: &Minibatch) -> Result<()> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyData("minibatch"));
        }
        if batch.categorical_ids.nrows() != b || batch.continuous.nrows() != b {
            return Err(Error::ShapeMismatch {
                what: "minibatch rows",
                expected: format!("{b}"),
                got: format!(
                    "{} ids / {} continuous",
                    batch.categorical_ids.nrows(),
                    batch.continuous.nrows()
                ),
            });
        }
        if batch.categorical_ids.ncols() != self.schema.categorical_fields.len() {
            return Err(Error::ShapeMismatch {
                what: "minibatch categorical fields",
                expected: format!("{}", self.schema.categorical_fields.len()),
                got: format!("{}", batch.categorical_ids.ncols()),
            });
        }
        if batch.continuous.ncols() != self.schema.continuous_dim {
            return Err(Error::ShapeMismatch {
                what: "minibatch continuous dim",
                expected: format!("{}", self.schema.continuous_dim),
                got: format!("{}", batch.continuous.ncols()),
            });
        }
        Ok(())
    }

    /// Which base slots must be materialized: every kept base slot plus any
    /// factor of a kept cross slot.
    fn needed_base_slots(&self) -> Vec<bool> {
        let base = self.schema.base_slot_count();
        let mut needed: Vec<bool> = self.slot_mask[..base].to_vec();
        for k in 0..self.schema.cross_slot_count() {
            if self.slot_mask[base + k] {
                let (i, j) = self.schema.cross_pair(k);
                needed[i] = true;
                needed[j] = true;
            }
        }
        needed
    }

    /// Per-field embedding blocks for one batch (gather semantics).
    pub fn embed_lookup(&self, batch: &Minibatch) -> Result<Vec<Array2<f64>>> {
        self.validate_batch(batch)?;
        let mut out = Vec::with_capacity(self.schema.categorical_fields.len());
        for (f, field) in self.schema.categorical_fields.iter().enumerate() {
            let table = self.embeddings[f].as_ref().ok_or_else(|| {
                Error::InvalidConfig(format!("field `{}` has no embedding table", field.name))
            })?;
            out.push(self.lookup_field(table, batch, f)?);
        }
        Ok(out)
    }

    fn lookup_field(&self, table: &Array2<f64>, batch: &Minibatch, f: usize) -> Result<Array2<f64>> {
        let field = &self.schema.categorical_fields[f];
        let b = batch.len();
        let mut block = Array2::zeros((b, field.embedding_dim));
        for row in 0..b {
            let id = batch.categorical_ids[[row, f]] as usize;
            if id >= field.cardinality {
                return Err(Error::IdOutOfRange {
                    field: field.name.clone(),
                    id,
                    cardinality: field.cardinality,
                    row,
                });
            }
            block.row_mut(row).assign(&table.row(id));
        }
        Ok(block)
    }

    /// Dense representation of the continuous block.
    pub fn dense_rep(&self, batch: &Minibatch) -> Result<(Array2<f64>, MlpCache)> {
        let mlp = self.dense_mlp.as_ref().ok_or(Error::InvalidConfig(
            "dense_rep called with continuous_dim = 0".into(),
        ))?;
        Ok(mlp.forward(&batch.continuous))
    }

    pub fn forward(
        &self,
        gates: Option<&GateState>,
        rms_div: Option<f64>,
        batch: &Minibatch,
    ) -> Result<ForwardPass> {
        self.validate_batch(batch)?;
        if let Some(g) = gates {
            if g.len() != self.schema.slot_count() {
                return Err(Error::LengthMismatch {
                    what: "gate vector vs slot count",
                    left: g.len(),
                    right: self.schema.slot_count(),
                });
            }
        }
        let base = self.schema.base_slot_count();
        let needed = self.needed_base_slots();

        // Materialize base slots: dense rep as-is, categorical divided by the
        // rms rescale when active.
        let mut base_values: Vec<Option<Array2<f64>>> = vec![None; base];
        let mut dense_cache = None;
        for slot in 0..base {
            if !needed[slot] {
                continue;
            }
            let value = match self.schema.field_of_base_slot(slot) {
                None => {
                    let (rep, cache) = self.dense_rep(batch)?;
                    dense_cache = Some(cache);
                    rep
                }
                Some(f) => {
                    let table = self.embeddings[f].as_ref().ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "field `{}` is masked in but its table was removed",
                            self.schema.categorical_fields[f].name
                        ))
                    })?;
                    let mut e = self.lookup_field(table, batch, f)?;
                    if let Some(rho) = rms_div {
                        e.mapv_inplace(|v| v / rho);
                    }
                    e
                }
            };
            base_values[slot] = Some(value);
        }

        // Pre-gate slot values for kept slots; cross slots multiply their two
        // base factors element-wise.
        let n_slots = self.schema.slot_count();
        let mut pre_gate: Vec<Option<Array2<f64>>> = vec![None; n_slots];
        for slot in 0..n_slots {
            if !self.slot_mask[slot] {
                continue;
            }
            let u = if slot < base {
                base_values[slot].as_ref().unwrap().clone()
            } else {
                let (i, j) = self.schema.cross_pair(slot - base);
                base_values[i].as_ref().unwrap() * base_values[j].as_ref().unwrap()
            };
            pre_gate[slot] = Some(u);
        }

        let gate_values = gates.map(GateState::normalized_gates);

        // Gate, concatenate, and run the top MLP.
        let b = batch.len();
        let width: usize = self
            .kept_slots()
            .iter()
            .map(|&s| self.schema.slot_width(s))
            .sum();
        let mut concat = Array2::zeros((b, width));
        let mut col = 0;
        for slot in self.kept_slots() {
            let w = self.schema.slot_width(slot);
            let u = pre_gate[slot].as_ref().unwrap();
            let mut view = concat.slice_mut(ndarray::s![.., col..col + w]);
            match &gate_values {
                Some(g) => view.assign(&(u * g[slot])),
                None => view.assign(u),
            }
            col += w;
        }

        let (out, top_cache) = self.top_mlp.forward(&concat);
        let logits = out.index_axis(Axis(1), 0).to_owned();
        Ok(ForwardPass {
            logits,
            base_values,
            dense_cache,
            pre_gate,
            top_cache,
            gate_values,
            rms_div,
        })
    }

    /// Predicted click probabilities for one batch.
    pub fn predict_probs(
        &self,
        gates: Option<&GateState>,
        rms_div: Option<f64>,
        batch: &Minibatch,
    ) -> Result<Vec<f64>> {
        Ok(self
            .forward(gates, rms_div, batch)?
            .logits
            .iter()
            .map(|&z| sigmoid(z))
            .collect())
    }

    /// Mean BCE loss and exact gradients for every live tensor, plus the
    /// chain-rule gradient for the gate parameters when gates are active.
    pub fn loss_and_grads(
        &self,
        gates: Option<&GateState>,
        rms_div: Option<f64>,
        batch: &Minibatch,
    ) -> Result<(f64, Grads)> {
        let fwd = self.forward(gates, rms_div, batch)?;
        let loss = bce_with_logits(&fwd.logits, &batch.labels);
        let grads = self.backward(gates, batch, &fwd)?;
        Ok((loss, grads))
    }

    fn backward(
        &self,
        gates: Option<&GateState>,
        batch: &Minibatch,
        fwd: &ForwardPass,
    ) -> Result<Grads> {
        let b = batch.len();
        let base = self.schema.base_slot_count();

        // dL/dlogit = (sigmoid(z) - y) / B
        let mut d_out = Array2::zeros((b, 1));
        for row in 0..b {
            d_out[[row, 0]] = (sigmoid(fwd.logits[row]) - batch.labels[row]) / b as f64;
        }

        let (top_grads, d_concat) = self.top_mlp.backward(&fwd.top_cache, &d_out);

        // Split the concat gradient back into slots and push through gates.
        let mut d_base: Vec<Option<Array2<f64>>> = vec![None; base];
        let mut grad_x = gates.map(|g| vec![0.0; g.len()]);
        let mut col = 0;
        for slot in self.kept_slots() {
            let w = self.schema.slot_width(slot);
            let d_s = d_concat.slice(ndarray::s![.., col..col + w]);
            col += w;
            let u = fwd.pre_gate[slot].as_ref().unwrap();

            let d_u: Array2<f64> = match (&fwd.gate_values, &mut grad_x) {
                (Some(g), Some(gx)) => {
                    // dL/d(normalized gate) then chain through the gate
                    // derivative and the init normalization.
                    let d_gate: f64 = (&d_s * u).sum();
                    gx[slot] = d_gate * gates.unwrap().normalized_grad(slot);
                    &d_s * g[slot]
                }
                _ => d_s.to_owned(),
            };

            if slot < base {
                match &mut d_base[slot] {
                    Some(acc) => *acc += &d_u,
                    None => d_base[slot] = Some(d_u),
                }
            } else {
                let (i, j) = self.schema.cross_pair(slot - base);
                let bi = fwd.base_values[i].as_ref().unwrap();
                let bj = fwd.base_values[j].as_ref().unwrap();
                let di = &d_u * bj;
                let dj = &d_u * bi;
                match &mut d_base[i] {
                    Some(acc) => *acc += &di,
                    None => d_base[i] = Some(di),
                }
                match &mut d_base[j] {
                    Some(acc) => *acc += &dj,
                    None => d_base[j] = Some(dj),
                }
            }
        }

        // Base slots: dense goes through the dense MLP, categorical scatters
        // into sparse per-row gradients (undoing the rms divide).
        let mut embed_grads: Vec<HashMap<u32, Array1<f64>>> =
            (0..self.schema.categorical_fields.len())
                .map(|_| HashMap::new())
                .collect();
        let mut dense_grads = None;
        for slot in 0..base {
            let Some(d_b) = &d_base[slot] else { continue };
            match self.schema.field_of_base_slot(slot) {
                None => {
                    let mlp = self.dense_mlp.as_ref().unwrap();
                    let cache = fwd.dense_cache.as_ref().unwrap();
                    let (g, _) = mlp.backward(cache, d_b);
                    dense_grads = Some(g);
                }
                Some(f) => {
                    let scale = 1.0 / fwd.rms_div.unwrap_or(1.0);
                    let acc = &mut embed_grads[f];
                    for row in 0..b {
                        let id = batch.categorical_ids[[row, f]];
                        let g_row = d_b.row(row);
                        let entry = acc
                            .entry(id)
                            .or_insert_with(|| Array1::zeros(g_row.len()));
                        entry.zip_mut_with(&g_row, |a, &g| *a += g * scale);
                    }
                }
            }
        }

        Ok(Grads {
            embeddings: embed_grads,
            dense_mlp: dense_grads,
            top_mlp: top_grads,
            grad_x,
        })
    }

    /// Adagrad update of every tensor that received a gradient.
    pub fn apply_grads(&mut self, grads: &Grads) -> Result<()> {
        let cfg = self.adagrad;
        for (f, rows) in grads.embeddings.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let table = self.embeddings[f].as_mut().expect("gradient for removed table");
            let accum = self.embed_accum[f].as_mut().unwrap();
            for (&id, g) in rows {
                let id = id as usize;
                let mut w_row = table.row_mut(id);
                let mut a_row = accum.row_mut(id);
                for d in 0..g.len() {
                    let gv = g[d];
                    a_row[d] += gv * gv;
                    w_row[d] -= cfg.lr * gv / (a_row[d].sqrt() + cfg.epsilon_stability);
                }
            }
        }
        if let Some(dg) = &grads.dense_mlp {
            let mlp = self.dense_mlp.as_mut().unwrap();
            let accum = self.dense_accum.as_mut().unwrap();
            for (l, (dw, db)) in dg.iter().enumerate() {
                adagrad_step(&mut mlp.layers[l].weight, dw, &mut accum[l].0, &cfg)?;
                adagrad_step(&mut mlp.layers[l].bias, db, &mut accum[l].1, &cfg)?;
            }
        }
        for (l, (dw, db)) in grads.top_mlp.iter().enumerate() {
            adagrad_step(
                &mut self.top_mlp.layers[l].weight,
                dw,
                &mut self.top_accum[l].0,
                &cfg,
            )?;
            adagrad_step(
                &mut self.top_mlp.layers[l].bias,
                db,
                &mut self.top_accum[l].1,
                &cfg,
            )?;
        }
        Ok(())
    }

    /// AUC / logloss / accuracy over a stream of batches.
    pub fn evaluate<'a, I>(
        &self,
        gates: Option<&GateState>,
        rms_div: Option<f64>,
        batches: I,
    ) -> Result<Metrics>
    where
        I: IntoIterator<Item = &'a Minibatch>,
    {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for batch in batches {
            probs.extend(self.predict_probs(gates, rms_div, batch)?);
            labels.extend_from_slice(&batch.labels);
        }
        if probs.is_empty() {
            return Err(Error::EmptyData("evaluation stream"));
        }
        metrics::compute(&probs, &labels)
    }
}

/// Element-wise cross products of base slots, lexicographic pair order.
pub fn cross_slots(base: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(base.len() * base.len().saturating_sub(1) / 2);
    for i in 0..base.len() {
        for j in i + 1..base.len() {
            out.push(&base[i] * &base[j]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schema(cross: bool) -> FeatureSchema {
        FeatureSchema {
            categorical_fields: vec![
                CategoricalField {
                    name: "a".into(),
                    cardinality: 5,
                    embedding_dim: 3,
                },
                CategoricalField {
                    name: "b".into(),
                    cardinality: 4,
                    embedding_dim: 3,
                },
            ],
            continuous_dim: 3,
            dense_rep_dim: 3,
            cross_enabled: cross,
        }
    }

    fn tiny_model(cross: bool, seed: u64) -> CtrModel {
        let config = ModelConfig {
            dense_hidden: vec![4],
            top_hidden: vec![8, 4],
            adagrad: AdagradConfig::default(),
            seed,
        };
        CtrModel::init(tiny_schema(cross), &config).unwrap()
    }

    fn tiny_batch() -> Minibatch {
        Minibatch {
            labels: vec![1.0, 0.0, 1.0, 0.0],
            categorical_ids: ndarray::arr2(&[[0, 1], [1, 2], [2, 3], [4, 0]]),
            continuous: ndarray::arr2(&[
                [0.5, -1.0, 0.25],
                [0.0, 0.0, 0.0],
                [1.5, 0.5, -0.75],
                [-0.25, 1.0, 2.0],
            ]),
        }
    }

    #[test]
    fn slot_layout_counts() {
        let schema = tiny_schema(true);
        assert_eq!(schema.base_slot_count(), 3);
        assert_eq!(schema.cross_slot_count(), 3);
        assert_eq!(schema.slot_count(), 6);
        assert_eq!(schema.slot_name(0), "dense");
        assert_eq!(schema.slot_name(1), "a");
        assert_eq!(schema.slot_name(3), "dense*a");
        assert_eq!(schema.slot_name(5), "a*b");
    }

    #[test]
    fn cross_index_round_trips() {
        let schema = FeatureSchema {
            categorical_fields: (0..6)
                .map(|i| CategoricalField {
                    name: format!("f{i}"),
                    cardinality: 3,
                    embedding_dim: 2,
                })
                .collect(),
            continuous_dim: 2,
            dense_rep_dim: 2,
            cross_enabled: true,
        };
        let base = schema.base_slot_count();
        let mut seen = Vec::new();
        for k in 0..schema.cross_slot_count() {
            let (i, j) = schema.cross_pair(k);
            assert!(i < j && j < base);
            assert_eq!(schema.cross_slot_index(i, j), base + k);
            seen.push((i, j));
        }
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(seen, sorted, "pair order must be lexicographic");
        assert_eq!(seen.len(), base * (base - 1) / 2);
    }

    #[test]
    fn cross_slots_hand_cases() {
        let ones = Array2::from_elem((2, 3), 1.0);
        let out = cross_slots(&[ones.clone(), ones.clone()]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], Array2::from_elem((2, 3), 1.0));

        let zero: Array2<f64> = Array2::zeros((2, 3));
        let out = cross_slots(&[ones.clone(), zero.clone(), ones]);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], zero);
        assert_eq!(out[2], zero);
    }

    #[test]
    fn lookup_gathers_table_rows() {
        let model = tiny_model(false, 3);
        let batch = tiny_batch();
        let blocks = model.embed_lookup(&batch).unwrap();
        let table = model.embeddings[0].as_ref().unwrap();
        for row in 0..batch.len() {
            let id = batch.categorical_ids[[row, 0]] as usize;
            assert_eq!(blocks[0].row(row), table.row(id));
        }
    }

    #[test]
    fn lookup_rejects_out_of_range_id() {
        let model = tiny_model(false, 3);
        let mut batch = tiny_batch();
        batch.categorical_ids[[2, 1]] = 99;
        let err = model.embed_lookup(&batch).unwrap_err();
        match err {
            Error::IdOutOfRange { field, id, row, .. } => {
                assert_eq!(field, "b");
                assert_eq!(id, 99);
                assert_eq!(row, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dense_rep_identity_single_layer() {
        // A single affine layer with identity weights passes input through.
        let mut model = tiny_model(false, 1);
        model.dense_mlp = Some(Mlp {
            layers: vec![Linear {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
        });
        let batch = tiny_batch();
        let (rep, _) = model.dense_rep(&batch).unwrap();
        assert_eq!(rep, batch.continuous);
    }

    #[test]
    fn dense_rep_zero_input_zero_bias() {
        let model = tiny_model(false, 5);
        let batch = Minibatch {
            labels: vec![0.0],
            categorical_ids: ndarray::arr2(&[[0, 0]]),
            continuous: Array2::zeros((1, 3)),
        };
        let (rep, _) = model.dense_rep(&batch).unwrap();
        assert!(rep.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_rep_requires_continuous() {
        let mut schema = tiny_schema(false);
        schema.continuous_dim = 0;
        let config = ModelConfig {
            dense_hidden: vec![],
            top_hidden: vec![4],
            adagrad: AdagradConfig::default(),
            seed: 0,
        };
        let model = CtrModel::init(schema, &config).unwrap();
        let batch = Minibatch {
            labels: vec![0.0],
            categorical_ids: ndarray::arr2(&[[0, 0]]),
            continuous: Array2::zeros((1, 0)),
        };
        assert!(model.dense_rep(&batch).is_err());
    }

    #[test]
    fn unit_gates_match_ungated_forward() {
        use crate::gates::{GateKind, GateState};
        let model = tiny_model(true, 11);
        let batch = tiny_batch();
        let gates = GateState::new(GateKind::Lpfs, model.schema.slot_count(), 0.1, 0.0).unwrap();
        let gated = model.forward(Some(&gates), Some(1.0), &batch).unwrap();
        let plain = model.forward(None, None, &batch).unwrap();
        // Normalized gates are exactly 1.0 at init, so gating is bit-inert.
        assert_eq!(gated.logits, plain.logits);
    }

    #[test]
    fn zero_gate_kills_slot_bit_exactly() {
        use crate::gates::{GateKind, GateState};
        let mut model = tiny_model(false, 11);
        let batch = tiny_batch();
        let mut gates = GateState::new(GateKind::Lpfs, 3, 0.1, 0.0).unwrap();
        gates.x[1] = 0.0; // kill field `a`
        let before = model.forward(Some(&gates), None, &batch).unwrap();
        // Perturb the dead slot's table arbitrarily.
        model.embeddings[0]
            .as_mut()
            .unwrap()
            .mapv_inplace(|v| v * -417.0 + 3.25);
        let after = model.forward(Some(&gates), None, &batch).unwrap();
        assert_eq!(before.logits, after.logits);
    }

    #[test]
    fn doubling_a_gate_doubles_its_contribution() {
        use crate::gates::{GateKind, GateState};
        let model = tiny_model(false, 2);
        let batch = tiny_batch();
        let mut g1 = GateState::new(GateKind::Lpfs, 3, 0.1, 0.0).unwrap();
        let mut g2 = g1.clone();
        // First-layer pre-activation is linear in each slot, so scaling one
        // slot's gate scales its contribution linearly.
        g1.x[2] = 0.0;
        g2.x[2] = 1.0; // normalized gate exactly 1
        let z0 = pre_activation_contribution(&model, &g1, &batch);
        let z1 = pre_activation_contribution(&model, &g2, &batch);
        // Build a synthetic doubled gate by init_norm manipulation.
        let mut g_double = g2.clone();
        g_double.init_norm[2] = g2.init_norm[2] / 2.0;
        let z2 = pre_activation_contribution(&model, &g_double, &batch);
        let contrib1 = &z1 - &z0;
        let contrib2 = &z2 - &z0;
        let diff = (&contrib2 - &(&contrib1 * 2.0))
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "diff {diff}");
    }

    fn pre_activation_contribution(
        model: &CtrModel,
        gates: &GateState,
        batch: &Minibatch,
    ) -> Array2<f64> {
        // First top-MLP pre-activation.
        let fwd = model.forward(Some(gates), None, batch).unwrap();
        let z = fwd.top_cache.inputs[0].dot(&model.top_mlp.layers[0].weight.t());
        let _ = fwd;
        z
    }

    #[test]
    fn bce_hand_value() {
        let logits = ndarray::arr1(&[0.0]);
        assert!((bce_with_logits(&logits, &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_gate_length_mismatch() {
        use crate::gates::{GateKind, GateState};
        let model = tiny_model(false, 1);
        let gates = GateState::new(GateKind::Lpfs, 7, 0.1, 0.0).unwrap();
        assert!(matches!(
            model.forward(Some(&gates), None, &tiny_batch()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn determinism_same_seed_same_losses() {
        let run = || {
            let mut model = tiny_model(true, 9);
            let batch = tiny_batch();
            let mut losses = Vec::new();
            for _ in 0..5 {
                let (loss, grads) = model.loss_and_grads(None, None, &batch).unwrap();
                model.apply_grads(&grads).unwrap();
                losses.push(loss);
            }
            losses
        };
        assert_eq!(run(), run());
    }
}
