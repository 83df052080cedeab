//! Linear-softmax policy with a marginal head, an indicator-conditioned head
//! and a linear value head, plus hashing, delta encoding and the checkpoint
//! file format.

use thiserror::Error;

use crate::envsim::{Action, Observation, NUM_ACTIONS};
use crate::util::Fnv64;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SOPCKPT1";
pub const DELTA_MAGIC: &[u8; 7] = b"SOPDLT1";

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("stale base: params at version {have}, delta expects {need}")]
    StaleBase { have: u64, need: u64 },
    #[error("content hash mismatch: expected {expected:016x}, computed {computed:016x}")]
    HashMismatch { expected: u64, computed: u64 },
    #[error("malformed checkpoint data: {0}")]
    Codec(String),
}

/// Which policy head to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// pi_ref(a | s)
    Marginal,
    /// pi_ref(a | I, s)
    Conditioned(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum BlockId {
    Action = 0,
    Marginal = 1,
    Value = 2,
}

impl BlockId {
    pub const ALL: [BlockId; 3] = [BlockId::Action, BlockId::Marginal, BlockId::Value];

    pub fn from_byte(b: u8) -> Option<BlockId> {
        BlockId::ALL.get(b as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        Action::from_index(best).expect("distribution over the action set")
    }

    pub fn prob(&self, a: Action) -> f64 {
        self.probs[a.index()]
    }

    /// Inverse-CDF draw given `u` uniform in [0, 1).
    pub fn sample_with(&self, u: f64) -> Action {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
            }
            acc += p;
            if u < acc {
                return Action::from_index(i).expect("action index");
            }
        }
        Action::from_index(last_positive).expect("action index")
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Immutable, versioned parameter set. Every constructor recomputes the
/// content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    version: u64,
    num_actions: usize,
    feature_dim: usize,
    action_weights: Vec<f64>,
    marginal_weights: Vec<f64>,
    value_weights: Vec<f64>,
    content_hash: u64,
}

/// Gradient with the same block layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub action: Vec<f64>,
    pub marginal: Vec<f64>,
    pub value: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            action: vec![0.0; params.action_weights.len()],
            marginal: vec![0.0; params.marginal_weights.len()],
            value: vec![0.0; params.value_weights.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.action
            .iter()
            .chain(&self.marginal)
            .chain(&self.value)
            .all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.action.iter_mut().zip(&other.action) {
            *a += b;
        }
        for (a, b) in self.marginal.iter_mut().zip(&other.marginal) {
            *a += b;
        }
        for (a, b) in self.value.iter_mut().zip(&other.value) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.action
            .iter()
            .chain(&self.marginal)
            .chain(&self.value)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One supervised example for the NLL loss.
#[derive(Debug, Clone, Copy)]
pub struct NllItem<'a> {
    pub obs: &'a Observation,
    pub action: Action,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct NllOutput {
    /// Mean NLL over the batch.
    pub loss: f64,
    pub per_item: Vec<f64>,
    pub gradient: Gradient,
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self::from_blocks(
            0,
            NUM_ACTIONS,
            feature_dim,
            vec![0.0; NUM_ACTIONS * (feature_dim + 1)],
            vec![0.0; NUM_ACTIONS * feature_dim],
            vec![0.0; feature_dim],
        )
        .expect("zero blocks have consistent shapes")
    }

    pub fn from_blocks(
        version: u64,
        num_actions: usize,
        feature_dim: usize,
        action_weights: Vec<f64>,
        marginal_weights: Vec<f64>,
        value_weights: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let check = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(PolicyError::DimensionMismatch { expected, got })
            }
        };
        check(num_actions * (feature_dim + 1), action_weights.len())?;
        check(num_actions * feature_dim, marginal_weights.len())?;
        check(feature_dim, value_weights.len())?;
        if action_weights
            .iter()
            .chain(&marginal_weights)
            .chain(&value_weights)
            .any(|v| !v.is_finite())
        {
            return Err(PolicyError::Codec("non-finite weight".into()));
        }
        let mut p = PolicyParams {
            version,
            num_actions,
            feature_dim,
            action_weights,
            marginal_weights,
            value_weights,
            content_hash: 0,
        };
        p.content_hash = p.compute_hash();
        Ok(p)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    pub fn action_weights(&self) -> &[f64] {
        &self.action_weights
    }

    pub fn marginal_weights(&self) -> &[f64] {
        &self.marginal_weights
    }

    pub fn value_weights(&self) -> &[f64] {
        &self.value_weights
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        match id {
            BlockId::Action => &self.action_weights,
            BlockId::Marginal => &self.marginal_weights,
            BlockId::Value => &self.value_weights,
        }
    }

    fn compute_hash(&self) -> u64 {
        let mut h = Fnv64::default();
        h.write(&(self.num_actions as u64).to_le_bytes());
        h.write(&(self.feature_dim as u64).to_le_bytes());
        for id in BlockId::ALL {
            h.write(&[id as u8]);
            for v in self.block(id) {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Replacement of one block; bumps the version.
    pub fn with_block(&self, id: BlockId, values: Vec<f64>) -> Result<Self, PolicyError> {
        let mut action = self.action_weights.clone();
        let mut marginal = self.marginal_weights.clone();
        let mut value = self.value_weights.clone();
        match id {
            BlockId::Action => action = values,
            BlockId::Marginal => marginal = values,
            BlockId::Value => value = values,
        }
        Self::from_blocks(
            self.version + 1,
            self.num_actions,
            self.feature_dim,
            action,
            marginal,
            value,
        )
    }

    /// Same weights under a different version number.
    pub fn with_version(&self, version: u64) -> Self {
        let mut p = self.clone();
        p.version = version;
        p
    }

    fn check_dim(&self, obs: &Observation) -> Result<(), PolicyError> {
        if obs.len() != self.feature_dim {
            return Err(PolicyError::DimensionMismatch {
                expected: self.feature_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, obs: &Observation, head: Head) -> Result<Vec<f64>, PolicyError> {
        self.check_dim(obs)?;
        let x = obs.features();
        let f = self.feature_dim;
        let logits = match head {
            Head::Marginal => (0..self.num_actions)
                .map(|a| dot(&self.marginal_weights[a * f..(a + 1) * f], x))
                .collect(),
            Head::Conditioned(bit) => {
                let stride = f + 1;
                let ind = if bit { 1.0 } else { 0.0 };
                (0..self.num_actions)
                    .map(|a| {
                        let row = &self.action_weights[a * stride..(a + 1) * stride];
                        dot(&row[..f], x) + row[f] * ind
                    })
                    .collect()
            }
        };
        Ok(logits)
    }

    pub fn forward(
        &self,
        obs: &Observation,
        head: Head,
    ) -> Result<ActionDistribution, PolicyError> {
        Ok(ActionDistribution {
            probs: softmax(&self.logits(obs, head)?),
        })
    }

    pub fn value(&self, obs: &Observation) -> Result<f64, PolicyError> {
        self.check_dim(obs)?;
        Ok(dot(&self.value_weights, obs.features()))
    }

    /// Mean negative log-likelihood and its exact gradient.
    pub fn nll_grad(&self, batch: &[NllItem<'_>]) -> Result<NllOutput, PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let f = self.feature_dim;
        let mut gradient = Gradient::zeros_like(self);
        let mut per_item = Vec::with_capacity(batch.len());
        for item in batch {
            let logits = self.logits(item.obs, item.head)?;
            let lse = log_sum_exp(&logits);
            let a = item.action.index();
            per_item.push(lse - logits[a]);
            let x = item.obs.features();
            for (j, &l) in logits.iter().enumerate() {
                let p = (l - lse).exp();
                let coef = (p - if j == a { 1.0 } else { 0.0 }) / n;
                match item.head {
                    Head::Marginal => {
                        let row = &mut gradient.marginal[j * f..(j + 1) * f];
                        axpy(row, coef, x);
                    }
                    Head::Conditioned(bit) => {
                        let row = &mut gradient.action[j * (f + 1)..(j + 1) * (f + 1)];
                        axpy(&mut row[..f], coef, x);
                        if bit {
                            row[f] += coef;
                        }
                    }
                }
            }
        }
        let loss = per_item.iter().sum::<f64>() / n;
        Ok(NllOutput {
            loss,
            per_item,
            gradient,
        })
    }

    /// Plain SGD step; version + 1.
    pub fn sgd_step(&self, gradient: &Gradient, lr: f64) -> Result<Self, PolicyError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(PolicyError::InvalidLearningRate(lr));
        }
        if !gradient.is_finite() {
            return Err(PolicyError::NonFiniteGradient);
        }
        let shape_ok = gradient.action.len() == self.action_weights.len()
            && gradient.marginal.len() == self.marginal_weights.len()
            && gradient.value.len() == self.value_weights.len();
        if !shape_ok {
            return Err(PolicyError::DimensionMismatch {
                expected: self.action_weights.len()
                    + self.marginal_weights.len()
                    + self.value_weights.len(),
                got: gradient.action.len() + gradient.marginal.len() + gradient.value.len(),
            });
        }
        let step = |w: &[f64], g: &[f64]| -> Vec<f64> {
            w.iter().zip(g).map(|(w, g)| w - lr * g).collect()
        };
        Self::from_blocks(
            self.version + 1,
            self.num_actions,
            self.feature_dim,
            step(&self.action_weights, &gradient.action),
            step(&self.marginal_weights, &gradient.marginal),
            step(&self.value_weights, &gradient.value),
        )
        .map_err(|_| PolicyError::NonFiniteGradient)
    }

    /// Canonical checkpoint bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.action_weights.len() * 3));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        write_blocks(
            &mut out,
            BlockId::ALL.iter().map(|&id| (id, self.block(id))),
        );
        out.extend_from_slice(&self.content_hash.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader::new(bytes);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(PolicyError::Codec("bad checkpoint magic".into()));
        }
        let version = r.u64()?;
        let blocks = read_blocks(&mut r)?;
        let hash = r.u64()?;
        r.finish()?;
        let get = |id: BlockId| {
            blocks
                .iter()
                .find(|(b, _)| *b == id)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| PolicyError::Codec(format!("missing block {id:?}")))
        };
        let value = get(BlockId::Value)?;
        let marginal = get(BlockId::Marginal)?;
        let action = get(BlockId::Action)?;
        let feature_dim = value.len();
        if feature_dim == 0 || marginal.len() % feature_dim != 0 {
            return Err(PolicyError::Codec("inconsistent block shapes".into()));
        }
        let num_actions = marginal.len() / feature_dim;
        let params = Self::from_blocks(version, num_actions, feature_dim, action, marginal, value)?;
        if params.content_hash != hash {
            return Err(PolicyError::HashMismatch {
                expected: hash,
                computed: params.content_hash,
            });
        }
        Ok(params)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Changed blocks between two parameter versions.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointDelta {
    pub base_version: u64,
    pub new_version: u64,
    pub changed_blocks: Vec<(BlockId, Vec<f64>)>,
    pub full_hash: u64,
}

pub fn delta_encode(old: &PolicyParams, new: &PolicyParams) -> CheckpointDelta {
    let changed_blocks = BlockId::ALL
        .iter()
        .filter(|&&id| {
            let (a, b) = (old.block(id), new.block(id));
            a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|&id| (id, new.block(id).to_vec()))
        .collect();
    CheckpointDelta {
        base_version: old.version,
        new_version: new.version,
        changed_blocks,
        full_hash: new.content_hash,
    }
}

pub fn apply_delta(
    params: &PolicyParams,
    delta: &CheckpointDelta,
) -> Result<PolicyParams, PolicyError> {
    if params.version != delta.base_version {
        return Err(PolicyError::StaleBase {
            have: params.version,
            need: delta.base_version,
        });
    }
    let mut action = params.action_weights.clone();
    let mut marginal = params.marginal_weights.clone();
    let mut value = params.value_weights.clone();
    for (id, values) in &delta.changed_blocks {
        match id {
            BlockId::Action => action = values.clone(),
            BlockId::Marginal => marginal = values.clone(),
            BlockId::Value => value = values.clone(),
        }
    }
    let out = PolicyParams::from_blocks(
        delta.new_version,
        params.num_actions,
        params.feature_dim,
        action,
        marginal,
        value,
    )?;
    if out.content_hash != delta.full_hash {
        return Err(PolicyError::HashMismatch {
            expected: delta.full_hash,
            computed: out.content_hash,
        });
    }
    Ok(out)
}

impl CheckpointDelta {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DELTA_MAGIC);
        out.extend_from_slice(&self.base_version.to_le_bytes());
        out.extend_from_slice(&self.new_version.to_le_bytes());
        write_blocks(
            &mut out,
            self.changed_blocks
                .iter()
                .map(|(id, v)| (*id, v.as_slice())),
        );
        out.extend_from_slice(&self.full_hash.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader::new(bytes);
        if r.take(DELTA_MAGIC.len())? != DELTA_MAGIC {
            return Err(PolicyError::Codec("bad delta magic".into()));
        }
        let base_version = r.u64()?;
        let new_version = r.u64()?;
        let changed_blocks = read_blocks(&mut r)?;
        let full_hash = r.u64()?;
        r.finish()?;
        Ok(CheckpointDelta {
            base_version,
            new_version,
            changed_blocks,
            full_hash,
        })
    }
}

fn write_blocks<'a>(out: &mut Vec<u8>, blocks: impl Iterator<Item = (BlockId, &'a [f64])> + Clone) {
    out.extend_from_slice(&(blocks.clone().count() as u32).to_le_bytes());
    for (id, values) in blocks {
        out.push(id as u8);
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_blocks(r: &mut Reader<'_>) -> Result<Vec<(BlockId, Vec<f64>)>, PolicyError> {
    let count = r.u32()? as usize;
    if count > BlockId::ALL.len() {
        return Err(PolicyError::Codec(format!("too many blocks: {count}")));
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let id = BlockId::from_byte(r.take(1)?[0])
            .ok_or_else(|| PolicyError::Codec("unknown block id".into()))?;
        if blocks.iter().any(|(b, _)| *b == id) {
            return Err(PolicyError::Codec(format!("duplicate block {id:?}")));
        }
        let len = r.u32()? as usize;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| PolicyError::Codec("block length overflow".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        blocks.push((id, values));
    }
    Ok(blocks)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PolicyError> {
        if self.bytes.len() - self.pos < n {
            return Err(PolicyError::Codec("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn finish(&self) -> Result<(), PolicyError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(PolicyError::Codec("trailing bytes".into()))
        }
    }
}
