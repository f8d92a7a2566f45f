//! Model variants: the geometric baselines, a logistic model, and the small
//! tower networks, with forward and backward passes over a flat parameter
//! vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{
    FeatureVector, BASELINE_FEATURES, FEATURE_NAMES, IDX_BASELINE_P1, IDX_SECS_SINCE_ANY_CLICK, IDX_SECS_SINCE_MSG_CLICK,
    MESSAGE_USER_FEATURES, N_FEATURES, PATTERN_FEATURES, SECONDS_CAP,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline1,
    Baseline2,
    Baseline3,
    Logistic,
    NN,
    PatternNN,
    BaselineNN,
    PatternBaselineNN,
    SessionalNN,
    CategoryNN,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Baseline1,
        Variant::Baseline2,
        Variant::Baseline3,
        Variant::Logistic,
        Variant::NN,
        Variant::PatternNN,
        Variant::BaselineNN,
        Variant::PatternBaselineNN,
        Variant::SessionalNN,
        Variant::CategoryNN,
    ];

    pub const TRAINABLE: [Variant; 7] = [
        Variant::Logistic,
        Variant::NN,
        Variant::PatternNN,
        Variant::BaselineNN,
        Variant::PatternBaselineNN,
        Variant::SessionalNN,
        Variant::CategoryNN,
    ];

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::Baseline1 | Variant::Baseline2 | Variant::Baseline3)
    }

    pub fn is_trainable(self) -> bool {
        !self.is_baseline()
    }

    /// Predicts one probability per (section, second) rather than one value
    /// per message.
    pub fn is_per_timestep(self) -> bool {
        !matches!(self, Variant::SessionalNN | Variant::CategoryNN)
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| format!("{v:?}").eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Validation(format!("unknown model variant {name:?}")))
    }
}

/// Message-level inputs of the sessional variants, in order.
pub const SESSION_FEATURE_NAMES: [&str; 8] = [
    "mean_window_share",
    "mean_center_offset",
    "clicked",
    "visible_seconds",
    "mean_move_freq_h",
    "mean_move_freq_v",
    "mean_scroll_freq",
    "frac_messages_clicked",
];
pub const N_SESSION_FEATURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Layer {
    /// A stack of rectified dense layers over a subset of the inputs. Inputs
    /// are multiplied by `input_scale` before the first layer.
    Tower { inputs: Vec<usize>, input_scale: Vec<f64>, widths: Vec<usize> },
    /// Dense output layer over the (multiplied) tower outputs.
    Head { outputs: usize, activation: OutputActivation },
}

/// Serialized model: `{variant, arch, weights, seed, feature_order}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub arch: Vec<Layer>,
    pub weights: Vec<f64>,
    pub seed: u64,
    pub feature_order: Vec<String>,
}

const TOWER_WIDTHS: [usize; 2] = [16, 8];

fn per_timestep_scale(idx: usize) -> f64 {
    if idx == IDX_SECS_SINCE_MSG_CLICK || idx == IDX_SECS_SINCE_ANY_CLICK {
        1.0 / SECONDS_CAP
    } else {
        1.0
    }
}

fn tower(range: std::ops::Range<usize>, widths: &[usize], scale: fn(usize) -> f64) -> Layer {
    Layer::Tower { inputs: range.clone().collect(), input_scale: range.map(scale).collect(), widths: widths.to_vec() }
}

fn session_scale(idx: usize) -> f64 {
    // visible seconds are counted in minutes
    if idx == 3 {
        1.0 / 60.0
    } else {
        1.0
    }
}

/// Default architecture for a variant; baselines have none.
pub fn default_arch(variant: Variant) -> Vec<Layer> {
    let sigmoid = Layer::Head { outputs: 1, activation: OutputActivation::Sigmoid };
    let ts = per_timestep_scale;
    match variant {
        Variant::Baseline1 | Variant::Baseline2 | Variant::Baseline3 => vec![],
        Variant::Logistic => vec![tower(MESSAGE_USER_FEATURES, &[], ts), sigmoid],
        Variant::NN => vec![tower(MESSAGE_USER_FEATURES, &TOWER_WIDTHS, ts), sigmoid],
        Variant::PatternNN => vec![tower(MESSAGE_USER_FEATURES, &TOWER_WIDTHS, ts), tower(PATTERN_FEATURES, &TOWER_WIDTHS, ts), sigmoid],
        Variant::BaselineNN => vec![tower(BASELINE_FEATURES, &TOWER_WIDTHS, ts), sigmoid],
        Variant::PatternBaselineNN => {
            vec![tower(BASELINE_FEATURES, &TOWER_WIDTHS, ts), tower(PATTERN_FEATURES, &TOWER_WIDTHS, ts), sigmoid]
        }
        Variant::SessionalNN => vec![
            tower(0..4, &TOWER_WIDTHS, session_scale),
            tower(4..8, &TOWER_WIDTHS, session_scale),
            Layer::Head { outputs: 1, activation: OutputActivation::Relu },
        ],
        Variant::CategoryNN => vec![
            tower(0..4, &TOWER_WIDTHS, session_scale),
            tower(4..8, &TOWER_WIDTHS, session_scale),
            Layer::Head { outputs: 3, activation: OutputActivation::Softmax },
        ],
    }
}

/// Shape of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Dense {
    offset: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn size(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }
    fn w(&self, w: &[f64], o: usize, i: usize) -> f64 {
        w[self.offset + o * self.n_in + i]
    }
    fn b_index(&self, o: usize) -> usize {
        self.offset + self.n_in * self.n_out + o
    }
    fn forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.n_out).map(|o| w[self.b_index(o)] + (0..self.n_in).map(|i| self.w(w, o, i) * x[i]).sum::<f64>()).collect()
    }
    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    fn backward(&self, w: &[f64], x: &[f64], g_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut g_in = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            let g = g_out[o];
            if g == 0.0 {
                continue;
            }
            for i in 0..self.n_in {
                grad[self.offset + o * self.n_in + i] += g * x[i];
                g_in[i] += g * self.w(w, o, i);
            }
            grad[self.b_index(o)] += g;
        }
        g_in
    }
}

#[derive(Debug, Clone)]
struct TowerPlan {
    inputs: Vec<usize>,
    scale: Vec<f64>,
    layers: Vec<Dense>,
}

impl TowerPlan {
    fn out_width(&self) -> usize {
        self.layers.last().map_or(self.inputs.len(), |d| d.n_out)
    }
}

/// Resolved layout of a network's parameters.
#[derive(Debug, Clone)]
pub struct Network {
    towers: Vec<TowerPlan>,
    head: Dense,
    activation: OutputActivation,
    n_inputs: usize,
    n_params: usize,
}

/// What a sample is trained toward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Binary label for weighted cross-entropy.
    Binary { label: f64, positive_weight: f64 },
    /// Non-negative value for absolute error.
    Value(f64),
    /// Class index for softmax cross-entropy.
    Class(usize),
}

struct Trace {
    /// Per tower: the scaled input followed by each post-activation.
    activations: Vec<Vec<Vec<f64>>>,
    /// Per tower: each pre-activation.
    pre: Vec<Vec<Vec<f64>>>,
    merged: Vec<f64>,
    z: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl Network {
    pub fn from_arch(arch: &[Layer], n_inputs: usize) -> Result<Network> {
        let mut towers = Vec::new();
        let mut head = None;
        let mut offset = 0;
        for layer in arch {
            match layer {
                Layer::Tower { inputs, input_scale, widths } => {
                    if head.is_some() {
                        return Err(Error::Shape { expected: "head as last layer".into(), actual: "tower after head".into() });
                    }
                    if inputs.len() != input_scale.len() || inputs.iter().any(|&i| i >= n_inputs) || inputs.is_empty() {
                        return Err(Error::Shape {
                            expected: format!("tower inputs below {n_inputs} with one scale each"),
                            actual: format!("{} inputs, {} scales", inputs.len(), input_scale.len()),
                        });
                    }
                    let mut layers = Vec::new();
                    let mut n_in = inputs.len();
                    for &w in widths {
                        let d = Dense { offset, n_in, n_out: w };
                        offset += d.size();
                        layers.push(d);
                        n_in = w;
                    }
                    towers.push(TowerPlan { inputs: inputs.clone(), scale: input_scale.clone(), layers });
                }
                Layer::Head { outputs, activation } => {
                    if head.is_some() {
                        return Err(Error::Shape { expected: "one head".into(), actual: "two heads".into() });
                    }
                    head = Some((*outputs, *activation));
                }
            }
        }
        let (outputs, activation) = head.ok_or_else(|| Error::Shape { expected: "a head layer".into(), actual: "none".into() })?;
        if towers.is_empty() || towers.len() > 2 {
            return Err(Error::Shape { expected: "one or two towers".into(), actual: format!("{}", towers.len()) });
        }
        let width = towers[0].out_width();
        if towers.iter().any(|t| t.out_width() != width) {
            return Err(Error::Shape { expected: "towers of equal output width".into(), actual: "mismatch".into() });
        }
        let needs = if activation == OutputActivation::Softmax { outputs >= 2 } else { outputs == 1 };
        if !needs {
            return Err(Error::Shape { expected: "1 output, or ≥ 2 for softmax".into(), actual: format!("{outputs}") });
        }
        let head = Dense { offset, n_in: width, n_out: outputs };
        offset += head.size();
        Ok(Network { towers, head, activation, n_inputs, n_params: offset })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.head.n_out
    }

    pub fn activation(&self) -> OutputActivation {
        self.activation
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.towers.iter().flat_map(|t| t.layers.iter()).chain(std::iter::once(&self.head))
    }

    /// Uniform ±1/√fan_in for every weight and bias.
    pub fn init_weights(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; self.n_params];
        for d in self.layers() {
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for v in &mut w[d.offset..d.offset + d.size()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        w
    }

    fn trace(&self, w: &[f64], x: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.towers.len());
        let mut pre = Vec::with_capacity(self.towers.len());
        for t in &self.towers {
            let mut acts = vec![t.inputs.iter().zip(&t.scale).map(|(&i, s)| x[i] * s).collect::<Vec<_>>()];
            let mut pres = Vec::new();
            for d in &t.layers {
                let z = d.forward(w, acts.last().unwrap());
                acts.push(z.iter().map(|v| v.max(0.0)).collect());
                pres.push(z);
            }
            activations.push(acts);
            pre.push(pres);
        }
        let mut merged = activations[0].last().unwrap().clone();
        for acts in &activations[1..] {
            for (m, v) in merged.iter_mut().zip(acts.last().unwrap()) {
                *m *= v;
            }
        }
        let z = self.head.forward(w, &merged);
        Trace { activations, pre, merged, z }
    }

    fn output(&self, z: &[f64]) -> Vec<f64> {
        match self.activation {
            OutputActivation::Sigmoid => vec![sigmoid(z[0])],
            OutputActivation::Relu => vec![z[0].max(0.0)],
            OutputActivation::Softmax => softmax(z),
        }
    }

    fn check_len(&self, x: &[f64], w: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs {
            return Err(Error::Shape { expected: format!("{} features", self.n_inputs), actual: format!("{}", x.len()) });
        }
        if w.len() != self.n_params {
            return Err(Error::Shape { expected: format!("{} weights", self.n_params), actual: format!("{}", w.len()) });
        }
        Ok(())
    }

    pub fn forward(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x, w)?;
        Ok(self.output(&self.trace(w, x).z))
    }

    /// Distance of this sample from the nearest non-differentiable point:
    /// the smallest |pre-activation| of any rectified unit, and for a
    /// rectified head also the distance to the absolute-error kink.
    pub fn kink_distance(&self, w: &[f64], x: &[f64], target: Target) -> Result<f64> {
        self.check_len(x, w)?;
        let tr = self.trace(w, x);
        let mut d = tr.pre.iter().flatten().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()));
        if self.activation == OutputActivation::Relu {
            d = d.min(tr.z[0].abs());
            if let Target::Value(y) = target {
                d = d.min((tr.z[0] - y).abs());
            }
        }
        Ok(d)
    }

    /// Loss of one sample.
    pub fn loss(&self, w: &[f64], x: &[f64], target: Target) -> Result<f64> {
        self.check_len(x, w)?;
        let z = self.trace(w, x).z;
        Ok(loss_from_z(self.activation, &z, target))
    }

    /// Loss of one sample; its parameter gradient is added to `grad`.
    pub fn loss_and_grad(&self, w: &[f64], x: &[f64], target: Target, grad: &mut [f64]) -> Result<f64> {
        self.check_len(x, w)?;
        if grad.len() != self.n_params {
            return Err(Error::Shape { expected: format!("{} gradient slots", self.n_params), actual: format!("{}", grad.len()) });
        }
        let tr = self.trace(w, x);
        let loss = loss_from_z(self.activation, &tr.z, target);
        let dz = dloss_dz(self.activation, &tr.z, target);
        let g_merged = self.head.backward(w, &tr.merged, &dz, grad);
        for (k, t) in self.towers.iter().enumerate() {
            // d(merged)/d(tower k output) is the product of the other towers
            let mut g: Vec<f64> = g_merged.clone();
            for (j, acts) in tr.activations.iter().enumerate() {
                if j != k {
                    for (gi, v) in g.iter_mut().zip(acts.last().unwrap()) {
                        *gi *= v;
                    }
                }
            }
            for (l, d) in t.layers.iter().enumerate().rev() {
                for (gi, z) in g.iter_mut().zip(&tr.pre[k][l]) {
                    if *z <= 0.0 {
                        *gi = 0.0;
                    }
                }
                g = d.backward(w, &tr.activations[k][l], &g, grad);
            }
        }
        Ok(loss)
    }
}

impl Target {
    pub fn fits(&self, act: OutputActivation, n_outputs: usize) -> bool {
        match (act, self) {
            (OutputActivation::Sigmoid, Target::Binary { .. }) | (OutputActivation::Relu, Target::Value(_)) => true,
            (OutputActivation::Softmax, Target::Class(c)) => *c < n_outputs,
            _ => false,
        }
    }
}

fn loss_from_z(act: OutputActivation, z: &[f64], target: Target) -> f64 {
    match (act, target) {
        (OutputActivation::Sigmoid, Target::Binary { label, positive_weight }) => {
            // -[w·y·ln σ(z) + (1-y)·ln(1-σ(z))]
            positive_weight * label * softplus(-z[0]) + (1.0 - label) * softplus(z[0])
        }
        (OutputActivation::Relu, Target::Value(y)) => (z[0].max(0.0) - y).abs(),
        (OutputActivation::Softmax, Target::Class(c)) => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[c]
        }
        _ => f64::NAN,
    }
}

fn dloss_dz(act: OutputActivation, z: &[f64], target: Target) -> Vec<f64> {
    match (act, target) {
        (OutputActivation::Sigmoid, Target::Binary { label, positive_weight }) => {
            let p = sigmoid(z[0]);
            vec![positive_weight * label * (p - 1.0) + (1.0 - label) * p]
        }
        (OutputActivation::Relu, Target::Value(y)) => {
            if z[0] <= 0.0 {
                vec![0.0]
            } else {
                vec![(z[0] - y).signum()]
            }
        }
        (OutputActivation::Softmax, Target::Class(c)) => {
            let mut p = softmax(z);
            p[c] -= 1.0;
            p
        }
        _ => vec![f64::NAN; z.len()],
    }
}

impl ModelSpec {
    /// Untrained model with seeded initial weights.
    pub fn new(variant: Variant, seed: u64) -> Result<ModelSpec> {
        let arch = default_arch(variant);
        let feature_order = feature_order(variant);
        let weights = if variant.is_baseline() { Vec::new() } else { Network::from_arch(&arch, feature_order.len())?.init_weights(seed) };
        Ok(ModelSpec { variant, arch, weights, seed, feature_order })
    }

    pub fn network(&self) -> Result<Network> {
        let net = Network::from_arch(&self.arch, self.feature_order.len())?;
        if net.n_params() != self.weights.len() {
            return Err(Error::Shape {
                expected: format!("{} weights for this architecture", net.n_params()),
                actual: format!("{}", self.weights.len()),
            });
        }
        Ok(net)
    }

    /// Checks the descriptor is internally consistent.
    pub fn validate(&self) -> Result<()> {
        let expected = feature_order(self.variant);
        if self.feature_order != expected {
            return Err(Error::Shape { expected: expected.join(","), actual: self.feature_order.join(",") });
        }
        if self.variant.is_baseline() {
            if !self.arch.is_empty() || !self.weights.is_empty() {
                return Err(Error::Shape { expected: "no weights for a baseline".into(), actual: format!("{}", self.weights.len()) });
            }
            return Ok(());
        }
        self.network().map(|_| ())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ModelSpec> {
        let spec: ModelSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn feature_order(variant: Variant) -> Vec<String> {
    let names: &[&str] = if variant.is_per_timestep() { &FEATURE_NAMES } else { &SESSION_FEATURE_NAMES };
    names.iter().map(|s| s.to_string()).collect()
}

/// p for one (section, second) row; hidden seconds are never passed in.
pub fn predict_timestep(model: &ModelSpec, features: &[f64]) -> Result<f64> {
    if !model.variant.is_per_timestep() {
        return Err(Error::Validation(format!("{:?} does not predict per second", model.variant)));
    }
    if features.len() != N_FEATURES {
        return Err(Error::Shape { expected: format!("{N_FEATURES} features"), actual: format!("{}", features.len()) });
    }
    let p = match model.variant {
        Variant::Baseline1 => features[IDX_BASELINE_P1],
        Variant::Baseline2 => features[IDX_BASELINE_P1 + 1],
        Variant::Baseline3 => features[IDX_BASELINE_P1 + 2],
        _ => model.network()?.forward(&model.weights, features)?[0],
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Convenience wrapper over a full feature row.
pub fn predict_row(model: &ModelSpec, net: Option<&Network>, row: &FeatureVector) -> Result<f64> {
    match (model.variant, net) {
        (v, Some(net)) if v.is_per_timestep() && !v.is_baseline() => Ok(net.forward(&model.weights, row)?[0].clamp(0.0, 1.0)),
        _ => predict_timestep(model, row),
    }
}
