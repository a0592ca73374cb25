//! Miniature UCNet: residual 3D UNet backbone with a lesion head and a
//! grade-group head, plus the region-histogram and threshold-classifier heads.
//!
//! Backbone, per encoder level: two 3³ convolutions with a residual skip
//! (1×1 projection when the width changes), ReLU, then a stride-2 3³
//! convolution doubling the width. The decoder upsamples (nearest), concatenates
//! the encoder skip and runs the same residual block.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use ucfed_autograd::{AutogradError, Dense, Element, Graph, Var};

use crate::supervision::{check_class_count, SupervisionError, SupervisionMatrix, SIGNAL_LESION};

pub const REGION_WEIGHT: &str = "region.weight";
pub const REGION_BIAS: &str = "region.bias";
pub const REGION_BIAS_INIT: f64 = -0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("axis {axis} extent {extent} is not divisible by {factor}")]
    Indivisible { axis: char, extent: usize, factor: usize },
    #[error("image must be {expected}×X×Y×Z, got {found:?}")]
    InputShape { expected: usize, found: Vec<usize> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Classes(#[from] SupervisionError),
    #[error("no supervised region with a nonempty mask")]
    NoSupervisedRegion,
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error(transparent)]
    Graph(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UCNetConfig {
    pub in_channels: usize,
    /// Number of grade classes K.
    pub classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl Default for UCNetConfig {
    fn default() -> Self {
        UCNetConfig {
            in_channels: 3,
            classes: 2,
            levels: 2,
            base_channels: 8,
            kernel: 3,
            seed: 0,
        }
    }
}

impl UCNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_class_count(self.classes)?;
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.levels == 0 {
            return Err(ModelError::Config("levels must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::Config(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Name, shape and fan-in of every convolutional parameter, in a fixed order.
    fn conv_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let k = self.kernel;
        let mut specs = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, ks: usize, bias: bool| {
            specs.push((format!("{name}.weight"), vec![c_out, c_in, ks, ks, ks], c_in * ks * ks * ks));
            if bias {
                specs.push((format!("{name}.bias"), vec![c_out], c_in * ks * ks * ks));
            }
        };
        let block = |conv: &mut dyn FnMut(String, usize, usize, usize, bool), prefix: &str, c_in: usize, c_out: usize| {
            conv(format!("{prefix}.conv1"), c_out, c_in, k, true);
            conv(format!("{prefix}.conv2"), c_out, c_out, k, true);
            if c_in != c_out {
                conv(format!("{prefix}.skip"), c_out, c_in, 1, false);
            }
        };
        let mut c_in = self.in_channels;
        for l in 0..self.levels {
            block(&mut conv, &format!("enc{l}"), c_in, self.width(l));
            conv(format!("down{l}"), self.width(l + 1), self.width(l), k, true);
            c_in = self.width(l + 1);
        }
        block(&mut conv, "mid", c_in, c_in);
        for l in (0..self.levels).rev() {
            block(&mut conv, &format!("dec{l}"), self.width(l + 1) + self.width(l), self.width(l));
        }
        conv("head.seg".into(), 1, self.width(0), 1, true);
        conv("head.gg".into(), self.classes, self.width(0), 1, true);
        specs
    }
}

/// Named model tensors. `region.weight` is stored but frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: UCNetConfig,
    tensors: BTreeMap<String, Dense<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Seeded uniform fan-in initialisation; biases start at zero.
    ///
    /// Values are drawn in f64 and cast, so f32 and f64 models built from the
    /// same config agree up to rounding.
    pub fn build(config: UCNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in config.conv_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
            };
            tensors.insert(name, Dense::from_vec(shape, data));
        }
        let k = config.classes;
        let identity: Vec<T> = (0..k * k)
            .map(|i| if i / k == i % k { T::one() } else { T::zero() })
            .collect();
        tensors.insert(REGION_WEIGHT.into(), Dense::from_vec(vec![k, k], identity));
        tensors.insert(REGION_BIAS.into(), Dense::filled(vec![k], T::from_f64(REGION_BIAS_INIT)));
        Ok(ModelParams { config, tensors })
    }

    /// Rebuilds a model from a config and its trainable tensors.
    pub fn from_trainable(config: UCNetConfig, trainable: BTreeMap<String, Dense<T>>) -> Result<Self, ModelError> {
        let mut model = Self::build(config)?;
        for name in model.trainable_names() {
            let t = trainable
                .get(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if t.shape() != model.tensors[&name].shape() {
                return Err(ModelError::Config(format!(
                    "{name}: shape {:?} expected {:?}",
                    t.shape(),
                    model.tensors[&name].shape()
                )));
            }
            model.tensors.insert(name, t.clone());
        }
        Ok(model)
    }

    pub fn config(&self) -> &UCNetConfig {
        &self.config
    }

    pub fn is_frozen(name: &str) -> bool {
        name == REGION_WEIGHT
    }

    pub fn get(&self, name: &str) -> Option<&Dense<T>> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Dense<T>> {
        &self.tensors
    }

    /// Sorted names of the parameters an optimizer may update.
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !Self::is_frozen(n))
            .cloned()
            .collect()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Dense<T>)> {
        self.tensors.iter().filter(|(n, _)| !Self::is_frozen(n))
    }

    /// Replaces a trainable tensor. Frozen tensors cannot be replaced.
    pub fn set(&mut self, name: &str, value: Dense<T>) -> Result<(), ModelError> {
        if Self::is_frozen(name) {
            return Err(ModelError::Config(format!("{name} is frozen")));
        }
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(ModelError::Config(format!(
                "{name}: shape {:?} expected {:?}",
                value.shape(),
                slot.shape()
            ))),
            None => Err(ModelError::MissingParameter(name.into())),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Zeroes both output heads: lesion map becomes 0.5, grade map 1/K.
    pub fn zero_heads(&mut self) {
        for name in ["head.seg.weight", "head.seg.bias", "head.gg.weight", "head.gg.bias"] {
            let t = self.tensors.get_mut(name).expect("head parameters always exist");
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Places every tensor on the tape: trainable ones as params, frozen as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if Self::is_frozen(n) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Inference without keeping the tape around.
    pub fn predict(&self, image: &Dense<T>) -> Result<(Dense<T>, Dense<T>), ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.constant(image.clone());
        let out = forward(&mut g, &bound, &self.config, x)?;
        Ok((g.value(out.seg).clone(), g.value(out.gg).clone()))
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs {
    /// `1×X×Y×Z` lesion probability.
    pub seg: Var,
    /// `K×X×Y×Z` grade-group membership, softmax over K.
    pub gg: Var,
}

fn conv<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Var, ModelError> {
    let y = g.conv3d(x, p.var(&format!("{name}.weight"))?, stride, padding)?;
    if bias {
        Ok(g.add_channel_bias(y, p.var(&format!("{name}.bias"))?)?)
    } else {
        Ok(y)
    }
}

fn res_block<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    pad: usize,
) -> Result<Var, ModelError> {
    let a = conv(g, p, &format!("{prefix}.conv1"), x, 1, pad, true)?;
    let a = g.relu(a);
    let b = conv(g, p, &format!("{prefix}.conv2"), a, 1, pad, true)?;
    let skip_name = format!("{prefix}.skip");
    let skip = if p.vars.contains_key(&format!("{skip_name}.weight")) {
        conv(g, p, &skip_name, x, 1, 0, false)?
    } else {
        x
    };
    let sum = g.add(b, skip)?;
    Ok(g.relu(sum))
}

/// Full forward pass. Spatial extents must be divisible by `2^levels`.
pub fn forward<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &UCNetConfig,
    image: Var,
) -> Result<ModelOutputs, ModelError> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 4 || shape[0] != config.in_channels {
        return Err(ModelError::InputShape {
            expected: config.in_channels,
            found: shape,
        });
    }
    let factor = 1usize << config.levels;
    for (axis, &extent) in ['X', 'Y', 'Z'].iter().zip(&shape[1..]) {
        if extent % factor != 0 {
            return Err(ModelError::Indivisible {
                axis: *axis,
                extent,
                factor,
            });
        }
    }
    let pad = config.kernel / 2;
    let mut skips = Vec::with_capacity(config.levels);
    let mut h = image;
    for l in 0..config.levels {
        h = res_block(g, p, &format!("enc{l}"), h, pad)?;
        skips.push(h);
        let d = conv(g, p, &format!("down{l}"), h, 2, pad, true)?;
        h = g.relu(d);
    }
    h = res_block(g, p, "mid", h, pad)?;
    for l in (0..config.levels).rev() {
        let up = g.upsample2(h)?;
        let cat = g.concat(up, skips[l])?;
        h = res_block(g, p, &format!("dec{l}"), cat, pad)?;
    }
    let seg_logit = conv(g, p, "head.seg", h, 1, 0, true)?;
    let t = g.tanh(seg_logit);
    // (tanh + 1) / 2 keeps the lesion map in (0, 1) for the BCE term
    let seg = g.affine(t, 0.5, 0.5);
    let gg_logit = conv(g, p, "head.gg", h, 1, 0, true)?;
    let gg = g.softmax_channels(gg_logit)?;
    Ok(ModelOutputs { seg, gg })
}

/// Voxel indices selected by each region mask of an `R×X×Y×Z` stack.
pub fn region_voxels(masks: &Dense<u8>) -> Vec<Vec<usize>> {
    let r = masks.shape()[0];
    let n = masks.len() / r.max(1);
    (0..r)
        .map(|i| {
            masks.data()[i * n..(i + 1) * n]
                .iter()
                .enumerate()
                .filter_map(|(v, &m)| (m != 0).then_some(v))
                .collect()
        })
        .collect()
}

/// Approximate per-region grade histograms ĥ: the mean grade-map vector over
/// each supervised region's voxels.
#[derive(Debug, Clone)]
pub struct RegionHistograms {
    /// One `[K]` node per region in `region_ids` order.
    pub rows: Vec<Var>,
    pub region_ids: Vec<usize>,
    /// Supervised regions dropped because their mask is empty.
    pub skipped: Vec<usize>,
}

impl RegionHistograms {
    pub fn row_for(&self, region: usize) -> Option<Var> {
        self.region_ids
            .iter()
            .position(|&r| r == region)
            .map(|i| self.rows[i])
    }

    pub fn values<T: Element>(&self, g: &Graph<T>) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|&v| g.value(v).data().iter().map(|x| Element::to_f64(*x)).collect())
            .collect()
    }
}

/// Histograms for every region with supervision signal ≥ 1.
pub fn region_histograms<T: Element>(
    g: &mut Graph<T>,
    gg: Var,
    voxels: &[Vec<usize>],
    sup: &SupervisionMatrix,
) -> Result<RegionHistograms, ModelError> {
    let n = g.value(gg).len() / g.shape(gg)[0];
    let mut out = RegionHistograms {
        rows: Vec::new(),
        region_ids: Vec::new(),
        skipped: Vec::new(),
    };
    for (r, row) in sup.rows().iter().enumerate() {
        if row.signal < SIGNAL_LESION {
            continue;
        }
        if voxels[r].is_empty() {
            out.skipped.push(r);
            continue;
        }
        out.rows.push(g.masked_mean_indices(gg, n, voxels[r].clone())?);
        out.region_ids.push(r);
    }
    if out.rows.is_empty() {
        return Err(ModelError::NoSupervisedRegion);
    }
    Ok(out)
}

/// ẑ = ReLU(W ĥ + b) per region, with W the frozen identity.
pub fn region_classify<T: Element>(
    g: &mut Graph<T>,
    hist: &RegionHistograms,
    p: &BoundParams,
) -> Result<Vec<Var>, ModelError> {
    let w = p.var(REGION_WEIGHT)?;
    let b = p.var(REGION_BIAS)?;
    hist.rows
        .iter()
        .map(|&h| {
            let lin = g.matvec(w, h)?;
            let z = g.add(lin, b)?;
            Ok(g.relu(z))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> UCNetConfig {
        UCNetConfig {
            seed: 11,
            ..UCNetConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ModelParams::<f32>::build(cfg()).unwrap();
        let b = ModelParams::<f32>::build(cfg()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::build(UCNetConfig { seed: 12, ..cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_shapes_and_region_init() {
        let m = ModelParams::<f64>::build(cfg()).unwrap();
        assert_eq!(m.get("head.gg.weight").unwrap().shape(), &[2, 8, 1, 1, 1]);
        assert_eq!(m.get("head.seg.weight").unwrap().shape(), &[1, 8, 1, 1, 1]);
        assert_eq!(m.get(REGION_WEIGHT).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.get(REGION_BIAS).unwrap().data(), &[-0.5, -0.5]);
        assert!(!m.trainable_names().contains(&REGION_WEIGHT.to_string()));
        assert!(m.trainable_names().contains(&REGION_BIAS.to_string()));
    }

    #[test]
    fn frozen_weight_cannot_be_set() {
        let mut m = ModelParams::<f64>::build(cfg()).unwrap();
        assert!(m.set(REGION_WEIGHT, Dense::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn rejects_bad_class_count() {
        assert!(ModelParams::<f32>::build(UCNetConfig { classes: 7, ..cfg() }).is_err());
        assert!(ModelParams::<f32>::build(UCNetConfig { classes: 1, ..cfg() }).is_err());
    }

    #[test]
    fn output_shapes_follow_input() {
        let m = ModelParams::<f32>::build(UCNetConfig { base_channels: 4, ..cfg() }).unwrap();
        let img = Dense::from_vec(vec![3, 16, 16, 8], (0..3 * 2048).map(|i| ((i % 7) as f32) * 0.1).collect());
        let (seg, gg) = m.predict(&img).unwrap();
        assert_eq!(seg.shape(), &[1, 16, 16, 8]);
        assert_eq!(gg.shape(), &[2, 16, 16, 8]);
        assert!(seg.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for v in 0..2048 {
            assert!((gg.data()[v] + gg.data()[2048 + v] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_extent_names_axis() {
        let m = ModelParams::<f32>::build(UCNetConfig { base_channels: 2, ..cfg() }).unwrap();
        let img = Dense::zeros(vec![3, 8, 8, 6]);
        match m.predict(&img) {
            Err(ModelError::Indivisible { axis: 'Z', extent: 6, factor: 4 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_heads_give_constant_maps() {
        let mut m = ModelParams::<f64>::build(UCNetConfig { base_channels: 2, classes: 4, ..cfg() }).unwrap();
        m.zero_heads();
        let img = Dense::from_vec(vec![3, 4, 4, 4], (0..192).map(|i| (i as f64).sin()).collect());
        let (seg, gg) = m.predict(&img).unwrap();
        assert!(seg.data().iter().all(|&v| v == 0.5));
        assert!(gg.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn region_classifier_hand_values() {
        let m = ModelParams::<f64>::build(cfg()).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let gg = g.constant(Dense::from_vec(vec![2, 2, 1, 1], vec![0.2, 1.0, 0.8, 0.0]));
        let sup = SupervisionMatrix::from_i32(&[1, 2, 1, 0]).unwrap();
        let masks = Dense::from_vec(vec![2, 2, 1, 1], vec![1, 0, 0, 1]);
        let hist = region_histograms(&mut g, gg, &region_voxels(&masks), &sup).unwrap();
        let z = region_classify(&mut g, &hist, &p).unwrap();
        let z0 = g.value(z[0]).data();
        assert_eq!(z0[0], 0.0);
        assert!((z0[1] - 0.3).abs() < 1e-15);
        let z1 = g.value(z[1]).data();
        assert!(z1[0] > 0.0 && z1[1] == 0.0);
    }

    #[test]
    fn zero_bias_gives_identity() {
        let mut m = ModelParams::<f64>::build(cfg()).unwrap();
        m.set(REGION_BIAS, Dense::zeros(vec![2])).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let gg = g.constant(Dense::from_vec(vec![2, 2, 1, 1], vec![0.2, 0.4, 0.8, 0.6]));
        let sup = SupervisionMatrix::from_i32(&[2, 0]).unwrap();
        let masks = Dense::from_vec(vec![1, 2, 1, 1], vec![1, 1]);
        let hist = region_histograms(&mut g, gg, &region_voxels(&masks), &sup).unwrap();
        let z = region_classify(&mut g, &hist, &p).unwrap();
        assert_eq!(g.value(z[0]).data(), g.value(hist.rows[0]).data());
    }

    #[test]
    fn empty_supervised_mask_is_skipped() {
        let mut g = Graph::<f64>::new();
        let gg = g.constant(Dense::filled(vec![2, 2, 1, 1], 0.5));
        let sup = SupervisionMatrix::from_i32(&[1, 2, 2, 0, 0, 0]).unwrap();
        let masks = Dense::from_vec(vec![3, 2, 1, 1], vec![0, 0, 1, 1, 1, 1]);
        let hist = region_histograms(&mut g, gg, &region_voxels(&masks), &sup).unwrap();
        assert_eq!(hist.skipped, vec![0]);
        assert_eq!(hist.region_ids, vec![1]);
        let only_empty = SupervisionMatrix::from_i32(&[1, 2, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            region_histograms(&mut g, gg, &region_voxels(&masks), &only_empty),
            Err(ModelError::NoSupervisedRegion)
        ));
    }
}
