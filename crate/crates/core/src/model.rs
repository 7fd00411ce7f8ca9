//! Shared encoder–decoder backbone with class-specific head generators.
//!
//! The backbone maps an image to a feature map `F` of shape `(d_f, H, W)` and
//! a global feature `E(X)`, the spatial mean of the deepest encoder stage.
//! Each class `k` owns an embedding `ω_k` and a two-layer generator `MLP_k`
//! that emits the weights and bias of a 1×1 convolution over `F`:
//! `θ_k = MLP_k([E(X); ω_k])`, `p_k = sigmoid(θ_k[..d_f]·F + θ_k[d_f])`.
//!
//! Parameter names carry the partition: `backbone.*` is shared,
//! `head.<class>.*` belongs to one class.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ClassCatalog, ClassId, Image, ProbGrid};
use crate::error::{Error, Result};
use crate::nn;

/// Logits are clamped to this magnitude before the sigmoid so predicted
/// probabilities stay strictly inside (0, 1).
const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Channel width of each encoder stage; the last stage is the bottleneck
    /// and its width is the global-feature dimension `d_E`.
    pub encoder_widths: Vec<usize>,
    /// Decoder output channels `d_f`.
    pub feature_channels: usize,
    /// Embedding dimension `d_ω`, also the generator's hidden width.
    pub embedding_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            encoder_widths: vec![8, 16, 32],
            feature_channels: 16,
            embedding_dim: 16,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() < 2 {
            return Err(Error::Contract(
                "architecture needs at least two stages".into(),
            ));
        }
        if self.encoder_widths.iter().any(|&w| w == 0)
            || self.feature_channels == 0
            || self.embedding_dim == 0
        {
            return Err(Error::Contract(
                "architecture dimensions must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn global_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    /// Length of `θ_k`: one weight per feature channel plus a bias.
    pub fn head_len(&self) -> usize {
        self.feature_channels + 1
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }

    fn decoder_out(&self, stage: usize) -> usize {
        if stage == 0 {
            self.feature_channels
        } else {
            self.encoder_widths[stage]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PartitionLabel {
    Shared,
    Class(ClassId),
}

impl fmt::Display for PartitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionLabel::Shared => f.write_str("shared"),
            PartitionLabel::Class(k) => write!(f, "class:{k}"),
        }
    }
}

impl std::str::FromStr for PartitionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "shared" {
            return Ok(PartitionLabel::Shared);
        }
        s.strip_prefix("class:")
            .and_then(|k| k.parse::<u16>().ok())
            .map(|k| PartitionLabel::Class(ClassId(k)))
            .ok_or_else(|| Error::Structural(format!("bad partition label {s:?}")))
    }
}

pub fn enc_conv_name(stage: usize, conv: usize, part: &str) -> String {
    format!("backbone.enc{stage}.conv{conv}.{part}")
}

pub fn dec_conv_name(stage: usize, part: &str) -> String {
    format!("backbone.dec{stage}.conv.{part}")
}

pub fn head_name(class: ClassId, part: &str) -> String {
    format!("head.{class}.{part}")
}

pub const HEAD_PARTS: [&str; 5] = [
    "embedding",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Partition label implied by a parameter name.
pub fn label_of(name: &str) -> Result<PartitionLabel> {
    if name.starts_with("backbone.") {
        return Ok(PartitionLabel::Shared);
    }
    name.strip_prefix("head.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|k| k.parse::<u16>().ok())
        .map(|k| PartitionLabel::Class(ClassId(k)))
        .ok_or_else(|| Error::Structural(format!("parameter {name:?} has no partition")))
}

/// Expected parameter names and shapes for an architecture and catalog.
pub fn expected_shapes(arch: &ArchConfig, catalog: &ClassCatalog) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    let mut c_in = 1;
    for (s, &w) in arch.encoder_widths.iter().enumerate() {
        out.insert(enc_conv_name(s, 1, "weight"), vec![w, c_in * 9]);
        out.insert(enc_conv_name(s, 1, "bias"), vec![w]);
        out.insert(enc_conv_name(s, 2, "weight"), vec![w, w * 9]);
        out.insert(enc_conv_name(s, 2, "bias"), vec![w]);
        c_in = w;
    }
    for s in 0..arch.stages() - 1 {
        let below = if s + 1 == arch.stages() - 1 {
            arch.encoder_widths[s + 1]
        } else {
            arch.decoder_out(s + 1)
        };
        let cat = below + arch.encoder_widths[s];
        let out_c = arch.decoder_out(s);
        out.insert(dec_conv_name(s, "weight"), vec![out_c, cat * 9]);
        out.insert(dec_conv_name(s, "bias"), vec![out_c]);
    }
    let z = arch.global_dim() + arch.embedding_dim;
    let hid = arch.embedding_dim;
    for k in catalog.ids() {
        out.insert(head_name(k, "embedding"), vec![arch.embedding_dim]);
        out.insert(head_name(k, "fc1.weight"), vec![hid, z]);
        out.insert(head_name(k, "fc1.bias"), vec![hid]);
        out.insert(head_name(k, "fc2.weight"), vec![arch.head_len(), hid]);
        out.insert(head_name(k, "fc2.bias"), vec![arch.head_len()]);
    }
    out
}

/// Named parameter store. Every name belongs to exactly one partition,
/// recoverable with [`label_of`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub catalog: ClassCatalog,
    tensors: BTreeMap<String, Tensor>,
}

fn derived_rng(tag: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(tag.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Deterministic unit-norm vector derived from `(seed, name)`.
pub fn pseudo_embedding(seed: u64, name: &str, dim: usize) -> Vec<f64> {
    let mut rng = derived_rng(&format!("embedding:{seed}:{name}"));
    let mut v = normal_vec(&mut rng, dim, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Fresh parameters: fan-in scaled normal weights, zero biases, pseudo
/// embeddings hashed from class names.
pub fn init_model(seed: u64, arch: &ArchConfig, catalog: &ClassCatalog) -> Result<ModelParams> {
    arch.validate()?;
    let shapes = expected_shapes(arch, catalog);
    let mut tensors = BTreeMap::new();
    let mut backbone_rng = derived_rng(&format!("backbone:{seed}"));
    for (name, shape) in shapes.iter().filter(|(n, _)| n.starts_with("backbone.")) {
        let mut t = Tensor::zeros(shape.clone());
        if name.ends_with(".weight") {
            let fan_in = shape[1] as f64;
            t.data = normal_vec(&mut backbone_rng, t.len(), (2.0 / fan_in).sqrt());
        }
        tensors.insert(name.clone(), t);
    }
    for info in catalog.classes() {
        let k = info.id;
        let mut rng = derived_rng(&format!("head:{seed}:{k}"));
        for part in HEAD_PARTS {
            let name = head_name(k, part);
            let shape = shapes[&name].clone();
            let mut t = Tensor::zeros(shape.clone());
            match part {
                "embedding" => t.data = pseudo_embedding(seed, &info.name, arch.embedding_dim),
                "fc1.weight" | "fc2.weight" => {
                    t.data = normal_vec(&mut rng, t.len(), (1.0 / shape[1] as f64).sqrt())
                }
                _ => {}
            }
            tensors.insert(name, t);
        }
    }
    Ok(ModelParams {
        arch: arch.clone(),
        catalog: catalog.clone(),
        tensors,
    })
}

impl ModelParams {
    /// Assembles parameters from named tensors, checking names, shapes and
    /// finiteness against the architecture.
    pub fn from_tensors(
        arch: ArchConfig,
        catalog: ClassCatalog,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        arch.validate()?;
        let expected = expected_shapes(&arch, &catalog);
        let mut problems = Vec::new();
        for (name, t) in &tensors {
            match expected.get(name) {
                None => problems.push(format!("unknown tensor {name}")),
                Some(shape)
                    if *shape != t.shape || t.data.len() != shape.iter().product::<usize>() =>
                {
                    problems.push(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    ))
                }
                Some(_) => {}
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                problems.push(format!("tensor {name} has non-finite values"));
            }
        }
        let mut missing_classes = BTreeSet::new();
        for name in expected.keys() {
            if !tensors.contains_key(name) {
                match label_of(name)? {
                    PartitionLabel::Class(k) => {
                        missing_classes.insert(k);
                    }
                    PartitionLabel::Shared => {
                        problems.push(format!("missing shared tensor {name}"))
                    }
                }
            }
        }
        for k in missing_classes {
            let cname = catalog.name_of(k).unwrap_or("?");
            problems.push(format!("class {k} ({cname}) is missing head tensors"));
        }
        if !problems.is_empty() {
            return Err(Error::Structural(problems.join("; ")));
        }
        Ok(ModelParams {
            arch,
            catalog,
            tensors,
        })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn shared_names(&self) -> BTreeSet<String> {
        self.tensors
            .keys()
            .filter(|n| n.starts_with("backbone."))
            .cloned()
            .collect()
    }

    pub fn class_names(&self, class: ClassId) -> BTreeSet<String> {
        HEAD_PARTS.iter().map(|p| head_name(class, p)).collect()
    }

    /// Content digest over names and the exact bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_class(&self, k: ClassId) -> Result<()> {
        if self.catalog.contains(k) {
            Ok(())
        } else {
            Err(Error::Domain(format!("unknown class {k}")))
        }
    }
}

/// Trainable and frozen parameter names; together they cover every name
/// exactly once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl Partition {
    pub fn all_trainable(params: &ModelParams) -> Self {
        Partition {
            trainable: params.names().map(str::to_string).collect(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn is_total_for(&self, params: &ModelParams) -> bool {
        self.trainable.is_disjoint(&self.frozen)
            && self.trainable.len() + self.frozen.len() == params.tensors.len()
            && params
                .names()
                .all(|n| self.trainable.contains(n) || self.frozen.contains(n))
    }

    pub fn trains_shared(&self) -> bool {
        self.trainable.iter().any(|n| n.starts_with("backbone."))
    }

    /// Classes that own at least one trainable tensor.
    pub fn trainable_classes(&self) -> BTreeSet<ClassId> {
        self.trainable
            .iter()
            .filter_map(|n| match label_of(n) {
                Ok(PartitionLabel::Class(k)) => Some(k),
                _ => None,
            })
            .collect()
    }

    /// Moves the given names from trainable to frozen.
    pub fn freeze(&mut self, names: impl IntoIterator<Item = String>) {
        for n in names {
            if self.trainable.remove(&n) {
                self.frozen.insert(n);
            }
        }
    }
}

/// Freeze policy: only the class-specific parts of `revised_classes` train;
/// the shared backbone and every other class stay fixed.
pub fn parameter_partition(
    params: &ModelParams,
    revised_classes: &BTreeSet<ClassId>,
) -> Result<Partition> {
    for &k in revised_classes {
        params.check_class(k)?;
    }
    let mut p = Partition::default();
    for name in params.names() {
        let trainable =
            matches!(label_of(name)?, PartitionLabel::Class(k) if revised_classes.contains(&k));
        if trainable {
            p.trainable.insert(name.to_string());
        } else {
            p.frozen.insert(name.to_string());
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeatures {
    /// `(d_f, H, W)` channel-major.
    pub feature_map: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `E(X)`, length `d_E`.
    pub global: Vec<f64>,
}

impl EncodedFeatures {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// 1×1 convolution weights followed by the bias.
    pub theta: Vec<f64>,
}

struct ConvCache {
    weight: String,
    bias: String,
    cols: Vec<f64>,
    out: Vec<f64>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

pub(crate) struct BackboneCache {
    enc: Vec<[ConvCache; 2]>,
    dec: Vec<ConvCache>,
    skip_channels: Vec<usize>,
}

fn conv_relu(
    params: &ModelParams,
    input: &[f64],
    weight: String,
    bias: String,
    c_in: usize,
    h: usize,
    w: usize,
) -> ConvCache {
    let wt = params.tensor(&weight);
    let c_out = wt.shape[0];
    let (mut out, cols) = nn::conv3x3_forward(
        input,
        &wt.data,
        &params.tensor(&bias).data,
        c_in,
        c_out,
        h,
        w,
    );
    nn::relu_inplace(&mut out);
    ConvCache {
        weight,
        bias,
        cols,
        out,
        c_in,
        c_out,
        h,
        w,
    }
}

fn check_image(params: &ModelParams, image: &Image) -> Result<()> {
    let m = params.arch.size_multiple();
    let (h, w) = image.dims();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not a positive multiple of {m}"
        )));
    }
    Ok(())
}

/// Runs the backbone, keeping the intermediates needed for backprop.
pub(crate) fn backbone_forward(
    params: &ModelParams,
    image: &Image,
) -> Result<(EncodedFeatures, BackboneCache)> {
    check_image(params, image)?;
    let arch = &params.arch;
    let (mut h, mut w) = image.dims();
    let mut cur: Vec<f64> = image.as_slice().iter().map(|&v| v as f64).collect();
    let mut c = 1;
    let mut enc = Vec::with_capacity(arch.stages());
    for s in 0..arch.stages() {
        if s > 0 {
            cur = nn::avg_pool2(&cur, c, h, w);
            h /= 2;
            w /= 2;
        }
        let a = conv_relu(
            params,
            &cur,
            enc_conv_name(s, 1, "weight"),
            enc_conv_name(s, 1, "bias"),
            c,
            h,
            w,
        );
        let b = conv_relu(
            params,
            &a.out,
            enc_conv_name(s, 2, "weight"),
            enc_conv_name(s, 2, "bias"),
            a.c_out,
            h,
            w,
        );
        c = b.c_out;
        cur = b.out.clone();
        enc.push([a, b]);
    }
    let hw = (h * w) as f64;
    let global: Vec<f64> = cur
        .chunks(h * w)
        .map(|ch| ch.iter().sum::<f64>() / hw)
        .collect();

    let mut dec: Vec<ConvCache> = Vec::with_capacity(arch.stages() - 1);
    for s in (0..arch.stages() - 1).rev() {
        let up = nn::upsample2(&cur, c, h, w);
        h *= 2;
        w *= 2;
        let skip = &enc[s][1];
        let mut cat = up;
        cat.extend_from_slice(&skip.out);
        let d = conv_relu(
            params,
            &cat,
            dec_conv_name(s, "weight"),
            dec_conv_name(s, "bias"),
            c + skip.c_out,
            h,
            w,
        );
        c = d.c_out;
        cur = d.out.clone();
        dec.push(d);
    }
    let features = EncodedFeatures {
        feature_map: cur,
        channels: c,
        height: h,
        width: w,
        global,
    };
    let skip_channels = enc.iter().map(|e| e[1].c_out).collect();
    Ok((
        features,
        BackboneCache {
            enc,
            dec,
            skip_channels,
        },
    ))
}

/// Accumulated parameter gradients by name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

fn add_grad(grads: &mut Gradients, name: &str, g: Vec<f64>) {
    match grads.get_mut(name) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(name.to_string(), g);
        }
    }
}

fn conv_backward_into(
    cache: &ConvCache,
    mut grad_out: Vec<f64>,
    params: &ModelParams,
    grads: &mut Gradients,
    need_input: bool,
) -> Option<Vec<f64>> {
    nn::relu_backward_inplace(&mut grad_out, &cache.out);
    let g = nn::conv3x3_backward(
        &grad_out,
        &cache.cols,
        &params.tensor(&cache.weight).data,
        cache.c_in,
        cache.c_out,
        cache.h,
        cache.w,
        need_input,
    );
    add_grad(grads, &cache.weight, g.weight);
    add_grad(grads, &cache.bias, g.bias);
    g.input
}

/// Backpropagates gradients on `F` and `E(X)` into every backbone tensor.
pub(crate) fn backbone_backward(
    params: &ModelParams,
    cache: BackboneCache,
    grad_features: Vec<f64>,
    grad_global: &[f64],
    grads: &mut Gradients,
) {
    let stages = params.arch.stages();
    let mut skip_grads: Vec<Option<Vec<f64>>> = (0..stages).map(|_| None).collect();
    let mut cur = grad_features;
    // Decoder caches are stored deepest first; walk them shallowest first.
    for (s, d) in cache.dec.iter().rev().enumerate() {
        let gcat = conv_backward_into(d, cur, params, grads, true).expect("input grad requested");
        let skip_c = cache.skip_channels[s];
        let up_c = d.c_in - skip_c;
        let hw = d.h * d.w;
        let (gup, gskip) = gcat.split_at(up_c * hw);
        skip_grads[s] = Some(gskip.to_vec());
        cur = nn::upsample2_backward(gup, up_c, d.h / 2, d.w / 2);
    }
    // `cur` is now the gradient on the bottleneck output.
    let bottleneck = &cache.enc[stages - 1][1];
    let hw = (bottleneck.h * bottleneck.w) as f64;
    for (ch, &g) in cur.chunks_mut(bottleneck.h * bottleneck.w).zip(grad_global) {
        ch.iter_mut().for_each(|v| *v += g / hw);
    }
    let mut carry = Some(cur);
    for s in (0..stages).rev() {
        let [a, b] = &cache.enc[s];
        let mut gout = carry.take().unwrap_or_else(|| vec![0.0; b.out.len()]);
        if let Some(g) = skip_grads[s].take() {
            gout.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
        }
        let ga = conv_backward_into(b, gout, params, grads, true).expect("input grad requested");
        let gin = conv_backward_into(a, ga, params, grads, s > 0);
        if let Some(gin) = gin {
            carry = Some(nn::avg_pool2_backward(&gin, a.c_in, a.h * 2, a.w * 2));
        }
    }
}

/// Backbone forward pass: `F` at input resolution and `E(X)`.
pub fn encode(params: &ModelParams, image: &Image) -> Result<EncodedFeatures> {
    backbone_forward(params, image).map(|(f, _)| f)
}

pub(crate) struct HeadCache {
    z: Vec<f64>,
    hidden: Vec<f64>,
}

pub(crate) fn head_forward(
    params: &ModelParams,
    global: &[f64],
    k: ClassId,
) -> Result<(HeadParams, HeadCache)> {
    params.check_class(k)?;
    if global.len() != params.arch.global_dim() {
        return Err(Error::Shape(format!(
            "global feature has length {}, expected {}",
            global.len(),
            params.arch.global_dim()
        )));
    }
    let mut z = global.to_vec();
    z.extend_from_slice(&params.tensor(&head_name(k, "embedding")).data);
    let mut hidden = nn::affine(
        &params.tensor(&head_name(k, "fc1.weight")).data,
        &params.tensor(&head_name(k, "fc1.bias")).data,
        &z,
    );
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let theta = nn::affine(
        &params.tensor(&head_name(k, "fc2.weight")).data,
        &params.tensor(&head_name(k, "fc2.bias")).data,
        &hidden,
    );
    Ok((HeadParams { theta }, HeadCache { z, hidden }))
}

/// `θ_k = MLP_k([E(X); ω_k])`.
pub fn generate_head_params(
    params: &ModelParams,
    global_feature: &[f64],
    k: ClassId,
) -> Result<HeadParams> {
    head_forward(params, global_feature, k).map(|(h, _)| h)
}

/// Per-pixel logits of the generated 1×1 convolution over `F`.
pub fn head_logits(head: &HeadParams, features: &EncodedFeatures) -> Vec<f64> {
    let hw = features.pixels();
    let d = features.channels;
    let mut out = vec![head.theta[d]; hw];
    for (c, plane) in features.feature_map.chunks(hw).enumerate() {
        let t = head.theta[c];
        out.iter_mut().zip(plane).for_each(|(o, f)| *o += t * f);
    }
    out
}

/// Backward through the 1×1 head and its generator. Accumulates parameter
/// gradients for class `k` when `train_head` is set, adds into
/// `grad_features` / `grad_global` when those are provided.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward(
    params: &ModelParams,
    k: ClassId,
    head: &HeadParams,
    cache: &HeadCache,
    features: &EncodedFeatures,
    grad_logits: &[f64],
    train_head: bool,
    grads: &mut Gradients,
    grad_features: Option<&mut [f64]>,
    grad_global: Option<&mut [f64]>,
) {
    let hw = features.pixels();
    let d = features.channels;
    let mut gtheta = vec![0.0; d + 1];
    for (c, plane) in features.feature_map.chunks(hw).enumerate() {
        gtheta[c] = plane.iter().zip(grad_logits).map(|(f, g)| f * g).sum();
    }
    gtheta[d] = grad_logits.iter().sum();
    if let Some(gf) = grad_features {
        for (c, plane) in gf.chunks_mut(hw).enumerate() {
            let t = head.theta[c];
            plane
                .iter_mut()
                .zip(grad_logits)
                .for_each(|(p, g)| *p += t * g);
        }
    }
    if !train_head && grad_global.is_none() {
        return;
    }
    let w2 = &params.tensor(&head_name(k, "fc2.weight")).data;
    let w1 = &params.tensor(&head_name(k, "fc1.weight")).data;
    let n_hidden = cache.hidden.len();
    let n_z = cache.z.len();
    let mut gpre = vec![0.0; n_hidden];
    for (i, gp) in gpre.iter_mut().enumerate() {
        let gh: f64 = (0..d + 1).map(|o| w2[o * n_hidden + i] * gtheta[o]).sum();
        *gp = gh * (1.0 - cache.hidden[i] * cache.hidden[i]);
    }
    let mut gz = vec![0.0; n_z];
    for (i, &gp) in gpre.iter().enumerate() {
        for (j, g) in gz.iter_mut().enumerate() {
            *g += w1[i * n_z + j] * gp;
        }
    }
    if train_head {
        let mut gw2 = vec![0.0; (d + 1) * n_hidden];
        for o in 0..d + 1 {
            for i in 0..n_hidden {
                gw2[o * n_hidden + i] = gtheta[o] * cache.hidden[i];
            }
        }
        let mut gw1 = vec![0.0; n_hidden * n_z];
        for i in 0..n_hidden {
            for j in 0..n_z {
                gw1[i * n_z + j] = gpre[i] * cache.z[j];
            }
        }
        let d_e = params.arch.global_dim();
        add_grad(grads, &head_name(k, "fc2.weight"), gw2);
        add_grad(grads, &head_name(k, "fc2.bias"), gtheta);
        add_grad(grads, &head_name(k, "fc1.weight"), gw1);
        add_grad(grads, &head_name(k, "fc1.bias"), gpre);
        add_grad(grads, &head_name(k, "embedding"), gz[d_e..].to_vec());
    }
    if let Some(gg) = grad_global {
        gg.iter_mut().zip(&gz).for_each(|(a, b)| *a += b);
    }
}

fn to_probs(logits: &[f64], h: usize, w: usize) -> ProbGrid {
    let data = logits
        .iter()
        .map(|&l| nn::sigmoid(l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
        .collect();
    ProbGrid::from_vec(h, w, data).expect("logit count matches grid")
}

/// Per-class foreground probabilities. Each class is computed from the
/// shared features and its own head only.
pub fn predict(
    params: &ModelParams,
    image: &Image,
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, ProbGrid>> {
    for &k in classes {
        params.check_class(k)?;
    }
    let features = encode(params, image)?;
    predict_from_features(params, &features, classes)
}

pub fn predict_from_features(
    params: &ModelParams,
    features: &EncodedFeatures,
    classes: &BTreeSet<ClassId>,
) -> Result<BTreeMap<ClassId, ProbGrid>> {
    classes
        .iter()
        .map(|&k| {
            let head = generate_head_params(params, &features.global, k)?;
            let logits = head_logits(&head, features);
            Ok((k, to_probs(&logits, features.height, features.width)))
        })
        .collect()
}
