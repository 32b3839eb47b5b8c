//! Configurable small convolutional classifier.
//!
//! Each block is Conv3x3(stride 2) - BN - ReLU; with residual connections on,
//! a second Conv3x3(stride 1) - BN at constant width plus an identity skip and
//! a second ReLU follow. Global average pooling and a linear head finish the
//! classifier. Every BN position can hold either a plain layer or a wrapped
//! (blended) pair, so re-initialization experiments run on the same code path
//! as vanilla training.

use serde::{Deserialize, Serialize};

use crate::batchnorm::{
    abri_wrap, bn_forward, AbriLayer, BatchNormLayer, Mode, DEFAULT_INIT_ALPHA,
};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture of one encoder plus its classifier head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// C, H, W of one input sample.
    pub input_shape: [usize; 3],
    /// Output channels of each block; the block count is the vector length.
    pub channels: Vec<usize>,
    /// Add an identity-skip Conv-BN pair to every block.
    #[serde(default)]
    pub residual: bool,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model: block count must be >= 1".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("model: every channel count must be >= 1".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("model: input dims must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("model: need at least 2 classes".into()));
        }
        Ok(())
    }

    /// Spatial dims after each block (stride-2 conv, kernel 3, padding 1).
    pub fn block_spatial_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for _ in &self.channels {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
            dims.push((h, w));
        }
        dims
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor, // OIKK
    pub bias: Tensor,   // O
    pub stride: usize,
    pub padding: usize,
}

/// A BN position: plain, or wrapped with an additional initialized layer.
#[derive(Debug, Clone)]
pub enum BnNode {
    Plain(BatchNormLayer),
    Wrapped(AbriLayer),
}

impl BnNode {
    pub fn channels(&self) -> usize {
        match self {
            BnNode::Plain(l) => l.channels(),
            BnNode::Wrapped(l) => l.channels(),
        }
    }

    pub fn is_wrapped(&self) -> bool {
        matches!(self, BnNode::Wrapped(_))
    }

    /// Wrap a plain layer in place. Wrapping twice is rejected.
    pub fn wrap(&mut self, init_alpha: f64) -> Result<()> {
        match self {
            BnNode::Plain(layer) => {
                let taken = std::mem::replace(layer, BatchNormLayer::with_defaults(0));
                *self = BnNode::Wrapped(abri_wrap(taken, init_alpha));
                Ok(())
            }
            BnNode::Wrapped(_) => Err(Error::contract(
                "bn layer is already wrapped; wrapping twice is not supported",
            )),
        }
    }

    /// The layer diagnostics scan: the original one for wrapped nodes.
    pub fn scanned_layer(&self) -> &BatchNormLayer {
        match self {
            BnNode::Plain(l) => l,
            BnNode::Wrapped(l) => &l.bn_ori,
        }
    }

    pub fn scanned_layer_mut(&mut self) -> &mut BatchNormLayer {
        match self {
            BnNode::Plain(l) => l,
            BnNode::Wrapped(l) => &mut l.bn_ori,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: ConvLayer,
    pub bn1: BnNode,
    pub conv2: Option<ConvLayer>,
    pub bn2: Option<BnNode>,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // K x D
    pub bias: Tensor,   // K
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
}

/// Uni-modal classifier: encoder plus linear head.
#[derive(Debug, Clone)]
pub struct UniModalModel {
    pub encoder: Encoder,
    pub head: LinearLayer,
}

/// Two encoders fused by feature concatenation into one linear head.
#[derive(Debug, Clone)]
pub struct MultiModalModel {
    pub encoder_a: Encoder,
    pub encoder_v: Encoder,
    pub head: LinearLayer,
}

fn init_conv(rng: &mut impl rand::Rng, c_out: usize, c_in: usize, stride: usize) -> ConvLayer {
    let mut weight = Tensor::zeros(&[c_out, c_in, 3, 3]);
    rng::fill_he_normal(rng, c_in * 9, weight.data_mut());
    ConvLayer {
        weight,
        bias: Tensor::zeros(&[c_out]),
        stride,
        padding: 1,
    }
}

fn init_linear(rng: &mut impl rand::Rng, k: usize, d: usize) -> LinearLayer {
    let mut weight = Tensor::zeros(&[k, d]);
    rng::fill_he_normal(rng, d, weight.data_mut());
    LinearLayer {
        weight,
        bias: Tensor::zeros(&[k]),
    }
}

impl Encoder {
    pub fn init(config: &ModelConfig, seed: u64, modality_tag: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[tag::MODEL_INIT, modality_tag]);
        let mut blocks = Vec::new();
        let mut c_in = config.input_shape[0];
        for &c_out in &config.channels {
            let conv1 = init_conv(&mut r, c_out, c_in, 2);
            let bn1 = BnNode::Plain(BatchNormLayer::with_defaults(c_out));
            let (conv2, bn2) = if config.residual {
                (
                    Some(init_conv(&mut r, c_out, c_out, 1)),
                    Some(BnNode::Plain(BatchNormLayer::with_defaults(c_out))),
                )
            } else {
                (None, None)
            };
            blocks.push(ConvBlock { conv1, bn1, conv2, bn2 });
            c_in = c_out;
        }
        Ok(Encoder {
            config: config.clone(),
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn check_input(&self, x: &Tensor, context: &'static str) -> Result<()> {
        let s = self.config.input_shape;
        if x.shape().len() != 4 || x.dim(1) != s[0] || x.dim(2) != s[1] || x.dim(3) != s[2] {
            return Err(Error::Shape {
                context: "encoder input",
                expected: format!("N x {} x {} x {} ({context})", s[0], s[1], s[2]),
                found: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Eval-mode features (running statistics; no state is touched).
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval_capture(x, false)?.0)
    }

    /// Eval-mode features, optionally capturing each block's post-ReLU map
    /// (named `blocks.{i}.bn1`) for activation diagnostics.
    pub fn forward_eval_capture(
        &self,
        x: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        self.check_input(x, "eval")?;
        let mut captured = Vec::new();
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let c = ops::conv2d_forward(
                &h,
                &block.conv1.weight,
                &block.conv1.bias,
                block.conv1.stride,
                block.conv1.padding,
            )?;
            let bn = eval_bn(&block.bn1, &c)?;
            let mut out = ops::relu_forward(&bn);
            if capture {
                captured.push((format!("blocks.{i}.bn1"), out.clone()));
            }
            if let (Some(conv2), Some(bn2)) = (&block.conv2, &block.bn2) {
                let c2 = ops::conv2d_forward(
                    &out,
                    &conv2.weight,
                    &conv2.bias,
                    conv2.stride,
                    conv2.padding,
                )?;
                let b2 = eval_bn(bn2, &c2)?;
                let summed = Tensor::new(
                    b2.shape().to_vec(),
                    b2.iter().zip(out.iter()).map(|(u, v)| u + v).collect(),
                )?;
                out = ops::relu_forward(&summed);
            }
            h = out;
        }
        let features = ops::global_avg_pool_forward(&h)?;
        Ok((features, captured))
    }

    /// Train-mode features on the tape. Parameters are registered as leaves
    /// and reported through `binder`; running statistics update in place.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        binder: &mut ParamBinder,
    ) -> Result<Var> {
        self.check_input(tape.value(x), "train")?;
        let mut h = x;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("{prefix}blocks.{i}");
            let w1 = binder.leaf(tape, format!("{name}.conv1.weight"), block.conv1.weight.clone());
            let b1 = binder.leaf(tape, format!("{name}.conv1.bias"), block.conv1.bias.clone());
            let c1 = tape.conv2d(h, w1, b1, block.conv1.stride, block.conv1.padding)?;
            let n1 = train_bn(tape, &mut block.bn1, c1, &format!("{name}.bn1"), binder)?;
            let mut out = tape.relu(n1);
            if let (Some(conv2), Some(bn2)) = (&mut block.conv2, &mut block.bn2) {
                let w2 = binder.leaf(tape, format!("{name}.conv2.weight"), conv2.weight.clone());
                let b2 = binder.leaf(tape, format!("{name}.conv2.bias"), conv2.bias.clone());
                let c2 = tape.conv2d(out, w2, b2, conv2.stride, conv2.padding)?;
                let n2 = train_bn(tape, bn2, c2, &format!("{name}.bn2"), binder)?;
                let summed = tape.add(n2, out)?;
                out = tape.relu(summed);
            }
            h = out;
        }
        tape.global_avg_pool(h)
    }

    /// Visit every trainable parameter in deterministic model order.
    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut impl FnMut(String, &mut [f64]),
    ) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("{prefix}blocks.{i}");
            f(format!("{name}.conv1.weight"), block.conv1.weight.data_mut());
            f(format!("{name}.conv1.bias"), block.conv1.bias.data_mut());
            visit_bn_params(&mut block.bn1, &format!("{name}.bn1"), f);
            if let (Some(conv2), Some(bn2)) = (&mut block.conv2, &mut block.bn2) {
                f(format!("{name}.conv2.weight"), conv2.weight.data_mut());
                f(format!("{name}.conv2.bias"), conv2.bias.data_mut());
                visit_bn_params(bn2, &format!("{name}.bn2"), f);
            }
        }
    }

    /// BN nodes in model order with their names.
    pub fn bn_nodes(&self) -> Vec<(String, &BnNode)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.bn1"), &block.bn1));
            if let Some(bn2) = &block.bn2 {
                out.push((format!("blocks.{i}.bn2"), bn2));
            }
        }
        out
    }

    pub fn bn_nodes_mut(&mut self) -> Vec<(String, &mut BnNode)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.bn1"), &mut block.bn1));
            if let Some(bn2) = &mut block.bn2 {
                out.push((format!("blocks.{i}.bn2"), bn2));
            }
        }
        out
    }

    /// Wrap every BN position for adaptive re-initialization.
    pub fn wrap_all_bn(&mut self, init_alpha: f64) -> Result<()> {
        for (_, node) in self.bn_nodes_mut() {
            node.wrap(init_alpha)?;
        }
        Ok(())
    }

    /// Total trainable parameters.
    pub fn trainable_param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params_mut("", &mut |_, p| total += p.len());
        total
    }
}

fn eval_bn(node: &BnNode, x: &Tensor) -> Result<Tensor> {
    match node {
        BnNode::Plain(layer) => {
            let mut l = layer.clone();
            let (y, _) = bn_forward(x, &mut l, Mode::Eval)?;
            Ok(y)
        }
        BnNode::Wrapped(abri) => {
            let mut ori = abri.bn_ori.clone();
            let mut add = abri.bn_add.clone();
            let (y_ori, _) = bn_forward(x, &mut ori, Mode::Eval)?;
            let (y_add, _) = bn_forward(x, &mut add, Mode::Eval)?;
            Ok(crate::batchnorm::blend_channels(&y_ori, &y_add, &abri.alpha))
        }
    }
}

fn train_bn(
    tape: &mut Tape,
    node: &mut BnNode,
    x: Var,
    name: &str,
    binder: &mut ParamBinder,
) -> Result<Var> {
    match node {
        BnNode::Plain(layer) => {
            let g = binder.leaf(tape, format!("{name}.gamma"), Tensor::from_vec(layer.gamma.clone()));
            let b = binder.leaf(tape, format!("{name}.beta"), Tensor::from_vec(layer.beta.clone()));
            let (y, cache) = tape.batch_norm(x, g, b, layer.eps)?;
            update_running(layer, &cache.mean, &cache.var);
            Ok(y)
        }
        BnNode::Wrapped(abri) => {
            let g_ori = binder.leaf(
                tape,
                format!("{name}.ori.gamma"),
                Tensor::from_vec(abri.bn_ori.gamma.clone()),
            );
            let b_ori = binder.leaf(
                tape,
                format!("{name}.ori.beta"),
                Tensor::from_vec(abri.bn_ori.beta.clone()),
            );
            let (y_ori, cache_ori) = tape.batch_norm(x, g_ori, b_ori, abri.bn_ori.eps)?;
            update_running(&mut abri.bn_ori, &cache_ori.mean, &cache_ori.var);

            let g_add = binder.leaf(
                tape,
                format!("{name}.add.gamma"),
                Tensor::from_vec(abri.bn_add.gamma.clone()),
            );
            let b_add = binder.leaf(
                tape,
                format!("{name}.add.beta"),
                Tensor::from_vec(abri.bn_add.beta.clone()),
            );
            let (y_add, cache_add) = tape.batch_norm(x, g_add, b_add, abri.bn_add.eps)?;
            update_running(&mut abri.bn_add, &cache_add.mean, &cache_add.var);

            let alpha = binder.leaf(tape, format!("{name}.alpha"), Tensor::from_vec(abri.alpha.clone()));
            tape.blend(y_ori, y_add, alpha)
        }
    }
}

fn update_running(layer: &mut BatchNormLayer, mean: &[f64], var: &[f64]) {
    let m = layer.momentum;
    for c in 0..layer.channels() {
        layer.running_mean[c] = (1.0 - m) * layer.running_mean[c] + m * mean[c];
        layer.running_var[c] = (1.0 - m) * layer.running_var[c] + m * var[c];
    }
}

fn visit_bn_params(node: &mut BnNode, name: &str, f: &mut impl FnMut(String, &mut [f64])) {
    match node {
        BnNode::Plain(layer) => {
            f(format!("{name}.gamma"), &mut layer.gamma);
            f(format!("{name}.beta"), &mut layer.beta);
        }
        BnNode::Wrapped(abri) => {
            f(format!("{name}.ori.gamma"), &mut abri.bn_ori.gamma);
            f(format!("{name}.ori.beta"), &mut abri.bn_ori.beta);
            f(format!("{name}.add.gamma"), &mut abri.bn_add.gamma);
            f(format!("{name}.add.beta"), &mut abri.bn_add.beta);
            f(format!("{name}.alpha"), &mut abri.alpha);
        }
    }
}

/// Per-layer BN scalars carried in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnMeta {
    pub eps: f64,
    pub momentum: f64,
}

fn bn_tensor_slots<'a>(
    node: &'a BnNode,
    name: &str,
) -> Vec<(String, &'static str, &'a [f64])> {
    match node {
        BnNode::Plain(l) => vec![
            (format!("{name}.gamma"), "bn", &l.gamma[..]),
            (format!("{name}.beta"), "bn", &l.beta[..]),
            (format!("{name}.running_mean"), "bn", &l.running_mean[..]),
            (format!("{name}.running_var"), "bn", &l.running_var[..]),
        ],
        BnNode::Wrapped(a) => vec![
            (format!("{name}.ori.gamma"), "abri.ori", &a.bn_ori.gamma[..]),
            (format!("{name}.ori.beta"), "abri.ori", &a.bn_ori.beta[..]),
            (format!("{name}.ori.running_mean"), "abri.ori", &a.bn_ori.running_mean[..]),
            (format!("{name}.ori.running_var"), "abri.ori", &a.bn_ori.running_var[..]),
            (format!("{name}.add.gamma"), "abri.add", &a.bn_add.gamma[..]),
            (format!("{name}.add.beta"), "abri.add", &a.bn_add.beta[..]),
            (format!("{name}.add.running_mean"), "abri.add", &a.bn_add.running_mean[..]),
            (format!("{name}.add.running_var"), "abri.add", &a.bn_add.running_var[..]),
            (format!("{name}.alpha"), "abri.alpha", &a.alpha[..]),
        ],
    }
}

fn bn_tensor_slots_mut<'a>(
    node: &'a mut BnNode,
    name: &str,
) -> Vec<(String, &'static str, &'a mut [f64])> {
    match node {
        BnNode::Plain(l) => vec![
            (format!("{name}.gamma"), "bn", &mut l.gamma[..]),
            (format!("{name}.beta"), "bn", &mut l.beta[..]),
            (format!("{name}.running_mean"), "bn", &mut l.running_mean[..]),
            (format!("{name}.running_var"), "bn", &mut l.running_var[..]),
        ],
        BnNode::Wrapped(a) => vec![
            (format!("{name}.ori.gamma"), "abri.ori", &mut a.bn_ori.gamma[..]),
            (format!("{name}.ori.beta"), "abri.ori", &mut a.bn_ori.beta[..]),
            (format!("{name}.ori.running_mean"), "abri.ori", &mut a.bn_ori.running_mean[..]),
            (format!("{name}.ori.running_var"), "abri.ori", &mut a.bn_ori.running_var[..]),
            (format!("{name}.add.gamma"), "abri.add", &mut a.bn_add.gamma[..]),
            (format!("{name}.add.beta"), "abri.add", &mut a.bn_add.beta[..]),
            (format!("{name}.add.running_mean"), "abri.add", &mut a.bn_add.running_mean[..]),
            (format!("{name}.add.running_var"), "abri.add", &mut a.bn_add.running_var[..]),
            (format!("{name}.alpha"), "abri.alpha", &mut a.alpha[..]),
        ],
    }
}

impl Encoder {
    /// Visit every tensor (parameters and running-stat buffers) in the
    /// deterministic order the checkpoint format serializes.
    pub fn visit_tensors(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'static str, Vec<usize>, &[f64]),
    ) {
        for (i, block) in self.blocks.iter().enumerate() {
            let name = format!("{prefix}blocks.{i}");
            f(
                format!("{name}.conv1.weight"),
                "conv",
                block.conv1.weight.shape().to_vec(),
                block.conv1.weight.data(),
            );
            f(
                format!("{name}.conv1.bias"),
                "conv",
                block.conv1.bias.shape().to_vec(),
                block.conv1.bias.data(),
            );
            for (n, tag, data) in bn_tensor_slots(&block.bn1, &format!("{name}.bn1")) {
                let len = data.len();
                f(n, tag, vec![len], data);
            }
            if let (Some(conv2), Some(bn2)) = (&block.conv2, &block.bn2) {
                f(
                    format!("{name}.conv2.weight"),
                    "conv",
                    conv2.weight.shape().to_vec(),
                    conv2.weight.data(),
                );
                f(
                    format!("{name}.conv2.bias"),
                    "conv",
                    conv2.bias.shape().to_vec(),
                    conv2.bias.data(),
                );
                for (n, tag, data) in bn_tensor_slots(bn2, &format!("{name}.bn2")) {
                    let len = data.len();
                    f(n, tag, vec![len], data);
                }
            }
        }
    }

    pub fn visit_tensors_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut [f64]),
    ) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("{prefix}blocks.{i}");
            f(format!("{name}.conv1.weight"), block.conv1.weight.data_mut());
            f(format!("{name}.conv1.bias"), block.conv1.bias.data_mut());
            for (n, _, data) in bn_tensor_slots_mut(&mut block.bn1, &format!("{name}.bn1")) {
                f(n, data);
            }
            if let (Some(conv2), Some(bn2)) = (&mut block.conv2, &mut block.bn2) {
                f(format!("{name}.conv2.weight"), conv2.weight.data_mut());
                f(format!("{name}.conv2.bias"), conv2.bias.data_mut());
                for (n, _, data) in bn_tensor_slots_mut(bn2, &format!("{name}.bn2")) {
                    f(n, data);
                }
            }
        }
    }

    /// eps/momentum per BN layer (inner layers of wrapped nodes separately).
    pub fn bn_meta(&self, prefix: &str) -> std::collections::BTreeMap<String, BnMeta> {
        let mut out = std::collections::BTreeMap::new();
        for (name, node) in self.bn_nodes() {
            match node {
                BnNode::Plain(l) => {
                    out.insert(
                        format!("{prefix}{name}"),
                        BnMeta { eps: l.eps, momentum: l.momentum },
                    );
                }
                BnNode::Wrapped(a) => {
                    out.insert(
                        format!("{prefix}{name}.ori"),
                        BnMeta { eps: a.bn_ori.eps, momentum: a.bn_ori.momentum },
                    );
                    out.insert(
                        format!("{prefix}{name}.add"),
                        BnMeta { eps: a.bn_add.eps, momentum: a.bn_add.momentum },
                    );
                }
            }
        }
        out
    }

    pub fn apply_bn_meta(
        &mut self,
        prefix: &str,
        meta: &std::collections::BTreeMap<String, BnMeta>,
    ) {
        for (name, node) in self.bn_nodes_mut() {
            match node {
                BnNode::Plain(l) => {
                    if let Some(m) = meta.get(&format!("{prefix}{name}")) {
                        l.eps = m.eps;
                        l.momentum = m.momentum;
                    }
                }
                BnNode::Wrapped(a) => {
                    if let Some(m) = meta.get(&format!("{prefix}{name}.ori")) {
                        a.bn_ori.eps = m.eps;
                        a.bn_ori.momentum = m.momentum;
                    }
                    if let Some(m) = meta.get(&format!("{prefix}{name}.add")) {
                        a.bn_add.eps = m.eps;
                        a.bn_add.momentum = m.momentum;
                    }
                }
            }
        }
    }

    /// Wrap the BN nodes whose serialized names appear wrapped in a manifest.
    /// `wrapped_paths` holds bn-node paths like `blocks.0.bn1` (no prefix).
    pub fn wrap_named_bn(&mut self, wrapped_paths: &[String], init_alpha: f64) -> Result<()> {
        for path in wrapped_paths {
            let mut found = false;
            for (name, node) in self.bn_nodes_mut() {
                if &name == path {
                    node.wrap(init_alpha)?;
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::contract(format!("no BN node named {path} in model")));
            }
        }
        Ok(())
    }
}

impl UniModalModel {
    pub fn visit_tensors(
        &self,
        f: &mut dyn FnMut(String, &'static str, Vec<usize>, &[f64]),
    ) {
        self.encoder.visit_tensors("encoder.", f);
        f(
            "head.weight".into(),
            "linear",
            self.head.weight.shape().to_vec(),
            self.head.weight.data(),
        );
        f(
            "head.bias".into(),
            "linear",
            self.head.bias.shape().to_vec(),
            self.head.bias.data(),
        );
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        self.encoder.visit_tensors_mut("encoder.", f);
        f("head.weight".into(), self.head.weight.data_mut());
        f("head.bias".into(), self.head.bias.data_mut());
    }
}

impl MultiModalModel {
    pub fn visit_tensors(
        &self,
        f: &mut dyn FnMut(String, &'static str, Vec<usize>, &[f64]),
    ) {
        self.encoder_a.visit_tensors("enc_a.", f);
        self.encoder_v.visit_tensors("enc_v.", f);
        f(
            "head.weight".into(),
            "linear",
            self.head.weight.shape().to_vec(),
            self.head.weight.data(),
        );
        f(
            "head.bias".into(),
            "linear",
            self.head.bias.shape().to_vec(),
            self.head.bias.data(),
        );
    }

    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        self.encoder_a.visit_tensors_mut("enc_a.", f);
        self.encoder_v.visit_tensors_mut("enc_v.", f);
        f("head.weight".into(), self.head.weight.data_mut());
        f("head.bias".into(), self.head.bias.data_mut());
    }
}

/// Collects `(name, Var)` bindings so gradients can be read back after a
/// backward pass.
#[derive(Default)]
pub struct ParamBinder {
    pub entries: Vec<(String, Var)>,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    fn leaf(&mut self, tape: &mut Tape, name: String, value: Tensor) -> Var {
        let v = tape.leaf(value);
        self.entries.push((name, v));
        v
    }

    /// Gradient lookup table after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> std::collections::BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(name, var)| (name.clone(), tape.grad(*var).data().to_vec()))
            .collect()
    }
}

impl UniModalModel {
    pub fn init(config: &ModelConfig, seed: u64, modality_tag: u64) -> Result<Self> {
        let encoder = Encoder::init(config, seed, modality_tag)?;
        let mut r = rng::stream(seed, &[tag::HEAD_INIT, modality_tag]);
        let head = init_linear(&mut r, config.n_classes, config.feature_dim());
        Ok(UniModalModel { encoder, head })
    }

    /// Fresh, seeded head; used when fine-tuning on a new target task.
    pub fn reset_head(&mut self, seed: u64, modality_tag: u64) {
        let mut r = rng::stream(seed, &[tag::HEAD_INIT, modality_tag, 1]);
        self.head = init_linear(
            &mut r,
            self.encoder.config.n_classes,
            self.encoder.config.feature_dim(),
        );
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let features = self.encoder.forward_eval(x)?;
        ops::linear_forward(&features, &self.head.weight, &self.head.bias)
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        binder: &mut ParamBinder,
    ) -> Result<Var> {
        let features = self.encoder.forward_train(tape, x, "encoder.", binder)?;
        let w = binder.leaf(tape, "head.weight".into(), self.head.weight.clone());
        let b = binder.leaf(tape, "head.bias".into(), self.head.bias.clone());
        tape.linear(features, w, b)
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut [f64])) {
        self.encoder.visit_params_mut("encoder.", f);
        f("head.weight".into(), self.head.weight.data_mut());
        f("head.bias".into(), self.head.bias.data_mut());
    }
}

impl MultiModalModel {
    /// Assemble from two encoders plus a fresh joint head over concatenated
    /// pooled features.
    pub fn assemble(encoder_a: Encoder, encoder_v: Encoder, n_classes: usize, seed: u64) -> Result<Self> {
        if encoder_a.config.n_classes != n_classes || encoder_v.config.n_classes != n_classes {
            return Err(Error::contract(
                "multimodal assembly: encoder class counts disagree with the head",
            ));
        }
        let d = encoder_a.feature_dim() + encoder_v.feature_dim();
        let mut r = rng::stream(seed, &[tag::HEAD_INIT, 0x77]);
        let head = init_linear(&mut r, n_classes, d);
        Ok(MultiModalModel {
            encoder_a,
            encoder_v,
            head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.head.weight.dim(0)
    }

    pub fn forward_eval(&self, xa: &Tensor, xv: &Tensor) -> Result<Tensor> {
        let fa = self.encoder_a.forward_eval(xa)?;
        let fv = self.encoder_v.forward_eval(xv)?;
        let f = ops::concat_cols(&fa, &fv)?;
        ops::linear_forward(&f, &self.head.weight, &self.head.bias)
    }

    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        xa: Var,
        xv: Var,
        binder: &mut ParamBinder,
    ) -> Result<Var> {
        let fa = self.encoder_a.forward_train(tape, xa, "enc_a.", binder)?;
        let fv = self.encoder_v.forward_train(tape, xv, "enc_v.", binder)?;
        let f = tape.concat(fa, fv)?;
        let w = binder.leaf(tape, "head.weight".into(), self.head.weight.clone());
        let b = binder.leaf(tape, "head.bias".into(), self.head.bias.clone());
        tape.linear(f, w, b)
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut [f64])) {
        self.encoder_a.visit_params_mut("enc_a.", f);
        self.encoder_v.visit_params_mut("enc_v.", f);
        f("head.weight".into(), self.head.weight.data_mut());
        f("head.bias".into(), self.head.bias.data_mut());
    }
}

/// Default alpha used when wrapping through higher-level APIs.
pub fn default_init_alpha() -> f64 {
    DEFAULT_INIT_ALPHA
}
