//! AWM-augmented ResNet (CIFAR family) and bottleneck DenseNet graphs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Param, ParamGroup, Var};
use crate::awm::{he_normal, AwmMode, AwmUnit, LambdaRecord};
use crate::error::{Error, Result};
use crate::ops::{self, BnStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkKind {
    ResnetAwm,
    ResnetPlain,
    DensenetAwm,
    DensenetPlain,
}

impl NetworkKind {
    pub fn is_awm(self) -> bool {
        matches!(self, NetworkKind::ResnetAwm | NetworkKind::DensenetAwm)
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, NetworkKind::ResnetAwm | NetworkKind::ResnetPlain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NetworkKind::ResnetAwm => "resnet_awm",
            NetworkKind::ResnetPlain => "resnet_plain",
            NetworkKind::DensenetAwm => "densenet_awm",
            NetworkKind::DensenetPlain => "densenet_plain",
        }
    }

    pub fn parse(s: &str) -> Result<NetworkKind> {
        match s {
            "resnet_awm" => Ok(NetworkKind::ResnetAwm),
            "resnet_plain" => Ok(NetworkKind::ResnetPlain),
            "densenet_awm" => Ok(NetworkKind::DensenetAwm),
            "densenet_plain" => Ok(NetworkKind::DensenetPlain),
            other => Err(Error::invalid(format!("unknown network kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    pub depth: usize,
    pub num_classes: usize,
    /// First-stage width of the CIFAR ResNet (stages run at 1x/2x/4x).
    pub base_channels: usize,
    /// DenseNet growth rate k.
    pub growth_rate: usize,
    /// Hidden width e of each mapping unit.
    pub reduction: usize,
    /// true: 1x1 strided projection + BN at stage boundaries (option B);
    /// false: parameter-free subsample + channel zero-pad (option A).
    pub projection_shortcut: bool,
}

impl NetworkConfig {
    pub fn new(kind: NetworkKind, depth: usize, num_classes: usize) -> NetworkConfig {
        NetworkConfig {
            kind,
            depth,
            num_classes,
            base_channels: 16,
            growth_rate: 12,
            reduction: 16,
            projection_shortcut: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_resnet() {
            if self.depth < 8 || (self.depth - 2) % 6 != 0 {
                return Err(Error::invalid(format!(
                    "resnet depth {} invalid: depth must satisfy (depth - 2) mod 6 == 0",
                    self.depth
                )));
            }
        } else if self.depth < 10 || (self.depth - 4) % 6 != 0 {
            return Err(Error::invalid(format!(
                "densenet depth {} invalid: depth must satisfy (depth - 4) mod 6 == 0",
                self.depth
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        Ok(())
    }
}

/// Table of mapping units per ResNet depth: one per residual block,
/// (depth - 2) / 2 in total.
pub fn mapping_unit_count(depth: usize) -> Result<usize> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(Error::invalid(format!(
            "resnet depth {depth} invalid: depth must satisfy (depth - 2) mod 6 == 0"
        )));
    }
    Ok((depth - 2) / 2)
}

// ---------------------------------------------------------------------------
// layer building blocks
// ---------------------------------------------------------------------------

struct ConvLayer {
    kernel: Param,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvLayer {
        let fan_in = cin * ksize * ksize;
        ConvLayer {
            kernel: Param::new(
                format!("{name}.kernel"),
                ParamGroup::Backbone,
                he_normal(rng, &[cout, cin, ksize, ksize], fan_in),
            ),
            stride,
            pad,
        }
    }

    fn forward(&self, x: &Var) -> Result<Var> {
        ops::conv2d(x, &Var::param(&self.kernel), self.stride, self.pad)
    }
}

struct BnLayer {
    gamma: Param,
    beta: Param,
    stats: BnStats,
    name: String,
}

impl BnLayer {
    fn new(name: &str, channels: usize) -> BnLayer {
        BnLayer {
            gamma: Param::new(format!("{name}.gamma"), ParamGroup::Backbone, Tensor::full(&[channels], 1.0)),
            beta: Param::new(format!("{name}.beta"), ParamGroup::Backbone, Tensor::zeros(&[channels])),
            stats: BnStats::new(channels),
            name: name.to_string(),
        }
    }

    fn forward(&self, x: &Var, train: bool) -> Result<Var> {
        ops::batch_norm(x, &Var::param(&self.gamma), &Var::param(&self.beta), &self.stats, train)
    }
}

struct FcLayer {
    weight: Param,
    bias: Param,
}

impl FcLayer {
    fn new(name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> FcLayer {
        FcLayer {
            weight: Param::new(
                format!("{name}.weight"),
                ParamGroup::Backbone,
                he_normal(rng, &[dout, din], din),
            ),
            bias: Param::new(format!("{name}.bias"), ParamGroup::Backbone, Tensor::zeros(&[dout])),
        }
    }

    fn forward(&self, x: &Var) -> Result<Var> {
        ops::fully_connected(x, &Var::param(&self.weight), &Var::param(&self.bias))
    }
}

enum Shortcut {
    Identity,
    Projection { conv: ConvLayer, bn: BnLayer },
    PadIdentity { stride: usize, cout: usize },
}

struct ResidualBlock {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    shortcut: Shortcut,
    awm: Option<AwmUnit>,
}

impl ResidualBlock {
    fn forward(&self, x: &Var, train: bool, trace: &mut Vec<LambdaRecord>, capture: bool) -> Result<Var> {
        let f = self.bn2.forward(
            &self.conv2.forward(&ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?))?,
            train,
        )?;
        let sc = match &self.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::Projection { conv, bn } => bn.forward(&conv.forward(x)?, train)?,
            Shortcut::PadIdentity { stride, cout } => ops::subsample_pad_channels(x, *stride, *cout)?,
        };
        let merged = match &self.awm {
            Some(unit) => {
                let y = unit.merge_sum(&f, &sc)?;
                if capture {
                    trace.push(unit.last_lambda().expect("merge recorded lambda"));
                }
                y
            }
            None => ops::add(&f, &sc)?,
        };
        Ok(ops::relu(&merged))
    }
}

// ---------------------------------------------------------------------------
// networks
// ---------------------------------------------------------------------------

pub struct ForwardResult {
    pub logits: Var,
    /// One record per mapping unit, in network order; empty unless capture
    /// was requested.
    pub lambdas: Vec<LambdaRecord>,
    /// Post-merge activation of every residual block (ResNet) or dense
    /// block (DenseNet); empty unless capture was requested.
    pub block_outputs: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub backbone: usize,
    pub awm: usize,
    pub total: usize,
}

pub struct ResNet {
    config: NetworkConfig,
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    blocks: Vec<ResidualBlock>,
    fc: FcLayer,
}

impl ResNet {
    fn build(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<ResNet> {
        let n = (config.depth - 2) / 6;
        let widths = [config.base_channels, config.base_channels * 2, config.base_channels * 4];
        let stem_conv = ConvLayer::new("stem.conv", 3, widths[0], 3, 1, 1, rng);
        let stem_bn = BnLayer::new("stem.bn", widths[0]);

        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (si, &cout) in widths.iter().enumerate() {
            for bi in 0..n {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", si + 1, bi);
                let shortcut = if stride == 1 && cin == cout {
                    Shortcut::Identity
                } else if config.projection_shortcut {
                    Shortcut::Projection {
                        conv: ConvLayer::new(&format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, rng),
                        bn: BnLayer::new(&format!("{name}.shortcut.bn"), cout),
                    }
                } else {
                    Shortcut::PadIdentity { stride, cout }
                };
                let awm = if config.kind.is_awm() {
                    Some(AwmUnit::new(&format!("{name}.awm"), &[cout, cout], config.reduction, rng)?)
                } else {
                    None
                };
                blocks.push(ResidualBlock {
                    conv1: ConvLayer::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
                    bn1: BnLayer::new(&format!("{name}.bn1"), cout),
                    conv2: ConvLayer::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
                    bn2: BnLayer::new(&format!("{name}.bn2"), cout),
                    shortcut,
                    awm,
                });
                cin = cout;
            }
        }
        let fc = FcLayer::new("classifier", widths[2], config.num_classes, rng);
        Ok(ResNet { config: config.clone(), stem_conv, stem_bn, blocks, fc })
    }

    fn forward(&self, batch: &Tensor, train: bool, capture: bool) -> Result<ForwardResult> {
        let (_, c, h, w) = batch.dims4("network input")?;
        if c != 3 || h != 32 || w != 32 {
            return Err(Error::shape("network input", &[0, 3, 32, 32], batch.shape()));
        }
        let mut trace = Vec::new();
        let mut block_outputs = Vec::new();
        let x = Var::leaf(batch.clone());
        let mut y = ops::relu(&self.stem_bn.forward(&self.stem_conv.forward(&x)?, train)?);
        for block in &self.blocks {
            y = block.forward(&y, train, &mut trace, capture)?;
            if capture {
                block_outputs.push(y.value().clone());
            }
        }
        let pooled = ops::global_avg_pool(&y)?;
        let logits = self.fc.forward(&pooled)?;
        Ok(ForwardResult { logits, lambdas: trace, block_outputs })
    }
}

struct DenseLayer {
    bn1: BnLayer,
    conv1: ConvLayer,
    bn2: BnLayer,
    conv2: ConvLayer,
    awm: Option<AwmUnit>,
}

impl DenseLayer {
    /// Consume all incoming bundles, produce one growth-rate bundle.
    fn forward(&self, bundles: &[Var], train: bool, trace: &mut Vec<LambdaRecord>, capture: bool) -> Result<Var> {
        let merged = match &self.awm {
            Some(unit) => {
                let y = unit.merge_concat(bundles)?;
                if capture {
                    trace.push(unit.last_lambda().expect("merge recorded lambda"));
                }
                y
            }
            None => ops::concat_channels(bundles)?,
        };
        let h = self.conv1.forward(&ops::relu(&self.bn1.forward(&merged, train)?))?;
        self.conv2.forward(&ops::relu(&self.bn2.forward(&h, train)?))
    }
}

struct Transition {
    bn: BnLayer,
    conv: ConvLayer,
}

pub struct DenseNet {
    config: NetworkConfig,
    stem_conv: ConvLayer,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BnLayer,
    fc: FcLayer,
}

impl DenseNet {
    fn build(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<DenseNet> {
        let k = config.growth_rate;
        let layers_per_block = (config.depth - 4) / 6;
        let mut channels = 2 * k;
        let stem_conv = ConvLayer::new("stem.conv", 3, channels, 3, 1, 1, rng);

        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for blk in 0..3 {
            let block_input = channels;
            let mut layers = Vec::new();
            for li in 0..layers_per_block {
                let name = format!("dense{}.layer{}", blk + 1, li);
                // bundles at this layer: the block input plus one per prior layer
                let mut dims = vec![block_input];
                dims.extend(std::iter::repeat(k).take(li));
                let cin: usize = dims.iter().sum();
                let awm = if config.kind.is_awm() && dims.len() >= 2 {
                    Some(AwmUnit::new(&format!("{name}.awm"), &dims, config.reduction, rng)?)
                } else {
                    None
                };
                layers.push(DenseLayer {
                    bn1: BnLayer::new(&format!("{name}.bn1"), cin),
                    conv1: ConvLayer::new(&format!("{name}.conv1"), cin, 4 * k, 1, 1, 0, rng),
                    bn2: BnLayer::new(&format!("{name}.bn2"), 4 * k),
                    conv2: ConvLayer::new(&format!("{name}.conv2"), 4 * k, k, 3, 1, 1, rng),
                    awm,
                });
            }
            channels = block_input + layers_per_block * k;
            blocks.push(layers);
            if blk < 2 {
                // compression 0.5
                let cout = channels / 2;
                let name = format!("transition{}", blk + 1);
                transitions.push(Transition {
                    bn: BnLayer::new(&format!("{name}.bn"), channels),
                    conv: ConvLayer::new(&format!("{name}.conv"), channels, cout, 1, 1, 0, rng),
                });
                channels = cout;
            }
        }
        let final_bn = BnLayer::new("final.bn", channels);
        let fc = FcLayer::new("classifier", channels, config.num_classes, rng);
        Ok(DenseNet { config: config.clone(), stem_conv, blocks, transitions, final_bn, fc })
    }

    fn forward(&self, batch: &Tensor, train: bool, capture: bool) -> Result<ForwardResult> {
        let (_, c, h, w) = batch.dims4("network input")?;
        if c != 3 || h != 32 || w != 32 {
            return Err(Error::shape("network input", &[0, 3, 32, 32], batch.shape()));
        }
        let mut trace = Vec::new();
        let mut block_outputs = Vec::new();
        let x = Var::leaf(batch.clone());
        let mut y = self.stem_conv.forward(&x)?;
        for (blk, layers) in self.blocks.iter().enumerate() {
            let mut bundles = vec![y.clone()];
            for layer in layers {
                let out = layer.forward(&bundles, train, &mut trace, capture)?;
                bundles.push(out);
            }
            y = ops::concat_channels(&bundles)?;
            if capture {
                block_outputs.push(y.value().clone());
            }
            if blk < self.transitions.len() {
                let t = &self.transitions[blk];
                y = ops::avg_pool2(&t.conv.forward(&ops::relu(&t.bn.forward(&y, train)?))?)?;
            }
        }
        let pooled = ops::global_avg_pool(&ops::relu(&self.final_bn.forward(&y, train)?))?;
        let logits = self.fc.forward(&pooled)?;
        Ok(ForwardResult { logits, lambdas: trace, block_outputs })
    }
}

pub enum Network {
    ResNet(ResNet),
    DenseNet(DenseNet),
}

impl Network {
    /// Deterministic construction: identical config and seed give
    /// bit-identical initial parameters.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if config.kind.is_resnet() {
            Ok(Network::ResNet(ResNet::build(config, &mut rng)?))
        } else {
            Ok(Network::DenseNet(DenseNet::build(config, &mut rng)?))
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        match self {
            Network::ResNet(n) => &n.config,
            Network::DenseNet(n) => &n.config,
        }
    }

    pub fn forward(&self, batch: &Tensor, train: bool, capture: bool) -> Result<ForwardResult> {
        match self {
            Network::ResNet(n) => n.forward(batch, train, capture),
            Network::DenseNet(n) => n.forward(batch, train, capture),
        }
    }

    pub fn awm_units(&self) -> Vec<&AwmUnit> {
        let mut units = Vec::new();
        match self {
            Network::ResNet(n) => {
                for b in &n.blocks {
                    if let Some(u) = &b.awm {
                        units.push(u);
                    }
                }
            }
            Network::DenseNet(n) => {
                for layers in &n.blocks {
                    for l in layers {
                        if let Some(u) = &l.awm {
                            units.push(u);
                        }
                    }
                }
            }
        }
        units
    }

    pub fn set_awm_mode(&self, mode: AwmMode) {
        for u in self.awm_units() {
            u.set_mode(mode);
        }
    }

    /// All trainable parameters, in deterministic network order.
    pub fn params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        let push_bn = |bn: &BnLayer, out: &mut Vec<Param>| {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
        };
        match self {
            Network::ResNet(n) => {
                out.push(n.stem_conv.kernel.clone());
                push_bn(&n.stem_bn, &mut out);
                for b in &n.blocks {
                    out.push(b.conv1.kernel.clone());
                    push_bn(&b.bn1, &mut out);
                    out.push(b.conv2.kernel.clone());
                    push_bn(&b.bn2, &mut out);
                    if let Shortcut::Projection { conv, bn } = &b.shortcut {
                        out.push(conv.kernel.clone());
                        push_bn(bn, &mut out);
                    }
                    if let Some(u) = &b.awm {
                        out.extend(u.params());
                    }
                }
                out.push(n.fc.weight.clone());
                out.push(n.fc.bias.clone());
            }
            Network::DenseNet(n) => {
                out.push(n.stem_conv.kernel.clone());
                for layers in &n.blocks {
                    for l in layers {
                        push_bn(&l.bn1, &mut out);
                        out.push(l.conv1.kernel.clone());
                        push_bn(&l.bn2, &mut out);
                        out.push(l.conv2.kernel.clone());
                        if let Some(u) = &l.awm {
                            out.extend(u.params());
                        }
                    }
                }
                for t in &n.transitions {
                    push_bn(&t.bn, &mut out);
                    out.push(t.conv.kernel.clone());
                }
                push_bn(&n.final_bn, &mut out);
                out.push(n.fc.weight.clone());
                out.push(n.fc.bias.clone());
            }
        }
        out
    }

    /// Batch-norm running statistics, named, in deterministic order.
    pub fn bn_buffers(&self) -> Vec<(String, BnStats)> {
        let mut out = Vec::new();
        let push = |bn: &BnLayer, out: &mut Vec<(String, BnStats)>| {
            out.push((bn.name.clone(), bn.stats.clone()));
        };
        match self {
            Network::ResNet(n) => {
                push(&n.stem_bn, &mut out);
                for b in &n.blocks {
                    push(&b.bn1, &mut out);
                    push(&b.bn2, &mut out);
                    if let Shortcut::Projection { bn, .. } = &b.shortcut {
                        push(bn, &mut out);
                    }
                }
            }
            Network::DenseNet(n) => {
                for layers in &n.blocks {
                    for l in layers {
                        push(&l.bn1, &mut out);
                        push(&l.bn2, &mut out);
                    }
                }
                for t in &n.transitions {
                    push(&t.bn, &mut out);
                }
                push(&n.final_bn, &mut out);
            }
        }
        out
    }

    pub fn count_parameters(&self) -> ParamCensus {
        let mut census = ParamCensus { backbone: 0, awm: 0, total: 0 };
        for p in self.params() {
            match p.group() {
                ParamGroup::Backbone => census.backbone += p.numel(),
                ParamGroup::Awm => census.awm += p.numel(),
            }
        }
        census.total = census.backbone + census.awm;
        census
    }
}
