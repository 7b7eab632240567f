//! Desk-scale model: a small convolutional backbone feeding a linear
//! base head, with the scan branch attached behind a switch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branch::{Branch, BranchConfig, BranchOutput, RoutingMode};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Linear, ParamId, ParamStore, kaiming};
use crate::routing::PrototypeStore;
use crate::tensor::{Tape, Tensor, Var};

/// Backbone layout: four conv blocks with 2×2 average pooling inserted
/// until the spatial size reaches `TARGET_SIZE`.
pub const TARGET_SIZE: usize = 4;
pub const BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Input grid side; must be `TARGET_SIZE`·2^p for p < BLOCKS.
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of the four backbone blocks; the last is C_b.
    pub backbone_channels: [usize; BLOCKS],
    pub kernel: usize,
    /// Prototype EMA momentum.
    pub momentum: f64,
    /// Branch settings; `None` disables the branch entirely.
    pub branch: Option<BranchConfig>,
    /// Seed for parameter init (and the ETF rotation unless the branch
    /// config overrides it).
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("backbone kernel must be odd".into()));
        }
        let mut size = self.input_size;
        let mut pools = 0;
        while size > TARGET_SIZE && size % 2 == 0 {
            size /= 2;
            pools += 1;
        }
        if size != TARGET_SIZE || pools >= BLOCKS {
            return Err(Error::Config(format!(
                "input size {} cannot reach {} within {} blocks",
                self.input_size, TARGET_SIZE, BLOCKS
            )));
        }
        if let Some(branch) = &self.branch {
            branch.validate()?;
            if branch.backbone_channels != self.backbone_channels[BLOCKS - 1] {
                return Err(Error::Config("branch width does not match backbone output".into()));
            }
            if branch.classes != self.classes {
                return Err(Error::Config("branch class count mismatch".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    pool_after: bool,
}

#[derive(Debug)]
pub struct Backbone {
    blocks: Vec<ConvBlock>,
    pub out_channels: usize,
}

impl Backbone {
    fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut cin = cfg.input_channels;
        let mut size = cfg.input_size;
        for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
            let ks = cfg.kernel;
            let kernel = store.register(
                format!("backbone.block{i}.kernel"),
                kaiming(vec![ks, ks, cin, cout], ks * ks * cin, rng),
            );
            let bias = store.register(format!("backbone.block{i}.bias"), Tensor::zeros(vec![cout]));
            let pool_after = size > TARGET_SIZE;
            if pool_after {
                size /= 2;
            }
            blocks.push(ConvBlock { kernel, bias, pool_after });
            cin = cout;
        }
        Backbone { blocks, out_channels: cin }
    }

    /// `[g,g,c_in]` → `[TARGET_SIZE, TARGET_SIZE, C_b]`
    pub fn forward<'t>(&self, p: &BoundParams<'t>, input: Var<'t>) -> Result<Var<'t>> {
        let mut x = input;
        for block in &self.blocks {
            x = x.conv2d(p.var(block.kernel), Some(p.var(block.bias)))?.silu();
            if block.pool_after {
                x = x.avg_pool2()?;
            }
        }
        Ok(x)
    }
}

/// Backbone + base linear head (+ optional branch) + prototype store.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub head: Linear,
    pub branch: Option<Branch>,
    pub prototypes: PrototypeStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config, &mut params, &mut rng);
        let head = Linear::new(&mut params, "head", backbone.out_channels, config.classes, &mut rng);
        let (branch, proto_dim, lambda0) = match &config.branch {
            Some(bc) => {
                let branch = Branch::new(bc.clone(), &mut params, &mut rng)?;
                (Some(branch), bc.width, bc.lambda0)
            }
            None => (None, backbone.out_channels, 0.1),
        };
        let prototypes = PrototypeStore::new(config.classes, proto_dim, config.momentum, lambda0)?;
        Ok(Model { config, params, backbone, head, branch, prototypes })
    }

    /// Base path of one sample: backbone map, pooled feature, logits.
    pub fn forward_base<'t>(
        &self,
        p: &BoundParams<'t>,
        input: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let feature_map = self.backbone.forward(p, input)?;
        let c = self.backbone.out_channels;
        let pooled = feature_map.reshape(vec![TARGET_SIZE * TARGET_SIZE, c])?.mean_axis(0)?;
        let logits = self.head.forward(p, pooled)?;
        Ok((feature_map, pooled, logits))
    }

    /// Branch pass on an already computed feature map.
    pub fn forward_branch<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        feature_map: Var<'t>,
        label: Option<usize>,
        mode: RoutingMode,
    ) -> Result<BranchOutput<'t>> {
        let branch = self
            .branch
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without a branch".into()))?;
        branch.forward(tape, p, feature_map, &self.prototypes, label, mode)
    }

    /// Deterministic argmax prediction (lowest index wins ties).
    pub fn predict(&self, input: &[f64], head: PredictHead) -> Result<usize> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let g = self.config.input_size;
        let input = tape.constant(vec![g, g, self.config.input_channels], input.to_vec())?;
        let (feature_map, _, logits) = self.forward_base(&p, input)?;
        let scores = match head {
            PredictHead::Base => logits.value(),
            PredictHead::Etf => {
                let out = self.forward_branch(
                    &tape,
                    &p,
                    feature_map,
                    None,
                    RoutingMode::ClassConditional,
                )?;
                out.q.value()
            }
        };
        Ok(argmax(&scores))
    }
}

/// Which classifier produces evaluation predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictHead {
    #[default]
    Base,
    Etf,
}

impl PredictHead {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(PredictHead::Base),
            "etf" => Ok(PredictHead::Etf),
            other => Err(Error::Config(format!("unknown prediction head {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictHead::Base => "base",
            PredictHead::Etf => "etf",
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
