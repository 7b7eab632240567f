//! The plug-in branch: input projections, depthwise convolution, the
//! selective scan with mixture of discretization, multiplicative
//! gating, and the fixed ETF head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::etf::EtfClassifier;
use crate::params::{BoundParams, Linear, ParamId, ParamStore, kaiming};
use crate::routing::{
    aggregate_delta, route_count, select_topk, DiscretizationBank, PrototypeStore, RoutingDecision,
};
use crate::scan::{ss2d, DirectionProjections, ZohMode};
use crate::tensor::{Tape, Tensor, Var};

/// How the number of aggregated experts is chosen per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// N_k = ceil(N·σ) from prototype-margin uncertainty.
    ClassConditional,
    /// Constant N_k for every sample.
    FixedK(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    /// Channel count of the backbone feature map the branch consumes.
    pub backbone_channels: usize,
    /// Branch width D: token channels inside the scan and the ETF
    /// feature dimension.
    pub width: usize,
    /// Hidden state size per channel.
    pub nstate: usize,
    /// Total number of discretization experts N.
    pub experts: usize,
    /// Depthwise conv kernel size (odd).
    pub conv_kernel: usize,
    /// Margin scale of the uncertainty measure.
    pub lambda0: f64,
    /// Weight of the KL term.
    pub alpha: f64,
    /// Weight of the contrastive discretization term.
    pub beta: f64,
    pub zoh_mode: ZohMode,
    /// 1 (row-forward only) or 4 (full cross-scan).
    pub directions: usize,
    /// Class count K of the ETF head.
    pub classes: usize,
    /// Stop gradients through Q in the KL term (ablation).
    pub detach_q: bool,
    pub etf_seed: u64,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.directions != 1 && self.directions != 4 {
            return Err(Error::Config(format!("direction count {} not in {{1,4}}", self.directions)));
        }
        if self.width < self.classes.saturating_sub(1) {
            return Err(Error::Config(format!(
                "branch width {} too small for {} ETF classes",
                self.width, self.classes
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv kernel size must be odd".into()));
        }
        if self.experts < 1 || self.nstate < 1 {
            return Err(Error::Config("experts and nstate must be at least 1".into()));
        }
        if self.lambda0 <= 0.0 {
            return Err(Error::Config("lambda0 must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample branch outputs.
pub struct BranchOutput<'t> {
    /// Pooled branch feature μ, `[width]`.
    pub mu: Var<'t>,
    /// ETF head distribution Q, `[classes]`.
    pub q: Var<'t>,
    /// Gate logits of this sample, `[experts]`.
    pub gate_logits: Var<'t>,
    /// Aggregated Δ before the positivity transform, `[tokens, width]`.
    pub delta_raw: Var<'t>,
    /// Strictly positive Δ that drove the scan.
    pub delta: Var<'t>,
    pub decision: RoutingDecision,
    /// σ used for routing (1.0 under fixed-k).
    pub sigma: f64,
    /// Pooled post-conv feature x̂ (plain values) — the prototype space.
    pub pooled_x_hat: Vec<f64>,
}

#[derive(Debug)]
pub struct Branch {
    pub config: BranchConfig,
    pub f_x: Linear,
    pub f_z: Linear,
    pub conv_kernel: ParamId,
    /// A = −exp(θ); θ is trained, negativity is structural.
    pub theta_a: ParamId,
    pub directions: Vec<DirectionProjections>,
    pub bank: DiscretizationBank,
    pub etf: EtfClassifier,
}

impl Branch {
    pub fn new(config: BranchConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let f_x = Linear::new(store, "branch.f_x", config.backbone_channels, d, rng);
        let f_z = Linear::new(store, "branch.f_z", config.backbone_channels, d, rng);
        let ks = config.conv_kernel;
        let conv_kernel =
            store.register("branch.conv", kaiming(vec![ks, ks, d], ks * ks, rng));
        // −A_{d,n} = n+1 at init
        let theta: Vec<f64> = (0..d)
            .flat_map(|_| (0..config.nstate).map(|n| ((n + 1) as f64).ln()))
            .collect();
        let theta_a =
            store.register("branch.theta_a", Tensor::new(vec![d, config.nstate], theta)?);
        let directions = (0..config.directions)
            .map(|i| DirectionProjections {
                f_b: Linear::new(store, &format!("branch.dir{i}.f_b"), d, config.nstate, rng),
                f_c: Linear::new(store, &format!("branch.dir{i}.f_c"), d, config.nstate, rng),
            })
            .collect();
        let bank = DiscretizationBank::new(store, d, config.experts, rng)?;
        let etf = EtfClassifier::build(config.classes, d, config.etf_seed)?;
        Ok(Branch { config, f_x, f_z, conv_kernel, theta_a, directions, bank, etf })
    }

    /// Chooses N_k for one sample. Training passes the ground-truth
    /// label; inference measures the pooled input feature against the
    /// prototypes. An empty store means maximal uncertainty (σ = 1).
    fn routing_sigma(
        &self,
        store: &PrototypeStore,
        label: Option<usize>,
        pooled: &[f64],
        mode: RoutingMode,
    ) -> Result<(f64, usize)> {
        match mode {
            RoutingMode::FixedK(k) => {
                if k < 1 || k > self.config.experts {
                    return Err(Error::Config(format!(
                        "fixed-k {k} outside [1, {}]",
                        self.config.experts
                    )));
                }
                Ok((1.0, k))
            }
            RoutingMode::ClassConditional => {
                let sigma = match label {
                    Some(y) if store.seen(y) => store.class_uncertainty(y)?,
                    Some(_) => 1.0,
                    None => {
                        if store.seen_count() > 0 {
                            store.input_uncertainty(pooled)?
                        } else {
                            1.0
                        }
                    }
                };
                Ok((sigma, route_count(sigma, self.config.experts)))
            }
        }
    }

    /// Full branch pass over one backbone feature map `[h, w, c_b]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        feature_map: Var<'t>,
        store: &PrototypeStore,
        label: Option<usize>,
        mode: RoutingMode,
    ) -> Result<BranchOutput<'t>> {
        let shape = feature_map.shape();
        if shape.len() != 3 || shape[2] != self.config.backbone_channels {
            return Err(Error::dim(
                "branch_forward",
                format!("expected [h,w,{}], got {shape:?}", self.config.backbone_channels),
            ));
        }
        let (h, w) = (shape[0], shape[1]);
        let l = h * w;
        let d = self.config.width;

        let tokens = feature_map.reshape(vec![l, self.config.backbone_channels])?;
        let x = self.f_x.forward(p, tokens)?;
        let z = self.f_z.forward(p, tokens)?;
        let x_hat = x
            .reshape(vec![h, w, d])?
            .dwconv2d(p.var(self.conv_kernel))?
            .silu()
            .reshape(vec![l, d])?;
        let pooled = x_hat.mean_axis(0)?;
        let pooled_values = pooled.value();

        let (gate_logits, w_full) = self.bank.gate_weights(p, pooled)?;
        let (sigma, n_k) = self.routing_sigma(store, label, &pooled_values, mode)?;
        let decision = select_topk(&w_full.value(), &gate_logits.value(), n_k)?;
        let agg = aggregate_delta(tape, &self.bank, p, x_hat, w_full, &decision)?;

        let a = p.var(self.theta_a).exp().neg();
        let scan_out = ss2d(
            tape,
            x_hat,
            h,
            w,
            a,
            agg.positive,
            &self.directions,
            p,
            self.config.zoh_mode,
        )?;

        let mu = z.silu().mul(scan_out)?.mean_axis(0)?;
        let q = self.etf.logits(tape, mu)?.softmax(0)?;

        Ok(BranchOutput {
            mu,
            q,
            gate_logits,
            delta_raw: agg.raw,
            delta: agg.positive,
            decision,
            sigma,
            pooled_x_hat: pooled_values,
        })
    }
}
