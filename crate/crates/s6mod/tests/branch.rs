//! Branch behavior: gating collapse, routing fallbacks, gradient reach
//! through the expert bank, and the full-branch gradient check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s6mod::branch::{Branch, BranchConfig, RoutingMode};
use s6mod::losses::{cont_loss, diff_loss, dr_loss, s6mod_loss};
use s6mod::params::ParamStore;
use s6mod::routing::{z_loss, PrototypeStore};
use s6mod::scan::ZohMode;
use s6mod::tensor::gradcheck::finite_difference_check;
use s6mod::tensor::{Tape, Tensor};
use s6mod::Result;

fn tiny_config() -> BranchConfig {
    BranchConfig {
        backbone_channels: 3,
        width: 4,
        nstate: 2,
        experts: 3,
        conv_kernel: 3,
        lambda0: 0.1,
        alpha: 1.0,
        beta: 5.0,
        zoh_mode: ZohMode::Exact,
        directions: 4,
        classes: 3,
        detach_q: false,
        etf_seed: 0,
    }
}

fn tiny_branch(seed: u64) -> (ParamStore, Branch) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branch = Branch::new(tiny_config(), &mut store, &mut rng).unwrap();
    (store, branch)
}

fn feature_data(h: usize, w: usize, c: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn zero_gate_path_zeroes_the_branch_feature() {
    let (mut store, branch) = tiny_branch(1);
    // silu(Z) = 0 everywhere once f_z is identically zero
    store.tensor_mut(branch.f_z.w).data_mut().fill(0.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let f = tape.constant(vec![2, 2, 3], feature_data(2, 2, 3, 2)).unwrap();
    let protos = PrototypeStore::new(3, 4, 0.9, 0.1).unwrap();
    let out = branch.forward(&tape, &p, f, &protos, Some(0), RoutingMode::ClassConditional).unwrap();
    assert!(out.mu.value().iter().all(|&v| v == 0.0));
    for q in out.q.value() {
        assert!((q - 1.0 / 3.0).abs() < 1e-12, "Q must be uniform, got {q}");
    }
}

#[test]
fn empty_store_routes_all_experts() {
    let (store, branch) = tiny_branch(3);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let f = tape.constant(vec![2, 2, 3], feature_data(2, 2, 3, 4)).unwrap();
    let protos = PrototypeStore::new(3, 4, 0.9, 0.1).unwrap();
    let out = branch.forward(&tape, &p, f, &protos, Some(1), RoutingMode::ClassConditional).unwrap();
    assert_eq!(out.sigma, 1.0);
    assert_eq!(out.decision.n_k, 3);
    assert_eq!(out.decision.omega, vec![0, 1, 2]);

    // inference mode on an empty store behaves the same
    let out = branch.forward(&tape, &p, f, &protos, None, RoutingMode::ClassConditional).unwrap();
    assert_eq!(out.decision.n_k, 3);
}

#[test]
fn branch_forward_is_deterministic() {
    let (store, branch) = tiny_branch(5);
    let protos = PrototypeStore::new(3, 4, 0.9, 0.1).unwrap();
    let data = feature_data(2, 2, 3, 6);
    let run = || {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let f = tape.constant(vec![2, 2, 3], data.clone()).unwrap();
        let out = branch.forward(&tape, &p, f, &protos, Some(2), RoutingMode::ClassConditional).unwrap();
        (out.mu.value(), out.q.value(), out.decision.clone())
    };
    let (mu1, q1, d1) = run();
    let (mu2, q2, d2) = run();
    assert_eq!(mu1, mu2);
    assert_eq!(q1, q2);
    assert_eq!(d1, d2);
}

#[test]
fn single_token_single_direction_matches_manual_composition() {
    let mut cfg = tiny_config();
    cfg.directions = 1;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let branch = Branch::new(cfg, &mut store, &mut rng).unwrap();
    let protos = PrototypeStore::new(3, 4, 0.9, 0.1).unwrap();

    let data = feature_data(1, 1, 3, 8);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let f = tape.constant(vec![1, 1, 3], data.clone()).unwrap();
    let out = branch.forward(&tape, &p, f, &protos, Some(0), RoutingMode::ClassConditional).unwrap();

    // manual composition of the same pipeline out of the primitive ops
    let tokens = f.reshape(vec![1, 3]).unwrap();
    let x = branch.f_x.forward(&p, tokens).unwrap();
    let z = branch.f_z.forward(&p, tokens).unwrap();
    let x_hat = x
        .reshape(vec![1, 1, 4])
        .unwrap()
        .dwconv2d(p.var(branch.conv_kernel))
        .unwrap()
        .silu()
        .reshape(vec![1, 4])
        .unwrap();
    let pooled = x_hat.mean_axis(0).unwrap();
    let (logits, w_full) = branch.bank.gate_weights(&p, pooled).unwrap();
    // empty store: all three experts selected
    let decision =
        s6mod::routing::select_topk(&w_full.value(), &logits.value(), 3).unwrap();
    let agg =
        s6mod::routing::aggregate_delta(&tape, &branch.bank, &p, x_hat, w_full, &decision)
            .unwrap();
    let a = p.var(branch.theta_a).exp().neg();
    let b_seq = branch.directions[0].f_b.forward(&p, x_hat).unwrap();
    let c_seq = branch.directions[0].f_c.forward(&p, x_hat).unwrap();
    let y = s6mod::scan::selective_scan(&tape, x_hat, a, agg.positive, b_seq, c_seq, ZohMode::Exact)
        .unwrap();
    let mu_manual = z.silu().mul(y).unwrap().mean_axis(0).unwrap();

    for (a, b) in out.mu.value().iter().zip(mu_manual.value()) {
        assert!((a - b).abs() < 1e-12, "fused {a} vs manual {b}");
    }
}

#[test]
fn gradient_reach_full_vs_single_expert() {
    for (mode, expect_all) in [(RoutingMode::FixedK(3), true), (RoutingMode::FixedK(1), false)] {
        let (mut store, branch) = tiny_branch(11);
        let protos = PrototypeStore::new(3, 4, 0.9, 0.1).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let f = tape.constant(vec![2, 2, 3], feature_data(2, 2, 3, 12)).unwrap();
        let out = branch.forward(&tape, &p, f, &protos, Some(0), mode).unwrap();
        // drive a loss that touches Δ through the scan output
        let loss = out.mu.mul(out.mu).unwrap().sum();
        tape.backward(loss).unwrap();
        store.absorb_grads(&p).unwrap();

        let mut reached = Vec::new();
        for (i, expert) in branch.bank.experts.iter().enumerate() {
            let g = store.tensor(expert.w).grad();
            let nonzero = g.map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false);
            if nonzero {
                reached.push(i);
            }
        }
        if expect_all {
            assert_eq!(reached.len(), 3, "all experts must receive gradient");
        } else {
            assert_eq!(reached.len(), 1, "exactly one expert must receive gradient");
        }
    }
}

#[test]
fn full_branch_loss_passes_gradient_check() {
    // Small dims keep the finite-difference sweep fast; the check runs
    // the complete branch loss (DR + KL + contrastive + z) over a
    // two-sample batch with all trainable parameters as leaves.
    let (store, branch) = tiny_branch(13);
    let mut protos = PrototypeStore::new(3, 4, 0.9, 0.1).unwrap();
    protos.update(&[vec![0.2, -0.1, 0.4, 0.0], vec![-0.3, 0.2, 0.1, 0.5]], &[0, 1]).unwrap();

    let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let feature_a = feature_data(2, 2, 3, 14);
    let feature_b = feature_data(2, 2, 3, 15);
    let labels = [0usize, 1usize];

    let case = BranchLossCase { branch: &branch, names, protos, feature_a, feature_b, labels };
    let check = finite_difference_check(&case, &params, 1e-5).unwrap();
    assert!(
        check.max_rel_err < 1e-4,
        "full branch loss rel err {} at {:?}",
        check.max_rel_err,
        check.worst
    );
}

struct BranchLossCase<'b> {
    branch: &'b Branch,
    names: Vec<String>,
    protos: PrototypeStore,
    feature_a: Vec<f64>,
    feature_b: Vec<f64>,
    labels: [usize; 2],
}

impl s6mod::tensor::gradcheck::LossFn for BranchLossCase<'_> {
    fn build<'t>(&self, tape: &'t Tape, params: &[s6mod::Var<'t>]) -> Result<s6mod::Var<'t>> {
        let bound = s6mod::params::BoundParams::from_vars(params.to_vec());
        let _ = &self.names;
        let mut mus = Vec::new();
        let mut qs = Vec::new();
        let mut raws = Vec::new();
        let mut gates = Vec::new();
        let mut p_dists = Vec::new();
        for (data, &label) in [&self.feature_a, &self.feature_b].iter().zip(&self.labels) {
            let f = tape.constant(vec![2, 2, 3], (*data).clone())?;
            let out = self.branch.forward(
                tape,
                &bound,
                f,
                &self.protos,
                Some(label),
                RoutingMode::ClassConditional,
            )?;
            mus.push(out.mu);
            qs.push(out.q);
            raws.push(out.delta_raw);
            gates.push(out.gate_logits);
            // stand-in base distribution: softmax of a fixed function of
            // the feature so the KL term has a meaningful P side
            let fake_logits = f.reshape(vec![12])?.mean_axis(0)?;
            let pd = tape
                .constant(vec![3], vec![fake_logits.item(), 0.1, -0.2])?
                .softmax(0)?;
            p_dists.push(pd);
        }
        let dr = dr_loss(tape, &mus, &self.labels, &self.branch.etf)?;
        let diff = diff_loss(tape, &p_dists, &qs, false)?;
        let cont = cont_loss(tape, &raws, &self.labels)?;
        let z = z_loss(tape, &gates)?;
        let combo = s6mod_loss(dr, diff, cont, z, 1.0, 5.0)?;
        Ok(combo.combined)
    }
}
