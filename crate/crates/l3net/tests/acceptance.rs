//! Acceptance suite. Each test prints one PASS/FAIL line for its check and
//! asserts the pinned thresholds. Training-backed checks share one cached
//! set of runs (the harness runs tests on a single thread here, so the
//! cache fills once).
//!
//! The two `_extended` tests need the MNIST IDX files and hours of compute;
//! they are ignored by default and run with `cargo test -- --ignored`.

use std::sync::OnceLock;
use std::time::Instant;

use l3net::analysis::{
    bank_automorphism_deviation, chebnet_to_l3net, difference_filter_matrix, edgenet_to_l3net,
    flip_probe, gat_to_l3net, max_discrepancy, mirror_flip_permutation,
    spectral_equivariance_check, spectral_residual, spectral_residual_eigen, stability_constants,
    verify_theorem1, verify_theorem2, PerturbationFamily, SpectralLayerKind,
};
use l3net::config::{ArchitectureId, DatasetSpec, ExperimentConfig, GraphSpec, LayerKind};
use l3net::data::{gen_updown, UpDownConfig, UpDownGraph};
use l3net::graph::{AdjacencyMode, Graph};
use l3net::layers::{difference_bank, Activation, ChebLayer, EdgeNetLayer, FilterBank, GatLayer};
use l3net::linalg::Mat;
use l3net::model::{build_architecture, Model};
use l3net::optim::{OptimizerKind, Schedule};
use l3net::reg::{
    reg_penalty, reg_penalty_grad, uniform_floors, verify_strong_reg_limit, RegContext,
};
use l3net::tape::{grad_check, Tape};
use l3net::tensor::Tensor;
use l3net::train::{train, TrainOutput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn updown_config(graph: GraphSpec, layer: LayerKind, seed: u64, reg_lambda: f64) -> ExperimentConfig {
    ExperimentConfig {
        architecture: ArchitectureId::Updown2,
        layer,
        graph,
        dataset: DatasetSpec::UpDown {
            n_train: 5000,
            n_test: 5000,
            threshold: 0.1,
            bump_std: 1.5,
            seed: 0,
        },
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        batch_size: 100,
        schedule: Schedule::Step {
            at_epoch: 80,
            factor: 0.1,
        },
        epochs: 100,
        reg_lambda,
        seed,
    }
}

struct TimedRun {
    out: TrainOutput,
    secs: f64,
}

struct SharedRuns {
    ring_l3: Vec<TimedRun>,
    ring_cheb: Vec<TimedRun>,
    chain_l3: Vec<TimedRun>,
    chain_cheb: Vec<TimedRun>,
    ring_shared: Vec<TimedRun>,
    ring_l3_reg: TimedRun,
}

fn timed_train(cfg: &ExperimentConfig, tag: &str) -> TimedRun {
    let start = Instant::now();
    let out = train(cfg).unwrap_or_else(|e| panic!("training {tag} failed: {e}"));
    let secs = start.elapsed().as_secs_f64();
    eprintln!(
        "  [run] {tag}: best eval acc {:.4} in {:.0}s",
        out.best_eval_acc, secs
    );
    TimedRun { out, secs }
}

fn shared_runs() -> &'static SharedRuns {
    static RUNS: OnceLock<SharedRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let ring = GraphSpec::Ring { n: 64 };
        let chain = GraphSpec::Chain { n: 64 };
        let l3 = LayerKind::L3 {
            orders: vec![1],
            shared: false,
        };
        let l3_shared = LayerKind::L3 {
            orders: vec![1],
            shared: true,
        };
        let cheb5 = LayerKind::Cheb { degree: 5 };
        let run_set = |graph: GraphSpec, layer: &LayerKind, tag: &str| -> Vec<TimedRun> {
            SEEDS
                .iter()
                .map(|&s| timed_train(&updown_config(graph, layer.clone(), s, 0.0), &format!("{tag} seed {s}")))
                .collect()
        };
        SharedRuns {
            ring_l3: run_set(ring, &l3, "ring l3net"),
            ring_cheb: run_set(ring, &cheb5, "ring cheb5"),
            chain_l3: run_set(chain, &l3, "chain l3net"),
            chain_cheb: run_set(chain, &cheb5, "chain cheb5"),
            ring_shared: run_set(ring, &l3_shared, "ring l3net shared"),
            ring_l3_reg: timed_train(
                &updown_config(ring, l3, SEEDS[0], 0.5),
                "ring l3net reg0.5",
            ),
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn accs(runs: &[TimedRun]) -> Vec<f64> {
    runs.iter().map(|r| r.out.best_eval_acc * 100.0).collect()
}

#[test]
fn a01_updown_separation() {
    let runs = shared_runs();
    let ring_l3 = mean(&accs(&runs.ring_l3));
    let ring_cheb = mean(&accs(&runs.ring_cheb));
    let chain_l3 = mean(&accs(&runs.chain_l3));
    let chain_cheb = mean(&accs(&runs.chain_cheb));
    let slowest = runs
        .ring_l3
        .iter()
        .chain(&runs.ring_cheb)
        .chain(&runs.chain_l3)
        .chain(&runs.chain_cheb)
        .map(|r| r.secs)
        .fold(0.0, f64::max);
    let pass = ring_l3 >= 99.0 && ring_cheb <= 65.0 && chain_l3 >= 99.0 && chain_cheb <= 65.0
        && slowest <= 600.0;
    println!(
        "[{}] up/down separation: ring l3net {ring_l3:.2}% (>=99.0) vs cheb5 {ring_cheb:.2}% (<=65.0); \
         chain l3net {chain_l3:.2}% (>=99.0) vs cheb5 {chain_cheb:.2}% (<=65.0); slowest run {slowest:.0}s (<=600)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn a02_shared_basis_separation_and_template_shape() {
    let runs = shared_runs();
    let shared_acc = mean(&accs(&runs.ring_shared));
    let mut sign_changes = true;
    for run in &runs.ring_shared {
        let (_, model) = run.out.best.restore_model().expect("checkpoint restores");
        let banks = model.banks();
        let (_, fb) = banks.first().expect("first conv is a filter bank");
        let template = fb.basis[0].data();
        let max = template.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = template.iter().cloned().fold(f64::INFINITY, f64::min);
        eprintln!("  [template] {:?} (max {max:.4}, min {min:.4})", template);
        sign_changes &= max > 0.0 && min < 0.0;
    }
    let pass = shared_acc >= 99.5 && sign_changes;
    println!(
        "[{}] shared-basis variant: ring accuracy {shared_acc:.2}% (>=99.5), learned template \
         sign change in all {} seeds: {sign_changes}",
        if pass { "PASS" } else { "FAIL" },
        runs.ring_shared.len()
    );
    assert!(pass);
}

fn bank_eval(fb: &FilterBank, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), false);
    let y = fb.forward(&mut tape, xid, Activation::Id).unwrap();
    tape.value(y).clone()
}

#[test]
fn a03_reduction_equivalence() {
    // 50 random parameter draws x 50 random inputs per reduction and graph
    let draws = 50;
    let inputs = 50;
    let tol = 1e-10;
    let mut worst_overall: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for g in [Graph::ring(8).unwrap(), Graph::grid(7, 7).unwrap()] {
        let n = g.n();
        let (ci, co) = (2, 2);
        let mut worst = [0.0f64; 4]; // cheb, gcn, gat, edgenet
        for _ in 0..draws {
            let cheb = ChebLayer::new(&g, 3, ci, co, &mut rng).unwrap();
            let fb_cheb = chebnet_to_l3net(&cheb, &g).unwrap();
            let gcn = ChebLayer::gcn(&g, ci, co, &mut rng).unwrap();
            let fb_gcn = chebnet_to_l3net(&gcn, &g).unwrap();
            let gat = GatLayer::new(&g, 3, 4, ci, co, &mut rng);
            let edge = EdgeNetLayer::new(&g, 3, ci, co, &mut rng);
            let fb_edge = edgenet_to_l3net(&edge, &g).unwrap();
            for _ in 0..inputs {
                let mut x = Tensor::zeros(&[1, n, ci]);
                for v in x.data_mut() {
                    *v = rng.random_range(-1.0..=1.0);
                }
                let evals: [(usize, Tensor, Tensor); 4] = [
                    (0, bank_eval(&fb_cheb, &x), {
                        let mut t = Tape::new();
                        let id = t.leaf(x.clone(), false);
                        let y = cheb.forward(&mut t, id, Activation::Id).unwrap();
                        t.value(y).clone()
                    }),
                    (1, bank_eval(&fb_gcn, &x), {
                        let mut t = Tape::new();
                        let id = t.leaf(x.clone(), false);
                        let y = gcn.forward(&mut t, id, Activation::Id).unwrap();
                        t.value(y).clone()
                    }),
                    (2, {
                        let x_flat = Tensor::from_vec(&[n, ci], x.data().to_vec());
                        let fb_gat = gat_to_l3net(&gat, &x_flat).unwrap();
                        bank_eval(&fb_gat, &x)
                    }, {
                        let mut t = Tape::new();
                        let id = t.leaf(x.clone(), false);
                        let y = gat.forward(&mut t, id, Activation::Id).unwrap();
                        t.value(y).clone()
                    }),
                    (3, bank_eval(&fb_edge, &x), {
                        let mut t = Tape::new();
                        let id = t.leaf(x.clone(), false);
                        let y = edge.forward(&mut t, id, Activation::Id).unwrap();
                        t.value(y).clone()
                    }),
                ];
                for (idx, got, want) in evals {
                    worst[idx] = worst[idx].max(max_discrepancy(got.data(), want.data()));
                }
            }
        }
        for w in worst {
            worst_overall = worst_overall.max(w);
        }
        eprintln!(
            "  [reductions on n={n}] cheb {:.2e}, gcn {:.2e}, gat(frozen) {:.2e}, edgenet {:.2e}",
            worst[0], worst[1], worst[2], worst[3]
        );
    }
    let pass = worst_overall <= tol;
    println!(
        "[{}] reduction equivalence: max discrepancy {worst_overall:.2e} over {draws}x{inputs} \
         draws/inputs on ring(8) and grid(7,7) (<= {tol:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn a04_spectral_inexpressibility() {
    let g = Graph::ring(8).unwrap();
    let b = difference_filter_matrix(&g);
    let res = spectral_residual(&g, &b).unwrap();
    let normalized = res.residual / b.frobenius_norm();
    // pre-build least-squares oracle pinned this at exactly 0.5
    let pinned = 0.5;
    let a_sym = g.normalized_adjacency(AdjacencyMode::Sym).unwrap().to_mat();
    let r_a = spectral_residual(&g, &a_sym).unwrap().residual;
    let r_i = spectral_residual(&g, &Mat::identity(8)).unwrap().residual;
    let eigen_route = spectral_residual_eigen(&g, &b).unwrap();
    let pass = normalized > 0.1
        && (normalized - pinned).abs() <= 1e-9
        && r_a <= 1e-10
        && r_i <= 1e-10
        && (res.residual - eigen_route).abs() <= 1e-9;
    println!(
        "[{}] spectral inexpressibility: difference-filter residual {normalized:.12} \
         (pinned {pinned}, > 0.1); residual(A_sym) {r_a:.2e}, residual(I) {r_i:.2e} (<= 1e-10)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn a05_permutation_equivariance() {
    let trials = 100;
    let mut worst_spectral: f64 = 0.0;
    for g in [Graph::ring(8).unwrap(), Graph::grid(7, 7).unwrap()] {
        for kind in [SpectralLayerKind::Cheb { degree: 5 }, SpectralLayerKind::Gcn] {
            let dev = spectral_equivariance_check(kind, &g, trials, 3).unwrap();
            worst_spectral = worst_spectral.max(dev);
        }
    }
    let g = Graph::ring(8).unwrap();
    let fb = difference_bank(&g).unwrap();
    let perm = mirror_flip_permutation(&g, 3);
    let deviation = bank_automorphism_deviation(&fb, &perm, &flip_probe(8)).unwrap();
    let pinned = 2f64.sqrt();
    let pass = worst_spectral <= 1e-12 && deviation >= 0.1 && (deviation - pinned).abs() <= 1e-12;
    println!(
        "[{}] permutation equivariance: spectral layers max deviation {worst_spectral:.2e} over \
         {trials} trials (<= 1e-12); difference bank mirror-flip deviation {deviation:.12} \
         (pinned sqrt(2), >= 0.1)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn a06_strong_regularization_limit() {
    let mut min_cosine = f64::INFINITY;
    let mut all_signs = true;
    let mut patches = 0usize;
    for g in [Graph::ring(8).unwrap(), Graph::grid(7, 7).unwrap()] {
        let ctx = RegContext::new(&g, &[1], 0.0).unwrap();
        let report =
            verify_strong_reg_limit(&g, &[1], &uniform_floors(g.n(), 1, 1.0), &ctx).unwrap();
        min_cosine = min_cosine.min(report.min_cosine);
        all_signs &= report.all_sign_constant;
        patches += report.patches.len();
    }
    let pass = min_cosine >= 1.0 - 1e-8 && all_signs;
    println!(
        "[{}] strong-regularization limit: {patches} order-1 patches, constrained minimizer vs \
         first-eigenvector min |cosine| {min_cosine:.12} (>= 1 - 1e-8), sign-constant: {all_signs}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn a07_stability_bounds() {
    let runs = shared_runs();
    let trials = 1000;

    // plain bound: every trained bank of the unregularized and regularized
    // ring runs, both conv layers
    let mut total_violations = 0usize;
    let mut checked_banks = 0usize;
    for (tag, out) in [
        ("lambda=0", &runs.ring_l3[0].out),
        ("lambda=0.5", &runs.ring_l3_reg.out),
    ] {
        let (_, model) = out.best.restore_model().unwrap();
        for (conv_idx, fb) in model.banks() {
            let v = verify_theorem1(fb, trials, 41 + conv_idx as u64).unwrap();
            eprintln!(
                "  [{tag} conv{conv_idx}] bound1 {:.4}, max ratio {:.4}, slack {:.2}",
                v.bound1, v.max_ratio, v.slack
            );
            total_violations += v.violations;
            checked_banks += 1;
        }
    }

    // energy-weighted bound on the regularized bank under white-noise input
    // perturbations, plus the regime comparison
    let (_, reg_model) = runs.ring_l3_reg.out.best.restore_model().unwrap();
    let (_, unreg_model) = runs.ring_l3[0].out.best.restore_model().unwrap();
    let mut bound2_violations = 0usize;
    let mut regime_holds = true;
    let mut beta2_shrinks = true;
    for ((ci, fb_reg), (_, fb_unreg)) in reg_model.banks().into_iter().zip(unreg_model.banks()) {
        let g = &reg_model.conv_graphs[ci];
        let ctx = RegContext::for_bank(g, fb_reg, 0.0).unwrap();
        let v2 = verify_theorem2(fb_reg, &ctx, PerturbationFamily::WhiteNoise, trials, 99).unwrap();
        bound2_violations += v2.violations;
        regime_holds &= v2.improves_on_bound1;
        let ctx_u = RegContext::for_bank(g, fb_unreg, 0.0).unwrap();
        let c_reg = stability_constants(fb_reg, &ctx, None).unwrap();
        let c_unreg = stability_constants(fb_unreg, &ctx_u, None).unwrap();
        eprintln!(
            "  [conv{ci}] beta1 {:.4} beta2(reg) {:.4} beta2(unreg) {:.4} rho(white) {:.4} \
             rho*beta2 {:.4} vs beta1 {:.4}",
            c_reg.beta1,
            c_reg.beta2,
            c_unreg.beta2,
            v2.rho,
            v2.rho * c_reg.beta2,
            v2.beta1
        );
        beta2_shrinks &= c_reg.beta2 < c_unreg.beta2;
    }
    if !regime_holds {
        eprintln!(
            "  [warn] rho*beta2 < beta1 did not hold for every layer (reported, not asserted: \
             a predicted regime, not a hypothesis of the bound)"
        );
    }
    if !beta2_shrinks {
        eprintln!("  [warn] beta2 did not strictly shrink under reg0.5 on every layer");
    }

    let pass = total_violations == 0 && bound2_violations == 0;
    println!(
        "[{}] stability bounds: {trials} Monte-Carlo trials x {checked_banks} trained banks, \
         plain-bound violations {total_violations}, energy-bound violations {bound2_violations} \
         (= 0); regularized regime rho*beta2 < beta1: {regime_holds}; beta2 shrinks under reg: \
         {beta2_shrinks}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

/// Pack a model's parameters plus the input batch into one flat vector and
/// run the central-difference check on the cross-entropy loss.
fn model_grad_check(
    mut model: Model,
    x0: &Tensor,
    labels: Vec<usize>,
    training: bool,
) -> f64 {
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let mut theta: Vec<f64> = Vec::new();
    for p in model.params() {
        theta.extend_from_slice(p.data());
    }
    theta.extend_from_slice(x0.data());
    let xshape = x0.shape().to_vec();
    let labels = std::sync::Arc::new(labels);
    let model_cell = std::cell::RefCell::new(&mut model);
    let buffers_snapshot: Vec<Vec<f64>> = model_cell
        .borrow()
        .buffers()
        .into_iter()
        .cloned()
        .collect();

    let err = grad_check(
        |t| {
            let mut m = model_cell.borrow_mut();
            // keep running stats frozen across probe evaluations
            for (dst, src) in m.buffers_mut().into_iter().zip(&buffers_snapshot) {
                dst.copy_from_slice(src);
            }
            let mut off = 0;
            for (p, len) in m.params_mut().into_iter().zip(&sizes) {
                p.data_mut().copy_from_slice(&t[off..off + len]);
                off += len;
            }
            let mut tape = Tape::new();
            let ids = m.register(&mut tape);
            let x = tape.leaf(Tensor::from_vec(&xshape, t[off..].to_vec()), true);
            let logits = m.forward(&mut tape, &ids, x, training).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            let mut grad = Vec::with_capacity(t.len());
            for id in &ids {
                grad.extend_from_slice(tape.grad_or_zeros(*id).data());
            }
            grad.extend_from_slice(tape.grad_or_zeros(x).data());
            (tape.value(loss).item(), grad)
        },
        &theta,
        1e-5,
    )
    .unwrap();
    let _ = shapes;
    err
}

#[test]
fn a08_gradient_integrity() {
    let tol = 1e-4;
    let mut worst_layer: f64 = 0.0;

    // every layer kind through a sum-of-squares head
    let g = Graph::ring(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut x0 = Tensor::zeros(&[2, 8, 2]);
    for v in x0.data_mut() {
        *v = rng.random_range(-1.0..=1.0);
    }
    let check_layer = |params: Vec<&Tensor>,
                       forward: &dyn Fn(&mut Tape, &[l3net::tape::TensorId], l3net::tape::TensorId) -> l3net::tape::TensorId,
                       x0: &Tensor|
     -> f64 {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let mut theta: Vec<f64> = Vec::new();
        for p in &params {
            theta.extend_from_slice(p.data());
        }
        theta.extend_from_slice(x0.data());
        let xshape = x0.shape().to_vec();
        grad_check(
            |t| {
                let mut tape = Tape::new();
                let mut ids = Vec::new();
                let mut off = 0;
                for (len, shape) in sizes.iter().zip(&shapes) {
                    ids.push(tape.leaf(Tensor::from_vec(shape, t[off..off + len].to_vec()), true));
                    off += len;
                }
                let x = tape.leaf(Tensor::from_vec(&xshape, t[off..].to_vec()), true);
                let y = forward(&mut tape, &ids, x);
                let loss = tape.sum_squares(y);
                tape.backward(loss).unwrap();
                let mut grad = Vec::with_capacity(t.len());
                for id in &ids {
                    grad.extend_from_slice(tape.grad_or_zeros(*id).data());
                }
                grad.extend_from_slice(tape.grad_or_zeros(x).data());
                (tape.value(loss).item(), grad)
            },
            &theta,
            1e-5,
        )
        .unwrap()
    };

    let fb = FilterBank::new(&g, &[0, 1, 2], 2, 3, false, &mut rng).unwrap();
    worst_layer = worst_layer.max(check_layer(
        fb.params(),
        &|t, ids, x| fb.forward_with_ids(t, ids, x, Activation::Relu).unwrap(),
        &x0,
    ));
    let fb_shared = FilterBank::new(&g, &[1], 2, 3, true, &mut rng).unwrap();
    worst_layer = worst_layer.max(check_layer(
        fb_shared.params(),
        &|t, ids, x| fb_shared.forward_with_ids(t, ids, x, Activation::Relu).unwrap(),
        &x0,
    ));
    let cheb = ChebLayer::new(&g, 4, 2, 3, &mut rng).unwrap();
    worst_layer = worst_layer.max(check_layer(
        cheb.params(),
        &|t, ids, x| cheb.forward_with_ids(t, ids, x, Activation::Relu).unwrap(),
        &x0,
    ));
    let gcn = ChebLayer::gcn(&g, 2, 3, &mut rng).unwrap();
    worst_layer = worst_layer.max(check_layer(
        gcn.params(),
        &|t, ids, x| gcn.forward_with_ids(t, ids, x, Activation::Relu).unwrap(),
        &x0,
    ));
    let gat = GatLayer::new(&g, 2, 3, 2, 3, &mut rng);
    worst_layer = worst_layer.max(check_layer(
        gat.params(),
        &|t, ids, x| gat.forward_with_ids(t, ids, x, Activation::Relu).unwrap(),
        &x0,
    ));
    let edge = EdgeNetLayer::new(&g, 3, 2, 3, &mut rng);
    worst_layer = worst_layer.max(check_layer(
        edge.params(),
        &|t, ids, x| edge.forward_with_ids(t, ids, x, Activation::Relu).unwrap(),
        &x0,
    ));

    // the regularizer (pure quadratic: should be far below the budget)
    let fb_reg = FilterBank::new(&g, &[1, 2], 1, 2, false, &mut rng).unwrap();
    let ctx = RegContext::for_bank(&g, &fb_reg, 0.0).unwrap();
    let sizes: Vec<usize> = fb_reg.basis.iter().map(|b| b.len()).collect();
    let mut theta = Vec::new();
    for b in &fb_reg.basis {
        theta.extend_from_slice(b.data());
    }
    let reg_err = grad_check(
        |t| {
            let mut bank = fb_reg.clone();
            let mut off = 0;
            for (k, len) in sizes.iter().enumerate() {
                bank.basis[k].data_mut().copy_from_slice(&t[off..off + len]);
                off += len;
            }
            let v = reg_penalty(&bank, &ctx).unwrap();
            let gs = reg_penalty_grad(&bank, &ctx).unwrap();
            let mut flat = Vec::with_capacity(t.len());
            for gk in gs {
                flat.extend_from_slice(gk.data());
            }
            (v, flat)
        },
        &theta,
        1e-5,
    )
    .unwrap();

    // full updown2 loss on ring(64)
    let ud_cfg = updown_config(
        GraphSpec::Ring { n: 64 },
        LayerKind::L3 {
            orders: vec![1],
            shared: false,
        },
        0,
        0.0,
    );
    let g64 = Graph::ring(64).unwrap();
    let mut rng64 = ChaCha8Rng::seed_from_u64(5);
    let model = build_architecture(&ud_cfg, &g64, 1, &mut rng64).unwrap();
    let (data_train, _) = gen_updown(&UpDownConfig {
        graph: UpDownGraph::Ring,
        n: 64,
        n_train: 4,
        n_test: 0,
        threshold: 0.1,
        std: 1.5,
        seed: 3,
    });
    let (xb, labels) = data_train.batch(&[0, 1, 2, 3]);
    let updown_err = model_grad_check(model, &xb, labels, true);

    // full mnist2 loss on grid(7,7) with batch-norm in training mode
    let mn_cfg = ExperimentConfig {
        architecture: ArchitectureId::Mnist2,
        layer: LayerKind::L3 {
            orders: vec![1, 1, 2],
            shared: false,
        },
        graph: GraphSpec::Grid { h: 7, w: 7 },
        dataset: DatasetSpec::Mnist {
            dir: "unused".into(),
            factor: 4,
            noise: None,
        },
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        batch_size: 3,
        schedule: Schedule::Constant,
        epochs: 1,
        reg_lambda: 0.0,
        seed: 0,
    };
    let g7 = Graph::grid(7, 7).unwrap();
    let mut rng7 = ChaCha8Rng::seed_from_u64(9);
    let model = build_architecture(&mn_cfg, &g7, 1, &mut rng7).unwrap();
    let mut xb = Tensor::zeros(&[3, 49, 1]);
    for v in xb.data_mut() {
        *v = rng7.random_range(0.0..=1.0);
    }
    let mnist_err = model_grad_check(model, &xb, vec![3, 1, 7], true);

    let pass =
        worst_layer <= tol && reg_err <= 1e-6 && updown_err <= tol && mnist_err <= tol;
    println!(
        "[{}] gradient integrity: layers {worst_layer:.2e}, regularizer {reg_err:.2e} (<= 1e-6), \
         full updown2 loss {updown_err:.2e}, full mnist2 loss {mnist_err:.2e} (all <= {tol:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Extended (data- and compute-heavy) checks, ignored by default.
// ---------------------------------------------------------------------------

fn mnist_dir() -> std::path::PathBuf {
    if let Ok(dir) = std::env::var("L3_MNIST_DIR") {
        return dir.into();
    }
    let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/mnist");
    workspace
}

fn mnist_config(layer: LayerKind, seed: u64, reg_lambda: f64, noise_std: Option<f64>) -> ExperimentConfig {
    ExperimentConfig {
        architecture: ArchitectureId::Mnist2,
        layer,
        graph: GraphSpec::Grid { h: 7, w: 7 },
        dataset: DatasetSpec::Mnist {
            dir: mnist_dir().to_string_lossy().into_owned(),
            factor: 4,
            noise: noise_std.map(|std| l3net::data::NoiseSpec {
                kind: l3net::data::NoiseKind::Gaussian { std },
                seed: 7,
            }),
        },
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        batch_size: 100,
        schedule: Schedule::Plateau {
            patience: 15,
            factor: 0.1,
            min_delta: 1e-4,
        },
        epochs: 200,
        reg_lambda,
        seed,
    }
}

fn require_mnist() {
    let dir = mnist_dir();
    assert!(
        dir.join("train-images-idx3-ubyte").exists(),
        "MNIST IDX files not found under {} — place train-images-idx3-ubyte, \
         train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte there \
         (or set L3_MNIST_DIR)",
        dir.display()
    );
}

#[test]
#[ignore = "needs MNIST IDX files and roughly an hour per training run"]
fn a09_mnist7_clean_extended() {
    require_mnist();
    let l3_accs: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let cfg = mnist_config(
                LayerKind::L3 {
                    orders: vec![1, 1, 2],
                    shared: false,
                },
                s,
                0.0,
                None,
            );
            timed_train(&cfg, &format!("mnist7 l3net(1;1;2) seed {s}"))
                .out
                .best_eval_acc
                * 100.0
        })
        .collect();
    let cheb_accs: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let cfg = mnist_config(LayerKind::Cheb { degree: 3 }, s, 0.0, None);
            timed_train(&cfg, &format!("mnist7 cheb3 seed {s}"))
                .out
                .best_eval_acc
                * 100.0
        })
        .collect();
    let l3_mean = mean(&l3_accs);
    let cheb_mean = mean(&cheb_accs);
    let pass = l3_mean >= 92.0 && (91.5..=94.0).contains(&cheb_mean);
    println!(
        "[{}] mnist 7x7 clean: l3net(1;1;2) mean {l3_mean:.2}% (>=92.0), cheb3 mean \
         {cheb_mean:.2}% (in [91.5, 94.0])",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
#[ignore = "needs MNIST IDX files and roughly an hour per training run"]
fn a10_regularization_robustness_extended() {
    require_mnist();
    let layer = LayerKind::L3 {
        orders: vec![1, 1, 2],
        shared: false,
    };
    let mut plain = Vec::new();
    let mut reg = Vec::new();
    for &s in &SEEDS {
        let cfg = mnist_config(layer.clone(), s, 0.0, Some(0.2));
        plain.push(timed_train(&cfg, &format!("mnist7 noisy seed {s}")).out.best_eval_acc * 100.0);
        let cfg = mnist_config(layer.clone(), s, 0.5, Some(0.2));
        reg.push(
            timed_train(&cfg, &format!("mnist7 noisy reg0.5 seed {s}"))
                .out
                .best_eval_acc
                * 100.0,
        );
    }
    let gain = mean(&reg) - mean(&plain);
    let pass = gain >= 0.3;
    println!(
        "[{}] regularization robustness at gaussian std 0.2: reg0.5 mean {:.2}% vs plain mean \
         {:.2}% (gain {gain:.2} >= 0.3)",
        if pass { "PASS" } else { "FAIL" },
        mean(&reg),
        mean(&plain)
    );
    assert!(pass);
}
