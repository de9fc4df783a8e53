//! Acceptance gate: one test per release criterion, each printing a single
//! `ACCEPTANCE <name>: PASS/FAIL (...)` line. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.
//!
//! The correlation and ordering checks share one fleet of trained models
//! (baseline / SAM / Fisher, eight seeds each, on the default domain suite),
//! built once behind a `OnceLock`.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestError, TestRunner};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use lprobe::analysis::pearson;
use lprobe::datagen::{
    default_manifest, derive_seed, suite_from_manifest, Dataset, DomainSpec, DomainSuite,
    SplitCounts, SuiteManifest, DEFAULT_GEN_SEED, DEFAULT_PROTOTYPES_SEED,
};
use lprobe::graph::{Bindings, GraphBuilder, NodeId};
use lprobe::measures::{
    frobenius_distance, margin, margin_of_logits, measure_all, phi_alpha_on, phi_difference_on,
    phi_difference_with_noise, AlphaSharpnessConfig, GraphLossSurface, LossSurface, MeasureError,
    MeasureIdentity, MeasureReport, SharpnessConfig, DEFAULT_MEASURE_SEED,
};
use lprobe::model::{init_model, Model, ModelSpec};
use lprobe::objectives::{
    sam_step_on, AdamWState, Objective, ObjectiveError, TrainConfig, DEFAULT_BETAS, DEFAULT_EPS,
};
use lprobe::tensor::Tensor;

/// Prints the per-criterion verdict line, then enforces it.
fn report(name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {name}: {status} ({detail})");
    assert!(ok, "acceptance criterion '{name}' failed: {detail}");
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    xs[xs.len() / 2]
}

// ---------------------------------------------------------------------------
// Shared fleet: baseline / SAM / Fisher x 8 seeds on the default suite.
// ---------------------------------------------------------------------------

struct FleetRun {
    objective: Objective,
    seed: u64,
    model: Model,
    reports: Vec<MeasureReport>,
}

struct Fleet {
    suite: DomainSuite,
    runs: Vec<FleetRun>,
}

static FLEET: OnceLock<Fleet> = OnceLock::new();

fn fleet() -> &'static Fleet {
    FLEET.get_or_init(build_fleet)
}

fn build_fleet() -> Fleet {
    let manifest = default_manifest(DEFAULT_PROTOTYPES_SEED, DEFAULT_GEN_SEED);
    let suite = suite_from_manifest(&manifest).expect("default suite generates");

    let combos: Vec<(Objective, u64)> = [Objective::Baseline, Objective::Sam, Objective::Fisher]
        .iter()
        .flat_map(|&o| (0..8u64).map(move |s| (o, s)))
        .collect();

    let sharp = SharpnessConfig::defaults(DEFAULT_MEASURE_SEED);
    let alpha = AlphaSharpnessConfig::defaults(DEFAULT_MEASURE_SEED);

    let runs: Vec<FleetRun> = combos
        .par_iter()
        .map(|&(objective, seed)| {
            let spec = ModelSpec {
                input_dim: suite.input_dim,
                hidden_dims: vec![16],
                num_classes: suite.num_classes,
                init_seed: derive_seed(seed, "init"),
            };
            let model = init_model(&spec).expect("init");
            let cfg = TrainConfig::defaults(objective, seed);
            let result = lprobe::objectives::train(model, &suite.anchor, &cfg).expect("train");
            let identity = MeasureIdentity {
                model_id: format!("{}-seed{}", objective.name(), seed),
                objective: objective.name().to_string(),
                seed,
            };
            let outcome = measure_all(&identity, &result.model, &suite, &sharp, &alpha, false)
                .expect("measure");
            assert!(
                outcome.row_errors.is_empty(),
                "measure rows failed: {:?}",
                outcome.row_errors
            );
            FleetRun {
                objective,
                seed,
                model: result.model,
                reports: outcome.reports,
            }
        })
        .collect();

    Fleet { suite, runs }
}

// ---------------------------------------------------------------------------
// Criterion: per-seed correlation sign pattern for the baseline objective.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_margin_and_sharpness_sign_pattern() {
    let fleet = fleet();
    let mut passing = 0usize;
    let mut details = Vec::new();
    for seed in 0..8u64 {
        let run = fleet
            .runs
            .iter()
            .find(|r| r.objective == Objective::Baseline && r.seed == seed)
            .expect("baseline run exists");
        let accs: Vec<f64> = run.reports.iter().map(|r| r.accuracy).collect();
        let margins: Vec<f64> = run.reports.iter().map(|r| r.margin).collect();
        let phis: Vec<f64> = run.reports.iter().map(|r| r.phi_difference).collect();
        let r_margin = pearson(&margins, &accs).expect("margin correlation");
        let r_phi = pearson(&phis, &accs).expect("sharpness correlation");
        let ok = r_margin >= 0.5 && r_phi <= -0.2;
        if ok {
            passing += 1;
        }
        details.push(format!(
            "seed {seed}: r_margin={r_margin:+.3} r_phi={r_phi:+.3}{}",
            if ok { "" } else { " [miss]" }
        ));
    }
    report(
        "sign-pattern",
        passing >= 6,
        &format!(
            "{passing}/8 seeds with r(margin,acc) >= +0.5 and r(phi_difference,acc) <= -0.2; {}",
            details.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: SAM and the Fisher penalty land in flatter minima than baseline.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_flat_objectives_reduce_sharpness() {
    let fleet = fleet();
    let mean_phi = |objective: Objective| -> f64 {
        let values: Vec<f64> = fleet
            .runs
            .iter()
            .filter(|r| r.objective == objective)
            .flat_map(|r| r.reports.iter().map(|rep| rep.phi_difference))
            .collect();
        assert_eq!(values.len(), 8 * fleet.suite.shifted.len());
        mean(&values)
    };
    let base = mean_phi(Objective::Baseline);
    let sam = mean_phi(Objective::Sam);
    let fisher = mean_phi(Objective::Fisher);
    report(
        "flatness-ordering",
        sam < base && fisher < base,
        &format!(
            "mean phi_difference at noise 0.01: baseline={base:.4e}, sam={sam:.4e}, fisher={fisher:.4e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: difference sharpness is at least 3x faster than the alpha search.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_difference_sharpness_speed_ratio() {
    let fleet = fleet();
    let run = &fleet.runs[0];
    let indices: Vec<usize> = (0..8).collect();
    let batch = fleet.suite.anchor.val.batch(&indices);
    let surface = GraphLossSurface::new(&run.model, batch).expect("surface");
    let sharp = SharpnessConfig::defaults(DEFAULT_MEASURE_SEED);
    let alpha = AlphaSharpnessConfig::defaults(DEFAULT_MEASURE_SEED);

    let mut diff_secs = Vec::new();
    let mut alpha_secs = Vec::new();
    for _ in 0..5 {
        let t = Instant::now();
        let phi = phi_difference_on(&surface, run.model.weights(), &sharp).expect("phi");
        diff_secs.push(t.elapsed().as_secs_f64());
        assert!(phi.is_finite());

        let t = Instant::now();
        let outcome = phi_alpha_on(
            &surface,
            run.model.weights(),
            run.model.init_weights(),
            &alpha,
        )
        .expect("alpha");
        alpha_secs.push(t.elapsed().as_secs_f64());
        let _ = outcome;
    }
    let med_diff = median(&mut diff_secs);
    let med_alpha = median(&mut alpha_secs);
    let ratio = med_alpha / med_diff;
    report(
        "sharpness-speed",
        med_diff <= med_alpha / 3.0,
        &format!(
            "batch 8, median of 5 trials: phi_difference {med_diff:.3e}s vs phi_alpha {med_alpha:.3e}s, ratio {ratio:.1}x (need >= 3x)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: 1-D quadratic closed form for difference sharpness.
// ---------------------------------------------------------------------------

/// `L(w) = sum_i c_i * w_i^2`, minimum at the origin.
struct QuadraticSurface {
    coeffs: Vec<f64>,
}

impl LossSurface for QuadraticSurface {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }
    fn loss(&self, w: &[f64]) -> Result<f64, MeasureError> {
        Ok(w.iter().zip(&self.coeffs).map(|(w, c)| c * w * w).sum())
    }
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, MeasureError> {
        Ok(w.iter().zip(&self.coeffs).map(|(w, c)| 2.0 * c * w).collect())
    }
}

#[test]
fn acceptance_difference_sharpness_closed_form() {
    // w0 = 0; injected noise 0.1; ascent 0.05; radius factor 0.05.
    // w = 0.1, grad = 0.2, w' = 0.11, radius = 0.0055, projection hits,
    // final w' = 0.0055, phi = 0.0055^2 = 3.025e-5.
    let surface = QuadraticSurface { coeffs: vec![1.0] };
    let cfg = SharpnessConfig {
        noise_scale: 0.01,
        ascent_coeff: 0.05,
        radius_lambda: 0.05,
        batch_size: 8,
        seed: 0,
    };
    let phi = phi_difference_with_noise(&surface, &[0.0], &[0.1], &cfg).expect("phi");
    let expected = 3.025e-5;
    let rel = (phi - expected).abs() / expected;
    report(
        "difference-sharpness-oracle",
        rel <= 1e-12,
        &format!("phi={phi:.16e}, expected {expected:.16e}, relative error {rel:.2e} (need <= 1e-12)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: closed-form quadratic for the alpha-sharpness search.
// ---------------------------------------------------------------------------

/// `L(w) = 0.5 * (w - center)^2` in one dimension.
struct ShiftedQuadratic {
    center: f64,
}

impl LossSurface for ShiftedQuadratic {
    fn dim(&self) -> usize {
        1
    }
    fn loss(&self, w: &[f64]) -> Result<f64, MeasureError> {
        let d = w[0] - self.center;
        Ok(0.5 * d * d)
    }
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, MeasureError> {
        Ok(vec![w[0] - self.center])
    }
}

#[test]
fn acceptance_alpha_sharpness_closed_form() {
    // Measured point w = 1 (the minimum), init w = 0, offset 0.1. The box
    // max at radius a is 0.5*a^2, so the largest feasible radius is
    // a* = sqrt(0.2) and phi = (1-0)^2 / (4 * 0.2) = 1.25.
    let surface = ShiftedQuadratic { center: 1.0 };
    let cfg = AlphaSharpnessConfig {
        loss_target_offset: 0.1,
        ascent_steps: 20,
        binary_search_iters: 48,
        alpha_lo: 1e-3,
        alpha_hi: 2.0,
        seed: 7,
    };
    let outcome = phi_alpha_on(&surface, &[1.0], &[0.0], &cfg).expect("search runs");
    let alpha_star = 0.2f64.sqrt();
    let (alpha, phi) = (
        outcome.alpha.unwrap_or(f64::NAN),
        outcome.phi.unwrap_or(f64::NAN),
    );
    let alpha_err = (alpha - alpha_star).abs();
    let phi_err = (phi - 1.25).abs();
    report(
        "alpha-sharpness-oracle",
        !outcome.failed && alpha_err <= 1e-6 && phi_err <= 1e-6,
        &format!(
            "48 bisection iterations: alpha={alpha:.9} (expected {alpha_star:.9}, err {alpha_err:.2e}), phi={phi:.9} (expected 1.25, err {phi_err:.2e})"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: autodiff vs central differences on 100 random graphs.
// ---------------------------------------------------------------------------

const ALL_OP_KINDS: [&str; 13] = [
    "matmul",
    "add",
    "relu",
    "softmax",
    "log",
    "negate",
    "sum",
    "mean",
    "scale",
    "square",
    "l2-norm",
    "cross-entropy",
    "kl-divergence",
];

struct GraphCase {
    graph: lprobe::graph::ComputeGraph,
    bindings: Bindings,
    wrt: Vec<NodeId>,
    ops: &'static [&'static str],
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid tensor")
}

fn label_tensor(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor {
    let data: Vec<f64> = (0..rows)
        .map(|_| rng.gen_range(0..classes) as f64)
        .collect();
    Tensor::new(vec![rows], data).expect("valid labels")
}

/// Draw leaf values until every recorded relu input is clear of the kink,
/// so the central difference stays on one linear piece.
fn bind_away_from_kinks(
    graph: &lprobe::graph::ComputeGraph,
    rng: &mut ChaCha8Rng,
    draw: &mut dyn FnMut(&mut ChaCha8Rng) -> Bindings,
    relu_inputs: &[NodeId],
) -> Bindings {
    for _ in 0..64 {
        let bindings = draw(rng);
        let values = graph.evaluate_all(&bindings).expect("evaluates");
        let clear = relu_inputs.iter().all(|id| {
            values[id.0]
                .data()
                .iter()
                .all(|v| v.abs() > 1e-3)
        });
        if clear {
            return bindings;
        }
    }
    panic!("could not draw bindings clear of relu kinks");
}

/// One of five graph templates; together they cover all thirteen op kinds.
fn build_case(idx: usize) -> GraphCase {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xACCE97, &format!("gradcheck/{idx}")));
    let b = rng.gen_range(2..4usize);
    let f = rng.gen_range(2..4usize);
    let h = rng.gen_range(2..4usize);
    let k = rng.gen_range(2..4usize);

    match idx % 5 {
        // Classifier chain: matmul, broadcast add, relu, cross-entropy.
        0 => {
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[b, f], "x");
            let w1 = g.leaf(&[f, h], "w1");
            let b1 = g.leaf(&[h], "b1");
            let w2 = g.leaf(&[h, k], "w2");
            let labels = g.leaf(&[b], "labels");
            let z1 = g.matmul(x, w1).expect("shapes");
            let z1b = g.add(z1, b1).expect("shapes");
            let a1 = g.relu(z1b).expect("shapes");
            let logits = g.matmul(a1, w2).expect("shapes");
            let loss = g.cross_entropy(logits, labels).expect("shapes");
            let graph = g.build(loss).expect("builds");
            let bindings = bind_away_from_kinks(
                &graph,
                &mut rng,
                &mut |rng| {
                    let mut bnd = Bindings::new();
                    bnd.insert(x, rand_tensor(rng, &[b, f]));
                    bnd.insert(w1, rand_tensor(rng, &[f, h]));
                    bnd.insert(b1, rand_tensor(rng, &[h]));
                    bnd.insert(w2, rand_tensor(rng, &[h, k]));
                    bnd.insert(labels, label_tensor(rng, b, k));
                    bnd
                },
                &[z1b],
            );
            GraphCase {
                graph,
                bindings,
                wrt: vec![x, w1, b1, w2],
                ops: &["matmul", "add", "relu", "cross-entropy"],
            }
        }
        // Two softmax branches tied by KL: matmul, softmax, kl-divergence.
        1 => {
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[b, f], "x");
            let wa = g.leaf(&[f, k], "wa");
            let wb = g.leaf(&[f, k], "wb");
            let za = g.matmul(x, wa).expect("shapes");
            let zb = g.matmul(x, wb).expect("shapes");
            let p = g.softmax(za).expect("shapes");
            let q = g.softmax(zb).expect("shapes");
            let loss = g.kl_divergence(p, q).expect("shapes");
            let graph = g.build(loss).expect("builds");
            let mut bindings = Bindings::new();
            bindings.insert(x, rand_tensor(&mut rng, &[b, f]));
            bindings.insert(wa, rand_tensor(&mut rng, &[f, k]));
            bindings.insert(wb, rand_tensor(&mut rng, &[f, k]));
            GraphCase {
                graph,
                bindings,
                wrt: vec![x, wa, wb],
                ops: &["matmul", "softmax", "kl-divergence"],
            }
        }
        // Scaled negative log-likelihood: softmax, log, scale, negate, mean.
        2 => {
            let factor = rng.gen_range(0.3..1.7);
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[b, f], "x");
            let w = g.leaf(&[f, k], "w");
            let z = g.matmul(x, w).expect("shapes");
            let p = g.softmax(z).expect("shapes");
            let lp = g.log(p).expect("shapes");
            let s = g.scale(lp, factor).expect("finite factor");
            let n = g.negate(s).expect("shapes");
            let loss = g.mean(n).expect("shapes");
            let graph = g.build(loss).expect("builds");
            let mut bindings = Bindings::new();
            bindings.insert(x, rand_tensor(&mut rng, &[b, f]));
            bindings.insert(w, rand_tensor(&mut rng, &[f, k]));
            GraphCase {
                graph,
                bindings,
                wrt: vec![x, w],
                ops: &["matmul", "softmax", "log", "scale", "negate", "mean"],
            }
        }
        // Penalized squared activations: add, square, sum, l2-norm, scale.
        3 => {
            let m = rng.gen_range(2..6usize);
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[b, f], "x");
            let w = g.leaf(&[f, h], "w");
            let bias = g.leaf(&[h], "bias");
            let v = g.leaf(&[m], "v");
            let z = g.matmul(x, w).expect("shapes");
            let t = g.add(z, bias).expect("shapes");
            let sq = g.square(t).expect("shapes");
            let total = g.sum(sq).expect("shapes");
            let s1 = g.scale(total, 0.5).expect("finite");
            let s2 = g.l2_norm(v).expect("shapes");
            let loss = g.add(s1, s2).expect("shapes");
            let graph = g.build(loss).expect("builds");
            let mut bindings = Bindings::new();
            bindings.insert(x, rand_tensor(&mut rng, &[b, f]));
            bindings.insert(w, rand_tensor(&mut rng, &[f, h]));
            bindings.insert(bias, rand_tensor(&mut rng, &[h]));
            // Keep the l2 argument away from the origin where the norm is
            // not differentiable.
            let vval = loop {
                let t = rand_tensor(&mut rng, &[m]);
                if t.data().iter().map(|x| x * x).sum::<f64>().sqrt() > 0.5 {
                    break t;
                }
            };
            bindings.insert(v, vval);
            GraphCase {
                graph,
                bindings,
                wrt: vec![x, w, bias, v],
                ops: &["matmul", "add", "square", "sum", "l2-norm", "scale"],
            }
        }
        // Deep mix: relu feature map, log-softmax mean, l2 penalty.
        _ => {
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[b, f], "x");
            let w1 = g.leaf(&[f, h], "w1");
            let w2 = g.leaf(&[h, k], "w2");
            let z1 = g.matmul(x, w1).expect("shapes");
            let a1 = g.relu(z1).expect("shapes");
            let z2 = g.matmul(a1, w2).expect("shapes");
            let sm = g.softmax(z2).expect("shapes");
            let lsm = g.log(sm).expect("shapes");
            let avg = g.mean(lsm).expect("shapes");
            let nll = g.negate(avg).expect("shapes");
            let norm = g.l2_norm(w1).expect("shapes");
            let pen = g.scale(norm, 0.01).expect("finite");
            let loss = g.add(nll, pen).expect("shapes");
            let graph = g.build(loss).expect("builds");
            let bindings = bind_away_from_kinks(
                &graph,
                &mut rng,
                &mut |rng| {
                    let mut bnd = Bindings::new();
                    bnd.insert(x, rand_tensor(rng, &[b, f]));
                    bnd.insert(w1, rand_tensor(rng, &[f, h]));
                    bnd.insert(w2, rand_tensor(rng, &[h, k]));
                    bnd
                },
                &[z1],
            );
            GraphCase {
                graph,
                bindings,
                wrt: vec![x, w1, w2],
                ops: &[
                    "matmul", "relu", "softmax", "log", "mean", "negate", "add", "scale",
                    "l2-norm",
                ],
            }
        }
    }
}

#[test]
fn acceptance_gradcheck_all_op_kinds() {
    let mut covered: BTreeSet<&'static str> = BTreeSet::new();
    let mut coords = 0usize;
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for idx in 0..100 {
        let case = build_case(idx);
        covered.extend(case.ops);
        let exact = case
            .graph
            .gradient(&case.bindings, &case.wrt)
            .expect("autodiff");
        let numeric = case
            .graph
            .finite_difference_gradient(&case.bindings, &case.wrt, 1e-4)
            .expect("finite differences");
        for id in &case.wrt {
            let a = exact[id].data();
            let b = numeric[id].data();
            assert_eq!(a.len(), b.len());
            for (&ga, &gb) in a.iter().zip(b) {
                let rel = (ga - gb).abs() / ga.abs().max(gb.abs()).max(1.0);
                worst = worst.max(rel);
                coords += 1;
                if rel > 1e-4 {
                    failures += 1;
                }
            }
        }
    }
    let all_ops: BTreeSet<&'static str> = ALL_OP_KINDS.iter().copied().collect();
    report(
        "gradient-check",
        failures == 0 && covered == all_ops && coords > 0,
        &format!(
            "100 graphs, {coords} coordinates, {failures} failures, worst relative error {worst:.2e}, {} / 13 op kinds covered",
            covered.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: experiment reruns are byte-identical.
// ---------------------------------------------------------------------------

fn tiny_plan() -> lprobe::analysis::ExperimentPlan {
    let mut domains = vec![DomainSpec::anchor("anchor", 0.6)];
    for m in 1..=2usize {
        domains.push(DomainSpec {
            name: format!("shift{m:02}"),
            shift_angle: 0.25 * m as f64,
            shift_bias: vec![],
            noise_sigma: 0.6,
        });
    }
    let mut alpha = AlphaSharpnessConfig::defaults(DEFAULT_MEASURE_SEED);
    alpha.binary_search_iters = 12;
    alpha.ascent_steps = 8;
    let objectives = [Objective::Baseline, Objective::Consistency]
        .iter()
        .map(|&o| {
            let mut cfg = TrainConfig::defaults(o, 0);
            cfg.epochs = 3;
            cfg
        })
        .collect();
    lprobe::analysis::ExperimentPlan {
        suite: SuiteManifest {
            num_classes: 3,
            input_dim: 6,
            prototypes_seed: 11,
            gen_seed: 12,
            counts: SplitCounts {
                train: 96,
                val: 48,
                test: 48,
            },
            domains,
        },
        hidden_dims: vec![8],
        objectives,
        seeds: vec![0, 1],
        sharpness: SharpnessConfig::defaults(DEFAULT_MEASURE_SEED),
        alpha,
        sweep_noise: false,
        output_dir: "acceptance-plan".into(),
    }
}

#[test]
fn acceptance_experiment_byte_determinism() {
    let plan = tiny_plan();
    let dir = tempfile::tempdir().expect("tempdir");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let sum_a = lprobe::analysis::run_experiment(&plan, &out_a, 1).expect("run a");
    let sum_b = lprobe::analysis::run_experiment(&plan, &out_b, 2).expect("run b");
    assert!(sum_a.fully_succeeded() && sum_b.fully_succeeded());

    let mut identical = true;
    let mut compared = Vec::new();
    for name in ["reports.csv", "correlations.csv"] {
        let a = std::fs::read(out_a.join(name)).expect("artifact a");
        let b = std::fs::read(out_b.join(name)).expect("artifact b");
        identical &= a == b;
        compared.push(format!("{name}: {} bytes", a.len()));
    }
    report(
        "experiment-determinism",
        identical,
        &format!(
            "two runs of one plan (1 vs 2 worker threads) byte-identical; {}",
            compared.join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: invariant properties, 1000 cases each.
// ---------------------------------------------------------------------------

const PROP_CASES: u32 = 1000;

fn prop_runner() -> TestRunner {
    TestRunner::new(PropConfig {
        cases: PROP_CASES,
        max_shrink_iters: 200,
        failure_persistence: None,
        ..PropConfig::default()
    })
}

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), proptest::test_runner::TestCaseError>,
) where
    S::Value: std::fmt::Debug,
{
    if let Err(e) = prop_runner().run(&strategy, test) {
        match e {
            TestError::Fail(reason, value) => {
                panic!("property '{name}' failed: {reason}; input {value:?}")
            }
            TestError::Abort(reason) => panic!("property '{name}' aborted: {reason}"),
        }
    }
}

/// Wraps a surface and records every point the loss is evaluated at.
struct RecordingSurface<S: LossSurface> {
    inner: S,
    loss_points: RefCell<Vec<Vec<f64>>>,
}

impl<S: LossSurface> LossSurface for RecordingSurface<S> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn loss(&self, w: &[f64]) -> Result<f64, MeasureError> {
        self.loss_points.borrow_mut().push(w.to_vec());
        self.inner.loss(w)
    }
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>, MeasureError> {
        self.inner.grad(w)
    }
    fn tensor_ranges(&self) -> Vec<Range<usize>> {
        self.inner.tensor_ranges()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn acceptance_invariant_properties() {
    // Margin is invariant to per-row logit shifts.
    run_property(
        "margin shift invariance",
        (1usize..6, 2usize..5).prop_flat_map(|(n, k)| {
            (
                Just(n),
                Just(k),
                prop::collection::vec(-10.0f64..10.0, n * k),
                prop::collection::vec(0usize..k, n),
                prop::collection::vec(-25.0f64..25.0, n),
            )
        }),
        |(n, k, logits, labels, shifts)| {
            let base = Tensor::new(vec![n, k], logits.clone()).expect("tensor");
            let mut shifted_data = logits;
            for (row, shift) in shifts.iter().enumerate() {
                for col in 0..k {
                    shifted_data[row * k + col] += shift;
                }
            }
            let shifted = Tensor::new(vec![n, k], shifted_data).expect("tensor");
            let m0 = margin_of_logits(&base, &labels);
            let m1 = margin_of_logits(&shifted, &labels);
            prop_assert!(
                (m0 - m1).abs() <= 1e-9,
                "margin moved under row shifts: {m0} vs {m1}"
            );
            Ok(())
        },
    );

    // The ascent point never escapes the projection ball around w0.
    run_property(
        "projection bound",
        (1usize..4).prop_flat_map(|d| {
            (
                prop::collection::vec(-2.0f64..2.0, d),
                prop::collection::vec(-0.5f64..0.5, d),
                prop::collection::vec(0.05f64..3.0, d),
                0.01f64..0.9,
                0.005f64..0.2,
            )
        }),
        |(w0, eps, coeffs, lambda, ascent)| {
            let surface = RecordingSurface {
                inner: QuadraticSurface {
                    coeffs: coeffs.clone(),
                },
                loss_points: RefCell::new(Vec::new()),
            };
            let cfg = SharpnessConfig {
                noise_scale: 0.01,
                ascent_coeff: ascent,
                radius_lambda: lambda,
                batch_size: 8,
                seed: 0,
            };
            phi_difference_with_noise(&surface, &w0, &eps, &cfg).expect("phi");

            // Recompute the raw (pre-projection) ascent point analytically.
            let w: Vec<f64> = w0.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let raw: Vec<f64> = w
                .iter()
                .zip(&coeffs)
                .map(|(wi, c)| wi + ascent * 2.0 * c * wi)
                .collect();
            let radius = lambda * l2(&raw);

            let points = surface.loss_points.borrow();
            prop_assert_eq!(points.len(), 2, "loss evaluated at w0 and the final point");
            let final_point = &points[1];
            let dist = l2(&final_point
                .iter()
                .zip(&w0)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>());
            prop_assert!(
                dist <= radius + 1e-12,
                "ascent point escaped: dist {dist} > radius {radius}"
            );
            Ok(())
        },
    );

    // Every measure leaves model weights bit-identical; a SAM step whose
    // base update has zero learning rate restores them bit-exactly too.
    run_property(
        "bit-exact restoration",
        (any::<u64>(), any::<u64>(), 2usize..4),
        |(init_seed, data_seed, rows)| {
            let spec = ModelSpec {
                input_dim: 3,
                hidden_dims: vec![4],
                num_classes: 3,
                init_seed,
            };
            let model = init_model(&spec).expect("init");
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            let feats: Vec<f64> = (0..rows * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..3)).collect();
            let features = Tensor::new(vec![rows, 3], feats).expect("tensor");
            let dataset =
                Dataset::new(features.clone(), labels.clone(), 3).expect("dataset");
            let batch = dataset.full_batch();

            let before: Vec<u64> = model.weights().iter().map(|x| x.to_bits()).collect();

            let sharp = SharpnessConfig {
                noise_scale: 0.01,
                ascent_coeff: 0.05,
                radius_lambda: 0.05,
                batch_size: 8,
                seed: data_seed,
            };
            let alpha = AlphaSharpnessConfig {
                loss_target_offset: 0.1,
                ascent_steps: 3,
                binary_search_iters: 4,
                alpha_lo: 1e-3,
                alpha_hi: 1.0,
                seed: data_seed,
            };
            let surface = GraphLossSurface::new(&model, batch).expect("surface");
            let _ = phi_difference_on(&surface, model.weights(), &sharp).expect("phi");
            let _ = phi_alpha_on(&surface, model.weights(), model.init_weights(), &alpha)
                .expect("alpha");
            let _ = margin(&model, &dataset).expect("margin");
            let _ = frobenius_distance(&model);

            let after: Vec<u64> = model.weights().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(&before, &after, "a measure mutated the model weights");

            // SAM with a zero-learning-rate AdamW base update.
            let mut w = model.get_flat_weights();
            let w_bits: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
            let mut state = AdamWState::new(w.len());
            let quad = |wv: &[f64]| -> Result<(f64, Vec<f64>), ObjectiveError> {
                Ok((
                    wv.iter().map(|x| x * x).sum(),
                    wv.iter().map(|x| 2.0 * x).collect(),
                ))
            };
            sam_step_on(&mut w, quad, 0.05, |w, g| {
                state.step(w, g, 0.0, DEFAULT_BETAS, DEFAULT_EPS, 0.01)
            })
            .expect("sam step");
            let w_after: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(&w_bits, &w_after, "zero-rate SAM step moved the weights");
            Ok(())
        },
    );

    // Pearson r stays in [-1, 1], is symmetric, and transforms by sign(a)
    // under affine maps of one argument.
    run_property(
        "pearson bounds, symmetry, affine maps",
        (3usize..20).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
                prop_oneof![0.01f64..8.0, -8.0f64..-0.01],
                -50.0f64..50.0,
            )
        }),
        |(xs, ys, a, b)| {
            let r = match pearson(&xs, &ys) {
                Ok(r) => r,
                // A constant draw is legal input for this strategy but has
                // no defined correlation; skip it.
                Err(_) => return Ok(()),
            };
            prop_assert!(r.is_finite() && (-1.0..=1.0).contains(&r), "r out of range: {r}");
            let r_sym = pearson(&ys, &xs).expect("symmetric call");
            prop_assert!((r - r_sym).abs() <= 1e-12, "asymmetric: {r} vs {r_sym}");
            let zs: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let r_affine = pearson(&zs, &ys).expect("affine call");
            prop_assert!(
                (r_affine - a.signum() * r).abs() <= 1e-9,
                "affine map broke sign rule: {r_affine} vs {} (a={a})",
                a.signum() * r
            );
            Ok(())
        },
    );

    // KL divergence of a distribution against itself is zero.
    run_property(
        "kl self-divergence is zero",
        (1usize..5, 2usize..5).prop_flat_map(|(n, k)| {
            (
                Just(n),
                Just(k),
                prop::collection::vec(-5.0f64..5.0, n * k),
            )
        }),
        |(n, k, logits)| {
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[n, k], "x");
            let p = g.softmax(x).expect("shapes");
            let kl = g.kl_divergence(p, p).expect("shapes");
            let graph = g.build(kl).expect("builds");
            let mut bindings = Bindings::new();
            bindings.insert(x, Tensor::new(vec![n, k], logits).expect("tensor"));
            let value = graph
                .evaluate(&bindings)
                .expect("evaluates")
                .scalar_value()
                .expect("scalar");
            prop_assert!(value.abs() <= 1e-12, "KL(p||p) = {value}");
            Ok(())
        },
    );

    report(
        "invariant-suite",
        true,
        &format!("5 properties x {PROP_CASES} cases each"),
    );
}
