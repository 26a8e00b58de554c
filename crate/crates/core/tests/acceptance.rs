//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 and 5 to 9 fail the run when they fail. The training-quality
//! criteria 2 to 4 are reported with their measured values; they fail the
//! run only under `CLEVER_ACCEPTANCE_STRICT=1`. Criterion 2 runs at full
//! scale under `CLEVER_ACCEPTANCE_FULL=1` and at desk scale otherwise.
//! Run with `cargo test --release -p clever --test acceptance`.

use std::fmt::Write as _;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clever::config::{RunConfig, RunManifest, REFERENCE_HEAD_OUT};
use clever::data::idx::{self, parse_idx};
use clever::data::{ppm, synth_shapes, Dataset, SynthSpec};
use clever::eval::{
    equivariance_diagnostics, linear_probe, robustness_eval, rotation_sensitivity_task, FeatureSource, ProbeConfig,
    TransformFamily,
};
use clever::model::{EncoderKind, InitScheme, ModelConfig, Network};
use clever::objectives::{
    contrastive_loss, contrastive_upper_bound, ddcl_losses, orthogonal_loss, preg_loss, total_loss, LossBreakdown,
    LossWeights,
};
use clever::study::{collapse_study, COLLAPSE_LAMBDAS};
use clever::tensor::{finite_diff_check, finite_diff_check_fn, InputCheck, OpKind, Tape, Tensor, Var};
use clever::train::{collapse_log_csv, train, train_log_csv, Checkpoint, TrainConfig, Trainer};
use clever::vision::{AugmentConfig, Image, Strategy, Suite};

const GRAD_INSTANCES: usize = 100;
const GRAD_EPS: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);

const COLLAPSE_MIN_ORDERS: f64 = 3.0;
const COLLAPSE_MAX_MATCHED_GAP: f64 = 0.5;
const COLLAPSE_BUDGET: Duration = Duration::from_secs(30 * 60);

const ROBUSTNESS_MIN_POINTS: f64 = 0.05;
const ROBUSTNESS_BUDGET: Duration = Duration::from_secs(45 * 60);

const EF_PREDICTABILITY_MIN_POINTS: f64 = 0.10;

const LOSS_INSTANCES: usize = 100;
const RECOMBINATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Hard,
    Reported,
}

struct Outcome {
    id: usize,
    name: &'static str,
    kind: Kind,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, kind: Kind, pass: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        kind,
        pass,
        detail,
    }
}

fn env_flag(key: &str) -> bool {
    std::env::var(key).is_ok_and(|v| v == "1")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values with magnitude in `[margin, margin + 2)`.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    random(r, shape, -2.0, 2.0).map(|x| if x >= 0.0 { x + margin } else { x - margin })
}

fn worst(checks: &[InputCheck]) -> f64 {
    checks.iter().filter_map(InputCheck::max_rel_error).fold(0.0, f64::max)
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize) {
    (r.gen_range(1..4), r.gen_range(1..5))
}

type Instance = Box<dyn Fn(&mut ChaCha8Rng) -> (OpKind, Vec<Tensor>)>;

fn primitive_cases() -> Vec<(&'static str, Instance)> {
    fn binary(op: fn() -> OpKind) -> Instance {
        Box::new(move |r| {
            let (a, b) = dims(r);
            (op(), vec![random(r, &[a, b], -2.0, 2.0), random(r, &[a, b], -2.0, 2.0)])
        })
    }
    fn unary(op: fn(&mut ChaCha8Rng) -> OpKind, input: fn(&mut ChaCha8Rng, &[usize]) -> Tensor) -> Instance {
        Box::new(move |r| {
            let (a, b) = dims(r);
            let op = op(r);
            (op, vec![input(r, &[a, b])])
        })
    }
    let plain = |r: &mut ChaCha8Rng, s: &[usize]| random(r, s, -2.0, 2.0);
    let kinked = |r: &mut ChaCha8Rng, s: &[usize]| off_zero(r, s, 0.01);
    let positive = |r: &mut ChaCha8Rng, s: &[usize]| random(r, s, 0.1, 2.0);
    vec![
        ("add", binary(|| OpKind::Add)),
        ("sub", binary(|| OpKind::Sub)),
        ("mul", binary(|| OpKind::Mul)),
        ("dot", binary(|| OpKind::Dot)),
        (
            "div",
            Box::new(|r| {
                let (a, b) = dims(r);
                (OpKind::Div, vec![random(r, &[a, b], -2.0, 2.0), off_zero(r, &[a, b], 0.5)])
            }),
        ),
        ("scale", unary(|r| OpKind::Scale(r.gen_range(-3.0..3.0)), plain)),
        ("relu", unary(|_| OpKind::Relu, kinked)),
        ("abs", unary(|_| OpKind::Abs, kinked)),
        ("exp", unary(|_| OpKind::Exp, plain)),
        ("log", unary(|_| OpKind::Log { floor: 1e-12 }, positive)),
        ("sqrt", unary(|_| OpKind::Sqrt, positive)),
        ("sum", unary(|_| OpKind::Sum, plain)),
        ("mean", unary(|_| OpKind::Mean, plain)),
        ("sum_last_axis", unary(|_| OpKind::SumLastAxis, plain)),
        ("softmax", unary(|_| OpKind::Softmax, plain)),
        ("sq_norm", unary(|_| OpKind::SqNorm, plain)),
        ("transpose", unary(|_| OpKind::Transpose, plain)),
        (
            "reshape",
            Box::new(|r| {
                let (a, b) = dims(r);
                (OpKind::Reshape { shape: vec![b, a] }, vec![random(r, &[a, b], -2.0, 2.0)])
            }),
        ),
        (
            "matmul",
            Box::new(|r| {
                let (m, k, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
                (OpKind::MatMul, vec![random(r, &[m, k], -2.0, 2.0), random(r, &[k, n], -2.0, 2.0)])
            }),
        ),
        (
            "bias_add",
            Box::new(|r| {
                let (m, n) = dims(r);
                (OpKind::BiasAdd, vec![random(r, &[m, n], -2.0, 2.0), random(r, &[n], -2.0, 2.0)])
            }),
        ),
        (
            "slice",
            Box::new(|r| {
                let (a, c) = (r.gen_range(1..4), r.gen_range(2..5));
                let start = r.gen_range(0..c);
                let end = r.gen_range(start + 1..=c);
                (OpKind::Slice { start, end }, vec![random(r, &[a, c], -2.0, 2.0)])
            }),
        ),
        (
            "concat",
            Box::new(|r| {
                let (a, b) = dims(r);
                let c = r.gen_range(1..4);
                (OpKind::Concat, vec![random(r, &[a, b], -2.0, 2.0), random(r, &[a, c], -2.0, 2.0)])
            }),
        ),
        (
            "conv2d",
            Box::new(|r| {
                let (n, h, w) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5));
                let (cin, cout, stride) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
                (
                    OpKind::Conv2d { stride },
                    vec![random(r, &[n, h, w, cin], -2.0, 2.0), random(r, &[3, 3, cin, cout], -2.0, 2.0)],
                )
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|r| {
                let shape = [r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..4)];
                (OpKind::GlobalAvgPool, vec![random(r, &shape, -2.0, 2.0)])
            }),
        ),
        (
            "grid_sample",
            Box::new(|r| {
                let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
                let grid = random(r, &[1, 2, 2, 2], -0.5, 4.5);
                (OpKind::GridSample, vec![random(r, &[1, h, w, 1], -2.0, 2.0), grid])
            }),
        ),
    ]
}

fn tiny_net(r: &mut ChaCha8Rng) -> Network {
    let rho = [0.5, 0.67, 0.84][r.gen_range(0..3)];
    Network::new(
        ModelConfig {
            encoder: EncoderKind::MlpTiny,
            output_dim: 6,
            rho,
            head_hidden: 4,
            head_out: 3,
            mlp_hidden: 4,
            resolution: 2,
            channels: 1,
            init: InitScheme::He,
        },
        r.gen(),
    )
    .unwrap()
}

type LossCase = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn loss_cases() -> Vec<(&'static str, LossCase)> {
    vec![
        (
            "contrastive",
            Box::new(|r| {
                let (rows, k, views) = (r.gen_range(1..4), r.gen_range(2..5), r.gen_range(2..4));
                let student: Vec<Tensor> = (0..views).map(|_| random(r, &[rows, k], -2.0, 2.0)).collect();
                let teacher: Vec<Tensor> = (0..2).map(|_| random(r, &[rows, k], -2.0, 2.0)).collect();
                let center = random(r, &[k], -1.0, 1.0);
                let w = LossWeights {
                    tau_s: r.gen_range(0.1..1.0),
                    tau_t: r.gen_range(0.04..1.0),
                    ..LossWeights::default()
                };
                let f = |tape: &mut Tape, v: &[Var]| contrastive_loss(tape, &teacher, v, &center, &w);
                worst(&finite_diff_check_fn(f, &student, &vec![true; views], GRAD_EPS, |_, _| false).unwrap())
            }),
        ),
        (
            "orthogonal",
            Box::new(|r| {
                let (rows, k) = dims(r);
                let student: Vec<Tensor> = (0..2).map(|_| random(r, &[rows, k], -2.0, 2.0)).collect();
                let teacher: Vec<Tensor> = (0..2).map(|_| random(r, &[rows, k], -2.0, 2.0)).collect();
                let temp = r.gen_range(0.2..2.0);
                let f = |tape: &mut Tape, v: &[Var]| Ok(orthogonal_loss(tape, v, &teacher, temp)?.unwrap());
                worst(&finite_diff_check_fn(f, &student, &[true, true], GRAD_EPS, |_, _| false).unwrap())
            }),
        ),
        (
            "preg",
            Box::new(|r| {
                let net = tiny_net(r);
                let point = net.params.values().to_vec();
                let f = |tape: &mut Tape, v: &[Var]| Ok(preg_loss(tape, v, &net)?.unwrap());
                worst(&finite_diff_check_fn(f, &point, &vec![true; point.len()], GRAD_EPS, |_, _| false).unwrap())
            }),
        ),
        (
            "total",
            Box::new(|r| {
                let w = LossWeights {
                    alpha: r.gen_range(0.0..2.0),
                    beta: r.gen_range(0.0..2.0),
                    lambda: r.gen_range(0.0..0.1),
                    ..LossWeights::default()
                };
                let point: Vec<Tensor> = [10.0, 1.0, 100.0].iter().map(|&hi| Tensor::scalar(r.gen_range(0.0..hi))).collect();
                let f = |tape: &mut Tape, v: &[Var]| Ok(total_loss(tape, v[0], Some(v[1]), Some(v[2]), &w)?.0);
                worst(&finite_diff_check_fn(f, &point, &[true; 3], GRAD_EPS, |_, _| false).unwrap())
            }),
        ),
        (
            "ddcl",
            Box::new(|r| {
                let (rows, d) = dims(r);
                let point: Vec<Tensor> = (0..4).map(|_| off_zero(r, &[rows, d], 0.2)).collect();
                let f = |tape: &mut Tape, v: &[Var]| {
                    let (li, lv) = ddcl_losses(tape, (v[0], v[1]), Some((v[2], v[3])))?;
                    let lv = tape.scale(lv.unwrap(), 0.5)?;
                    tape.add(li, lv)
                };
                worst(&finite_diff_check_fn(f, &point, &[true; 4], GRAD_EPS, |_, _| false).unwrap())
            }),
        ),
    ]
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut failures = Vec::new();
    let mut overall: f64 = 0.0;
    let mut checked = 0;
    for (name, case) in primitive_cases() {
        let mut max: f64 = 0.0;
        for _ in 0..GRAD_INSTANCES {
            let (op, point) = case(&mut r);
            max = max.max(worst(&finite_diff_check(&op, &point, GRAD_EPS).unwrap()));
        }
        checked += 1;
        overall = overall.max(max);
        if max >= GRAD_TOL {
            failures.push(format!("{name} {max:.2e}"));
        }
    }
    for (name, case) in loss_cases() {
        let mut max: f64 = 0.0;
        for _ in 0..GRAD_INSTANCES {
            max = max.max(case(&mut r));
        }
        checked += 1;
        overall = overall.max(max);
        if max >= GRAD_TOL {
            failures.push(format!("loss {name} {max:.2e}"));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < GRAD_BUDGET;
    let mut detail = format!(
        "{checked} ops x {GRAD_INSTANCES} instances, worst rel err {overall:.2e} (< {GRAD_TOL:e}), {:.1}s (< {}s)",
        elapsed.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    );
    if !failures.is_empty() {
        let _ = write!(detail, "; over tolerance: {}", failures.join(", "));
    }
    outcome(1, "finite-difference gradients", Kind::Hard, pass, detail)
}

/// Recipe shared by the desk-scale training criteria.
fn desk_config(strategy: Strategy, rho: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        strategy,
        epochs: 20,
        warmup_epochs: 2,
        batch_size: 32,
        base_lr: 0.03,
        ..TrainConfig::default()
    };
    cfg.model.resolution = 32;
    cfg.model.rho = rho;
    cfg.augment.local_views = 2;
    cfg
}

fn desk_data(per_class: usize) -> Dataset {
    synth_shapes(&SynthSpec {
        per_class,
        resolution: 32,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn criterion_collapse() -> Outcome {
    let full = env_flag("CLEVER_ACCEPTANCE_FULL");
    let (scale, data, base) = if full {
        let mut cfg = TrainConfig {
            strategy: Strategy::CAug,
            epochs: 100,
            ..TrainConfig::default()
        };
        cfg.model.resolution = 64;
        ("full: 6x2000, 64px, 100 epochs", synth_shapes(&SynthSpec::default()).unwrap(), cfg)
    } else {
        ("desk: 6x100, 32px, 20 epochs", desk_data(100), desk_config(Strategy::CAug, 0.8))
    };
    let start = Instant::now();
    let arms = collapse_study(&base, &data, &COLLAPSE_LAMBDAS).unwrap();
    let elapsed = start.elapsed();
    let unregularized = arms[0].final_gap();
    let matched = arms[1].max_gap();
    let mut pass = unregularized >= COLLAPSE_MIN_ORDERS && matched < COLLAPSE_MAX_MATCHED_GAP;
    if full {
        pass &= elapsed < COLLAPSE_BUDGET;
    }
    let detail = format!(
        "{scale}; lambda=0 final log10 h_IR - log10 h_EF = {unregularized:.3} (>= {COLLAPSE_MIN_ORDERS}), \
         lambda={} max |gap| = {matched:.3} (< {COLLAPSE_MAX_MATCHED_GAP}), {:.0}s (full-scale budget {}s)",
        COLLAPSE_LAMBDAS[1],
        elapsed.as_secs_f64(),
        COLLAPSE_BUDGET.as_secs()
    );
    outcome(2, "collapse study", Kind::Reported, pass, detail)
}

/// Trains the CAug and BAug models shared by criteria 3 and 4.
struct DeskModels {
    data: Dataset,
    caug: Network,
    baug: Network,
    caug_plus: Network,
    train_time: Duration,
}

fn desk_models() -> DeskModels {
    let data = desk_data(200);
    let start = Instant::now();
    let student = |cfg| train(cfg, &data).unwrap().checkpoint.pair.student;
    let caug = student(desk_config(Strategy::CAug, 0.8));
    let baug = student(desk_config(Strategy::BAug, 1.0));
    let train_time = start.elapsed();
    let caug_plus = student(desk_config(Strategy::CAugPlus, 0.8));
    DeskModels {
        data,
        caug,
        baug,
        caug_plus,
        train_time,
    }
}

fn probe(source: FeatureSource) -> ProbeConfig {
    ProbeConfig {
        source,
        ..ProbeConfig::default()
    }
}

fn suite_accuracy(net: &Network, data: &Dataset, source: FeatureSource, suite: Suite) -> f64 {
    robustness_eval(net, data, &[suite], &probe(source), &AugmentConfig::default(), source.name())
        .unwrap()
        .get(suite)
        .unwrap()
}

fn criterion_robustness(m: &DeskModels) -> Outcome {
    let start = Instant::now();
    let clever = suite_accuracy(&m.caug, &m.data, FeatureSource::Joint, Suite::CjRo);
    let baseline = suite_accuracy(&m.baug, &m.data, FeatureSource::Ir, Suite::CjRo);
    let elapsed = m.train_time + start.elapsed();
    let margin = clever - baseline;
    let pass = margin >= ROBUSTNESS_MIN_POINTS && elapsed < ROBUSTNESS_BUDGET;
    let detail = format!(
        "desk: 6x200, 32px, 20 epochs; CJ+Ro CAug rho=0.8 joint {clever:.3} vs BAug rho=1 {baseline:.3}, \
         margin {:+.1} points (>= {:.0}), {:.0}s (< {}s)",
        100.0 * margin,
        100.0 * ROBUSTNESS_MIN_POINTS,
        elapsed.as_secs_f64(),
        ROBUSTNESS_BUDGET.as_secs()
    );
    outcome(3, "robustness ordering", Kind::Reported, pass, detail)
}

fn criterion_equivariance(m: &DeskModels) -> Outcome {
    let (net, data) = (&m.caug_plus, &m.data);
    let joint_et = suite_accuracy(net, data, FeatureSource::Joint, Suite::CjRoEt);
    let ir_et = suite_accuracy(net, data, FeatureSource::Ir, Suite::CjRoEt);
    let joint_rot = rotation_sensitivity_task(net, data, &probe(FeatureSource::Joint)).unwrap();
    let ir_rot = rotation_sensitivity_task(net, data, &probe(FeatureSource::Ir)).unwrap();
    let diag = equivariance_diagnostics(
        &m.caug,
        data,
        &TransformFamily::rotation(),
        &ProbeConfig::default(),
        &AugmentConfig::default(),
    )
    .unwrap();
    let ef = diag.predictability_ef.unwrap();
    let ir = diag.predictability_ir;
    let pass = joint_et >= ir_et && joint_rot >= ir_rot && ef - ir >= EF_PREDICTABILITY_MIN_POINTS;
    let detail = format!(
        "CAug+ CJ+Ro+ET joint {joint_et:.3} vs IR {ir_et:.3}; rotation task joint {joint_rot:.3} vs IR {ir_rot:.3}; \
         CAug rotation-bin predictability EF {ef:.3} vs IR {ir:.3} ({:+.1} points, >= {:.0})",
        100.0 * (ef - ir),
        100.0 * EF_PREDICTABILITY_MIN_POINTS
    );
    outcome(4, "equivariance benefit", Kind::Reported, pass, detail)
}

fn criterion_loss_invariants(log_totals: &[(LossBreakdown, f64)]) -> Outcome {
    let mut r = rng(5);
    let mut problems = Vec::new();
    let w = LossWeights::default();
    for i in 0..LOSS_INSTANCES {
        let (rows, k) = (r.gen_range(1..4), r.gen_range(2..6));
        let student: Vec<Tensor> = (0..3).map(|_| random(&mut r, &[rows, k], -5.0, 5.0)).collect();
        let teacher: Vec<Tensor> = (0..2).map(|_| random(&mut r, &[rows, k], -5.0, 5.0)).collect();
        let center = random(&mut r, &[k], -1.0, 1.0);
        let mut tape = Tape::new();
        let vars: Vec<Var> = student.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let cl = contrastive_loss(&mut tape, &teacher, &vars, &center, &w).unwrap();
        let orth = orthogonal_loss(&mut tape, &vars[..2], &teacher, w.orth_temperature).unwrap().unwrap();
        let net = tiny_net(&mut r);
        let pvars = net.params.bind(&mut tape, true);
        let preg = preg_loss(&mut tape, &pvars, &net).unwrap().unwrap();
        let (total, parts) = total_loss(&mut tape, cl, Some(orth), Some(preg), &w).unwrap();
        let (lc, lo, lp, lt) = (
            tape.value(cl).item().unwrap(),
            tape.value(orth).item().unwrap(),
            tape.value(preg).item().unwrap(),
            tape.value(total).item().unwrap(),
        );
        if !(0.0..=contrastive_upper_bound()).contains(&lc) {
            problems.push(format!("instance {i}: L_CL {lc}"));
        }
        if !(0.0..=1.0).contains(&lo) {
            problems.push(format!("instance {i}: L_Orth {lo}"));
        }
        let (ef, ir) = (net.param_sq_norm(net.head_ef().unwrap()), net.param_sq_norm(net.head_ir()));
        if lp < 0.0 || (lp == 0.0) != (ef == ir) {
            problems.push(format!("instance {i}: L_PReg {lp}"));
        }
        let recombined = w.alpha * lc + w.beta * lo + w.lambda * lp;
        if (lt - recombined).abs() > RECOMBINATION_TOL || parts != LossBreakdown::new(lc, lo, lp, &w) {
            problems.push(format!("instance {i}: L_Total {lt} vs {recombined}"));
        }
    }
    for (b, expected) in log_totals {
        if (b.l_total - expected).abs() > RECOMBINATION_TOL {
            problems.push(format!("logged total {} vs {expected}", b.l_total));
        }
    }
    let detail = format!(
        "{LOSS_INSTANCES} random instances plus {} logged steps: 0 <= L_CL <= {:.2}, 0 <= L_Orth <= 1, \
         L_PReg >= 0 and 0 iff norms match, L_Total recombines within {RECOMBINATION_TOL:e}{}",
        log_totals.len(),
        contrastive_upper_bound(),
        if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
    );
    outcome(5, "loss invariants", Kind::Hard, problems.is_empty(), detail)
}

fn small_config(strategy: Strategy) -> TrainConfig {
    let mut cfg = TrainConfig {
        strategy,
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        base_lr: 0.5,
        collapse_probe_size: 8,
        ..TrainConfig::default()
    };
    cfg.model.resolution = 16;
    cfg.model.head_hidden = 16;
    cfg.model.head_out = 8;
    cfg.augment.local_views = 2;
    cfg
}

fn small_data() -> Dataset {
    synth_shapes(&SynthSpec {
        per_class: 4,
        resolution: 16,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// Runs a full small training job, checking the teacher after every step.
/// Returns the outcome and the logged loss rows for criterion 5.
fn criterion_ema_and_freezing() -> (Outcome, Vec<(LossBreakdown, f64)>) {
    let ds = small_data();
    let cfg = small_config(Strategy::CAug);
    let w = cfg.loss.clone();
    let mut tr = Trainer::new(cfg, &ds).unwrap();
    let m = tr.config().ema_momentum;
    let (mut entries, mut violations) = (0usize, 0usize);
    let mut logged = Vec::new();
    while !tr.is_done() {
        let before = tr.state().pair.teacher.params.clone();
        let row = tr.step().unwrap();
        let b = row.loss;
        logged.push((b, w.alpha * b.l_cl + w.beta * b.l_orth + w.lambda * b.l_preg));
        let pair = &tr.state().pair;
        for i in 0..before.len() {
            let (t0, s, t1) = (before.get(i).data(), pair.student.params.get(i).data(), pair.teacher.params.get(i).data());
            for j in 0..t0.len() {
                let slack = 1e-7 * t0[j].abs().max(s[j].abs());
                let inside = t1[j] >= t0[j].min(s[j]) - slack && t1[j] <= t0[j].max(s[j]) + slack;
                let exact = t1[j] == (m * t0[j] + (1.0 - m) * s[j]) as f32 as f64;
                entries += 1;
                violations += usize::from(!(inside && exact));
            }
        }
    }
    let steps = tr.state().step;
    let ckpt = tr.checkpoint();
    let net = ckpt.pair.student.clone();
    let encoded = ckpt.encode();
    let acc = linear_probe(&net, &ds, &ProbeConfig { epochs: 5, ..ProbeConfig::default() })
        .unwrap()
        .accuracy;
    let frozen = net == ckpt.pair.student && ckpt.encode() == encoded;
    let pass = violations == 0 && frozen;
    let detail = format!(
        "{steps} steps, {entries} teacher entries checked, {violations} outside hull or off the EMA update; \
         encoder bitwise unchanged by probe training: {frozen} (probe acc {acc:.3})"
    );
    (outcome(6, "EMA hull and frozen encoder", Kind::Hard, pass, detail), logged)
}

fn run_with_threads(threads: usize, strategy: Strategy, ds: &Dataset) -> (String, String, Vec<u8>, f64) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let out = train(small_config(strategy), ds).unwrap();
        let net = &out.checkpoint.pair.student;
        let acc = suite_accuracy(net, ds, FeatureSource::Joint, Suite::CjRoEt);
        (train_log_csv(&out.log), collapse_log_csv(&out.collapse), out.checkpoint.encode(), acc)
    })
}

fn criterion_determinism() -> Outcome {
    let ds = small_data();
    let mut mismatches = Vec::new();
    for strategy in [Strategy::BAug, Strategy::CAug, Strategy::CAugPlus] {
        let one = run_with_threads(1, strategy, &ds);
        for threads in [2, 4] {
            if run_with_threads(threads, strategy, &ds) != one {
                mismatches.push(format!("{strategy} with {threads} threads"));
            }
        }
    }
    let detail = if mismatches.is_empty() {
        "BAug, CAug, CAug+ with 1, 2 and 4 threads: identical logs, checkpoints and robustness cells".to_string()
    } else {
        format!("differs: {}", mismatches.join(", "))
    };
    outcome(7, "determinism across worker counts", Kind::Hard, mismatches.is_empty(), detail)
}

fn criterion_formats() -> Outcome {
    let mut problems = Vec::new();
    let ds = small_data();
    let cfg = small_config(Strategy::CAugPlus);
    let full = train(cfg.clone(), &ds).unwrap();

    let bytes = full.checkpoint.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    if back != full.checkpoint || back.encode() != bytes {
        problems.push("checkpoint encode/decode".to_string());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.clvr");
    full.checkpoint.save(&path).unwrap();
    if Checkpoint::load(&path).unwrap() != full.checkpoint {
        problems.push("checkpoint save/load".to_string());
    }

    let mut first = Trainer::new(cfg, &ds).unwrap();
    let cut = first.steps_per_epoch() + 1;
    for _ in 0..cut {
        first.step().unwrap();
    }
    let mut resumed = Trainer::resume(Checkpoint::decode(&first.checkpoint().encode()).unwrap(), &ds).unwrap();
    let mut tail = Vec::new();
    while !resumed.is_done() {
        tail.push(resumed.step().unwrap());
    }
    if train_log_csv(&tail) != train_log_csv(&full.log[cut..]) || resumed.checkpoint() != full.checkpoint {
        problems.push("mid-run resume".to_string());
    }

    let mut r = rng(8);
    let gray: Vec<Image> = (0..5)
        .map(|_| {
            let px = (0..12 * 10).map(|_| r.gen_range(0u8..=255) as f32 / 255.0).collect();
            Image::new(12, 10, 1, px).unwrap()
        })
        .collect();
    let labels = vec![0, 3, 1, 1, 2];
    let (ib, lb) = (idx::encode_idx_images(&gray).unwrap(), idx::encode_idx_labels(&labels));
    let parsed = parse_idx(&ib, &lb, "images".as_ref(), "labels".as_ref()).unwrap();
    if parsed.labels != labels || idx::encode_idx_images(&parsed.images).unwrap() != ib {
        problems.push("IDX".to_string());
    }

    for (img, file) in [(&ds.images[0], "x.ppm"), (&gray[0], "x.pgm")] {
        let pnm = ppm::encode_pnm(img);
        let decoded = ppm::parse_pnm(&pnm, file.as_ref()).unwrap();
        let close = decoded
            .pixels()
            .iter()
            .zip(img.pixels())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6);
        if !close || ppm::encode_pnm(&decoded) != pnm {
            problems.push(file.to_string());
        }
    }

    let cache = dir.path().join("data.clvd");
    ds.save(&cache).unwrap();
    if Dataset::load(&cache).unwrap() != ds {
        problems.push("dataset cache".to_string());
    }

    let detail = if problems.is_empty() {
        "checkpoint bytes and file, resume after step spe+1, IDX, PPM/PGM and dataset cache all round-trip".to_string()
    } else {
        format!("broken: {}", problems.join(", "))
    };
    outcome(8, "format round-trips", Kind::Hard, problems.is_empty(), detail)
}

fn criterion_defaults() -> Outcome {
    let cfg = RunConfig::from_toml_str("[data]\nkind = \"synth\"\n").unwrap();
    let (rho, lambda, k) = (cfg.train.model.rho, cfg.train.loss.lambda, cfg.train.model.head_out);
    let manifest = RunManifest::new("pretrain", cfg, None).to_toml().unwrap();
    let comment = format!("# config.train.model.head_out (K) = 256; reference value {REFERENCE_HEAD_OUT}");
    let pass = rho == 0.8 && lambda == 0.001 && k == 256 && REFERENCE_HEAD_OUT == 65536 && manifest.contains(&comment);
    let detail = format!(
        "rho {rho}, lambda {lambda}, K {k}; manifest comment present: {}",
        manifest.contains(&comment)
    );
    outcome(9, "documented defaults", Kind::Hard, pass, detail)
}

fn main() -> ExitCode {
    let strict = env_flag("CLEVER_ACCEPTANCE_STRICT");
    let mut results = vec![criterion_gradients()];
    results.push(criterion_collapse());
    let models = desk_models();
    results.push(criterion_robustness(&models));
    results.push(criterion_equivariance(&models));
    let (ema, logged) = criterion_ema_and_freezing();
    results.push(criterion_loss_invariants(&logged));
    results.push(ema);
    results.push(criterion_determinism());
    results.push(criterion_formats());
    results.push(criterion_defaults());
    results.sort_by_key(|o| o.id);

    let mut failed = 0;
    for o in &results {
        let label = if o.pass { "PASS" } else { "FAIL" };
        let gate = if o.kind == Kind::Reported && !strict { " [reported]" } else { "" };
        println!("criterion {}: {label}{gate} {}: {}", o.id, o.name, o.detail);
        if !o.pass && (o.kind == Kind::Hard || strict) {
            failed += 1;
        }
    }
    let passed = results.iter().filter(|o| o.pass).count();
    println!("acceptance: {passed}/{} criteria pass, {failed} failing the run", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
