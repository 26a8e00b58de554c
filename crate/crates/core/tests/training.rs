//! Training-loop behavior: teacher isolation, checkpoints, resume and
//! determinism under different thread counts.

use clever::data::{synth_shapes, Dataset, SynthSpec};
use clever::eval::{linear_probe, ProbeConfig};
use clever::train::{collapse_log_csv, train, train_log_csv, Checkpoint, Objective, TrainConfig, Trainer};
use clever::vision::Strategy;

fn data() -> Dataset {
    synth_shapes(&SynthSpec {
        per_class: 4,
        resolution: 16,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn config(strategy: Strategy) -> TrainConfig {
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

#[test]
fn teacher_moves_only_by_ema_and_stays_in_the_hull() {
    let ds = data();
    let mut tr = Trainer::new(config(Strategy::CAug), &ds).unwrap();
    let m = tr.config().ema_momentum;
    while !tr.is_done() {
        let before = tr.state().pair.teacher.params.clone();
        tr.step().unwrap();
        let pair = &tr.state().pair;
        for i in 0..before.len() {
            let t0 = before.get(i).data();
            let s = pair.student.params.get(i).data();
            let t1 = pair.teacher.params.get(i).data();
            for j in 0..t0.len() {
                let expected = (m * t0[j] + (1.0 - m) * s[j]) as f32 as f64;
                assert_eq!(t1[j], expected, "param {} entry {j}", pair.teacher.params.name(i));
                let slack = 1e-7 * t0[j].abs().max(s[j].abs());
                assert!(t1[j] >= t0[j].min(s[j]) - slack && t1[j] <= t0[j].max(s[j]) + slack);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = data();
    let out = train(config(Strategy::CAugPlus), &ds).unwrap();
    let bytes = out.checkpoint.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.encode(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.clvr");
    out.checkpoint.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), out.checkpoint);
}

#[test]
fn resumed_run_matches_uninterrupted_log() {
    let ds = data();
    let cfg = config(Strategy::CAug);
    let full = train(cfg.clone(), &ds).unwrap();

    let mut first = Trainer::new(cfg, &ds).unwrap();
    let cut = first.steps_per_epoch() + 1;
    for _ in 0..cut {
        first.step().unwrap();
    }
    let saved = Checkpoint::decode(&first.checkpoint().encode()).unwrap();
    let mut resumed = Trainer::resume(saved, &ds).unwrap();
    let mut tail = Vec::new();
    while !resumed.is_done() {
        tail.push(resumed.step().unwrap());
    }
    assert_eq!(train_log_csv(&tail), train_log_csv(&full.log[cut..]));
    assert_eq!(resumed.checkpoint(), full.checkpoint);
}

fn run_with_threads(threads: usize, cfg: &TrainConfig, ds: &Dataset) -> (String, String, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let out = train(cfg.clone(), ds).unwrap();
        (train_log_csv(&out.log), collapse_log_csv(&out.collapse), out.checkpoint.encode())
    })
}

#[test]
fn thread_count_does_not_change_any_output() {
    let ds = data();
    for strategy in [Strategy::BAug, Strategy::CAugPlus] {
        let cfg = config(strategy);
        assert_eq!(run_with_threads(1, &cfg, &ds), run_with_threads(3, &cfg, &ds), "{strategy}");
    }
}

#[test]
fn collapse_log_has_one_finite_row_per_epoch() {
    let ds = data();
    let out = train(config(Strategy::CAug), &ds).unwrap();
    assert_eq!(out.collapse.len(), 4);
    for (e, r) in out.collapse.iter().enumerate() {
        assert_eq!(r.epoch, e);
        for v in [r.log10_h_ir, r.log10_h_ef, r.log10_z_ir, r.log10_z_ef] {
            assert!(v.is_finite() || v == f64::NEG_INFINITY);
        }
    }
}

#[test]
fn two_view_objective_trains() {
    let ds = data();
    let mut cfg = config(Strategy::CAug);
    cfg.objective = Objective::Ddcl;
    let out = train(cfg, &ds).unwrap();
    assert!(out.log.iter().all(|r| r.loss.is_finite() && r.loss.l_cl >= -1.0 && r.loss.l_cl <= 1.0));
}

#[test]
fn probe_training_leaves_the_encoder_untouched() {
    let ds = data();
    let out = train(config(Strategy::CAug), &ds).unwrap();
    let net = out.checkpoint.pair.student.clone();
    let encoded = out.checkpoint.encode();
    let run = linear_probe(&net, &ds, &ProbeConfig { epochs: 3, ..ProbeConfig::default() }).unwrap();
    assert!((0.0..=1.0).contains(&run.accuracy));
    assert_eq!(net, out.checkpoint.pair.student);
    assert_eq!(out.checkpoint.encode(), encoded);
}
