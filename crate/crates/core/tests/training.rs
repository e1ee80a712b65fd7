use streamkd::checkpoint;
use streamkd::distill::total_loss;
use streamkd::encoder::AttentionMode;
use streamkd::params::ParamStore;
use streamkd::trainer::{
    evaluate, make_eval_set, make_toy_dataset, train_teacher, Batch, Dataset, LossBreakdown, LossSet,
    ModelConfig, Schedule, StudentMode, StudentTrainer, TeacherTrainer, ToyTaskSpec, TrainConfig,
};
use streamkd::Error;

fn setup() -> (ModelConfig, TrainConfig, Dataset) {
    let task = ToyTaskSpec::default();
    let model = ModelConfig::desk(&task);
    let cfg = TrainConfig {
        batch_size: 2,
        teacher_steps: 3,
        student_steps: 4,
        ..TrainConfig::default()
    };
    let data = make_toy_dataset(&task, 4, 4, 11).unwrap();
    (model, cfg, data)
}

fn teacher(model: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> ParamStore {
    train_teacher(model, cfg, data, 1).unwrap().0
}

fn strip(ms: &[LossBreakdown]) -> Vec<LossBreakdown> {
    ms.iter().map(|m| LossBreakdown { wall_ms: 0.0, ..m.clone() }).collect()
}

#[test]
fn one_teacher_step_moves_every_parameter_group() {
    let (model, cfg, data) = setup();
    let mut tr = TeacherTrainer::new(&model, &cfg, &data, 3).unwrap();
    let before = tr.params().clone();
    let m = tr.step().unwrap();
    assert!(m.loss_total.is_finite() && m.loss_total > 0.0);
    assert_eq!(m.loss_asr, Some(m.loss_total));
    let changed = before.iter().filter(|(k, v)| tr.params().get(k).unwrap() != *v).count();
    assert!(changed > before.len() / 2, "{changed} of {}", before.len());
}

#[test]
fn teacher_needs_labels() {
    let (model, cfg, mut data) = setup();
    data.labeled.clear();
    assert!(TeacherTrainer::new(&model, &cfg, &data, 0).is_err());
}

#[test]
fn distillation_freezes_the_teacher_and_logs_consistent_totals() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    let snapshot = checkpoint::encode(&teacher);
    let mut tr = StudentTrainer::new(&teacher, &model, &cfg, StudentMode::Aux(LossSet::ALL), &data, 5, None).unwrap();
    let metrics = tr.run(6).unwrap();
    assert_eq!(checkpoint::encode(&teacher), snapshot);

    let mut saw_unlabeled = false;
    for m in &metrics {
        let recomputed = total_loss(m.loss_asr, m.loss_dis, m.loss_kld, m.loss_apc, &cfg.weights, m.n_labeled, m.n_unlabeled).unwrap();
        assert!((recomputed - m.loss_total).abs() <= 1e-12, "{m:?}");
        assert!(m.loss_dis > 0.0 && m.loss_kld > 0.0 && m.loss_apc > 0.0);
        if m.n_labeled == 0 {
            saw_unlabeled = true;
            assert_eq!(m.loss_asr, None);
        } else {
            assert!(m.loss_asr.is_some());
        }
    }
    assert!(saw_unlabeled);
}

#[test]
fn disabled_terms_are_logged_as_zero() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    let mode: StudentMode = "dis".parse().unwrap();
    let mut tr = StudentTrainer::new(&teacher, &model, &cfg, mode, &data, 5, None).unwrap();
    for m in tr.run(3).unwrap() {
        assert_eq!((m.loss_kld, m.loss_apc), (0.0, 0.0));
        assert!(m.loss_dis > 0.0);
    }
}

#[test]
fn metrics_json_has_nullable_asr() {
    let m = LossBreakdown {
        step: 1,
        loss_total: 0.5,
        loss_asr: None,
        loss_dis: 1.0,
        loss_kld: 2.0,
        loss_apc: 3.0,
        loss_prob: None,
        n_labeled: 0,
        n_unlabeled: 2,
        wall_ms: 1.5,
    };
    let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    for key in ["step", "loss_total", "loss_asr", "loss_dis", "loss_kld", "loss_apc", "wall_ms"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(v["loss_asr"].is_null());
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    let mode = StudentMode::Aux(LossSet::ALL);
    let mut a = StudentTrainer::new(&teacher, &model, &cfg, mode, &data, 8, None).unwrap();
    a.run(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.skdl");
    checkpoint::save(&path, &a.checkpoint()).unwrap();

    let mut b = StudentTrainer::new(&teacher, &model, &cfg, mode, &data, 8, None).unwrap();
    b.restore(&checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(b.step_index(), 3);
    let (ma, mb) = (a.step().unwrap(), b.step().unwrap());
    assert_eq!(strip(&[ma]), strip(&[mb]));
    assert_eq!(checkpoint::encode(&a.checkpoint()), checkpoint::encode(&b.checkpoint()));
}

#[test]
fn same_seed_gives_identical_runs() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    let run = |seed| {
        let mut t = StudentTrainer::new(&teacher, &model, &cfg, StudentMode::Aux(LossSet::ALL), &data, seed, None).unwrap();
        let m = t.run(4).unwrap();
        (checkpoint::encode(&t.checkpoint()), strip(&m))
    };
    let (a, b, c) = (run(2), run(2), run(3));
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn checkpoint_keeps_branches_but_inference_drops_them() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    let mut tr = StudentTrainer::new(&teacher, &model, &cfg, StudentMode::Aux(LossSet::ALL), &data, 1, None).unwrap();
    tr.run(1).unwrap();
    let ck = tr.checkpoint();
    assert!(ck.names().any(|n| n.starts_with("aux.0.")));
    assert!(ck.names().any(|n| n.starts_with("aux.3.")));
    assert!(ck.names().any(|n| n.starts_with("opt.")));
    let inf = tr.inference_params();
    assert!(inf.names().all(|n| n.starts_with("student.")));
    let eval = make_eval_set(&ToyTaskSpec::default(), 3, 11).unwrap();
    let mode = tr.model.encoder.cfg.mode;
    let r = evaluate(&tr.model, &inf, &eval, mode, 4).unwrap();
    assert!((0.0..=f64::INFINITY).contains(&r.token_error_rate));
    assert_eq!(r.utterances.len(), 3);
}

#[test]
fn warm_start_replaces_matching_tensors() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    let mode = StudentMode::Aux(LossSet::ALL);
    let mut a = StudentTrainer::new(&teacher, &model, &cfg, mode, &data, 1, None).unwrap();
    a.run(2).unwrap();
    let b = StudentTrainer::new(&teacher, &model, &cfg, mode, &data, 9, Some(a.params())).unwrap();
    assert_eq!(checkpoint::encode(a.params()), checkpoint::encode(b.params()));
    assert_eq!(b.step_index(), 0);
}

#[test]
fn rejects_missing_teacher_and_empty_objectives() {
    let (model, cfg, mut data) = setup();
    let empty = ParamStore::new();
    assert!(StudentTrainer::new(&empty, &model, &cfg, StudentMode::Scratch, &data, 0, None).is_err());
    let teacher = teacher(&model, &cfg, &data);
    data.labeled.clear();
    let none: StudentMode = "none".parse().unwrap();
    assert!(StudentTrainer::new(&teacher, &model, &cfg, none, &data, 0, None).is_err());
}

#[test]
fn divergence_reports_the_step() {
    let (model, mut cfg, data) = setup();
    cfg.lr = f64::INFINITY;
    cfg.grad_clip = 0.0;
    let mut tr = TeacherTrainer::new(&model, &cfg, &data, 0).unwrap();
    tr.step().unwrap();
    match tr.step() {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn baseline_recipes_train() {
    let (model, cfg, data) = setup();
    let teacher = teacher(&model, &cfg, &data);
    for mode in [StudentMode::Scratch, StudentMode::ProbKld, StudentMode::LayerDirect] {
        let mut tr = StudentTrainer::new(&teacher, &model, &cfg, mode, &data, 4, None).unwrap();
        for m in tr.run(3).unwrap() {
            assert!(m.loss_total.is_finite());
            if mode == StudentMode::ProbKld && m.n_labeled > 0 {
                assert!(m.loss_prob.unwrap() > 0.0);
            }
            if mode == StudentMode::Scratch {
                assert_eq!(m.n_unlabeled, 0);
            }
        }
    }
}

#[test]
fn epochs_mix_one_to_one() {
    for (nl, nu, batch) in [(40, 40, 8), (16, 256, 8), (7, 3, 2), (9, 100, 4)] {
        let s = Schedule::new(nl, nu, batch, (1, 1), 5).unwrap();
        for e in 0..3 {
            let ep = s.epoch(e);
            let lab = ep.iter().filter(|b| matches!(b, Batch::Labeled(_))).count();
            assert!(lab.abs_diff(ep.len() - lab) <= 1, "{nl} {nu}: {lab} of {}", ep.len());
            let mut seen: Vec<usize> = ep
                .iter()
                .filter_map(|b| match b {
                    Batch::Labeled(v) => Some(v.clone()),
                    _ => None,
                })
                .flatten()
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..nl).collect::<Vec<_>>());
        }
    }
}

#[test]
fn evaluation_on_empty_set_is_rejected() {
    let (model, _, _) = setup();
    let m = model.student_model().unwrap();
    let r = evaluate(&m, &ParamStore::new(), &[], AttentionMode::NonStreaming, 4);
    assert!(r.is_err());
}
