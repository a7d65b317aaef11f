use textspot::datagen::{synthesize_dataset, GenConfig, SceneSample};
use textspot::error::Error;
use textspot::trainer::{load_checkpoint, load_model, read_metrics, LogRecord, TrainConfig, Trainer, CHECKPOINT_DIR, METRICS_FILE};

fn data(n: usize) -> Vec<SceneSample> {
    synthesize_dataset(&GenConfig::default(), 21, n).unwrap()
}

fn short(iterations: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.iterations = iterations;
    cfg.milestones.clear();
    cfg.eval_every = 0;
    cfg.checkpoint_every = 0;
    cfg
}

#[test]
fn zero_iterations_leave_the_initialization_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(short(0)).unwrap();
    let outcome = t.run(&data(2), Some(dir.path())).unwrap();
    assert_eq!(outcome.iterations, 0);
    assert!(outcome.log.is_empty());
    let fresh = Trainer::new(short(0)).unwrap();
    let ck = load_checkpoint(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(ck.params.len(), fresh.store.len());
    for ((na, a), (nb, b)) in ck.params.iter().zip(fresh.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a, b);
    }
}

#[test]
fn identical_seeds_give_identical_logs_and_a_faithful_checkpoint() {
    let d = data(4);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    let mut trainers = Vec::new();
    for dir in &dirs {
        let mut cfg = short(6);
        cfg.eval_every = 3;
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&d, Some(dir.path())).unwrap();
        logs.push(std::fs::read(dir.path().join(METRICS_FILE)).unwrap());
        trainers.push(t);
    }
    assert_eq!(logs[0], logs[1]);
    let records = read_metrics(std::str::from_utf8(&logs[0]).unwrap()).unwrap();
    assert_eq!(records.iter().filter(|r| matches!(r, LogRecord::Step(_))).count(), 6);
    assert_eq!(records.iter().filter(|r| matches!(r, LogRecord::Eval(_))).count(), 2);

    let (_, model, store) = load_model(&dirs[0].path().join(CHECKPOINT_DIR)).unwrap();
    let t = &trainers[0];
    for s in &d {
        let a = t.model.infer(&t.store, &s.image).unwrap();
        let b = model.infer(&store, &s.image).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.transcription, y.transcription);
            assert_eq!(x.confidence.to_bits(), y.confidence.to_bits());
            assert_eq!(x.sm3, y.sm3);
        }
    }
}

#[test]
fn resume_continues_from_the_saved_iteration() {
    let d = data(2);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(short(3)).unwrap();
    t.run(&d, Some(dir.path())).unwrap();
    let ck = load_checkpoint(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    let mut r = Trainer::new(short(5)).unwrap();
    r.resume(&ck).unwrap();
    assert_eq!(r.iteration, 3);
    assert_eq!(r.optimizer, t.optimizer);
    let outcome = r.run(&d, None).unwrap();
    assert_eq!(outcome.steps.len(), 2);
    assert_eq!(outcome.steps[0].iteration, 3);
}

#[test]
fn two_hundred_iterations_reduce_the_joint_loss() {
    let d = data(8);
    let mut t = Trainer::new(short(200)).unwrap();
    let outcome = t.run(&d, None).unwrap();
    let mean = |s: &[textspot::trainer::StepRecord]| s.iter().map(|r| r.loss.l_match).sum::<f64>() / s.len() as f64;
    let first = mean(&outcome.steps[..20]);
    let last = mean(&outcome.steps[180..]);
    assert!(last < first, "L_match {first} -> {last}");
    for s in &outcome.steps {
        assert!(s.loss.recomposition_error() < 1e-12);
        assert_eq!(s.mask_violations, 0);
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_state() {
    let mut d = data(1);
    d[0].image.data[5] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(short(4)).unwrap();
    let err = t.run(&d, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let ck = load_checkpoint(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(ck.iteration(), 0);
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut cfg = short(10);
    cfg.milestones = vec![20];
    assert_eq!(Trainer::new(cfg).err().unwrap().kind(), "config");
    let mut cfg = short(10);
    cfg.batch_size = 0;
    assert!(Trainer::new(cfg).is_err());
}
