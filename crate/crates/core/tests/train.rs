use ospatialnet::autodiff::gradcheck::{sample_tensor, GradCheck};
use ospatialnet::autodiff::Graph;
use ospatialnet::model::{Checkpoint, ModelConfig, SpatialNet, Variant};
use ospatialnet::params::ParamStore;
use ospatialnet::tensor::Tensor;
use ospatialnet::train::*;
use ospatialnet::Error;

fn loss_value(est: Vec<f64>, target: Vec<f64>, b: usize) -> ospatialnet::Result<f64> {
    let n = est.len() / b;
    let g = Graph::<f64>::inference();
    let e = g.constant(Tensor::new(vec![b, n], est)?);
    let t = g.constant(Tensor::new(vec![b, n], target)?);
    neg_snr_loss(&e, &t)?.value().item()
}

#[test]
fn loss_examples() {
    let t: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    assert_eq!(loss_value(t.clone(), t.clone(), 1).unwrap(), LOSS_FLOOR);
    // est = target + n with |n| = |target|: 0 dB
    let est: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
    assert!(loss_value(est, t.clone(), 1).unwrap().abs() < 1e-12);
    // batch mean of 0 dB and -20 dB rows
    let mut est = t.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
    est.extend(t.iter().map(|v| 1.1 * v));
    let mut tt = t.clone();
    tt.extend_from_slice(&t);
    assert!((loss_value(est, tt, 2).unwrap() + 10.0).abs() < 1e-9);
}

#[test]
fn loss_errors() {
    let z = vec![0.0; 8];
    let x = vec![1.0; 8];
    assert!(matches!(loss_value(x.clone(), z, 1), Err(Error::Contract(_))));
    let g = Graph::<f64>::inference();
    let a = g.constant(Tensor::zeros(vec![1, 8]));
    let b = g.constant(Tensor::zeros(vec![1, 7]));
    assert!(matches!(neg_snr_loss(&a, &b), Err(Error::Contract(_))));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let est = sample_tensor(&[3, 40], 1, -1.0, 1.0);
    let target = sample_tensor(&[3, 40], 2, -1.0, 1.0);
    let r = GradCheck::default()
        .run(&[est, target], |v| neg_snr_loss(&v[0], &v[1]))
        .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{:?}", r);
}

#[test]
fn floored_loss_has_zero_gradient() {
    let g = Graph::<f64>::new();
    let t = sample_tensor(&[1, 16], 3, -1.0, 1.0);
    let e = g.leaf(t.clone(), true);
    let tv = g.constant(t);
    let l = neg_snr_loss(&e, &tv).unwrap();
    let grads = g.backward(&l).unwrap();
    assert!(grads.get(&e).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn learning_rate_schedule() {
    assert_eq!(lr_at(0), 0.001);
    assert!((lr_at(1) - 0.00099).abs() < 1e-15);
    // 0.001 * 0.99^100 = 3.660323e-4
    assert!((lr_at(100) - 3.660323412732292e-4).abs() < 1e-15);
}

fn store(values: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, v) in values {
        s.add(*name, Tensor::new(vec![v.len()], v.clone()).unwrap()).unwrap();
    }
    s
}

fn norm(g: &[Tensor<f64>]) -> f64 {
    g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn clipping() {
    let p = store(&[("a", vec![0.0; 2]), ("b", vec![0.0; 1])]);
    // norm 2
    let mut g = vec![
        Tensor::new(vec![2], vec![1.2, 0.0]).unwrap(),
        Tensor::new(vec![1], vec![1.6]).unwrap(),
    ];
    let c = clip_gradients(&p, &mut g, 1.0).unwrap();
    assert!((c.norm - 2.0).abs() < 1e-12);
    assert_eq!(c.scale, 0.5);
    assert!((norm(&g) - 1.0).abs() < 1e-7);
    assert!((g[1].data()[0] - 0.8).abs() < 1e-12);
    // norm 0.5: unchanged
    let mut g = vec![
        Tensor::new(vec![2], vec![0.3, 0.0]).unwrap(),
        Tensor::new(vec![1], vec![0.4]).unwrap(),
    ];
    let before = g.clone();
    let c = clip_gradients(&p, &mut g, 1.0).unwrap();
    assert_eq!(c.scale, 1.0);
    assert_eq!(g, before);
    let mut g = vec![
        Tensor::new(vec![2], vec![0.3, 0.0]).unwrap(),
        Tensor::new(vec![1], vec![f64::NAN]).unwrap(),
    ];
    match clip_gradients(&p, &mut g, 1.0) {
        Err(Error::Training(msg)) => assert!(msg.contains('b'), "{}", msg),
        other => panic!("{:?}", other),
    }
}

#[test]
fn adam_single_step_by_hand() {
    // m = 0.1, v = 0.001, bias-corrected both to 1: step = lr / (1 + eps)
    let mut p = store(&[("w", vec![0.5])]);
    let mut opt = Adam::new(&p, AdamConfig::default());
    let g = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
    opt.step(&mut p, &g, 1e-3).unwrap();
    let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
    assert!((p.by_name("w").unwrap().data()[0] - expected).abs() < 1e-15);
    // second step with gradient -1: m = 0.09 - 0.1 = -0.01, v = 0.001999
    opt.step(&mut p, &[Tensor::new(vec![1], vec![-1.0]).unwrap()], 1e-3)
        .unwrap();
    let mhat = -0.01 / (1.0 - 0.81);
    let vhat = (0.999 * 0.001 + 0.001) / (1.0 - 0.999f64 * 0.999);
    let expected2 = expected - 1e-3 * mhat / (vhat.sqrt() + 1e-8);
    assert!((p.by_name("w").unwrap().data()[0] - expected2).abs() < 1e-15);
}

#[test]
fn adamw_decays_before_the_update() {
    let mut p = store(&[("w", vec![2.0])]);
    let mut opt = Adam::new(&p, AdamConfig::adamw(0.001));
    opt.step(&mut p, &[Tensor::new(vec![1], vec![0.0]).unwrap()], 0.1)
        .unwrap();
    assert!((p.by_name("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.001)).abs() < 1e-15);
    let cfg = TrainConfig::default();
    assert_eq!(cfg.adam(Variant::Mamba).weight_decay, 0.001);
    assert_eq!(cfg.adam(Variant::Retention).weight_decay, 0.0);
    assert_eq!(cfg.adam(Variant::Msa).weight_decay, 0.0);
}

#[test]
fn plan_parsing() {
    let p: StagePlan = "ST(4s,100e)+LF(32s,5e)".parse().unwrap();
    assert_eq!(p.stages.len(), 2);
    assert_eq!(
        p.stages[0],
        Stage {
            kind: StageKind::Short,
            seconds: 4.0,
            epochs: 100
        }
    );
    assert_eq!(p.stages[1].kind, StageKind::LongFinetune);
    assert_eq!(p.to_string(), "ST(4s,100e)+LF(32s,5e)");
    assert_eq!(p.total_epochs(), 105);
    let lt: StagePlan = " LT(32s, 18e) ".parse().unwrap();
    assert_eq!(
        lt.stages,
        vec![Stage {
            kind: StageKind::Long,
            seconds: 32.0,
            epochs: 18
        }]
    );
    assert!(matches!("".parse::<StagePlan>(), Err(Error::Config(_))));
    for bad in ["ST(4,2e)", "XX(4s,2e)", "ST(4s)", "ST(4s,2e", "ST(4s,2e)+"] {
        assert!(bad.parse::<StagePlan>().is_err(), "{}", bad);
    }
    let stft = ospatialnet::stft::StftConfig::default();
    assert!(p.validate(&stft).is_ok());
    let short: StagePlan = "ST(0.01s,1e)".parse().unwrap();
    assert!(matches!(short.validate(&stft), Err(Error::Config(_))));
    let zero: StagePlan = "ST(4s,0e)".parse().unwrap();
    assert!(matches!(zero.validate(&stft), Err(Error::Config(_))));
    assert!(matches!(
        StagePlan { stages: vec![] }.validate(&stft),
        Err(Error::Config(_))
    ));
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        train_utterances: 4,
        valid_utterances: 1,
        eval_utterances: 1,
        eval_duration_s: 5.0,
        ..TrainConfig::toy()
    }
}

fn tiny_model() -> SpatialNet<f32> {
    SpatialNet::new(ModelConfig::toy(Variant::Retention), 11).unwrap()
}

#[test]
fn st_lf_plan_writes_three_checkpoints_and_chains_stages() {
    let dir = tempfile::tempdir().unwrap();
    let plan: StagePlan = "ST(1s,4e)+LF(2s,1e)".parse().unwrap();
    let mut tr = Trainer::new(tiny_config(), ModelConfig::toy(Variant::Retention).stft).unwrap();
    let init = tiny_model();
    let init_fp = init.fingerprint();
    let rep = tr.run_plan(init, &plan, Some(dir.path())).unwrap();

    let ckpts: Vec<_> = std::iter::once(rep.init_checkpoint.clone().unwrap())
        .chain(rep.stages.iter().map(|s| s.checkpoint.clone().unwrap()))
        .collect();
    assert_eq!(ckpts.len(), 3);
    for c in &ckpts {
        assert!(c.exists());
    }
    let c0 = Checkpoint::<f32>::load(&ckpts[0]).unwrap();
    assert_eq!(c0.model.fingerprint(), init_fp);
    assert!(c0.stages.is_empty());
    let c2 = Checkpoint::<f32>::load(&ckpts[2]).unwrap();
    assert_eq!(c2.stages.len(), 2);
    assert_eq!(c2.model.fingerprint(), rep.model.fingerprint());

    // the fine-tuning stage starts where the short stage ended
    assert_eq!(rep.stages[0].start_fingerprint, init_fp);
    assert_eq!(rep.stages[1].start_fingerprint, rep.stages[0].end_fingerprint);
    assert_ne!(rep.stages[1].end_fingerprint, rep.stages[1].start_fingerprint);
    assert_eq!(rep.stages[1].first_epoch, 4);

    // one schedule across stages
    assert_eq!(rep.epochs.len(), 5);
    for r in &rep.epochs {
        assert_eq!(r.lr, lr_at(r.epoch));
    }
    assert_eq!(rep.epochs[4].stage, "LF(2s,1e)");

    // training loss does not increase over the short stage
    for w in rep.epochs[..4].windows(2) {
        assert!(w[1].mean_loss <= w[0].mean_loss, "{:?}", rep.epochs);
    }

    let csv = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
    assert!(csv.starts_with("epoch,stage,lr,mean_loss,valid_si_sdr\n"));
    assert_eq!(csv.lines().count(), 6);
    let curve = std::fs::read_to_string(dir.path().join("eval_stage2_LF").join("mean.csv")).unwrap();
    // 5 s signals, 4 s window, 1 s hop: 2 segments
    assert_eq!(curve.lines().count(), 3);
    assert!(curve.starts_with("segment_start_s,enhanced_db,unprocessed_db,improvement_db\n"));
    assert!(dir.path().join("eval_stage1_ST").join("utt000.csv").exists());
}

#[test]
fn training_is_deterministic() {
    let plan: StagePlan = "ST(1s,2e)".parse().unwrap();
    let run = || {
        let mut cfg = tiny_config();
        cfg.eval_utterances = 0;
        let mut tr = Trainer::new(cfg, ModelConfig::toy(Variant::Retention).stft).unwrap();
        let rep = tr.run_plan(tiny_model(), &plan, None).unwrap();
        Checkpoint::new(rep.model, rep.history).to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn single_long_stage_uses_the_same_loop() {
    let plan: StagePlan = "LT(2s,1e)".parse().unwrap();
    let mut cfg = tiny_config();
    cfg.eval_utterances = 0;
    cfg.valid_utterances = 0;
    let mut tr = Trainer::new(cfg, ModelConfig::toy(Variant::Retention).stft).unwrap();
    let rep = tr.run_plan(tiny_model(), &plan, None).unwrap();
    assert_eq!(rep.stages.len(), 1);
    assert!(rep.stages[0].curve.is_none());
    assert!(rep.epochs[0].valid_si_sdr.is_nan());
    assert!(rep.epochs[0].mean_loss.is_finite());
}

#[test]
fn mismatched_setups_are_config_errors() {
    let mut tr = Trainer::new(tiny_config(), ModelConfig::toy(Variant::Retention).stft).unwrap();
    let six = SpatialNet::<f32>::new(
        ModelConfig {
            mics: 6,
            ..ModelConfig::toy(Variant::Retention)
        },
        0,
    )
    .unwrap();
    let plan: StagePlan = "ST(1s,1e)".parse().unwrap();
    assert!(matches!(tr.run_plan(six, &plan, None), Err(Error::Config(_))));
    let short: StagePlan = "ST(0.02s,1e)".parse().unwrap();
    assert!(matches!(tr.run_plan(tiny_model(), &short, None), Err(Error::Config(_))));
}
