mod common;

use candle_core::{Device, Tensor};
use common::{random_image, tiny_config};
use loc_core::datamodel::{stack_images, EditSample, ImageTensor, NamedTensor};
use loc_core::diffusion::{EditUnet, NoiseSchedule};
use loc_core::hypernetwork::Hypernetwork;
use loc_core::lora::{validate_zero_init, LayerDelta, LoRABundle, SlotFactors};
use loc_core::rng::substream;
use loc_core::synthdata::{gen_pair_dataset, load_pair_dataset, CorpusOptions, PairRecord};
use loc_core::training::*;
use loc_core::LocError;

fn samples(size: usize, n: usize, seed: u64) -> Vec<EditSample> {
    let mut rng = substream(seed, "quads");
    (0..n as u64)
        .map(|i| {
            let a = random_image(size, seed, 2 * i);
            let ap = random_image(size, seed, 2 * i + 1);
            make_paired_quad(&a, &ap, &mut rng).unwrap()
        })
        .collect()
}

/// Returns whichever stored image is the correct target for the condition it sees.
struct Oracle {
    pairs: Vec<(Tensor, Tensor)>,
}

impl Generator for Oracle {
    fn predict(&self, _x: &Tensor, _ts: &[usize], cond: &Tensor, _b: &LoRABundle) -> loc_core::Result<Tensor> {
        for (c, target) in &self.pairs {
            if common::max_abs_diff(c, cond) == 0.0 {
                return Ok(target.clone());
            }
        }
        panic!("oracle saw an unknown condition");
    }
}

fn setup() -> (loc_core::config::RunConfig, EditUnet, Hypernetwork, NoiseSchedule) {
    let cfg = tiny_config();
    let model = EditUnet::init(&cfg.generator, 1).unwrap().into_frozen().unwrap();
    let hyper = Hypernetwork::init(&cfg.hypernet, 2).unwrap();
    let sched = cfg.schedule().unwrap();
    (cfg, model, hyper, sched)
}

#[test]
fn perfect_predictor_gives_zero_loss() {
    let (_, _, hyper, sched) = setup();
    let qb = QuadBatch::from_samples(&samples(16, 3, 1)).unwrap();
    let oracle = Oracle {
        pairs: vec![
            (qb.query.clone(), qb.target.clone()),
            (qb.target.clone(), qb.query.clone()),
        ],
    };
    let draws = LossDraws::sample(&mut substream(0, "d"), qb.before.dims(), sched.steps()).unwrap();
    let (_, r) = loc_loss(&qb, &hyper, &oracle, &sched, &draws, true, 1).unwrap();
    assert_eq!((r.forward_term, r.reverse_term, r.total), (0.0, 0.0, 0.0));
}

#[test]
fn reverse_disabled_has_no_reverse_term() {
    let (_, model, hyper, sched) = setup();
    let qb = QuadBatch::from_samples(&samples(16, 2, 2)).unwrap();
    let draws = LossDraws::sample(&mut substream(1, "d"), qb.before.dims(), sched.steps()).unwrap();
    let (_, r) = loc_loss(&qb, &hyper, &model, &sched, &draws, false, 1).unwrap();
    assert_eq!(r.reverse_term, 0.0);
    assert_eq!(r.total, r.forward_term);
    assert!(r.forward_term > 0.0);
}

fn negate_by_hand(b: &LoRABundle) -> LoRABundle {
    let layers = b
        .layers()
        .iter()
        .map(|l| {
            let slots = loc_core::lora::Slot::ALL.map(|s| SlotFactors {
                a: l.slot(s).a.clone(),
                b: (l.slot(s).b.clone() * -1.0).unwrap(),
            });
            LayerDelta::new(slots).unwrap()
        })
        .collect();
    LoRABundle::new(layers).unwrap()
}

/// Recomputes both terms one sample at a time with scalar noising in f64.
fn straight_line_loss(
    s: &[EditSample],
    hyper: &Hypernetwork,
    model: &EditUnet,
    sched: &NoiseSchedule,
    draws: &LossDraws,
) -> (f64, f64) {
    let dev = Device::Cpu;
    let eps_f = draws.eps_forward.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let eps_r = draws.eps_reverse.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let per = s[0].before.data().len();
    let term = |x0: &ImageTensor, cond: &ImageTensor, bundle: &LoRABundle, t: usize, eps: &[f32]| -> f64 {
        let ab = sched.alpha_bar(t).unwrap();
        let x_t: Vec<f32> = x0
            .data()
            .iter()
            .zip(eps)
            .map(|(&x, &e)| (ab.sqrt() * f64::from(x) + (1.0 - ab).sqrt() * f64::from(e)) as f32)
            .collect();
        let x_t = Tensor::from_vec(x_t, (1, x0.size(), x0.size(), 3), &dev).unwrap();
        let pred = model
            .predict(&x_t, &[t], &stack_images(&[cond], &dev).unwrap(), bundle)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        pred.iter().zip(x0.data()).map(|(&p, &x)| f64::from(x - p).powi(2)).sum()
    };
    let (mut fwd, mut rev) = (0.0, 0.0);
    for (i, q) in s.iter().enumerate() {
        let bundle = hyper
            .forward(&stack_images(&[&q.before], &dev).unwrap(), &stack_images(&[&q.after], &dev).unwrap())
            .unwrap();
        let eps = |all: &[f32]| all[i * per..(i + 1) * per].to_vec();
        fwd += term(&q.target, &q.query, &bundle, draws.t_forward[i], &eps(&eps_f));
        rev += term(&q.query, &q.target, &negate_by_hand(&bundle), draws.t_reverse[i], &eps(&eps_r));
    }
    let n = (per * s.len()) as f64;
    (fwd / n, rev / n)
}

fn train_one_step(hyper: &Hypernetwork, model: &EditUnet, sched: &NoiseSchedule, s: &[EditSample]) {
    let cfg = TrainConfig::default();
    let qb = QuadBatch::from_samples(s).unwrap();
    let draws = LossDraws::sample(&mut substream(5, "d"), qb.before.dims(), sched.steps()).unwrap();
    let (loss, _) = loc_loss(&qb, hyper, model, sched, &draws, true, 1).unwrap();
    AdamW::new(cfg.optimizer()).step(hyper.store(), &loss.backward().unwrap(), 1).unwrap();
}

#[test]
fn loss_matches_straight_line_recomputation() {
    let (_, model, hyper, sched) = setup();
    let s = samples(16, 4, 3);
    // Move off the exact-zero init so the reverse term sees a nonzero bundle.
    train_one_step(&hyper, &model, &sched, &s);
    let qb = QuadBatch::from_samples(&s).unwrap();
    let draws = LossDraws::sample(&mut substream(7, "d"), qb.before.dims(), sched.steps()).unwrap();
    let (_, r) = loc_loss(&qb, &hyper, &model, &sched, &draws, true, 2).unwrap();
    let (fwd, rev) = straight_line_loss(&s, &hyper, &model, &sched, &draws);
    assert!((r.forward_term - fwd).abs() <= 1e-5, "{} vs {fwd}", r.forward_term);
    assert!((r.reverse_term - rev).abs() <= 1e-5, "{} vs {rev}", r.reverse_term);
    assert!((r.total - (fwd + rev)).abs() <= 1e-5);
}

#[test]
fn exchanged_sample_swaps_the_two_terms() {
    let (_, model, hyper, sched) = setup();
    let s = samples(16, 2, 4);
    train_one_step(&hyper, &model, &sched, &s);
    let qb = QuadBatch::from_samples(&s).unwrap();
    let bundle = hyper.forward(&qb.before, &qb.after).unwrap();
    let draws = LossDraws::sample(&mut substream(8, "d"), qb.before.dims(), sched.steps()).unwrap();
    let (f1, r1) = dual_terms(&qb.query, &qb.target, &bundle, &model, &sched, &draws, true).unwrap();
    let neg = loc_core::lora::negate_bundle(&bundle).unwrap();
    let (f2, r2) = dual_terms(&qb.target, &qb.query, &neg, &model, &sched, &draws.swapped(), true).unwrap();
    let v = |t: &Tensor| t.to_scalar::<f32>().unwrap();
    assert_eq!(v(&f1), v(&r2));
    assert_eq!(v(&r1), v(&f2));
}

fn corpus(n: usize, seed: u64) -> (tempfile::TempDir, Vec<PairRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let opts = CorpusOptions {
        image_size: 16,
        ..CorpusOptions::default()
    };
    gen_pair_dataset(n, &opts, dir.path(), seed).unwrap();
    let (_, recs) = load_pair_dataset(dir.path()).unwrap();
    (dir, recs)
}

fn named_bits(t: &[NamedTensor]) -> Vec<(String, Vec<u32>)> {
    t.iter()
        .map(|n| (n.name.clone(), n.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn first_step_leaves_zero_init_and_generator_stays_bitwise_frozen() {
    let (cfg, model, hyper, sched) = setup();
    let (_d, recs) = corpus(8, 1);
    let probe = |h: &Hypernetwork| {
        let dev = Device::Cpu;
        let a = stack_images(&[&recs[0].before], &dev).unwrap();
        let ap = stack_images(&[&recs[0].after], &dev).unwrap();
        validate_zero_init(&h.forward(&a, &ap).unwrap()).unwrap()
    };
    assert!(probe(&hyper));
    let before = named_bits(&model.store().to_named().unwrap());
    let mut state = TrainState::new(&cfg.train);
    let plan = StagePlan {
        name: STAGE1.into(),
        epochs: 1,
        max_steps: Some(1),
        lr: cfg.train.lr,
    };
    train_stage(&recs, &hyper, &model, &sched, &cfg.train, &plan, &mut state, None).unwrap();
    assert!(!probe(&hyper));
    let plan = StagePlan {
        max_steps: None,
        ..plan
    };
    let mut state = TrainState::new(&cfg.train);
    train_stage(&recs, &hyper, &model, &sched, &cfg.train, &plan, &mut state, None).unwrap();
    assert_eq!(named_bits(&model.store().to_named().unwrap()), before);
}

#[test]
fn trainable_generator_is_refused() {
    let (cfg, _, hyper, sched) = setup();
    let live = EditUnet::init(&cfg.generator, 1).unwrap();
    let (_d, recs) = corpus(4, 2);
    let plan = StagePlan {
        name: STAGE1.into(),
        epochs: 1,
        max_steps: None,
        lr: cfg.train.lr,
    };
    let mut state = TrainState::new(&cfg.train);
    let err = train_stage(&recs, &hyper, &live, &sched, &cfg.train, &plan, &mut state, None);
    assert!(matches!(err, Err(LocError::Config(_))));
}

#[test]
fn stage_two_on_empty_directory_is_an_error() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_pair_dataset(empty.path()), Err(LocError::EmptyDataset(_))));
    let (cfg, model, hyper, sched) = setup();
    let (_d, recs) = corpus(4, 3);
    let mut state = TrainState::new(&cfg.train);
    let err = two_stage_train(&recs, Some(&[]), &hyper, &model, &sched, &cfg.train, &mut state, None);
    assert!(matches!(err, Err(LocError::Dataset(_))));
}

#[test]
fn resumed_stage_two_matches_uninterrupted_run() {
    let (mut cfg, model, _, sched) = setup();
    cfg.train.stage2_epochs = 1;
    let (_d1, s1) = corpus(8, 4);
    let (_d2, s2) = corpus(8, 5);
    let out_dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: out_dir.path().to_path_buf(),
        config: cfg.to_json(),
        seed: cfg.train.seed,
    };

    let straight = Hypernetwork::init(&cfg.hypernet, 3).unwrap();
    let mut state = TrainState::new(&cfg.train);
    two_stage_train(&s1, Some(&s2), &straight, &model, &sched, &cfg.train, &mut state, None).unwrap();

    let first = Hypernetwork::init(&cfg.hypernet, 3).unwrap();
    let mut state = TrainState::new(&cfg.train);
    two_stage_train(&s1, None, &first, &model, &sched, &cfg.train, &mut state, Some(&out)).unwrap();
    let run = loc_core::config::load_run_checkpoint(&out_dir.path().join(STAGE1)).unwrap();
    assert_eq!(
        named_bits(&run.hypernet.store().to_named().unwrap()),
        named_bits(&first.store().to_named().unwrap())
    );
    let mut state = run.state;
    two_stage_train(&s1, Some(&s2), &run.hypernet, &run.model, &sched, &cfg.train, &mut state, None).unwrap();
    assert_eq!(
        named_bits(&run.hypernet.store().to_named().unwrap()),
        named_bits(&straight.store().to_named().unwrap())
    );
}

#[test]
fn metrics_log_has_one_line_per_step() {
    let (cfg, model, hyper, sched) = setup();
    let (_d, recs) = corpus(8, 6);
    let out_dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: out_dir.path().to_path_buf(),
        config: cfg.to_json(),
        seed: 0,
    };
    let mut state = TrainState::new(&cfg.train);
    let reports = two_stage_train(&recs, None, &hyper, &model, &sched, &cfg.train, &mut state, Some(&out)).unwrap();
    let text = std::fs::read_to_string(out.metrics_path()).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), reports.len());
    for (l, r) in lines.iter().zip(&reports) {
        assert_eq!(l["step"], r.step);
        for k in ["forward_term", "reverse_term", "total", "wall_time"] {
            assert!(l[k].as_f64().unwrap() >= 0.0);
        }
    }
    assert!(out_dir.path().join("final/manifest.json").exists());

    // A fresh run into the same directory replaces the log.
    let mut state = TrainState::new(&cfg.train);
    let again = two_stage_train(&recs, None, &hyper, &model, &sched, &cfg.train, &mut state, Some(&out)).unwrap();
    let text = std::fs::read_to_string(out.metrics_path()).unwrap();
    assert_eq!(text.lines().count(), again.len());
}

#[test]
fn each_stage_runs_at_its_own_learning_rate() {
    let (cfg, model, hyper, sched) = setup();
    let (_d, recs) = corpus(8, 2);
    let mut state = TrainState::new(&cfg.train);
    let s1 = StagePlan {
        name: STAGE1.into(),
        epochs: 1,
        max_steps: Some(1),
        lr: cfg.train.lr,
    };
    train_stage(&recs, &hyper, &model, &sched, &cfg.train, &s1, &mut state, None).unwrap();
    assert_eq!(state.optimizer.lr(), cfg.train.lr);
    let s2 = StagePlan {
        name: STAGE2.into(),
        lr: cfg.train.stage2_lr,
        ..s1
    };
    train_stage(&recs, &hyper, &model, &sched, &cfg.train, &s2, &mut state, None).unwrap();
    assert_eq!(state.optimizer.lr(), cfg.train.stage2_lr);
}
