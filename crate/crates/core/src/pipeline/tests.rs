use super::*;
use crate::autodiff::{grad_check, GradCheckOptions};
use crate::config::{HeroConfig, OptimizerKind};
use crate::encoder::EncoderConfig;
use crate::world::{generate_set, Action};

fn tiny_config() -> HeroConfig {
    let mut c = HeroConfig::default();
    c.world = WorldConfig {
        frames: 2,
        grid: (2, 2),
        feature_dim: 6,
        min_objects: 2,
        max_objects: 2,
        min_span: 1,
        max_span: 1,
        actions: vec![Action::MoveUp, Action::MoveDown],
        ..WorldConfig::default()
    };
    c.model.encoder = EncoderConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        queries_per_frame: 3,
        num_heads: 2,
        model_dim: 8,
        ffn_dim: 8,
        ..EncoderConfig::default()
    };
    c.model.proposal_scales = vec![1];
    c.train.train_episodes = 4;
    c
}

fn small_config() -> HeroConfig {
    let mut c = HeroConfig::default();
    c.world.feature_dim = 8;
    c.model.encoder = EncoderConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 16,
        ffn_dim: 16,
        ..EncoderConfig::default()
    };
    c.train.train_episodes = 6;
    c
}

fn build(c: &HeroConfig, seed: u64) -> HeroModel<f64> {
    HeroModel::new(&c.model, InputShape::from(&c.world), seed).unwrap()
}

#[test]
fn inference_contract() {
    let c = small_config();
    let model = build(&c, 1);
    let eps = generate_set::<f64>(&c.world, 3, 2).unwrap();
    for ep in &eps {
        let a = model.infer(&ep.video, &ep.query).unwrap();
        assert_eq!(a.boxes.len(), c.world.frames);
        assert_eq!(a, model.infer(&ep.video, &ep.query).unwrap());
        let clip = a.clip.unwrap();
        assert!(a.partition.consistent.iter().all(|&f| clip.contains(f)));
        assert!(!a.partition.consistent.is_empty());
        for b in &a.boxes {
            assert!(b.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
    }
    let mut wrong = c.world.clone();
    wrong.frames = 6;
    let other = generate_set::<f64>(&wrong, 1, 0).unwrap();
    assert!(model.infer(&other[0].video, &other[0].query).is_err());
}

#[test]
fn retrieval_off_means_every_frame_consistent() {
    let mut c = small_config();
    c.model.encoder.components.retrieval = false;
    let model = build(&c, 1);
    let eps = generate_set::<f64>(&c.world, 2, 2).unwrap();
    let inf = model.infer(&eps[0].video, &eps[0].query).unwrap();
    assert_eq!(inf.partition.consistent, (0..c.world.frames).collect::<Vec<_>>());
    assert!(inf.clip.is_none() && inf.selection.is_none());
    let mut g = Graph::new();
    let parts = model.net.loss(&mut g, &model.store, &eps[0], &eps[1], &c.train).unwrap();
    assert_eq!(g.value(parts.retr).item(), 0.0);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let mut c = small_config();
        c.train.learning_rate = 0.0;
        c.train.optimizer = kind;
        c.train.epochs = 1;
        let mut model = build(&c, 3);
        let before = model.store.clone();
        let pool = generate_set::<f64>(&c.world, 6, 4).unwrap();
        let hist = train(&mut model, &pool, &c.train, |_, _| Ok(())).unwrap();
        assert_eq!(hist.len(), 6);
        for (id, p) in before.iter() {
            assert_eq!(p.value(), model.store.value(id));
        }
    }
}

#[test]
fn training_is_deterministic() {
    let mut c = small_config();
    c.train.optimizer = OptimizerKind::Adam;
    c.train.learning_rate = 1e-3;
    c.train.epochs = 2;
    let pool = generate_set::<f64>(&c.world, 6, 4).unwrap();
    let run = || {
        let mut m = build(&c, 5);
        let h = train(&mut m, &pool, &c.train, |_, _| Ok(())).unwrap();
        (h, m.store)
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1.len(), 12);
    let bits = |h: &[StepStats]| h.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&h1), bits(&h2));
    for (id, p) in s1.iter() {
        assert_eq!(p.value(), s2.value(id));
    }
    assert!(h1.iter().all(|s| s.loss.is_finite() && s.lr == 1e-3));
}

#[test]
fn step_cap_and_schedule() {
    let mut c = small_config();
    c.train.epochs = 3;
    c.train.decay_every = 1;
    c.train.max_steps = Some(8);
    c.train.learning_rate = 1e-4;
    let mut model = build(&c, 1);
    let pool = generate_set::<f64>(&c.world, 6, 4).unwrap();
    let mut seen = 0;
    let h = train(&mut model, &pool, &c.train, |_, _| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!((h.len(), seen), (8, 8));
    assert_eq!(h[0].lr, 1e-4);
    assert!((h[7].lr - 1e-5).abs() < 1e-20);
    assert_eq!(h[7].epoch, 1);
    let stop = train(&mut model, &pool, &c.train, |s, _| {
        if s.step == 2 {
            Err(TensorError::invalid("test", "stop"))
        } else {
            Ok(())
        }
    });
    assert!(stop.is_err());
}

#[test]
fn one_step_lowers_loss_for_most_inits() {
    let mut c = tiny_config();
    c.train.learning_rate = 1e-3;
    let eps = generate_set::<f64>(&c.world, 2, 11).unwrap();
    let loss_of = |m: &HeroModel<f64>| {
        let mut g = Graph::new();
        let p = m.net.loss(&mut g, &m.store, &eps[0], &eps[1], &c.train).unwrap();
        g.value(p.total).item()
    };
    let mut better = 0;
    for seed in 0..100 {
        let mut m = build(&c, seed);
        let before = loss_of(&m);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &m.store);
        train_step(&mut m, &eps[0], &eps[1], &c.train, &mut opt, 0, c.train.learning_rate).unwrap();
        if loss_of(&m) < before {
            better += 1;
        }
    }
    assert!(better >= 95, "loss dropped for {better} of 100 inits");
}

#[test]
fn zero_retrieval_weight_leaves_retrieval_grads_zero() {
    let mut c = small_config();
    let eps = generate_set::<f64>(&c.world, 2, 3).unwrap();
    let grads = |c: &HeroConfig| {
        let mut m = build(c, 2);
        let ids = m.retrieval_param_ids();
        assert!(!ids.is_empty());
        let mut g = Graph::new();
        let p = m.net.loss(&mut g, &m.store, &eps[0], &eps[1], &c.train).unwrap();
        g.backward(p.total, &mut m.store).unwrap();
        ids.iter().map(|&id| m.store.grad(id).data().iter().map(|x| x.abs()).sum::<f64>()).sum::<f64>()
    };
    assert!(grads(&c) > 0.0);
    c.train.retr_weight = 0.0;
    assert_eq!(grads(&c), 0.0);
}

#[test]
fn fixed_fine_negative_keeps_the_value_and_drops_its_gradient() {
    let mut c = small_config();
    let eps = generate_set::<f64>(&c.world, 2, 4).unwrap();
    let run = |c: &HeroConfig| {
        let mut m = build(c, 3);
        let mut g = Graph::new();
        let pass = m.net.forward(&mut g, &m.store, &eps[0].video, &eps[0].query).unwrap();
        let l = m.net.retrieval_losses(&mut g, &m.store, &pass, (&eps[1].video, &eps[1].query)).unwrap();
        let fine = g.value(l.fine).item();
        g.backward(l.fine, &mut m.store).unwrap();
        let grads: Vec<f64> = m.store.ids().flat_map(|id| m.store.grad(id).data().to_vec()).collect();
        (fine, grads)
    };
    let (fine, through) = run(&c);
    assert!(fine > 0.0, "hinge inactive at init: {fine}");
    c.model.retrieval.detach_fine_negative = true;
    let (fixed, stopped) = run(&c);
    assert_eq!(fine, fixed);
    assert_ne!(through, stopped);
}

#[test]
fn end_to_end_gradient_check_on_minimal_episode() {
    let c = tiny_config();
    let eps = generate_set::<f64>(&c.world, 2, 7).unwrap();
    assert_eq!(eps[0].query.len(), 3);
    assert_eq!(eps[0].video.grid, (2, 2));
    let mut model = build(&c, 9);
    let net = &model.net;
    let report = grad_check(&mut model.store, &GradCheckOptions::default(), |g, ps| {
        Ok(net.loss(g, ps, &eps[0], &eps[1], &c.train)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.coords_checked > 1000);
}

#[test]
fn checkpoint_roundtrip() {
    let c = small_config();
    let model = build(&c, 4);
    let dir = std::env::temp_dir().join(format!("hero-ckpt-{}", std::process::id()));
    let path = dir.join("m.ckpt");
    save_checkpoint(&path, &c, &model).unwrap();
    let (c2, back) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(c2, c);
    for (id, p) in model.store.iter() {
        assert_eq!(p.value(), back.store.value(id));
    }
    let ep = generate_set::<f64>(&c.world, 1, 1).unwrap();
    assert_eq!(model.infer(&ep[0].video, &ep[0].query).unwrap(), back.infer(&ep[0].video, &ep[0].query).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f64>(&path).is_err());
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f64>(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn evaluation_and_retrieval_reports() {
    let c = small_config();
    let model = build(&c, 4);
    let eps = generate_set::<f64>(&c.world, 4, 1).unwrap();
    assert!(evaluate(&model, &[], QueryMode::Full, "h").is_err());
    let r = evaluate(&model, &eps, QueryMode::Full, "h").unwrap();
    assert_eq!(r.episodes, 4);
    assert_eq!(r, evaluate(&model, &eps, QueryMode::Full, "h").unwrap());
    assert!(r.records.iter().all(|x| x.frame_ious.len() == c.world.frames));
    evaluate(&model, &eps, QueryMode::Zeroed, "h").unwrap();
    let rr = retrieval_report(&model, &eps).unwrap();
    assert!((0.0..=1.0).contains(&rr.f1) && (0.0..=1.0).contains(&rr.clip_overlap));
}

#[test]
fn single_precision_forward_runs() {
    let c = small_config();
    let model = HeroModel::<f32>::new(&c.model, InputShape::from(&c.world), 1).unwrap();
    let eps = generate_set::<f32>(&c.world, 1, 1).unwrap();
    let inf = model.infer(&eps[0].video, &eps[0].query).unwrap();
    assert!(inf.boxes.iter().flatten().all(|x| x.is_finite()));
}
