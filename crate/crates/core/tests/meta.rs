mod common;

use common::{group_of, tiny_data, tiny_model};
use metaemb::autodiff::check::{central_gradient, rel_error};
use metaemb::autodiff::{checksum, Tensor};
use metaemb::data::{sample_meta_pair, split_old_new, SplitSpec};
use metaemb::meta::{
    adapt_embedding, meta_gradient, meta_gradient_explicit, meta_loss, meta_objective, train_meta, warmup_update,
    Generator, MetaConfig, Pooling, SecondOrder,
};
use metaemb::Variant;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(alpha: f64, a: f64) -> MetaConfig {
    MetaConfig {
        alpha,
        inner_lr: a,
        k: 4,
        l2: 1e-3,
        ..MetaConfig::default()
    }
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let data = tiny_data(3, 12, 1);
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let model = tiny_model(variant, &data, 4, i as u64);
        let gen = Generator::new(&model, Pooling::Average, 1e-3, 7 + i as u64).unwrap();
        let group = group_of(&data, 1 + (i % 3) as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let (a, b) = sample_meta_pair(&group, 4, &mut rng).unwrap();
        let cfg = small_config(0.3, 0.5);
        let exact = meta_gradient(&model, &gen, &a, &b, &cfg).unwrap();
        let fd = central_gradient(
            |w| meta_objective(&model, &gen, w, &a, &b, &cfg),
            gen.weight().tensor(),
            1e-5,
        )
        .unwrap();
        let err = rel_error(&exact.grad, &fd);
        assert!(err < 1e-3, "{variant}: rel error {err}");
        let explicit = meta_gradient_explicit(&model, &gen, &a, &b, &cfg, SecondOrder::Include).unwrap();
        assert!(rel_error(&exact.grad, &explicit.grad) < 1e-8, "{variant}");
        let dropped = meta_gradient_explicit(&model, &gen, &a, &b, &cfg, SecondOrder::Drop).unwrap();
        assert!(
            rel_error(&exact.grad, &dropped.grad) > 1e-8,
            "{variant}: Hessian term had no effect"
        );
    }
}

#[test]
fn reductions_match_first_order_form() {
    let data = tiny_data(2, 10, 2);
    for variant in Variant::ALL {
        let model = tiny_model(variant, &data, 4, 5);
        let gen = Generator::new(&model, Pooling::Average, 1e-3, 3).unwrap();
        let group = group_of(&data, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = sample_meta_pair(&group, 4, &mut rng).unwrap();
        for cfg in [small_config(1.0, 0.5), small_config(0.3, 0.0)] {
            let exact = meta_gradient(&model, &gen, &a, &b, &cfg).unwrap();
            let first = meta_gradient_explicit(&model, &gen, &a, &b, &cfg, SecondOrder::Drop).unwrap();
            let diff = exact
                .grad
                .data()
                .iter()
                .zip(first.grad.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(
                diff <= 1e-10,
                "{variant} alpha={} a={}: {diff}",
                cfg.alpha,
                cfg.inner_lr
            );
        }
    }
}

#[test]
fn overlapping_batches_rejected() {
    let data = tiny_data(1, 10, 3);
    let model = tiny_model(Variant::Fm, &data, 4, 0);
    let gen = Generator::new(&model, Pooling::Average, 0.0, 0).unwrap();
    let xs: Vec<_> = data.instances.iter().collect();
    assert!(meta_gradient(&model, &gen, &xs[0..4], &xs[3..7], &small_config(0.1, 0.1)).is_err());
    assert!(meta_gradient(&model, &gen, &xs[0..4], &xs[4..8], &small_config(0.1, 0.1)).is_ok());
    assert!(meta_gradient(&model, &gen, &[], &xs[4..8], &small_config(0.1, 0.1)).is_err());
}

#[test]
fn generator_examples() {
    let data = tiny_data(2, 4, 4);
    let model = tiny_model(Variant::Fm, &data, 2, 0);
    let mut gen = Generator::new(&model, Pooling::Average, 0.0, 0).unwrap();
    let inst = &data.instances[0];
    gen.set_weight(Tensor::zeros(2, 2)).unwrap();
    assert_eq!(
        gen.generate_initial_embedding(&model, inst).unwrap().data(),
        &[0.0, 0.0]
    );

    // hand check: x = mean of the two ad-feature vectors, phi = tanh(x W)
    let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
    gen.set_weight(w).unwrap();
    let e1 = model
        .table(1)
        .tensor()
        .row_slice(inst.features[1].indices()[0] as usize)
        .to_vec();
    let e2 = model
        .table(2)
        .tensor()
        .row_slice(inst.features[2].indices()[0] as usize)
        .to_vec();
    let x = [(e1[0] + e2[0]) / 2.0, (e1[1] + e2[1]) / 2.0];
    let want = [(x[0] * 0.5 + x[1] * 2.0).tanh(), (x[0] * -1.0 + x[1] * 0.25).tanh()];
    let got = gen.generate_initial_embedding(&model, inst).unwrap();
    for (g, w) in got.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15);
    }

    gen.set_weight(Tensor::filled(2, 2, 1e3)).unwrap();
    for inst in &data.instances {
        assert!(gen.generate_initial_embedding(&model, inst).unwrap().max_abs() <= 1.0);
    }
}

#[test]
fn concat_and_max_pooling_widths() {
    let data = tiny_data(2, 4, 4);
    let model = tiny_model(Variant::Fm, &data, 3, 0);
    let gen = Generator::new(&model, Pooling::Concat, 0.0, 0).unwrap();
    assert_eq!(gen.weight().tensor().shape(), &[6, 3]);
    let gen = Generator::new(&model, Pooling::Max, 0.0, 0).unwrap();
    assert_eq!(gen.weight().tensor().shape(), &[3, 3]);
    assert_eq!("max".parse::<Pooling>().unwrap(), Pooling::Max);
}

#[test]
fn loss_arithmetic() {
    assert_eq!(meta_loss(1.0, 0.5, 1.0).unwrap(), 1.0);
    assert_eq!(meta_loss(1.0, 0.5, 0.0).unwrap(), 0.5);
    assert!((meta_loss(1.0, 0.5, 0.1).unwrap() - 0.55).abs() < 1e-15);
    assert!(meta_loss(1.0, 0.5, 1.5).is_err());
    let phi = Tensor::row(vec![0.0, 0.0]);
    let g = Tensor::row(vec![1.0, -2.0]);
    let out = adapt_embedding(&phi, &g, 0.1).unwrap();
    assert!((out.data()[0] + 0.1).abs() < 1e-15 && (out.data()[1] - 0.2).abs() < 1e-15);
    assert!(adapt_embedding(&phi, &g, 0.0).unwrap().bitwise_eq(&phi));
}

#[test]
fn training_freezes_base_and_decomposes() {
    let data = tiny_data(12, 40, 5);
    let spec = SplitSpec {
        old_threshold: 30,
        new_min: 13,
        k: 4,
    };
    let split = split_old_new(&data.schema, data.instances.clone(), &spec).unwrap();
    let model = tiny_model(Variant::DeepFm, &data, 4, 1);
    let mut gen = Generator::new(&model, Pooling::Average, 1e-4, 1).unwrap();
    let before = checksum(model.params());
    let cfg = MetaConfig {
        k: 4,
        ids_per_step: 5,
        outer_lr: 0.05,
        ..MetaConfig::default()
    };
    let w0 = gen.weight().tensor().clone();
    let trace = train_meta(&model, &mut gen, &split.old, &cfg).unwrap();
    assert_eq!(before, checksum(model.params()));
    assert!(!gen.weight().tensor().bitwise_eq(&w0));
    assert_eq!(trace.steps.len(), 2 * 3);
    assert_eq!(trace.samples_consumed, 12 * 4 * 2 * 2);
    for e in trace.entries() {
        assert!((e.l_meta - (0.1 * e.l_a + 0.9 * e.l_b)).abs() <= 1e-12);
    }
    for s in &trace.steps {
        assert!(s.entries.windows(2).all(|w| w[0].ad_id < w[1].ad_id));
    }

    let mut frozen = Generator::new(&model, Pooling::Average, 1e-4, 1).unwrap();
    let w0 = frozen.weight().tensor().clone();
    let trace = train_meta(
        &model,
        &mut frozen,
        &split.old,
        &MetaConfig {
            outer_lr: 0.0,
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(frozen.weight().tensor().bitwise_eq(&w0));
    assert!(!trace.steps.is_empty());

    // parallel and sequential agree bitwise
    let mut p = Generator::new(&model, Pooling::Average, 1e-4, 1).unwrap();
    let mut s = p.clone();
    train_meta(
        &model,
        &mut p,
        &split.old,
        &MetaConfig {
            parallel: true,
            ..cfg.clone()
        },
    )
    .unwrap();
    train_meta(&model, &mut s, &split.old, &MetaConfig { parallel: false, ..cfg }).unwrap();
    assert!(p.weight().tensor().bitwise_eq(s.weight().tensor()));
}

#[test]
fn small_groups_are_skipped() {
    let data = tiny_data(3, 7, 6);
    let model = tiny_model(Variant::Fm, &data, 4, 1);
    let mut gen = Generator::new(&model, Pooling::Average, 0.0, 1).unwrap();
    let groups: Vec<_> = (1..=3).map(|id| group_of(&data, id)).collect();
    let cfg = MetaConfig {
        k: 4,
        ..MetaConfig::default()
    };
    assert!(train_meta(&model, &mut gen, &groups, &cfg).is_err());
    let cfg = MetaConfig {
        k: 3,
        ..MetaConfig::default()
    };
    let trace = train_meta(&model, &mut gen, &groups, &cfg).unwrap();
    assert!(trace.skipped.is_empty());
}

#[test]
fn warmup_descends_and_checks_ids() {
    let data = tiny_data(4, 30, 8);
    let mut reduced = 0;
    let mut trials = 0;
    for variant in Variant::ALL {
        let model = tiny_model(variant, &data, 4, 2);
        let before = checksum(model.params());
        for inst in data.instances.iter().take(17) {
            let ad = inst.ad_id(&data.schema);
            let row = model.ad_embedding(ad).unwrap();
            let l0 = metaemb::autodiff::bce_value(model.predict(&row, inst).unwrap(), inst.label_f64()).unwrap();
            let new = warmup_update(&model, &row, ad, &[inst], 1e-3).unwrap();
            let l1 = metaemb::autodiff::bce_value(model.predict(&new, inst).unwrap(), inst.label_f64()).unwrap();
            trials += 1;
            reduced += usize::from(l1 < l0);
            assert!(warmup_update(&model, &row, ad, &[inst], 0.0).unwrap().bitwise_eq(&row));
            assert!(new.bitwise_eq(&warmup_update(&model, &row, ad, &[inst], 1e-3).unwrap()));
            assert!(warmup_update(&model, &row, ad + 1, &[inst], 1e-3).is_err());
        }
        assert_eq!(before, checksum(model.params()));
    }
    assert!(trials >= 100);
    assert!(reduced * 100 >= trials * 99, "{reduced}/{trials}");
}

#[test]
fn adaptation_on_one_batch_helps_the_other() {
    let cfg = metaemb::data::SynthConfig {
        beta_scale: 1.0,
        tau_scale: 1.0,
        ..metaemb::data::SynthConfig::new(100, 60, 2, 2, 12)
    };
    let data = metaemb::data::synth_generate(&cfg).unwrap().0;
    let mut model = metaemb::BaseModel::build(
        metaemb::ModelConfig::new(Variant::DeepFm, 4, 1).with_hidden(vec![8]),
        data.schema.clone(),
    )
    .unwrap();
    let train = metaemb::model::TrainConfig {
        lr: 0.1,
        batch_size: 16,
        ..Default::default()
    };
    metaemb::model::pretrain(&mut model, &data.instances, &train).unwrap();
    model.set_frozen(true);
    let gen = Generator::new(&model, Pooling::Average, 0.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch_loss = |phi: &Tensor, batch: &[&metaemb::Instance]| -> f64 {
        let p = model.predict_batch(phi, batch).unwrap();
        p.iter()
            .zip(batch)
            .map(|(&p, i)| metaemb::autodiff::bce_value(p, i.label_f64()).unwrap())
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut gain = 0.0;
    for ad in 1..=100u32 {
        let group = group_of(&data, ad);
        let (a, b) = sample_meta_pair(&group, 10, &mut rng).unwrap();
        let phi = gen.generate_initial_embedding(&model, a[0]).unwrap();
        let adapted = warmup_update(&model, &phi, ad, &a, 0.5).unwrap();
        gain += batch_loss(&phi, &b) - batch_loss(&adapted, &b);
    }
    assert!(gain / 100.0 > 0.0, "mean improvement {}", gain / 100.0);
}
