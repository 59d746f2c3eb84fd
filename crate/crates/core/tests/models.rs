mod common;

use common::{refs, tiny_data, tiny_model};
use metaemb::autodiff::{checksum, max_rel_error};
use metaemb::model::{mean_logloss, pretrain, TrainConfig};
use metaemb::{
    BaseModel, Dataset, FieldGroup, FieldKind, FieldSpec, FieldValue, Instance, ModelConfig, Schema, Tape, Tensor,
    Variant,
};

fn zero_all(model: &mut BaseModel) {
    let shapes: Vec<(String, Vec<usize>)> = model
        .params()
        .map(|p| (p.name().to_string(), p.tensor().shape().to_vec()))
        .collect();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        model
            .set_param(&name, Tensor::new(shape, vec![0.0; n]).unwrap())
            .unwrap();
    }
}

fn two_field_schema() -> Schema {
    Schema::new(vec![
        FieldSpec::new("ad_id", FieldKind::Categorical, 2, FieldGroup::AdId),
        FieldSpec::new("user", FieldKind::Categorical, 2, FieldGroup::OtherFeature),
    ])
    .unwrap()
}

#[test]
fn zero_parameters_predict_one_half() {
    let data = tiny_data(4, 10, 1);
    for v in Variant::ALL {
        let mut model = tiny_model(v, &data, 4, 2);
        zero_all(&mut model);
        let p = model.predict_lookup(&refs(&data.instances)).unwrap();
        assert!(p.iter().all(|&x| x == 0.5), "{v}");
    }
}

#[test]
fn fm_pairwise_term() {
    let schema = two_field_schema();
    let mut model = BaseModel::build(ModelConfig::new(Variant::Fm, 2, 0), schema).unwrap();
    zero_all(&mut model);
    let e = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let names: Vec<String> = model.tables().iter().map(|t| t.name().to_string()).collect();
    for name in &names {
        model.set_param(name, e.clone()).unwrap();
    }
    let inst = Instance {
        features: vec![FieldValue::Cat(1), FieldValue::Cat(1)],
        label: 1,
    };
    let p = model.predict_lookup(&[&inst]).unwrap()[0];
    assert!((p - 0.7310586).abs() < 1e-7, "{p}");
}

#[test]
fn same_seed_same_model() {
    let data = tiny_data(4, 10, 3);
    for v in Variant::ALL {
        let a = tiny_model(v, &data, 4, 5);
        let b = tiny_model(v, &data, 4, 5);
        let c = tiny_model(v, &data, 4, 6);
        assert_eq!(checksum(a.params()), checksum(b.params()));
        assert_ne!(checksum(a.params()), checksum(c.params()));
        let pa = a.predict_lookup(&refs(&data.instances)).unwrap();
        let pb = b.predict_lookup(&refs(&data.instances)).unwrap();
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn deep_variants_need_hidden_layers() {
    let data = tiny_data(2, 4, 0);
    for v in [Variant::DeepFm, Variant::WideDeep, Variant::Ipnn] {
        let cfg = ModelConfig::new(v, 4, 0).with_hidden(vec![]);
        assert!(BaseModel::build(cfg, data.schema.clone()).is_err(), "{v}");
    }
    assert!(BaseModel::build(ModelConfig::new(Variant::Fm, 0, 0), data.schema.clone()).is_err());
}

fn token_model() -> BaseModel {
    let schema = Schema::new(vec![
        FieldSpec::new("ad_id", FieldKind::Categorical, 3, FieldGroup::AdId),
        FieldSpec::new("tags", FieldKind::TokenList, 5, FieldGroup::AdFeature),
    ])
    .unwrap();
    let cfg = ModelConfig {
        init_std: 0.5,
        ..ModelConfig::new(Variant::DeepFm, 3, 9).with_hidden(vec![4])
    };
    BaseModel::build(cfg, schema).unwrap()
}

fn tagged(tokens: Vec<u32>) -> Instance {
    Instance {
        features: vec![FieldValue::Cat(1), FieldValue::Tokens(tokens)],
        label: 0,
    }
}

#[test]
fn token_lists_average_and_empty_is_zero() {
    let model = token_model();
    let table = model.table(1).tensor();
    let embs = model.embed_fields(&tagged(vec![1, 3, 4])).unwrap();
    for j in 0..3 {
        let want = (table.get(1, j) + table.get(3, j) + table.get(4, j)) / 3.0;
        assert!((embs[1].get(0, j) - want).abs() < 1e-15);
    }
    let empty = model.embed_fields(&tagged(vec![])).unwrap();
    assert!(empty[1].data().iter().all(|&x| x == 0.0));
    let a = model.predict_lookup(&[&tagged(vec![1, 3, 4])]).unwrap()[0];
    let b = model.predict_lookup(&[&tagged(vec![4, 1, 3])]).unwrap()[0];
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn probability_gradient_wrt_ad_embedding() {
    let data = tiny_data(3, 6, 4);
    for v in Variant::ALL {
        let model = tiny_model(v, &data, 4, 8);
        let inst = &data.instances[0];
        let phi = model.ad_embedding(inst.ad_id(&data.schema)).unwrap();
        let batch = model.encode(&[inst]).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape).unwrap();
        let x = tape.leaf(phi.clone(), true).unwrap();
        let p = model.forward(&mut tape, &bound, &batch, Some(x)).unwrap();
        let g = tape.grad(p, &[x]).unwrap().remove(0);
        let h = 1e-6;
        let fd: Vec<f64> = (0..phi.len())
            .map(|j| {
                let mut up = phi.clone();
                up.data_mut()[j] += h;
                let mut dn = phi.clone();
                dn.data_mut()[j] -= h;
                (model.predict(&up, inst).unwrap() - model.predict(&dn, inst).unwrap()) / (2.0 * h)
            })
            .collect();
        assert!(max_rel_error(g.data(), &fd) < 1e-6, "{v}");
    }
}

fn train_data(seed: u64) -> Dataset {
    let cfg = metaemb::data::SynthConfig {
        beta_scale: 1.5,
        ..metaemb::data::SynthConfig::new(20, 100, 2, 2, seed)
    };
    metaemb::data::synth_generate(&cfg).unwrap().0
}

#[test]
fn one_epoch_reduces_loss() {
    for seed in [1, 2, 3] {
        let data = train_data(seed);
        for v in Variant::ALL {
            let mut model = BaseModel::build(
                ModelConfig::new(v, 8, seed).with_hidden(vec![16, 8]),
                data.schema.clone(),
            )
            .unwrap();
            let before = mean_logloss(&model, &data.instances, 256).unwrap();
            let cfg = TrainConfig {
                lr: 0.1,
                batch_size: 32,
                seed,
                ..TrainConfig::default()
            };
            pretrain(&mut model, &data.instances, &cfg).unwrap();
            let after = mean_logloss(&model, &data.instances, 256).unwrap();
            assert!(after < before, "{v} seed {seed}: {after} >= {before}");
        }
    }
}

#[test]
fn no_op_training_leaves_parameters() {
    let data = tiny_data(4, 10, 5);
    for cfg in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        },
    ] {
        let mut model = tiny_model(Variant::DeepFm, &data, 4, 1);
        let before = checksum(model.params());
        let trace = pretrain(&mut model, &data.instances, &cfg).unwrap();
        assert_eq!(checksum(model.params()), before);
        if cfg.epochs == 2 {
            assert!((trace.epoch_losses[0] - trace.epoch_losses[1]).abs() < 1e-12);
        }
    }
    let mut model = tiny_model(Variant::Fm, &data, 4, 1);
    let bad = TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    };
    assert!(pretrain(&mut model, &data.instances, &bad).is_err());
}
