use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::check::{central_gradient, fd_hvp, rel_error};
use crate::autodiff::{bce_mean, bce_value, Tape, Tensor};
use crate::data::{FieldValue, Instance};
use crate::error::{Error, Result};
use crate::meta::{
    cold_loss, encode_ad_batch, meta_gradient, meta_gradient_explicit, meta_objective, Generator, MetaConfig, Pooling,
    SecondOrder,
};
use crate::model::{BaseModel, FieldGroup, FieldKind, FieldSpec, ModelConfig, Schema, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub models: Vec<Variant>,
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Random instances per model in the first-order suite.
    pub instances: usize,
    /// Random configurations in the meta-gradient suite.
    pub meta_configs: usize,
    pub meta_dim: usize,
    pub k: usize,
    pub seed: u64,
    /// Step for central differences of losses.
    pub h: f64,
    /// Step for central differences of gradients.
    pub h_hvp: f64,
    pub tol_first_order: f64,
    pub tol_second_order: f64,
    pub tol_reduction: f64,
    /// Upper bound on differentiated parameters per model.
    pub max_params: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            models: Variant::ALL.to_vec(),
            dim: 8,
            hidden: vec![16, 8],
            instances: 20,
            meta_configs: 10,
            meta_dim: 4,
            k: 4,
            seed: 0,
            h: 1e-5,
            h_hvp: 1e-5,
            tol_first_order: 1e-4,
            tol_second_order: 1e-3,
            tol_reduction: 1e-10,
            max_params: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub checks: usize,
    /// Largest relative error (absolute difference for reduction suites).
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} checks={:<5} max_err={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

const ADS: u32 = 8;
const PER_AD: usize = 12;

/// A fixed small schema with categorical and token-list fields in both the
/// ad-feature and other groups.
pub fn check_schema() -> Schema {
    Schema::new(vec![
        FieldSpec::new("ad_id", FieldKind::Categorical, ADS as usize + 1, FieldGroup::AdId),
        FieldSpec::new("ad_tokens", FieldKind::TokenList, 7, FieldGroup::AdFeature),
        FieldSpec::new("ad_cat", FieldKind::Categorical, 5, FieldGroup::AdFeature),
        FieldSpec::new("user", FieldKind::Categorical, 6, FieldGroup::OtherFeature),
        FieldSpec::new("user_tags", FieldKind::TokenList, 5, FieldGroup::OtherFeature),
    ])
    .expect("static schema is valid")
}

fn tokens(rng: &mut ChaCha8Rng, vocab: usize, min: usize) -> Vec<u32> {
    let n = rng.random_range(min..=3);
    index::sample(rng, vocab - 1, n).iter().map(|i| i as u32 + 1).collect()
}

/// `PER_AD` random instances for each of `ADS` ads, grouped by ad.
pub fn check_instances(seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for ad in 1..=ADS {
        let ad_tokens = tokens(&mut rng, 7, 1);
        let ad_cat = rng.random_range(1..5);
        for _ in 0..PER_AD {
            out.push(Instance {
                features: vec![
                    FieldValue::Cat(ad),
                    FieldValue::Tokens(ad_tokens.clone()),
                    FieldValue::Cat(ad_cat),
                    FieldValue::Cat(rng.random_range(1..6)),
                    FieldValue::Tokens(tokens(&mut rng, 5, 0)),
                ],
                label: rng.random_range(0..2),
            });
        }
    }
    out
}

fn check_model(variant: Variant, dim: usize, hidden: &[usize], seed: u64, max_params: usize) -> Result<BaseModel> {
    let config = ModelConfig {
        init_std: 0.3,
        ..ModelConfig::new(variant, dim, seed).with_hidden(hidden.to_vec())
    };
    let model = BaseModel::build(config, check_schema())?;
    let n = model.params().map(|p| p.tensor().len()).sum::<usize>() + dim;
    if n > max_params {
        return Err(Error::validation(
            "grad-check size",
            format!("{variant} at m = {dim} has {n} differentiated parameters, more than {max_params}"),
        ));
    }
    Ok(model)
}

fn random_row(rng: &mut ChaCha8Rng, m: usize, scale: f64) -> Tensor {
    Tensor::row((0..m).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Analytic gradients of one instance's loss with respect to every model
/// parameter (in `params()` order) and the explicit ad embedding.
fn analytic_first_order(model: &BaseModel, phi: &Tensor, inst: &Instance) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let p = tape.leaf(phi.clone(), true)?;
    let batch = model.encode(&[inst])?;
    let prob = model.forward(&mut tape, &bound, &batch, Some(p))?;
    let loss = bce_mean(&mut tape, prob, batch.labels())?;
    let mut wrt = bound.tables.clone();
    wrt.extend(&bound.dense);
    wrt.extend(bound.indicators.iter().flatten());
    wrt.push(p);
    tape.grad(loss, &wrt)
}

fn first_order_suite(cfg: &GradCheckConfig, variant: Variant, data: &[Instance]) -> Result<SuiteResult> {
    let mut model = check_model(variant, cfg.dim, &cfg.hidden, cfg.seed, cfg.max_params)?;
    model.set_frozen(false);
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(cfg.seed, &format!("first-order/{variant}")));
    let mut max_error: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..cfg.instances {
        let inst = &data[rng.random_range(0..data.len())];
        let phi = random_row(&mut rng, cfg.dim, 0.5);
        let analytic = analytic_first_order(&model, &phi, inst)?;
        let loss = |m: &BaseModel, phi: &Tensor| bce_value(m.predict(phi, inst)?, inst.label_f64());
        let n_params = model.params().count();
        for (j, grad) in analytic.iter().enumerate().take(n_params) {
            let start = model.params().nth(j).expect("index in range").tensor().clone();
            let mut probe = model.clone();
            let fd = central_gradient(
                |x| {
                    probe
                        .params_mut()
                        .nth(j)
                        .expect("index in range")
                        .tensor_mut()
                        .data_mut()
                        .copy_from_slice(x.data());
                    loss(&probe, &phi)
                },
                &start,
                cfg.h,
            )?;
            max_error = max_error.max(rel_error(grad, &fd));
            checks += grad.len();
        }
        let fd = central_gradient(|x| loss(&model, x), &phi, cfg.h)?;
        max_error = max_error.max(rel_error(&analytic[n_params], &fd));
        checks += phi.len();
    }
    Ok(SuiteResult {
        name: format!("first_order/{variant}"),
        checks,
        max_error,
        tolerance: cfg.tol_first_order,
    })
}

fn ad_batches<'a>(data: &'a [Instance], rng: &mut ChaCha8Rng, k: usize) -> (Vec<&'a Instance>, Vec<&'a Instance>) {
    let ad = rng.random_range(0..ADS as usize);
    let group = &data[ad * PER_AD..(ad + 1) * PER_AD];
    let picks = index::sample(rng, PER_AD, 2 * k).into_vec();
    let (a, b) = picks.split_at(k);
    (
        a.iter().map(|&i| &group[i]).collect(),
        b.iter().map(|&i| &group[i]).collect(),
    )
}

fn hvp_suite(cfg: &GradCheckConfig, variant: Variant, data: &[Instance]) -> Result<SuiteResult> {
    let model = check_model(variant, cfg.dim, &cfg.hidden, cfg.seed, cfg.max_params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(cfg.seed, &format!("hvp/{variant}")));
    let mut max_error: f64 = 0.0;
    let mut checks = 0;
    for _ in 0..cfg.instances.div_ceil(4) {
        let (batch, _) = ad_batches(data, &mut rng, cfg.k);
        let (_, encoded) = encode_ad_batch(&model, &batch)?;
        let phi = random_row(&mut rng, cfg.dim, 0.5);
        let v = random_row(&mut rng, cfg.dim, 1.0);
        let grad_at = |x: &Tensor| -> Result<Tensor> {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape)?;
            let p = tape.leaf(x.clone(), true)?;
            let l = cold_loss(&mut tape, &model, &bound, p, &encoded)?;
            Ok(tape.grad(l, &[p])?.remove(0))
        };
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape)?;
        let p = tape.leaf(phi.clone(), true)?;
        let l = cold_loss(&mut tape, &model, &bound, p, &encoded)?;
        let exact = tape.hvp(l, p, &v)?;
        let fd = fd_hvp(grad_at, &phi, &v, cfg.h_hvp)?;
        max_error = max_error.max(rel_error(&exact, &fd));
        checks += exact.len();
    }
    Ok(SuiteResult {
        name: format!("hvp/{variant}"),
        checks,
        max_error,
        tolerance: cfg.tol_second_order,
    })
}

fn meta_suites(cfg: &GradCheckConfig, data: &[Instance]) -> Result<[SuiteResult; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(cfg.seed, "meta"));
    let (mut full, mut reduce): (f64, f64) = (0.0, 0.0);
    let (mut full_checks, mut reduce_checks) = (0, 0);
    let poolings = [Pooling::Average, Pooling::Max, Pooling::Concat];
    for i in 0..cfg.meta_configs {
        let variant = cfg.models[i % cfg.models.len()];
        let model = check_model(variant, cfg.meta_dim, &cfg.hidden, cfg.seed + i as u64, cfg.max_params)?;
        let generator = Generator::new(&model, poolings[i % 3], 1e-3, rng.random())?;
        let (a, b) = ad_batches(data, &mut rng, cfg.k);
        let config = MetaConfig {
            alpha: rng.random_range(0.0..1.0),
            inner_lr: rng.random_range(0.05..0.5),
            k: cfg.k,
            l2: generator.l2(),
            ..MetaConfig::default()
        };
        let exact = meta_gradient(&model, &generator, &a, &b, &config)?;
        let fd = central_gradient(
            |w| meta_objective(&model, &generator, w, &a, &b, &config),
            generator.weight().tensor(),
            cfg.h,
        )?;
        full = full.max(rel_error(&exact.grad, &fd));
        full_checks += fd.len();
        for reduced in [
            MetaConfig {
                alpha: 1.0,
                ..config.clone()
            },
            MetaConfig {
                inner_lr: 0.0,
                ..config.clone()
            },
        ] {
            let x = meta_gradient(&model, &generator, &a, &b, &reduced)?;
            let y = meta_gradient_explicit(&model, &generator, &a, &b, &reduced, SecondOrder::Drop)?;
            let diff = x
                .grad
                .data()
                .iter()
                .zip(y.grad.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            reduce = reduce.max(diff);
            reduce_checks += x.grad.len();
        }
    }
    Ok([
        SuiteResult {
            name: "meta_gradient/full".into(),
            checks: full_checks,
            max_error: full,
            tolerance: cfg.tol_second_order,
        },
        SuiteResult {
            name: "meta_gradient/reductions".into(),
            checks: reduce_checks,
            max_error: reduce,
            tolerance: cfg.tol_reduction,
        },
    ])
}

/// Runs every finite-difference suite on the current thread.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.models.is_empty() || cfg.instances == 0 || cfg.k == 0 || 2 * cfg.k > PER_AD {
        return Err(Error::validation(
            "grad-check config",
            "needs models, instances and 1 <= 2K <= 12",
        ));
    }
    for &v in &cfg.models {
        check_model(v, cfg.dim, &cfg.hidden, cfg.seed, cfg.max_params)?;
        check_model(v, cfg.meta_dim, &cfg.hidden, cfg.seed, cfg.max_params)?;
    }
    let data = check_instances(cfg.seed);
    let mut report = GradCheckReport::default();
    for &v in &cfg.models {
        report.suites.push(first_order_suite(cfg, v, &data)?);
    }
    for &v in &cfg.models {
        report.suites.push(hvp_suite(cfg, v, &data)?);
    }
    if cfg.meta_configs > 0 {
        report.suites.extend(meta_suites(cfg, &data)?);
    }
    Ok(report)
}
