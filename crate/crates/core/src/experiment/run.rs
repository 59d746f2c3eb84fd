use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, InitPolicy};
use super::report::{ExperimentReport, MetaTraceSummary, ReportRow};
use crate::autodiff::{checksum, Tensor};
use crate::checkpoint;
use crate::data::{
    ad_seed, carve_warmup, load_csv, load_movielens_dir, split_old_new, synth_generate, Dataset, Instance, SeenVocab,
    Split, SplitManifest, SplitSpec, WarmupCarve,
};
use crate::error::{Error, Result};
use crate::meta::{train_meta, warmup_update, Generator, MetaConfig};
use crate::metrics::{Phase, PhaseScores};
use crate::model::{pretrain, BaseModel, ModelConfig, Schema, TrainConfig, Variant};
use crate::seed::derive;

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.resolved() {
        DatasetSpec::Synthetic(c) => Ok(synth_generate(&c)?.0),
        DatasetSpec::Movielens { dir } => load_movielens_dir(&dir),
        DatasetSpec::Csv { path, schema } => load_csv(&path, &schema),
    }
}

/// Pipeline stages, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Load,
    Split,
    Pretrain,
    MetaTrain,
    Evaluate,
    Write,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Pretrain => "pretrain",
            Stage::MetaTrain => "meta-train",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        }
    }
}

/// The loaded dataset split into old and new ads, plus the vocabulary seen
/// among old ads.
#[derive(Debug)]
pub struct Prepared {
    pub schema: Schema,
    pub spec: SplitSpec,
    pub split: Split,
    pub old_instances: Vec<Instance>,
    pub seen: SeenVocab,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let data = load_dataset(&config.dataset).map_err(|e| e.in_stage(Stage::Load.as_str()))?;
        Self::from_dataset(&config.split, data)
    }

    pub fn from_dataset(spec: &SplitSpec, data: Dataset) -> Result<Self> {
        let stage = Stage::Split.as_str();
        let Dataset { schema, instances } = data;
        let split = split_old_new(&schema, instances, spec).map_err(|e| e.in_stage(stage))?;
        let counts = split.counts();
        if split.old.is_empty() || split.new.is_empty() {
            return Err(Error::validation(
                "split",
                format!(
                    "needs old and new ads, found {} old and {} new",
                    counts.old_ids, counts.new_ids
                ),
            )
            .in_stage(stage));
        }
        log::info!(
            "split: {} old ads ({} samples), {} new ads ({} samples), {} discarded",
            counts.old_ids,
            counts.old_samples,
            counts.new_ids,
            counts.new_samples,
            counts.discarded_ids
        );
        let old_instances: Vec<Instance> = split.old_instances().cloned().collect();
        let seen = SeenVocab::from_instances(&schema, &old_instances);
        Ok(Prepared {
            schema,
            spec: *spec,
            split,
            old_instances,
            seen,
        })
    }

    /// Carves every new ad with per-ad seeds derived from `seed`.
    pub fn carves(&self, seed: u64) -> Result<Vec<WarmupCarve>> {
        let carve_seed = derive(seed, "carve");
        self.split
            .new
            .iter()
            .map(|g| carve_warmup(g, self.spec.k, ad_seed(carve_seed, g.ad_id)))
            .collect()
    }

    /// Maps ad-feature indices never seen among old ads to the reserved row.
    pub fn remap(&self, carve: &WarmupCarve) -> WarmupCarve {
        let remap = |xs: &[Instance]| -> Vec<Instance> {
            xs.iter()
                .map(|i| self.seen.remap_ad_features(&self.schema, i))
                .collect()
        };
        WarmupCarve {
            ad_id: carve.ad_id,
            batch_a: remap(&carve.batch_a),
            batch_b: remap(&carve.batch_b),
            batch_c: remap(&carve.batch_c),
            holdout: remap(&carve.holdout),
            order: carve.order.clone(),
        }
    }

    pub fn manifest(&self, carves: &[WarmupCarve]) -> SplitManifest {
        SplitManifest::new(self.spec, &self.split, carves)
    }
}

/// File names under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }

    pub fn base_checkpoint(&self, variant: Variant, seed: u64) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("base_{variant}_seed{seed}.ckpt"))
    }

    pub fn generator_checkpoint(&self, variant: Variant, seed: u64) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("generator_{variant}_seed{seed}.ckpt"))
    }

    pub fn run_summary(&self, variant: Variant, seed: u64) -> PathBuf {
        self.dir.join("runs").join(format!("{variant}_seed{seed}.json"))
    }

    pub fn manifest(&self, seed: u64) -> PathBuf {
        self.dir.join("manifests").join(format!("split_seed{seed}.json"))
    }

    pub fn status(&self) -> PathBuf {
        self.dir.join("STATUS")
    }

    fn create(&self) -> Result<()> {
        for sub in ["checkpoints", "runs", "manifests"] {
            fs::create_dir_all(self.dir.join(sub))?;
        }
        Ok(())
    }

    fn mark(&self, status: &str) -> Result<()> {
        fs::write(self.status(), format!("{status}\n"))?;
        Ok(())
    }
}

pub fn model_config(config: &ExperimentConfig, variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        dim: config.dim,
        hidden: config.hidden.clone(),
        init_std: config.init_std,
        seed: derive(seed, &format!("model/{variant}")),
    }
}

/// Builds and pre-trains the base model on old ads, then freezes it.
pub fn pretrain_stage(
    config: &ExperimentConfig,
    prepared: &Prepared,
    variant: Variant,
    seed: u64,
) -> Result<(BaseModel, Vec<f64>)> {
    let mut model = BaseModel::build(model_config(config, variant, seed), prepared.schema.clone())?;
    let train = TrainConfig {
        seed: derive(seed, &format!("pretrain/{variant}")),
        ..config.pretrain.clone()
    };
    let trace = pretrain(&mut model, &prepared.old_instances, &train)?;
    model.set_frozen(true);
    log::info!("{variant} seed {seed}: pre-training log-loss {:?}", trace.epoch_losses);
    Ok((model, trace.epoch_losses))
}

/// Trains a generator over the frozen model and checks that the
/// model is bitwise unchanged.
pub fn meta_stage(
    config: &ExperimentConfig,
    prepared: &Prepared,
    model: &BaseModel,
    variant: Variant,
    seed: u64,
) -> Result<(Generator, MetaTraceSummary)> {
    let meta = MetaConfig {
        seed: derive(seed, &format!("meta/{variant}")),
        parallel: config.meta.parallel && !config.deterministic,
        ..config.meta.clone()
    };
    let mut generator = Generator::new(
        model,
        meta.pooling,
        meta.l2,
        derive(seed, &format!("generator/{variant}")),
    )?;
    let before = checksum(model.params());
    let trace = train_meta(model, &mut generator, &prepared.split.old, &meta)?;
    let after = checksum(model.params());
    if before != after {
        return Err(Error::validation(
            "base model",
            "parameters changed during meta-training",
        ));
    }
    log::info!("{variant} seed {seed}: meta l_meta per epoch {:?}", trace.epoch_means());
    Ok((
        generator,
        MetaTraceSummary {
            model: Some(variant),
            seed,
            pretrain_epoch_losses: Vec::new(),
            meta_epoch_means: trace.epoch_means(),
            meta_skipped_ids: trace.skipped.len(),
            meta_samples_consumed: trace.samples_consumed,
            checksum_before_meta: before,
            checksum_after_meta: after,
        },
    ))
}

/// Hold-out scores of one initialization policy after each phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmCurve {
    pub policy: InitPolicy,
    pub scores: Vec<PhaseScores>,
}

fn refs(xs: &[Instance]) -> Vec<&Instance> {
    xs.iter().collect()
}

fn map_ads<T: Send, F>(ads: &[WarmupCarve], parallel: bool, f: F) -> Result<Vec<T>>
where
    F: Fn(usize, &WarmupCarve) -> Result<T> + Sync,
{
    if parallel {
        ads.par_iter().enumerate().map(|(i, c)| f(i, c)).collect()
    } else {
        ads.iter().enumerate().map(|(i, c)| f(i, c)).collect()
    }
}

/// Steps 2 to 6: initialize each new ad's embedding by policy, score the
/// pooled hold-out, then apply warm-up batches a, b and c in turn, scoring
/// after each. Only the ad's own row changes; `model` is read-only.
pub fn evaluate_stage(
    config: &ExperimentConfig,
    model: &BaseModel,
    generator: Option<&Generator>,
    ads: &[WarmupCarve],
) -> Result<Vec<ArmCurve>> {
    let parallel = !config.deterministic;
    let lr = config.warmup_lr();
    let mut labels = Vec::new();
    let mut groups: Vec<Range<usize>> = Vec::new();
    for c in ads {
        let start = labels.len();
        labels.extend(c.holdout.iter().map(|i| i.label));
        groups.push(start..labels.len());
    }
    config
        .policies
        .iter()
        .map(|&policy| {
            let mut rows: Vec<Tensor> = map_ads(ads, parallel, |_, c| match policy {
                InitPolicy::Random => model.ad_embedding(c.ad_id),
                InitPolicy::Meta => generator
                    .ok_or_else(|| Error::validation("meta policy", "no generator available"))?
                    .generate_initial_embedding(model, &c.batch_a[0]),
            })?;
            let mut scores = Vec::new();
            for (p, phase) in Phase::ALL.into_iter().enumerate() {
                if p > 0 {
                    rows = map_ads(ads, parallel, |i, c| {
                        warmup_update(model, &rows[i], c.ad_id, &refs(c.batches()[p - 1]), lr)
                    })?;
                }
                let preds: Vec<Vec<f64>> =
                    map_ads(ads, parallel, |i, c| model.predict_batch(&rows[i], &refs(&c.holdout)))?;
                let preds: Vec<f64> = preds.concat();
                scores.push(PhaseScores::compute(phase, &preds, &labels, &groups)?);
            }
            Ok(ArmCurve { policy, scores })
        })
        .collect()
}

/// Report rows of one (model, seed) run, anchored on the random arm's
/// cold-start scores.
pub fn report_rows(dataset: &str, variant: Variant, seed: u64, curves: &[ArmCurve]) -> Result<Vec<ReportRow>> {
    let anchor = curves
        .iter()
        .find(|c| c.policy == InitPolicy::Random)
        .map(|c| c.scores[0])
        .ok_or_else(|| Error::validation("report", "the random arm is missing"))?;
    let mut rows = Vec::new();
    for curve in curves {
        for s in &curve.scores {
            rows.push(ReportRow::new(dataset, variant, curve.policy, seed, s, &anchor)?);
        }
    }
    Ok(rows)
}

fn stage<T>(s: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => e.in_stage(s.as_str()),
    })
}

/// Runs the stages from `first` through `last` (both among pretrain,
/// meta-train and evaluate). Earlier stages are restored from checkpoints in
/// the output directory; a report is returned when evaluation runs.
pub fn run_stages(config: &ExperimentConfig, first: Stage, last: Stage) -> Result<Option<ExperimentReport>> {
    config.validate()?;
    if !(Stage::Pretrain..=Stage::Evaluate).contains(&first) || !(first..=Stage::Evaluate).contains(&last) {
        return Err(Error::validation(
            "stages",
            format!("cannot run {first:?} through {last:?}"),
        ));
    }
    let layout = config.output_dir.as_ref().map(Layout::new);
    if first > Stage::Pretrain && layout.is_none() {
        return Err(Error::validation(
            "output_dir",
            "is required to resume from checkpoints",
        ));
    }
    if let Some(l) = &layout {
        stage(Stage::Write, l.create().and_then(|_| l.mark("incomplete")))?;
        stage(
            Stage::Write,
            fs::write(l.dir.join("config.json"), serde_json::to_string_pretty(config)?).map_err(Error::from),
        )?;
    }
    let body = || run_body(config, layout.as_ref(), first, last);
    let report = if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::validation("thread pool", e.to_string()))?;
        pool.install(body)?
    } else {
        body()?
    };
    if let (Some(l), Some(r)) = (&layout, &report) {
        stage(Stage::Write, r.write(&l.dir, config.svg))?;
    }
    if let Some(l) = &layout {
        stage(Stage::Write, l.mark("complete"))?;
    }
    Ok(report)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(run_stages(config, Stage::Pretrain, Stage::Evaluate)?.expect("evaluation ran"))
}

struct Job {
    variant: Variant,
    seed: u64,
}

struct JobOutput {
    rows: Vec<ReportRow>,
    summary: MetaTraceSummary,
}

fn run_body(
    config: &ExperimentConfig,
    layout: Option<&Layout>,
    first: Stage,
    last: Stage,
) -> Result<Option<ExperimentReport>> {
    let prepared = Prepared::new(config)?;
    let dataset = config.dataset_name();
    let mut ads_by_seed = Vec::new();
    for &seed in &config.seeds {
        let carves = stage(Stage::Split, prepared.carves(seed))?;
        let manifest = prepared.manifest(&carves);
        if let Some(l) = layout {
            let path = l.manifest(seed);
            if first > Stage::Pretrain && path.is_file() {
                let stored: SplitManifest = stage(Stage::Split, SplitManifest::read(&path))?;
                if stored != manifest {
                    return Err(Error::validation(
                        "split manifest",
                        format!("{} differs from this run's split", path.display()),
                    )
                    .in_stage(Stage::Split.as_str()));
                }
            } else {
                stage(Stage::Write, manifest.write(&path))?;
            }
        }
        ads_by_seed.push(carves.iter().map(|c| prepared.remap(c)).collect::<Vec<_>>());
    }
    let jobs: Vec<(usize, Job)> = config
        .seeds
        .iter()
        .enumerate()
        .flat_map(|(s, &seed)| config.models.iter().map(move |&variant| (s, Job { variant, seed })))
        .collect();
    let needs_meta = config.policies.contains(&InitPolicy::Meta);
    let run = |(s, job): &(usize, Job)| -> Result<JobOutput> {
        let (variant, seed) = (job.variant, job.seed);
        let (model, base_hash, pretrain_losses) = if first <= Stage::Pretrain {
            let (model, losses) = stage(Stage::Pretrain, pretrain_stage(config, &prepared, variant, seed))?;
            let bytes = checkpoint::model_to_bytes(&model)?;
            if let Some(l) = layout {
                stage(
                    Stage::Write,
                    fs::write(l.base_checkpoint(variant, seed), &bytes).map_err(Error::from),
                )?;
            }
            (model, checkpoint::sha256_hex(&bytes), losses)
        } else {
            let path = layout.expect("checked above").base_checkpoint(variant, seed);
            let (model, hash) = stage(Stage::Pretrain, checkpoint::load_model(&path))?;
            (model, hash, Vec::new())
        };
        if last == Stage::Pretrain {
            return Ok(JobOutput {
                rows: Vec::new(),
                summary: MetaTraceSummary {
                    model: Some(variant),
                    seed,
                    pretrain_epoch_losses: pretrain_losses,
                    ..MetaTraceSummary::default()
                },
            });
        }
        let (generator, mut summary) = if !needs_meta && last == Stage::Evaluate {
            (
                None,
                MetaTraceSummary {
                    model: Some(variant),
                    seed,
                    ..MetaTraceSummary::default()
                },
            )
        } else if first <= Stage::MetaTrain {
            let (g, summary) = stage(Stage::MetaTrain, meta_stage(config, &prepared, &model, variant, seed))?;
            if let Some(l) = layout {
                stage(
                    Stage::Write,
                    checkpoint::save_generator(&g, &base_hash, &l.generator_checkpoint(variant, seed)),
                )?;
            }
            (Some(g), summary)
        } else {
            let l = layout.expect("checked above");
            let g = stage(
                Stage::MetaTrain,
                checkpoint::load_generator(&l.generator_checkpoint(variant, seed), &model, &base_hash),
            )?;
            let summary = fs::read_to_string(l.run_summary(variant, seed))
                .ok()
                .and_then(|s| serde_json::from_str(&s).ok())
                .unwrap_or(MetaTraceSummary {
                    model: Some(variant),
                    seed,
                    ..MetaTraceSummary::default()
                });
            (Some(g), summary)
        };
        if !pretrain_losses.is_empty() {
            summary.pretrain_epoch_losses = pretrain_losses;
        }
        if let Some(l) = layout {
            if first <= Stage::MetaTrain {
                stage(
                    Stage::Write,
                    fs::write(l.run_summary(variant, seed), serde_json::to_string_pretty(&summary)?)
                        .map_err(Error::from),
                )?;
            }
        }
        if last < Stage::Evaluate {
            return Ok(JobOutput {
                rows: Vec::new(),
                summary,
            });
        }
        let curves = stage(
            Stage::Evaluate,
            evaluate_stage(config, &model, generator.as_ref(), &ads_by_seed[*s]),
        )?;
        let rows = stage(Stage::Evaluate, report_rows(&dataset, variant, seed, &curves))?;
        Ok(JobOutput { rows, summary })
    };
    let outputs: Vec<JobOutput> = if config.deterministic {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    if last < Stage::Evaluate {
        return Ok(None);
    }
    let (rows, runs): (Vec<Vec<ReportRow>>, Vec<MetaTraceSummary>) =
        outputs.into_iter().map(|o| (o.rows, o.summary)).unzip();
    let report = ExperimentReport::new(config.clone(), prepared.split.counts(), rows.concat(), runs)?;
    Ok(Some(report))
}

/// Path helper for callers that only know the output directory.
pub fn report_csv_path(dir: &Path) -> PathBuf {
    dir.join("report.csv")
}
