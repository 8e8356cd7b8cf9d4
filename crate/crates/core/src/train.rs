//! AdaMax training, evaluation and the ablation harness.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::model::{
    forward, loss_and_gradients, Checkpoint, ModelConfig, ModelParams, PreparedSample, Vocabs,
};
use crate::tensor::Tensor;
use crate::text::PAD;

/// `−log softmax(logits)[target]`, computed stably.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Argument(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(crate::tensor::cross_entropy(logits.data(), target))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
    pub seed: u64,
    pub min_answer_frequency: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 40,
            batch_size: 32,
            eval_every: 1,
            seed: 0,
            min_answer_frequency: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.min_answer_frequency == 0 {
            return Err(Error::Config("min_answer_frequency must be at least 1".into()));
        }
        Ok(())
    }
}

/// First moments `m`, infinity norms `u` and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub u: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |(name, t): (&str, &Tensor)| (name.to_string(), Tensor::zeros(t.shape()));
        OptimizerState {
            m: params.iter().map(zeros).collect(),
            u: params.iter().map(zeros).collect(),
            t: 0,
        }
    }
}

/// One AdaMax update. Parameters without an entry in `grads` see a zero
/// gradient. The step divides by `max(u, ε)`, so an entry whose gradients
/// have all been zero (`u = m = 0`) is left untouched. Embedding PAD rows
/// are reset to zero afterwards.
pub fn adamax_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => return Err(Error::dim("adamax_step", p.shape(), g.shape())),
            None => return Err(Error::Argument(format!("gradient for unknown parameter {name:?}"))),
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let step = config.learning_rate / (1.0 - b1.powi(state.t.min(i32::MAX as u64) as i32));
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let u = state
            .u
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name).map(Tensor::data);
        let cols = p.cols();
        let (p, m, u) = (p.data_mut(), m.data_mut(), u.data_mut());
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            u[i] = (b2 * u[i]).max(gi.abs());
            p[i] -= step * m[i] / u[i].max(config.epsilon);
        }
        if name == "embedding" || name == "q_embedding" {
            p[PAD * cols..(PAD + 1) * cols].fill(0.0);
        }
    }
    Ok(())
}

/// Result of scoring a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Set when the dataset was empty and the accuracy is a placeholder 0.
    pub empty: bool,
}

/// Fraction of samples whose arg-max (lowest index on ties) is the target.
/// Samples without an in-vocabulary target count as wrong.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[PreparedSample],
) -> Result<Evaluation> {
    let hits = predict_all(params, config, samples)?
        .iter()
        .zip(samples)
        .filter(|(pred, s)| s.target == Some(**pred))
        .count();
    let total = samples.len();
    if total == 0 {
        warn!("evaluating on an empty dataset; reporting accuracy 0");
    }
    Ok(Evaluation {
        accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        correct: hits,
        total,
        empty: total == 0,
    })
}

/// Arg-max answer index for every sample, in input order.
pub fn predict_all(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[PreparedSample],
) -> Result<Vec<usize>> {
    with_pool(|| {
        samples
            .par_iter()
            .map(|s| forward(s, params, config).map(|out| out.logits.argmax()))
            .collect()
    })
}

/// Runs `f` on a pool capped by `VTQA_THREADS` when that is set.
fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    let pool = POOL.get_or_init(|| {
        let n = std::env::var("VTQA_THREADS").ok()?.parse::<usize>().ok()?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().ok()
    });
    match pool {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Per-run report. Contains no timings so that identical runs serialise
/// identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Choices the method description leaves open, with the values used.
    pub non_paper_defaults: BTreeMap<String, serde_json::Value>,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub train_samples: usize,
    pub dropped_train_samples: usize,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub fn non_paper_defaults(
    model: &ModelConfig,
    train: &TrainConfig,
) -> BTreeMap<String, serde_json::Value> {
    use serde_json::json;
    BTreeMap::from([
        ("batch_size".to_string(), json!(train.batch_size)),
        ("epochs".to_string(), json!(train.epochs)),
        (
            "loss".to_string(),
            json!("softmax cross-entropy on the combined logits, batch mean"),
        ),
        (
            "initialization".to_string(),
            json!("weights U[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases 0, embeddings U[-0.1, 0.1]"),
        ),
        ("min_answer_frequency".to_string(), json!(train.min_answer_frequency)),
        ("credit_in_training".to_string(), json!(model.credit_in_training)),
        (
            "share_question_embeddings".to_string(),
            json!(model.share_question_embeddings),
        ),
        ("object_properties".to_string(), json!(model.object_properties)),
    ])
}

/// What a training run hands back for each inference view.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedView {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub val_history: Vec<Option<f64>>,
}

/// Configs that only differ in inference-time behaviour train identically.
fn training_key(config: &ModelConfig) -> ModelConfig {
    let mut key = config.clone();
    if !config.credit_in_training {
        key.answer_recommendation = false;
        key.credit = 0.0;
    }
    key
}

/// Best validation accuracy, its epoch, those parameters, and the history.
type BestSoFar = (Option<f64>, usize, ModelParams, Vec<Option<f64>>);

/// Trains once and keeps, for every view in `views`, the parameters with
/// the best validation accuracy under that view. All views must share a
/// training key with `views[0]`.
pub fn train_views(
    views: &[ModelConfig],
    train_config: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
) -> Result<(Vec<TrainedView>, Vec<f64>, usize)> {
    train_config.validate()?;
    let base = views
        .first()
        .ok_or_else(|| Error::Config("no model config to train".into()))?;
    base.validate()?;
    if views.iter().any(|v| training_key(v) != training_key(base)) {
        return Err(Error::Config(
            "views sharing a run may only differ in answer recommendation".into(),
        ));
    }

    let usable: Vec<&PreparedSample> = train_set.iter().filter(|s| s.target.is_some()).collect();
    let dropped = train_set.len() - usable.len();
    if dropped > 0 {
        info!("dropped {dropped} training samples with out-of-vocabulary answers");
    }
    if usable.is_empty() {
        return Err(Error::Config("no usable training samples".into()));
    }

    let mut params = ModelParams::init(base)?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();

    let mut best: Vec<BestSoFar> = views
        .iter()
        .map(|_| (None, 0, params.clone(), Vec::new()))
        .collect();
    let mut losses = Vec::with_capacity(train_config.epochs);

    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_config.batch_size) {
            let results: Vec<(f64, BTreeMap<String, Tensor>)> = with_pool(|| {
                batch
                    .par_iter()
                    .map(|&i| loss_and_gradients(&params, usable[i], base))
                    .collect::<Result<_>>()
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            for (loss, grads) in results {
                if !loss.is_finite() {
                    return Err(Error::Argument(format!("non-finite loss in epoch {epoch}")));
                }
                epoch_loss += loss;
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            total.insert(name, g);
                        }
                    }
                }
            }
            for g in total.values_mut() {
                *g = g.scale(scale);
            }
            adamax_step(&mut params, &total, &mut state, train_config)?;
        }
        let mean_loss = epoch_loss / usable.len() as f64;
        losses.push(mean_loss);
        info!("epoch {epoch}: train loss {mean_loss:.5}");

        let evaluate_now = epoch % train_config.eval_every == 0 || epoch == train_config.epochs;
        for (view, slot) in views.iter().zip(best.iter_mut()) {
            let acc = if evaluate_now && !val_set.is_empty() {
                Some(evaluate(&params, view, val_set)?.accuracy)
            } else {
                None
            };
            slot.3.push(acc);
            let improved = match (acc, slot.0) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                // Without validation data the latest parameters win.
                (None, _) => val_set.is_empty(),
            };
            if improved {
                slot.0 = acc;
                slot.1 = epoch;
                slot.2 = params.clone();
            }
        }
    }

    let trained = views
        .iter()
        .zip(best)
        .map(|(config, (acc, epoch, params, history))| TrainedView {
            config: config.clone(),
            params,
            best_epoch: epoch,
            best_val_accuracy: acc,
            val_history: history,
        })
        .collect();
    Ok((trained, losses, dropped))
}

/// Trains one config and returns its best-validation parameters and report.
/// The report's test accuracy is left empty.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
) -> Result<(ModelParams, Metrics)> {
    let (mut views, losses, dropped) =
        train_views(std::slice::from_ref(model_config), train_config, train_set, val_set)?;
    let view = views.pop().expect("one view");
    let metrics = metrics_for(&view, &losses, train_config, train_set.len(), dropped, None);
    Ok((view.params, metrics))
}

fn metrics_for(
    view: &TrainedView,
    losses: &[f64],
    train_config: &TrainConfig,
    train_samples: usize,
    dropped: usize,
    test_accuracy: Option<f64>,
) -> Metrics {
    Metrics {
        non_paper_defaults: non_paper_defaults(&view.config, train_config),
        model: view.config.clone(),
        training: train_config.clone(),
        train_samples,
        dropped_train_samples: dropped,
        epochs: losses
            .iter()
            .zip(&view.val_history)
            .enumerate()
            .map(|(i, (&train_loss, &val_accuracy))| EpochMetrics {
                epoch: i + 1,
                train_loss,
                val_accuracy,
            })
            .collect(),
        best_epoch: view.best_epoch,
        best_val_accuracy: view.best_val_accuracy,
        test_accuracy,
    }
}

/// Fills in the data-dependent fields of a config template.
pub fn sized_config(template: &ModelConfig, vocabs: &Vocabs) -> ModelConfig {
    ModelConfig {
        vocab_size: vocabs.words.len(),
        n_answers: vocabs.answers.len(),
        ..template.clone()
    }
}

/// Outcome of [`run`]: a checkpoint-ready model and its metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub checkpoint: Checkpoint,
    pub metrics: Metrics,
}

/// Builds vocabularies from `splits.train`, trains, and scores the test
/// split. `template` supplies everything but the vocabulary sizes.
pub fn run(template: &ModelConfig, train_config: &TrainConfig, splits: &Splits) -> Result<Run> {
    Ok(run_views(std::slice::from_ref(template), train_config, splits)?
        .pop()
        .expect("one view"))
}

/// [`run`] for several configs that share a training key, training once.
pub fn run_views(
    templates: &[ModelConfig],
    train_config: &TrainConfig,
    splits: &Splits,
) -> Result<Vec<Run>> {
    let vocabs = Vocabs::build(&splits.train, train_config.min_answer_frequency)?;
    let train_set = vocabs.prepare_all(&splits.train)?;
    let val_set = vocabs.prepare_all(&splits.val)?;
    let test_set = vocabs.prepare_all(&splits.test)?;
    let configs: Vec<ModelConfig> = templates.iter().map(|t| sized_config(t, &vocabs)).collect();
    let (views, losses, dropped) = train_views(&configs, train_config, &train_set, &val_set)?;
    views
        .into_iter()
        .map(|view| {
            let test = (!test_set.is_empty())
                .then(|| evaluate(&view.params, &view.config, &test_set))
                .transpose()?
                .map(|e| e.accuracy);
            let metrics =
                metrics_for(&view, &losses, train_config, train_set.len(), dropped, test);
            Ok(Run {
                checkpoint: Checkpoint {
                    config: view.config,
                    vocabs: vocabs.clone(),
                    params: view.params,
                },
                metrics,
            })
        })
        .collect()
}

/// One line of an ablation table; `seed` is `None` on median rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: f64,
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains and tests every named config under every seed (model and data
/// order both use the seed), then appends one median row per variant.
/// Configs differing only in inference-time recommendation share a run.
pub fn ablate(
    variants: &[(String, ModelConfig)],
    train_config: &TrainConfig,
    splits: &Splits,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut groups: Vec<(ModelConfig, Vec<usize>)> = Vec::new();
    for (i, (_, config)) in variants.iter().enumerate() {
        let key = training_key(config);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }

    let mut per_variant: Vec<Vec<AblationRow>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let tc = TrainConfig { seed, ..train_config.clone() };
        for (_, members) in &groups {
            let templates: Vec<ModelConfig> = members
                .iter()
                .map(|&i| ModelConfig { seed, ..variants[i].1.clone() })
                .collect();
            let runs = run_views(&templates, &tc, splits)?;
            for (&i, r) in members.iter().zip(runs) {
                let test = r.metrics.test_accuracy.unwrap_or(0.0);
                info!("{} seed {seed}: test accuracy {test:.4}", variants[i].0);
                per_variant[i].push(AblationRow {
                    variant: variants[i].0.clone(),
                    seed: Some(seed),
                    val_accuracy: r.metrics.best_val_accuracy,
                    test_accuracy: test,
                });
            }
        }
    }

    let mut rows: Vec<AblationRow> = per_variant.iter().flatten().cloned().collect();
    for (rows_v, (name, _)) in per_variant.iter().zip(variants) {
        let tests: Vec<f64> = rows_v.iter().map(|r| r.test_accuracy).collect();
        let vals: Vec<f64> = rows_v.iter().filter_map(|r| r.val_accuracy).collect();
        rows.push(AblationRow {
            variant: name.clone(),
            seed: None,
            val_accuracy: (!vals.is_empty()).then(|| median(&vals)),
            test_accuracy: median(&tests),
        });
    }
    Ok(rows)
}

/// Tab-separated rendering with a header line.
pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant\tseed\tval_accuracy\ttest_accuracy\n");
    for r in rows {
        let seed = r.seed.map_or("median".to_string(), |s| s.to_string());
        let val = r.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!("{}\t{seed}\t{val}\t{:.4}\n", r.variant, r.test_accuracy));
    }
    out
}

/// The four late/recommendation combinations on top of early fusion, plus
/// the visual-only baseline, as used for modality ablations.
pub fn standard_variants(template: &ModelConfig) -> Vec<(String, ModelConfig)> {
    use crate::model::Variant;
    let with = |variant, lf, ar| ModelConfig {
        variant,
        early_fusion: true,
        late_fusion: lf,
        answer_recommendation: ar,
        ..template.clone()
    };
    vec![
        ("vqa".to_string(), with(Variant::VqaOnly, false, false)),
        ("vtqa+ef".to_string(), with(Variant::Vtqa, false, false)),
        ("vtqa+ef+lf".to_string(), with(Variant::Vtqa, true, false)),
        ("vtqa+ef+ar".to_string(), with(Variant::Vtqa, false, true)),
        ("vtqa+ef+lf+ar".to_string(), with(Variant::Vtqa, true, true)),
    ]
}
