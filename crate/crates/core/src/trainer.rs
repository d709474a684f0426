//! Training: chord-balanced losses, KL annealing, Adam, dataset splitting,
//! checkpointing and per-epoch logs.

use crate::diffmath::{DiffValue, Graph, Rng, Tensor};
use crate::leadsheet::{LeadSheet, CHORD_TYPE_VOCAB};
use crate::model::{
    forward_teacher_forced, load_checkpoint, save_checkpoint, BoundParams, CheckpointError,
    LatentMode, ModelConfig, ModelError, ModelParams, OptState, PieceLoss,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("training split is empty; corpus too small for split fraction")]
    EmptySplit,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("resume checkpoint config differs from requested config: {0}")]
    ResumeMismatch(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-epoch increment of the piece-level KL weight.
    pub kl_increment_piece: f64,
    /// Per-epoch increment of the bar-level KL weight.
    pub kl_increment_bar: f64,
    pub kl_cap: f64,
    pub seed: u64,
    pub split_fraction: f64,
    /// Smoothing constant in the chord-balancing weights.
    pub count_smoothing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 24,
            epochs: 100,
            kl_increment_piece: 1e-5,
            kl_increment_bar: 1e-4,
            kl_cap: 1.0,
            seed: 0,
            split_fraction: 0.9,
            count_smoothing: 1e5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.kl_increment_piece < 0.0 || self.kl_increment_bar < 0.0 {
            return Err(TrainError::BadConfig(
                "kl increments must be nonnegative".into(),
            ));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "split_fraction {} must be strictly between 0 and 1",
                self.split_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-piece loss components together with the annealing weights that were
/// applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll_type: f64,
    pub nll_root: f64,
    pub kl_piece: f64,
    pub kl_bars: f64,
    pub w_piece: f64,
    pub w_bar: f64,
    pub weighted_total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total from the parts.
    pub fn recompute_total(&self) -> f64 {
        self.nll_type + self.nll_root + self.w_piece * self.kl_piece + self.w_bar * self.kl_bars
    }

    /// Total with both KL weights at 1 (the unannealed objective).
    pub fn unannealed_total(&self) -> f64 {
        self.nll_type + self.nll_root + self.kl_piece + self.kl_bars
    }

    fn check_finite(&self, epoch: usize) -> Result<(), TrainError> {
        for (name, value) in [
            ("nll_type", self.nll_type),
            ("nll_root", self.nll_root),
            ("kl_piece", self.kl_piece),
            ("kl_bars", self.kl_bars),
            ("weighted_total", self.weighted_total),
        ] {
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    what: format!("loss component {name}"),
                    epoch,
                });
            }
        }
        Ok(())
    }
}

/// Chord-balancing weights: `w_c = |C| * (1/(s+n_c)) / sum_c' 1/(s+n_c')`.
/// The mean weight is exactly 1 for any counts.
pub fn chord_type_weights(counts: &[f64], smoothing: f64) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / (smoothing + n)).collect();
    let total: f64 = inv.iter().sum();
    let classes = counts.len() as f64;
    inv.iter().map(|&i| classes * i / total).collect()
}

/// Chord-type histogram of a corpus.
pub fn count_chord_types(pieces: &[LeadSheet]) -> [f64; CHORD_TYPE_VOCAB] {
    let mut counts = [0.0; CHORD_TYPE_VOCAB];
    for piece in pieces {
        for chord in piece.chords() {
            counts[chord.chord_type().index()] += 1.0;
        }
    }
    counts
}

/// Annealing weights for epoch `e`: they start at zero and grow linearly,
/// clamped at the cap.
pub fn kl_weights(epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let e = epoch as f64;
    (
        (e * config.kl_increment_piece).min(config.kl_cap),
        (e * config.kl_increment_bar).min(config.kl_cap),
    )
}

/// Builds the differentiable weighted total
/// `nll_type + nll_root + w_piece * kl_piece + w_bar * kl_bars`.
pub fn total_loss(graph: &mut Graph, loss: &PieceLoss, w_piece: f64, w_bar: f64) -> DiffValue {
    let recon = graph.add(loss.nll_type, loss.nll_root);
    let kl_p = graph.scale(loss.kl_piece, w_piece);
    let kl_b = graph.scale(loss.kl_bars, w_bar);
    let kl = graph.add(kl_p, kl_b);
    graph.add(recon, kl)
}

/// Extracts the numeric [`LossBreakdown`] for a finished forward pass.
pub fn breakdown(
    graph: &Graph,
    loss: &PieceLoss,
    total: DiffValue,
    w_piece: f64,
    w_bar: f64,
) -> LossBreakdown {
    let v = loss.values(graph);
    LossBreakdown {
        nll_type: v.nll_type,
        nll_root: v.nll_root,
        kl_piece: v.kl_piece,
        kl_bars: v.kl_bars,
        w_piece,
        w_bar,
        weighted_total: graph.scalar(total),
    }
}

/// One Adam update with bias correction; gradients are globally norm-clipped
/// first when configured. Fails on non-finite gradients, naming the group.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.tensors().len(), "gradient group count");
    for (name, grad) in params.names().to_vec().iter().zip(grads) {
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                what: format!("gradient of {name}"),
                epoch: state.step as usize,
            });
        }
    }

    let mut scale = 1.0;
    if let Some(clip) = config.grad_clip_norm {
        let norm_sq: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum();
        let norm = norm_sq.sqrt();
        if norm > clip {
            scale = clip / norm;
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.adam_beta1.powi(t);
    let bias2 = 1.0 - config.adam_beta2.powi(t);
    for (((tensor, grad), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((p, &g_raw), m), v) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g_raw * scale;
            *m = config.adam_beta1 * *m + (1.0 - config.adam_beta1) * g;
            *v = config.adam_beta2 * *v + (1.0 - config.adam_beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Deterministic shuffle split into `(train, validation)`; train gets
/// `floor(fraction * n)` pieces.
pub fn split_dataset(
    pieces: &[LeadSheet],
    fraction: f64,
    seed: u64,
) -> (Vec<LeadSheet>, Vec<LeadSheet>) {
    let mut indices: Vec<usize> = (0..pieces.len()).collect();
    Rng::from_seed(seed).derive("split", 0).shuffle(&mut indices);
    let train_len = (fraction * pieces.len() as f64).floor() as usize;
    let train = indices[..train_len]
        .iter()
        .map(|&i| pieces[i].clone())
        .collect();
    let val = indices[train_len..]
        .iter()
        .map(|&i| pieces[i].clone())
        .collect();
    (train, val)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    pub w_piece: f64,
    pub w_bar: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_train: LossBreakdown,
    pub final_validation: LossBreakdown,
    pub best_validation: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub param_count: usize,
}

/// Teacher-forced evaluation statistics with mean latents and unit chord
/// weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub type_accuracy: f64,
    /// Mean of (type NLL + root NLL) per chord step.
    pub per_token_nll: f64,
}

/// Deterministic teacher-forced accuracy / NLL over a corpus.
pub fn teacher_forced_stats(
    params: &ModelParams,
    pieces: &[LeadSheet],
) -> Result<EvalStats, ModelError> {
    let ones = [1.0; CHORD_TYPE_VOCAB];
    let mut correct = 0usize;
    let mut steps = 0usize;
    let mut nll = 0.0;
    for piece in pieces {
        let mut graph = Graph::new();
        let bound = BoundParams::bind(&mut graph, params);
        let mut rng = Rng::from_seed(0);
        let loss = forward_teacher_forced(
            &mut graph,
            &bound,
            piece,
            &ones,
            LatentMode::Mean,
            &mut rng,
        )?;
        let v = loss.values(&graph);
        correct += loss.type_correct;
        steps += loss.chord_steps;
        nll += v.nll_type + v.nll_root;
    }
    Ok(EvalStats {
        type_accuracy: correct as f64 / steps.max(1) as f64,
        per_token_nll: nll / steps.max(1) as f64,
    })
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut acc = LossBreakdown {
        nll_type: 0.0,
        nll_root: 0.0,
        kl_piece: 0.0,
        kl_bars: 0.0,
        w_piece: parts.first().map(|p| p.w_piece).unwrap_or(0.0),
        w_bar: parts.first().map(|p| p.w_bar).unwrap_or(0.0),
        weighted_total: 0.0,
    };
    for p in parts {
        acc.nll_type += p.nll_type / n;
        acc.nll_root += p.nll_root / n;
        acc.kl_piece += p.kl_piece / n;
        acc.kl_bars += p.kl_bars / n;
        acc.weighted_total += p.weighted_total / n;
    }
    acc
}

fn piece_pass(
    params: &ModelParams,
    piece: &LeadSheet,
    type_weights: &[f64],
    w_piece: f64,
    w_bar: f64,
    rng: &mut Rng,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>), TrainError> {
    let mut graph = Graph::new();
    let bound = BoundParams::bind(&mut graph, params);
    let loss = forward_teacher_forced(
        &mut graph,
        &bound,
        piece,
        type_weights,
        LatentMode::Sample,
        rng,
    )?;
    let total = total_loss(&mut graph, &loss, w_piece, w_bar);
    let parts = breakdown(&graph, &loss, total, w_piece, w_bar);
    let grads = if with_grads {
        graph.backward(total);
        Some(bound.collect_grads(&graph))
    } else {
        None
    };
    Ok((parts, grads))
}

/// Runs the optimization loop: shuffled mini-batches of per-piece passes with
/// averaged gradients, per-epoch validation, a rolling `last.ckpt` with
/// optimizer state for resumption, and a `best.ckpt` selected by the
/// unannealed validation objective.
pub fn train(
    corpus: &[LeadSheet],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainSummary, TrainError> {
    train_config.validate()?;
    model_config
        .validate()
        .map_err(TrainError::BadConfig)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    for piece in corpus {
        if !piece.is_fully_labeled() {
            return Err(TrainError::Model(ModelError::UnlabeledPiece {
                id: piece.id.clone(),
            }));
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let log_path = out_dir.join("train_log.jsonl");

    let root_rng = Rng::from_seed(train_config.seed);
    let (train_set, val_set) =
        split_dataset(corpus, train_config.split_fraction, train_config.seed);
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let counts = count_chord_types(&train_set);
    let type_weights = chord_type_weights(&counts, train_config.count_smoothing);

    let (mut params, mut opt, start_epoch) = match resume_from {
        None => {
            let mut init_rng = root_rng.derive("init", 0);
            let params = ModelParams::init(model_config, &mut init_rng);
            let opt = OptState::zeros_like(&params);
            (params, opt, 0)
        }
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.config() != model_config {
                return Err(TrainError::ResumeMismatch(format!(
                    "checkpoint was trained with {:?}",
                    ckpt.params.config()
                )));
            }
            let opt = ckpt
                .opt_state
                .ok_or_else(|| TrainError::ResumeMismatch("checkpoint has no optimizer state".into()))?;
            (ckpt.params, opt, ckpt.epoch as usize)
        }
    };

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|source| TrainError::Io {
            path: log_path.display().to_string(),
            source,
        })?;

    let mut final_train = None;
    let mut final_val = None;
    for epoch in start_epoch..train_config.epochs {
        let started = Instant::now();
        let (w_piece, w_bar) = kl_weights(epoch, train_config);
        let epoch_rng = root_rng.derive("epoch", epoch as u64);

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        epoch_rng.derive("shuffle", 0).shuffle(&mut order);

        let mut train_parts = Vec::with_capacity(train_set.len());
        for batch in order.chunks(train_config.batch_size) {
            let mut accum: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let mut piece_rng = epoch_rng.derive("latent", idx as u64);
                let (parts, grads) = piece_pass(
                    &params,
                    &train_set[idx],
                    &type_weights,
                    w_piece,
                    w_bar,
                    &mut piece_rng,
                    true,
                )?;
                parts.check_finite(epoch)?;
                train_parts.push(parts);
                for (acc, g) in accum.iter_mut().zip(grads.expect("grads requested")) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v * inv;
                    }
                }
            }
            adam_step(&mut params, &accum, &mut opt, train_config)?;
        }

        let mut val_parts = Vec::with_capacity(val_set.len());
        for (idx, piece) in val_set.iter().enumerate() {
            let mut piece_rng = epoch_rng.derive("val", idx as u64);
            let (parts, _) = piece_pass(
                &params,
                piece,
                &type_weights,
                w_piece,
                w_bar,
                &mut piece_rng,
                false,
            )?;
            parts.check_finite(epoch)?;
            val_parts.push(parts);
        }

        let train_mean = mean_breakdown(&train_parts);
        // with no validation split the train mean stands in
        let val_mean = if val_parts.is_empty() {
            train_mean
        } else {
            mean_breakdown(&val_parts)
        };
        let record = EpochRecord {
            epoch,
            train: train_mean,
            validation: val_mean,
            w_piece,
            w_bar,
            seconds: started.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record).expect("log record serializes");
        writeln!(log, "{line}").map_err(|source| TrainError::Io {
            path: log_path.display().to_string(),
            source,
        })?;

        // best checkpoint by the unannealed objective, comparable across epochs
        let val_total = val_mean.unannealed_total();
        let improved = opt.best_validation.map_or(true, |best| val_total < best);
        if improved {
            opt.best_validation = Some(val_total);
            save_checkpoint(
                &best_path,
                &params,
                train_config.seed,
                (epoch + 1) as u64,
                None,
            )?;
        }
        save_checkpoint(
            &last_path,
            &params,
            train_config.seed,
            (epoch + 1) as u64,
            Some(&opt),
        )?;

        final_train = Some(train_mean);
        final_val = Some(val_mean);
    }

    let final_train = final_train.ok_or(TrainError::BadConfig(
        "no epochs to run (epochs <= resume epoch)".into(),
    ))?;
    Ok(TrainSummary {
        epochs_run: train_config.epochs - start_epoch,
        final_train,
        final_validation: final_val.unwrap(),
        best_validation: opt.best_validation.unwrap_or(f64::INFINITY),
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        log_path,
        param_count: params.param_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leadsheet::{Bar, ChordEvent, Duration, EmotionLabel, Note, Pitch, Root};
    use crate::model::WiringVariant;

    #[test]
    fn uniform_counts_unit_weights() {
        let w = chord_type_weights(&[250.0; 7], 1e5);
        for v in &w {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_hand_case() {
        // counts [0, 1e5]: inverses 1e-5 and 5e-6, so weights [4/3, 2/3]
        let w = chord_type_weights(&[0.0, 1e5], 1e5);
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rare_classes_upweighted() {
        let mut counts = [0.0; 7];
        counts[0] = 1e12;
        let w = chord_type_weights(&counts, 1e5);
        assert!(w[0] < 1.0);
        for &v in &w[1..] {
            assert!(v > 1.0);
        }
        // strictly decreasing in count
        let w2 = chord_type_weights(&[10.0, 20.0, 30.0], 1e5);
        assert!(w2[0] > w2[1] && w2[1] > w2[2]);
    }

    #[test]
    fn weights_mean_is_one() {
        let mut rng = Rng::from_seed(17);
        for _ in 0..100 {
            let counts: Vec<f64> = (0..7).map(|_| (rng.uniform() * 1e6).floor()).collect();
            let w = chord_type_weights(&counts, 1e5);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_weight_schedule() {
        let config = TrainConfig::default();
        assert_eq!(kl_weights(0, &config), (0.0, 0.0));
        assert_eq!(kl_weights(10, &config), (1e-4, 1e-3));
        assert_eq!(kl_weights(1_000_000, &config), (1.0, 1.0));
        // non-decreasing
        let mut prev = (0.0, 0.0);
        for e in 0..2000 {
            let w = kl_weights(e * 700, &config);
            assert!(w.0 >= prev.0 && w.1 >= prev.1);
            assert!(w.0 <= config.kl_cap && w.1 <= config.kl_cap);
            prev = w;
        }
    }

    #[test]
    fn breakdown_recompute_matches() {
        let b = LossBreakdown {
            nll_type: 1.5,
            nll_root: 2.5,
            kl_piece: 0.25,
            kl_bars: 4.0,
            w_piece: 0.5,
            w_bar: 0.125,
            weighted_total: 1.5 + 2.5 + 0.5 * 0.25 + 0.125 * 4.0,
        };
        assert_eq!(b.recompute_total(), b.weighted_total);
        assert_eq!(b.unannealed_total(), 8.25);
    }

    fn tiny_model() -> ModelParams {
        let config = ModelConfig::toy(6, 3, WiringVariant::LatentInput);
        ModelParams::init(&config, &mut Rng::from_seed(100))
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = tiny_model();
        let before: Vec<Tensor> = params.tensors().to_vec();
        let mut state = OptState::zeros_like(&params);
        let grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        for (a, b) in params.tensors().iter().zip(&before) {
            assert_eq!(a.data(), b.data());
        }
        for m in state.first_moment.iter().chain(&state.second_moment) {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn adam_constant_gradient_step_approaches_learning_rate() {
        // single scalar parameter, constant gradient: step size tends to lr
        let config = ModelConfig::toy(1, 1, WiringVariant::LatentInput);
        let mut params = ModelParams::zeros(&config);
        let mut state = OptState::zeros_like(&params);
        let train_config = TrainConfig {
            grad_clip_norm: None,
            ..TrainConfig::default()
        };
        let grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| {
                let mut g = Tensor::zeros(t.shape());
                g.data_mut().iter_mut().for_each(|v| *v = 0.37);
                g
            })
            .collect();
        let mut prev = params.tensors()[0].data()[0];
        let mut step_size = 0.0;
        for _ in 0..2000 {
            adam_step(&mut params, &grads, &mut state, &train_config).unwrap();
            let now = params.tensors()[0].data()[0];
            step_size = (prev - now).abs();
            prev = now;
        }
        assert!(
            (step_size - train_config.learning_rate).abs() < 0.01 * train_config.learning_rate,
            "step {step_size} vs lr {}",
            train_config.learning_rate
        );
    }

    #[test]
    fn adam_non_finite_gradient_names_group() {
        let mut params = tiny_model();
        let mut state = OptState::zeros_like(&params);
        let mut grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        grads[3].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap_err();
        let name = params.names()[3].clone();
        match err {
            TrainError::NonFinite { what, .. } => assert!(what.contains(&name), "{what}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let pieces: Vec<LeadSheet> = (0..10)
            .map(|i| LeadSheet {
                id: format!("p{i}"),
                emotion: None,
                bars: vec![Bar {
                    emotion: None,
                    melody: vec![],
                    chords: [ChordEvent::REST, ChordEvent::REST],
                }],
            })
            .collect();
        let (train_a, val_a) = split_dataset(&pieces, 0.9, 7);
        assert_eq!(train_a.len(), 9);
        assert_eq!(val_a.len(), 1);
        let (train_b, val_b) = split_dataset(&pieces, 0.9, 7);
        assert_eq!(train_a, train_b);
        assert_eq!(val_a, val_b);

        // disjoint and exhaustive
        let mut ids: Vec<&str> = train_a
            .iter()
            .chain(&val_a)
            .map(|p| p.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), pieces.len());
    }

    fn note(pitch: u8, dur: u8) -> Note {
        Note {
            pitch: Pitch::new(pitch).unwrap(),
            dur: Duration::new(dur).unwrap(),
        }
    }

    fn chord(t: ChordType, root: u8) -> ChordEvent {
        ChordEvent::new(t, Root::new(root).unwrap()).unwrap()
    }

    pub(crate) fn labeled_corpus(n: usize) -> Vec<LeadSheet> {
        let types = [ChordType::Maj, ChordType::Min, ChordType::Dom7, ChordType::Sus4];
        (0..n)
            .map(|i| {
                let t = types[i % types.len()];
                let mut piece = LeadSheet {
                    id: format!("p{i}"),
                    emotion: None,
                    bars: (0..2)
                        .map(|b| Bar {
                            emotion: None,
                            melody: vec![note(((i * 5 + b * 3) % 48) as u8, 11), note(((i * 7) % 48) as u8, 11)],
                            chords: [chord(t, (i % 12) as u8), chord(t, ((i + 7) % 12) as u8)],
                        })
                        .collect(),
                };
                crate::emolabel::label_corpus(std::slice::from_mut(&mut piece), true);
                piece
            })
            .collect()
    }

    #[test]
    fn total_loss_weighting_is_linear() {
        let params = tiny_model();
        let corpus = labeled_corpus(1);
        let mut graph = Graph::new();
        let bound = BoundParams::bind(&mut graph, &params);
        let mut rng = Rng::from_seed(0);
        let loss = forward_teacher_forced(
            &mut graph,
            &bound,
            &corpus[0],
            &[1.0; 7],
            LatentMode::Sample,
            &mut rng,
        )
        .unwrap();
        let t0 = total_loss(&mut graph, &loss, 0.0, 0.0);
        let t1 = total_loss(&mut graph, &loss, 1.0, 1.0);
        let t2 = total_loss(&mut graph, &loss, 1.0, 2.0);
        let v = loss.values(&graph);
        assert!((graph.scalar(t0) - (v.nll_type + v.nll_root)).abs() < 1e-12);
        assert!(
            (graph.scalar(t1) - (v.nll_type + v.nll_root + v.kl_piece + v.kl_bars)).abs() < 1e-12
        );
        assert!((graph.scalar(t2) - graph.scalar(t1) - v.kl_bars).abs() < 1e-12);
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let corpus = labeled_corpus(5);
        let model_config = ModelConfig::toy(6, 3, WiringVariant::LatentInput);
        let train_config = TrainConfig {
            epochs: 3,
            batch_size: 2,
            split_fraction: 0.8,
            seed: 11,
            ..TrainConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let summary_a = train(&corpus, &model_config, &train_config, dir_a.path(), None).unwrap();
        let summary_b = train(&corpus, &model_config, &train_config, dir_b.path(), None).unwrap();
        assert_eq!(summary_a.epochs_run, 3);
        assert!(summary_a.final_train.weighted_total.is_finite());
        assert_eq!(
            std::fs::read(&summary_a.last_checkpoint).unwrap(),
            std::fs::read(&summary_b.last_checkpoint).unwrap(),
            "same seed must give bit-identical checkpoints"
        );
        assert_eq!(
            std::fs::read(&summary_a.best_checkpoint).unwrap(),
            std::fs::read(&summary_b.best_checkpoint).unwrap()
        );

        // the log is per-epoch and parses back
        let log = std::fs::read_to_string(&summary_a.log_path).unwrap();
        let records: Vec<EpochRecord> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].w_piece, 0.0);
        assert_eq!(records[0].w_bar, 0.0);
        for r in &records {
            assert!(r.train.weighted_total.is_finite());
            assert!(r.validation.weighted_total.is_finite());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let corpus = labeled_corpus(5);
        let model_config = ModelConfig::toy(6, 3, WiringVariant::LatentInput);
        let base = TrainConfig {
            batch_size: 2,
            split_fraction: 0.8,
            seed: 23,
            ..TrainConfig::default()
        };

        let full_dir = tempfile::tempdir().unwrap();
        let full = train(
            &corpus,
            &model_config,
            &TrainConfig { epochs: 4, ..base.clone() },
            full_dir.path(),
            None,
        )
        .unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        train(
            &corpus,
            &model_config,
            &TrainConfig { epochs: 2, ..base.clone() },
            part_dir.path(),
            None,
        )
        .unwrap();
        let resumed = train(
            &corpus,
            &model_config,
            &TrainConfig { epochs: 4, ..base },
            part_dir.path(),
            Some(&part_dir.path().join("last.ckpt")),
        )
        .unwrap();
        assert_eq!(resumed.epochs_run, 2);
        assert_eq!(
            std::fs::read(&full.last_checkpoint).unwrap(),
            std::fs::read(&resumed.last_checkpoint).unwrap(),
            "resumed run must match the uninterrupted one bit-exactly"
        );
        assert_eq!(
            full.final_train.weighted_total.to_bits(),
            resumed.final_train.weighted_total.to_bits()
        );
    }

    #[test]
    fn unlabeled_corpus_rejected() {
        let mut corpus = labeled_corpus(3);
        corpus[1].bars[0].emotion = None;
        let model_config = ModelConfig::toy(6, 3, WiringVariant::LatentInput);
        let dir = tempfile::tempdir().unwrap();
        let err = train(
            &corpus,
            &model_config,
            &TrainConfig { epochs: 1, ..TrainConfig::default() },
            dir.path(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Model(ModelError::UnlabeledPiece { .. })));
    }

    #[test]
    fn a_training_step_changes_parameters() {
        let corpus = labeled_corpus(2);
        let model_config = ModelConfig::toy(6, 3, WiringVariant::LatentInput);
        let mut init_rng = Rng::from_seed(31).derive("init", 0);
        let before = ModelParams::init(&model_config, &mut init_rng);
        let dir = tempfile::tempdir().unwrap();
        train(
            &corpus,
            &model_config,
            &TrainConfig {
                epochs: 1,
                seed: 31,
                split_fraction: 0.5,
                ..TrainConfig::default()
            },
            dir.path(),
            None,
        )
        .unwrap();
        let after = load_checkpoint(dir.path().join("last.ckpt")).unwrap();
        let changed = before
            .tensors()
            .iter()
            .zip(after.params.tensors())
            .any(|(a, b)| a.data() != b.data());
        assert!(changed);
    }
}
