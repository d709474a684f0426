//! Teacher-forced training loss and prior-driven generation.

use super::net::{
    attention_context, decode_step, encode_melody, gaussian_head, init_decoder_state,
    inject_bar_latent, run_stack, BoundParams,
};
use super::{ModelParams, WiringVariant};
use crate::diffmath::{DiffValue, Graph, Rng};
use crate::leadsheet::{
    encode_chord, tokenize_piece, ChordEvent, ChordType, EmotionLabel, LeadSheet, Root,
    CHORD_TYPE_VOCAB, ROOT_NONE, ROOT_VOCAB,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("piece {id} is missing emotion labels; label the corpus first")]
    UnlabeledPiece { id: String },
    #[error("melody has {melody_bars} bars but {emotion_bars} bar emotions were given")]
    BarCountMismatch {
        melody_bars: usize,
        emotion_bars: usize,
    },
}

/// Whether latent variables are sampled through the reparameterization or
/// fixed to the distribution mean (deterministic evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Sample,
    Mean,
}

/// Graph handles of one piece's loss terms.
#[derive(Debug)]
pub struct PieceLoss {
    pub nll_type: DiffValue,
    pub nll_root: DiffValue,
    pub kl_piece: DiffValue,
    /// Sum over bars.
    pub kl_bars: DiffValue,
    pub per_bar_kl: Vec<DiffValue>,
    /// Number of chord steps (two per bar).
    pub chord_steps: usize,
    /// Teacher-forced argmax hits on the chord-type head.
    pub type_correct: usize,
}

/// Plain numeric loss components, extracted from a [`PieceLoss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub nll_type: f64,
    pub nll_root: f64,
    pub kl_piece: f64,
    pub kl_bars: f64,
    pub chord_steps: usize,
    pub type_correct: usize,
}

impl PieceLoss {
    pub fn values(&self, graph: &Graph) -> LossValues {
        LossValues {
            nll_type: graph.scalar(self.nll_type),
            nll_root: graph.scalar(self.nll_root),
            kl_piece: graph.scalar(self.kl_piece),
            kl_bars: graph.scalar(self.kl_bars),
            chord_steps: self.chord_steps,
            type_correct: self.type_correct,
        }
    }
}

fn emotion_row(graph: &mut Graph, bound: &BoundParams, label: EmotionLabel) -> DiffValue {
    let table = bound.get(bound.params().layout().emotion_embedding);
    graph.select_row(table, label.index())
}

fn embed_chord(graph: &mut Graph, bound: &BoundParams, chord: ChordEvent) -> DiffValue {
    let raw = graph.constant(encode_chord(chord));
    bound.affine(graph, bound.params().layout().chord_embedding, raw)
}

fn pick_latent(
    graph: &mut Graph,
    mean: DiffValue,
    logvar: DiffValue,
    mode: LatentMode,
    rng: &mut Rng,
) -> DiffValue {
    match mode {
        LatentMode::Sample => graph.reparameterize(mean, logvar, rng),
        LatentMode::Mean => mean,
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs the recognition path with teacher forcing and accumulates the loss
/// terms: chord-type NLL weighted by `type_weights`, unweighted root NLL, the
/// piece-level KL and one KL per bar. One reparameterized sample per latent.
pub fn forward_teacher_forced(
    graph: &mut Graph,
    bound: &BoundParams,
    piece: &LeadSheet,
    type_weights: &[f64],
    latent_mode: LatentMode,
    rng: &mut Rng,
) -> Result<PieceLoss, ModelError> {
    let piece_label = piece.emotion.ok_or_else(|| ModelError::UnlabeledPiece {
        id: piece.id.clone(),
    })?;
    let bar_labels: Vec<EmotionLabel> = piece
        .bars
        .iter()
        .map(|b| {
            b.emotion.ok_or_else(|| ModelError::UnlabeledPiece {
                id: piece.id.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    assert_eq!(
        type_weights.len(),
        CHORD_TYPE_VOCAB,
        "type_weights must cover all {CHORD_TYPE_VOCAB} chord types"
    );

    let layout = bound.params().layout();
    let tokens = tokenize_piece(piece);
    let melody = encode_melody(graph, bound, &tokens.tokens);

    let chords: Vec<ChordEvent> = piece.chords().collect();
    let chord_embs: Vec<DiffValue> = chords
        .iter()
        .map(|&c| embed_chord(graph, bound, c))
        .collect();

    let chord_run = run_stack(graph, bound, &layout.chord_encoder, &chord_embs, false);
    let suffix_run = run_stack(
        graph,
        bound,
        &layout.reverse_chord_encoder,
        &chord_embs,
        true,
    );

    // piece level
    let piece_emo = emotion_row(graph, bound, piece_label);
    let prior_in = graph.concat(&[piece_emo, melody.summary]);
    let (prior_mean, prior_logvar) = gaussian_head(graph, bound, layout.piece_prior, prior_in);
    let recog_in = graph.concat(&[piece_emo, melody.summary, chord_run.final_state]);
    let (recog_mean, recog_logvar) =
        gaussian_head(graph, bound, layout.piece_recognition, recog_in);
    let kl_piece = graph.gaussian_kl(recog_mean, recog_logvar, prior_mean, prior_logvar);
    let piece_latent = pick_latent(graph, recog_mean, recog_logvar, latent_mode, rng);

    let mut state = init_decoder_state(graph, bound, piece_latent);
    let mut per_bar_kl = Vec::with_capacity(piece.bars.len());
    let mut type_nlls = Vec::with_capacity(chords.len());
    let mut root_nlls = Vec::with_capacity(chords.len());
    let mut type_correct = 0usize;

    for (bar_idx, bar) in piece.bars.iter().enumerate() {
        let bar_emo = emotion_row(graph, bound, bar_labels[bar_idx]);
        let h_last = state.top_hidden();
        let prior_in = graph.concat(&[h_last, bar_emo]);
        let (bar_prior_mean, bar_prior_logvar) =
            gaussian_head(graph, bound, layout.bar_prior, prior_in);
        let suffix = suffix_run.states[2 * bar_idx];
        let recog_in = graph.concat(&[h_last, suffix, bar_emo]);
        let (bar_recog_mean, bar_recog_logvar) =
            gaussian_head(graph, bound, layout.bar_recognition, recog_in);
        let kl_bar = graph.gaussian_kl(
            bar_recog_mean,
            bar_recog_logvar,
            bar_prior_mean,
            bar_prior_logvar,
        );
        per_bar_kl.push(kl_bar);
        let bar_latent = pick_latent(graph, bar_recog_mean, bar_recog_logvar, latent_mode, rng);

        let mut bar_state = state;
        if bound.params().config().variant == WiringVariant::StateInjection {
            bar_state = inject_bar_latent(graph, bound, &bar_state, bar_latent);
        }
        state = bar_state;

        let span = tokens.bar_spans[bar_idx];
        for (step, &chord) in bar.chords.iter().enumerate() {
            let t = 2 * bar_idx + step;
            let prev = if t == 0 {
                bound.get(layout.sos_chord)
            } else {
                chord_embs[t - 1]
            };
            let query = state.top_hidden();
            let (context, _) = attention_context(graph, bound, query, &melody.states, span);
            let out = decode_step(graph, bound, prev, bar_emo, bar_latent, context, &state);
            state = out.state;

            let type_idx = chord.chord_type().index();
            let root_idx = chord.root().index() as usize;
            type_nlls.push(graph.nll_onehot(out.type_logits, type_idx, type_weights[type_idx]));
            root_nlls.push(graph.nll_onehot(out.root_logits, root_idx, 1.0));
            if argmax(graph.value(out.type_logits)) == type_idx {
                type_correct += 1;
            }
        }
    }

    let nll_type = graph.sum_scalars(&type_nlls);
    let nll_root = graph.sum_scalars(&root_nlls);
    let kl_bars = graph.sum_scalars(&per_bar_kl);
    Ok(PieceLoss {
        nll_type,
        nll_root,
        kl_piece,
        kl_bars,
        per_bar_kl,
        chord_steps: chords.len(),
        type_correct,
    })
}

/// Chord decoding strategy during generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Argmax,
    Sample { temperature: f64 },
}

pub struct GenerateRequest<'a> {
    /// Source of the melody; its chords are ignored.
    pub melody: &'a LeadSheet,
    pub piece_emotion: EmotionLabel,
    pub bar_emotions: &'a [EmotionLabel],
    pub decoding: Decoding,
}

fn pick_class(logits: &[f64], decoding: Decoding, rng: &mut Rng) -> usize {
    match decoding {
        Decoding::Argmax => argmax(logits),
        Decoding::Sample { temperature } => {
            let t = temperature.max(1e-6);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.uniform() * total;
            for (i, w) in weights.iter().enumerate() {
                draw -= w;
                if draw <= 0.0 {
                    return i;
                }
            }
            weights.len() - 1
        }
    }
}

/// Harmonizes a melody: latents are sampled from the prior networks and the
/// chords are decoded autoregressively from the model's own outputs.
///
/// The REST/NONE pairing is enforced by construction: a REST chord type
/// forces the NONE root, any other type excludes it.
pub fn generate(
    params: &ModelParams,
    request: &GenerateRequest,
    rng: &mut Rng,
) -> Result<LeadSheet, ModelError> {
    let melody = request.melody;
    if melody.bars.len() != request.bar_emotions.len() {
        return Err(ModelError::BarCountMismatch {
            melody_bars: melody.bars.len(),
            emotion_bars: request.bar_emotions.len(),
        });
    }

    let graph = &mut Graph::new();
    let bound = BoundParams::bind(graph, params);
    let layout = bound.params().layout();
    let tokens = tokenize_piece(melody);
    let encoding = encode_melody(graph, &bound, &tokens.tokens);

    let piece_emo = emotion_row(graph, &bound, request.piece_emotion);
    let prior_in = graph.concat(&[piece_emo, encoding.summary]);
    let (prior_mean, prior_logvar) = gaussian_head(graph, &bound, layout.piece_prior, prior_in);
    let piece_latent = graph.reparameterize(prior_mean, prior_logvar, rng);

    let mut state = init_decoder_state(graph, &bound, piece_latent);
    let mut generated: Vec<[ChordEvent; 2]> = Vec::with_capacity(melody.bars.len());
    let mut prev_chord: Option<ChordEvent> = None;

    for bar_idx in 0..melody.bars.len() {
        let bar_emo = emotion_row(graph, &bound, request.bar_emotions[bar_idx]);
        let h_last = state.top_hidden();
        let prior_in = graph.concat(&[h_last, bar_emo]);
        let (bar_mean, bar_logvar) = gaussian_head(graph, &bound, layout.bar_prior, prior_in);
        let bar_latent = graph.reparameterize(bar_mean, bar_logvar, rng);

        if bound.params().config().variant == WiringVariant::StateInjection {
            state = inject_bar_latent(graph, &bound, &state, bar_latent);
        }

        let span = tokens.bar_spans[bar_idx];
        let mut bar_chords = [ChordEvent::REST; 2];
        for slot in bar_chords.iter_mut() {
            let prev = match prev_chord {
                None => bound.get(layout.sos_chord),
                Some(c) => embed_chord(graph, &bound, c),
            };
            let query = state.top_hidden();
            let (context, _) = attention_context(graph, &bound, query, &encoding.states, span);
            let out = decode_step(graph, &bound, prev, bar_emo, bar_latent, context, &state);
            state = out.state;

            let type_idx = pick_class(graph.value(out.type_logits), request.decoding, rng);
            let chord_type = ChordType::from_index(type_idx).expect("head width matches vocab");
            let chord = if chord_type == ChordType::Rest {
                ChordEvent::REST
            } else {
                // mask the NONE slot: only pitched roots are eligible
                let root_logits = &graph.value(out.root_logits)[..ROOT_NONE as usize];
                debug_assert_eq!(graph.value(out.root_logits).len(), ROOT_VOCAB);
                let root_idx = pick_class(root_logits, request.decoding, rng);
                ChordEvent::new(chord_type, Root::new(root_idx as u8).unwrap())
                    .expect("non-REST type with pitched root")
            };
            *slot = chord;
            prev_chord = Some(chord);
        }
        generated.push(bar_chords);
    }

    let mut result = melody.clone();
    result.emotion = Some(request.piece_emotion);
    for ((bar, chords), &label) in result
        .bars
        .iter_mut()
        .zip(generated)
        .zip(request.bar_emotions)
    {
        bar.chords = chords;
        bar.emotion = Some(label);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check;
    use crate::leadsheet::{Bar, Duration, Note, Pitch};
    use crate::model::{ModelConfig, ModelParams};

    fn note(pitch: u8, dur: u8) -> Note {
        Note {
            pitch: Pitch::new(pitch).unwrap(),
            dur: Duration::new(dur).unwrap(),
        }
    }

    fn chord(t: ChordType, root: u8) -> ChordEvent {
        ChordEvent::new(t, Root::new(root).unwrap()).unwrap()
    }

    fn labeled_piece() -> LeadSheet {
        LeadSheet {
            id: "piece".into(),
            emotion: Some(EmotionLabel::Positive),
            bars: vec![
                Bar {
                    emotion: Some(EmotionLabel::Positive),
                    melody: vec![note(24, 11), note(28, 11)],
                    chords: [chord(ChordType::Maj, 0), chord(ChordType::Maj, 7)],
                },
                Bar {
                    emotion: Some(EmotionLabel::Negative),
                    melody: vec![note(27, 23)],
                    chords: [chord(ChordType::Min, 9), ChordEvent::REST],
                },
            ],
        }
    }

    fn toy_params(variant: WiringVariant, seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::toy(8, 4, variant), &mut Rng::from_seed(seed))
    }

    const ALL_VARIANTS: [WiringVariant; 3] = [
        WiringVariant::StateInjection,
        WiringVariant::LatentInput,
        WiringVariant::LatentAndContextInput,
    ];

    fn run_forward(
        params: &ModelParams,
        piece: &LeadSheet,
        mode: LatentMode,
        seed: u64,
    ) -> (Graph, PieceLoss) {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, params);
        let mut rng = Rng::from_seed(seed);
        let loss =
            forward_teacher_forced(&mut g, &bound, piece, &[1.0; 7], mode, &mut rng).unwrap();
        (g, loss)
    }

    #[test]
    fn loss_terms_are_nonnegative() {
        for variant in ALL_VARIANTS {
            let params = toy_params(variant, 21);
            let (g, loss) = run_forward(&params, &labeled_piece(), LatentMode::Sample, 1);
            let v = loss.values(&g);
            assert!(v.nll_type >= 0.0 && v.nll_root >= 0.0);
            assert!(v.kl_piece >= 0.0 && v.kl_bars >= 0.0);
            assert_eq!(v.chord_steps, 4);
            assert_eq!(loss.per_bar_kl.len(), 2);
            for &kl in &loss.per_bar_kl {
                assert!(g.scalar(kl) >= 0.0);
            }
        }
    }

    #[test]
    fn tied_recognition_gives_zero_kl() {
        let mut params = toy_params(WiringVariant::LatentInput, 22);
        params.tie_recognition_to_prior();
        let (g, loss) = run_forward(&params, &labeled_piece(), LatentMode::Sample, 2);
        let v = loss.values(&g);
        assert!(v.kl_piece.abs() < 1e-12, "piece KL {}", v.kl_piece);
        assert!(v.kl_bars.abs() < 1e-12, "bar KL {}", v.kl_bars);
        for &kl in &loss.per_bar_kl {
            assert!(g.scalar(kl).abs() < 1e-12);
        }
    }

    #[test]
    fn unlabeled_piece_rejected() {
        let params = toy_params(WiringVariant::LatentInput, 23);
        let mut piece = labeled_piece();
        piece.bars[1].emotion = None;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &params);
        let mut rng = Rng::from_seed(3);
        let err = forward_teacher_forced(
            &mut g,
            &bound,
            &piece,
            &[1.0; 7],
            LatentMode::Sample,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::UnlabeledPiece { .. }));
    }

    #[test]
    fn future_chords_do_not_change_generated_prefix() {
        // the prior path reads only already-decoded state, so editing a later
        // bar's ground-truth chords cannot change how an earlier bar decodes
        let params = toy_params(WiringVariant::LatentInput, 24);
        let piece = labeled_piece();
        let mut altered = piece.clone();
        altered.bars[1].chords = [chord(ChordType::Dim, 3), chord(ChordType::Aug, 15)];

        let gen_first_bar = |p: &LeadSheet| -> Vec<ChordEvent> {
            let mut rng = Rng::from_seed(5);
            let out = generate(
                &params,
                &GenerateRequest {
                    melody: p,
                    piece_emotion: EmotionLabel::Positive,
                    bar_emotions: &[EmotionLabel::Positive, EmotionLabel::Negative],
                    decoding: Decoding::Argmax,
                },
                &mut rng,
            )
            .unwrap();
            out.bars[0].chords.to_vec()
        };
        assert_eq!(gen_first_bar(&piece), gen_first_bar(&altered));
    }

    #[test]
    fn suffix_encoder_sees_future_chords() {
        // recognition-side bar KL must react to later chords
        let params = toy_params(WiringVariant::LatentInput, 29);
        let piece = labeled_piece();
        let mut altered = piece.clone();
        altered.bars[1].chords = [chord(ChordType::Dim, 3), chord(ChordType::Aug, 15)];
        let (ga, la) = run_forward(&params, &piece, LatentMode::Mean, 4);
        let (gb, lb) = run_forward(&params, &altered, LatentMode::Mean, 4);
        assert_ne!(
            ga.scalar(la.per_bar_kl[0]),
            gb.scalar(lb.per_bar_kl[0]),
            "first-bar recognition ignored the suffix"
        );
    }

    #[test]
    fn generation_is_deterministic_and_masked() {
        for variant in ALL_VARIANTS {
            let params = toy_params(variant, 25);
            let piece = labeled_piece();
            let labels = [EmotionLabel::Neutral, EmotionLabel::Neutral];
            let request = GenerateRequest {
                melody: &piece,
                piece_emotion: EmotionLabel::Neutral,
                bar_emotions: &labels,
                decoding: Decoding::Sample { temperature: 1.0 },
            };
            let a = generate(&params, &request, &mut Rng::from_seed(9)).unwrap();
            let b = generate(&params, &request, &mut Rng::from_seed(9)).unwrap();
            assert_eq!(a, b);
            for bar in &a.bars {
                for c in &bar.chords {
                    assert_eq!(c.is_rest(), c.root().is_none());
                }
                assert_eq!(bar.emotion, Some(EmotionLabel::Neutral));
            }
            assert_eq!(a.emotion, Some(EmotionLabel::Neutral));
        }
    }

    #[test]
    fn generation_bar_count_checked() {
        let params = toy_params(WiringVariant::LatentInput, 26);
        let piece = labeled_piece();
        let err = generate(
            &params,
            &GenerateRequest {
                melody: &piece,
                piece_emotion: EmotionLabel::Neutral,
                bar_emotions: &[EmotionLabel::Neutral],
                decoding: Decoding::Argmax,
            },
            &mut Rng::from_seed(1),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::BarCountMismatch { .. }));
    }

    #[test]
    fn changing_piece_emotion_changes_prior() {
        let params = toy_params(WiringVariant::LatentInput, 27);
        let piece = labeled_piece();
        let prior_mean = |label: EmotionLabel| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params);
            let tokens = tokenize_piece(&piece);
            let enc = encode_melody(&mut g, &bound, &tokens.tokens);
            let emo = emotion_row(&mut g, &bound, label);
            let input = g.concat(&[emo, enc.summary]);
            let (mean, _) = gaussian_head(&mut g, &bound, params.layout().piece_prior, input);
            g.value(mean).to_vec()
        };
        assert_ne!(
            prior_mean(EmotionLabel::Negative),
            prior_mean(EmotionLabel::Positive)
        );
        assert_eq!(prior_mean(EmotionLabel::Positive).len(), 4);
    }

    /// Finite-difference check of the whole teacher-forced loss; sampling
    /// noise is removed by reseeding the rng identically per evaluation.
    pub(crate) fn full_loss_grad_check(
        variant: WiringVariant,
        step: f64,
    ) -> crate::diffmath::GradCheckReport {
        let params = toy_params(variant, 28);
        let config = params.config().clone();
        let piece = labeled_piece();
        let weights = [1.3, 0.9, 1.1, 1.0, 0.8, 1.2, 0.7];
        crate::diffmath::grad_check_5point(params.tensors(), step, |tensors, want| {
            let mut candidate = ModelParams::zeros(&config);
            for (dst, src) in candidate.tensors_mut().iter_mut().zip(tensors) {
                *dst = src.clone();
            }
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &candidate);
            let mut rng = Rng::from_seed(77);
            let loss = forward_teacher_forced(
                &mut g,
                &bound,
                &piece,
                &weights,
                LatentMode::Sample,
                &mut rng,
            )
            .unwrap();
            let kl_sum = g.add(loss.kl_piece, loss.kl_bars);
            let recon = g.add(loss.nll_type, loss.nll_root);
            let total = g.add(recon, kl_sum);
            let value = g.scalar(total);
            let grads = want.then(|| {
                g.backward(total);
                bound.collect_grads(&g)
            });
            (value, grads)
        })
        .unwrap()
    }

    #[test]
    #[ignore = "step-size scan; run explicitly when retuning"]
    fn scan_grad_check_steps() {
        for variant in ALL_VARIANTS {
            for step in [2e-3, 4e-3, 8e-3, 1.6e-2] {
                let report = full_loss_grad_check(variant, step);
                println!("variant {variant:?} step {step:.1e}: {report}");
            }
        }
    }

    #[test]
    fn teacher_forced_loss_passes_grad_check() {
        // the acceptance suite covers all three variants; checking one here
        // keeps the unit-test wall time reasonable
        let report = full_loss_grad_check(WiringVariant::LatentInput, 4e-3);
        assert!(report.max_rel_error < 1e-4, "{report}");
    }
}
