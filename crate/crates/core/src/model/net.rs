//! Network building blocks on top of the autodiff graph: encoder stacks,
//! Gaussian MLP heads, melody attention and the decoder step.

use super::{AffineIds, LstmLayerIds, MlpIds, ModelParams, ParamId, WiringVariant};
use crate::diffmath::{lstm_cell, DiffValue, Graph, LstmCell, Tensor};
use crate::leadsheet::{encode_melody_event, MelodyEvent};

/// Logvar outputs are clamped to this range before any exp.
pub(crate) const LOGVAR_CLAMP: (f64, f64) = (-8.0, 8.0);

/// Model parameters materialized as graph leaves, in registration order.
pub struct BoundParams<'p> {
    params: &'p ModelParams,
    ids: Vec<DiffValue>,
}

impl<'p> BoundParams<'p> {
    pub fn bind(graph: &mut Graph, params: &'p ModelParams) -> Self {
        let ids = params.tensors().iter().map(|t| graph.leaf(t)).collect();
        BoundParams { params, ids }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn get(&self, id: ParamId) -> DiffValue {
        self.ids[id.0]
    }

    pub(crate) fn affine(&self, graph: &mut Graph, ids: AffineIds, x: DiffValue) -> DiffValue {
        let w = self.get(ids.w);
        let b = self.get(ids.b);
        graph.affine(x, w, b)
    }

    pub(crate) fn lstm(&self, ids: LstmLayerIds) -> LstmCell {
        LstmCell {
            weight: self.get(ids.w),
            bias: self.get(ids.b),
        }
    }

    /// Gradients of every parameter after a backward pass, in registration
    /// order.
    pub fn collect_grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.ids
            .iter()
            .zip(self.params.tensors())
            .map(|(&id, t)| Tensor::from_vec(t.shape(), graph.grad(id).to_vec()))
            .collect()
    }
}

pub(crate) struct LayerRun {
    /// Top-layer hidden states aligned to input positions.
    pub states: Vec<DiffValue>,
    /// Hidden state after the last processed position.
    pub final_state: DiffValue,
}

/// Runs one LSTM layer over a sequence; `reverse` processes right-to-left
/// while keeping `states` aligned to input positions.
fn run_layer(
    graph: &mut Graph,
    bound: &BoundParams,
    layer: LstmLayerIds,
    inputs: &[DiffValue],
    reverse: bool,
    hidden: usize,
) -> LayerRun {
    let cell = bound.lstm(layer);
    let mut h = graph.zeros(hidden);
    let mut c = graph.zeros(hidden);
    let mut states = Vec::with_capacity(inputs.len());
    let order: Box<dyn Iterator<Item = &DiffValue>> = if reverse {
        Box::new(inputs.iter().rev())
    } else {
        Box::new(inputs.iter())
    };
    for &x in order {
        let (nh, nc) = lstm_cell(graph, x, h, c, cell);
        h = nh;
        c = nc;
        states.push(nh);
    }
    if reverse {
        states.reverse();
    }
    LayerRun {
        states,
        final_state: h,
    }
}

/// Runs a unidirectional stack; upper layers consume the states of the layer
/// below, all in the same processing direction.
pub(crate) fn run_stack(
    graph: &mut Graph,
    bound: &BoundParams,
    layers: &[LstmLayerIds],
    inputs: &[DiffValue],
    reverse: bool,
) -> LayerRun {
    let hidden = bound.params.config().hidden_size;
    let mut current: Vec<DiffValue> = inputs.to_vec();
    let mut last = None;
    for layer in layers {
        let run = run_layer(graph, bound, *layer, &current, reverse, hidden);
        current = run.states.clone();
        last = Some(run);
    }
    last.expect("run_stack: no layers")
}

pub(crate) struct MelodyEncoding {
    /// Per-token states, both directions concatenated.
    pub states: Vec<DiffValue>,
    /// Final forward and final backward state, concatenated.
    pub summary: DiffValue,
}

/// Bidirectional encoding of the melody token sequence. Each layer reads the
/// concatenated directions of the layer below.
pub(crate) fn encode_melody(
    graph: &mut Graph,
    bound: &BoundParams,
    tokens: &[MelodyEvent],
) -> MelodyEncoding {
    assert!(!tokens.is_empty(), "encode_melody: empty sequence");
    let hidden = bound.params.config().hidden_size;
    let layout = bound.params.layout();
    let mut current: Vec<DiffValue> = tokens
        .iter()
        .map(|&e| graph.constant(encode_melody_event(e)))
        .collect();
    let mut summary = None;
    for (fw, bw) in layout.melody_fw.iter().zip(&layout.melody_bw) {
        let fw_run = run_layer(graph, bound, *fw, &current, false, hidden);
        let bw_run = run_layer(graph, bound, *bw, &current, true, hidden);
        current = fw_run
            .states
            .iter()
            .zip(&bw_run.states)
            .map(|(&f, &b)| graph.concat(&[f, b]))
            .collect();
        summary = Some(graph.concat(&[fw_run.final_state, bw_run.final_state]));
    }
    MelodyEncoding {
        states: current,
        summary: summary.expect("encode_melody: no layers"),
    }
}

/// Two-layer tanh MLP producing a diagonal Gaussian `(mean, logvar)`; the
/// logvar is clamped.
pub(crate) fn gaussian_head(
    graph: &mut Graph,
    bound: &BoundParams,
    mlp: MlpIds,
    input: DiffValue,
) -> (DiffValue, DiffValue) {
    let latent = bound.params.config().latent_size;
    let pre = bound.affine(graph, mlp.fc1, input);
    let hid = graph.tanh(pre);
    let raw = bound.affine(graph, mlp.fc2, hid);
    let mean = graph.slice(raw, 0, latent);
    let logvar_raw = graph.slice(raw, latent, latent);
    let logvar = graph.clamp(logvar_raw, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    (mean, logvar)
}

/// Attention over the melody states of the current bar: softmax of inner
/// products between the projected query and each state, then the weighted sum
/// of the states.
pub(crate) fn attention_context(
    graph: &mut Graph,
    bound: &BoundParams,
    query: DiffValue,
    melody_states: &[DiffValue],
    span: (usize, usize),
) -> (DiffValue, DiffValue) {
    let (start, end) = span;
    assert!(
        start <= end && end < melody_states.len(),
        "attention_context: span ({start}, {end}) out of {} states",
        melody_states.len()
    );
    let q = bound.affine(graph, bound.params.layout().attention_query, query);
    let scores: Vec<DiffValue> = (start..=end)
        .map(|j| graph.inner_product(q, melody_states[j]))
        .collect();
    let stacked = graph.concat(&scores);
    let weights = graph.softmax(stacked);
    let context = graph.weighted_sum(weights, &melody_states[start..=end]);
    (context, weights)
}

/// Recurrent decoder state, one `(hidden, cell)` pair per layer.
#[derive(Clone)]
pub(crate) struct DecoderState {
    pub layers: Vec<(DiffValue, DiffValue)>,
}

impl DecoderState {
    pub fn top_hidden(&self) -> DiffValue {
        self.layers.last().expect("empty decoder state").0
    }
}

/// Initial decoder state: each layer's hidden state is a tanh projection of
/// the piece latent; cell states start at zero.
pub(crate) fn init_decoder_state(
    graph: &mut Graph,
    bound: &BoundParams,
    piece_latent: DiffValue,
) -> DecoderState {
    let hidden = bound.params.config().hidden_size;
    let layers = bound
        .params
        .layout()
        .latent_to_hidden
        .iter()
        .map(|&proj| {
            let pre = bound.affine(graph, proj, piece_latent);
            let h = graph.tanh(pre);
            let c = graph.zeros(hidden);
            (h, c)
        })
        .collect();
    DecoderState { layers }
}

/// State-injection wiring: folds the bar latent into every layer's hidden
/// state at the start of a bar.
pub(crate) fn inject_bar_latent(
    graph: &mut Graph,
    bound: &BoundParams,
    state: &DecoderState,
    bar_latent: DiffValue,
) -> DecoderState {
    let injection = bound
        .params
        .layout()
        .bar_state_injection
        .as_ref()
        .expect("inject_bar_latent: wiring variant has no injection weights");
    let layers = state
        .layers
        .iter()
        .zip(injection)
        .map(|(&(h, c), &proj)| {
            let joint = graph.concat(&[h, bar_latent]);
            let pre = bound.affine(graph, proj, joint);
            (graph.tanh(pre), c)
        })
        .collect();
    DecoderState { layers }
}

pub(crate) struct StepOutput {
    pub type_logits: DiffValue,
    pub root_logits: DiffValue,
    pub state: DecoderState,
}

/// One decoder step. The wiring variant decides whether the bar latent and
/// the melody context enter the recurrent input or the output heads.
pub(crate) fn decode_step(
    graph: &mut Graph,
    bound: &BoundParams,
    prev_chord: DiffValue,
    bar_emotion: DiffValue,
    bar_latent: DiffValue,
    context: DiffValue,
    state: &DecoderState,
) -> StepOutput {
    let layout = bound.params.layout();
    let variant = bound.params.config().variant;
    let input = match variant {
        WiringVariant::StateInjection => graph.concat(&[prev_chord, bar_emotion, context]),
        WiringVariant::LatentInput => graph.concat(&[prev_chord, bar_emotion, bar_latent]),
        WiringVariant::LatentAndContextInput => {
            graph.concat(&[prev_chord, bar_emotion, bar_latent, context])
        }
    };
    let mut x = input;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (layer_ids, &(h, c)) in layout.decoder.iter().zip(&state.layers) {
        let cell = bound.lstm(*layer_ids);
        let (nh, nc) = lstm_cell(graph, x, h, c, cell);
        layers.push((nh, nc));
        x = nh;
    }
    let new_state = DecoderState { layers };
    let head_in = match variant {
        WiringVariant::LatentInput => {
            let top = new_state.top_hidden();
            graph.concat(&[top, context])
        }
        _ => new_state.top_hidden(),
    };
    let type_logits = bound.affine(graph, layout.type_head, head_in);
    let root_logits = bound.affine(graph, layout.root_head, head_in);
    StepOutput {
        type_logits,
        root_logits,
        state: new_state,
    }
}
