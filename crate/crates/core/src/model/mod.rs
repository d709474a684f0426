//! The LSTM-based hierarchical VAE: a piece-level latent variable conditions
//! the whole harmony, a chain of bar-level latent variables conditions each
//! bar, and emotion labels are embedded into both latent spaces. The decoder
//! generates two chords per bar autoregressively, attending over the melody
//! states of the current bar.

mod checkpoint;
mod forward;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, OptState};
pub use forward::{
    forward_teacher_forced, generate, Decoding, GenerateRequest, LatentMode, LossValues,
    ModelError, PieceLoss,
};
pub use net::BoundParams;

use crate::diffmath::{Rng, Tensor};
use crate::leadsheet::{CHORD_DIM, CHORD_TYPE_VOCAB, MELODY_DIM, ROOT_VOCAB};
use serde::{Deserialize, Serialize};

/// How the bar-level latent variable and the melody context vector reach the
/// decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum WiringVariant {
    /// Context vector joins the recurrent input; the bar latent is folded
    /// into the hidden state at each bar start.
    StateInjection = 1,
    /// Bar latent joins the recurrent input; the output heads read the
    /// hidden state concatenated with the context vector.
    LatentInput = 2,
    /// Both the bar latent and the context vector join the recurrent input.
    LatentAndContextInput = 3,
}

impl WiringVariant {
    pub fn index(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for WiringVariant {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(WiringVariant::StateInjection),
            2 => Ok(WiringVariant::LatentInput),
            3 => Ok(WiringVariant::LatentAndContextInput),
            other => Err(format!("unknown wiring variant {other}, expected 1..=3")),
        }
    }
}

impl From<WiringVariant> for u8 {
    fn from(v: WiringVariant) -> u8 {
        v as u8
    }
}

/// Model hyperparameters. Every parameter shape is a pure function of this
/// struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub latent_size: usize,
    pub layers: usize,
    pub emotion_embedding_size: usize,
    pub chord_embedding_size: usize,
    pub variant: WiringVariant,
    pub melody_dim: usize,
    pub chord_type_vocab: usize,
    pub root_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 256,
            latent_size: 128,
            layers: 2,
            emotion_embedding_size: 32,
            chord_embedding_size: 64,
            variant: WiringVariant::LatentInput,
            melody_dim: MELODY_DIM,
            chord_type_vocab: CHORD_TYPE_VOCAB,
            root_vocab: ROOT_VOCAB,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and smoke runs.
    pub fn toy(hidden_size: usize, latent_size: usize, variant: WiringVariant) -> Self {
        ModelConfig {
            hidden_size,
            latent_size,
            layers: 2,
            emotion_embedding_size: 8,
            chord_embedding_size: 16,
            variant,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, value) in [
            ("hidden_size", self.hidden_size),
            ("latent_size", self.latent_size),
            ("layers", self.layers),
            ("emotion_embedding_size", self.emotion_embedding_size),
            ("chord_embedding_size", self.chord_embedding_size),
        ] {
            if value == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.melody_dim != MELODY_DIM {
            return Err(format!(
                "melody_dim {} does not match vocabulary width {MELODY_DIM}",
                self.melody_dim
            ));
        }
        if self.chord_type_vocab != CHORD_TYPE_VOCAB {
            return Err(format!(
                "chord_type_vocab {} does not match vocabulary size {CHORD_TYPE_VOCAB}",
                self.chord_type_vocab
            ));
        }
        if self.root_vocab != ROOT_VOCAB {
            return Err(format!(
                "root_vocab {} does not match vocabulary size {ROOT_VOCAB}",
                self.root_vocab
            ));
        }
        Ok(())
    }

    /// Width of the melody-encoder state at each step (both directions).
    pub fn melody_state_size(&self) -> usize {
        2 * self.hidden_size
    }

    /// Decoder recurrent input width for the configured variant.
    pub fn decoder_input_size(&self) -> usize {
        let base = self.chord_embedding_size + self.emotion_embedding_size;
        match self.variant {
            WiringVariant::StateInjection => base + self.melody_state_size(),
            WiringVariant::LatentInput => base + self.latent_size,
            WiringVariant::LatentAndContextInput => {
                base + self.latent_size + self.melody_state_size()
            }
        }
    }

    /// Input width of the chord type / root heads.
    pub fn head_input_size(&self) -> usize {
        match self.variant {
            WiringVariant::LatentInput => self.hidden_size + self.melody_state_size(),
            _ => self.hidden_size,
        }
    }
}

/// Index of one tensor inside [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmLayerIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub fc1: AffineIds,
    pub fc2: AffineIds,
}

/// Typed indices of every weight group.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub melody_fw: Vec<LstmLayerIds>,
    pub melody_bw: Vec<LstmLayerIds>,
    pub chord_encoder: Vec<LstmLayerIds>,
    pub reverse_chord_encoder: Vec<LstmLayerIds>,
    pub piece_prior: MlpIds,
    pub piece_recognition: MlpIds,
    pub bar_prior: MlpIds,
    pub bar_recognition: MlpIds,
    pub decoder: Vec<LstmLayerIds>,
    pub latent_to_hidden: Vec<AffineIds>,
    /// Present only for the state-injection variant.
    pub bar_state_injection: Option<Vec<AffineIds>>,
    pub type_head: AffineIds,
    pub root_head: AffineIds,
    pub emotion_embedding: ParamId,
    pub chord_embedding: AffineIds,
    pub sos_chord: ParamId,
    pub attention_query: AffineIds,
}

enum Init {
    Zeros,
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    LstmBias,
}

struct ParamBuilder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: Option<&'r mut Rng>,
}

impl<'r> ParamBuilder<'r> {
    fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let tensor = match (&mut self.rng, init) {
            (None, _) | (_, Init::Zeros) => Tensor::zeros(shape),
            (Some(rng), Init::Xavier { fan_in, fan_out }) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, bound, rng)
            }
            (Some(rng), Init::Normal { std }) => Tensor::normal(shape, std, rng),
            (Some(_), Init::LstmBias) => {
                // forget-gate bias starts at 1
                let hidden = shape[0] / 4;
                let mut t = Tensor::zeros(shape);
                for i in hidden..2 * hidden {
                    t.data_mut()[i] = 1.0;
                }
                t
            }
        };
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    fn affine(&mut self, prefix: &str, out: usize, inp: usize) -> AffineIds {
        AffineIds {
            w: self.tensor(
                format!("{prefix}.w"),
                &[out, inp],
                Init::Xavier {
                    fan_in: inp,
                    fan_out: out,
                },
            ),
            b: self.tensor(format!("{prefix}.b"), &[out], Init::Zeros),
        }
    }

    /// Registers a stack of LSTM layers; `input_widths[l]` is layer `l`'s
    /// input size.
    fn lstm_stack(
        &mut self,
        prefix: &str,
        input_widths: &[usize],
        hidden: usize,
    ) -> Vec<LstmLayerIds> {
        input_widths
            .iter()
            .enumerate()
            .map(|(l, &inp)| LstmLayerIds {
                w: self.tensor(
                    format!("{prefix}.l{l}.w"),
                    &[4 * hidden, inp + hidden],
                    Init::Xavier {
                        fan_in: inp + hidden,
                        fan_out: hidden,
                    },
                ),
                b: self.tensor(format!("{prefix}.l{l}.b"), &[4 * hidden], Init::LstmBias),
            })
            .collect()
    }

    fn mlp(&mut self, prefix: &str, inp: usize, hidden: usize, out: usize) -> MlpIds {
        MlpIds {
            fc1: self.affine(&format!("{prefix}.fc1"), hidden, inp),
            fc2: self.affine(&format!("{prefix}.fc2"), out, hidden),
        }
    }
}

/// All learnable weights, stored in a fixed registration order that also
/// defines the checkpoint manifest order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Random initialization.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        Self::build(config, Some(rng))
    }

    /// Zero-filled parameters with the layout of `config`; used as the
    /// loading target for checkpoints.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self::build(config, None)
    }

    fn build(config: &ModelConfig, rng: Option<&mut Rng>) -> Self {
        config.validate().expect("invalid model config");
        let hidden = config.hidden_size;
        let latent = config.latent_size;
        let emo = config.emotion_embedding_size;
        let chord_emb = config.chord_embedding_size;
        let melody_state = config.melody_state_size();

        let mut b = ParamBuilder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };

        // upper bidirectional layers read both directions of the layer below
        let mut melody_widths = vec![config.melody_dim];
        melody_widths.extend(std::iter::repeat(melody_state).take(config.layers - 1));
        let melody_fw = b.lstm_stack("melody_encoder.fw", &melody_widths, hidden);
        let melody_bw = b.lstm_stack("melody_encoder.bw", &melody_widths, hidden);

        let mut chord_widths = vec![chord_emb];
        chord_widths.extend(std::iter::repeat(hidden).take(config.layers - 1));
        let chord_encoder = b.lstm_stack("chord_encoder", &chord_widths, hidden);
        let reverse_chord_encoder = b.lstm_stack("reverse_chord_encoder", &chord_widths, hidden);
        let piece_prior = b.mlp("piece_prior", emo + melody_state, hidden, 2 * latent);
        let piece_recognition = b.mlp(
            "piece_recognition",
            emo + melody_state + hidden,
            hidden,
            2 * latent,
        );
        let bar_prior = b.mlp("bar_prior", hidden + emo, hidden, 2 * latent);
        let bar_recognition = b.mlp("bar_recognition", hidden + hidden + emo, hidden, 2 * latent);
        let mut decoder_widths = vec![config.decoder_input_size()];
        decoder_widths.extend(std::iter::repeat(hidden).take(config.layers - 1));
        let decoder = b.lstm_stack("decoder", &decoder_widths, hidden);
        let latent_to_hidden = (0..config.layers)
            .map(|l| b.affine(&format!("latent_to_hidden.l{l}"), hidden, latent))
            .collect();
        let bar_state_injection = (config.variant == WiringVariant::StateInjection).then(|| {
            (0..config.layers)
                .map(|l| b.affine(&format!("bar_state_injection.l{l}"), hidden, hidden + latent))
                .collect()
        });
        let type_head = b.affine("type_head", config.chord_type_vocab, config.head_input_size());
        let root_head = b.affine("root_head", config.root_vocab, config.head_input_size());
        let emotion_embedding = b.tensor(
            "emotion_embedding".to_string(),
            &[3, emo],
            Init::Normal { std: 0.5 },
        );
        let chord_embedding = b.affine("chord_embedding", chord_emb, CHORD_DIM);
        let sos_chord = b.tensor(
            "sos_chord".to_string(),
            &[chord_emb],
            Init::Normal { std: 0.1 },
        );
        let attention_query = b.affine("attention_query", melody_state, hidden);

        ModelParams {
            config: config.clone(),
            layout: ParamLayout {
                melody_fw,
                melody_bw,
                chord_encoder,
                reverse_chord_encoder,
                piece_prior,
                piece_recognition,
                bar_prior,
                bar_recognition,
                decoder,
                latent_to_hidden,
                bar_state_injection,
                type_head,
                root_head,
                emotion_embedding,
                chord_embedding,
                sos_chord,
                attention_query,
            },
            names: b.names,
            tensors: b.tensors,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Overwrites the recognition networks so they compute exactly what the
    /// prior networks compute, ignoring their extra inputs. Afterwards every
    /// KL term of a forward pass is exactly zero. Diagnostic surgery for
    /// validating the ELBO bookkeeping.
    pub fn tie_recognition_to_prior(&mut self) {
        let hidden = self.config.hidden_size;
        let emo = self.config.emotion_embedding_size;
        let melody_state = self.config.melody_state_size();

        // piece level: recognition input [emotion | melody | chord]; the
        // prior input [emotion | melody] is a prefix
        let shared = emo + melody_state;
        self.copy_mlp_with_column_map(
            self.layout.piece_prior,
            self.layout.piece_recognition,
            &(0..shared).map(|j| (j, j)).collect::<Vec<_>>(),
        );

        // bar level: recognition input [h | suffix | emotion] maps from
        // prior input [h | emotion] around the suffix block
        let mut map: Vec<(usize, usize)> = (0..hidden).map(|j| (j, j)).collect();
        map.extend((0..emo).map(|j| (hidden + j, 2 * hidden + j)));
        self.copy_mlp_with_column_map(self.layout.bar_prior, self.layout.bar_recognition, &map);
    }

    /// Copies `src` MLP onto `dst`, rewiring fc1 columns through
    /// `(src_col, dst_col)` pairs and zeroing unmapped destination columns.
    fn copy_mlp_with_column_map(&mut self, src: MlpIds, dst: MlpIds, map: &[(usize, usize)]) {
        let src_w = self.tensor(src.fc1.w).clone();
        let dst_w = self.tensor_mut(dst.fc1.w);
        let src_cols = src_w.shape()[1];
        let dst_cols = dst_w.shape()[1];
        let rows = dst_w.shape()[0];
        dst_w.fill(0.0);
        for r in 0..rows {
            for &(sc, dc) in map {
                dst_w.data_mut()[r * dst_cols + dc] = src_w.data()[r * src_cols + sc];
            }
        }
        let src_b = self.tensor(src.fc1.b).clone();
        *self.tensor_mut(dst.fc1.b) = src_b;
        let src_w2 = self.tensor(src.fc2.w).clone();
        *self.tensor_mut(dst.fc2.w) = src_w2;
        let src_b2 = self.tensor(src.fc2.b).clone();
        *self.tensor_mut(dst.fc2.b) = src_b2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_is_deterministic() {
        let config = ModelConfig::toy(8, 4, WiringVariant::LatentInput);
        let a = ModelParams::init(&config, &mut Rng::from_seed(1));
        let b = ModelParams::init(&config, &mut Rng::from_seed(2));
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.names(), b.names());
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.shape(), y.shape());
        }
    }

    #[test]
    fn variant_changes_decoder_width() {
        let base = |v| ModelConfig::toy(8, 4, v);
        let c1 = base(WiringVariant::StateInjection);
        let c2 = base(WiringVariant::LatentInput);
        let c3 = base(WiringVariant::LatentAndContextInput);
        // chord_emb + emo = 24; melody state = 16; latent = 4
        assert_eq!(c1.decoder_input_size(), 24 + 16);
        assert_eq!(c2.decoder_input_size(), 24 + 4);
        assert_eq!(c3.decoder_input_size(), 24 + 4 + 16);
        assert_eq!(c1.head_input_size(), 8);
        assert_eq!(c2.head_input_size(), 8 + 16);
        assert_eq!(c3.head_input_size(), 8);
        // only variant 1 carries injection weights
        assert!(ModelParams::zeros(&c1).layout().bar_state_injection.is_some());
        assert!(ModelParams::zeros(&c2).layout().bar_state_injection.is_none());
    }

    #[test]
    fn identical_seeds_identical_params() {
        let config = ModelConfig::toy(8, 4, WiringVariant::LatentInput);
        let a = ModelParams::init(&config, &mut Rng::from_seed(9));
        let b = ModelParams::init(&config, &mut Rng::from_seed(9));
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn emotion_embedding_rows_distinct() {
        let config = ModelConfig::toy(8, 4, WiringVariant::LatentInput);
        let params = ModelParams::init(&config, &mut Rng::from_seed(3));
        let table = params.tensor(params.layout().emotion_embedding);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(table.row(i), table.row(j));
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let mut config = ModelConfig::default();
        config.latent_size = 0;
        assert!(config.validate().is_err());
        let mut config = ModelConfig::default();
        config.melody_dim = 100;
        assert!(config.validate().is_err());
    }
}
