//! Rule-based emotion labeling of chords at bar and piece level, plus
//! emotional-control accuracy.
//!
//! The chord-valence table below is the single source of truth for both
//! dataset labeling and control-accuracy measurement, so training and
//! evaluation stay self-consistent. Labeling depends on chord types only;
//! transposing every root leaves all labels unchanged.

use crate::leadsheet::{Bar, ChordEvent, ChordType, EmotionLabel, LeadSheet};
use std::fmt;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ControlAccuracyError {
    #[error("piece count mismatch: {given} given labels vs {generated} generated pieces")]
    PieceCount { given: usize, generated: usize },
    #[error("bar count mismatch in piece {index}: {given} given labels vs {generated} bars")]
    BarCount {
        index: usize,
        given: usize,
        generated: usize,
    },
}

/// Chord valence: maj is positive; min, dim and aug are negative; sus4, dom7
/// and REST are neutral.
pub fn chord_valence(chord: ChordEvent) -> i32 {
    match chord.chord_type() {
        ChordType::Maj => 1,
        ChordType::Sus4 | ChordType::Dom7 | ChordType::Rest => 0,
        ChordType::Min | ChordType::Dim | ChordType::Aug => -1,
    }
}

/// Bar emotion from the sign of the summed chord valences.
pub fn bar_emotion(bar: &Bar) -> EmotionLabel {
    let sum: i32 = bar.chords.iter().map(|&c| chord_valence(c)).sum();
    match sum.signum() {
        1 => EmotionLabel::Positive,
        -1 => EmotionLabel::Negative,
        _ => EmotionLabel::Neutral,
    }
}

/// Piece emotion: majority vote over bar labels, any tie goes to neutral.
pub fn piece_emotion(bar_labels: &[EmotionLabel]) -> EmotionLabel {
    let mut counts = [0usize; 3];
    for label in bar_labels {
        counts[label.index()] += 1;
    }
    let best = *counts.iter().max().unwrap_or(&0);
    let winners: Vec<usize> = (0..3).filter(|&i| counts[i] == best).collect();
    if winners.len() == 1 {
        EmotionLabel::ALL[winners[0]]
    } else {
        EmotionLabel::Neutral
    }
}

/// Relabels a piece's chords from scratch; returns (piece label, bar labels).
pub fn relabel(piece: &LeadSheet) -> (EmotionLabel, Vec<EmotionLabel>) {
    let bar_labels: Vec<EmotionLabel> = piece.bars.iter().map(bar_emotion).collect();
    (piece_emotion(&bar_labels), bar_labels)
}

/// Target emotions a generation run was asked to convey.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceEmotions {
    pub piece: EmotionLabel,
    pub bars: Vec<EmotionLabel>,
}

/// Fraction of generated pieces/bars whose relabeled emotion matches the
/// given one.
pub fn control_accuracy(
    given: &[PieceEmotions],
    generated: &[LeadSheet],
) -> Result<(f64, f64), ControlAccuracyError> {
    if given.len() != generated.len() {
        return Err(ControlAccuracyError::PieceCount {
            given: given.len(),
            generated: generated.len(),
        });
    }
    let mut piece_hits = 0usize;
    let mut bar_hits = 0usize;
    let mut bar_total = 0usize;
    for (index, (want, piece)) in given.iter().zip(generated).enumerate() {
        if want.bars.len() != piece.bars.len() {
            return Err(ControlAccuracyError::BarCount {
                index,
                given: want.bars.len(),
                generated: piece.bars.len(),
            });
        }
        let (piece_label, bar_labels) = relabel(piece);
        if piece_label == want.piece {
            piece_hits += 1;
        }
        bar_total += bar_labels.len();
        bar_hits += bar_labels
            .iter()
            .zip(&want.bars)
            .filter(|(got, want)| got == want)
            .count();
    }
    let piece_acc = if given.is_empty() {
        1.0
    } else {
        piece_hits as f64 / given.len() as f64
    };
    let bar_acc = if bar_total == 0 {
        1.0
    } else {
        bar_hits as f64 / bar_total as f64
    };
    Ok((piece_acc, bar_acc))
}

/// Piece-level label counts of a labeled corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmotionDistribution {
    pub counts: [usize; 3],
}

impl EmotionDistribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn percentage(&self, label: EmotionLabel) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            100.0 * self.counts[label.index()] as f64 / total as f64
        }
    }
}

impl fmt::Display for EmotionDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>9}", "emotion", "pieces", "percent")?;
        for label in EmotionLabel::ALL {
            writeln!(
                f,
                "{:<10} {:>8} {:>8.2}%",
                format!("{label:?}").to_lowercase(),
                self.counts[label.index()],
                self.percentage(label)
            )?;
        }
        Ok(())
    }
}

/// Fills every missing bar and piece emotion in place; with `overwrite`
/// existing labels are recomputed too. Returns the piece-level distribution
/// after labeling.
pub fn label_corpus(pieces: &mut [LeadSheet], overwrite: bool) -> EmotionDistribution {
    let mut dist = EmotionDistribution::default();
    for piece in pieces.iter_mut() {
        for bar in piece.bars.iter_mut() {
            if overwrite || bar.emotion.is_none() {
                bar.emotion = Some(bar_emotion(bar));
            }
        }
        if overwrite || piece.emotion.is_none() {
            let bar_labels: Vec<EmotionLabel> =
                piece.bars.iter().map(|b| b.emotion.unwrap()).collect();
            piece.emotion = Some(piece_emotion(&bar_labels));
        }
        dist.counts[piece.emotion.unwrap().index()] += 1;
    }
    dist
}
