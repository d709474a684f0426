//! Lead-sheet data model, event-token encodings and corpus file I/O.
//!
//! A lead sheet is a sequence of bars, each carrying melody notes and exactly
//! two chords. Melody events encode to 99-dim one-hot vectors laid out as
//! `[bar | pitch 0..=60 | duration 0..=36]`; chords encode to 48-dim multi-hot
//! vectors laid out as `[type 0..=6 | root 0..=40]` with exactly two ones.
//!
//! The corpus file format is UTF-8 JSON lines, one piece per line, with stable
//! field ordering on write so that round trips are byte-comparable.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Number of pitch tokens: 60 chromatic pitches plus REST.
pub const PITCH_VOCAB: usize = 61;
/// Index of the REST pitch token.
pub const PITCH_REST: u8 = 60;
/// Number of duration tokens; index `d` stands for `d + 1` ticks.
pub const DURATION_VOCAB: usize = 37;
/// Melody one-hot width: bar token + pitches + durations.
pub const MELODY_DIM: usize = 1 + PITCH_VOCAB + DURATION_VOCAB;
/// Number of chord-type tokens, REST included.
pub const CHORD_TYPE_VOCAB: usize = 7;
/// Number of root-tone tokens, NONE included.
pub const ROOT_VOCAB: usize = 41;
/// Index of the NONE root token.
pub const ROOT_NONE: u8 = 40;
/// Chord multi-hot width.
pub const CHORD_DIM: usize = CHORD_TYPE_VOCAB + ROOT_VOCAB;
/// Ticks per quarter note.
pub const TICKS_PER_QUARTER: u32 = 12;
/// Default bar capacity in ticks (one 4/4 bar).
pub const DEFAULT_BAR_TICKS: u32 = 4 * TICKS_PER_QUARTER;
/// Lowest MIDI pitch of the chromatic melody range (index 0).
pub const MIDI_BASE: u8 = 36;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeadsheetError {
    #[error("{field} index {value} out of range 0..={max}")]
    OutOfRange {
        field: &'static str,
        value: usize,
        max: usize,
    },
    #[error("chord type REST requires root NONE and vice versa (type {chord_type:?}, root {root})")]
    RestPairing { chord_type: ChordType, root: u8 },
    #[error("bar must contain exactly 2 chords (got {0})")]
    BadChordCount(usize),
    #[error("piece must contain at least one bar")]
    EmptyPiece,
    #[error("emotion label {0} out of range 0..=2")]
    BadEmotion(u8),
    #[error("unknown chord type \"{0}\"")]
    UnknownChordType(String),
}

/// Melody pitch index: 0..=59 chromatic (MIDI 36..=95), 60 = REST.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Pitch(u8);

impl Pitch {
    pub const REST: Pitch = Pitch(PITCH_REST);

    pub fn new(index: u8) -> Result<Self, LeadsheetError> {
        if index as usize >= PITCH_VOCAB {
            return Err(LeadsheetError::OutOfRange {
                field: "pitch",
                value: index as usize,
                max: PITCH_VOCAB - 1,
            });
        }
        Ok(Pitch(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_rest(self) -> bool {
        self.0 == PITCH_REST
    }

    /// Pitch class 0..=11; MIDI 36 is a C, so the class is the index mod 12.
    pub fn pitch_class(self) -> Option<u8> {
        if self.is_rest() {
            None
        } else {
            Some(self.0 % 12)
        }
    }

    pub fn midi(self) -> Option<u8> {
        if self.is_rest() {
            None
        } else {
            Some(MIDI_BASE + self.0)
        }
    }
}

/// Duration index: 0..=36, standing for 1..=37 ticks at 12 ticks per quarter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Duration(u8);

impl Duration {
    pub fn new(index: u8) -> Result<Self, LeadsheetError> {
        if index as usize >= DURATION_VOCAB {
            return Err(LeadsheetError::OutOfRange {
                field: "duration",
                value: index as usize,
                max: DURATION_VOCAB - 1,
            });
        }
        Ok(Duration(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn ticks(self) -> u32 {
        self.0 as u32 + 1
    }
}

/// One melody note: a (pitch, duration) token pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Note {
    pub pitch: Pitch,
    pub dur: Duration,
}

/// The seven chord-type tokens, REST included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordType {
    Maj,
    Min,
    Dim,
    Aug,
    Sus4,
    Dom7,
    Rest,
}

pub const ALL_CHORD_TYPES: [ChordType; CHORD_TYPE_VOCAB] = [
    ChordType::Maj,
    ChordType::Min,
    ChordType::Dim,
    ChordType::Aug,
    ChordType::Sus4,
    ChordType::Dom7,
    ChordType::Rest,
];

impl ChordType {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self, LeadsheetError> {
        ALL_CHORD_TYPES
            .get(index)
            .copied()
            .ok_or(LeadsheetError::OutOfRange {
                field: "chord type",
                value: index,
                max: CHORD_TYPE_VOCAB - 1,
            })
    }

    /// Chord-tone intervals in semitones above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            ChordType::Maj => &[0, 4, 7],
            ChordType::Min => &[0, 3, 7],
            ChordType::Dim => &[0, 3, 6],
            ChordType::Aug => &[0, 4, 8],
            ChordType::Sus4 => &[0, 5, 7],
            ChordType::Dom7 => &[0, 4, 7, 10],
            ChordType::Rest => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChordType::Maj => "maj",
            ChordType::Min => "min",
            ChordType::Dim => "dim",
            ChordType::Aug => "aug",
            ChordType::Sus4 => "sus4",
            ChordType::Dom7 => "dom7",
            ChordType::Rest => "rest",
        }
    }
}

impl fmt::Display for ChordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Root-tone index: 0..=39 are pitched roots (class = index mod 12), 40 = NONE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Root(u8);

impl Root {
    pub const NONE: Root = Root(ROOT_NONE);

    pub fn new(index: u8) -> Result<Self, LeadsheetError> {
        if index as usize >= ROOT_VOCAB {
            return Err(LeadsheetError::OutOfRange {
                field: "root",
                value: index as usize,
                max: ROOT_VOCAB - 1,
            });
        }
        Ok(Root(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn is_none(self) -> bool {
        self.0 == ROOT_NONE
    }

    pub fn pitch_class(self) -> Option<u8> {
        if self.is_none() {
            None
        } else {
            Some(self.0 % 12)
        }
    }
}

/// A chord super token: chord type plus root tone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChordEvent {
    chord_type: ChordType,
    root: Root,
}

impl ChordEvent {
    pub const REST: ChordEvent = ChordEvent {
        chord_type: ChordType::Rest,
        root: Root::NONE,
    };

    /// REST type pairs with NONE root and nothing else.
    pub fn new(chord_type: ChordType, root: Root) -> Result<Self, LeadsheetError> {
        if (chord_type == ChordType::Rest) != root.is_none() {
            return Err(LeadsheetError::RestPairing {
                chord_type,
                root: root.index(),
            });
        }
        Ok(ChordEvent { chord_type, root })
    }

    pub fn chord_type(self) -> ChordType {
        self.chord_type
    }

    pub fn root(self) -> Root {
        self.root
    }

    pub fn is_rest(self) -> bool {
        self.chord_type == ChordType::Rest
    }

    /// Pitch classes sounded by this chord; empty for REST.
    pub fn pitch_classes(self) -> Vec<u8> {
        match self.root.pitch_class() {
            Some(root_class) => self
                .chord_type
                .intervals()
                .iter()
                .map(|iv| (root_class + iv) % 12)
                .collect(),
            None => Vec::new(),
        }
    }
}

impl fmt::Display for ChordEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_rest() {
            write!(f, "rest")
        } else {
            write!(f, "{}:{}", self.root.index(), self.chord_type)
        }
    }
}

/// Three-way emotion label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum EmotionLabel {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 3] = [
        EmotionLabel::Negative,
        EmotionLabel::Neutral,
        EmotionLabel::Positive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for EmotionLabel {
    type Error = LeadsheetError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(EmotionLabel::Negative),
            1 => Ok(EmotionLabel::Neutral),
            2 => Ok(EmotionLabel::Positive),
            other => Err(LeadsheetError::BadEmotion(other)),
        }
    }
}

impl From<EmotionLabel> for u8 {
    fn from(label: EmotionLabel) -> u8 {
        label as u8
    }
}

/// One bar: melody notes, exactly two chords, optional emotion label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub emotion: Option<EmotionLabel>,
    pub melody: Vec<Note>,
    pub chords: [ChordEvent; 2],
}

impl Bar {
    pub fn melody_ticks(&self) -> u32 {
        self.melody.iter().map(|n| n.dur.ticks()).sum()
    }
}

/// A piece: id, optional piece-level emotion, ordered nonempty bars.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadSheet {
    pub id: String,
    pub emotion: Option<EmotionLabel>,
    pub bars: Vec<Bar>,
}

impl LeadSheet {
    pub fn chord_count(&self) -> usize {
        self.bars.len() * 2
    }

    pub fn note_count(&self) -> usize {
        self.bars.iter().map(|b| b.melody.len()).sum()
    }

    pub fn chords(&self) -> impl Iterator<Item = ChordEvent> + '_ {
        self.bars.iter().flat_map(|b| b.chords.iter().copied())
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.emotion.is_some() && self.bars.iter().all(|b| b.emotion.is_some())
    }
}

/// A single melody token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MelodyEvent {
    Bar,
    Pitch(Pitch),
    Duration(Duration),
}

/// One-hot encoding of a melody token, layout `[bar | pitch | duration]`.
pub fn encode_melody_event(event: MelodyEvent) -> Vec<f64> {
    let mut v = vec![0.0; MELODY_DIM];
    v[melody_event_slot(event)] = 1.0;
    v
}

/// Slot of a melody token in the one-hot layout.
pub fn melody_event_slot(event: MelodyEvent) -> usize {
    match event {
        MelodyEvent::Bar => 0,
        MelodyEvent::Pitch(p) => 1 + p.index() as usize,
        MelodyEvent::Duration(d) => 1 + PITCH_VOCAB + d.index() as usize,
    }
}

/// Inverse of [`melody_event_slot`].
pub fn melody_event_from_slot(slot: usize) -> Result<MelodyEvent, LeadsheetError> {
    if slot == 0 {
        Ok(MelodyEvent::Bar)
    } else if slot < 1 + PITCH_VOCAB {
        Ok(MelodyEvent::Pitch(Pitch::new((slot - 1) as u8)?))
    } else if slot < MELODY_DIM {
        Ok(MelodyEvent::Duration(Duration::new(
            (slot - 1 - PITCH_VOCAB) as u8,
        )?))
    } else {
        Err(LeadsheetError::OutOfRange {
            field: "melody slot",
            value: slot,
            max: MELODY_DIM - 1,
        })
    }
}

/// Multi-hot encoding of a chord, layout `[type | root]`, exactly two ones.
pub fn encode_chord(chord: ChordEvent) -> Vec<f64> {
    let mut v = vec![0.0; CHORD_DIM];
    v[chord.chord_type().index()] = 1.0;
    v[CHORD_TYPE_VOCAB + chord.root().index() as usize] = 1.0;
    v
}

/// Melody token sequence of a piece plus per-bar token spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedMelody {
    pub tokens: Vec<MelodyEvent>,
    /// Inclusive (start, end) token positions of each bar's melody, bar token
    /// excluded. Empty bars are filled with a single REST note, so every span
    /// is nonempty.
    pub bar_spans: Vec<(usize, usize)>,
}

impl TokenizedMelody {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Flattens a piece into `bar, p1, d1, p2, d2, ..., bar, ...` token order.
///
/// A bar with no melody notes contributes one synthesized REST note so that
/// attention always has at least one melody position to look at.
pub fn tokenize_piece(piece: &LeadSheet) -> TokenizedMelody {
    let mut tokens = Vec::with_capacity(piece.bars.len() * 3);
    let mut bar_spans = Vec::with_capacity(piece.bars.len());
    for bar in &piece.bars {
        tokens.push(MelodyEvent::Bar);
        let start = tokens.len();
        if bar.melody.is_empty() {
            tokens.push(MelodyEvent::Pitch(Pitch::REST));
            tokens.push(MelodyEvent::Duration(
                Duration::new((DURATION_VOCAB - 1) as u8).unwrap(),
            ));
        } else {
            for note in &bar.melody {
                tokens.push(MelodyEvent::Pitch(note.pitch));
                tokens.push(MelodyEvent::Duration(note.dur));
            }
        }
        bar_spans.push((start, tokens.len() - 1));
    }
    TokenizedMelody { tokens, bar_spans }
}

// ---------------------------------------------------------------------------
// Corpus file I/O: JSON lines, one piece per line.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PieceRecord {
    id: String,
    emotion: Option<u8>,
    bars: Vec<BarRecord>,
}

#[derive(Serialize, Deserialize)]
struct BarRecord {
    emotion: Option<u8>,
    melody: Vec<NoteRecord>,
    chords: Vec<ChordRecord>,
}

#[derive(Serialize, Deserialize)]
struct NoteRecord {
    pitch: u8,
    dur: u8,
}

#[derive(Serialize, Deserialize)]
struct ChordRecord {
    #[serde(rename = "type")]
    chord_type: String,
    root: RootRecord,
}

/// Root serializes as an integer 0..=39 or the string "none".
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RootRecord {
    Index(u8),
    Name(String),
}

fn chord_type_from_name(name: &str) -> Result<ChordType, LeadsheetError> {
    ALL_CHORD_TYPES
        .iter()
        .copied()
        .find(|t| t.name() == name)
        .ok_or_else(|| LeadsheetError::UnknownChordType(name.to_string()))
}

fn piece_from_record(record: PieceRecord) -> Result<LeadSheet, LeadsheetError> {
    if record.bars.is_empty() {
        return Err(LeadsheetError::EmptyPiece);
    }
    let emotion = record.emotion.map(EmotionLabel::try_from).transpose()?;
    let mut bars = Vec::with_capacity(record.bars.len());
    for bar in record.bars {
        if bar.chords.len() != 2 {
            return Err(LeadsheetError::BadChordCount(bar.chords.len()));
        }
        let mut chords = [ChordEvent::REST; 2];
        for (slot, chord) in chords.iter_mut().zip(bar.chords) {
            let chord_type = chord_type_from_name(&chord.chord_type)?;
            let root = match chord.root {
                RootRecord::Index(i) => {
                    if i as usize >= ROOT_VOCAB - 1 {
                        return Err(LeadsheetError::OutOfRange {
                            field: "root",
                            value: i as usize,
                            max: ROOT_VOCAB - 2,
                        });
                    }
                    Root::new(i)?
                }
                RootRecord::Name(name) if name == "none" => Root::NONE,
                RootRecord::Name(name) => {
                    return Err(LeadsheetError::UnknownChordType(format!("root \"{name}\"")));
                }
            };
            *slot = ChordEvent::new(chord_type, root)?;
        }
        let melody = bar
            .melody
            .into_iter()
            .map(|n| {
                Ok(Note {
                    pitch: Pitch::new(n.pitch)?,
                    dur: Duration::new(n.dur)?,
                })
            })
            .collect::<Result<Vec<_>, LeadsheetError>>()?;
        bars.push(Bar {
            emotion: bar.emotion.map(EmotionLabel::try_from).transpose()?,
            melody,
            chords,
        });
    }
    Ok(LeadSheet {
        id: record.id,
        emotion,
        bars,
    })
}

fn piece_to_record(piece: &LeadSheet) -> PieceRecord {
    PieceRecord {
        id: piece.id.clone(),
        emotion: piece.emotion.map(u8::from),
        bars: piece
            .bars
            .iter()
            .map(|bar| BarRecord {
                emotion: bar.emotion.map(u8::from),
                melody: bar
                    .melody
                    .iter()
                    .map(|n| NoteRecord {
                        pitch: n.pitch.index(),
                        dur: n.dur.index(),
                    })
                    .collect(),
                chords: bar
                    .chords
                    .iter()
                    .map(|c| ChordRecord {
                        chord_type: c.chord_type().name().to_string(),
                        root: if c.root().is_none() {
                            RootRecord::Name("none".to_string())
                        } else {
                            RootRecord::Index(c.root().index())
                        },
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// One rejected corpus line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Result of parsing a corpus file: valid pieces in file order plus the
/// rejected lines.
#[derive(Debug, Default)]
pub struct ParseReport {
    pub pieces: Vec<LeadSheet>,
    pub errors: Vec<LineError>,
    /// Bars whose melody exceeds the bar capacity; warned, not rejected.
    pub overfull_bars: Vec<(String, usize)>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {} invalid record(s); first: {}", errors.len(), errors[0])]
    InvalidRecords {
        path: String,
        errors: Vec<LineError>,
    },
}

/// Parses a corpus file, collecting per-line errors instead of failing fast.
pub fn parse_corpus(path: impl AsRef<Path>) -> Result<ParseReport, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut report = ParseReport::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PieceRecord>(&line) {
            Ok(record) => match piece_from_record(record) {
                Ok(piece) => {
                    for (bar_idx, bar) in piece.bars.iter().enumerate() {
                        if bar.melody_ticks() > DEFAULT_BAR_TICKS {
                            report.overfull_bars.push((piece.id.clone(), bar_idx));
                        }
                    }
                    report.pieces.push(piece);
                }
                Err(err) => report.errors.push(LineError {
                    line: line_no,
                    message: err.to_string(),
                }),
            },
            Err(err) => report.errors.push(LineError {
                line: line_no,
                message: err.to_string(),
            }),
        }
    }
    Ok(report)
}

/// Parses a corpus and fails if any record is invalid.
pub fn parse_corpus_strict(path: impl AsRef<Path>) -> Result<Vec<LeadSheet>, CorpusError> {
    let path = path.as_ref();
    let report = parse_corpus(path)?;
    if report.errors.is_empty() {
        Ok(report.pieces)
    } else {
        Err(CorpusError::InvalidRecords {
            path: path.display().to_string(),
            errors: report.errors,
        })
    }
}

/// Writes pieces as JSON lines; `parse_corpus` inverts this field-for-field.
pub fn write_corpus(pieces: &[LeadSheet], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let to_io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(to_io)?;
    let mut out = BufWriter::new(file);
    for piece in pieces {
        let record = piece_to_record(piece);
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| to_io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        out.write_all(b"\n").map_err(to_io)?;
    }
    out.flush().map_err(to_io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chord(chord_type: ChordType, root: u8) -> ChordEvent {
        ChordEvent::new(chord_type, Root::new(root).unwrap()).unwrap()
    }

    fn note(pitch: u8, dur: u8) -> Note {
        Note {
            pitch: Pitch::new(pitch).unwrap(),
            dur: Duration::new(dur).unwrap(),
        }
    }

    #[test]
    fn melody_one_hot_layout() {
        let bar = encode_melody_event(MelodyEvent::Bar);
        assert_eq!(bar[0], 1.0);
        assert_eq!(bar.iter().sum::<f64>(), 1.0);

        let rest = encode_melody_event(MelodyEvent::Pitch(Pitch::REST));
        assert_eq!(rest[61], 1.0);
        assert_eq!(rest.iter().sum::<f64>(), 1.0);

        let last_dur = encode_melody_event(MelodyEvent::Duration(Duration::new(36).unwrap()));
        assert_eq!(last_dur[98], 1.0);
        assert_eq!(last_dur.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn chord_multi_hot_layout() {
        let c = encode_chord(chord(ChordType::Maj, 5));
        assert_eq!(c[0], 1.0);
        assert_eq!(c[12], 1.0);
        assert_eq!(c.iter().sum::<f64>(), 2.0);

        let rest = encode_chord(ChordEvent::REST);
        assert_eq!(rest[6], 1.0);
        assert_eq!(rest[47], 1.0);
        assert_eq!(rest.iter().sum::<f64>(), 2.0);

        let m = encode_chord(chord(ChordType::Min, 0));
        assert_eq!(m[1], 1.0);
        assert_eq!(m[7], 1.0);
    }

    #[test]
    fn rest_pairing_enforced() {
        assert!(ChordEvent::new(ChordType::Rest, Root::new(3).unwrap()).is_err());
        assert!(ChordEvent::new(ChordType::Maj, Root::NONE).is_err());
        assert!(ChordEvent::new(ChordType::Rest, Root::NONE).is_ok());
    }

    #[test]
    fn tokenize_spans() {
        let piece = LeadSheet {
            id: "t".into(),
            emotion: None,
            bars: vec![Bar {
                emotion: None,
                melody: vec![note(10, 11), note(12, 11)],
                chords: [chord(ChordType::Maj, 0), chord(ChordType::Maj, 7)],
            }],
        };
        let tok = tokenize_piece(&piece);
        assert_eq!(tok.len(), 5);
        assert_eq!(tok.bar_spans, vec![(1, 4)]);

        let two_bars = LeadSheet {
            id: "t2".into(),
            emotion: None,
            bars: vec![
                Bar {
                    emotion: None,
                    melody: vec![note(10, 11)],
                    chords: [chord(ChordType::Maj, 0), chord(ChordType::Maj, 7)],
                },
                Bar {
                    emotion: None,
                    melody: vec![note(14, 11)],
                    chords: [chord(ChordType::Min, 9), chord(ChordType::Min, 9)],
                },
            ],
        };
        let tok = tokenize_piece(&two_bars);
        assert_eq!(tok.len(), 6);
        assert_eq!(tok.bar_spans, vec![(1, 2), (4, 5)]);
    }

    #[test]
    fn empty_bar_gets_rest_fill() {
        let piece = LeadSheet {
            id: "e".into(),
            emotion: None,
            bars: vec![Bar {
                emotion: None,
                melody: vec![],
                chords: [ChordEvent::REST, ChordEvent::REST],
            }],
        };
        let tok = tokenize_piece(&piece);
        assert_eq!(tok.len(), 3);
        assert_eq!(tok.tokens[1], MelodyEvent::Pitch(Pitch::REST));
        assert_eq!(tok.bar_spans, vec![(1, 2)]);
    }

    #[test]
    fn corpus_round_trip() {
        let pieces = vec![
            LeadSheet {
                id: "a".into(),
                emotion: Some(EmotionLabel::Positive),
                bars: vec![
                    Bar {
                        emotion: Some(EmotionLabel::Positive),
                        melody: vec![note(24, 11), note(26, 5)],
                        chords: [chord(ChordType::Maj, 0), chord(ChordType::Dom7, 19)],
                    },
                    Bar {
                        emotion: Some(EmotionLabel::Negative),
                        melody: vec![],
                        chords: [ChordEvent::REST, chord(ChordType::Dim, 11)],
                    },
                ],
            },
            LeadSheet {
                id: "b".into(),
                emotion: None,
                bars: vec![Bar {
                    emotion: None,
                    melody: vec![note(60, 36)],
                    chords: [ChordEvent::REST, ChordEvent::REST],
                }],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&pieces, &path).unwrap();
        let back = parse_corpus_strict(&path).unwrap();
        assert_eq!(back, pieces);

        // byte-stable rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        write_corpus(&back, &path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn empty_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        write_corpus(&[], &path).unwrap();
        let back = parse_corpus_strict(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn bad_chord_count_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"ok","emotion":null,"bars":[{"emotion":null,"melody":[],"chords":[{"type":"maj","root":0},{"type":"maj","root":0}]}]}"#,
                "\n",
                r#"{"id":"bad","emotion":null,"bars":[{"emotion":null,"melody":[],"chords":[{"type":"maj","root":0}]}]}"#,
                "\n",
            ),
        )
        .unwrap();
        let report = parse_corpus(&path).unwrap();
        assert_eq!(report.pieces.len(), 1);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].line, 2);
        assert!(
            report.errors[0]
                .message
                .contains("bar must contain exactly 2 chords"),
            "got: {}",
            report.errors[0].message
        );
    }

    #[test]
    fn unknown_chord_type_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unk.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"x","emotion":null,"bars":[{"emotion":null,"melody":[],"chords":[{"type":"maj9","root":0},{"type":"maj","root":0}]}]}"#,
                "\n"
            ),
        )
        .unwrap();
        let report = parse_corpus(&path).unwrap();
        assert_eq!(report.errors.len(), 1);
        assert!(report.errors[0].message.contains("maj9"));
    }

    proptest! {
        #[test]
        fn melody_encoding_round_trips(slot in 0usize..MELODY_DIM) {
            let event = melody_event_from_slot(slot).unwrap();
            let v = encode_melody_event(event);
            prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(melody_event_slot(event), slot);
        }

        #[test]
        fn chord_encoding_two_hot(type_idx in 0usize..CHORD_TYPE_VOCAB, root in 0u8..40) {
            let chord_type = ChordType::from_index(type_idx).unwrap();
            let chord = if chord_type == ChordType::Rest {
                ChordEvent::REST
            } else {
                ChordEvent::new(chord_type, Root::new(root).unwrap()).unwrap()
            };
            let v = encode_chord(chord);
            prop_assert_eq!(v.iter().sum::<f64>(), 2.0);
            prop_assert_eq!(v[chord.chord_type().index()], 1.0);
            prop_assert_eq!(v[CHORD_TYPE_VOCAB + chord.root().index() as usize], 1.0);
        }

        #[test]
        fn tokenize_length_formula(bars in proptest::collection::vec(0usize..5, 1..6)) {
            let piece = LeadSheet {
                id: "p".into(),
                emotion: None,
                bars: bars.iter().map(|&n| Bar {
                    emotion: None,
                    melody: (0..n).map(|i| note((i * 3 % 60) as u8, (i % 36) as u8)).collect(),
                    chords: [ChordEvent::REST, ChordEvent::REST],
                }).collect(),
            };
            let tok = tokenize_piece(&piece);
            // empty bars count one synthesized REST note
            let effective_notes: usize = bars.iter().map(|&n| n.max(1)).sum();
            prop_assert_eq!(tok.len(), bars.len() + 2 * effective_notes);
            for (i, &(s, e)) in tok.bar_spans.iter().enumerate() {
                prop_assert!(s <= e, "span {} empty", i);
                prop_assert!(e < tok.len());
            }
        }
    }
}
