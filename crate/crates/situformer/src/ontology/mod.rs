//! Verb lexicon, vocabularies, annotation schema, and the synthetic dataset
//! generator. Everything downstream (models, metrics, CLI) speaks the types
//! defined here.

mod annotations;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotations::{
    load_annotations, load_images, load_lexicon, save_annotations, save_images, save_lexicon,
    FileMeta, ANNOTATIONS_FORMAT, EMPTY_BOX_SENTINEL, IMAGES_FORMAT, LEXICON_FORMAT,
};
pub use synth::{synth_generate, CellGrid, SynthDataset, SynthPlan, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown verb {0:?}")]
    UnknownVerb(String),
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("unknown noun {0:?}")]
    UnknownNoun(String),
    #[error("image {image_id}: role set does not match lexicon ({message})")]
    RoleSetMismatch { image_id: String, message: String },
    #[error("bad format tag {found:?}, expected {expected:?}")]
    FormatTag { expected: String, found: String },
    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),
    #[error("lexicon: {0}")]
    Lexicon(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VerbId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RoleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NounId(pub usize);

/// Reserved id for out-of-vocabulary / blank nouns.
pub const UNKNOWN_NOUN: NounId = NounId(0);

/// Verb catalog: every verb owns an ordered list of role ids; role ids are
/// shared across verbs. Noun id 0 is the reserved blank/unknown noun.
#[derive(Debug, Clone, PartialEq)]
pub struct VerbLexicon {
    verb_names: Vec<String>,
    role_names: Vec<String>,
    noun_names: Vec<String>,
    roles_of: Vec<Vec<RoleId>>,
    max_roles: usize,
}

pub const DEFAULT_MAX_ROLES: usize = 6;

impl VerbLexicon {
    pub fn new(
        verb_names: Vec<String>,
        role_names: Vec<String>,
        noun_names: Vec<String>,
        roles_of: Vec<Vec<RoleId>>,
        max_roles: usize,
    ) -> Result<Self> {
        if verb_names.len() != roles_of.len() {
            return Err(DataError::Lexicon(format!(
                "{} verbs but {} role lists",
                verb_names.len(),
                roles_of.len()
            )));
        }
        if noun_names.is_empty() {
            return Err(DataError::Lexicon("noun vocabulary is empty".into()));
        }
        for (v, roles) in roles_of.iter().enumerate() {
            if roles.is_empty() || roles.len() > max_roles {
                return Err(DataError::Lexicon(format!(
                    "verb {:?} has {} roles (1..={} allowed)",
                    verb_names[v],
                    roles.len(),
                    max_roles
                )));
            }
            for r in roles {
                if r.0 >= role_names.len() {
                    return Err(DataError::Lexicon(format!(
                        "verb {:?} references role id {} outside the vocabulary",
                        verb_names[v], r.0
                    )));
                }
            }
        }
        Ok(VerbLexicon {
            verb_names,
            role_names,
            noun_names,
            roles_of,
            max_roles,
        })
    }

    pub fn num_verbs(&self) -> usize {
        self.verb_names.len()
    }

    pub fn num_roles(&self) -> usize {
        self.role_names.len()
    }

    pub fn num_nouns(&self) -> usize {
        self.noun_names.len()
    }

    pub fn max_roles(&self) -> usize {
        self.max_roles
    }

    pub fn verb_name(&self, v: VerbId) -> &str {
        &self.verb_names[v.0]
    }

    pub fn role_name(&self, r: RoleId) -> &str {
        &self.role_names[r.0]
    }

    pub fn noun_name(&self, n: NounId) -> &str {
        &self.noun_names[n.0]
    }

    pub fn verb_id(&self, name: &str) -> Result<VerbId> {
        self.verb_names
            .iter()
            .position(|v| v == name)
            .map(VerbId)
            .ok_or_else(|| DataError::UnknownVerb(name.to_string()))
    }

    pub fn role_id(&self, name: &str) -> Result<RoleId> {
        self.role_names
            .iter()
            .position(|v| v == name)
            .map(RoleId)
            .ok_or_else(|| DataError::UnknownRole(name.to_string()))
    }

    pub fn noun_id(&self, name: &str) -> Result<NounId> {
        self.noun_names
            .iter()
            .position(|v| v == name)
            .map(NounId)
            .ok_or_else(|| DataError::UnknownNoun(name.to_string()))
    }

    pub fn roles_of(&self, v: VerbId) -> &[RoleId] {
        &self.roles_of[v.0]
    }

    pub fn verbs(&self) -> impl Iterator<Item = VerbId> {
        (0..self.verb_names.len()).map(VerbId)
    }
}

/// Normalized center-form box. The corner form, clipped to the unit square,
/// is what IoU-style geometry operates on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// `[x1, y1, x2, y2]` clipped to `[0, 1]`.
    pub fn corners_clipped(&self) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        ]
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        BBox {
            cx: (c[0] + c[2]) / 2.0,
            cy: (c[1] + c[3]) / 2.0,
            w: c[2] - c[0],
            h: c[3] - c[1],
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }
}

/// One semantic role of a frame: which role, the annotated noun set (1-3
/// entries, first annotator first), and an optional grounding box. `None`
/// means the role is not visibly grounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleEntry {
    pub role: RoleId,
    pub gold_nouns: Vec<NounId>,
    pub bbox: Option<BBox>,
}

impl RoleEntry {
    /// Deterministic training target: the first annotator's noun.
    pub fn primary_noun(&self) -> NounId {
        self.gold_nouns[0]
    }
}

/// One annotation or prediction: a verb and its ordered role entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedFrame {
    pub verb: VerbId,
    pub role_entries: Vec<RoleEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RoleSetMismatch { expected: Vec<RoleId>, found: Vec<RoleId> },
    EmptyGoldNouns { role: RoleId },
    UnknownNoun { role: RoleId, noun: NounId },
    TooManyNouns { role: RoleId, count: usize },
    DegenerateBox { role: RoleId },
    BoxOutOfRange { role: RoleId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RoleSetMismatch { expected, found } => {
                write!(f, "role list {:?} does not match the verb's set {:?}", found, expected)
            }
            Violation::EmptyGoldNouns { role } => write!(f, "role {} has no gold nouns", role.0),
            Violation::UnknownNoun { role, noun } => {
                write!(f, "role {} references noun id {} outside the vocabulary", role.0, noun.0)
            }
            Violation::TooManyNouns { role, count } => {
                write!(f, "role {} has {} gold nouns (max 3)", role.0, count)
            }
            Violation::DegenerateBox { role } => write!(f, "role {} has a degenerate box", role.0),
            Violation::BoxOutOfRange { role } => write!(f, "role {} box is outside [0,1]", role.0),
        }
    }
}

/// Check a frame against the lexicon. Violations are returned, never raised.
pub fn validate_frame(frame: &GroundedFrame, lexicon: &VerbLexicon) -> Vec<Violation> {
    let mut out = Vec::new();
    let expected = lexicon.roles_of(frame.verb);
    let found: Vec<RoleId> = frame.role_entries.iter().map(|e| e.role).collect();
    if found != expected {
        out.push(Violation::RoleSetMismatch {
            expected: expected.to_vec(),
            found,
        });
    }
    for entry in &frame.role_entries {
        if entry.gold_nouns.is_empty() {
            out.push(Violation::EmptyGoldNouns { role: entry.role });
        }
        if entry.gold_nouns.len() > 3 {
            out.push(Violation::TooManyNouns {
                role: entry.role,
                count: entry.gold_nouns.len(),
            });
        }
        for n in &entry.gold_nouns {
            if n.0 >= lexicon.num_nouns() {
                out.push(Violation::UnknownNoun {
                    role: entry.role,
                    noun: *n,
                });
            }
        }
        if let Some(b) = &entry.bbox {
            if b.w <= 0.0 || b.h <= 0.0 {
                out.push(Violation::DegenerateBox { role: entry.role });
            } else if !b.is_valid() {
                out.push(Violation::BoxOutOfRange { role: entry.role });
            }
        }
    }
    out
}

/// Dense H x W x C pixel block, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageGrid {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }
}

/// A synthetic image with its gold frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub grid: ImageGrid,
    pub gold: GroundedFrame,
}

/// Map gold nouns outside the `keep` most frequent (count desc, id asc) to
/// the reserved unknown id. Mirrors a top-K object-category policy.
pub fn apply_noun_cutoff(frames: &mut [GroundedFrame], num_nouns: usize, keep: usize) -> Vec<NounId> {
    let mut counts = vec![0usize; num_nouns];
    for f in frames.iter() {
        for e in &f.role_entries {
            for n in &e.gold_nouns {
                counts[n.0] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (1..num_nouns).collect();
    order.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then(a.cmp(b)));
    let kept: std::collections::BTreeSet<usize> = order.into_iter().take(keep).collect();
    for f in frames.iter_mut() {
        for e in &mut f.role_entries {
            for n in &mut e.gold_nouns {
                if n.0 != 0 && !kept.contains(&n.0) {
                    *n = UNKNOWN_NOUN;
                }
            }
            e.gold_nouns.dedup();
        }
    }
    kept.into_iter().map(NounId).collect()
}
