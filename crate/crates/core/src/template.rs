//! Prompt and target rendering, label vocabulary, target construction with
//! the rating-then-alphabetical tie-break, and parsing of ranked label text.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{Permutation, Vocabulary};
use crate::ranking::{Rating, TargetRanking};

/// Single-letter labels cap the slate size.
pub const MAX_LABELS: usize = 26;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("slate size {0} outside 1..=26")]
    SlateSize(usize),
    #[error("slate has no ground-truth ratings")]
    MissingRatings,
    #[error("ranking has {got} entries, slate has {expected}")]
    SizeMismatch { got: usize, expected: usize },
    #[error("duplicate label {0}")]
    DuplicateLabel(char),
    #[error("missing label {0}")]
    MissingLabel(char),
    #[error("unknown label token '{0}'")]
    UnknownLabel(String),
    #[error("item title must be non-empty")]
    EmptyTitle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u64,
    pub title: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl Item {
    pub fn new(item_id: u64, title: impl Into<String>, attributes: Vec<String>) -> Result<Self, TemplateError> {
        let title = title.into();
        if title.is_empty() {
            return Err(TemplateError::EmptyTitle);
        }
        Ok(Item {
            item_id,
            title,
            attributes,
        })
    }
}

/// Past interactions, oldest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HistorySequence {
    pub entries: Vec<(Item, Rating)>,
}

impl HistorySequence {
    pub fn new(entries: Vec<(Item, Rating)>) -> Self {
        HistorySequence { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ordered candidates. Labels are derived from input position only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSlate {
    pub items: Vec<Item>,
    /// Ground truth, parallel to `items`; absent at inference time.
    pub ratings: Option<Vec<Rating>>,
}

impl CandidateSlate {
    pub fn new(items: Vec<Item>, ratings: Option<Vec<Rating>>) -> Result<Self, TemplateError> {
        if items.is_empty() || items.len() > MAX_LABELS {
            return Err(TemplateError::SlateSize(items.len()));
        }
        if let Some(r) = &ratings {
            if r.len() != items.len() {
                return Err(TemplateError::SizeMismatch {
                    got: r.len(),
                    expected: items.len(),
                });
            }
        }
        Ok(CandidateSlate { items, ratings })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label(&self, position: usize) -> char {
        label_char(position)
    }

    pub fn ratings(&self) -> Result<&[Rating], TemplateError> {
        self.ratings.as_deref().ok_or(TemplateError::MissingRatings)
    }

    pub fn without_ratings(&self) -> CandidateSlate {
        CandidateSlate {
            items: self.items.clone(),
            ratings: None,
        }
    }
}

pub fn label_char(position: usize) -> char {
    (b'A' + position as u8) as char
}

/// Item at new position `t` is the item formerly at `p.map()[t]`; ratings move
/// with their items and labels follow the new positions.
pub fn apply_permutation(p: &Permutation, slate: &CandidateSlate) -> Result<CandidateSlate, TemplateError> {
    let mismatch = |_| TemplateError::SizeMismatch {
        got: p.len(),
        expected: slate.len(),
    };
    let items = p.apply(&slate.items).map_err(mismatch)?;
    let ratings = match &slate.ratings {
        Some(r) => Some(p.apply(r).map_err(mismatch)?),
        None => None,
    };
    Ok(CandidateSlate { items, ratings })
}

/// Secondary key for candidates with equal ratings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Case-insensitive title order, then item id.
    #[default]
    Title,
    /// Input label order.
    Label,
}

impl std::str::FromStr for TieBreak {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "title" => Ok(TieBreak::Title),
            "label" => Ok(TieBreak::Label),
            other => Err(format!("unknown tie-break '{other}'")),
        }
    }
}

/// Rating descending, then the tie-break key ascending. Stable.
pub fn target_ranking(slate: &CandidateSlate, tie_break: TieBreak) -> Result<TargetRanking, TemplateError> {
    if slate.is_empty() {
        return Err(TemplateError::SlateSize(0));
    }
    let ratings = slate.ratings()?;
    let keys: Vec<String> = slate.items.iter().map(|i| i.title.to_lowercase()).collect();
    let mut order: Vec<usize> = (0..slate.len()).collect();
    order.sort_by(|&a, &b| {
        let by_rating = ratings[b].cmp(&ratings[a]);
        match tie_break {
            TieBreak::Title => by_rating
                .then_with(|| keys[a].as_bytes().cmp(keys[b].as_bytes()))
                .then(slate.items[a].item_id.cmp(&slate.items[b].item_id)),
            TieBreak::Label => by_rating.then(a.cmp(&b)),
        }
    });
    Ok(TargetRanking::new(order).expect("sorted indices form a permutation"))
}

/// Token ids `0..m` are labels A.., followed by pad, begin and end.
pub fn label_vocab(m: usize) -> Result<Vocabulary, TemplateError> {
    if m == 0 || m > MAX_LABELS {
        return Err(TemplateError::SlateSize(m));
    }
    Ok(Vocabulary {
        label_tokens: (0..m).collect(),
        pad: m,
        begin: m + 1,
        end: m + 2,
        size: m + 3,
    })
}

/// Wording of the instruction block. `noun` is the plural item noun.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptStyle {
    pub noun: String,
}

impl Default for PromptStyle {
    fn default() -> Self {
        PromptStyle {
            noun: "movies".to_string(),
        }
    }
}

fn item_line(out: &mut String, item: &Item) {
    write!(out, "title: {}", item.title).unwrap();
    if !item.attributes.is_empty() {
        write!(out, " genres: {}", item.attributes.join("|")).unwrap();
    }
}

/// Source prompt: instruction, history with ratings, labelled candidates
/// without ratings, and the response preamble. LF line endings.
pub fn render_source(history: &HistorySequence, slate: &CandidateSlate, style: &PromptStyle) -> Result<String, TemplateError> {
    if slate.is_empty() || slate.len() > MAX_LABELS {
        return Err(TemplateError::SlateSize(slate.len()));
    }
    let noun = &style.noun;
    let mut out = String::new();
    out.push_str("### Instruction:\n");
    writeln!(
        out,
        "Given the user\u{2019}s interaction history, which reveals their items preferences, \
         generate a preference-based ranking of the provided candidate items. \
         Your task is to rank a list of new candidate {noun}."
    )
    .unwrap();
    writeln!(
        out,
        "Your ranking should include all the candidate {noun} provided, and it should be based \
         solely on the user's preferences, without regard to the initial order of the candidates."
    )
    .unwrap();
    out.push_str("### Input:\n");
    out.push_str("[User Interaction History]:\n");
    for (item, rating) in &history.entries {
        item_line(&mut out, item);
        writeln!(out, " rating: {}", rating.value()).unwrap();
    }
    out.push_str("[Candidate Items]:\n");
    for (pos, item) in slate.items.iter().enumerate() {
        write!(out, "({}) ", label_char(pos)).unwrap();
        item_line(&mut out, item);
        out.push('\n');
    }
    out.push_str("### Response:\n");
    out.push_str("Given the historical interaction, the ranking result is:\n");
    Ok(out)
}

/// Space-separated labels in ranked order, e.g. `B A C`.
pub fn render_target(tau: &TargetRanking) -> String {
    let labels: Vec<String> = tau.order().iter().map(|&i| label_char(i).to_string()).collect();
    labels.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Repair,
}

pub fn parse_ranking(text: &str, m: usize, mode: ParseMode) -> Result<TargetRanking, TemplateError> {
    if m == 0 || m > MAX_LABELS {
        return Err(TemplateError::SlateSize(m));
    }
    let mut seen = vec![false; m];
    let mut order = Vec::with_capacity(m);
    for token in text.split_whitespace() {
        let slot = match token.as_bytes() {
            [c] if c.is_ascii_uppercase() && ((c - b'A') as usize) < m => (c - b'A') as usize,
            _ => match mode {
                ParseMode::Strict => return Err(TemplateError::UnknownLabel(token.to_string())),
                ParseMode::Repair => continue,
            },
        };
        if seen[slot] {
            match mode {
                ParseMode::Strict => return Err(TemplateError::DuplicateLabel(label_char(slot))),
                ParseMode::Repair => continue,
            }
        }
        seen[slot] = true;
        order.push(slot);
    }
    for slot in 0..m {
        if !seen[slot] {
            match mode {
                ParseMode::Strict => return Err(TemplateError::MissingLabel(label_char(slot))),
                ParseMode::Repair => order.push(slot),
            }
        }
    }
    Ok(TargetRanking::new(order).expect("each slot placed once"))
}

/// A rendered training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub source_text: String,
    pub target_text: String,
    pub target_label_tokens: Vec<usize>,
    pub slate: CandidateSlate,
    pub permutation_applied: Option<Permutation>,
}

impl PromptRecord {
    pub fn build(
        history: &HistorySequence,
        slate: &CandidateSlate,
        tie_break: TieBreak,
        style: &PromptStyle,
        permutation: Option<Permutation>,
    ) -> Result<Self, TemplateError> {
        let slate = match &permutation {
            Some(p) => apply_permutation(p, slate)?,
            None => slate.clone(),
        };
        let tau = target_ranking(&slate, tie_break)?;
        let vocab = label_vocab(slate.len())?;
        Ok(PromptRecord {
            source_text: render_source(history, &slate, style)?,
            target_text: render_target(&tau),
            target_label_tokens: tau.order().iter().map(|&i| vocab.label_tokens[i]).collect(),
            slate,
            permutation_applied: permutation,
        })
    }
}
