//! Prompt construction, response parsing, model backends and the resumable
//! query journal.

mod backend;
mod http;
mod journal;
mod run;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canvas::{GridCell, GridSpec};
use crate::corpus::LocalizationTask;

pub use backend::{
    build_backend, Backend, BackendConfig, BackendError, BackendKind, QueryRequest, ReasoningEffort, ScriptedFault,
    ScriptedResponse, Simulated, SimulatorSpec,
};
pub use http::HttpChatBackend;
pub use journal::{load_journal, CacheKey, Journal, JournalError};
pub use run::{run_queries, QueryError, QueryJob, QueryRecord, RunOutput, RunStats};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptOptions {
    /// Appends one sentence spelling out that letters index rows from the
    /// top and numbers index columns from the left.
    pub axis_hint: bool,
}

/// Messages and image for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub image_bytes: Arc<[u8]>,
}

impl PromptBundle {
    pub fn prompt_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.user_text.as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const SYSTEM_TEMPLATE: &str = "You are an expert chest radiologist specializing in analyzing {view} chest X-rays. Your task is to precisely localize abnormalities using a grid overlay.";

const USER_TEMPLATE: &str = "This is a gridded {view} view of a chest X-ray. The abnormality '{condition}' is confirmed to be present in this image.
Your task:
1. Identify the single grid cell where this abnormality - '{condition}' is the MOST prominent.
2. Provide only the grid coordinate for this most representative cell. A grid coordinate is defined as a letter followed by a number. If the abnormality spans multiple cells, choose the cell that is most representative.
3. Do not include any explanations or additional text in your response.";

/// Digest of the prompt templates, for run manifests.
pub fn template_digest() -> String {
    digest(format!("{SYSTEM_TEMPLATE}\0{USER_TEMPLATE}").as_bytes())
}

pub fn build_prompt(task: &LocalizationTask, image_bytes: Arc<[u8]>, opts: &PromptOptions) -> PromptBundle {
    let view = task.view.word();
    let condition = task.pathology.display_name();
    let system_text = SYSTEM_TEMPLATE.replace("{view}", view);
    let mut user_text = USER_TEMPLATE.replace("{view}", view).replace("{condition}", condition);
    if opts.axis_hint {
        let last_row = task
            .grid
            .label_of(GridCell::new(task.grid.rows() - 1, 0))
            .expect("last row is in range");
        let last_row = last_row.trim_end_matches(|c: char| c.is_ascii_digit());
        user_text.push_str(&format!(
            "\nLetters A-{last_row} index rows from top to bottom; numbers 1-{} index columns from left to right.",
            task.grid.cols()
        ));
    }
    PromptBundle {
        system_text,
        user_text,
        image_bytes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    NoCoordinate,
    OutOfRange,
    /// The request never produced a response.
    Transport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseResult {
    Cell(GridCell),
    Failure(ParseFailure),
}

impl ParseResult {
    pub fn cell(&self) -> Option<GridCell> {
        match *self {
            ParseResult::Cell(c) => Some(c),
            ParseResult::Failure(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedCell {
    pub result: ParseResult,
    /// More than one distinct in-range coordinate appeared.
    pub ambiguous: bool,
}

/// Finds coordinate tokens (one or two letters then digits, any case) among
/// the alphanumeric runs of `raw`. The first in-range one wins.
pub fn parse_cell(raw: &str, spec: &GridSpec) -> ParsedCell {
    let mut found: Vec<GridCell> = Vec::new();
    let mut saw_out_of_range = false;
    for token in raw
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| looks_like_coordinate(t))
    {
        match spec.cell_of(token) {
            Ok(c) if !found.contains(&c) => found.push(c),
            Ok(_) => {}
            Err(crate::canvas::CanvasError::LabelOutOfRange { .. }) => saw_out_of_range = true,
            Err(_) => {}
        }
    }
    match found.first() {
        Some(&c) => ParsedCell {
            result: ParseResult::Cell(c),
            ambiguous: found.len() > 1,
        },
        None => ParsedCell {
            result: ParseResult::Failure(if saw_out_of_range {
                ParseFailure::OutOfRange
            } else {
                ParseFailure::NoCoordinate
            }),
            ambiguous: false,
        },
    }
}

fn looks_like_coordinate(token: &str) -> bool {
    let letters = token.bytes().take_while(u8::is_ascii_alphabetic).count();
    (1..=2).contains(&letters) && token.len() > letters && token.bytes().skip(letters).all(|b| b.is_ascii_digit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FrontalSubtype, Pathology, ViewPosition};
    use proptest::prelude::*;

    fn task(p: Pathology, view: ViewPosition) -> LocalizationTask {
        LocalizationTask {
            image_id: "img".into(),
            pathology: p,
            view,
            grid: GridSpec::square(8).unwrap(),
        }
    }

    fn frontal() -> ViewPosition {
        ViewPosition::Frontal(FrontalSubtype::Pa)
    }

    fn bytes() -> Arc<[u8]> {
        Arc::from(&b"png"[..])
    }

    #[test]
    fn template_substitution() {
        let b = build_prompt(
            &task(Pathology::Cardiomegaly, frontal()),
            bytes(),
            &PromptOptions::default(),
        );
        assert!(b.user_text.contains("gridded frontal view"));
        assert!(b.user_text.contains("'Cardiomegaly' is confirmed to be present"));
        assert!(b.system_text.contains("analyzing frontal chest X-rays"));
        assert_eq!(b.user_text.matches("frontal").count(), 1);
        // The template names the condition in the statement and in step 1.
        assert_eq!(b.user_text.matches("Cardiomegaly").count(), 2);
        assert!(!b.user_text.contains('{'));

        let l = build_prompt(
            &task(Pathology::PleuralEffusion, ViewPosition::Lateral),
            bytes(),
            &PromptOptions::default(),
        );
        assert!(l.user_text.contains("gridded lateral view"));
        assert!(l.user_text.contains("'Pleural Effusion'"));
    }

    #[test]
    fn prompt_hash_is_stable() {
        let t = task(Pathology::Edema, frontal());
        let a = build_prompt(&t, bytes(), &PromptOptions::default());
        let b = build_prompt(&t, bytes(), &PromptOptions::default());
        assert_eq!(a.prompt_hash(), b.prompt_hash());
        let hinted = build_prompt(&t, bytes(), &PromptOptions { axis_hint: true });
        assert_ne!(a.prompt_hash(), hinted.prompt_hash());
        assert!(hinted
            .user_text
            .ends_with("Letters A-H index rows from top to bottom; numbers 1-8 index columns from left to right."));
    }

    #[test]
    fn parse_examples() {
        let g = GridSpec::square(8).unwrap();
        assert_eq!(parse_cell("C5", &g).result, ParseResult::Cell(GridCell::new(2, 4)));
        let p = parse_cell("The most representative cell is c5.", &g);
        assert_eq!(p.result, ParseResult::Cell(GridCell::new(2, 4)));
        assert!(!p.ambiguous);
        assert_eq!(
            parse_cell("Z9", &g).result,
            ParseResult::Failure(ParseFailure::OutOfRange)
        );
        assert_eq!(
            parse_cell("no idea", &g).result,
            ParseResult::Failure(ParseFailure::NoCoordinate)
        );
        assert_eq!(
            parse_cell("", &g).result,
            ParseResult::Failure(ParseFailure::NoCoordinate)
        );
    }

    #[test]
    fn parse_ambiguity_and_noise() {
        let g = GridSpec::square(8).unwrap();
        let p = parse_cell("Either D4 or (E5), probably D4", &g);
        assert_eq!(p.result, ParseResult::Cell(GridCell::new(3, 3)));
        assert!(p.ambiguous);
        let p = parse_cell("D4, D4", &g);
        assert!(!p.ambiguous);
        // An out-of-range mention does not shadow a valid one.
        assert_eq!(
            parse_cell("Z9 or B2", &g).result,
            ParseResult::Cell(GridCell::new(1, 1))
        );
        // Words with trailing letters or a zero column are not coordinates.
        assert_eq!(
            parse_cell("h2o A0", &g).result,
            ParseResult::Failure(ParseFailure::NoCoordinate)
        );
        assert_eq!(parse_cell("**b07**", &g).result, ParseResult::Cell(GridCell::new(1, 6)));
    }

    proptest! {
        #[test]
        fn label_round_trip(rows in 1u32..=40, cols in 1u32..=40, r in 0u32..40, c in 0u32..40) {
            let g = GridSpec::new(rows, cols, 1024).unwrap();
            let cell = GridCell::new(r % rows, c % cols);
            let label = g.label_of(cell).unwrap();
            prop_assert_eq!(parse_cell(&label, &g).result, ParseResult::Cell(cell));
            prop_assert_eq!(parse_cell(&format!("Answer: {}.", label.to_lowercase()), &g).result, ParseResult::Cell(cell));
        }
    }
}
