//! Annotation projection from a source utterance onto its translation.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::alignment::AlignmentSet;
use crate::dataset::Example;
use crate::seqlogical::{SemanticParse, SlotAnnotation, Utterance};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("alignment is {links:?} but the pair is {tokens:?} tokens")]
    DimensionMismatch { links: (usize, usize), tokens: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RejectReason {
    EmptySlotProjection,
    OverlappingProjection,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::EmptySlotProjection => "EmptySlotProjection",
            RejectReason::OverlappingProjection => "OverlappingProjection",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProjectionStatus {
    Projected,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionOutcome {
    pub status: ProjectionStatus,
    pub example: Option<Example>,
    /// Slots emitted for source slots that split into several runs.
    pub fragments_created: usize,
}

impl ProjectionOutcome {
    fn rejected(reason: RejectReason) -> Self {
        ProjectionOutcome { status: ProjectionStatus::Rejected(reason), example: None, fragments_created: 0 }
    }
}

/// Maximal runs of consecutive indices as half-open ranges.
fn contiguous_runs(indices: &BTreeSet<usize>) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &j in indices {
        match runs.last_mut() {
            Some((_, end)) if *end == j => *end = j + 1,
            _ => runs.push((j, j + 1)),
        }
    }
    runs
}

/// Copies the intent and carries every source slot over to the target tokens
/// linked to it. Discontinuous projections become several slots with the
/// same label.
pub fn project_annotations(
    source: &Example,
    target_tokens: &[String],
    links: &AlignmentSet,
) -> Result<ProjectionOutcome, ProjectionError> {
    let tokens = (source.utterance.len(), target_tokens.len());
    if (links.source_len, links.target_len) != tokens {
        return Err(ProjectionError::DimensionMismatch { links: (links.source_len, links.target_len), tokens });
    }

    let mut slots = Vec::new();
    let mut fragments_created = 0;
    for slot in &source.parse.slots {
        let projected: BTreeSet<usize> =
            links.links().iter().filter(|&&(i, _)| (slot.start..slot.end).contains(&i)).map(|&(_, j)| j).collect();
        if projected.is_empty() {
            return Ok(ProjectionOutcome::rejected(RejectReason::EmptySlotProjection));
        }
        let runs = contiguous_runs(&projected);
        if runs.len() > 1 {
            fragments_created += runs.len();
        }
        slots.extend(runs.into_iter().map(|(start, end)| SlotAnnotation::new(slot.label.clone(), start, end)));
    }

    slots.sort_by_key(|s| (s.start, s.end));
    if slots.windows(2).any(|w| w[1].start < w[0].end) {
        return Ok(ProjectionOutcome::rejected(RejectReason::OverlappingProjection));
    }

    let example = Example {
        id: source.id.clone(),
        domain: source.domain.clone(),
        utterance: Utterance::new(target_tokens.to_vec()),
        parse: SemanticParse { intent: source.parse.intent.clone(), slots },
        language: None,
        provenance: None,
    };
    Ok(ProjectionOutcome { status: ProjectionStatus::Projected, example: Some(example), fragments_created })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

pub fn write_rejections<W: Write>(mut writer: W, rejections: &[Rejection]) -> io::Result<()> {
    for r in rejections {
        writeln!(writer, "{}", serde_json::to_string(r).expect("rejection serializes"))?;
    }
    Ok(())
}
