use serde::Serialize;

use super::{BlockKind, EventKind, FormatError, Parser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Note,
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Grammar,
    IndexOutOfRange,
    MissingDirective,
    Mismatch,
    NoFocusBlocks,
    NoAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub severity: Severity,
    pub kind: FindingKind,
    /// Byte offset in the transcript, when the finding has a location.
    pub offset: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sev = match self.severity {
            Severity::Note => "note",
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match self.offset {
            Some(o) => write!(f, "{sev} at byte {o}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub focus_blocks: usize,
    pub plan_blocks: usize,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }
}

/// Checks a complete transcript. Parsing stops at the first grammar error.
pub fn validate_transcript(text: &str, num_images: usize) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut parser = Parser::new(num_images);
    let mut answered = false;
    let result = parser.feed(text).and_then(|mut events| {
        events.extend(parser.finish()?);
        Ok(events)
    });
    match result {
        Ok(events) => {
            for event in events {
                match event.kind {
                    EventKind::BlockStart(BlockKind::Focus(_)) => report.focus_blocks += 1,
                    EventKind::BlockStart(BlockKind::Plan) => report.plan_blocks += 1,
                    EventKind::BlockEnd(BlockKind::Answer) => answered = true,
                    EventKind::Mismatch { planned, actual } => report.findings.push(Finding {
                        severity: Severity::Warning,
                        kind: FindingKind::Mismatch,
                        offset: Some(event.span.start),
                        message: format!("plan named images {planned:?} but the next focus block opened {actual:?}"),
                    }),
                    _ => {}
                }
            }
            if report.focus_blocks == 0 {
                report.findings.push(Finding {
                    severity: Severity::Note,
                    kind: FindingKind::NoFocusBlocks,
                    offset: None,
                    message: "transcript has no focus blocks".into(),
                });
            }
            if !answered {
                report.findings.push(Finding {
                    severity: Severity::Note,
                    kind: FindingKind::NoAnswer,
                    offset: None,
                    message: "transcript has no answer block".into(),
                });
            }
        }
        Err(err) => {
            let kind = match err {
                FormatError::IndexOutOfRange { .. } => FindingKind::IndexOutOfRange,
                FormatError::MissingDirective { .. } => FindingKind::MissingDirective,
                _ => FindingKind::Grammar,
            };
            report.findings.push(Finding {
                severity: Severity::Error,
                kind,
                offset: err.offset(),
                message: err.to_string(),
            });
        }
    }
    report
}
