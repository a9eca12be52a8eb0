use super::{
    BlockKind, EventKind, FocusImages, FormatError, Parser, CLOSE_ANSWER, CLOSE_FOCUS, CLOSE_PLAN, OPEN_ANSWER,
    OPEN_PLAN,
};

/// A transcript split into top-level pieces. Bodies are stored verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Section {
    /// Untagged text between blocks, including any `Summary:` trailer.
    Text(String),
    Plan(String),
    Focus { images: FocusImages, body: String },
    Answer(String),
}

impl Section {
    fn render(&self, out: &mut String) {
        match self {
            Section::Text(t) => out.push_str(t),
            Section::Plan(body) => {
                out.push_str(OPEN_PLAN);
                out.push_str(body);
                out.push_str(CLOSE_PLAN);
            }
            Section::Focus { images, body } => {
                out.push_str(&images.open_tag());
                out.push_str(body);
                out.push_str(CLOSE_FOCUS);
            }
            Section::Answer(body) => {
                out.push_str(OPEN_ANSWER);
                out.push_str(body);
                out.push_str(CLOSE_ANSWER);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn focus_blocks(&self) -> impl Iterator<Item = (&FocusImages, &str)> {
        self.sections.iter().filter_map(|s| match s {
            Section::Focus { images, body } => Some((images, body.as_str())),
            _ => None,
        })
    }

    pub fn answer(&self) -> Option<&str> {
        self.sections.iter().find_map(|s| match s {
            Section::Answer(body) => Some(body.trim()),
            _ => None,
        })
    }
}

/// Parses a complete transcript into sections.
pub fn parse(text: &str, num_images: usize) -> Result<Document, FormatError> {
    let mut parser = Parser::new(num_images);
    let mut events = parser.feed(text)?;
    events.extend(parser.finish()?);
    let mut sections = Vec::new();
    let mut cursor = 0;
    let mut body_start = 0;
    for event in &events {
        match &event.kind {
            EventKind::BlockStart(kind) if *kind != BlockKind::Summary => {
                if event.span.start > cursor {
                    sections.push(Section::Text(text[cursor..event.span.start].to_string()));
                }
                body_start = event.span.end;
            }
            EventKind::BlockEnd(kind) if *kind != BlockKind::Summary => {
                let body = text[body_start..event.span.start].to_string();
                sections.push(match kind {
                    BlockKind::Plan => Section::Plan(body),
                    BlockKind::Focus(images) => Section::Focus { images: images.clone(), body },
                    _ => Section::Answer(body),
                });
                cursor = event.span.end;
            }
            _ => {}
        }
    }
    if cursor < text.len() {
        sections.push(Section::Text(text[cursor..].to_string()));
    }
    Ok(Document { sections })
}

/// Renders sections back to text, checking that the result is a valid
/// transcript that parses to the same sections.
pub fn serialize(sections: &[Section], num_images: usize) -> Result<String, FormatError> {
    let mut out = String::new();
    for section in sections {
        section.render(&mut out);
    }
    let reparsed = parse(&out, num_images)?;
    if reparsed.sections != sections {
        return Err(FormatError::InvalidSequence(
            "sections do not survive a round trip (adjacent or empty text sections?)".into(),
        ));
    }
    Ok(out)
}
