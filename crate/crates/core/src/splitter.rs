//! Newsletter segmentation.
//!
//! A small error-recovering HTML scanner finds the body and the `h1`-`h4`
//! headings, and the body is cut at each heading start tag. Sections are
//! byte ranges of the original body, so concatenating their html always
//! gives the body back.

use serde::{Deserialize, Serialize};

use crate::domain::{Section, SectionId, SectionKind};
use crate::error::{Error, Result};

/// Upload size cap for newsletter html.
pub const MAX_HTML_BYTES: usize = 2 * 1024 * 1024;

/// Sections whose body (heading excluded) has fewer words are bare titles.
pub const TITLE_MAX_BODY_WORDS: usize = 20;

const BOUNDARY_TAGS: [&str; 4] = ["h1", "h2", "h3", "h4"];
const RAW_TEXT_TAGS: [&str; 5] = ["script", "style", "title", "textarea", "template"];
const HIDDEN_TEXT_TAGS: [&str; 4] = ["script", "style", "title", "template"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenKind {
    Text,
    StartTag {
        name: String,
    },
    EndTag {
        name: String,
    },
    /// Comments, doctype and processing instructions.
    Markup,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    kind: TokenKind,
    start: usize,
    end: usize,
}

fn tag_name_end(bytes: &[u8], from: usize) -> usize {
    let mut i = from;
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'-' || bytes[i] == b':') {
        i += 1;
    }
    i
}

/// Finds the `>` closing a tag that starts at `from`, honoring quoted
/// attribute values.
fn tag_close(bytes: &[u8], from: usize) -> Option<usize> {
    let mut quote: Option<u8> = None;
    for (i, &b) in bytes.iter().enumerate().skip(from) {
        match quote {
            Some(q) if b == q => quote = None,
            Some(_) => {}
            None if b == b'"' || b == b'\'' => quote = Some(b),
            None if b == b'>' => return Some(i),
            None => {}
        }
    }
    None
}

fn find_ci(haystack: &[u8], from: usize, needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()].eq_ignore_ascii_case(needle))
}

fn tokenize(html: &str) -> Vec<Token> {
    let bytes = html.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    let mut text_start = 0;
    let flush_text = |tokens: &mut Vec<Token>, from: usize, to: usize| {
        if to > from {
            tokens.push(Token { kind: TokenKind::Text, start: from, end: to });
        }
    };
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &bytes[i..];
        if rest.starts_with(b"<!--") {
            flush_text(&mut tokens, text_start, i);
            let end = find_ci(bytes, i + 4, b"-->").map_or(bytes.len(), |e| e + 3);
            tokens.push(Token { kind: TokenKind::Markup, start: i, end });
            i = end;
            text_start = i;
        } else if rest.len() > 1 && (rest[1] == b'!' || rest[1] == b'?') {
            flush_text(&mut tokens, text_start, i);
            let end = tag_close(bytes, i + 2).map_or(bytes.len(), |e| e + 1);
            tokens.push(Token { kind: TokenKind::Markup, start: i, end });
            i = end;
            text_start = i;
        } else if rest.len() > 2 && rest[1] == b'/' && rest[2].is_ascii_alphabetic() {
            let name_end = tag_name_end(bytes, i + 2);
            let Some(close) = tag_close(bytes, name_end) else {
                i += 1;
                continue;
            };
            flush_text(&mut tokens, text_start, i);
            let name = html[i + 2..name_end].to_ascii_lowercase();
            tokens.push(Token { kind: TokenKind::EndTag { name }, start: i, end: close + 1 });
            i = close + 1;
            text_start = i;
        } else if rest.len() > 1 && rest[1].is_ascii_alphabetic() {
            let name_end = tag_name_end(bytes, i + 1);
            let Some(close) = tag_close(bytes, name_end) else {
                i += 1;
                continue;
            };
            flush_text(&mut tokens, text_start, i);
            let name = html[i + 1..name_end].to_ascii_lowercase();
            let self_closing = close > i && bytes[close - 1] == b'/';
            let raw = RAW_TEXT_TAGS.contains(&name.as_str()) && !self_closing;
            tokens.push(Token { kind: TokenKind::StartTag { name: name.clone() }, start: i, end: close + 1 });
            i = close + 1;
            text_start = i;
            if raw {
                let closing = format!("</{name}");
                let end = find_ci(bytes, i, closing.as_bytes()).unwrap_or(bytes.len());
                flush_text(&mut tokens, i, end);
                i = end;
                text_start = i;
            }
        } else {
            i += 1;
        }
    }
    flush_text(&mut tokens, text_start, bytes.len());
    tokens
}

/// Visible text of a fragment: tags act as whitespace, entities decoded,
/// script/style/title contents and comments dropped. Whitespace runs are
/// collapsed to single spaces.
fn visible_text(html: &str) -> String {
    let tokens = tokenize(html);
    let mut raw = String::new();
    let mut hidden_depth: Option<String> = None;
    for tok in &tokens {
        match &tok.kind {
            TokenKind::StartTag { name } if HIDDEN_TEXT_TAGS.contains(&name.as_str()) => {
                hidden_depth = Some(name.clone());
                raw.push(' ');
            }
            TokenKind::EndTag { name } if hidden_depth.as_deref() == Some(name) => {
                hidden_depth = None;
                raw.push(' ');
            }
            TokenKind::Text if hidden_depth.is_none() => {
                raw.push_str(&html_escape::decode_html_entities(&html[tok.start..tok.end]));
            }
            _ => raw.push(' '),
        }
    }
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Number of whitespace-separated words in the visible text of a fragment.
pub fn count_words(html_fragment: &str) -> usize {
    visible_text(html_fragment).split_whitespace().count()
}

fn body_range(html: &str, tokens: &[Token]) -> (usize, usize) {
    let start = tokens.iter().find(|t| matches!(&t.kind, TokenKind::StartTag { name } if name == "body")).map(|t| t.end);
    match start {
        None => (0, html.len()),
        Some(start) => {
            let end = tokens
                .iter()
                .filter(|t| t.start >= start)
                .find(|t| matches!(&t.kind, TokenKind::EndTag { name } if name == "body" || name == "html"))
                .map_or(html.len(), |t| t.start);
            (start, end)
        }
    }
}

/// Text of the first `h1`-`h4` element in the fragment, or empty.
fn fragment_heading(html: &str) -> String {
    let tokens = tokenize(html);
    let Some((idx, name)) = tokens.iter().enumerate().find_map(|(i, t)| match &t.kind {
        TokenKind::StartTag { name } if BOUNDARY_TAGS.contains(&name.as_str()) => Some((i, name.clone())),
        _ => None,
    }) else {
        return String::new();
    };
    let start = tokens[idx].start;
    let end =
        tokens[idx + 1..].iter().find(|t| matches!(&t.kind, TokenKind::EndTag { name: n } if *n == name)).map_or(html.len(), |t| t.end);
    visible_text(&html[start..end])
}

fn build_section(id: SectionId, html: &str, order: usize) -> Section {
    let plain_text = visible_text(html);
    let mut section = Section {
        section_id: id,
        kind: SectionKind::Content,
        heading_text: fragment_heading(html),
        body_html: html.to_owned(),
        word_count: plain_text.split_whitespace().count(),
        plain_text,
        survey_enabled: false,
        order,
    };
    section.kind = classify_section(&section);
    section.survey_enabled = section.kind == SectionKind::Content;
    section
}

/// Body word count excluding the heading decides between a bare title and a
/// message with content.
pub fn classify_section(section: &Section) -> SectionKind {
    let heading_words = section.heading_text.split_whitespace().count();
    if section.word_count.saturating_sub(heading_words) < TITLE_MAX_BODY_WORDS {
        SectionKind::Title
    } else {
        SectionKind::Content
    }
}

/// Splits the body of a newsletter at every `h1`-`h4` start tag.
pub fn split_html(raw_html: &str) -> Vec<Section> {
    let tokens = tokenize(raw_html);
    let (body_start, body_end) = body_range(raw_html, &tokens);
    let body = &raw_html[body_start..body_end];
    if body.trim().is_empty() {
        return Vec::new();
    }
    let mut cuts: Vec<usize> = tokens
        .iter()
        .filter(|t| t.start >= body_start && t.start < body_end)
        .filter(|t| matches!(&t.kind, TokenKind::StartTag { name } if BOUNDARY_TAGS.contains(&name.as_str())))
        .map(|t| t.start - body_start)
        .collect();
    // Content before the first heading becomes its own section only when it
    // carries text; otherwise it rides along with the first heading.
    if let Some(&first) = cuts.first() {
        if first > 0 && count_words(&body[..first]) > 0 {
            cuts.insert(0, 0);
        } else {
            cuts[0] = 0;
        }
    } else {
        cuts.push(0);
    }
    cuts.push(body.len());
    cuts.windows(2).enumerate().map(|(order, w)| build_section(SectionId(format!("s{}", order + 1)), &body[w[0]..w[1]], order)).collect()
}

/// Concatenated html of the sections, i.e. the email body as sent.
pub fn render_sections(sections: &[Section]) -> String {
    sections.iter().map(|s| s.body_html.as_str()).collect()
}

/// A communicator correction to the automatic split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    /// Fold `section_id` into its neighbour `into_id`.
    Merge {
        section_id: SectionId,
        into_id: SectionId,
    },
    Remove {
        section_id: SectionId,
    },
    /// Cut `section_id` in two at a character offset into its html.
    AddBoundary {
        section_id: SectionId,
        char_offset: usize,
    },
    ToggleSurvey {
        section_id: SectionId,
        on: bool,
    },
}

fn position(sections: &[Section], id: &SectionId) -> Result<usize> {
    sections.iter().position(|s| &s.section_id == id).ok_or_else(|| Error::Edit(format!("unknown section {id}")))
}

fn next_section_id(sections: &[Section]) -> SectionId {
    let max = sections.iter().filter_map(|s| s.section_id.as_str().strip_prefix('s')?.parse::<u64>().ok()).max().unwrap_or(0);
    SectionId(format!("s{}", max + 1))
}

fn apply_one(sections: &mut Vec<Section>, op: &EditOp) -> Result<()> {
    match op {
        EditOp::Merge { section_id, into_id } => {
            if section_id == into_id {
                return Err(Error::Edit("cannot merge a section into itself".into()));
            }
            let from = position(sections, section_id)?;
            let into = position(sections, into_id)?;
            if from.abs_diff(into) != 1 {
                return Err(Error::Edit(format!("{section_id} and {into_id} are not adjacent")));
            }
            let (first, second) = (from.min(into), from.max(into));
            let html = format!("{}{}", sections[first].body_html, sections[second].body_html);
            let had_survey = sections[first].survey_enabled || sections[second].survey_enabled;
            let had_content = sections[first].kind == SectionKind::Content || sections[second].kind == SectionKind::Content;
            let mut merged = build_section(into_id.clone(), &html, first);
            merged.survey_enabled = merged.kind == SectionKind::Content && (had_survey || !had_content);
            sections[first] = merged;
            sections.remove(second);
        }
        EditOp::Remove { section_id } => {
            let idx = position(sections, section_id)?;
            sections.remove(idx);
        }
        EditOp::AddBoundary { section_id, char_offset } => {
            let idx = position(sections, section_id)?;
            let html = sections[idx].body_html.clone();
            let n_chars = html.chars().count();
            if *char_offset == 0 || *char_offset >= n_chars {
                return Err(Error::Edit(format!("offset {char_offset} is not strictly inside {section_id} ({n_chars} chars)")));
            }
            let byte = html.char_indices().nth(*char_offset).map(|(b, _)| b).expect("offset checked against char count");
            if tokenize(&html).iter().any(|t| t.kind != TokenKind::Text && t.start < byte && byte < t.end) {
                return Err(Error::Edit(format!("offset {char_offset} falls inside a tag")));
            }
            let survey_before = sections[idx].survey_enabled;
            let mut head = build_section(section_id.clone(), &html[..byte], idx);
            head.survey_enabled &= survey_before;
            let tail = build_section(next_section_id(sections), &html[byte..], idx + 1);
            sections[idx] = head;
            sections.insert(idx + 1, tail);
        }
        EditOp::ToggleSurvey { section_id, on } => {
            let idx = position(sections, section_id)?;
            if sections[idx].kind == SectionKind::Title {
                return Err(Error::Edit(format!("{section_id} is a title and carries no survey")));
            }
            sections[idx].survey_enabled = *on;
        }
    }
    Ok(())
}

/// Applies edits in order. Either every op succeeds or the input is left
/// untouched and the first failure is returned.
pub fn apply_edits(sections: &[Section], ops: &[EditOp]) -> Result<Vec<Section>> {
    let mut out = sections.to_vec();
    for op in ops {
        apply_one(&mut out, op)?;
        for (order, s) in out.iter_mut().enumerate() {
            s.order = order;
            if s.kind == SectionKind::Title {
                s.survey_enabled = false;
            }
        }
    }
    Ok(out)
}
