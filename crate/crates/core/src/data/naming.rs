//! File naming convention of the Baby2020 corpus, e.g.
//! `Hungry04MB00011_2_002.wav`: a label, an opaque recording token and two
//! segment indices.

use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Za-z]+[A-Za-z0-9]*)_[0-9]+_[0-9]+\.wav$").expect("valid regex"))
}

/// `(label, group)`: the leading alphabetic run and the rest of the first
/// token. Segment indices are dropped so every segment of one recording
/// shares a group.
pub fn parse_baby2020_name(filename: &str) -> Result<(String, String)> {
    let caps = pattern()
        .captures(filename)
        .ok_or_else(|| Error::Naming(format!("'{filename}' does not follow <Label><id>_<n>_<n>.wav")))?;
    let token = &caps[1];
    let split = token.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(token.len());
    let (label, group) = token.split_at(split);
    if group.is_empty() {
        return Err(Error::Naming(format!("'{filename}' has no recording identifier after the label")));
    }
    Ok((label.to_string(), group.to_string()))
}
