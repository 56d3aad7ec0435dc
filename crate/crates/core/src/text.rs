//! Shared helpers for the line-oriented text formats.
//!
//! All formats are UTF-8, one record per line, fields separated by a single
//! space, `.` as decimal separator. Lines starting with `#` are comments
//! unless a format gives its first line a meaning.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Canonical float rendering: rounded to 9 significant digits, then printed
/// in the shortest form that reads back to the rounded value.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Iterates `(line_number, fields)` over non-empty, non-comment lines.
/// Line numbers are 1-based.
pub fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split(' ').filter(|f| !f.is_empty()).collect()))
        }
    })
}

pub(crate) fn expect_fields(line: usize, fields: &[&str], n: usize, what: &str) -> Result<()> {
    if fields.len() != n {
        return Err(Error::parse(
            line,
            format!("{what}: expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

pub(crate) fn field<T: FromStr>(line: usize, raw: &str, name: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::parse(line, format!("cannot parse {name} from `{raw}`")))
}

pub(crate) fn finite(line: usize, raw: &str, name: &str) -> Result<f64> {
    let v: f64 = field(line, raw, name)?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{name} is not finite")));
    }
    Ok(v)
}

/// Image ids are single tokens and may not look like a comment.
pub(crate) fn check_image_id(line: usize, id: &str) -> Result<()> {
    if id.starts_with('#') {
        return Err(Error::parse(line, "image id may not start with `#`"));
    }
    Ok(())
}
