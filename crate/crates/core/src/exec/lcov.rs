//! The LCOV subset used for coverage artifacts: `SF:<path>`,
//! `DA:<line>,<hits>[,<checksum>]` and `end_of_record`. Other record types
//! are ignored. A line counts as covered when its hit count is positive.

use crate::coverage::CoverageMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcovError {
    pub line: usize,
    pub message: String,
}

pub fn parse(text: &str) -> Result<CoverageMap, LcovError> {
    parse_with(text, |path| path.to_string())
}

/// Parses an artifact, passing every `SF:` path through `map_path`.
pub fn parse_with(text: &str, map_path: impl Fn(&str) -> String) -> Result<CoverageMap, LcovError> {
    let mut map = CoverageMap::new();
    let mut current: Option<String> = None;
    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let line = raw.trim_end_matches('\r');
        let err = |message: String| LcovError {
            line: line_no,
            message,
        };
        if let Some(path) = line.strip_prefix("SF:") {
            if current.is_some() {
                return Err(err("SF record before end_of_record".into()));
            }
            if path.is_empty() {
                return Err(err("empty SF path".into()));
            }
            current = Some(map_path(path));
        } else if let Some(fields) = line.strip_prefix("DA:") {
            let file = current
                .as_ref()
                .ok_or_else(|| err("DA record outside an SF block".into()))?;
            let mut parts = fields.split(',');
            let line_number: u32 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .filter(|&n| n > 0)
                .ok_or_else(|| err(format!("bad line number in `{line}`")))?;
            let hits: i64 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| err(format!("bad hit count in `{line}`")))?;
            if hits > 0 {
                map.insert(file.clone(), line_number);
            }
        } else if line == "end_of_record" {
            if current.take().is_none() {
                return Err(err("end_of_record without SF".into()));
            }
        }
    }
    if current.is_some() {
        return Err(LcovError {
            line: text.lines().count(),
            message: "missing end_of_record".into(),
        });
    }
    Ok(map)
}

pub fn render(map: &CoverageMap) -> String {
    let mut out = String::new();
    for (file, lines) in map.iter() {
        out.push_str("SF:");
        out.push_str(file);
        out.push('\n');
        for line in lines {
            out.push_str(&format!("DA:{line},1\n"));
        }
        out.push_str("end_of_record\n");
    }
    out
}
