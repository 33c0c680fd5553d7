use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InteractionLog, LogBuilder};
use crate::error::{Error, Result};

/// Field separator of an edge-list file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeFormat {
    /// Tabs or spaces.
    #[default]
    Tsv,
    Csv,
}

impl std::str::FromStr for EdgeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" | "txt" => Ok(Self::Tsv),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::config("format", format!("unknown edge-list format `{s}` (tsv or csv)"))),
        }
    }
}

impl std::fmt::Display for EdgeFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tsv => "tsv",
            Self::Csv => "csv",
        })
    }
}

impl EdgeFormat {
    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Self::Tsv => line.split_whitespace().collect(),
            Self::Csv => line.split(',').map(str::trim).collect(),
        }
    }
}

/// Reads `user<TAB>item[<TAB>weight[<TAB>timestamp]]` lines. Fields may also
/// be separated by spaces. Blank lines and `#` comments are skipped, and so
/// is a first line whose fields are not numeric when the second line's are.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    load_interactions_as(path, EdgeFormat::Tsv)
}

pub fn load_interactions_as(path: impl AsRef<Path>, format: EdgeFormat) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions_as(BufReader::new(file), &path.display().to_string(), format)
}

pub fn parse_interactions(reader: impl BufRead, source: &str) -> Result<InteractionLog> {
    parse_interactions_as(reader, source, EdgeFormat::Tsv)
}

pub fn parse_interactions_as(reader: impl BufRead, source: &str, format: EdgeFormat) -> Result<InteractionLog> {
    let mut lines = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        lines.push((n + 1, trimmed.to_owned()));
    }

    let skip_header = match (lines.first(), lines.get(1)) {
        (Some((_, first)), Some((_, second))) => {
            !ids_numeric(&format.fields(first)) && ids_numeric(&format.fields(second))
        }
        _ => false,
    };

    let mut builder = LogBuilder::new();
    for (line_no, line) in lines.iter().skip(usize::from(skip_header)) {
        let fields = format.fields(line);
        let fail = |reason: String| Error::Parse {
            path: source.to_owned(),
            line: *line_no,
            reason,
        };
        if fields.len() < 2 || fields.len() > 4 {
            return Err(fail(format!("expected 2 to 4 fields, found {}", fields.len())));
        }
        if let Some(w) = fields.get(2) {
            let weight: f64 = w
                .parse()
                .map_err(|_| fail(format!("weight `{w}` is not a number")))?;
            if !(weight >= 0.0) {
                return Err(fail(format!("weight {weight} is negative")));
            }
        }
        // ratings and timestamps are validated but not kept: implicit feedback
        builder.push(fields[0], fields[1]);
    }
    builder.build()
}

fn ids_numeric(fields: &[&str]) -> bool {
    matches!(
        (fields.first(), fields.get(1)),
        (Some(u), Some(i)) if u.parse::<f64>().is_ok() && i.parse::<f64>().is_ok()
    )
}
