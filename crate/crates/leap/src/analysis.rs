//! Per-word keep rates and rendering of kept/skipped words.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use leap_core::data::Document;
use leap_core::model::Decision;
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};

pub const TABLE_VERSION: u32 = 1;
pub const DEFAULT_MIN_APPEAR: usize = 10;
pub const TSV_HEADER: [&str; 5] = ["word", "class", "keep_rate", "kept", "appeared"];
/// Class column value for rows of the global table.
pub const GLOBAL_CLASS: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepRateRow {
    pub word: String,
    /// `kept / appeared`.
    pub keep_rate: f64,
    pub kept: usize,
    pub appeared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepRateTable {
    pub format_version: u32,
    pub top_n: usize,
    pub min_appear: usize,
    /// Indexed by class label.
    pub classes: Vec<Vec<KeepRateRow>>,
    pub global: Vec<KeepRateRow>,
}

/// Descending keep rate, then descending appearance count, then word.
pub fn rank(rows: &mut [KeepRateRow]) {
    rows.sort_by(|a, b| {
        b.keep_rate
            .total_cmp(&a.keep_rate)
            .then(b.appeared.cmp(&a.appeared))
            .then_with(|| a.word.cmp(&b.word))
    });
}

/// Aggregates decisions per (class, word) and globally. Words seen fewer
/// than `min_appear` times in a table are dropped from it; each table keeps
/// its `top_n` best rows.
pub fn keep_rate_table(
    docs: &[Document],
    decisions: &[Vec<Decision>],
    classes: usize,
    word: &dyn Fn(u32) -> String,
    top_n: usize,
    min_appear: usize,
) -> Result<KeepRateTable> {
    if min_appear == 0 {
        return Err(LeapError::config("min_appear", "must be at least 1"));
    }
    if docs.len() != decisions.len() {
        return Err(LeapError::Invalid(format!(
            "{} documents but {} traces",
            docs.len(),
            decisions.len()
        )));
    }
    let mut per_class: Vec<HashMap<u32, (usize, usize)>> = vec![HashMap::new(); classes];
    let mut global: HashMap<u32, (usize, usize)> = HashMap::new();
    for (doc, trace) in docs.iter().zip(decisions) {
        if trace.len() != doc.len() {
            return Err(LeapError::Invalid(format!(
                "trace of length {} for a document of length {}",
                trace.len(),
                doc.len()
            )));
        }
        let counts = per_class.get_mut(doc.label).ok_or_else(|| {
            LeapError::Invalid(format!("label {} outside {classes} classes", doc.label))
        })?;
        for (&tok, &d) in doc.tokens.iter().zip(trace) {
            let kept = usize::from(d == Decision::Keep);
            for table in [&mut *counts, &mut global] {
                let e = table.entry(tok).or_default();
                e.0 += kept;
                e.1 += 1;
            }
        }
    }
    let finish = |counts: HashMap<u32, (usize, usize)>| {
        let mut rows: Vec<KeepRateRow> = counts
            .into_iter()
            .filter(|&(_, (_, n))| n >= min_appear)
            .map(|(id, (kept, appeared))| KeepRateRow {
                word: word(id),
                keep_rate: kept as f64 / appeared as f64,
                kept,
                appeared,
            })
            .collect();
        rank(&mut rows);
        rows.truncate(top_n);
        rows
    };
    Ok(KeepRateTable {
        format_version: TABLE_VERSION,
        top_n,
        min_appear,
        classes: per_class.into_iter().map(finish).collect(),
        global: finish(global),
    })
}

impl KeepRateTable {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| LeapError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LeapError::io(path, e))?;
        let table: KeepRateTable = serde_json::from_str(&text)?;
        if table.format_version != TABLE_VERSION {
            return Err(LeapError::Invalid(format!(
                "{}: keep-rate table version {}",
                path.display(),
                table.format_version
            )));
        }
        Ok(table)
    }

    /// One row per entry: per-class rows first (class as its index), then
    /// global rows with class `all`. Keep rates carry 6 decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = TSV_HEADER.join("\t");
        out.push('\n');
        let labelled = self
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, rows)| rows.iter().map(move |r| (c.to_string(), r)))
            .chain(self.global.iter().map(|r| (GLOBAL_CLASS.to_string(), r)));
        for (class, r) in labelled {
            let _ = writeln!(
                out,
                "{}\t{class}\t{:.6}\t{}\t{}",
                tsv_escape(&r.word),
                r.keep_rate,
                r.kept,
                r.appeared
            );
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| LeapError::io(path, e))
    }

    /// Parses [`Self::to_tsv`] output. Keep rates are recomputed from the
    /// counts; `top_n` and `min_appear` are not stored in TSV and are taken
    /// from the arguments.
    pub fn from_tsv(text: &str, classes: usize, top_n: usize, min_appear: usize) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != TSV_HEADER.join("\t") {
            return Err(LeapError::Invalid(format!("unexpected keep-rate header {header:?}")));
        }
        let mut table = KeepRateTable {
            format_version: TABLE_VERSION,
            top_n,
            min_appear,
            classes: vec![Vec::new(); classes],
            global: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let bad = || LeapError::Invalid(format!("keep-rate row {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [word, class, _, kept, appeared] = f[..] else {
                return Err(bad());
            };
            let kept: usize = kept.parse().map_err(|_| bad())?;
            let appeared: usize = appeared.parse().map_err(|_| bad())?;
            if appeared == 0 || kept > appeared {
                return Err(bad());
            }
            let row = KeepRateRow {
                word: tsv_unescape(word),
                keep_rate: kept as f64 / appeared as f64,
                kept,
                appeared,
            };
            if class == GLOBAL_CLASS {
                table.global.push(row);
            } else {
                let c: usize = class.parse().map_err(|_| bad())?;
                table.classes.get_mut(c).ok_or_else(bad)?.push(row);
            }
        }
        Ok(table)
    }
}

fn tsv_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn tsv_unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderFormat {
    Ansi,
    Html,
    Text,
}

impl std::str::FromStr for RenderFormat {
    type Err = LeapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(RenderFormat::Ansi),
            "html" => Ok(RenderFormat::Html),
            "text" => Ok(RenderFormat::Text),
            _ => Err(LeapError::config("render_format", format!("unknown format {s:?}"))),
        }
    }
}

const ANSI_KEPT: &str = "\x1b[1;31m";
const ANSI_SKIPPED: &str = "\x1b[90m";
const ANSI_RESET: &str = "\x1b[0m";

/// Renders words in order with kept words highlighted and skipped words
/// de-emphasized. Text mode strikes skipped words through as `~~word~~`.
pub fn render_case(words: &[&str], decisions: &[Decision], format: RenderFormat) -> Result<String> {
    if words.len() != decisions.len() {
        return Err(LeapError::Invalid(format!(
            "{} words but {} decisions",
            words.len(),
            decisions.len()
        )));
    }
    let parts: Vec<String> = words
        .iter()
        .zip(decisions)
        .map(|(w, d)| match (format, d) {
            (RenderFormat::Text, Decision::Keep) => w.to_string(),
            (RenderFormat::Text, Decision::Skip) => format!("~~{w}~~"),
            (RenderFormat::Ansi, Decision::Keep) => format!("{ANSI_KEPT}{w}{ANSI_RESET}"),
            (RenderFormat::Ansi, Decision::Skip) => format!("{ANSI_SKIPPED}{w}{ANSI_RESET}"),
            (RenderFormat::Html, Decision::Keep) => {
                format!("<span class=\"kept\" style=\"color:#c00000\">{}</span>", html_escape(w))
            }
            (RenderFormat::Html, Decision::Skip) => {
                format!("<span class=\"skipped\" style=\"color:#a0a0a0\">{}</span>", html_escape(w))
            }
        })
        .collect();
    let body = parts.join(" ");
    Ok(match format {
        RenderFormat::Html => format!("<p class=\"case\">{body}</p>"),
        _ => body,
    })
}

pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}
