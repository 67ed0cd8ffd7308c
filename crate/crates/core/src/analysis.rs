//! Counterfact frequency tables and token highlighting.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;

pub const DEFAULT_THRESHOLD_FACTOR: f64 = 1.02;

/// One selected slot as stored in a prediction record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub fact: usize,
    pub counterfact: usize,
    pub score: f64,
}

/// A prediction with its selection, one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: usize,
    pub predicted: usize,
    /// Selected slots in descending score order.
    pub selection: Vec<SlotRecord>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, gold: usize, prediction: &Prediction) -> Self {
        Self {
            id: id.into(),
            gold,
            predicted: prediction.class,
            selection: prediction
                .selection
                .selected
                .iter()
                .map(|s| SlotRecord {
                    fact: s.fact,
                    counterfact: s.counterfact,
                    score: s.score,
                })
                .collect(),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.gold == self.predicted
    }
}

pub fn records_to_jsonl(records: &[PredictionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_jsonl(&text)
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    fs::write(path, records_to_jsonl(records)?).map_err(|e| Error::io(path, e))
}

/// Counterfact tally for one fact class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyRow {
    pub fact: usize,
    /// Most frequent counterfact; ties go to the lower class id.
    pub counterfact: usize,
    pub count: usize,
    /// Instances of this class that contributed.
    pub total: usize,
    pub tally: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyTable {
    pub fn contributing(&self) -> usize {
        self.rows.iter().map(|r| r.total).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, fact: usize) -> Option<&FrequencyRow> {
        self.rows.iter().find(|r| r.fact == fact)
    }
}

/// For each gold class, counts the counterfact of the highest-ranked
/// selected slot whose fact is the gold class. Instances with no such slot
/// do not contribute.
pub fn counterfact_frequency(
    records: &[PredictionRecord],
    correct_only: bool,
) -> Result<FrequencyTable> {
    let mut tallies: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in records {
        if r.selection.is_empty() {
            return Err(Error::EmptySelection(r.id.clone()));
        }
        if correct_only && !r.is_correct() {
            continue;
        }
        if let Some(slot) = r.selection.iter().find(|s| s.fact == r.gold) {
            *tallies
                .entry(r.gold)
                .or_default()
                .entry(slot.counterfact)
                .or_default() += 1;
        }
    }
    let rows = tallies
        .into_iter()
        .map(|(fact, tally)| {
            let (counterfact, count) =
                tally.iter().fold(
                    (usize::MAX, 0),
                    |best, (&j, &c)| if c > best.1 { (j, c) } else { best },
                );
            FrequencyRow {
                fact,
                counterfact,
                count,
                total: tally.values().sum(),
                tally,
            }
        })
        .collect();
    Ok(FrequencyTable { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenHighlight {
    pub token: String,
    pub score: f64,
    pub highlighted: bool,
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, b_norm: f64) -> f64 {
    let na = a.dot(&a).sqrt();
    if na == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * b_norm)
}

/// Scores each token by cosine similarity between its state (one row of
/// `states`) and `direction`, and marks tokens scoring strictly above
/// `factor` times the mean score.
pub fn highlight_tokens<S: AsRef<str>>(
    tokens: &[S],
    states: ArrayView2<'_, f64>,
    direction: ArrayView1<'_, f64>,
    factor: f64,
) -> Result<Vec<TokenHighlight>> {
    if tokens.len() != states.nrows() {
        return Err(Error::LengthMismatch {
            left: tokens.len(),
            right: states.nrows(),
        });
    }
    if states.ncols() != direction.len() {
        return Err(Error::LengthMismatch {
            left: states.ncols(),
            right: direction.len(),
        });
    }
    let norm = direction.dot(&direction).sqrt();
    if !norm.is_finite() || norm <= 1e-12 {
        return Err(Error::DegenerateDirection);
    }
    let scores: Vec<f64> = states
        .rows()
        .into_iter()
        .map(|s| cosine(s, direction, norm))
        .collect();
    Ok(threshold(tokens, &scores, factor))
}

/// Applies the strict `score > factor × mean` rule to precomputed scores.
pub fn threshold<S: AsRef<str>>(tokens: &[S], scores: &[f64], factor: f64) -> Vec<TokenHighlight> {
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    let cut = factor * mean;
    tokens
        .iter()
        .zip(scores)
        .map(|(t, &score)| TokenHighlight {
            token: t.as_ref().to_owned(),
            score,
            highlighted: score > cut,
        })
        .collect()
}

/// Which direction token states are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// The label vector of the predicted class.
    #[default]
    Fact,
    /// The difference between the predicted class and its selected
    /// counterfact.
    Contrastive,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Fact => "fact",
            Mode::Contrastive => "contrastive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fact" => Ok(Mode::Fact),
            "contrastive" => Ok(Mode::Contrastive),
            other => Err(Error::config(
                "mode",
                format!("expected fact or contrastive, got {other:?}"),
            )),
        }
    }
}

/// Highlight direction for a prediction. In contrastive mode the
/// counterfact is taken from the highest-ranked selected slot whose fact is
/// the predicted class, falling back to the runner-up logit.
pub fn direction(
    mode: Mode,
    verbalizer: ArrayView2<'_, f64>,
    prediction: &Prediction,
) -> (Array1<f64>, Option<usize>) {
    let fact = prediction.class;
    let v = verbalizer.row(fact).to_owned();
    match mode {
        Mode::Fact => (v, None),
        Mode::Contrastive => {
            let counterfact = prediction
                .selection
                .selected
                .iter()
                .find(|s| s.fact == fact)
                .map(|s| s.counterfact)
                .unwrap_or_else(|| runner_up(prediction.logits.view(), fact));
            (v - verbalizer.row(counterfact), Some(counterfact))
        }
    }
}

fn runner_up(logits: ArrayView1<'_, f64>, skip: usize) -> usize {
    let mut best = None;
    for (j, &x) in logits.iter().enumerate() {
        if j != skip && best.is_none_or(|(_, b)| x > b) {
            best = Some((j, x));
        }
    }
    best.map_or(skip, |(j, _)| j)
}

/// One highlighted sentence for the report.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudy {
    pub id: String,
    pub gold: String,
    pub predicted: String,
    pub counterfact: Option<String>,
    pub tokens: Vec<TokenHighlight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Html,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '|' => out.push_str("&#124;"),
            _ => out.push(c),
        }
    }
    out
}

fn shade(tokens: &[TokenHighlight]) -> String {
    let max = tokens.iter().map(|t| t.score).fold(0.0_f64, f64::max);
    tokens
        .iter()
        .map(|t| {
            let alpha = if max > 0.0 { (t.score.max(0.0) / max).min(1.0) } else { 0.0 };
            let text = escape(&t.token);
            let text = if t.highlighted { format!("<b>{text}</b>") } else { text };
            format!(
                "<span style=\"background-color: rgba(255, 170, 0, {alpha:.3})\" title=\"{:.4}\">{text}</span>",
                t.score
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn label(labels: &[String], id: usize) -> String {
    labels.get(id).cloned().unwrap_or_else(|| format!("#{id}"))
}

/// Renders the frequency table and case studies. Output depends only on
/// the inputs.
pub fn render_report(
    cases: &[CaseStudy],
    table: &FrequencyTable,
    labels: &[String],
    meta: &BTreeMap<String, String>,
    format: ReportFormat,
) -> String {
    let mut md = String::new();
    md.push_str("# Selection analysis\n\n## Run\n\n");
    if meta.is_empty() {
        md.push_str("_no metadata_\n");
    }
    for (k, v) in meta {
        let _ = writeln!(md, "- **{}**: {}", escape(k), escape(v));
    }

    md.push_str("\n## Most frequent counterfact per class\n\n");
    if table.is_empty() {
        md.push_str("_no contributing instances_\n");
    } else {
        md.push_str("| fact | counterfact | count | instances |\n|---|---|---:|---:|\n");
        for r in &table.rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                escape(&label(labels, r.fact)),
                escape(&label(labels, r.counterfact)),
                r.count,
                r.total
            );
        }
        let _ = writeln!(md, "\nContributing instances: {}", table.contributing());
    }

    md.push_str("\n## Token highlighting\n\n");
    if cases.is_empty() {
        md.push_str("_no cases_\n");
    }
    for c in cases {
        let _ = write!(
            md,
            "### {}\n\ngold: {}, predicted: {}",
            escape(&c.id),
            escape(&c.gold),
            escape(&c.predicted)
        );
        if let Some(cf) = &c.counterfact {
            let _ = write!(md, ", against: {}", escape(cf));
        }
        let marked: Vec<&str> = c
            .tokens
            .iter()
            .filter(|t| t.highlighted)
            .map(|t| t.token.as_str())
            .collect();
        let _ = write!(
            md,
            "\n\n{}\n\nhighlighted: {}\n\n",
            shade(&c.tokens),
            escape(&marked.join(" "))
        );
    }

    match format {
        ReportFormat::Markdown => md,
        ReportFormat::Html => to_html(&md),
    }
}

/// Minimal conversion of the report's own markdown subset.
fn to_html(md: &str) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Selection analysis</title>\n</head>\n<body>\n",
    );
    let mut in_list = false;
    let mut in_table = false;
    for line in md.lines() {
        let is_item = line.starts_with("- ");
        let is_row = line.starts_with('|');
        if in_list && !is_item {
            out.push_str("</ul>\n");
            in_list = false;
        }
        if in_table && !is_row {
            out.push_str("</table>\n");
            in_table = false;
        }
        if let Some(h) = line.strip_prefix("### ") {
            let _ = writeln!(out, "<h3>{h}</h3>");
        } else if let Some(h) = line.strip_prefix("## ") {
            let _ = writeln!(out, "<h2>{h}</h2>");
        } else if let Some(h) = line.strip_prefix("# ") {
            let _ = writeln!(out, "<h1>{h}</h1>");
        } else if let Some(item) = line.strip_prefix("- ") {
            if !in_list {
                out.push_str("<ul>\n");
                in_list = true;
            }
            let item = item.replacen("**", "<b>", 1).replacen("**", "</b>", 1);
            let _ = writeln!(out, "<li>{item}</li>");
        } else if is_row {
            if line.starts_with("|---") {
                continue;
            }
            let tag = if in_table { "td" } else { "th" };
            if !in_table {
                out.push_str("<table>\n");
                in_table = true;
            }
            let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
            out.push_str("<tr>");
            for c in cells {
                let _ = write!(out, "<{tag}>{c}</{tag}>");
            }
            out.push_str("</tr>\n");
        } else if let Some(inner) = line.strip_prefix('_').and_then(|l| l.strip_suffix('_')) {
            let _ = writeln!(out, "<p><i>{inner}</i></p>");
        } else if !line.is_empty() {
            let _ = writeln!(out, "<p>{line}</p>");
        }
    }
    if in_list {
        out.push_str("</ul>\n");
    }
    if in_table {
        out.push_str("</table>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}
