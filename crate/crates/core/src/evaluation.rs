//! Parsing accuracy, template edit distance and robustness summaries.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use crate::error::{Error, Result};
use crate::extraction::{ParsedMessage, PLACEHOLDER};
use crate::ingest::LogRecord;
use crate::tokenizer::Tokenizer;

/// Placeholder used by the benchmark ground-truth templates.
pub const TRUTH_PLACEHOLDER: &str = "<*>";

/// Fraction of messages whose predicted group has exactly the members of
/// their ground-truth group.
pub fn parsing_accuracy<P, T>(predicted: &[P], truth: &[T]) -> Result<f64>
where
    P: Eq + Hash,
    T: Eq + Hash,
{
    if predicted.len() != truth.len() {
        return Err(Error::Validation(format!(
            "predicted covers {} messages, truth covers {}",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let mut truth_sizes: HashMap<&T, usize> = HashMap::new();
    for t in truth {
        *truth_sizes.entry(t).or_default() += 1;
    }
    let mut groups: HashMap<&P, Vec<usize>> = HashMap::new();
    for (i, p) in predicted.iter().enumerate() {
        groups.entry(p).or_default().push(i);
    }
    let correct: usize = groups
        .values()
        .filter(|members| {
            let label = &truth[members[0]];
            truth_sizes[label] == members.len() && members.iter().all(|&i| &truth[i] == label)
        })
        .map(Vec::len)
        .sum();
    Ok(correct as f64 / truth.len() as f64)
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Tokenizes with the dataset filter, renders any placeholder-bearing token
/// as `⟨*⟩` and joins with single spaces.
pub fn normalize_template(template: &str, tokenizer: &Tokenizer) -> String {
    tokenizer
        .tokenize(template)
        .iter()
        .map(|t| {
            if t.contains(TRUTH_PLACEHOLDER) || t.contains(PLACEHOLDER) {
                PLACEHOLDER
            } else {
                t.as_str()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn truth_of(record: &LogRecord) -> Result<&str> {
    record.truth_template.as_deref().ok_or_else(|| {
        Error::Validation(format!("line {} has no ground-truth template", record.line_id))
    })
}

fn mean_distance<'a>(
    pairs: impl Iterator<Item = Result<(&'a str, &'a str)>>,
    tokenizer: &Tokenizer,
) -> Result<f64> {
    let mut total = 0usize;
    let mut n = 0usize;
    for pair in pairs {
        let (predicted, truth) = pair?;
        total += levenshtein(
            &normalize_template(predicted, tokenizer),
            &normalize_template(truth, tokenizer),
        );
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total as f64 / n as f64 })
}

/// Mean normalized edit distance between predicted and true templates.
pub fn mean_template_edit_distance(
    parsed: &[ParsedMessage],
    records: &[LogRecord],
    tokenizer: &Tokenizer,
) -> Result<f64> {
    if parsed.len() != records.len() {
        return Err(Error::Validation(format!(
            "{} parsed messages for {} records",
            parsed.len(),
            records.len()
        )));
    }
    mean_distance(
        parsed
            .iter()
            .map(|p| Ok((p.template.as_str(), truth_of(&records[p.message_index])?))),
        tokenizer,
    )
}

/// Same metric for a parser that returns every message verbatim.
pub fn baseline_edit_distance(records: &[LogRecord], tokenizer: &Tokenizer) -> Result<f64> {
    mean_distance(
        records.iter().map(|r| Ok((r.content.as_str(), truth_of(r)?))),
        tokenizer,
    )
}

/// Minimum, quartiles and maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiveNumberSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn robustness_summary(per_dataset: &[(String, f64)]) -> Result<FiveNumberSummary> {
    if per_dataset.is_empty() {
        return Err(Error::Validation("robustness summary needs at least one score".into()));
    }
    let mut v: Vec<f64> = per_dataset.iter().map(|(_, s)| *s).collect();
    v.sort_by(f64::total_cmp);
    Ok(FiveNumberSummary {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Predicted group size next to the truth group its first member belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateDiagnostic {
    pub template: String,
    pub predicted_count: usize,
    pub truth_event: String,
    pub truth_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub dataset: String,
    pub parsing_accuracy: f64,
    pub mean_edit_distance: f64,
    pub templates: Vec<TemplateDiagnostic>,
}

fn truth_label(record: &LogRecord) -> Result<&str> {
    record
        .truth_event_id
        .as_deref()
        .or(record.truth_template.as_deref())
        .ok_or_else(|| Error::Validation(format!("line {} has no ground-truth event", record.line_id)))
}

/// Scores a parse against records that carry ground truth.
///
/// Truth groups come from event ids, falling back to template strings.
pub fn evaluate(
    dataset: &str,
    parsed: &[ParsedMessage],
    records: &[LogRecord],
    tokenizer: &Tokenizer,
) -> Result<EvaluationReport> {
    if parsed.len() != records.len() {
        return Err(Error::Validation(format!(
            "{} parsed messages for {} records",
            parsed.len(),
            records.len()
        )));
    }
    let mut by_index: Vec<Option<usize>> = vec![None; records.len()];
    for p in parsed {
        match by_index.get_mut(p.message_index) {
            Some(slot @ None) => *slot = Some(p.template_id),
            _ => {
                return Err(Error::Validation(format!(
                    "message index {} is missing or duplicated",
                    p.message_index
                )))
            }
        }
    }
    let predicted: Vec<usize> = by_index.into_iter().map(|x| x.expect("checked above")).collect();
    let truth = records.iter().map(truth_label).collect::<Result<Vec<_>>>()?;
    let pa = parsing_accuracy(&predicted, &truth)?;
    let edit = mean_template_edit_distance(parsed, records, tokenizer)?;

    let mut truth_sizes: HashMap<&str, usize> = HashMap::new();
    for t in &truth {
        *truth_sizes.entry(t).or_default() += 1;
    }
    let mut diag: Vec<TemplateDiagnostic> = Vec::new();
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for p in parsed {
        match seen.get(&p.template_id) {
            Some(&k) => diag[k].predicted_count += 1,
            None => {
                let label = truth[p.message_index];
                seen.insert(p.template_id, diag.len());
                diag.push(TemplateDiagnostic {
                    template: p.template.clone(),
                    predicted_count: 1,
                    truth_event: label.to_string(),
                    truth_count: truth_sizes[label],
                });
            }
        }
    }
    Ok(EvaluationReport {
        dataset: dataset.to_string(),
        parsing_accuracy: pa,
        mean_edit_distance: edit,
        templates: diag,
    })
}

/// Writes `dataset,PA,mean_edit_distance`, one row per report.
pub fn write_report_csv(path: impl AsRef<Path>, reports: &[EvaluationReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "PA", "mean_edit_distance"])?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            format!("{:.6}", r.parsing_accuracy),
            format!("{:.6}", r.mean_edit_distance),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the per-dataset scores followed by the five-number summary.
pub fn write_robustness_csv(path: impl AsRef<Path>, scores: &[(String, f64)]) -> Result<()> {
    let path = path.as_ref();
    let s = robustness_summary(scores)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["name", "value"])?;
    for (name, v) in scores {
        w.write_record([name.clone(), format!("{v:.6}")])?;
    }
    for (name, v) in [
        ("min", s.min),
        ("q1", s.q1),
        ("median", s.median),
        ("q3", s.q3),
        ("max", s.max),
    ] {
        w.write_record([name.to_string(), format!("{v:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
