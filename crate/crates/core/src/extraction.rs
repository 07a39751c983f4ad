//! Online template extraction with the top-ε rule.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DatasetConfig, LogRecord};
use crate::model::ModelState;
use crate::sampler::enumerate_masks;
use crate::tokenizer::{frame, TokenSequence, Tokenizer, Vocabulary, UNK_ID};

/// Rendering of a variable slot in a template.
pub const PLACEHOLDER: &str = "⟨*⟩";

/// Template and variable values extracted from one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMessage {
    pub message_index: usize,
    pub template: String,
    pub variables: Vec<String>,
    pub template_id: usize,
}

/// Grouping of messages by identical template string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateStore {
    ids: HashMap<String, usize>,
    templates: Vec<String>,
    members: Vec<Vec<usize>>,
}

impl TemplateStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `message_index` under `template` and returns the template id.
    pub fn add(&mut self, template: &str, message_index: usize) -> usize {
        let id = match self.ids.get(template) {
            Some(&id) => id,
            None => {
                let id = self.templates.len();
                self.ids.insert(template.to_string(), id);
                self.templates.push(template.to_string());
                self.members.push(Vec::new());
                id
            }
        };
        self.members[id].push(message_index);
        id
    }

    /// Number of distinct templates.
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn id_of(&self, template: &str) -> Option<usize> {
        self.ids.get(template).copied()
    }

    pub fn template(&self, id: usize) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    pub fn members(&self, id: usize) -> &[usize] {
        &self.members[id]
    }

    /// `(id, template, members)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &[usize])> {
        self.templates
            .iter()
            .zip(&self.members)
            .enumerate()
            .map(|(i, (t, m))| (i, t.as_str(), m.as_slice()))
    }
}

/// Whether `true_id` ranks within the `epsilon` most probable entries.
///
/// Ranking is by probability descending, then id ascending, so ties resolve
/// deterministically.
pub fn is_constant(probs: &[f32], true_id: usize, epsilon: usize) -> bool {
    let Some(&p) = probs.get(true_id) else {
        return false;
    };
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < true_id))
        .count();
    ahead < epsilon
}

/// Masks every framed token in turn; `true` marks a constant token.
///
/// Tokens cut off by truncation and `UNK` tokens are variables.
pub fn constant_flags(message: &TokenSequence, state: &ModelState, epsilon: usize) -> Result<Vec<bool>> {
    let samples = enumerate_masks(message);
    let frames: Vec<Vec<usize>> = samples.iter().map(|s| s.input_ids.clone()).collect();
    let probs = state.predict_frames(&frames)?;
    let mut flags = vec![false; message.tokens.len()];
    for (sample, p) in samples.iter().zip(&probs) {
        flags[sample.position - 1] = sample.target_id != UNK_ID && is_constant(p, sample.target_id, epsilon);
    }
    Ok(flags)
}

/// Joins tokens with single spaces, replacing non-constant ones by [`PLACEHOLDER`].
pub fn render_template(tokens: &[String], constant: &[bool]) -> (String, Vec<String>) {
    let mut parts = Vec::with_capacity(tokens.len());
    let mut variables = Vec::new();
    for (token, &keep) in tokens.iter().zip(constant) {
        if keep {
            parts.push(token.as_str());
        } else {
            parts.push(PLACEHOLDER);
            variables.push(token.clone());
        }
    }
    (parts.join(" "), variables)
}

/// Template of one message; `template_id` is left at 0 until grouping.
pub fn extract_template(message: &TokenSequence, state: &ModelState, epsilon: usize) -> Result<ParsedMessage> {
    let flags = constant_flags(message, state, epsilon)?;
    let (template, variables) = render_template(&message.tokens, &flags);
    Ok(ParsedMessage {
        message_index: message.message_index,
        template,
        variables,
        template_id: 0,
    })
}

/// Extracts all messages in parallel and groups them by template.
pub fn parse_sequences(
    messages: &[TokenSequence],
    state: &ModelState,
    epsilon: usize,
) -> Result<(Vec<ParsedMessage>, TemplateStore)> {
    let mut parsed = messages
        .par_iter()
        .map(|m| extract_template(m, state, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let mut store = TemplateStore::new();
    for p in &mut parsed {
        p.template_id = store.add(&p.template, p.message_index);
    }
    Ok((parsed, store))
}

/// Tokenizes and frames records for a trained model.
pub fn frame_records(
    records: &[LogRecord],
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    frame_length: usize,
) -> Vec<TokenSequence> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| frame(i, tokenizer.tokenize(&r.content), frame_length - 1, vocab))
        .collect()
}

/// Parses every record with the dataset's filter and ε.
pub fn parse_corpus(
    records: &[LogRecord],
    state: &ModelState,
    vocab: &Vocabulary,
    config: &DatasetConfig,
) -> Result<(Vec<ParsedMessage>, TemplateStore)> {
    if vocab.len() != state.config().vocab_size {
        return Err(Error::Validation(format!(
            "vocabulary has {} entries, model head has {}",
            vocab.len(),
            state.config().vocab_size
        )));
    }
    let tokenizer = Tokenizer::new(&config.tokenization_filter)?;
    let seqs = frame_records(records, &tokenizer, vocab, state.config().frame_length);
    parse_sequences(&seqs, state, config.epsilon as usize)
}

/// One row of the parsed-message CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRow {
    pub line_id: u64,
    pub template_id: usize,
    pub template: String,
    /// JSON array of strings.
    pub variables: String,
}

impl ParsedRow {
    pub fn variable_list(&self) -> Result<Vec<String>> {
        serde_json::from_str(&self.variables)
            .map_err(|e| Error::Format(format!("line {}: bad variables field: {e}", self.line_id)))
    }
}

/// Writes `line_id,template_id,template,variables`.
pub fn write_parsed_csv(path: impl AsRef<Path>, records: &[LogRecord], parsed: &[ParsedMessage]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for p in parsed {
        w.serialize(ParsedRow {
            line_id: records[p.message_index].line_id,
            template_id: p.template_id,
            template: p.template.clone(),
            variables: serde_json::to_string(&p.variables).expect("strings serialize"),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_parsed_csv(path: impl AsRef<Path>) -> Result<Vec<ParsedRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<ParsedRow>, _>>()?;
    Ok(rows)
}

/// Writes `template_id,template,count`.
pub fn write_templates_csv(path: impl AsRef<Path>, store: &TemplateStore) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["template_id", "template", "count"])?;
    for (id, template, members) in store.iter() {
        w.write_record([id.to_string(), template.to_string(), members.len().to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
