//! CoNLL-2009 reading and writing.
//!
//! Each token row has 14 fixed tab-separated columns
//!
//! ```text
//! ID FORM LEMMA PLEMMA POS PPOS FEAT PFEAT HEAD PHEAD DEPREL PDEPREL FILLPRED PRED
//! ```
//!
//! followed by one argument column per predicate of the sentence, in
//! document order. Sentences are separated by blank lines and `_` marks
//! an empty cell.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const FIXED_COLUMNS: usize = 14;
pub const EMPTY: &str = "_";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub plemma: String,
    pub pos: String,
    pub ppos: String,
    pub feat: String,
    pub pfeat: String,
    pub head: Option<usize>,
    pub phead: Option<usize>,
    pub deprel: String,
    pub pdeprel: String,
    pub fill_pred: bool,
    pub sense: Option<String>,
    /// One cell per predicate of the sentence; `None` for `_`.
    pub args: Vec<Option<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// 0-based token indices of predicate rows, in order.
    pub fn predicate_rows(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.fill_pred)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One sentence paired with one of its predicates.
#[derive(Clone, Debug, PartialEq)]
pub struct PredicateInstance {
    pub sentence: Arc<Sentence>,
    pub sentence_index: usize,
    /// Which argument column of the sentence belongs to this predicate.
    pub column: usize,
    /// 1-based predicate position.
    pub position: usize,
    pub sense: String,
    /// Gold role per token; `None` for non-arguments.
    pub roles: Vec<Option<String>>,
}

impl PredicateInstance {
    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    /// 0-based predicate row.
    pub fn row(&self) -> usize {
        self.position - 1
    }

    pub fn predicate(&self) -> &Token {
        &self.sentence.tokens[self.row()]
    }

    pub fn gold(&self) -> Prediction {
        Prediction {
            sense: self.sense.clone(),
            roles: self.roles.clone(),
        }
    }
}

/// Predicted labels for one predicate instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub sense: String,
    pub roles: Vec<Option<String>>,
}

fn cell(s: &str) -> Option<String> {
    (s != EMPTY).then(|| s.to_string())
}

fn opt(s: &Option<String>) -> &str {
    s.as_deref().unwrap_or(EMPTY)
}

fn parse_head(s: &str, line: usize) -> Result<Option<usize>> {
    if s == EMPTY {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("invalid head `{s}`"),
    })
}

fn parse_row(line: &str, line_no: usize, expected_id: usize) -> Result<Token> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < FIXED_COLUMNS {
        return Err(Error::Parse {
            line: line_no,
            message: format!(
                "expected at least {FIXED_COLUMNS} columns, found {}",
                cols.len()
            ),
        });
    }
    let id: usize = cols[0].parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("invalid token id `{}`", cols[0]),
    })?;
    if id != expected_id {
        return Err(Error::Parse {
            line: line_no,
            message: format!("token id {id} where {expected_id} was expected"),
        });
    }
    let fill_pred = match cols[12] {
        "Y" => true,
        EMPTY => false,
        other => {
            return Err(Error::Parse {
                line: line_no,
                message: format!("FILLPRED must be `Y` or `_`, found `{other}`"),
            })
        }
    };
    Ok(Token {
        id,
        form: cols[1].to_string(),
        lemma: cols[2].to_string(),
        plemma: cols[3].to_string(),
        pos: cols[4].to_string(),
        ppos: cols[5].to_string(),
        feat: cols[6].to_string(),
        pfeat: cols[7].to_string(),
        head: parse_head(cols[8], line_no)?,
        phead: parse_head(cols[9], line_no)?,
        deprel: cols[10].to_string(),
        pdeprel: cols[11].to_string(),
        fill_pred,
        sense: cell(cols[13]),
        args: cols[FIXED_COLUMNS..].iter().map(|s| cell(s)).collect(),
    })
}

fn finish_sentence(tokens: Vec<Token>, first_line: usize) -> Result<Sentence> {
    let predicates = tokens.iter().filter(|t| t.fill_pred).count();
    for (k, t) in tokens.iter().enumerate() {
        if t.args.len() != predicates {
            return Err(Error::Parse {
                line: first_line + k,
                message: format!(
                    "{} argument columns for a sentence with {predicates} predicates",
                    t.args.len()
                ),
            });
        }
    }
    Ok(Sentence { tokens })
}

/// Parses a whole corpus. Accepts LF and CRLF line endings.
pub fn parse_corpus(text: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut first_line = 0;
    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sentences.push(finish_sentence(std::mem::take(&mut tokens), first_line)?);
            }
            continue;
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(parse_row(line, line_no, tokens.len() + 1)?);
    }
    if !tokens.is_empty() {
        sentences.push(finish_sentence(tokens, first_line)?);
    }
    Ok(sentences)
}

fn write_token(out: &mut String, t: &Token) {
    let head = |h: Option<usize>| h.map_or_else(|| EMPTY.to_string(), |h| h.to_string());
    let _ = write!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        t.id,
        t.form,
        t.lemma,
        t.plemma,
        t.pos,
        t.ppos,
        t.feat,
        t.pfeat,
        head(t.head),
        head(t.phead),
        t.deprel,
        t.pdeprel,
        if t.fill_pred { "Y" } else { EMPTY },
        opt(&t.sense),
    );
    for a in &t.args {
        out.push('\t');
        out.push_str(opt(a));
    }
    out.push('\n');
}

/// Serializes sentences with LF line endings, one blank line after each.
pub fn write_corpus(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for t in &s.tokens {
            write_token(&mut out, t);
        }
        out.push('\n');
    }
    out
}

/// One instance per predicate row, in document order.
pub fn extract_instances(sentences: &[Sentence]) -> Vec<PredicateInstance> {
    let mut out = Vec::new();
    for (si, s) in sentences.iter().enumerate() {
        let shared = Arc::new(s.clone());
        for (column, row) in s.predicate_rows().into_iter().enumerate() {
            let tok = &s.tokens[row];
            out.push(PredicateInstance {
                sentence: Arc::clone(&shared),
                sentence_index: si,
                column,
                position: row + 1,
                sense: tok.sense.clone().unwrap_or_else(|| EMPTY.to_string()),
                roles: s.tokens.iter().map(|t| t.args[column].clone()).collect(),
            });
        }
    }
    out
}

/// Replaces gold senses and roles by `predictions`, which must follow the
/// order of [`extract_instances`].
pub fn apply_predictions(
    sentences: &[Sentence],
    predictions: &[Prediction],
) -> Result<Vec<Sentence>> {
    let total: usize = sentences.iter().map(|s| s.predicate_rows().len()).sum();
    if total != predictions.len() {
        return Err(Error::Misaligned(format!(
            "{} predictions for {total} predicates",
            predictions.len()
        )));
    }
    let mut out = sentences.to_vec();
    let mut next = predictions.iter();
    for s in &mut out {
        for (column, row) in s.predicate_rows().into_iter().enumerate() {
            let p = next.next().expect("counted above");
            if p.roles.len() != s.tokens.len() {
                return Err(Error::Misaligned(format!(
                    "{} role labels for a sentence of {} tokens",
                    p.roles.len(),
                    s.tokens.len()
                )));
            }
            s.tokens[row].sense = Some(p.sense.clone());
            for (t, r) in s.tokens.iter_mut().zip(&p.roles) {
                t.args[column] = r.clone();
            }
        }
    }
    Ok(out)
}

pub fn write_predictions(sentences: &[Sentence], predictions: &[Prediction]) -> Result<String> {
    Ok(write_corpus(&apply_predictions(sentences, predictions)?))
}
