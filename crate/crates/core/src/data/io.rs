use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::data::{Qualifier, Statement, Vocab, VocabBuilder};
use crate::error::{Error, Result};

/// Reads one statement per nonempty line:
/// `subject,relation,object[,qualifier_relation,qualifier_entity]*`.
pub fn parse_statements(path: &Path, vocab: &mut VocabBuilder) -> Result<Vec<Statement>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_statements_str(&text, path, vocab)
}

/// As [`parse_statements`], over text already in memory. `origin` only
/// labels error messages.
pub fn parse_statements_str(
    text: &str,
    origin: &Path,
    vocab: &mut VocabBuilder,
) -> Result<Vec<Statement>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: PathBuf::from(origin),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(err(format!("expected at least 3 fields, found {}", fields.len())));
        }
        if (fields.len() - 3) % 2 != 0 {
            return Err(err("qualifier tail must hold relation/entity pairs".into()));
        }
        if let Some(i) = fields.iter().position(|f| f.is_empty()) {
            return Err(err(format!("field {} is empty", i + 1)));
        }
        let subject = vocab.entity(fields[0]);
        let relation = vocab.relation(fields[1]);
        let object = vocab.entity(fields[2]);
        let mut seen = HashSet::new();
        let mut qualifiers = Vec::with_capacity((fields.len() - 3) / 2);
        for pair in fields[3..].chunks(2) {
            let q = Qualifier::new(vocab.relation(pair[0]), vocab.entity(pair[1]));
            if seen.insert(q) {
                qualifiers.push(q);
            } else {
                warn!(
                    "{}:{}: dropping duplicate qualifier ({}, {})",
                    origin.display(),
                    n + 1,
                    pair[0],
                    pair[1]
                );
            }
        }
        out.push(Statement::new(subject, relation, object).with_qualifiers(qualifiers));
    }
    Ok(out)
}

/// Renders a forward statement in the on-disk line format.
pub fn format_statement(statement: &Statement, vocab: &Vocab) -> String {
    let mut fields = vec![
        vocab.entity_label(statement.subject).to_owned(),
        vocab.relation_label(statement.relation),
        vocab.entity_label(statement.object).to_owned(),
    ];
    for q in &statement.qualifiers {
        fields.push(vocab.relation_label(q.relation));
        fields.push(vocab.entity_label(q.entity).to_owned());
    }
    fields.join(",")
}

pub fn write_statements(path: &Path, statements: &[Statement], vocab: &Vocab) -> Result<()> {
    let body: String = statements
        .iter()
        .map(|s| format_statement(s, vocab) + "\n")
        .collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Appends `(object, inverse(relation), subject, qualifiers)` for every
/// statement; the result is the originals followed by their inverses.
pub fn add_inverses(vocab: &Vocab, statements: &[Statement]) -> Vec<Statement> {
    let mut out = statements.to_vec();
    out.extend(statements.iter().map(|s| inverse_statement(vocab, s)));
    out
}

pub fn inverse_statement(vocab: &Vocab, s: &Statement) -> Statement {
    Statement {
        subject: s.object,
        relation: vocab.inverse(s.relation),
        object: s.subject,
        qualifiers: s.qualifiers.clone(),
    }
}
