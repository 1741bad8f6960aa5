use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, EOS, SOS};
use crate::error::{Error, Result};

pub const MIND_TEMPLATE: &str = "News Title: {title}; News Abstract: {abstract?}; News Category: {category}";
pub const GOODREADS_TEMPLATE: &str = "Book Title: {title}; Book Description: {abstract?}";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Literal(String),
    Field { name: String, optional: bool },
}

/// Text template with `{field}` (required) and `{field?}` (optional) placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    parts: Vec<Part>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Template> {
        let mut parts = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(Part::Literal(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::config(format!("unclosed placeholder in template {source:?}")))?
                + open;
            let inner = &rest[open + 1..close];
            let (name, optional) = match inner.strip_suffix('?') {
                Some(n) => (n, true),
                None => (inner, false),
            };
            if name.is_empty() {
                return Err(Error::config(format!("empty placeholder in template {source:?}")));
            }
            parts.push(Part::Field {
                name: name.to_string(),
                optional,
            });
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            parts.push(Part::Literal(rest.to_string()));
        }
        Ok(Template {
            source: source.to_string(),
            parts,
        })
    }

    pub fn named(name: &str) -> Result<Template> {
        match name {
            "mind" => Template::parse(MIND_TEMPLATE),
            "goodreads" => Template::parse(GOODREADS_TEMPLATE),
            other => Template::parse(other),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Field { name, .. } => Some(name.as_str()),
            Part::Literal(_) => None,
        })
    }

    fn lookup<'a>(&self, fields: &'a BTreeMap<String, String>, name: &str, optional: bool) -> Result<&'a str> {
        match fields.get(name) {
            Some(v) => Ok(v),
            None if optional => Ok(""),
            None => Err(Error::config(format!("template field {name} has no value"))),
        }
    }

    pub fn format(&self, fields: &BTreeMap<String, String>) -> Result<String> {
        let mut out = String::new();
        for p in &self.parts {
            match p {
                Part::Literal(s) => out.push_str(s),
                Part::Field { name, optional } => out.push_str(self.lookup(fields, name, *optional)?),
            }
        }
        Ok(out)
    }

    /// `[SOS]` + template tokens with each field truncated to its cap + `[EOS]`.
    pub fn token_ids(&self, fields: &BTreeMap<String, String>, vocab: &Vocab, caps: &FieldCaps) -> Result<Vec<u32>> {
        let mut ids = vec![SOS];
        for p in &self.parts {
            match p {
                Part::Literal(s) => ids.extend(vocab.encode(s)),
                Part::Field { name, optional } => {
                    let toks = vocab.encode(self.lookup(fields, name, *optional)?);
                    ids.extend(truncate_field(&toks, caps.get(name)));
                }
            }
        }
        ids.push(EOS);
        Ok(ids)
    }
}

/// Per-field token caps; fields without a cap are kept whole.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldCaps(pub BTreeMap<String, usize>);

impl FieldCaps {
    pub fn mind() -> Self {
        FieldCaps(BTreeMap::from([("title".into(), 32), ("abstract".into(), 72)]))
    }

    pub fn goodreads() -> Self {
        FieldCaps(BTreeMap::from([("title".into(), 24), ("abstract".into(), 85)]))
    }

    pub fn for_template(name: &str) -> Self {
        match name {
            "goodreads" => Self::goodreads(),
            _ => Self::mind(),
        }
    }

    pub fn get(&self, field: &str) -> Option<usize> {
        self.0.get(field).copied()
    }
}

/// Keeps the prefix of a field's tokens.
pub fn truncate_field(ids: &[u32], cap: Option<usize>) -> &[u32] {
    match cap {
        Some(c) if ids.len() > c => &ids[..c],
        _ => ids,
    }
}

/// Applies per-field caps, assembles `title` then `abstract` and wraps with `[SOS]`/`[EOS]`.
pub fn truncate_item(title_ids: &[u32], abstract_ids: &[u32], caps: &FieldCaps) -> Vec<u32> {
    let mut ids = vec![SOS];
    ids.extend_from_slice(truncate_field(title_ids, caps.get("title")));
    ids.extend_from_slice(truncate_field(abstract_ids, caps.get("abstract")));
    ids.push(EOS);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn mind_template() {
        let t = Template::named("mind").unwrap();
        let f = fields(&[("title", "A"), ("abstract", "B"), ("category", "C")]);
        assert_eq!(t.format(&f).unwrap(), "News Title: A; News Abstract: B; News Category: C");
        let f = fields(&[("title", "A"), ("abstract", ""), ("category", "C")]);
        assert_eq!(t.format(&f).unwrap(), "News Title: A; News Abstract: ; News Category: C");
        let f = fields(&[("title", "A"), ("category", "C")]);
        assert_eq!(t.format(&f).unwrap(), "News Title: A; News Abstract: ; News Category: C");
    }

    #[test]
    fn custom_book_template() {
        let t = Template::parse("Book Title: {title}; Book Description: {desc}").unwrap();
        let f = fields(&[("title", "X"), ("desc", "Y")]);
        assert_eq!(t.format(&f).unwrap(), "Book Title: X; Book Description: Y");
    }

    #[test]
    fn missing_required_field_is_an_error() {
        let t = Template::named("mind").unwrap();
        assert!(t.format(&fields(&[("title", "A")])).is_err());
        assert!(Template::parse("x {unclosed").is_err());
    }

    #[test]
    fn field_caps_keep_prefix() {
        let caps = FieldCaps::mind();
        let title: Vec<u32> = (10..50).collect();
        let abs: Vec<u32> = (100..110).collect();
        let ids = truncate_item(&title, &abs, &caps);
        assert_eq!(ids.len(), 1 + 32 + 10 + 1);
        assert_eq!(&ids[1..33], &title[..32]);
        assert_eq!(&ids[33..43], &abs[..]);

        let desc: Vec<u32> = (0..100).collect();
        assert_eq!(truncate_field(&desc, FieldCaps::goodreads().get("abstract")).len(), 85);
    }

    #[test]
    fn mind_history_budget_holds() {
        // Overlong fields everywhere: every item stays within 124 tokens, so 60 items fit 7,440.
        let long: String = (0..200).map(|i| format!("w{i} ")).collect();
        let corpus = [long.as_str(), MIND_TEMPLATE, "lifestyle"];
        let vocab = Vocab::build(corpus, 1000).unwrap();
        let t = Template::named("mind").unwrap();
        let f = fields(&[("title", &long), ("abstract", &long), ("category", "lifestyle")]);
        let ids = t.token_ids(&f, &vocab, &FieldCaps::mind()).unwrap();
        assert!(ids.len() <= 32 + 72 + 20, "{}", ids.len());
        assert!(60 * ids.len() <= 7440);
        assert_eq!(ids[0], SOS);
        assert_eq!(*ids.last().unwrap(), EOS);
    }
}
