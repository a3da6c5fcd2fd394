//! Portrait prompt corpus from `$placeholder` templates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oblivious::{detect_attributes, AttributeLexicon};
use crate::tensor::Rng;

const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.yaml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt: String,
    pub template: usize,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Template {
    pieces: Vec<Piece>,
    /// Distinct slot names in order of first appearance.
    slots: Vec<String>,
}

fn parse_template(src: &str) -> Template {
    let mut pieces = Vec::new();
    let mut slots: Vec<String> = Vec::new();
    let mut text = String::new();
    let mut chars = src.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let starts_slot = c == '$'
            && src[i + 1..]
                .chars()
                .next()
                .is_some_and(|n| n.is_ascii_alphabetic() || n == '_');
        if !starts_slot {
            text.push(c);
            continue;
        }
        let mut name = String::new();
        while let Some(&(_, n)) = chars.peek() {
            if n.is_ascii_alphanumeric() || n == '_' {
                name.push(n);
                chars.next();
            } else {
                break;
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(std::mem::take(&mut text)));
        }
        if !slots.contains(&name) {
            slots.push(name.clone());
        }
        pieces.push(Piece::Slot(name));
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Template { pieces, slots }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<Template>,
    values: BTreeMap<String, Vec<String>>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES, &AttributeLexicon::default()).expect("bundled templates parse")
    }
}

impl TemplateSet {
    /// Parses a YAML mapping with a `template` list of strings and optional
    /// value lists keyed by placeholder name. Placeholders without a list take
    /// the canonical values of the lexicon class of the same name.
    pub fn parse(yaml: &str, lex: &AttributeLexicon) -> Result<Self> {
        let doc: BTreeMap<String, Vec<String>> = serde_yaml::from_str(yaml)
            .map_err(|e| Error::Template(format!("template file: {e}")))?;
        let mut doc = doc;
        let raw = doc
            .remove("template")
            .ok_or_else(|| Error::Template("missing `template` list".into()))?;
        if raw.is_empty() {
            return Err(Error::Template("template list is empty".into()));
        }
        let mut values = doc;
        for class in lex.classes() {
            values
                .entry(class.name.clone())
                .or_insert_with(|| class.values.iter().map(|v| v.canonical.clone()).collect());
        }
        let templates: Vec<Template> = raw.iter().map(|t| parse_template(t)).collect();
        for (i, t) in templates.iter().enumerate() {
            for slot in &t.slots {
                match values.get(slot) {
                    None => {
                        return Err(Error::Template(format!(
                            "template {} uses unknown placeholder ${slot}",
                            i + 1
                        )))
                    }
                    Some(v) if v.is_empty() => {
                        return Err(Error::Template(format!("placeholder ${slot} has no values")))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { templates, values })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    fn render(&self, index: usize, choice: &BTreeMap<String, String>) -> PromptRecord {
        let t = &self.templates[index];
        let mut prompt = String::new();
        for p in &t.pieces {
            match p {
                Piece::Text(s) => prompt.push_str(s),
                Piece::Slot(name) => prompt.push_str(&choice[name]),
            }
        }
        PromptRecord {
            prompt,
            template: index,
            attributes: choice.clone(),
        }
    }

    /// Every instantiation of every template, templates in file order and
    /// slots varying fastest at the last placeholder.
    pub fn enumerate(&self) -> Vec<PromptRecord> {
        let mut out = Vec::new();
        for (i, t) in self.templates.iter().enumerate() {
            let radices: Vec<usize> = t.slots.iter().map(|s| self.values[s].len()).collect();
            let total: usize = radices.iter().product();
            for combo in 0..total {
                let mut rem = combo;
                let mut choice = BTreeMap::new();
                for (slot, &r) in t.slots.iter().zip(&radices).rev() {
                    choice.insert(slot.clone(), self.values[slot][rem % r].clone());
                    rem /= r;
                }
                out.push(self.render(i, &choice));
            }
        }
        out
    }

    /// `count` records with uniformly drawn templates and values.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<PromptRecord> {
        let mut rng = Rng::new(seed);
        (0..count)
            .map(|_| {
                let i = rng.next_below(self.templates.len());
                let choice = self.templates[i]
                    .slots
                    .iter()
                    .map(|s| {
                        let vals = &self.values[s];
                        (s.clone(), vals[rng.next_below(vals.len())].clone())
                    })
                    .collect();
                self.render(i, &choice)
            })
            .collect()
    }
}

pub fn to_json_lines(records: &[PromptRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serialisable"));
        out.push('\n');
    }
    out
}

/// Detected `class → canonical value` for the prompt.
pub fn detected_attributes(prompt: &str, lex: &AttributeLexicon) -> BTreeMap<String, String> {
    detect_attributes(prompt, lex)
        .iter()
        .map(|d| (d.class_name(lex).to_string(), d.value_name(lex).to_string()))
        .collect()
}

/// Error naming the first record whose detected attributes differ from the
/// recorded assignment (restricted to lexicon classes).
pub fn verify_redetection(records: &[PromptRecord], lex: &AttributeLexicon) -> Result<()> {
    for r in records {
        let expected: BTreeMap<String, String> = r
            .attributes
            .iter()
            .filter(|(k, _)| lex.class_index(k).is_some())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let got = detected_attributes(&r.prompt, lex);
        if got != expected {
            return Err(Error::Template(format!(
                "prompt {:?} re-detects as {got:?}, recorded {expected:?}",
                r.prompt
            )));
        }
    }
    Ok(())
}
