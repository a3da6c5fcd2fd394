//! Client-side oblivious transform: sensitive attribute detection, candidate
//! expansion and extraction of the real latent.
//!
//! Candidates are ordered by value index only, never by which values the real
//! prompt carries, so every member of an equivalence class expands to the same
//! ordered set. Detected spans are rewritten with each value's canonical
//! surface form; the real prompt is represented by its canonical rewrite.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DEFAULT_LEXICON: &str = include_str!("../assets/lexicon.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeValue {
    pub canonical: String,
    /// Lowercase surface forms, canonical first.
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeClass {
    pub name: String,
    pub values: Vec<AttributeValue>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeLexicon {
    classes: Vec<AttributeClass>,
}

impl Default for AttributeLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon parses")
    }
}

impl AttributeLexicon {
    pub fn new(classes: Vec<AttributeClass>) -> Result<Self> {
        let lex = Self { classes };
        lex.validate()?;
        Ok(lex)
    }

    fn validate(&self) -> Result<()> {
        let mut seen_classes = HashSet::new();
        let mut seen_forms = HashSet::new();
        for class in &self.classes {
            if !seen_classes.insert(class.name.as_str()) {
                return Err(Error::Config(format!("duplicate class {}", class.name)));
            }
            if class.values.is_empty() {
                return Err(Error::Config(format!("class {} has no values", class.name)));
            }
            let mut values = HashSet::new();
            for v in &class.values {
                if !values.insert(v.canonical.as_str()) {
                    return Err(Error::Config(format!(
                        "value {} repeated in class {}",
                        v.canonical, class.name
                    )));
                }
                for form in &v.synonyms {
                    if form.is_empty() || form.trim() != form {
                        return Err(Error::Config(format!("bad surface form {form:?}")));
                    }
                    if !seen_forms.insert(form.as_str()) {
                        return Err(Error::Config(format!(
                            "surface form {form:?} appears more than once"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses the sectioned text format:
    ///
    /// ```text
    /// [gender]
    /// male: man, men
    /// female: woman
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes: Vec<AttributeClass> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                classes.push(AttributeClass {
                    name: name.trim().to_string(),
                    values: Vec::new(),
                });
                continue;
            }
            let class = classes.last_mut().ok_or_else(|| {
                Error::Config(format!("line {}: value before any [class] header", lineno + 1))
            })?;
            let (canonical, rest) = line.split_once(':').unwrap_or((line, ""));
            let canonical = canonical.trim().to_ascii_lowercase();
            if canonical.is_empty() {
                return Err(Error::Config(format!("line {}: empty value", lineno + 1)));
            }
            let mut synonyms = vec![canonical.clone()];
            synonyms.extend(
                rest.split(',')
                    .map(|s| s.trim().to_ascii_lowercase())
                    .filter(|s| !s.is_empty() && *s != canonical),
            );
            class.values.push(AttributeValue {
                canonical,
                synonyms,
            });
        }
        Self::new(classes)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for class in &self.classes {
            out.push_str(&format!("[{}]\n", class.name));
            for v in &class.values {
                out.push_str(&format!("{}: {}\n", v.canonical, v.synonyms[1..].join(", ")));
            }
            out.push('\n');
        }
        out
    }

    pub fn classes(&self) -> &[AttributeClass] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Sub-lexicon holding only the named classes, in this lexicon's order.
    pub fn restricted(&self, names: &[&str]) -> Result<Self> {
        for n in names {
            if self.class_index(n).is_none() {
                return Err(Error::Config(format!("unknown attribute class {n}")));
            }
        }
        Self::new(
            self.classes
                .iter()
                .filter(|c| names.contains(&c.name.as_str()))
                .cloned()
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    /// Byte span in the normalised prompt.
    pub start: usize,
    pub end: usize,
    pub class: usize,
    pub value: usize,
}

impl Detection {
    pub fn class_name<'a>(&self, lex: &'a AttributeLexicon) -> &'a str {
        &lex.classes[self.class].name
    }

    pub fn value_name<'a>(&self, lex: &'a AttributeLexicon) -> &'a str {
        &lex.classes[self.class].values[self.value].canonical
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-'
}

/// Case-insensitive longest-match scan over the lexicon's surface forms.
/// Only the first occurrence of each class is reported; results are in prompt
/// order, with spans relative to [`normalize_prompt`].
pub fn detect_attributes(prompt: &str, lex: &AttributeLexicon) -> Vec<Detection> {
    let norm = normalize_prompt(prompt);
    let lower = norm.to_ascii_lowercase();
    let mut seen = vec![false; lex.classes.len()];
    let mut found = Vec::new();
    let mut resume = 0;
    let mut prev: Option<char> = None;
    for (i, ch) in lower.char_indices() {
        let at_word_start = prev.map_or(true, |p| !is_word_char(p));
        prev = Some(ch);
        if i < resume || !at_word_start || !is_word_char(ch) {
            continue;
        }
        let rest = &lower[i..];
        let mut best: Option<(usize, usize, usize)> = None;
        for (ci, class) in lex.classes.iter().enumerate() {
            for (vi, value) in class.values.iter().enumerate() {
                for form in &value.synonyms {
                    if !rest.starts_with(form.as_str()) {
                        continue;
                    }
                    let bounded = rest[form.len()..]
                        .chars()
                        .next()
                        .map_or(true, |c| !is_word_char(c));
                    if bounded && best.map_or(true, |(len, _, _)| form.len() > len) {
                        best = Some((form.len(), ci, vi));
                    }
                }
            }
        }
        if let Some((len, class, value)) = best {
            resume = i + len;
            if seen[class] {
                log::warn!(
                    "attribute class {} occurs more than once; only the first is transformed",
                    lex.classes[class].name
                );
            } else {
                seen[class] = true;
                found.push(Detection {
                    start: i,
                    end: i + len,
                    class,
                    value,
                });
            }
        }
    }
    found
}

/// Ordered candidate prompts plus the client-private index of the real one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    prompts: Vec<String>,
    real_index: usize,
}

impl CandidateSet {
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn real_index(&self) -> usize {
        self.real_index
    }

    pub fn real_prompt(&self) -> &str {
        &self.prompts[self.real_index]
    }

    /// Moves the real prompt to the front. This leaks the real index and exists
    /// only as a negative control for the indistinguishability checks.
    pub fn leaky_real_first(&self) -> CandidateSet {
        let mut prompts = self.prompts.clone();
        let real = prompts.remove(self.real_index);
        prompts.insert(0, real);
        CandidateSet {
            prompts,
            real_index: 0,
        }
    }
}

/// Cartesian product over the detected classes' full value spaces, substituted
/// into the detected spans. Candidates are ordered lexicographically by value
/// index with classes in lexicon order, the first class most significant.
pub fn expand_candidates(
    prompt: &str,
    dets: &[Detection],
    lex: &AttributeLexicon,
) -> Result<CandidateSet> {
    let norm = normalize_prompt(prompt);
    let mut by_pos = dets.to_vec();
    by_pos.sort_by_key(|d| d.start);
    let mut classes_seen = HashSet::new();
    let mut last_end = 0;
    for d in &by_pos {
        let class = lex
            .classes
            .get(d.class)
            .ok_or_else(|| Error::Input(format!("detection names unknown class {}", d.class)))?;
        if d.value >= class.values.len() {
            return Err(Error::Input(format!(
                "detection value {} outside class {}",
                d.value, class.name
            )));
        }
        if d.start < last_end
            || d.end > norm.len()
            || d.start >= d.end
            || !norm.is_char_boundary(d.start)
            || !norm.is_char_boundary(d.end)
        {
            return Err(Error::Input(format!(
                "detection span {}..{} is invalid for this prompt",
                d.start, d.end
            )));
        }
        if !classes_seen.insert(d.class) {
            return Err(Error::Input(format!("class {} detected twice", class.name)));
        }
        last_end = d.end;
    }

    // Detected classes in lexicon order, each with its slot in `by_pos`.
    let mut order: Vec<(usize, usize)> = by_pos.iter().enumerate().map(|(slot, d)| (d.class, slot)).collect();
    order.sort();
    let radices: Vec<usize> = order.iter().map(|&(c, _)| lex.classes[c].values.len()).collect();
    let total: usize = radices.iter().product();

    let mut prompts = Vec::with_capacity(total);
    let mut choice = vec![0usize; by_pos.len()];
    for combo in 0..total {
        let mut rem = combo;
        for (k, &(_, slot)) in order.iter().enumerate().rev() {
            choice[slot] = rem % radices[k];
            rem /= radices[k];
        }
        let mut text = String::with_capacity(norm.len() + 16);
        let mut cursor = 0;
        for (slot, d) in by_pos.iter().enumerate() {
            text.push_str(&norm[cursor..d.start]);
            text.push_str(&lex.classes[d.class].values[choice[slot]].canonical);
            cursor = d.end;
        }
        text.push_str(&norm[cursor..]);
        if text.trim().is_empty() {
            return Err(Error::Internal("substitution produced an empty prompt".into()));
        }
        prompts.push(text);
    }

    let mut real_index = 0;
    for &(_, slot) in &order {
        let d = &by_pos[slot];
        real_index = real_index * lex.classes[d.class].values.len() + d.value;
    }
    Ok(CandidateSet {
        prompts,
        real_index,
    })
}

/// Detection followed by expansion.
pub fn transform(prompt: &str, lex: &AttributeLexicon) -> Result<CandidateSet> {
    if normalize_prompt(prompt).is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    expand_candidates(prompt, &detect_attributes(prompt, lex), lex)
}

/// Picks the real row out of a server batch `[N, ...]`.
pub fn extract_latent(batch: &Tensor, cset: &CandidateSet) -> Result<Tensor> {
    if batch.shape().is_empty() || batch.rows() != cset.len() {
        return Err(Error::protocol(
            0,
            format!(
                "server returned {} latents for {} candidates",
                batch.rows(),
                cset.len()
            ),
        ));
    }
    batch.row(cset.real_index)
}
