//! Word-level prompt tokenization.

use std::collections::HashMap;

use super::vocab::{VocabSpec, TEMPLATE_WORDS};
use crate::concept::ConceptKind;
use crate::error::{Error, Result};

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;

/// Which trainable class embedding fills a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Attribute(usize),
    Object(usize),
}

/// A rendered prompt: a concept's template with its class words filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: ConceptKind,
    words: Vec<String>,
    slots: Vec<(usize, SlotKind)>,
}

impl PromptTemplate {
    /// `attr` is ignored for object prompts and `obj` for attribute prompts.
    pub fn render(kind: ConceptKind, vocab: &VocabSpec, attr: usize, obj: usize) -> Result<Self> {
        let a = || {
            vocab
                .attributes()
                .get(attr)
                .cloned()
                .ok_or_else(|| Error::Vocabulary(format!("attribute #{attr}")))
        };
        let o = || {
            vocab
                .objects()
                .get(obj)
                .cloned()
                .ok_or_else(|| Error::Vocabulary(format!("object #{obj}")))
        };
        let mut words: Vec<String> = ["a", "photo", "of"].iter().map(|s| s.to_string()).collect();
        let mut slots = Vec::new();
        match kind {
            ConceptKind::Composition => {
                slots.push((words.len(), SlotKind::Attribute(attr)));
                words.push(a()?);
                slots.push((words.len(), SlotKind::Object(obj)));
                words.push(o()?);
            }
            ConceptKind::Attribute => {
                slots.push((words.len(), SlotKind::Attribute(attr)));
                words.push(a()?);
                words.push("object".to_string());
            }
            ConceptKind::Object => {
                slots.push((words.len(), SlotKind::Object(obj)));
                words.push(o()?);
            }
        }
        Ok(PromptTemplate { kind, words, slots })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    /// Class slots as 0-based word indices.
    pub fn class_slots(&self) -> &[(usize, SlotKind)] {
        &self.slots
    }
}

/// Token ids with `[CLS]` at position 0, padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    /// Number of non-pad positions including `[CLS]`.
    pub valid_len: usize,
    /// Class slots as sequence positions (word index + 1).
    pub class_slots: Vec<(usize, SlotKind)>,
}

/// Word vocabulary: `[CLS]`, `[PAD]`, template words, attributes, objects.
#[derive(Debug, Clone)]
pub struct TokenVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn new(vocab: &VocabSpec) -> Self {
        let mut words = vec!["[CLS]".to_string(), "[PAD]".to_string()];
        words.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        words.extend(vocab.attributes().iter().cloned());
        words.extend(vocab.objects().iter().cloned());
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        TokenVocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<TokenizedPrompt> {
        let valid_len = words.len() + 1;
        if valid_len > max_len {
            return Err(Error::Config(format!(
                "prompt of {} words exceeds max_text_len {max_len}",
                words.len()
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        for w in words {
            ids.push(self.id(w.as_ref())?);
        }
        ids.resize(max_len, PAD_ID);
        Ok(TokenizedPrompt {
            ids,
            valid_len,
            class_slots: Vec::new(),
        })
    }

    pub fn tokenize_prompt(&self, prompt: &PromptTemplate, max_len: usize) -> Result<TokenizedPrompt> {
        let mut t = self.tokenize(prompt.words(), max_len)?;
        t.class_slots = prompt.class_slots().iter().map(|&(i, k)| (i + 1, k)).collect();
        Ok(t)
    }
}
