use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered attribute and object vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabSpec {
    attributes: Vec<String>,
    objects: Vec<String>,
}

/// Words used by the prompt templates; primitive names may not collide.
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "object"];

impl VocabSpec {
    pub fn new(attributes: Vec<String>, objects: Vec<String>) -> Result<Self> {
        if attributes.is_empty() || objects.is_empty() {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for name in attributes.iter().chain(&objects) {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "primitive name `{name}` must be a single non-empty word"
                )));
            }
            if TEMPLATE_WORDS.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "primitive name `{name}` collides with a template word"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate primitive name `{name}`")));
            }
        }
        Ok(VocabSpec { attributes, objects })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn attr_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::Vocabulary(name.to_string()))
    }

    pub fn obj_index(&self, name: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o == name)
            .ok_or_else(|| Error::Vocabulary(name.to_string()))
    }

    pub fn pair(&self, attr: &str, obj: &str) -> Result<Pair> {
        Ok(Pair::new(self.attr_index(attr)?, self.obj_index(obj)?))
    }

    pub fn pair_name(&self, p: Pair) -> String {
        format!("{} {}", self.attributes[p.attr], self.objects[p.obj])
    }

    /// All pairs in attribute-major order.
    pub fn all_pairs(&self) -> Vec<Pair> {
        (0..self.n_attrs())
            .flat_map(|a| (0..self.n_objs()).map(move |o| Pair::new(a, o)))
            .collect()
    }
}

/// An (attribute, object) composition, by vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Pair { attr, obj }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.attr, self.obj)
    }
}

/// Candidate search space at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum World {
    /// Seen plus the declared unseen pairs.
    Closed,
    /// Every attribute-object combination.
    Open,
}

impl World {
    pub fn as_str(self) -> &'static str {
        match self {
            World::Closed => "closed",
            World::Open => "open",
        }
    }
}

impl std::str::FromStr for World {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(Error::Config(format!(
                "world must be `closed` or `open`, got `{other}`"
            ))),
        }
    }
}

/// Vocabulary plus the seen/unseen composition split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    vocab: VocabSpec,
    seen: Vec<Pair>,
    unseen: Vec<Pair>,
}

impl LabelSpace {
    /// Validates disjointness and primitive coverage of the seen set.
    pub fn new(vocab: VocabSpec, seen: Vec<Pair>, unseen: Vec<Pair>) -> Result<Self> {
        let seen: BTreeSet<Pair> = seen.into_iter().collect();
        let unseen: BTreeSet<Pair> = unseen.into_iter().collect();
        for p in seen.iter().chain(&unseen) {
            if p.attr >= vocab.n_attrs() || p.obj >= vocab.n_objs() {
                return Err(Error::Config(format!("pair {p} outside the vocabulary")));
            }
        }
        if let Some(p) = seen.intersection(&unseen).next() {
            return Err(Error::Config(format!(
                "pair {} is both seen and unseen",
                vocab.pair_name(*p)
            )));
        }
        for a in 0..vocab.n_attrs() {
            if !seen.iter().any(|p| p.attr == a) {
                return Err(Error::Config(format!(
                    "attribute `{}` has no seen pair",
                    vocab.attributes()[a]
                )));
            }
        }
        for o in 0..vocab.n_objs() {
            if !seen.iter().any(|p| p.obj == o) {
                return Err(Error::Config(format!(
                    "object `{}` has no seen pair",
                    vocab.objects()[o]
                )));
            }
        }
        Ok(LabelSpace {
            vocab,
            seen: seen.into_iter().collect(),
            unseen: unseen.into_iter().collect(),
        })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    /// Seen pairs in attribute-major order.
    pub fn seen(&self) -> &[Pair] {
        &self.seen
    }

    pub fn unseen(&self) -> &[Pair] {
        &self.unseen
    }

    pub fn is_seen(&self, p: Pair) -> bool {
        self.seen.binary_search(&p).is_ok()
    }

    pub fn is_unseen(&self, p: Pair) -> bool {
        self.unseen.binary_search(&p).is_ok()
    }

    pub fn seen_index(&self, p: Pair) -> Option<usize> {
        self.seen.binary_search(&p).ok()
    }

    /// Candidate compositions in attribute-major order.
    pub fn candidates(&self, world: World) -> Vec<Pair> {
        match world {
            World::Closed => {
                let mut all: Vec<Pair> = self.seen.iter().chain(&self.unseen).copied().collect();
                all.sort();
                all
            }
            World::Open => self.vocab.all_pairs(),
        }
    }

    /// One `seen|unseen<TAB>attr<TAB>obj` line per pair, attribute-major, so
    /// the vocabulary order can be recovered from first appearances.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in self.vocab.all_pairs() {
            let tag = if self.is_seen(p) {
                "seen"
            } else if self.is_unseen(p) {
                "unseen"
            } else {
                continue;
            };
            out.push_str(&format!(
                "{tag}\t{}\t{}\n",
                self.vocab.attributes()[p.attr],
                self.vocab.objects()[p.obj]
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut attrs: Vec<String> = Vec::new();
        let mut objs: Vec<String> = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [tag, a, o] = fields[..] else {
                return Err(Error::Format(format!(
                    "label space line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            };
            let seen = match tag {
                "seen" => true,
                "unseen" => false,
                other => {
                    return Err(Error::Format(format!(
                        "label space line {}: unknown tag `{other}`",
                        n + 1
                    )))
                }
            };
            if !attrs.iter().any(|x| x == a) {
                attrs.push(a.to_string());
            }
            if !objs.iter().any(|x| x == o) {
                objs.push(o.to_string());
            }
            rows.push((seen, a.to_string(), o.to_string()));
        }
        let vocab = VocabSpec::new(attrs, objs)?;
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        for (is_seen, a, o) in rows {
            let p = vocab.pair(&a, &o)?;
            if is_seen {
                seen.push(p);
            } else {
                unseen.push(p);
            }
        }
        LabelSpace::new(vocab, seen, unseen)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Splits `A × O` into seen and unseen pairs.
///
/// A seeded "diagonal" covering every attribute and object goes into the
/// seen set first; the rest of the seen set is sampled uniformly.
pub fn split_compositions(vocab: &VocabSpec, seen_fraction: f64, seed: u64) -> Result<LabelSpace> {
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(Error::Config(format!(
            "seen fraction must be in (0, 1), got {seen_fraction}"
        )));
    }
    let (na, no) = (vocab.n_attrs(), vocab.n_objs());
    let total = na * no;
    if total < na + no {
        return Err(Error::Config(format!(
            "{na}×{no} vocabulary has too few pairs to cover every primitive"
        )));
    }
    let target = (seen_fraction * total as f64).round() as usize;
    let cover = na.max(no);
    if target < cover {
        return Err(Error::Config(format!(
            "{target} seen pairs cannot cover {na} attributes and {no} objects"
        )));
    }
    if target >= total {
        return Err(Error::Config(format!(
            "seen fraction {seen_fraction} leaves no unseen pairs"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attr_perm: Vec<usize> = (0..na).collect();
    let mut obj_perm: Vec<usize> = (0..no).collect();
    attr_perm.shuffle(&mut rng);
    obj_perm.shuffle(&mut rng);

    let mut seen: BTreeSet<Pair> = (0..cover)
        .map(|i| Pair::new(attr_perm[i % na], obj_perm[i % no]))
        .collect();
    let mut rest: Vec<Pair> = vocab
        .all_pairs()
        .into_iter()
        .filter(|p| !seen.contains(p))
        .collect();
    rest.shuffle(&mut rng);
    let extra = target - seen.len();
    seen.extend(rest.drain(..extra));
    LabelSpace::new(vocab.clone(), seen.into_iter().collect(), rest)
}
