use std::fmt;

/// The three concept streams of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConceptKind {
    Attribute,
    Object,
    Composition,
}

impl ConceptKind {
    pub const ALL: [ConceptKind; 3] = [
        ConceptKind::Attribute,
        ConceptKind::Object,
        ConceptKind::Composition,
    ];

    /// Short tag used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            ConceptKind::Attribute => "attr",
            ConceptKind::Object => "obj",
            ConceptKind::Composition => "comp",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}
