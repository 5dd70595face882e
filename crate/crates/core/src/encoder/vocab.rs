use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const NUM_RESERVED: usize = 3;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["[PAD]", "[MASK]", "[UNK]"];
const HEADER: &str = "#vocab v1 reserved PAD=0 MASK=1 UNK=2";

/// Clinical code strings mapped to token ids; ids `0..3` are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            codes: RESERVED_NAMES.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
        }
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_codes<S: AsRef<str>>(codes: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut v = Vocabulary::new();
        for c in codes {
            v.insert(c.as_ref())?;
        }
        Ok(v)
    }

    /// Adds a code and returns its id; re-inserting an existing code is an error.
    pub fn insert(&mut self, code: &str) -> Result<usize> {
        if code.is_empty() || code.contains(['\t', '\n', '\r']) {
            return Err(Error::Vocabulary(format!("invalid code string {code:?}")));
        }
        if RESERVED_NAMES.contains(&code) {
            return Err(Error::Vocabulary(format!("{code} is reserved")));
        }
        if self.ids.contains_key(code) {
            return Err(Error::Vocabulary(format!("duplicate code {code}")));
        }
        let id = self.codes.len();
        self.codes.push(code.to_string());
        self.ids.insert(code.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.len() == NUM_RESERVED
    }

    pub fn id(&self, code: &str) -> Option<usize> {
        self.ids.get(code).copied()
    }

    pub fn require(&self, code: &str) -> Result<usize> {
        self.id(code)
            .ok_or_else(|| Error::Vocabulary(format!("unknown code {code}")))
    }

    pub fn code(&self, id: usize) -> Option<&str> {
        self.codes.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < NUM_RESERVED
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.codes.len() * 12);
        out.push_str(HEADER);
        out.push('\n');
        for (id, code) in self.codes.iter().enumerate().skip(NUM_RESERVED) {
            let _ = writeln!(out, "{id}\t{code}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            what: "vocabulary",
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(bad(1, format!("expected header {HEADER:?}"))),
        }
        let mut v = Vocabulary::new();
        for (i, line) in lines {
            let (id, code) = line
                .split_once('\t')
                .ok_or_else(|| bad(i + 1, "expected `id<TAB>code`".into()))?;
            let id: usize = id.parse().map_err(|e| bad(i + 1, format!("{e}")))?;
            if id != v.len() {
                return Err(bad(i + 1, format!("id {id} out of sequence, expected {}", v.len())));
            }
            v.insert(code).map_err(|e| bad(i + 1, e.to_string()))?;
        }
        Ok(v)
    }
}
