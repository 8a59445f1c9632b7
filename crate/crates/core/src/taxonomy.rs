//! Fixed label taxonomy: the 150 ADE20K classes plus a reserved unlabeled class.
//!
//! The canonical name list ships as `data/ade20k_150.tsv` and is embedded at
//! compile time. Names may be comma-separated synonym lists ("rock, stone");
//! they are used verbatim when building prompts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of semantic classes in the taxonomy.
pub const NUM_CLASSES: usize = 150;

/// Reserved label for pixels without a semantic class.
pub const UNLABELED: u8 = 255;

const ADE20K_TSV: &str = include_str!("../data/ade20k_150.tsv");

/// A semantic class index, either `0..150` or [`UNLABELED`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassIndex(u8);

impl ClassIndex {
    pub const UNLABELED: ClassIndex = ClassIndex(UNLABELED);

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_CLASSES || value == UNLABELED {
            Ok(ClassIndex(value))
        } else {
            Err(Error::Domain(format!(
                "class index {value} is outside 0..{NUM_CLASSES} and is not the unlabeled sentinel {UNLABELED}"
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn is_unlabeled(self) -> bool {
        self.0 == UNLABELED
    }

    /// Row of this class in an embedding table or palette: classes map to
    /// themselves, the unlabeled sentinel to the final row.
    pub fn row(self) -> usize {
        if self.is_unlabeled() {
            NUM_CLASSES
        } else {
            self.0 as usize
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTaxonomy {
    names: Vec<String>,
}

impl LabelTaxonomy {
    /// The built-in ADE20K-150 list.
    pub fn ade20k() -> Self {
        Self::parse(ADE20K_TSV).expect("embedded taxonomy is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `index<TAB>name` lines. Blank lines are ignored; every index in
    /// `0..150` must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<Option<String>> = vec![None; NUM_CLASSES];
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (idx, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected `index<TAB>name`".into(),
            })?;
            let idx: usize = idx.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid class index `{}`", idx.trim()),
            })?;
            if idx >= NUM_CLASSES {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("class index {idx} out of range 0..{NUM_CLASSES}"),
                });
            }
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("empty name for class {idx}"),
                });
            }
            if names[idx].is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate class index {idx}"),
                });
            }
            names[idx] = Some(name.to_string());
        }
        let missing: Vec<String> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_none())
            .map(|(i, _)| i.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: format!("missing class index(es): {}", missing.join(", ")),
            });
        }
        Ok(LabelTaxonomy {
            names: names.into_iter().map(Option::unwrap).collect(),
        })
    }

    /// Serializes back to the canonical file format (ascending indices, LF).
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.names.iter().enumerate() {
            writeln!(out, "{i}\t{name}").unwrap();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Class name for `index`; the unlabeled sentinel maps to the empty string.
    pub fn class_name(&self, index: u8) -> Result<&str> {
        let index = ClassIndex::new(index)?;
        Ok(self.name_of(index))
    }

    pub fn name_of(&self, index: ClassIndex) -> &str {
        if index.is_unlabeled() {
            ""
        } else {
            &self.names[index.get() as usize]
        }
    }

    /// All `NUM_CLASSES + 1` names in embedding-row order (unlabeled last).
    pub fn row_names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str).chain(std::iter::once(""))
    }
}

impl Default for LabelTaxonomy {
    fn default() -> Self {
        Self::ade20k()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_names() {
        let tax = LabelTaxonomy::ade20k();
        assert_eq!(tax.len(), 150);
        assert_eq!(tax.class_name(0).unwrap(), "wall");
        assert_eq!(tax.class_name(1).unwrap(), "building");
        assert_eq!(tax.class_name(34).unwrap(), "rock, stone");
        assert_eq!(tax.class_name(255).unwrap(), "");
    }

    #[test]
    fn out_of_range_index_names_value() {
        let tax = LabelTaxonomy::ade20k();
        let err = tax.class_name(150).unwrap_err().to_string();
        assert!(err.contains("150"), "{err}");
        assert!(tax.class_name(200).is_err());
    }

    #[test]
    fn duplicate_index_rejected() {
        let mut text = LabelTaxonomy::ade20k().serialize();
        text = text.replace("8\twindow\n", "7\twindow\n");
        let err = LabelTaxonomy::parse(&text).unwrap_err().to_string();
        assert!(err.contains("duplicate class index 7"), "{err}");
        assert!(err.contains("line 9"), "{err}");
    }

    #[test]
    fn missing_class_rejected() {
        let text: String = LabelTaxonomy::ade20k()
            .serialize()
            .lines()
            .take(149)
            .map(|l| format!("{l}\n"))
            .collect();
        let err = LabelTaxonomy::parse(&text).unwrap_err().to_string();
        assert!(err.contains("missing class"), "{err}");
        assert!(err.contains("149"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = LabelTaxonomy::parse("0\twall\n1 building\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn serialize_round_trips() {
        let tax = LabelTaxonomy::ade20k();
        let text = tax.serialize();
        assert_eq!(text, ADE20K_TSV);
        assert_eq!(LabelTaxonomy::parse(&text).unwrap(), tax);
        // whitespace-normalized input parses to the same taxonomy
        let messy = text.replace("\t", " \t ").replace('\n', "\n\n");
        assert_eq!(LabelTaxonomy::parse(&messy).unwrap(), tax);
    }

    #[test]
    fn names_are_nonempty() {
        let tax = LabelTaxonomy::ade20k();
        assert!(tax.row_names().take(150).all(|n| !n.is_empty()));
        assert_eq!(tax.row_names().count(), 151);
    }
}
