//! Label-based prompting: the classes present in a segmentation map become
//! the text prompt.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::SegmentationMap;
use crate::taxonomy::{ClassIndex, LabelTaxonomy, NUM_CLASSES};

pub const PROMPT_SEPARATOR: &str = ", ";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    /// Classes the prompt was built from; empty for externally supplied prompts.
    pub labels: Vec<u8>,
}

impl Prompt {
    pub fn from_text(text: impl Into<String>) -> Self {
        Prompt {
            text: text.into(),
            labels: Vec::new(),
        }
    }

    /// Comma-separated phrases of the prompt, in order.
    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.text
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
    }
}

/// Distinct labels covering at least `min_area_fraction` of the map, largest
/// area first, ties broken by ascending class index. Unlabeled pixels never
/// contribute.
pub fn extract_labels(map: &SegmentationMap, min_area_fraction: f64) -> Result<Vec<ClassIndex>> {
    if !(0.0..1.0).contains(&min_area_fraction) {
        return Err(Error::Domain(format!(
            "min_area_fraction must lie in [0, 1), got {min_area_fraction}"
        )));
    }
    let counts = map.row_counts();
    let total = (map.height() * map.width()) as f64;
    let mut present: Vec<(usize, u8)> = counts[..NUM_CLASSES]
        .iter()
        .enumerate()
        .filter(|&(_, &c)| c > 0 && c as f64 / total >= min_area_fraction)
        .map(|(i, &c)| (c, i as u8))
        .collect();
    present.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(present
        .into_iter()
        .map(|(_, i)| ClassIndex::new(i).expect("index below NUM_CLASSES"))
        .collect())
}

/// Joins class names with ", ". Multi-word names are kept verbatim.
pub fn build_prompt(labels: &[ClassIndex], taxonomy: &LabelTaxonomy) -> Result<Prompt> {
    let mut seen = [false; NUM_CLASSES + 1];
    let mut names = Vec::with_capacity(labels.len());
    let mut used = Vec::with_capacity(labels.len());
    for &label in labels {
        if label.is_unlabeled() {
            continue;
        }
        if std::mem::replace(&mut seen[label.row()], true) {
            continue;
        }
        names.push(taxonomy.class_name(label.get())?);
        used.push(label.get());
    }
    Ok(Prompt {
        text: names.join(PROMPT_SEPARATOR),
        labels: used,
    })
}

/// Convenience: `build_prompt(extract_labels(map))`.
pub fn prompt_for_map(
    map: &SegmentationMap,
    taxonomy: &LabelTaxonomy,
    min_area_fraction: f64,
) -> Result<Prompt> {
    build_prompt(&extract_labels(map, min_area_fraction)?, taxonomy)
}

/// Externally produced prompts (image tags), one `image_id<TAB>prompt` per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagFile {
    prompts: BTreeMap<String, String>,
}

impl TagFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut prompts = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, prompt) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `image_id<TAB>prompt`".into(),
            })?;
            if prompts
                .insert(id.trim().to_string(), prompt.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate image id `{}`", id.trim()),
                });
            }
        }
        Ok(TagFile { prompts })
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.prompts.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Where prompts come from: segmentation labels (`+L`) or a tag file (`+T`).
#[derive(Debug, Clone)]
pub enum PromptSource {
    Labels { min_area_fraction: f64 },
    Tags(TagFile),
}

impl PromptSource {
    pub fn prompt(
        &self,
        id: &str,
        map: &SegmentationMap,
        taxonomy: &LabelTaxonomy,
    ) -> Result<Prompt> {
        match self {
            PromptSource::Labels { min_area_fraction } => {
                prompt_for_map(map, taxonomy, *min_area_fraction)
            }
            PromptSource::Tags(tags) => tags
                .get(id)
                .map(Prompt::from_text)
                .ok_or_else(|| Error::Validation(format!("tag file has no prompt for `{id}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx(v: u8) -> ClassIndex {
        ClassIndex::new(v).unwrap()
    }

    fn map_with_counts(counts: &[(u8, usize)]) -> SegmentationMap {
        let raw: Vec<u8> = counts
            .iter()
            .flat_map(|&(l, n)| std::iter::repeat_n(l, n))
            .collect();
        SegmentationMap::from_raw(1, raw.len(), &raw).unwrap()
    }

    #[test]
    fn ordered_by_area() {
        // sky > tree > tower > building
        let m = map_with_counts(&[(1, 5), (84, 9), (2, 30), (4, 20)]);
        let labels: Vec<u8> = extract_labels(&m, 0.0).unwrap().iter().map(|l| l.get()).collect();
        assert_eq!(labels, vec![2, 4, 84, 1]);
        let p = build_prompt(&extract_labels(&m, 0.0).unwrap(), &LabelTaxonomy::ade20k()).unwrap();
        assert_eq!(p.text, "sky, tree, tower, building");
    }

    #[test]
    fn ties_break_by_index() {
        let m = map_with_counts(&[(9, 4), (3, 4), (5, 8)]);
        let labels: Vec<u8> = extract_labels(&m, 0.0).unwrap().iter().map(|l| l.get()).collect();
        assert_eq!(labels, vec![5, 3, 9]);
    }

    #[test]
    fn uniform_and_unlabeled_maps() {
        let m = SegmentationMap::uniform(4, 4, idx(12));
        assert_eq!(extract_labels(&m, 0.0).unwrap(), vec![idx(12)]);
        let u = SegmentationMap::uniform(4, 4, ClassIndex::UNLABELED);
        assert!(extract_labels(&u, 0.0).unwrap().is_empty());
        let p = prompt_for_map(&u, &LabelTaxonomy::ade20k(), 0.0).unwrap();
        assert_eq!(p.text, "");
    }

    #[test]
    fn worked_prompts() {
        let tax = LabelTaxonomy::ade20k();
        assert_eq!(build_prompt(&[idx(0), idx(1)], &tax).unwrap().text, "wall, building");
        assert_eq!(build_prompt(&[idx(34)], &tax).unwrap().text, "rock, stone");
        assert_eq!(build_prompt(&[], &tax).unwrap().text, "");
    }

    #[test]
    fn duplicates_and_unlabeled_skipped() {
        let tax = LabelTaxonomy::ade20k();
        let p = build_prompt(&[idx(2), ClassIndex::UNLABELED, idx(2), idx(4)], &tax).unwrap();
        assert_eq!(p.text, "sky, tree");
        assert_eq!(p.labels, vec![2, 4]);
    }

    #[test]
    fn min_area_filters() {
        let m = map_with_counts(&[(1, 1), (2, 9)]);
        assert_eq!(extract_labels(&m, 0.2).unwrap(), vec![idx(2)]);
        assert!(extract_labels(&m, 1.0).is_err());
        assert!(extract_labels(&m, -0.1).is_err());
    }

    #[test]
    fn tag_source() {
        let tags = TagFile::parse("a\tcat, sofa\nb\tdog\n").unwrap();
        let src = PromptSource::Tags(tags);
        let m = SegmentationMap::uniform(2, 2, idx(0));
        let tax = LabelTaxonomy::ade20k();
        assert_eq!(src.prompt("a", &m, &tax).unwrap().text, "cat, sofa");
        assert!(src.prompt("zzz", &m, &tax).is_err());
        assert!(TagFile::parse("a\tx\na\ty\n").is_err());
    }

    fn arb_map() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop_oneof![0u8..12, Just(255u8)], 1..64)
    }

    proptest! {
        #[test]
        fn shuffle_invariance(raw in arb_map(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = raw.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = SegmentationMap::from_raw(1, raw.len(), &raw).unwrap();
            let b = SegmentationMap::from_raw(1, raw.len(), &shuffled).unwrap();
            prop_assert_eq!(extract_labels(&a, 0.0).unwrap(), extract_labels(&b, 0.0).unwrap());
        }

        #[test]
        fn raising_threshold_never_adds(raw in arb_map(), lo in 0.0f64..0.5, delta in 0.0f64..0.49) {
            let m = SegmentationMap::from_raw(1, raw.len(), &raw).unwrap();
            let low = extract_labels(&m, lo).unwrap();
            let high = extract_labels(&m, lo + delta).unwrap();
            prop_assert!(high.iter().all(|l| low.contains(l)));
        }

        #[test]
        fn prompt_has_no_repeats(raw in arb_map()) {
            let m = SegmentationMap::from_raw(1, raw.len(), &raw).unwrap();
            let p = prompt_for_map(&m, &LabelTaxonomy::ade20k(), 0.0).unwrap();
            let mut labels = p.labels.clone();
            labels.sort();
            labels.dedup();
            prop_assert_eq!(labels.len(), p.labels.len());
            prop_assert!(!p.labels.contains(&255));
        }
    }
}
