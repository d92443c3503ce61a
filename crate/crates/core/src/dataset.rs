//! In-memory dataset model and the per-class study partitions built from it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::mask::{decode_rle, rasterize_polygons, PixelMask};
use crate::rng::Stream;

/// Classes dropped from COCO hallucination runs (their annotations are too
/// incomplete for negatives to be trusted).
pub const COCO_HR_EXCLUSIONS: [&str; 3] = ["keyboard", "dining table", "sports ball"];
/// Class dropped from COCO perception runs.
pub const COCO_PA_EXCLUSIONS: [&str; 1] = ["person"];

/// SHA-256 digest of an image's raw bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(ContentHash(out))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        ContentHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

/// Segmentation of one object instance, kept in its source encoding until a
/// mask is requested.
#[derive(Debug, Clone, PartialEq)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(Vec<u64>),
    /// Mask stored outside the annotation file; resolved by the loader.
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub content_ref: String,
    pub content_hash: ContentHash,
    pub width: usize,
    pub height: usize,
    pub classes_present: BTreeSet<String>,
    /// Instance segmentations keyed by class name.
    pub segments: BTreeMap<String, Vec<Segmentation>>,
}

impl ImageRecord {
    pub fn contains(&self, class: &str) -> bool {
        self.classes_present.contains(class)
    }

    /// Union mask of every polygon/RLE instance of `class`. External masks are
    /// skipped here; `Ok(None)` means no in-file segmentation exists.
    pub fn rasterize_class(&self, class: &str) -> Result<Option<PixelMask>> {
        let Some(segs) = self.segments.get(class) else {
            return Ok(None);
        };
        let mut out: Option<PixelMask> = None;
        for seg in segs {
            let m = match seg {
                Segmentation::Polygons(p) => rasterize_polygons(p, self.width, self.height)?,
                Segmentation::Rle(c) => decode_rle(c, self.width, self.height)?,
                Segmentation::External(_) => continue,
            };
            match out.as_mut() {
                Some(acc) => acc.union_with(&m)?,
                None => out = Some(m),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    images: Vec<ImageRecord>,
    index: BTreeMap<String, usize>,
    classes: BTreeSet<String>,
    supercategories: BTreeMap<String, String>,
}

impl Dataset {
    /// Build from records. Image ids must be unique.
    pub fn new(
        images: Vec<ImageRecord>,
        categories: impl IntoIterator<Item = (String, Option<String>)>,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut classes = BTreeSet::new();
        let mut supercategories = BTreeMap::new();
        for (name, sup) in categories {
            if let Some(s) = sup {
                supercategories.insert(name.clone(), s);
            }
            classes.insert(name);
        }
        for (i, rec) in images.iter().enumerate() {
            if index.insert(rec.image_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate image id `{}`",
                    rec.image_id
                )));
            }
            classes.extend(rec.classes_present.iter().cloned());
        }
        Ok(Dataset { images, index, classes, supercategories })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn classes(&self) -> &BTreeSet<String> {
        &self.classes
    }

    pub fn supercategory(&self, class: &str) -> Option<&str> {
        self.supercategories.get(class).map(String::as_str)
    }

    pub fn supercategory_map(&self) -> &BTreeMap<String, String> {
        &self.supercategories
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn require_class(&self, target: &str) -> Result<()> {
        if self.classes.contains(target) {
            Ok(())
        } else {
            Err(Error::UnknownClass(target.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StudySetup {
    Recognition,
    HrSupercategory,
    HrRandomOutside,
    HrArtificial,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassStudy {
    pub target: String,
    pub positives: Vec<String>,
    pub negative_pool_spurious_candidates: Vec<String>,
    pub negative_pool_baseline: Option<Vec<String>>,
    pub setup: StudySetup,
}

impl ClassStudy {
    /// The pool a spuriosity ranking is built over.
    pub fn ranking_pool(&self) -> &[String] {
        match self.setup {
            StudySetup::Recognition => &self.positives,
            _ => &self.negative_pool_spurious_candidates,
        }
    }

    /// Positives never overlap a negative pool.
    pub fn is_partition_sound(&self) -> bool {
        let pos: BTreeSet<&String> = self.positives.iter().collect();
        let clash = |pool: &[String]| pool.iter().any(|id| pos.contains(id));
        !clash(&self.negative_pool_spurious_candidates)
            && !self.negative_pool_baseline.as_deref().is_some_and(clash)
    }
}

/// Seeded fixed-size sampling of the supercategory pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSampling {
    pub n: usize,
    pub seed: u64,
}

pub fn build_recognition_study(ds: &Dataset, target: &str) -> Result<ClassStudy> {
    ds.require_class(target)?;
    let positives: Vec<String> = ds
        .images
        .iter()
        .filter(|r| r.contains(target))
        .map(|r| r.image_id.clone())
        .collect();
    if positives.is_empty() {
        return Err(Error::EmptyPool { pool: "positive", target: target.to_string() });
    }
    Ok(ClassStudy {
        target: target.to_string(),
        positives,
        negative_pool_spurious_candidates: Vec::new(),
        negative_pool_baseline: None,
        setup: StudySetup::Recognition,
    })
}

/// Negatives that share the target's supercategory (spurious candidates) and
/// negatives drawn only from other supercategories (baseline).
pub fn build_hr_supercategory_study(
    ds: &Dataset,
    target: &str,
    sampling: Option<PoolSampling>,
) -> Result<ClassStudy> {
    ds.require_class(target)?;
    let sup = ds
        .supercategory(target)
        .ok_or_else(|| Error::NoSupercategory(target.to_string()))?;
    let mut same = Vec::new();
    let mut other = Vec::new();
    for rec in &ds.images {
        if rec.contains(target) || rec.classes_present.is_empty() {
            continue;
        }
        let shares = rec.classes_present.iter().any(|c| ds.supercategory(c) == Some(sup));
        if shares {
            same.push(rec.image_id.clone());
        } else {
            other.push(rec.image_id.clone());
        }
    }
    if same.is_empty() {
        return Err(Error::EmptyPool { pool: "same-supercategory", target: target.to_string() });
    }
    if other.is_empty() {
        return Err(Error::EmptyPool { pool: "other-supercategory", target: target.to_string() });
    }
    if let Some(PoolSampling { n, seed }) = sampling {
        same = Stream::for_purpose(seed, &format!("hr-supercategory/spurious/{target}"))
            .sample(&same, n);
        other = Stream::for_purpose(seed, &format!("hr-supercategory/baseline/{target}"))
            .sample(&other, n);
    }
    Ok(ClassStudy {
        target: target.to_string(),
        positives: Vec::new(),
        negative_pool_spurious_candidates: same,
        negative_pool_baseline: Some(other),
        setup: StudySetup::HrSupercategory,
    })
}

/// Uniform seeded sample of `min(n, available)` images lacking the target.
pub fn build_hr_random_outside_study(
    ds: &Dataset,
    target: &str,
    n: usize,
    seed: u64,
) -> Result<ClassStudy> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outside: Vec<String> = ds
        .images
        .iter()
        .filter(|r| !r.contains(target))
        .map(|r| r.image_id.clone())
        .collect();
    if outside.is_empty() {
        return Err(Error::EmptyPool { pool: "outside-class", target: target.to_string() });
    }
    let pool = Stream::for_purpose(seed, &format!("hr-random-outside/{target}")).sample(&outside, n);
    Ok(ClassStudy {
        target: target.to_string(),
        positives: Vec::new(),
        negative_pool_spurious_candidates: pool,
        negative_pool_baseline: None,
        setup: StudySetup::HrRandomOutside,
    })
}

/// Images that contain the target and carry a segmentation for it; the
/// pipeline evaluates their object-removed variants as negatives.
pub fn build_hr_artificial_study(ds: &Dataset, target: &str) -> Result<ClassStudy> {
    ds.require_class(target)?;
    let pool: Vec<String> = ds
        .images
        .iter()
        .filter(|r| r.contains(target) && r.segments.get(target).is_some_and(|s| !s.is_empty()))
        .map(|r| r.image_id.clone())
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyPool { pool: "masked-positive", target: target.to_string() });
    }
    Ok(ClassStudy {
        target: target.to_string(),
        positives: Vec::new(),
        negative_pool_spurious_candidates: pool,
        negative_pool_baseline: None,
        setup: StudySetup::HrArtificial,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExclusionRecord {
    pub applied: Vec<String>,
    /// Requested exclusions that matched no class (no-ops).
    pub unknown: Vec<String>,
}

/// Drop the named classes from a batch's class list.
pub fn exclude_classes(classes: &[String], exclusions: &[String]) -> (Vec<String>, ExclusionRecord) {
    let excl: BTreeSet<&str> = exclusions.iter().map(String::as_str).collect();
    let kept = classes.iter().filter(|c| !excl.contains(c.as_str())).cloned().collect();
    let mut record = ExclusionRecord::default();
    for e in exclusions {
        if classes.iter().any(|c| c == e) {
            record.applied.push(e.clone());
        } else {
            record.unknown.push(e.clone());
        }
    }
    (kept, record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(id: &str, classes: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            content_ref: format!("{id}.png"),
            content_hash: ContentHash::default(),
            width: 4,
            height: 4,
            classes_present: classes.iter().map(|c| c.to_string()).collect(),
            segments: BTreeMap::new(),
        }
    }

    fn cats() -> Vec<(String, Option<String>)> {
        [
            ("dog", "animal"),
            ("cat", "animal"),
            ("fork", "kitchen"),
            ("spoon", "kitchen"),
            ("car", "vehicle"),
        ]
        .iter()
        .map(|(c, s)| (c.to_string(), Some(s.to_string())))
        .collect()
    }

    #[test]
    fn recognition_positives() {
        let mut imgs: Vec<ImageRecord> =
            (0..5).map(|i| rec(&format!("d{i}"), &["dog"])).collect();
        imgs.extend((0..3).map(|i| rec(&format!("c{i}"), &["cat"])));
        let ds = Dataset::new(imgs, cats()).unwrap();
        let st = build_recognition_study(&ds, "dog").unwrap();
        assert_eq!(st.positives.len(), 5);
        assert!(st.negative_pool_spurious_candidates.is_empty());
        assert_eq!(build_recognition_study(&ds, "zebra"), Err(Error::UnknownClass("zebra".into())));
    }

    #[test]
    fn recognition_whole_dataset() {
        let ds = Dataset::new((0..4).map(|i| rec(&format!("d{i}"), &["dog", "cat"])).collect(), cats())
            .unwrap();
        assert_eq!(build_recognition_study(&ds, "dog").unwrap().positives.len(), ds.len());
    }

    #[test]
    fn supercategory_membership() {
        let ds = Dataset::new(
            vec![
                rec("a", &["spoon"]),
                rec("b", &["fork", "spoon"]),
                rec("c", &["car"]),
                rec("d", &["spoon", "car"]),
            ],
            cats(),
        )
        .unwrap();
        let st = build_hr_supercategory_study(&ds, "fork", None).unwrap();
        assert_eq!(st.negative_pool_spurious_candidates, vec!["a", "d"]);
        assert_eq!(st.negative_pool_baseline, Some(vec!["c".to_string()]));
        assert!(st.is_partition_sound());
    }

    #[test]
    fn supercategory_empty_pool_named() {
        let ds = Dataset::new(vec![rec("a", &["spoon"])], cats()).unwrap();
        match build_hr_supercategory_study(&ds, "fork", None) {
            Err(Error::EmptyPool { pool, .. }) => assert_eq!(pool, "other-supercategory"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_outside_clamps_and_repeats() {
        let mut imgs: Vec<ImageRecord> =
            (0..100).map(|i| rec(&format!("n{i:03}"), &["cat"])).collect();
        imgs.push(rec("dog0", &["dog"]));
        let ds = Dataset::new(imgs, cats()).unwrap();
        let a = build_hr_random_outside_study(&ds, "dog", 5000, 1).unwrap();
        assert_eq!(a.negative_pool_spurious_candidates.len(), 100);
        let b = build_hr_random_outside_study(&ds, "dog", 5000, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exclusions() {
        let classes: Vec<String> = (0..77)
            .map(|i| format!("c{i}"))
            .chain(COCO_HR_EXCLUSIONS.iter().map(|s| s.to_string()))
            .collect();
        let excl: Vec<String> = COCO_HR_EXCLUSIONS.iter().map(|s| s.to_string()).collect();
        let (kept, record) = exclude_classes(&classes, &excl);
        assert_eq!(kept.len(), 77);
        assert_eq!(record.applied.len(), 3);
        let (same, rec2) = exclude_classes(&classes, &[]);
        assert_eq!(same, classes);
        assert!(rec2.applied.is_empty() && rec2.unknown.is_empty());
        let (_, rec3) = exclude_classes(&classes, &["unicorn".to_string()]);
        assert_eq!(rec3.unknown, vec!["unicorn"]);
    }

    #[test]
    fn hash_hex_roundtrip() {
        let h = ContentHash([0xab; 32]);
        assert_eq!(ContentHash::from_hex(&h.to_hex()), Some(h));
        assert_eq!(ContentHash::from_hex("zz"), None);
    }
}
