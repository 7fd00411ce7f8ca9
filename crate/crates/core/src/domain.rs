//! Shared vocabulary: classes, grids, masks with provenance, scans and the
//! Dice similarity coefficient.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
}

/// Ordered class roster with an optional old/new split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    classes: Vec<ClassInfo>,
    old: Vec<ClassId>,
    new: Vec<ClassId>,
}

pub const DEFAULT_OLD_CLASSES: [&str; 5] =
    ["liver", "spleen", "left_kidney", "right_kidney", "pancreas"];
pub const DEFAULT_NEW_CLASSES: [&str; 4] = ["stomach", "postcava", "aorta", "gall_bladder"];

impl ClassCatalog {
    /// Builds a catalog; ids are assigned 0.. in the order of `names`.
    pub fn new(names: &[&str], old: &[&str], new: &[&str]) -> Result<Self> {
        let classes: Vec<ClassInfo> = names
            .iter()
            .enumerate()
            .map(|(i, n)| ClassInfo {
                id: ClassId(i as u16),
                name: (*n).to_string(),
            })
            .collect();
        let mut seen = BTreeSet::new();
        for c in &classes {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Domain(format!("duplicate class name {:?}", c.name)));
            }
        }
        let mut catalog = ClassCatalog {
            classes,
            old: Vec::new(),
            new: Vec::new(),
        };
        catalog.old = catalog.resolve_names(old)?;
        catalog.new = catalog.resolve_names(new)?;
        catalog.check_split()?;
        Ok(catalog)
    }

    pub fn from_parts(
        classes: Vec<ClassInfo>,
        old: Vec<ClassId>,
        new: Vec<ClassId>,
    ) -> Result<Self> {
        for (i, c) in classes.iter().enumerate() {
            if c.id.index() != i {
                return Err(Error::Domain(format!(
                    "class ids must be contiguous from 0; found {} at position {i}",
                    c.id
                )));
            }
        }
        let catalog = ClassCatalog { classes, old, new };
        catalog.check_split()?;
        Ok(catalog)
    }

    /// The nine-class abdominal roster: five old classes followed by four new.
    pub fn abdominal() -> Self {
        let names: Vec<&str> = DEFAULT_OLD_CLASSES
            .iter()
            .chain(DEFAULT_NEW_CLASSES.iter())
            .copied()
            .collect();
        ClassCatalog::new(&names, &DEFAULT_OLD_CLASSES, &DEFAULT_NEW_CLASSES)
            .expect("default catalog is well formed")
    }

    fn check_split(&self) -> Result<()> {
        let old: BTreeSet<_> = self.old.iter().copied().collect();
        let new: BTreeSet<_> = self.new.iter().copied().collect();
        if old.len() != self.old.len() || new.len() != self.new.len() {
            return Err(Error::Domain("duplicate class in old/new split".into()));
        }
        if let Some(c) = old.intersection(&new).next() {
            return Err(Error::Domain(format!("class {c} is both old and new")));
        }
        for id in old.iter().chain(new.iter()) {
            if !self.contains(*id) {
                return Err(Error::Domain(format!("unknown class {id} in split")));
            }
        }
        if !old.is_empty() && !new.is_empty() && old.len() + new.len() != self.classes.len() {
            return Err(Error::Domain(
                "old and new classes must cover the catalog".into(),
            ));
        }
        Ok(())
    }

    fn resolve_names(&self, names: &[&str]) -> Result<Vec<ClassId>> {
        names.iter().map(|n| self.id_of(n)).collect()
    }

    pub fn id_of(&self, name: &str) -> Result<ClassId> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.id)
            .ok_or_else(|| Error::Domain(format!("unknown class {name:?}")))
    }

    pub fn name_of(&self, id: ClassId) -> Option<&str> {
        self.classes.get(id.index()).map(|c| c.name.as_str())
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.index() < self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn id_set(&self) -> BTreeSet<ClassId> {
        self.ids().collect()
    }

    pub fn old_classes(&self) -> &[ClassId] {
        &self.old
    }

    pub fn new_classes(&self) -> &[ClassId] {
        &self.new
    }

    /// Resolves a list of class names or numeric ids.
    pub fn parse_classes<S: AsRef<str>>(&self, items: &[S]) -> Result<BTreeSet<ClassId>> {
        items
            .iter()
            .map(|s| {
                let s = s.as_ref().trim();
                match s.parse::<u16>() {
                    Ok(n) if self.contains(ClassId(n)) => Ok(ClassId(n)),
                    Ok(n) => Err(Error::Domain(format!("unknown class id {n}"))),
                    Err(_) => self.id_of(s),
                }
            })
            .collect()
    }
}

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Binary mask; every value is 0 or 1.
pub type Mask = Grid<u8>;
/// Image intensities in [0, 1], stored at 32-bit precision.
pub type Image = Grid<f32>;
/// Per-pixel foreground probabilities.
pub type ProbGrid = Grid<f64>;

impl Mask {
    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    AiPredicted,
    ExpertRevised,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::AiPredicted => "ai_predicted",
            Provenance::ExpertRevised => "expert_revised",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskChannel {
    pub class_id: ClassId,
    pub mask: Mask,
    pub provenance: Provenance,
}

/// Per-class binary channels. `m` is the declared count of expert-revised
/// channels; constructors keep it in sync, loaders may not, and
/// [`validate_annotation_set`] recounts it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    channels: BTreeMap<ClassId, MaskChannel>,
    m: usize,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_channels(channels: impl IntoIterator<Item = MaskChannel>) -> Result<Self> {
        let mut set = AnnotationSet::new();
        for ch in channels {
            if set.channels.contains_key(&ch.class_id) {
                return Err(Error::Domain(format!(
                    "duplicate channel for class {}",
                    ch.class_id
                )));
            }
            set.insert(ch);
        }
        Ok(set)
    }

    /// Inserts or replaces the channel for `channel.class_id`.
    pub fn insert(&mut self, channel: MaskChannel) {
        self.channels.insert(channel.class_id, channel);
        self.m = self.count_expert();
    }

    pub fn remove(&mut self, class_id: ClassId) -> Option<MaskChannel> {
        let out = self.channels.remove(&class_id);
        self.m = self.count_expert();
        out
    }

    fn count_expert(&self) -> usize {
        self.channels
            .values()
            .filter(|c| c.provenance == Provenance::ExpertRevised)
            .count()
    }

    /// Overrides the declared `m`; used when reading persisted sets.
    pub fn with_declared_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn n(&self) -> usize {
        self.channels.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, class_id: ClassId) -> Option<&MaskChannel> {
        self.channels.get(&class_id)
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.channels.contains_key(&class_id)
    }

    pub fn class_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.channels.keys().copied()
    }

    pub fn channels(&self) -> impl Iterator<Item = &MaskChannel> {
        self.channels.values()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Only the expert-revised channels.
    pub fn expert_channels(&self) -> AnnotationSet {
        let mut out = AnnotationSet::new();
        for ch in self.channels.values() {
            if ch.provenance == Provenance::ExpertRevised {
                out.insert(ch.clone());
            }
        }
        out
    }

    /// Restricts to the given classes.
    pub fn restrict(&self, classes: &BTreeSet<ClassId>) -> AnnotationSet {
        let mut out = AnnotationSet::new();
        for ch in self.channels.values() {
            if classes.contains(&ch.class_id) {
                out.insert(ch.clone());
            }
        }
        out
    }

    /// Copy of `self` where every channel of `top` replaces the one underneath.
    pub fn overlay(&self, top: &AnnotationSet) -> AnnotationSet {
        let mut out = self.clone();
        for ch in top.channels() {
            out.insert(ch.clone());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationTag {
    /// Annotations the scan carried before the current round.
    Prior,
    Predicted,
    Revised,
    Hybrid,
}

impl AnnotationTag {
    pub const ALL: [AnnotationTag; 4] = [
        AnnotationTag::Prior,
        AnnotationTag::Predicted,
        AnnotationTag::Revised,
        AnnotationTag::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationTag::Prior => "prior",
            AnnotationTag::Predicted => "predicted",
            AnnotationTag::Revised => "revised",
            AnnotationTag::Hybrid => "hybrid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub scan_id: String,
    pub image: Image,
    /// Full ground truth; only the simulated expert and evaluation read it.
    pub ground_truth: AnnotationSet,
    pub annotations: BTreeMap<AnnotationTag, AnnotationSet>,
    pub seed: u64,
}

impl Scan {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn annotation(&self, tag: AnnotationTag) -> Option<&AnnotationSet> {
        self.annotations.get(&tag)
    }

    /// Best available label per class: AI predictions, overridden by prior
    /// annotations, overridden by expert revisions.
    pub fn current_best(&self) -> AnnotationSet {
        let mut best = AnnotationSet::new();
        for tag in [
            AnnotationTag::Predicted,
            AnnotationTag::Prior,
            AnnotationTag::Revised,
        ] {
            if let Some(set) = self.annotations.get(&tag) {
                best = best.overlay(set);
            }
        }
        best
    }
}

/// Dice similarity coefficient `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "dsc on {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        if x > 1 || y > 1 {
            return Err(Error::Domain("dsc on a non-binary mask".into()));
        }
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    UnknownClass(ClassId),
    ShapeMismatch {
        class_id: ClassId,
        expected: (usize, usize),
        found: (usize, usize),
    },
    NonBinary(ClassId),
    ClassIdMismatch {
        key: ClassId,
        channel: ClassId,
    },
    MInconsistent {
        declared: usize,
        counted: usize,
    },
    MExceedsN {
        m: usize,
        n: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownClass(c) => write!(f, "unknown class {c}"),
            Violation::ShapeMismatch {
                class_id,
                expected,
                found,
            } => write!(
                f,
                "class {class_id}: shape {found:?}, expected {expected:?}"
            ),
            Violation::NonBinary(c) => write!(f, "class {c}: non-binary mask"),
            Violation::ClassIdMismatch { key, channel } => {
                write!(f, "channel stored under {key} claims class {channel}")
            }
            Violation::MInconsistent { declared, counted } => {
                write!(f, "m inconsistent: declared {declared}, counted {counted}")
            }
            Violation::MExceedsN { m, n } => write!(f, "m = {m} exceeds n = {n}"),
        }
    }
}

/// Lists every invariant violation of `set`; an empty list means well formed.
pub fn validate_annotation_set(
    set: &AnnotationSet,
    catalog: &ClassCatalog,
    dims: (usize, usize),
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (&key, ch) in &set.channels {
        if key != ch.class_id {
            out.push(Violation::ClassIdMismatch {
                key,
                channel: ch.class_id,
            });
        }
        if !catalog.contains(ch.class_id) {
            out.push(Violation::UnknownClass(ch.class_id));
        }
        if ch.mask.dims() != dims {
            out.push(Violation::ShapeMismatch {
                class_id: ch.class_id,
                expected: dims,
                found: ch.mask.dims(),
            });
        }
        if !ch.mask.is_binary() {
            out.push(Violation::NonBinary(ch.class_id));
        }
    }
    let counted = set.count_expert();
    if counted != set.m {
        out.push(Violation::MInconsistent {
            declared: set.m,
            counted,
        });
    }
    if set.m > set.n() {
        out.push(Violation::MExceedsN {
            m: set.m,
            n: set.n(),
        });
    }
    out
}
