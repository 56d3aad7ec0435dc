//! Image manifests and the transformations applied to them before training:
//! the seven source/time-of-day partitions, pseudo-label ingestion and
//! repetition of hard images.
//!
//! A manifest lives in two files. The record file starts with `#manifest v1`
//! followed by `image_id path width height tod source` rows; annotations use
//! the ground-truth format `image_id class_id cx cy w h`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{format_ground_truth_line, parse_normalized_box, GroundTruth, GroundTruthSet};
use crate::geometry::BoxCorner;
use crate::postprocess::DetectionSet;
use crate::text;

pub const MANIFEST_HEADER: &str = "#manifest v1";
pub const DEFAULT_UPSAMPLE_FACTOR: usize = 10;
pub const DEFAULT_PSEUDO_MIN_CONFIDENCE: f64 = 0.5;

/// A ground-truth box attached to a manifest image.
pub type Annotation = GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeOfDay {
    Day,
    Night,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Fish,
    Bdd,
    Pseudo,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::invalid(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), s
                    ))),
                }
            }
        }
    };
}

text_enum!(TimeOfDay { Day => "day", Night => "night", Unknown => "unknown" });
text_enum!(Source { Fish => "fish", Bdd => "bdd", Pseudo => "pseudo" });

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub tod: TimeOfDay,
    pub source: Source,
}

impl ImageRecord {
    fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() || self.image_id.contains(char::is_whitespace) || self.image_id.starts_with('#') {
            return Err(Error::invalid(format!("bad image id `{}`", self.image_id)));
        }
        if self.path.is_empty() || self.path.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("bad path `{}` for `{}`", self.path, self.image_id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("image `{}` has zero size", self.image_id)));
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.image_id, self.path, self.width, self.height, self.tod, self.source
        )
    }
}

/// Image records plus their annotations. Ids are unique, and every
/// annotation key names a record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    annotations: BTreeMap<String, Vec<Annotation>>,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>, annotations: BTreeMap<String, Vec<Annotation>>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id `{}`", r.image_id)));
            }
        }
        for (id, boxes) in &annotations {
            if !seen.contains(id.as_str()) {
                return Err(Error::UnknownImage(id.clone()));
            }
            for a in boxes {
                check_normalized(a)?;
            }
        }
        let annotations = annotations.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        Ok(Self { records, annotations })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn annotations(&self, image_id: &str) -> &[Annotation] {
        self.annotations.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.image_id.as_str())
    }

    /// Ground truth for every record, empty sets included, in record order.
    pub fn ground_truth(&self) -> Vec<GroundTruthSet> {
        self.records
            .iter()
            .map(|r| GroundTruthSet::new(r.image_id.clone(), self.annotations(&r.image_id).to_vec()))
            .collect()
    }

    fn subset(&self, keep: impl Fn(&ImageRecord) -> bool) -> Manifest {
        let records: Vec<ImageRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let annotations = records
            .iter()
            .filter_map(|r| self.annotations.get(&r.image_id).map(|a| (r.image_id.clone(), a.clone())))
            .collect();
        Manifest { records, annotations }
    }

    pub fn records_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Annotations in record order, each image's boxes in stored order.
    pub fn annotations_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            for a in self.annotations(&r.image_id) {
                out.push_str(&format_ground_truth_line(&r.image_id, a));
                out.push('\n');
            }
        }
        out
    }

    /// Parses a record file and, optionally, its annotation file.
    pub fn parse(records_src: &str, annotations_src: Option<&str>) -> Result<Self> {
        let records = parse_records(records_src)?;
        let ids: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        let mut annotations: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
        if let Some(src) = annotations_src {
            for (line, f) in text::records(src) {
                text::expect_fields(line, &f, 6, "annotation")?;
                if !ids.contains(f[0]) {
                    return Err(Error::parse(line, format!("annotation for unknown image `{}`", f[0])));
                }
                let class_id: u32 = text::field(line, f[1], "class id")?;
                let bbox = parse_normalized_box(line, &f[2..6])?;
                annotations.entry(f[0].to_string()).or_default().push(Annotation { class_id, bbox });
            }
        }
        Manifest::new(records, annotations)
    }

    pub fn load(records_path: impl AsRef<Path>, annotations_path: Option<&Path>) -> Result<Self> {
        let records = std::fs::read_to_string(records_path)?;
        let annotations = annotations_path.map(std::fs::read_to_string).transpose()?;
        Self::parse(&records, annotations.as_deref())
    }

    pub fn save(&self, records_path: impl AsRef<Path>, annotations_path: Option<&Path>) -> Result<()> {
        std::fs::write(records_path, self.records_text())?;
        if let Some(p) = annotations_path {
            std::fs::write(p, self.annotations_text())?;
        }
        Ok(())
    }
}

fn check_normalized(a: &Annotation) -> Result<()> {
    let b = a.bbox;
    let ok = [b.cx(), b.cy(), b.w(), b.h()].iter().all(|v| (0.0..=1.0).contains(v)) && b.w() > 0.0 && b.h() > 0.0;
    if !ok {
        return Err(Error::invalid(format!(
            "annotation ({}, {}, {}, {}) is not a normalized box",
            b.cx(),
            b.cy(),
            b.w(),
            b.h()
        )));
    }
    Ok(())
}

fn parse_records(src: &str) -> Result<Vec<ImageRecord>> {
    let mut lines = src.lines();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some(h) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some(_) => return Err(Error::parse(1, format!("expected `{MANIFEST_HEADER}` header"))),
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (line, f) in text::records(src) {
        text::expect_fields(line, &f, 6, "manifest record")?;
        let record = ImageRecord {
            image_id: f[0].to_string(),
            path: f[1].to_string(),
            width: text::field(line, f[2], "width")?,
            height: text::field(line, f[3], "height")?,
            tod: f[4].parse().map_err(|e: Error| Error::parse(line, e.to_string()))?,
            source: f[5].parse().map_err(|e: Error| Error::parse(line, e.to_string()))?,
        };
        record.validate().map_err(|e| Error::parse(line, e.to_string()))?;
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::parse(line, format!("duplicate image id `{}`", record.image_id)));
        }
        records.push(record);
    }
    Ok(records)
}

/// The training partitions, each a (source, time-of-day) filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionRule {
    FishDay,
    FishNight,
    FishMix,
    BddDay,
    BddNight,
    BddMix,
    Pseudo,
}

text_enum!(PartitionRule {
    FishDay => "fish-day",
    FishNight => "fish-night",
    FishMix => "fish-mix",
    BddDay => "bdd-day",
    BddNight => "bdd-night",
    BddMix => "bdd-mix",
    Pseudo => "pseudo",
});

impl PartitionRule {
    pub fn accepts(&self, r: &ImageRecord) -> bool {
        use PartitionRule::*;
        match self {
            FishDay => r.source == Source::Fish && r.tod == TimeOfDay::Day,
            FishNight => r.source == Source::Fish && r.tod == TimeOfDay::Night,
            FishMix => r.source == Source::Fish,
            BddDay => r.source == Source::Bdd && r.tod == TimeOfDay::Day,
            BddNight => r.source == Source::Bdd && r.tod == TimeOfDay::Night,
            BddMix => r.source == Source::Bdd,
            Pseudo => r.source == Source::Pseudo,
        }
    }
}

pub fn partition(m: &Manifest, rule: PartitionRule) -> Manifest {
    m.subset(|r| rule.accepts(r))
}

/// Turns model detections into a pseudo-labelled manifest. Every image
/// becomes a `pseudo`/`day` record; detections at or above `min_confidence`
/// become annotations, clipped to the unit frame.
pub fn ingest_pseudo(dets: &[DetectionSet], images: &[ImageRecord], min_confidence: f64) -> Result<Manifest> {
    let known: HashSet<&str> = images.iter().map(|r| r.image_id.as_str()).collect();
    let mut annotations: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for set in dets {
        if !known.contains(set.image_id.as_str()) {
            return Err(Error::UnknownImage(set.image_id.clone()));
        }
        for d in set.detections.iter().filter(|d| d.confidence >= min_confidence) {
            let c = d.bbox.to_corner();
            let clipped = BoxCorner::new(
                c.x1().clamp(0.0, 1.0),
                c.y1().clamp(0.0, 1.0),
                c.x2().clamp(0.0, 1.0),
                c.y2().clamp(0.0, 1.0),
            )?;
            if clipped.area() <= 0.0 {
                continue;
            }
            let bbox = if clipped == c { d.bbox } else { clipped.to_center() };
            annotations.entry(set.image_id.clone()).or_default().push(Annotation {
                class_id: d.class_id,
                bbox,
            });
        }
    }
    let records = images
        .iter()
        .map(|r| ImageRecord {
            tod: TimeOfDay::Day,
            source: Source::Pseudo,
            ..r.clone()
        })
        .collect();
    Manifest::new(records, annotations)
}

/// Repeats each challenging record `factor` times, right after its original
/// position, with ids suffixed `#1..#factor`. `factor == 1` is the identity.
pub fn upsample_challenging(m: &Manifest, challenging: &[String], factor: usize) -> Result<Manifest> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be at least 1"));
    }
    let wanted: BTreeSet<&str> = challenging.iter().map(String::as_str).collect();
    let ids: HashSet<&str> = m.ids().collect();
    if let Some(missing) = wanted.iter().find(|id| !ids.contains(**id)) {
        return Err(Error::UnknownImage(missing.to_string()));
    }
    if factor == 1 || wanted.is_empty() {
        return Ok(m.clone());
    }
    let mut records = Vec::with_capacity(m.len() + (factor - 1) * wanted.len());
    let mut annotations = BTreeMap::new();
    for r in &m.records {
        let boxes = m.annotations.get(&r.image_id);
        if wanted.contains(r.image_id.as_str()) {
            for k in 1..=factor {
                let id = format!("{}#{k}", r.image_id);
                if let Some(b) = boxes {
                    annotations.insert(id.clone(), b.clone());
                }
                records.push(ImageRecord {
                    image_id: id,
                    ..r.clone()
                });
            }
        } else {
            if let Some(b) = boxes {
                annotations.insert(r.image_id.clone(), b.clone());
            }
            records.push(r.clone());
        }
    }
    Manifest::new(records, annotations)
}
