//! Annotated images, benchmark sets, corpus statistics and the line-delimited
//! file formats they are stored in.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::countergen::{NegativeCaption, NegativeKind, NegativeSpec, Provenance};
use crate::{Error, Result};

/// Negatives per sample and the per-kind layout every sample must follow.
pub const NEGATIVES_PER_SAMPLE: usize = 27;
pub const INSERTIONS_PER_STRATEGY: usize = 7;
pub const REMOVAL_SLOTS: usize = 6;

/// Canonical form of an object label: trimmed, lowercase, inner whitespace
/// collapsed to single spaces. No singularization.
pub fn canonical_name(raw: &str) -> Result<String> {
    let name = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if name.is_empty() {
        return Err(Error::validation("object name is empty"));
    }
    Ok(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_fraction: Option<f64>,
}

impl ObjectAnnotation {
    pub fn new(name: &str) -> Result<Self> {
        Ok(Self {
            name: canonical_name(name)?,
            confidence: None,
            area_fraction: None,
        })
    }

    fn canonicalized(self) -> Result<Self> {
        for (field, value) in [("confidence", self.confidence), ("area_fraction", self.area_fraction)] {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!(
                        "object {:?}: {field} {v} outside [0, 1]",
                        self.name
                    )));
                }
            }
        }
        Ok(Self {
            name: canonical_name(&self.name)?,
            ..self
        })
    }
}

/// An image and its segmented-object ground truth. The URI is carried along
/// but never opened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    #[serde(default)]
    pub image_uri: String,
    pub objects: Vec<ObjectAnnotation>,
    pub captions: Vec<String>,
}

impl ImageRecord {
    /// Build a record from raw parts, canonicalizing and deduplicating object
    /// names (first occurrence wins).
    pub fn new(
        image_id: impl Into<String>,
        image_uri: impl Into<String>,
        objects: Vec<ObjectAnnotation>,
        captions: Vec<String>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if image_id.trim().is_empty() {
            return Err(Error::validation("image_id is empty"));
        }
        if captions.is_empty() {
            return Err(Error::validation(format!("{image_id}: no captions")));
        }
        if captions.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::validation(format!("{image_id}: empty caption")));
        }
        let mut seen = HashSet::new();
        let mut deduped = Vec::with_capacity(objects.len());
        for obj in objects {
            let obj = obj
                .canonicalized()
                .map_err(|e| Error::validation(format!("{image_id}: {e}")))?;
            if seen.insert(obj.name.clone()) {
                deduped.push(obj);
            }
        }
        Ok(Self {
            image_id,
            image_uri: image_uri.into(),
            objects: deduped,
            captions,
        })
    }

    /// Convenience constructor from bare object names.
    pub fn from_names(image_id: &str, names: &[&str], captions: &[&str]) -> Result<Self> {
        let objects = names
            .iter()
            .map(|n| ObjectAnnotation::new(n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            image_id,
            "",
            objects,
            captions.iter().map(|c| c.to_string()).collect(),
        )
    }

    pub fn object_names(&self) -> impl Iterator<Item = &str> {
        self.objects.iter().map(|o| o.name.as_str())
    }

    pub fn object_set(&self) -> BTreeSet<&str> {
        self.object_names().collect()
    }

    pub fn has_object(&self, name: &str) -> bool {
        self.object_names().any(|o| o == name)
    }
}

/// Per-image presence counts of every object label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn count(&self, name: &str) -> u64 {
        self.counts.get(name).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// All known labels, lexicographically ordered.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }
}

pub fn build_frequency_table(records: &[ImageRecord]) -> FrequencyTable {
    let mut counts = BTreeMap::new();
    for rec in records {
        // Records built through ImageRecord::new are already deduplicated, but
        // the fields are public.
        for name in rec.object_set() {
            *counts.entry(name.to_owned()).or_insert(0) += 1;
        }
    }
    let total = counts.values().sum();
    FrequencyTable { counts, total }
}

/// Symmetric pair counts. Keys are stored with the smaller label first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CooccurrenceTable {
    counts: BTreeMap<(String, String), u64>,
}

impl CooccurrenceTable {
    pub fn count(&self, a: &str, b: &str) -> u64 {
        if a == b {
            return 0;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        // BTreeMap<(String, String)> can't be queried with (&str, &str)
        // without allocating; the tables are small enough for that to be fine.
        self.counts
            .get(&(key.0.to_owned(), key.1.to_owned()))
            .copied()
            .unwrap_or(0)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.counts
            .iter()
            .map(|((a, b), &c)| (a.as_str(), b.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Sum of co-occurrence counts between `candidate` and every name in `with`.
    pub fn affinity<'a>(&self, candidate: &str, with: impl IntoIterator<Item = &'a str>) -> u64 {
        with.into_iter().map(|o| self.count(candidate, o)).sum()
    }
}

pub fn build_cooccurrence_table(records: &[ImageRecord]) -> CooccurrenceTable {
    let mut counts = BTreeMap::new();
    for rec in records {
        let names: Vec<&str> = rec.object_set().into_iter().collect();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                *counts.entry(((*a).to_owned(), (*b).to_owned())).or_insert(0) += 1;
            }
        }
    }
    CooccurrenceTable { counts }
}

/// One image, its positive caption and its 27 typed negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSample {
    pub image_id: String,
    pub positive: String,
    pub negatives: Vec<NegativeCaption>,
}

impl BenchmarkSample {
    pub fn kind_counts(&self) -> BTreeMap<NegativeKind, usize> {
        let mut counts: BTreeMap<NegativeKind, usize> =
            NegativeKind::ALL.iter().map(|&k| (k, 0)).collect();
        for n in &self.negatives {
            *counts.entry(n.spec.kind).or_insert(0) += 1;
        }
        counts
    }

    /// Positive first, then negatives in stored order.
    pub fn candidates(&self) -> Vec<&str> {
        std::iter::once(self.positive.as_str())
            .chain(self.negatives.iter().map(|n| n.text.as_str()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("sample {}: {msg}", self.image_id)));
        if self.positive.trim().is_empty() {
            return fail("empty positive caption".into());
        }
        if self.negatives.len() != NEGATIVES_PER_SAMPLE {
            return fail(format!(
                "expected {NEGATIVES_PER_SAMPLE} negatives, found {}",
                self.negatives.len()
            ));
        }
        let counts = self.kind_counts();
        for kind in NegativeKind::INSERTIONS {
            if counts[&kind] != INSERTIONS_PER_STRATEGY {
                return fail(format!(
                    "expected {INSERTIONS_PER_STRATEGY} {kind} negatives, found {}",
                    counts[&kind]
                ));
            }
        }
        let removal_like = counts[&NegativeKind::Remove] + counts[&NegativeKind::Alter];
        if removal_like != REMOVAL_SLOTS {
            return fail(format!(
                "expected {REMOVAL_SLOTS} remove/alter negatives, found {removal_like}"
            ));
        }
        let mut texts = HashSet::new();
        for neg in &self.negatives {
            neg.spec
                .validate_shape()
                .or_else(|e| fail(e.to_string()))?;
            if neg.text.trim().is_empty() {
                return fail(format!("empty {} negative", neg.spec.kind));
            }
            if neg.text == self.positive {
                return fail(format!("{} negative equals the positive caption", neg.spec.kind));
            }
            if !texts.insert(neg.text.as_str()) {
                return fail(format!("duplicate negative text {:?}", neg.text));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSet {
    pub name: String,
    pub samples: Vec<BenchmarkSample>,
    pub seed: u64,
    pub generator_version: String,
    pub source_corpus: String,
    /// Fingerprint of the generation config; optional in the file format.
    pub config_hash: Option<String>,
}

impl BenchmarkSet {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.image_id.as_str()) {
                return Err(Error::validation(format!("duplicate sample image_id {}", s.image_id)));
            }
            s.validate()?;
        }
        Ok(())
    }
}

/// Records keyed by image id, for joining benchmark samples back to their
/// ground truth.
#[derive(Debug, Clone, Default)]
pub struct ImageIndex<'a> {
    by_id: HashMap<&'a str, &'a ImageRecord>,
}

impl<'a> ImageIndex<'a> {
    pub fn new(records: &'a [ImageRecord]) -> Self {
        Self {
            by_id: records.iter().map(|r| (r.image_id.as_str(), r)).collect(),
        }
    }

    pub fn get(&self, image_id: &str) -> Result<&'a ImageRecord> {
        self.by_id
            .get(image_id)
            .copied()
            .ok_or_else(|| Error::validation(format!("no annotation record for image {image_id}")))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image_id: String,
    #[serde(default)]
    image_uri: String,
    objects: Vec<ObjectAnnotation>,
    captions: Vec<String>,
}

/// Input formats accepted by [`load_annotations`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnnotationFormat {
    #[default]
    Jsonl,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<ImageRecord>> {
    let AnnotationFormat::Jsonl = format;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: AnnotationLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let record = ImageRecord::new(raw.image_id, raw.image_uri, raw.objects, raw.captions)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if !ids.insert(record.image_id.clone()) {
            return Err(Error::validation(format!(
                "{}:{lineno}: duplicate image_id {}",
                path.display(),
                record.image_id
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_annotations(records: &[ImageRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    name: String,
    seed: u64,
    generator_version: String,
    source_corpus: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NegativeLine {
    text: String,
    kind: NegativeKind,
    objects: Vec<String>,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    image_id: String,
    positive: String,
    negatives: Vec<NegativeLine>,
}

/// Serialize a validated set into its file representation.
pub fn encode_benchmark(set: &BenchmarkSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut buf = Vec::new();
    let header = HeaderLine {
        name: set.name.clone(),
        seed: set.seed,
        generator_version: set.generator_version.clone(),
        source_corpus: set.source_corpus.clone(),
        config_hash: set.config_hash.clone(),
    };
    serde_json::to_writer(&mut buf, &header).expect("header serializes");
    buf.push(b'\n');
    for s in &set.samples {
        let line = SampleLine {
            image_id: s.image_id.clone(),
            positive: s.positive.clone(),
            negatives: s
                .negatives
                .iter()
                .map(|n| NegativeLine {
                    text: n.text.clone(),
                    kind: n.spec.kind,
                    objects: n.spec.objects.clone(),
                    provenance: n.provenance,
                    model_id: n.model_id.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut buf, &line).expect("sample serializes");
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn persist_benchmark(set: &BenchmarkSet, path: &Path) -> Result<()> {
    let bytes = encode_benchmark(set)?;
    write_atomic(path, &bytes)
}

pub fn load_benchmark(path: &Path) -> Result<BenchmarkSet> {
    let mut lines = open_lines(path)?.filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let (lineno, header) = match lines.next() {
        Some((n, l)) => (n, l.map_err(|e| Error::io(path, e))?),
        None => return Err(Error::parse(path, 1, "missing header line")),
    };
    let header: HeaderLine =
        serde_json::from_str(&header).map_err(|e| Error::parse(path, lineno, format!("header: {e}")))?;
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let raw: SampleLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        samples.push(sample_from_line(raw));
    }
    let set = BenchmarkSet {
        name: header.name,
        samples,
        seed: header.seed,
        generator_version: header.generator_version,
        source_corpus: header.source_corpus,
        config_hash: header.config_hash,
    };
    set.validate()?;
    Ok(set)
}

fn sample_from_line(raw: SampleLine) -> BenchmarkSample {
    // combo_index is positional within each kind and is not stored.
    let mut ordinals: BTreeMap<NegativeKind, usize> = BTreeMap::new();
    let negatives = raw
        .negatives
        .into_iter()
        .map(|n| {
            let ord = ordinals.entry(n.kind).or_insert(0);
            let spec = NegativeSpec {
                kind: n.kind,
                objects: n.objects,
                combo_index: *ord,
            };
            *ord += 1;
            NegativeCaption {
                text: n.text,
                spec,
                provenance: n.provenance,
                model_id: n.model_id,
            }
        })
        .collect();
    BenchmarkSample {
        image_id: raw.image_id,
        positive: raw.positive,
        negatives,
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
