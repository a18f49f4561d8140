//! Dataset ingestion and preparation.
//!
//! Inputs are a binary feature matrix (`OMFT`) whose rows line up with a
//! JSON Lines metadata file, one object per sample:
//!
//! ```json
//! {"id": "s1", "artist": "Rembrandt", "types": ["painting"], "materials": ["oil", "canvas"], "period": [1630, 1640]}
//! ```
//!
//! Missing fields mean the sample is unlabeled for that task.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{Batch, TargetBlock, TaskKind, TaskSpec, Targets};
use crate::nncore::Scalar;
use crate::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"OMFT";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Encodes `"OMFT" | u32 version=1 | u64 N | u64 D | N*D f32 LE row-major`.
pub fn features_to_bytes(features: &Array2<f32>) -> Vec<u8> {
    let (n, d) = features.dim();
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * n * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated feature header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected OMFT"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported feature file version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if d == 0 {
        return Err(Error::format(16, "feature dimension D must be >= 1"));
    }
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::format(8, "N*D overflows"))?;
    let body = &bytes[FEATURE_HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: header promises {payload} bytes, found {}", body.len()),
        ));
    }
    if body.len() > payload {
        return Err(Error::format((FEATURE_HEADER_LEN + payload) as u64, "trailing bytes after payload"));
    }
    let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Array2::from_shape_vec((n as usize, d as usize), values).expect("payload length checked"))
}

pub fn write_feature_matrix(path: impl AsRef<Path>, features: &Array2<f32>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&features_to_bytes(features))?;
    w.flush()?;
    Ok(())
}

pub fn load_feature_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    features_from_bytes(&bytes)
}

/// Creation date: an exact year or an estimated interval `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeriodValue {
    Year(f64),
    Interval([f64; 2]),
}

/// Exact years pass through; intervals map to their midpoint.
pub fn resolve_period(raw: PeriodValue) -> Result<f64> {
    match raw {
        PeriodValue::Year(y) if y.is_finite() => Ok(y),
        PeriodValue::Interval([a, b]) if a.is_finite() && b.is_finite() => {
            if a > b {
                return Err(Error::invalid(format!("period interval [{a}, {b}] has start after end")));
            }
            // clamp guards the one-ulp overshoot of (a+b)/2 for near-equal bounds
            Ok(((a + b) / 2.0).clamp(a, b))
        }
        _ => Err(Error::invalid("period must be finite")),
    }
}

/// Parameters a synthetic record was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeInfo {
    pub artist_index: usize,
    pub artist_mean_year: f64,
    /// Period before observation noise.
    pub period_base: f64,
    pub preferred_type: usize,
    pub preferred_material: usize,
    pub entanglement: f64,
}

/// One line of the metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artist: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub types: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub materials: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<PeriodValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generative: Option<GenerativeInfo>,
}

pub fn parse_metadata(reader: impl BufRead) -> Result<Vec<MetadataRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetadataRecord = serde_json::from_str(&line).map_err(|e| Error::Metadata {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(PeriodValue::Interval([a, b])) = rec.period {
            if a > b {
                return Err(Error::Metadata {
                    line: i + 1,
                    message: format!("period interval [{a}, {b}] has start after end"),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<MetadataRecord>> {
    parse_metadata(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_metadata(path: impl AsRef<Path>, records: &[MetadataRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// The metadata attributes that can be learned as tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskField {
    Artist,
    Type,
    Material,
    Period,
}

impl TaskField {
    pub const ALL: [TaskField; 4] = [TaskField::Artist, TaskField::Type, TaskField::Material, TaskField::Period];

    pub fn name(self) -> &'static str {
        match self {
            TaskField::Artist => "artist",
            TaskField::Type => "type",
            TaskField::Material => "material",
            TaskField::Period => "period",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskField::Artist => TaskKind::Multiclass,
            TaskField::Type | TaskField::Material => TaskKind::Multilabel,
            TaskField::Period => TaskKind::Regression,
        }
    }
}

impl fmt::Display for TaskField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "artist" | "artists" => Ok(TaskField::Artist),
            "type" | "types" => Ok(TaskField::Type),
            "material" | "materials" => Ok(TaskField::Material),
            "period" | "year" => Ok(TaskField::Period),
            other => Err(Error::invalid(format!("unknown task '{other}' (expected artist, type, material or period)"))),
        }
    }
}

/// Parses a comma separated task list such as `artist,period`.
pub fn parse_task_list(s: &str) -> Result<Vec<TaskField>> {
    let mut out: Vec<TaskField> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let f: TaskField = part.parse()?;
        if out.contains(&f) {
            return Err(Error::invalid(format!("task '{f}' listed twice")));
        }
        out.push(f);
    }
    if out.is_empty() {
        return Err(Error::invalid("task list is empty"));
    }
    Ok(out)
}

const EXCLUDED_LABELS: [&str; 2] = ["unknown", "anonymous"];

/// Ambiguous placeholders that never become classes.
pub fn is_excluded_label(label: &str) -> bool {
    let l = label.trim();
    l.is_empty() || EXCLUDED_LABELS.iter().any(|x| l.eq_ignore_ascii_case(x))
}

const STEM_SUFFIXES: [&str; 4] = ["ings", "ing", "es", "s"];

/// Lowercases and strips the first matching suffix of `ings`, `ing`, `es`,
/// `s` whenever at least three characters remain, repeating until no rule
/// applies. Iterating to a fixed point makes the stemmer idempotent.
pub fn stem_material_token(token: &str) -> String {
    let mut word = token.trim().to_lowercase();
    loop {
        let len = word.chars().count();
        let rule = STEM_SUFFIXES
            .iter()
            .find(|suf| word.ends_with(*suf) && len - suf.chars().count() >= 3);
        match rule {
            Some(suf) => word.truncate(word.len() - suf.len()),
            None => return word,
        }
    }
}

/// Normalized labels of one record for a categorical field: trimmed,
/// placeholders removed, materials stemmed per word, duplicates dropped.
pub fn record_labels(rec: &MetadataRecord, field: TaskField) -> Vec<String> {
    let raw: Vec<String> = match field {
        TaskField::Artist => rec.artist.iter().map(|a| a.trim().to_string()).collect(),
        TaskField::Type => rec.types.iter().flatten().map(|t| t.trim().to_string()).collect(),
        TaskField::Material => rec
            .materials
            .iter()
            .flatten()
            .map(|m| m.split_whitespace().map(stem_material_token).collect::<Vec<_>>().join(" "))
            .collect(),
        TaskField::Period => Vec::new(),
    };
    let mut out: Vec<String> = Vec::with_capacity(raw.len());
    for l in raw {
        if !is_excluded_label(&l) && !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// Ordered labels of one task with dense ids and frequency counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub task: TaskField,
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// Builds from labels already in id order; counts are unknown (zero).
    pub fn from_labels(task: TaskField, labels: Vec<String>) -> Result<Self> {
        let index: HashMap<String, usize> = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        if index.len() != labels.len() {
            return Err(Error::invalid(format!("duplicate labels in '{task}' vocabulary")));
        }
        let counts = vec![0; labels.len()];
        Ok(Self { task, labels, counts, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }
}

/// Counts each label once per record, drops placeholders and labels seen in
/// fewer than `min_samples` records, and assigns ids by descending frequency
/// with lexicographic tie-breaks.
pub fn build_label_vocab<'a>(
    records: impl IntoIterator<Item = &'a MetadataRecord>,
    task: TaskField,
    min_samples: usize,
) -> Result<LabelVocabulary> {
    if min_samples == 0 {
        return Err(Error::invalid("min_samples must be >= 1"));
    }
    if task == TaskField::Period {
        return Err(Error::invalid("period is continuous and has no vocabulary"));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for rec in records {
        for l in record_labels(rec, task) {
            *freq.entry(l).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_samples).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary(task.name().to_string()));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let (labels, counts): (Vec<String>, Vec<usize>) = kept.into_iter().unzip();
    let mut vocab = LabelVocabulary::from_labels(task, labels)?;
    vocab.counts = counts;
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Excluded,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Excluded => "excluded",
        }
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" | "validation" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            "excluded" => Ok(SplitTag::Excluded),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// Per-sample partition produced by [`stratified_split`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub tags: Vec<SplitTag>,
}

/// Train/val/test sizes for a class of `m` samples.
///
/// Train gets `floor(r_train * m)` and test `floor(r_test * m)`, each at
/// least one; validation takes the rest and also keeps at least one, taken
/// from train when needed.
pub fn class_split_sizes(m: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    debug_assert!(m >= 3);
    let floor = |r: f64| ((r * m as f64) + 1e-9).floor() as usize;
    let mut train = floor(ratios[0]).max(1);
    let test = floor(ratios[2]).max(1);
    if train + test >= m {
        train = m - test - 1;
    }
    (train, m - train - test, test)
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Stratifies samples by their anchor class. Samples with no anchor class
/// are tagged [`SplitTag::Excluded`]. Within each class the members are
/// shuffled with a seeded generator, then cut into train, validation and
/// test in that order.
pub fn stratified_split(
    anchor: &[Option<usize>],
    class_names: &[String],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    validate_ratios(ratios)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, a) in anchor.iter().enumerate() {
        if let Some(c) = *a {
            members
                .get_mut(c)
                .ok_or_else(|| Error::invalid(format!("anchor class {c} has no name")))?
                .push(i);
        }
    }
    for (c, m) in members.iter().enumerate() {
        if m.len() < 3 {
            return Err(Error::Stratification {
                class: class_names[c].clone(),
                count: m.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![SplitTag::Excluded; anchor.len()];
    for m in &mut members {
        m.shuffle(&mut rng);
        let (train, val, _) = class_split_sizes(m.len(), ratios);
        for (pos, &i) in m.iter().enumerate() {
            tags[i] = if pos < train {
                SplitTag::Train
            } else if pos < train + val {
                SplitTag::Val
            } else {
                SplitTag::Test
            };
        }
    }
    Ok(SplitAssignment { seed, ratios, tags })
}

/// On-disk split: `{seed, ratios, assignments: {sample_id: tag}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignments: BTreeMap<String, SplitTag>,
}

impl SplitFile {
    pub fn from_assignment(assignment: &SplitAssignment, ids: &[String]) -> Result<Self> {
        if ids.len() != assignment.tags.len() {
            return Err(Error::dims(format!("{} ids for {} split tags", ids.len(), assignment.tags.len())));
        }
        let mut assignments = BTreeMap::new();
        for (id, tag) in ids.iter().zip(&assignment.tags) {
            if assignments.insert(id.clone(), *tag).is_some() {
                return Err(Error::invalid(format!("duplicate sample id '{id}'")));
            }
        }
        Ok(Self {
            seed: assignment.seed,
            ratios: assignment.ratios,
            assignments,
        })
    }

    pub fn tag(&self, id: &str) -> SplitTag {
        self.assignments.get(id).copied().unwrap_or(SplitTag::Excluded)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Builds the anchor vocabulary and splits the records.
pub fn split_records(
    records: &[MetadataRecord],
    anchor: TaskField,
    ratios: [f64; 3],
    min_samples: usize,
    seed: u64,
) -> Result<SplitFile> {
    let vocab = build_label_vocab(records, anchor, min_samples)?;
    let anchor_ids: Vec<Option<usize>> = records
        .iter()
        .map(|r| record_labels(r, anchor).first().and_then(|l| vocab.id(l)))
        .collect();
    let assignment = stratified_split(&anchor_ids, &vocab.labels, ratios, seed)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    SplitFile::from_assignment(&assignment, &ids)
}

/// Features and aligned per-task labels for every sample.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub features: Array2<f32>,
    pub sample_ids: Vec<String>,
    pub artist: Vec<Option<usize>>,
    pub types: Vec<Option<Vec<usize>>>,
    pub materials: Vec<Option<Vec<usize>>>,
    /// Resolved creation year.
    pub period: Vec<Option<f64>>,
    pub split: Vec<SplitTag>,
    pub vocabularies: BTreeMap<TaskField, LabelVocabulary>,
}

impl FeatureDataset {
    /// Aligns features with metadata (row `i` = line `i`), applies the split
    /// and maps labels through the given vocabularies. Labels outside a
    /// vocabulary are treated as missing.
    pub fn assemble(
        features: Array2<f32>,
        records: &[MetadataRecord],
        split: &SplitFile,
        vocabularies: BTreeMap<TaskField, LabelVocabulary>,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if features.nrows() != records.len() {
            return Err(Error::dims(format!(
                "feature matrix has {} rows but metadata has {} records",
                features.nrows(),
                records.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let d = features.ncols();
            return Err(Error::invalid(format!("non-finite feature at row {}, column {}", pos / d, pos % d)));
        }
        let ids_of = |field: TaskField, rec: &MetadataRecord| -> Vec<usize> {
            vocabularies
                .get(&field)
                .map(|v| record_labels(rec, field).iter().filter_map(|l| v.id(l)).collect())
                .unwrap_or_default()
        };
        let non_empty = |v: Vec<usize>| (!v.is_empty()).then_some(v);

        let mut ds = Self {
            features,
            sample_ids: Vec::with_capacity(records.len()),
            artist: Vec::with_capacity(records.len()),
            types: Vec::with_capacity(records.len()),
            materials: Vec::with_capacity(records.len()),
            period: Vec::with_capacity(records.len()),
            split: Vec::with_capacity(records.len()),
            vocabularies: BTreeMap::new(),
        };
        for rec in records {
            ds.sample_ids.push(rec.id.clone());
            ds.artist.push(ids_of(TaskField::Artist, rec).first().copied());
            ds.types.push(non_empty(ids_of(TaskField::Type, rec)));
            ds.materials.push(non_empty(ids_of(TaskField::Material, rec)));
            ds.period.push(rec.period.map(resolve_period).transpose()?);
            ds.split.push(split.tag(&rec.id));
        }
        ds.vocabularies = vocabularies;
        Ok(ds)
    }

    /// Builds vocabularies for `fields` from the records that are not
    /// excluded by the split, then assembles the dataset.
    pub fn build(
        features: Array2<f32>,
        records: &[MetadataRecord],
        split: &SplitFile,
        fields: &[TaskField],
        min_label_samples: usize,
    ) -> Result<Self> {
        let included: Vec<&MetadataRecord> = records
            .iter()
            .filter(|r| split.tag(&r.id) != SplitTag::Excluded)
            .collect();
        let mut vocabularies = BTreeMap::new();
        for &f in fields.iter().filter(|f| **f != TaskField::Period) {
            let min = if f == TaskField::Artist { 1 } else { min_label_samples };
            vocabularies.insert(f, build_label_vocab(included.iter().copied(), f, min)?);
        }
        Self::assemble(features, records, split, vocabularies)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows_in(&self, split: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn has_label(&self, field: TaskField, row: usize) -> bool {
        match field {
            TaskField::Artist => self.artist[row].is_some(),
            TaskField::Type => self.types[row].is_some(),
            TaskField::Material => self.materials[row].is_some(),
            TaskField::Period => self.period[row].is_some(),
        }
    }

    /// Assembles a training batch for `rows`, one target block per spec.
    /// Spec names must be task field names; regression targets are
    /// standardized with the spec's `target_mean`/`target_std`.
    pub fn batch<T: Scalar>(&self, rows: &[usize], specs: &[TaskSpec]) -> Result<Batch<T>> {
        let d = self.dim();
        let mut inputs = Array2::<T>::zeros((rows.len(), d));
        for (dst, &src) in rows.iter().enumerate() {
            inputs
                .row_mut(dst)
                .iter_mut()
                .zip(self.features.row(src))
                .for_each(|(o, &v)| *o = T::of(v as f64));
        }
        let mut blocks = Vec::with_capacity(specs.len());
        for spec in specs {
            let field: TaskField = spec.name.parse()?;
            if field.kind() != spec.kind {
                return Err(Error::invalid(format!("task '{}' must be {:?}", spec.name, field.kind())));
            }
            let labeled: Vec<bool> = rows.iter().map(|&r| self.has_label(field, r)).collect();
            let targets = match field {
                TaskField::Artist => Targets::Classes(rows.iter().map(|&r| self.artist[r].unwrap_or(0)).collect()),
                TaskField::Type | TaskField::Material => {
                    let col = if field == TaskField::Type { &self.types } else { &self.materials };
                    let mut hot = Array2::<T>::zeros((rows.len(), spec.output_dim));
                    for (i, &r) in rows.iter().enumerate() {
                        for &id in col[r].iter().flatten() {
                            if id >= spec.output_dim {
                                return Err(Error::invalid(format!("label id {id} outside task '{}'", spec.name)));
                            }
                            hot[[i, id]] = T::one();
                        }
                    }
                    Targets::MultiHot(hot)
                }
                TaskField::Period => {
                    let mean = spec.target_mean.unwrap_or(0.0);
                    let std = spec.target_std.unwrap_or(1.0);
                    Targets::Values(Array1::from_iter(
                        rows.iter().map(|&r| T::of((self.period[r].unwrap_or(mean) - mean) / std)),
                    ))
                }
            };
            let all = labeled.iter().all(|&l| l);
            blocks.push(TargetBlock {
                targets,
                labeled: (!all).then_some(labeled),
            });
        }
        Batch::new(inputs, blocks)
    }
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// 1 = type, material and period fully determined by the artist, 0 = independent.
    pub entanglement: f64,
    pub seed: u64,
    /// Std of isotropic feature noise around each artist prototype.
    pub feature_noise: f64,
    /// Std, in years, of the observation noise on the period.
    pub period_noise_years: f64,
}

impl SynthConfig {
    pub fn new(n_classes: usize, samples_per_class: usize, dim: usize, entanglement: f64, seed: u64) -> Self {
        Self {
            n_classes,
            samples_per_class,
            dim,
            entanglement,
            seed,
            feature_noise: 1.0,
            period_noise_years: 10.0,
        }
    }

    pub fn n_types(&self) -> usize {
        self.n_classes.div_ceil(2).max(2)
    }

    /// Two materials per artist: a preferred primary and a preferred secondary.
    pub fn n_materials(&self) -> usize {
        2 * self.n_classes
    }
}

pub const SYNTH_YEAR_RANGE: (f64, f64) = (1400.0, 1900.0);

/// Synthetic features plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub features: Array2<f32>,
    pub records: Vec<MetadataRecord>,
}

pub fn synth_artist_name(a: usize) -> String {
    format!("artist_{a:03}")
}

pub fn synth_type_name(t: usize) -> String {
    format!("type_{t:02}")
}

/// Canonical (stemmed) material name.
pub fn synth_material_name(m: usize) -> String {
    format!("material{m:02}")
}

/// Generates a labelled table with controllable dependence between tasks.
///
/// Each artist has a Gaussian feature prototype, a mean year and a preferred
/// type and material. Per sample, each categorical label is the artist's
/// preferred one with probability `entanglement` and uniform otherwise (an
/// optional second label likewise); the period is
/// `e * artist_mean + (1 - e) * uniform_year` plus Gaussian noise.
/// Features are the prototype plus half-scale embeddings of the drawn type
/// and material labels plus isotropic noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    if cfg.n_classes == 0 || cfg.samples_per_class == 0 || cfg.dim == 0 {
        return Err(Error::invalid("classes, samples per class and dimension must be >= 1"));
    }
    if !(0.0..=1.0).contains(&cfg.entanglement) {
        return Err(Error::invalid(format!("entanglement must lie in [0, 1], got {}", cfg.entanglement)));
    }
    if !(cfg.feature_noise >= 0.0) || !(cfg.period_noise_years >= 0.0) {
        return Err(Error::invalid("noise levels must be >= 0"));
    }
    let e = cfg.entanglement;
    let (y0, y1) = SYNTH_YEAR_RANGE;
    let (n_types, n_mats) = (cfg.n_types(), cfg.n_materials());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let gaussian_rows = |rows: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_simple_fn((rows, cfg.dim), || normal.sample(rng))
    };
    let prototypes = gaussian_rows(cfg.n_classes, &mut rng);
    let type_emb = gaussian_rows(n_types, &mut rng);
    let mat_emb = gaussian_rows(n_mats, &mut rng);
    let mean_years: Vec<f64> = (0..cfg.n_classes).map(|_| rng.random_range(y0 + 50.0..y1 - 50.0)).collect();
    let pref_type: Vec<usize> = (0..cfg.n_classes).map(|a| a % n_types).collect();
    let pref_mat: Vec<usize> = (0..cfg.n_classes).map(|a| 2 * a).collect();

    let draw = |rng: &mut ChaCha8Rng, preferred: usize, k: usize| {
        if rng.random::<f64>() < e {
            preferred
        } else {
            rng.random_range(0..k)
        }
    };

    let n = cfg.n_classes * cfg.samples_per_class;
    let mut features = Array2::<f32>::zeros((n, cfg.dim));
    let mut records = Vec::with_capacity(n);
    for a in 0..cfg.n_classes {
        for _ in 0..cfg.samples_per_class {
            let idx = records.len();
            let mut types = vec![draw(&mut rng, pref_type[a], n_types)];
            let mut mats = vec![draw(&mut rng, pref_mat[a], n_mats)];
            if rng.random::<f64>() < 0.3 {
                let extra = draw(&mut rng, (pref_type[a] + 1) % n_types, n_types);
                if !types.contains(&extra) {
                    types.push(extra);
                }
            }
            if rng.random::<f64>() < 0.3 {
                let extra = draw(&mut rng, pref_mat[a] + 1, n_mats);
                if !mats.contains(&extra) {
                    mats.push(extra);
                }
            }
            let uniform_year = rng.random_range(y0..y1);
            let base = e * mean_years[a] + (1.0 - e) * uniform_year;
            let year = base + cfg.period_noise_years * normal.sample(&mut rng);
            let period = if rng.random::<f64>() < 0.25 {
                let half = [5.0, 10.0, 25.0][rng.random_range(0..3)];
                PeriodValue::Interval([year - half, year + half])
            } else {
                PeriodValue::Year(year)
            };

            let mut row = prototypes.row(a).to_owned();
            for &t in &types {
                row.scaled_add(0.5, &type_emb.row(t));
            }
            for &m in &mats {
                row.scaled_add(0.5, &mat_emb.row(m));
            }
            for (dst, v) in features.row_mut(idx).iter_mut().zip(row.iter()) {
                *dst = (v + cfg.feature_noise * normal.sample(&mut rng)) as f32;
            }

            records.push(MetadataRecord {
                id: format!("s{idx:06}"),
                artist: Some(synth_artist_name(a)),
                types: Some(types.iter().map(|&t| synth_type_name(t)).collect()),
                // plural surface forms exercise the stemmer
                materials: Some(
                    mats.iter()
                        .map(|&m| {
                            let name = synth_material_name(m);
                            if rng.random::<bool>() {
                                name + "s"
                            } else {
                                name
                            }
                        })
                        .collect(),
                ),
                period: Some(period),
                generative: Some(GenerativeInfo {
                    artist_index: a,
                    artist_mean_year: mean_years[a],
                    period_base: base,
                    preferred_type: pref_type[a],
                    preferred_material: pref_mat[a],
                    entanglement: e,
                }),
            });
        }
    }
    Ok(SyntheticData { features, records })
}
