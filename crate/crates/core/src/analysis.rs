//! Label co-occurrence statistics, confusion ranking and shared-layer feature export.
//!
//! For three attributes `T1, T2, T3` the table supports
//!
//! ```text
//! P(T1 | T2, T3) = P(T1 ∩ T2 | T3) / P(T2 | T3)
//! ```
//!
//! with every probability estimated from the same joint counts, so the
//! identity holds exactly on the table.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{record_labels, resolve_period, write_feature_matrix, FeatureDataset, MetadataRecord, SplitTag, TaskField};
use crate::metrics::ConfusionMatrix;
use crate::model::MultiTaskModel;
use crate::{Error, Result};

/// Default width, in years, of a period bin.
pub const DEFAULT_PERIOD_BIN: f64 = 25.0;

/// Label of the bin containing `year`: the bin start, e.g. `1600` for 1612 with width 25.
pub fn period_bin(year: f64, width: f64) -> String {
    format!("{}", (year / width).floor() * width)
}

/// Joint counts over label triples of three attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub fields: [TaskField; 3],
    pub bin_width: f64,
    joint: BTreeMap<[String; 3], u64>,
}

/// A probability estimate with the counts behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub probability: f64,
    pub count: u64,
    pub support: u64,
}

impl CooccurrenceTable {
    pub fn new(fields: [TaskField; 3], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::invalid("period bin width must be > 0"));
        }
        if fields[0] == fields[1] || fields[0] == fields[2] || fields[1] == fields[2] {
            return Err(Error::invalid("the three attributes must differ"));
        }
        Ok(Self {
            fields,
            bin_width,
            joint: BTreeMap::new(),
        })
    }

    /// Counts every record labeled for all three attributes. Multi-label
    /// attributes contribute one tuple per label combination.
    pub fn from_records(records: &[MetadataRecord], fields: [TaskField; 3], bin_width: f64) -> Result<Self> {
        let mut table = Self::new(fields, bin_width)?;
        for rec in records {
            let labels: Vec<Vec<String>> = fields
                .iter()
                .map(|&f| table.labels_of(rec, f))
                .collect::<Result<_>>()?;
            for a in &labels[0] {
                for b in &labels[1] {
                    for c in &labels[2] {
                        table.add([a.clone(), b.clone(), c.clone()], 1);
                    }
                }
            }
        }
        Ok(table)
    }

    fn labels_of(&self, rec: &MetadataRecord, field: TaskField) -> Result<Vec<String>> {
        match field {
            TaskField::Period => Ok(rec
                .period
                .map(resolve_period)
                .transpose()?
                .map(|y| vec![period_bin(y, self.bin_width)])
                .unwrap_or_default()),
            _ => Ok(record_labels(rec, field)),
        }
    }

    pub fn add(&mut self, tuple: [String; 3], count: u64) {
        if count > 0 {
            *self.joint.entry(tuple).or_default() += count;
        }
    }

    /// Maps a user-supplied value to a table label; numeric periods are binned.
    pub fn normalize_value(&self, position: usize, value: &str) -> String {
        match self.fields[position] {
            TaskField::Period => value
                .trim()
                .parse::<f64>()
                .map(|y| period_bin(y, self.bin_width))
                .unwrap_or_else(|_| value.trim().to_string()),
            TaskField::Material => value.split_whitespace().map(crate::data::stem_material_token).collect::<Vec<_>>().join(" "),
            _ => value.trim().to_string(),
        }
    }

    pub fn joint(&self) -> &BTreeMap<[String; 3], u64> {
        &self.joint
    }

    pub fn total(&self) -> u64 {
        self.joint.values().sum()
    }

    /// Count of tuples matching every `Some` position.
    pub fn count(&self, pattern: [Option<&str>; 3]) -> u64 {
        self.joint
            .iter()
            .filter(|(k, _)| pattern.iter().zip(k.iter()).all(|(p, v)| p.is_none_or(|p| p == v)))
            .map(|(_, c)| c)
            .sum()
    }

    /// Marginal counts of one attribute.
    pub fn marginal(&self, position: usize) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (k, c) in &self.joint {
            *out.entry(k[position].clone()).or_default() += c;
        }
        out
    }

    /// Distinct values of one attribute, sorted.
    pub fn values(&self, position: usize) -> BTreeSet<String> {
        self.joint.keys().map(|k| k[position].clone()).collect()
    }

    fn ratio(count: u64, support: u64, what: impl FnOnce() -> String) -> Result<Estimate> {
        if support == 0 {
            return Err(Error::UndefinedProbability(what()));
        }
        Ok(Estimate {
            probability: count as f64 / support as f64,
            count,
            support,
        })
    }

    /// `P(T1 = t1, T2 = t2 | T3 = t3)`.
    pub fn joint_given(&self, t1: &str, t2: &str, t3: &str) -> Result<Estimate> {
        Self::ratio(self.count([Some(t1), Some(t2), Some(t3)]), self.count([None, None, Some(t3)]), || {
            format!("no samples with {} = {t3}", self.fields[2])
        })
    }

    /// `P(T2 = t2 | T3 = t3)`.
    pub fn second_given_third(&self, t2: &str, t3: &str) -> Result<Estimate> {
        Self::ratio(self.count([None, Some(t2), Some(t3)]), self.count([None, None, Some(t3)]), || {
            format!("no samples with {} = {t3}", self.fields[2])
        })
    }
}

/// `P(T1 = t1 | T2 = t2, T3 = t3)` as `count(t1, t2, t3) / count(t2, t3)`.
pub fn conditional_probability(table: &CooccurrenceTable, t1: &str, t2: &str, t3: &str) -> Result<Estimate> {
    let [_, f2, f3] = table.fields;
    if table.count([None, None, Some(t3)]) == 0 {
        return Err(Error::UndefinedProbability(format!("no samples with {f3} = {t3}")));
    }
    let support = table.count([None, Some(t2), Some(t3)]);
    CooccurrenceTable::ratio(table.count([Some(t1), Some(t2), Some(t3)]), support, || {
        format!("no samples with {f2} = {t2} and {f3} = {t3}")
    })
}

/// A parsed `T1[=v]|T2[=v],T3[=v]` query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionalQuery {
    pub fields: [TaskField; 3],
    pub values: [Option<String>; 3],
}

impl FromStr for ConditionalQuery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("query '{s}' must look like artist|period,material (values as field=value)"));
        let (target, given) = s.split_once('|').ok_or_else(bad)?;
        let (second, third) = given.split_once(',').ok_or_else(bad)?;
        let part = |p: &str| -> Result<(TaskField, Option<String>)> {
            match p.split_once('=') {
                Some((f, v)) if !v.trim().is_empty() => Ok((f.parse()?, Some(v.trim().to_string()))),
                Some(_) => Err(bad()),
                None => Ok((p.parse()?, None)),
            }
        };
        let (a, b, c) = (part(target)?, part(second)?, part(third)?);
        Ok(Self {
            fields: [a.0, b.0, c.0],
            values: [a.1, b.1, c.1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub target: String,
    pub given: [String; 2],
    pub probability: f64,
    pub count: u64,
    pub support: u64,
}

/// Evaluates a query against a table built over the query's fields. Free
/// positions enumerate every value present; conditioning pairs with no
/// support are skipped when enumerated and an error when fixed.
pub fn run_query(table: &CooccurrenceTable, query: &ConditionalQuery) -> Result<Vec<QueryRow>> {
    if table.fields != query.fields {
        return Err(Error::invalid("query fields differ from the table's"));
    }
    let fixed: Vec<Option<String>> = (0..3)
        .map(|i| query.values[i].as_deref().map(|v| table.normalize_value(i, v)))
        .collect();
    let pick = |i: usize| -> Vec<String> {
        match &fixed[i] {
            Some(v) => vec![v.clone()],
            None => table.values(i).into_iter().collect(),
        }
    };
    let mut rows = Vec::new();
    for t2 in pick(1) {
        for t3 in pick(2) {
            if (fixed[1].is_none() || fixed[2].is_none()) && table.count([None, Some(&t2), Some(&t3)]) == 0 {
                continue;
            }
            for t1 in pick(0) {
                let est = conditional_probability(table, &t1, &t2, &t3)?;
                if fixed[0].is_none() && est.count == 0 {
                    continue;
                }
                rows.push(QueryRow {
                    target: t1,
                    given: [t2.clone(), t3.clone()],
                    probability: est.probability,
                    count: est.count,
                    support: est.support,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub true_class: usize,
    pub predicted_class: usize,
    pub count: u64,
    /// `cm[predicted][true]`.
    pub symmetric_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
}

/// The `n` largest off-diagonal cells, ties broken by lower (row, column).
pub fn top_confusions(cm: &ConfusionMatrix, n: usize) -> Result<Vec<ConfusionPair>> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let k = cm.classes();
    let mut cells: Vec<(usize, usize, u64)> = (0..k)
        .flat_map(|r| (0..k).map(move |c| (r, c)))
        .filter(|&(r, c)| r != c && cm.counts[[r, c]] > 0)
        .map(|(r, c)| (r, c, cm.counts[[r, c]]))
        .collect();
    cells.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let label = |i: usize| cm.labels.get(i).cloned();
    Ok(cells
        .into_iter()
        .take(n)
        .map(|(r, c, count)| ConfusionPair {
            true_class: r,
            predicted_class: c,
            count,
            symmetric_count: cm.counts[[c, r]],
            true_label: label(r),
            predicted_label: label(c),
        })
        .collect())
}

/// Shared-layer activations for every row of `split`, in dataset order.
pub fn shared_features(model: &MultiTaskModel<f32>, dataset: &FeatureDataset, split: SplitTag) -> Result<Array2<f32>> {
    let rows = dataset.rows_in(split);
    if rows.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name())));
    }
    let mut out = Array2::<f32>::zeros((0, model.hidden_dim()));
    for chunk in rows.chunks(1024) {
        let (_, act) = model.shared_forward(dataset.features.select(Axis(0), chunk).view())?;
        out.append(Axis(0), act.view()).map_err(|e| Error::dims(e.to_string()))?;
    }
    Ok(out)
}

/// Writes [`shared_features`] as a feature file and returns the matrix.
pub fn export_shared_features(
    model: &MultiTaskModel<f32>,
    dataset: &FeatureDataset,
    split: SplitTag,
    path: impl AsRef<Path>,
) -> Result<Array2<f32>> {
    let features = shared_features(model, dataset, split)?;
    write_feature_matrix(path, &features)?;
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, load_feature_matrix, split_records, SynthConfig};
    use crate::metrics::confusion_matrix;
    use crate::model::TaskSpec;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FIELDS: [TaskField; 3] = [TaskField::Artist, TaskField::Period, TaskField::Material];

    fn t(a: &str, b: &str, c: &str) -> [String; 3] {
        [a.into(), b.into(), c.into()]
    }

    #[test]
    fn direct_count_example() {
        let mut table = CooccurrenceTable::new(FIELDS, 25.0).unwrap();
        table.add(t("A", "1600", "oil"), 2);
        table.add(t("B", "1600", "oil"), 2);
        let p = conditional_probability(&table, "A", "1600", "oil").unwrap();
        assert_eq!(p, Estimate { probability: 0.5, count: 2, support: 4 });
        assert!(matches!(conditional_probability(&table, "A", "1700", "oil"), Err(Error::UndefinedProbability(_))));
        assert!(matches!(conditional_probability(&table, "A", "1600", "ink"), Err(Error::UndefinedProbability(_))));
    }

    #[test]
    fn independence_gives_marginal() {
        // artist independent of (period, material): joint = product of marginals
        let pa = [("A", 3u64), ("B", 1)];
        let pc = [("1600", "oil", 2u64), ("1625", "ink", 5), ("1600", "ink", 1)];
        let mut table = CooccurrenceTable::new(FIELDS, 25.0).unwrap();
        for (a, ca) in pa {
            for (p, m, cc) in pc {
                table.add(t(a, p, m), ca * cc);
            }
        }
        for (p, m, _) in pc {
            let est = conditional_probability(&table, "A", p, m).unwrap();
            assert!((est.probability - 0.75).abs() <= 1e-9 * 0.75);
        }
        let marg = table.marginal(0);
        assert_eq!(marg["A"] + marg["B"], table.total());
    }

    #[test]
    fn records_expand_multi_labels_and_bin_periods() {
        let rec: MetadataRecord = serde_json::from_str(
            r#"{"id":"x","artist":"A","materials":["oils","canvas","unknown"],"period":[1600,1630]}"#,
        )
        .unwrap();
        let none: MetadataRecord = serde_json::from_str(r#"{"id":"y","artist":"A"}"#).unwrap();
        let table = CooccurrenceTable::from_records(&[rec, none], FIELDS, 25.0).unwrap();
        assert_eq!(table.total(), 2);
        assert_eq!(table.count([Some("A"), Some("1600"), Some("oil")]), 1);
        assert_eq!(table.count([Some("A"), Some("1600"), Some("canva")]), 1);
        assert_eq!(period_bin(1612.0, 25.0), "1600");
        assert_eq!(period_bin(-10.0, 25.0), "-25");
        assert_eq!(table.normalize_value(1, "1612"), "1600");
        assert_eq!(table.normalize_value(2, "Oils"), "oil");
    }

    #[test]
    fn full_entanglement_identifies_every_artist() {
        let data = generate_synthetic(&SynthConfig::new(12, 30, 4, 1.0, 2)).unwrap();
        let table = CooccurrenceTable::from_records(&data.records, FIELDS, DEFAULT_PERIOD_BIN).unwrap();
        let query: ConditionalQuery = "artist|period,material".parse().unwrap();
        let rows = run_query(&table, &query).unwrap();
        for artist in table.values(0) {
            assert!(rows.iter().any(|r| r.target == artist && r.probability == 1.0), "{artist}");
        }
    }

    #[test]
    fn query_parsing() {
        let q: ConditionalQuery = "artist=A|period=1612,material".parse().unwrap();
        assert_eq!(q.fields, FIELDS);
        assert_eq!(q.values, [Some("A".into()), Some("1612".into()), None]);
        assert!("artist,period".parse::<ConditionalQuery>().is_err());
        assert!("artist|period".parse::<ConditionalQuery>().is_err());
        assert!("colour|period,material".parse::<ConditionalQuery>().is_err());
        assert!("artist=|period,material".parse::<ConditionalQuery>().is_err());

        let mut table = CooccurrenceTable::new(FIELDS, 25.0).unwrap();
        table.add(t("A", "1600", "oil"), 3);
        table.add(t("B", "1600", "oil"), 1);
        let rows = run_query(&table, &"artist|period=1612,material=oil".parse().unwrap()).unwrap();
        assert_eq!(rows.iter().map(|r| r.probability).collect::<Vec<_>>(), vec![0.75, 0.25]);
        assert!(matches!(
            run_query(&table, &"artist|period=1900,material=oil".parse().unwrap()),
            Err(Error::UndefinedProbability(_))
        ));
    }

    #[test]
    fn top_confusion_examples() {
        let diag = ConfusionMatrix { labels: vec![], counts: array![[4, 0], [0, 9]] };
        assert!(top_confusions(&diag, 3).unwrap().is_empty());
        let cm = ConfusionMatrix { labels: vec!["a".into(), "b".into()], counts: array![[0, 5], [3, 0]] };
        let top = top_confusions(&cm, 1).unwrap();
        assert_eq!((top[0].true_class, top[0].predicted_class, top[0].count, top[0].symmetric_count), (0, 1, 5, 3));
        assert_eq!(top[0].true_label.as_deref(), Some("a"));
        assert_eq!(top_confusions(&cm, 10).unwrap().len(), 2);
        assert!(top_confusions(&cm, 0).is_err());
        let tie = ConfusionMatrix { labels: vec![], counts: array![[0, 2, 2], [2, 0, 0], [0, 0, 0]] };
        let order: Vec<(usize, usize)> = top_confusions(&tie, 3).unwrap().iter().map(|p| (p.true_class, p.predicted_class)).collect();
        assert_eq!(order, vec![(0, 1), (0, 2), (1, 0)]);
    }

    fn small_model_and_data(d: usize, h: usize) -> (MultiTaskModel<f32>, FeatureDataset) {
        let data = generate_synthetic(&SynthConfig::new(3, 10, d, 0.5, 1)).unwrap();
        let split = split_records(&data.records, TaskField::Artist, [0.7, 0.2, 0.1], 1, 0).unwrap();
        let ds = FeatureDataset::build(data.features, &data.records, &split, &[TaskField::Artist], 1).unwrap();
        let model = MultiTaskModel::new(d, h, vec![TaskSpec::multiclass("artist", 3)], 4).unwrap();
        (model, ds)
    }

    #[test]
    fn export_round_trips_and_matches_forward() {
        let (model, ds) = small_model_and_data(8, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shared.omft");
        let exported = export_shared_features(&model, &ds, SplitTag::Train, &path).unwrap();
        let reloaded = load_feature_matrix(&path).unwrap();
        let rows = ds.rows_in(SplitTag::Train);
        let (_, direct) = model.shared_forward(ds.features.select(Axis(0), &rows).view()).unwrap();
        assert!(reloaded.iter().zip(direct.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(exported, reloaded);
    }

    #[test]
    fn zero_rows_export_relu_of_bias() {
        let (model, mut ds) = small_model_and_data(8, 4);
        ds.features.fill(0.0);
        let feats = shared_features(&model, &ds, SplitTag::Test).unwrap();
        let expect = model.shared().bias().mapv(|b| b.max(0.0));
        for row in feats.rows() {
            assert_eq!(row, expect);
        }
    }

    #[test]
    fn export_size_shrinks_by_input_over_hidden() {
        let (model, ds) = small_model_and_data(2048, 64);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("in.omft"), dir.path().join("out.omft"));
        let rows = ds.rows_in(SplitTag::Train);
        write_feature_matrix(&a, &ds.features.select(Axis(0), &rows)).unwrap();
        export_shared_features(&model, &ds, SplitTag::Train, &b).unwrap();
        let payload = |p: &Path| std::fs::metadata(p).unwrap().len() - 24;
        assert_eq!(payload(&a), 32 * payload(&b));
    }

    fn random_table(rng: &mut ChaCha8Rng) -> CooccurrenceTable {
        let mut table = CooccurrenceTable::new(FIELDS, 25.0).unwrap();
        for _ in 0..rng.random_range(1..30) {
            let pick = |rng: &mut ChaCha8Rng, n: u32| rng.random_range(0..n).to_string();
            let tuple = [pick(rng, 3), pick(rng, 3), pick(rng, 2)];
            table.add(tuple, rng.random_range(1..5));
        }
        table
    }

    proptest! {
        #[test]
        fn eq1_identity_and_normalization(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = random_table(&mut rng);
            for t2 in table.values(1) {
                for t3 in table.values(2) {
                    let Ok(p2) = table.second_given_third(&t2, &t3) else { continue };
                    if p2.count == 0 {
                        continue;
                    }
                    let mut sum = 0.0;
                    for t1 in table.values(0) {
                        let c = conditional_probability(&table, &t1, &t2, &t3).unwrap();
                        let j = table.joint_given(&t1, &t2, &t3).unwrap();
                        let rhs = c.probability * p2.probability;
                        prop_assert!((j.probability - rhs).abs() <= 1e-12 * j.probability.max(1e-300));
                        // brute force over all tuples
                        let (mut num, mut den) = (0u64, 0u64);
                        for (k, &v) in table.joint() {
                            if k[1] == t2 && k[2] == t3 {
                                den += v;
                                if k[0] == t1 { num += v; }
                            }
                        }
                        prop_assert_eq!(c.probability, num as f64 / den as f64);
                        sum += c.probability;
                    }
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn top_confusions_ignore_diagonal(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..5usize);
            let truth: Vec<usize> = (0..30).map(|_| rng.random_range(0..k)).collect();
            let pred: Vec<usize> = (0..30).map(|_| rng.random_range(0..k)).collect();
            let cm = confusion_matrix(&pred, &truth, k).unwrap();
            let mut other = cm.clone();
            for i in 0..k {
                other.counts[[i, i]] = rng.random_range(0..100);
            }
            let a = top_confusions(&cm, n).unwrap();
            prop_assert_eq!(&a, &top_confusions(&other, n).unwrap());
            let nonzero = cm.offdiagonal().counts.iter().filter(|&&c| c > 0).count();
            prop_assert_eq!(a.len(), n.min(nonzero));
        }
    }
}
