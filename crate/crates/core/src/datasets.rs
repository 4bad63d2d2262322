//! Corpus loading, stratified few-shot splits and synthetic tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{tokenize, Example, Featurizer, Payload, Vocabulary};
use crate::error::{Error, Result};
use crate::numeric::{HardLabel, SeededRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Csv,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(CorpusFormat::Csv),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Tokenized texts with string labels mapped to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCorpus {
    pub tokens: Vec<Vec<String>>,
    pub labels: Vec<HardLabel>,
    pub class_names: Vec<String>,
}

impl RawCorpus {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Interns tokens into `vocab` and assigns ids `0..len` in file order.
    pub fn encode(&self, vocab: &mut Vocabulary) -> Vec<Example> {
        self.tokens
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (toks, &label))| {
                let ids = toks.iter().map(|t| vocab.intern(t)).collect();
                Example::labeled(i as u64, Payload::Tokens(ids), label)
            })
            .collect()
    }
}

fn read_rows(path: &Path, format: CorpusFormat, text_field: &str, label_field: &str) -> Result<Vec<(String, String)>> {
    let row_err = |row: usize, message: String| Error::Row {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut rows = Vec::new();
    match format {
        CorpusFormat::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut reader = csv::Reader::from_reader(file);
            let headers = reader.headers()?.clone();
            let column = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Data(format!("{}: no `{name}` column", path.display())))
            };
            let (ti, li) = (column(text_field)?, column(label_field)?);
            for (i, record) in reader.records().enumerate() {
                // Row numbers count the header as row 1.
                let record = record.map_err(|e| row_err(i + 2, e.to_string()))?;
                let (Some(text), Some(label)) = (record.get(ti), record.get(li)) else {
                    return Err(row_err(i + 2, "missing field".into()));
                };
                rows.push((text.to_string(), label.trim().to_string()));
            }
        }
        CorpusFormat::Jsonl => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| row_err(i + 1, e.to_string()))?;
                let field = |name: &str| -> Result<String> {
                    match value.get(name) {
                        Some(serde_json::Value::String(s)) => Ok(s.clone()),
                        Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                        Some(_) => Err(row_err(i + 1, format!("field `{name}` is not a string"))),
                        None => Err(row_err(i + 1, format!("missing field `{name}`"))),
                    }
                };
                rows.push((field(text_field)?, field(label_field)?.trim().to_string()));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no examples", path.display())));
    }
    Ok(rows)
}

/// Loads a corpus and builds the label vocabulary from it: sorted label
/// strings map to `0..C`.
pub fn load_text_corpus(path: &Path, format: CorpusFormat, text_field: &str, label_field: &str) -> Result<RawCorpus> {
    let rows = read_rows(path, format, text_field, label_field)?;
    let class_names: Vec<String> = rows
        .iter()
        .map(|(_, l)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if class_names.len() < 2 {
        return Err(Error::Data(format!("{}: need at least two labels", path.display())));
    }
    build_corpus(path, rows, class_names)
}

/// Loads a corpus against an existing label vocabulary (validation or test
/// files); unknown labels are an error.
pub fn load_text_corpus_with_classes(
    path: &Path,
    format: CorpusFormat,
    text_field: &str,
    label_field: &str,
    class_names: &[String],
) -> Result<RawCorpus> {
    let rows = read_rows(path, format, text_field, label_field)?;
    build_corpus(path, rows, class_names.to_vec())
}

fn build_corpus(path: &Path, rows: Vec<(String, String)>, class_names: Vec<String>) -> Result<RawCorpus> {
    let index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut labels = Vec::with_capacity(rows.len());
    for (row, (_, label)) in rows.iter().enumerate() {
        let &c = index.get(label.as_str()).ok_or_else(|| Error::Row {
            path: path.to_path_buf(),
            row: row + 1,
            message: format!("unknown label `{label}`"),
        })?;
        labels.push(HardLabel(c));
    }
    let tokens = rows.iter().map(|(t, _)| tokenize(t)).collect();
    Ok(RawCorpus {
        tokens,
        labels,
        class_names,
    })
}

/// Writes `(text, label)` rows in the given format with `text` / `label`
/// field names.
pub fn write_text_corpus(path: &Path, format: CorpusFormat, rows: &[(String, String)]) -> Result<()> {
    match format {
        CorpusFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["text", "label"])?;
            for (t, l) in rows {
                w.write_record([t, l])?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        CorpusFormat::Jsonl => {
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            for (t, l) in rows {
                let line = serde_json::json!({ "text": t, "label": l });
                writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
            }
        }
    }
    Ok(())
}

/// Ground-truth labels of the unlabeled pool. Only telemetry reads these.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenLabels(Vec<HardLabel>);

impl HiddenLabels {
    pub fn new(labels: Vec<HardLabel>) -> Self {
        HiddenLabels(labels)
    }

    pub fn get(&self, i: usize) -> HardLabel {
        self.0[i]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Example>,
    /// Examples with their labels stripped.
    pub unlabeled: Vec<Example>,
    pub unlabeled_truth: HiddenLabels,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub featurizer: Featurizer,
}

impl DatasetSplit {
    /// SHA-256 over every split's ids, labels and payloads.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let truth: Vec<Option<HardLabel>> = (0..self.unlabeled_truth.len())
            .map(|i| Some(self.unlabeled_truth.get(i)))
            .collect();
        let parts: [(&str, &[Example]); 4] = [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("validation", &self.validation),
            ("test", &self.test),
        ];
        for (name, examples) in parts {
            h.update(name.as_bytes());
            for e in examples {
                h.update(e.id.to_le_bytes());
                h.update(e.label.map_or(u64::MAX, |l| l.0 as u64).to_le_bytes());
                match &e.payload {
                    Payload::Tokens(t) => t.iter().for_each(|v| h.update(v.to_le_bytes())),
                    Payload::Features(x) => x.iter().for_each(|v| h.update(v.to_bits().to_le_bytes())),
                }
            }
        }
        for l in truth.into_iter().flatten() {
            h.update((l.0 as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Ids of every split, for disjointness checks.
    pub fn ids(&self) -> [BTreeSet<u64>; 4] {
        let ids = |v: &[Example]| v.iter().map(|e| e.id).collect();
        [ids(&self.labeled), ids(&self.unlabeled), ids(&self.validation), ids(&self.test)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    pub val_per_class: usize,
    /// `None` sends every remaining example to the test split.
    pub test_per_class: Option<usize>,
}

/// Stratified few-shot sampling. Examples are grouped by label and ordered by
/// id before a seeded per-class shuffle, so the result does not depend on the
/// input order. Within each class the shuffled order is carved into labeled,
/// unlabeled, validation and test slices in that order.
pub fn few_shot_split(
    pool: &[Example],
    class_names: &[String],
    sizes: SplitSizes,
    featurizer: Featurizer,
    seed: u64,
) -> Result<DatasetSplit> {
    let num_classes = class_names.len();
    let mut by_class: Vec<Vec<&Example>> = vec![Vec::new(); num_classes];
    for e in pool {
        let label = e
            .label
            .ok_or_else(|| Error::Data(format!("example {} has no label", e.id)))?;
        if label.0 >= num_classes {
            return Err(Error::Data(format!("example {} has label {} ≥ {num_classes}", e.id, label.0)));
        }
        by_class[label.0].push(e);
    }
    let fixed = sizes.labeled_per_class + sizes.unlabeled_per_class + sizes.val_per_class;
    let needed = fixed + sizes.test_per_class.unwrap_or(0);
    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        unlabeled_truth: HiddenLabels::default(),
        validation: Vec::new(),
        test: Vec::new(),
        num_classes,
        class_names: class_names.to_vec(),
        featurizer,
    };
    let mut truth = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < needed {
            return Err(Error::Data(format!(
                "class `{}` has {} examples but the split needs {needed}",
                class_names[c],
                members.len()
            )));
        }
        members.sort_by_key(|e| e.id);
        let mut seen = BTreeSet::new();
        if let Some(dup) = members.iter().find(|e| !seen.insert(e.id)) {
            return Err(Error::Data(format!("duplicate example id {}", dup.id)));
        }
        SeededRng::stream(seed, Stream::Split, c as u64).shuffle(members);
        let (lab, rest) = members.split_at(sizes.labeled_per_class);
        let (unl, rest) = rest.split_at(sizes.unlabeled_per_class);
        let (val, rest) = rest.split_at(sizes.val_per_class);
        let test = match sizes.test_per_class {
            Some(n) => &rest[..n],
            None => rest,
        };
        split.labeled.extend(lab.iter().map(|e| (*e).clone()));
        for e in unl {
            truth.push(e.label.unwrap());
            split.unlabeled.push(Example::unlabeled(e.id, e.payload.clone()));
        }
        split.validation.extend(val.iter().map(|e| (*e).clone()));
        split.test.extend(test.iter().map(|e| (*e).clone()));
    }
    // Interleave classes in the unlabeled pool so batches are not class-sorted.
    let mut order: Vec<usize> = (0..split.unlabeled.len()).collect();
    SeededRng::stream(seed, Stream::Split, num_classes as u64).shuffle(&mut order);
    split.unlabeled = order.iter().map(|&i| split.unlabeled[i].clone()).collect();
    split.unlabeled_truth = HiddenLabels::new(order.iter().map(|&i| truth[i]).collect());
    Ok(split)
}

/// Gaussian class-conditional task. Class `c` has mean `separation[c] · e_c`
/// (the `c`-th basis vector) and isotropic noise; classes with small
/// separation sit near the origin and overlap the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: Vec<f64>,
    pub priors: Vec<f64>,
    pub noise_std: f64,
    pub labeled_per_class: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl SyntheticTaskSpec {
    /// Four classes in eight dimensions, the last class hard.
    pub fn biased() -> Self {
        SyntheticTaskSpec {
            num_classes: 4,
            dim: 8,
            separation: vec![3.0, 3.0, 3.0, 1.0],
            priors: vec![0.25; 4],
            noise_std: 1.0,
            labeled_per_class: 10,
            unlabeled: 2000,
            validation: 200,
            test: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 {
            return fail("synthetic task needs at least two classes");
        }
        if self.dim < self.num_classes {
            return fail("synthetic dimension must be at least the number of classes");
        }
        if self.separation.len() != self.num_classes || self.priors.len() != self.num_classes {
            return fail("separation and priors need one entry per class");
        }
        if self.separation.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return fail("separations must be finite and non-negative");
        }
        if self.priors.iter().any(|p| !(*p >= 0.0)) || !(self.priors.iter().sum::<f64>() > 0.0) {
            return fail("priors must be non-negative with a positive sum");
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise std must be non-negative");
        }
        Ok(())
    }

    /// Classes whose separation is strictly below the largest one.
    pub fn hard_classes(&self) -> Vec<usize> {
        let max = self.separation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..self.num_classes).filter(|&c| self.separation[c] < max).collect()
    }
}

pub fn make_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = SeededRng::stream(seed, Stream::Synthetic, 0);
    let total: f64 = spec.priors.iter().sum();
    let mut next_id = 0u64;
    let mut draw = |class: usize, rng: &mut SeededRng| -> Example {
        let x: Vec<f64> = (0..spec.dim)
            .map(|d| {
                let mean = if d == class { spec.separation[class] } else { 0.0 };
                mean + spec.noise_std * rng.normal()
            })
            .collect();
        next_id += 1;
        Example::labeled(next_id - 1, Payload::Features(x), HardLabel(class))
    };
    let sample_class = |rng: &mut SeededRng| -> usize {
        let mut u = rng.uniform() * total;
        for (c, p) in spec.priors.iter().enumerate() {
            if u < *p {
                return c;
            }
            u -= p;
        }
        spec.priors.iter().rposition(|p| *p > 0.0).unwrap()
    };
    let mut labeled = Vec::new();
    for c in 0..spec.num_classes {
        for _ in 0..spec.labeled_per_class {
            labeled.push(draw(c, &mut rng));
        }
    }
    let mut unlabeled = Vec::with_capacity(spec.unlabeled);
    let mut truth = Vec::with_capacity(spec.unlabeled);
    for _ in 0..spec.unlabeled {
        let c = sample_class(&mut rng);
        let e = draw(c, &mut rng);
        truth.push(HardLabel(c));
        unlabeled.push(Example::unlabeled(e.id, e.payload));
    }
    let validation = (0..spec.validation)
        .map(|_| {
            let c = sample_class(&mut rng);
            draw(c, &mut rng)
        })
        .collect();
    let test = (0..spec.test)
        .map(|_| {
            let c = sample_class(&mut rng);
            draw(c, &mut rng)
        })
        .collect();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        unlabeled_truth: HiddenLabels::new(truth),
        validation,
        test,
        num_classes: spec.num_classes,
        class_names: (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
        featurizer: Featurizer::Dense { dim: spec.dim },
    })
}
