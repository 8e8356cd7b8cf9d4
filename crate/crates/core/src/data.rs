//! Sample records, the answer vocabulary and dataset files.
//!
//! Samples are stored as JSON Lines. Visual features are either inline
//! (`"visual": [[…], …]`) or kept in a binary sidecar keyed by sample id:
//!
//! ```text
//! "VTQAFEAT"  u32 record_count
//! repeated:   u32 id_len  id_bytes  u32 objects  u32 width  f32 × objects·width
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::make_property_sentence;

pub const FEATURE_MAGIC: &[u8; 8] = b"VTQAFEAT";

/// One question about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `O × d_v` object features.
    pub visual: Tensor,
    pub object_names: Vec<String>,
    pub object_attributes: Vec<Vec<String>>,
    pub paragraph: Vec<String>,
    pub question: String,
    pub answer: String,
}

impl SampleRecord {
    pub fn objects(&self) -> usize {
        self.visual.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let o = self.objects();
        if !self.visual.is_matrix() || o == 0 {
            return Err(Error::Alignment(format!(
                "sample {:?}: visual features must be an O×d matrix with O ≥ 1",
                self.id
            )));
        }
        if self.object_names.len() != o || self.object_attributes.len() != o {
            return Err(Error::Alignment(format!(
                "sample {:?}: {o} visual rows, {} names, {} attribute lists",
                self.id,
                self.object_names.len(),
                self.object_attributes.len()
            )));
        }
        if self.paragraph.is_empty() {
            return Err(Error::Alignment(format!(
                "sample {:?}: paragraph has no sentences",
                self.id
            )));
        }
        if !self.visual.is_finite() {
            return Err(Error::Argument(format!(
                "sample {:?}: non-finite visual feature",
                self.id
            )));
        }
        Ok(())
    }

    /// `"{name} is {attributes}"` for each object, in visual row order.
    pub fn property_sentences(&self) -> Vec<String> {
        self.object_names
            .iter()
            .zip(&self.object_attributes)
            .map(|(n, a)| make_property_sentence(n, a))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual: Option<Vec<Vec<f64>>>,
    object_names: Vec<String>,
    object_attributes: Vec<Vec<String>>,
    paragraph: Vec<String>,
    question: String,
    answer: String,
}

impl RawSample {
    fn from_record(r: &SampleRecord, inline_visual: bool) -> Self {
        RawSample {
            id: r.id.clone(),
            visual: inline_visual
                .then(|| (0..r.visual.rows()).map(|i| r.visual.row_slice(i).to_vec()).collect()),
            object_names: r.object_names.clone(),
            object_attributes: r.object_attributes.clone(),
            paragraph: r.paragraph.clone(),
            question: r.question.clone(),
            answer: r.answer.clone(),
        }
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Answer string ↔ class index, indexed by descending training frequency
/// (ties lexicographic).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    /// Keeps answers seen at least `min_frequency` times.
    pub fn build<'a>(
        answers: impl IntoIterator<Item = &'a str>,
        min_frequency: usize,
    ) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::Config("min_frequency must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for a in answers {
            *counts.entry(normalize_answer(a)).or_default() += 1;
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(a, c)| *c >= min_frequency && !a.is_empty())
            .collect();
        if kept.is_empty() {
            return Err(Error::Config(format!(
                "no answer occurs at least {min_frequency} times"
            )));
        }
        // BTreeMap order is lexicographic; a stable sort keeps it for ties.
        kept.sort_by_key(|(_, c)| std::cmp::Reverse(*c));
        Self::from_answers(kept.into_iter().map(|(a, _)| a).collect())
    }

    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(normalize_answer(a), i).is_some() {
                return Err(Error::Config(format!("duplicate answer {a:?}")));
            }
        }
        if answers.is_empty() {
            return Err(Error::Config("empty answer vocabulary".into()));
        }
        Ok(AnswerVocabulary { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// Index of an answer after normalisation.
    pub fn get(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.answers.iter().map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for AnswerVocabulary {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_answers(v)
    }
}

impl From<AnswerVocabulary> for Vec<String> {
    fn from(v: AnswerVocabulary) -> Self {
        v.answers
    }
}

/// Convenience for the common call shape.
pub fn build_answer_vocab(answers: &[String], min_frequency: usize) -> Result<AnswerVocabulary> {
    AnswerVocabulary::build(answers.iter().map(String::as_str), min_frequency)
}

/// Train / validation / test partitions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Splits {
    pub const FILES: [&'static str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

    pub fn parts(&self) -> [&[SampleRecord]; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, part) in Self::FILES.iter().zip(self.parts()) {
            write_dataset(&dir.join(name), part)?;
        }
        Ok(())
    }

    /// Sidecar looked for next to a split file: `train.jsonl` → `train.feat`.
    pub fn sidecar_path(samples_path: &Path) -> std::path::PathBuf {
        samples_path.with_extension("feat")
    }

    /// Reads `train.jsonl`, `val.jsonl` and `test.jsonl`; the last two may be
    /// absent. A `.feat` sidecar beside a split file is used when present.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str, required: bool| -> Result<Vec<SampleRecord>> {
            let p = dir.join(name);
            if !required && !p.exists() {
                return Ok(Vec::new());
            }
            let sidecar = Self::sidecar_path(&p);
            load_dataset(&p, sidecar.exists().then_some(sidecar.as_path()))
        };
        Ok(Splits {
            train: read(Self::FILES[0], true)?,
            val: read(Self::FILES[1], false)?,
            test: read(Self::FILES[2], false)?,
        })
    }
}

/// Reads a JSONL sample file. Records without inline `visual` take their
/// features from the optional sidecar.
pub fn load_dataset(samples_path: &Path, features_path: Option<&Path>) -> Result<Vec<SampleRecord>> {
    let sidecar = features_path.map(read_features).transpose()?;
    let reader = BufReader::new(File::open(samples_path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: samples_path.to_owned(),
            line: n + 1,
            message,
        };
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let visual = match raw.visual {
            Some(rows) => Tensor::from_rows(&rows).map_err(|e| parse_err(e.to_string()))?,
            None => sidecar
                .as_ref()
                .and_then(|m| m.get(&raw.id))
                .cloned()
                .ok_or_else(|| Error::MissingFeatures(raw.id.clone()))?,
        };
        let record = SampleRecord {
            id: raw.id,
            visual,
            object_names: raw.object_names,
            object_attributes: raw.object_attributes,
            paragraph: raw.paragraph,
            question: raw.question,
            answer: raw.answer,
        };
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Writes records with inline visual features.
pub fn write_dataset(path: &Path, records: &[SampleRecord]) -> Result<()> {
    write_jsonl(path, records, true)
}

/// Writes records to JSONL without features and puts the features in a
/// binary sidecar.
pub fn write_dataset_with_sidecar(
    samples_path: &Path,
    features_path: &Path,
    records: &[SampleRecord],
) -> Result<()> {
    write_jsonl(samples_path, records, false)?;
    write_features(features_path, records)
}

fn write_jsonl(path: &Path, records: &[SampleRecord], inline_visual: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &RawSample::from_record(r, inline_visual))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Features are narrowed to `f32` on disk.
pub fn write_features(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&u32_of(records.len(), "record count")?.to_le_bytes())?;
    for r in records {
        let id = r.id.as_bytes();
        w.write_all(&u32_of(id.len(), "id length")?.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&u32_of(r.visual.rows(), "object count")?.to_le_bytes())?;
        w.write_all(&u32_of(r.visual.cols(), "feature width")?.to_le_bytes())?;
        for &x in r.visual.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("{what} {n} does not fit in u32")))
}

pub fn read_features(path: &Path) -> Result<HashMap<String, Tensor>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::Parse {
        path: path.to_owned(),
        line: 0,
        message: format!("feature sidecar: {what}"),
    };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated file"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(8)? != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = read_u32(take(4)?);
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(take(4)?);
        let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("id is not UTF-8"))?;
        let objects = read_u32(take(4)?);
        let width = read_u32(take(4)?);
        let raw = take(objects * width * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::matrix(objects, width, data).map_err(|e| bad(&e.to_string()))?;
        out.insert(id, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            visual: Tensor::from_rows(&[vec![0.5, -1.25], vec![2.0, 0.0]]).unwrap(),
            object_names: vec!["cow".into(), "tennis racket".into()],
            object_attributes: vec![vec!["brown".into()], vec![]],
            paragraph: vec!["two cows are grazing".into(), "the sky is blue".into()],
            question: "how many cows are there".into(),
            answer: "two".into(),
        }
    }

    #[test]
    fn vocab_frequency_truncation() {
        let v = build_answer_vocab(&["a".into(), "a".into(), "b".into()], 2).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.get("a"), Some(0));

        let v = build_answer_vocab(&["b".into(), "a".into(), "c".into(), "b".into()], 1).unwrap();
        assert_eq!(v.iter().collect::<Vec<_>>(), ["b", "a", "c"]);

        let mut answers = vec!["x".to_string(); 30];
        answers.extend(vec!["y".to_string(); 29]);
        let v = build_answer_vocab(&answers, 30).unwrap();
        assert_eq!(v.iter().collect::<Vec<_>>(), ["x"]);

        assert!(matches!(build_answer_vocab(&answers, 31), Err(Error::Config(_))));
        assert!(build_answer_vocab(&answers, 0).is_err());
    }

    #[test]
    fn vocab_is_stable_and_normalised() {
        let answers: Vec<String> = ["Tennis  Racket", "two", "tennis racket", "two", "red"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = build_answer_vocab(&answers, 1).unwrap();
        let mut reversed = answers.clone();
        reversed.reverse();
        assert_eq!(a, build_answer_vocab(&reversed, 1).unwrap());
        assert_eq!(a.get(" TENNIS racket "), Some(0));
        assert_eq!(a.answer(1), Some("two"));
    }

    #[test]
    fn empty_file_loads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_dataset(&p, None).unwrap().is_empty());
    }

    #[test]
    fn inline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let records = vec![record("a"), record("b")];
        write_dataset(&p, &records).unwrap();
        assert_eq!(load_dataset(&p, None).unwrap(), records);
    }

    #[test]
    fn sidecar_round_trip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let (p, f) = (dir.path().join("d.jsonl"), dir.path().join("d.feat"));
        let records = vec![record("a"), record("b")];
        write_dataset_with_sidecar(&p, &f, &records).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(!text.contains("visual"));
        assert_eq!(load_dataset(&p, Some(&f)).unwrap(), records);

        assert!(matches!(load_dataset(&p, None), Err(Error::MissingFeatures(id)) if id == "a"));
        write_features(&f, &records[1..]).unwrap();
        assert!(matches!(load_dataset(&p, Some(&f)), Err(Error::MissingFeatures(id)) if id == "a"));
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("d.feat");
        write_features(&f, &[record("a")]).unwrap();
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_features(&f).is_err());
        fs::write(&f, b"NOTMAGIC").unwrap();
        assert!(read_features(&f).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &[record("a")]).unwrap();
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("{not json\n");
        fs::write(&p, text).unwrap();
        let err = load_dataset(&p, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn misaligned_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut r = record("a");
        r.object_attributes.pop();
        write_dataset(&p, &[r]).unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::Alignment(_))));
    }

    #[test]
    fn property_sentences_follow_row_order() {
        assert_eq!(
            record("a").property_sentences(),
            ["cow is brown", "tennis racket is"]
        );
    }
}
