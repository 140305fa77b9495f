//! Line-delimited caption and VQA record files, plus image loading.
//!
//! Caption file, one JSON object per line:
//! `{"image": "<path>", "caption": "<text>"}`
//!
//! VQA file, one JSON object per line:
//! `{"image": "<path>", "question": "<text>", "answer": "<text>", "answer_type": "open"|"closed", "split": "train"|"test"}`
//!
//! Relative image paths resolve against the directory holding the record file.
//! Blank lines are skipped; unknown keys are rejected.

mod image;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::image::{decode_rgb, load_image, resize_bilinear, standardize, Image, ImageConfig};

/// Train/test sizes of the public radiology VQA benchmark.
pub const BENCHMARK_TRAIN: usize = 3064;
pub const BENCHMARK_TEST: usize = 451;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: image not found: {path}")]
    MissingImage { line: usize, path: String },
    #[error("cannot decode image {path}: {message}")]
    Image { path: String, message: String },
    #[error("pair (image {image}, question {question:?}) appears in both train and test")]
    SplitOverlap { image: String, question: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_path: PathBuf,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image_path: PathBuf,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    pub split: Split,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    image: String,
    caption: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VqaLine {
    image: String,
    question: String,
    answer: String,
    answer_type: AnswerType,
    split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub test: usize,
    pub open: usize,
    pub closed: usize,
}

impl Counts {
    pub fn tally(records: &[VqaRecord]) -> Self {
        let mut c = Counts::default();
        for r in records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Test => c.test += 1,
            }
            match r.answer_type {
                AnswerType::Open => c.open += 1,
                AnswerType::Closed => c.closed += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_name: String,
    pub records: Vec<VqaRecord>,
    pub counts: Counts,
    /// Non-fatal findings, e.g. benchmark size mismatches.
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn new(source_name: impl Into<String>, records: Vec<VqaRecord>) -> Self {
        let source_name = source_name.into();
        let counts = Counts::tally(&records);
        let mut warnings = Vec::new();
        if is_benchmark(&source_name) && (counts.train != BENCHMARK_TRAIN || counts.test != BENCHMARK_TEST) {
            let msg = format!(
                "benchmark split sizes train={} test={} differ from expected {BENCHMARK_TRAIN}/{BENCHMARK_TEST}",
                counts.train, counts.test
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Self {
            source_name,
            records,
            counts,
            warnings,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.counts == Counts::tally(&self.records)
    }

    pub fn split(&self, split: Split) -> Vec<VqaRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn counts_by_type(&self) -> BTreeMap<AnswerType, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.answer_type).or_insert(0) += 1;
        }
        m
    }
}

fn is_benchmark(source: &str) -> bool {
    let key: String = source
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    key.starts_with("vqarad")
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn resolve(base: &Path, image: &str, line: usize) -> Result<PathBuf, DataError> {
    let p = Path::new(image);
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.is_file() {
        return Err(DataError::MissingImage {
            line,
            path: full.display().to_string(),
        });
    }
    Ok(full)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn non_empty(value: &str, field: &str, line: usize) -> Result<(), DataError> {
    if value.trim().is_empty() {
        return Err(DataError::Malformed {
            line,
            message: format!("empty {field}"),
        });
    }
    Ok(())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_caption_dataset(path: &Path) -> Result<Vec<CaptionRecord>, DataError> {
    let text = read(path)?;
    let base = base_dir(path);
    let mut out = Vec::new();
    for (line, raw) in lines(&text) {
        let rec: CaptionLine = serde_json::from_str(raw).map_err(|e| DataError::Malformed {
            line,
            message: e.to_string(),
        })?;
        non_empty(&rec.caption, "caption", line)?;
        out.push(CaptionRecord {
            image_path: resolve(&base, &rec.image, line)?,
            caption: rec.caption,
        });
    }
    Ok(out)
}

pub fn load_vqa_dataset(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = read(path)?;
    let base = base_dir(path);
    let mut records = Vec::new();
    for (line, raw) in lines(&text) {
        let rec: VqaLine = serde_json::from_str(raw).map_err(|e| DataError::Malformed {
            line,
            message: e.to_string(),
        })?;
        non_empty(&rec.question, "question", line)?;
        non_empty(&rec.answer, "answer", line)?;
        records.push(VqaRecord {
            image_path: resolve(&base, &rec.image, line)?,
            question: rec.question,
            answer: rec.answer,
            answer_type: rec.answer_type,
            split: rec.split,
        });
    }
    check_disjoint(&records)?;
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(DatasetManifest::new(source, records))
}

fn check_disjoint(records: &[VqaRecord]) -> Result<(), DataError> {
    let train: HashSet<(&Path, &str)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| (r.image_path.as_path(), r.question.as_str()))
        .collect();
    if let Some(r) = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .find(|r| train.contains(&(r.image_path.as_path(), r.question.as_str())))
    {
        return Err(DataError::SplitOverlap {
            image: r.image_path.display().to_string(),
            question: r.question.clone(),
        });
    }
    Ok(())
}

/// Decodes every referenced image, reporting the first failure.
pub fn check_images_decode<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<usize, DataError> {
    let mut n = 0;
    for p in paths {
        decode_rgb(p)?;
        n += 1;
    }
    Ok(n)
}

/// Deterministic permutation of `items` under `seed`.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png"] {
            synth::write_png(&dir.path().join(name), &synth::pattern_image(7, 20)).unwrap();
        }
        dir
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn caption_file_order_preserved() {
        let dir = fixture_dir();
        let p = write(
            dir.path(),
            "cap.jsonl",
            r#"{"image":"a.png","caption":"first"}
{"image":"b.png","caption":"second"}
{"image":"c.png","caption":"third"}
"#,
        );
        let recs = load_caption_dataset(&p).unwrap();
        let caps: Vec<_> = recs.iter().map(|r| r.caption.as_str()).collect();
        assert_eq!(caps, ["first", "second", "third"]);
    }

    #[test]
    fn empty_caption_names_line() {
        let dir = fixture_dir();
        let p = write(
            dir.path(),
            "cap.jsonl",
            "{\"image\":\"a.png\",\"caption\":\"ok\"}\n{\"image\":\"b.png\",\"caption\":\"  \"}\n",
        );
        let err = load_caption_dataset(&p).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_image_names_path() {
        let dir = fixture_dir();
        let p = write(dir.path(), "cap.jsonl", "{\"image\":\"nope.png\",\"caption\":\"x\"}\n");
        let err = load_caption_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
    }

    #[test]
    fn vqa_counts_by_type() {
        let dir = fixture_dir();
        let p = write(
            dir.path(),
            "fixture.jsonl",
            r#"{"image":"a.png","question":"q1","answer":"x","answer_type":"open","split":"train"}
{"image":"a.png","question":"q2","answer":"yes","answer_type":"closed","split":"train"}
{"image":"b.png","question":"q3","answer":"y","answer_type":"open","split":"test"}
{"image":"c.png","question":"q4","answer":"no","answer_type":"closed","split":"test"}
"#,
        );
        let m = load_vqa_dataset(&p).unwrap();
        assert_eq!(m.counts, Counts { train: 2, test: 2, open: 2, closed: 2 });
        assert!(m.is_consistent());
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn vqa_rejects_unknown_enums() {
        let dir = fixture_dir();
        let p = write(
            dir.path(),
            "f.jsonl",
            r#"{"image":"a.png","question":"q","answer":"x","answer_type":"open","split":"validation"}"#,
        );
        assert!(matches!(load_vqa_dataset(&p), Err(DataError::Malformed { line: 1, .. })));
        let p = write(
            dir.path(),
            "g.jsonl",
            r#"{"image":"a.png","question":"q","answer":"x","answer_type":"yesno","split":"train"}"#,
        );
        assert!(matches!(load_vqa_dataset(&p), Err(DataError::Malformed { line: 1, .. })));
    }

    #[test]
    fn vqa_rejects_split_overlap() {
        let dir = fixture_dir();
        let p = write(
            dir.path(),
            "f.jsonl",
            r#"{"image":"a.png","question":"q","answer":"x","answer_type":"open","split":"train"}
{"image":"a.png","question":"q","answer":"x","answer_type":"open","split":"test"}"#,
        );
        assert!(matches!(load_vqa_dataset(&p), Err(DataError::SplitOverlap { .. })));
    }

    #[test]
    fn benchmark_size_mismatch_is_warning() {
        let m = DatasetManifest::new("vqa_rad", vec![]);
        assert_eq!(m.warnings.len(), 1);
        let m = DatasetManifest::new("toy", vec![]);
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn load_image_resizes_and_standardizes() {
        let dir = fixture_dir();
        let cfg = ImageConfig::with_size(16);
        let img = load_image(&dir.path().join("a.png"), &cfg).unwrap();
        assert_eq!((img.height, img.width, img.channels), (16, 16, 3));
        assert!(load_image(&write(dir.path(), "bad.png", "not a png"), &cfg).is_err());
    }

    #[test]
    fn shuffle_is_deterministic() {
        let v: Vec<u32> = (0..200).collect();
        assert_eq!(shuffled(&v, 3), shuffled(&v, 3));
        assert_ne!(shuffled(&v, 3), shuffled(&v, 4));
    }
}
