//! Synthetic desk-scale corpora: deterministic pattern images with matching
//! caption and VQA record files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ::image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{AnswerType, DataError, Image};

const ORGANS: [&str; 6] = ["lung", "liver", "kidney", "brain", "heart", "spleen"];
const SIDES: [&str; 3] = ["left", "right", "both"];
const MODALITIES: [&str; 3] = ["x-ray", "ct", "mri"];

/// A grayscale-ish gradient with one bright square whose position and tint depend on `seed`.
pub fn pattern_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = (size / 4).max(1);
    let ox = rng.random_range(0..=size - sq);
    let oy = rng.random_range(0..=size - sq);
    let tint: [u8; 3] = [rng.random_range(128..=255), rng.random_range(128..=255), rng.random_range(128..=255)];
    let base = rng.random_range(0..64u32);
    RgbImage::from_fn(size, size, |x, y| {
        if (ox..ox + sq).contains(&x) && (oy..oy + sq).contains(&y) {
            Rgb(tint)
        } else {
            let g = (base + (x + y) * 64 / (2 * size)) as u8;
            Rgb([g, g, g])
        }
    })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    img.save(path).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// The same pattern as an in-memory [`Image`] with values in `[0, 1]`.
pub fn pattern_tensor_image(seed: u64, size: usize) -> Image {
    let img = pattern_image(seed, size as u32);
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Image::new(size, size, 3, data)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for l in lines {
        writeln!(f, "{l}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Writes `n` images under `dir/images/` and `dir/captions.jsonl`.
pub fn write_caption_corpus(dir: &Path, n: usize, seed: u64) -> Result<PathBuf, DataError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("cap_{i:05}.png");
        write_png(&img_dir.join(&name), &pattern_image(seed.wrapping_add(i as u64), 32))?;
        let caption = format!(
            "{} of the {} showing a {} finding",
            MODALITIES[rng.random_range(0..MODALITIES.len())],
            ORGANS[rng.random_range(0..ORGANS.len())],
            SIDES[rng.random_range(0..SIDES.len())],
        );
        lines.push(json!({"image": format!("images/{name}"), "caption": caption}));
    }
    let path = dir.join("captions.jsonl");
    write_lines(&path, &lines)?;
    Ok(path)
}

/// Writes `n_train + n_test` VQA records (alternating open and closed) under `dir`.
pub fn write_vqa_corpus(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<PathBuf, DataError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let mut lines = Vec::new();
    for (i, (q, a, t)) in toy_questions(n_train + n_test, seed).into_iter().enumerate() {
        let name = format!("vqa_{i:05}.png");
        write_png(&img_dir.join(&name), &pattern_image(seed.wrapping_add(1000 + i as u64), 32))?;
        let split = if i < n_train { "train" } else { "test" };
        let kind = match t {
            AnswerType::Open => "open",
            AnswerType::Closed => "closed",
        };
        lines.push(json!({
            "image": format!("images/{name}"),
            "question": q,
            "answer": a,
            "answer_type": kind,
            "split": split,
        }));
    }
    let path = dir.join("vqa.jsonl");
    write_lines(&path, &lines)?;
    Ok(path)
}

/// Deterministic (question, answer, type) triplets with short answers.
pub fn toy_questions(n: usize, seed: u64) -> Vec<(String, String, AnswerType)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let organ = ORGANS[rng.random_range(0..ORGANS.len())];
            if i % 2 == 0 {
                let ans = if rng.random_bool(0.5) { "yes" } else { "no" };
                (format!("Is the {organ} normal?"), ans.to_string(), AnswerType::Closed)
            } else {
                let side = SIDES[rng.random_range(0..SIDES.len())];
                (format!("Which side of the {organ} is affected?"), side.to_string(), AnswerType::Open)
            }
        })
        .collect()
}
