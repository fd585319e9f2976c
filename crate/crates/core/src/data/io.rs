//! Dataset files: JSON Lines records plus raw f32 image sidecars.
//!
//! Sidecar layout: `C`, `H`, `W` as little-endian u32, then `C·H·W`
//! little-endian f32 values. Inline images carry the same bytes base64
//! encoded behind a `base64:` prefix.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::generate::{AnswerClass, CaptionSample, Corpus, QType, Split, VqaSample};
use super::scene::Image;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
const INLINE_PREFIX: &str = "base64:";

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    image_id: String,
    image: String,
    question: String,
    answer: String,
    qtype: QType,
    answer_class: AnswerClass,
    tier: u8,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionRecord {
    id: String,
    image: String,
    caption: String,
    split: Split,
}

pub fn image_to_bytes(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * img.data.len());
    for d in [img.channels, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Image> {
    let bad = |reason: &str| Error::Input(format!("image sidecar: {reason}"));
    if bytes.len() < 12 {
        return Err(bad("missing header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| bad("header overflow"))?;
    if bytes.len() != 12 + 4 * n {
        return Err(bad(&format!(
            "expected {} payload bytes for {c}x{h}x{w}, found {}",
            4 * n,
            bytes.len() - 12
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::new(c, h, w, data)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, image_to_bytes(img)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image_from_bytes(&bytes)
}

fn image_ref(
    dir: &Path,
    image_id: &str,
    img: &Image,
    inline: bool,
    written: &mut HashMap<String, String>,
) -> Result<String> {
    if inline {
        let b64 = base64::engine::general_purpose::STANDARD.encode(image_to_bytes(img));
        return Ok(format!("{INLINE_PREFIX}{b64}"));
    }
    if let Some(r) = written.get(image_id) {
        return Ok(r.clone());
    }
    let rel = format!("images/{image_id}.f32");
    write_image(&dir.join(&rel), img)?;
    written.insert(image_id.to_string(), rel.clone());
    Ok(rel)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes `dataset.jsonl`, `captions.jsonl` and (unless `inline`) one image
/// sidecar per image under `dir/images/`. Records are sorted by id.
pub fn write_dataset(dir: &Path, corpus: &Corpus, inline: bool) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut written = HashMap::new();
    let mut samples: Vec<&VqaSample> = corpus.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        records.push(SampleRecord {
            id: s.id.clone(),
            image_id: s.image_id.clone(),
            image: image_ref(dir, &s.image_id, &s.image, inline, &mut written)?,
            question: s.question.clone(),
            answer: s.answer.clone(),
            qtype: s.qtype,
            answer_class: s.answer_class,
            tier: s.tier,
            split: s.split,
        });
    }
    write_lines(&dir.join(DATASET_FILE), &records)?;

    let mut caps: Vec<&CaptionSample> = corpus.captions.iter().collect();
    caps.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut records = Vec::with_capacity(caps.len());
    for c in caps {
        records.push(CaptionRecord {
            id: c.image_id.clone(),
            image: image_ref(dir, &c.image_id, &c.image, inline, &mut written)?,
            caption: c.caption.clone(),
            split: c.split,
        });
    }
    write_lines(&dir.join(CAPTIONS_FILE), &records)
}

struct ImageCache {
    dir: PathBuf,
    cache: HashMap<String, Arc<Image>>,
}

impl ImageCache {
    fn load(&mut self, reference: &str) -> Result<Arc<Image>> {
        if let Some(img) = self.cache.get(reference) {
            return Ok(img.clone());
        }
        let img = if let Some(b64) = reference.strip_prefix(INLINE_PREFIX) {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| Error::Input(format!("inline image: {e}")))?;
            image_from_bytes(&bytes)?
        } else {
            read_image(&self.dir.join(reference))?
        };
        let img = Arc::new(img);
        self.cache.insert(reference.to_string(), img.clone());
        Ok(img)
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Reads a `dataset.jsonl` file, loading and tokenizing every record.
pub fn read_dataset(path: &Path) -> Result<Vec<VqaSample>> {
    let tok = Tokenizer::new();
    let mut cache = ImageCache {
        dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        cache: HashMap::new(),
    };
    read_lines::<SampleRecord>(path)?
        .into_iter()
        .map(|r| {
            Ok(VqaSample {
                image: cache.load(&r.image)?,
                question_ids: tok.encode(&r.question)?,
                answer_ids: tok.encode(&r.answer)?,
                id: r.id,
                image_id: r.image_id,
                question: r.question,
                answer: r.answer,
                qtype: r.qtype,
                answer_class: r.answer_class,
                tier: r.tier,
                split: r.split,
            })
        })
        .collect()
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionSample>> {
    let tok = Tokenizer::new();
    let mut cache = ImageCache {
        dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        cache: HashMap::new(),
    };
    read_lines::<CaptionRecord>(path)?
        .into_iter()
        .map(|r| {
            Ok(CaptionSample {
                image: cache.load(&r.image)?,
                caption_ids: tok.encode(&r.caption)?,
                image_id: r.id,
                caption: r.caption,
                split: r.split,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_dataset, SyntheticSpec};
    use crate::parallel::Execution;

    fn corpus() -> Corpus {
        let spec = SyntheticSpec {
            train_images: 6,
            val_images: 1,
            test_images: 2,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec, Execution::Sequential).unwrap()
    }

    #[test]
    fn sidecar_and_inline_round_trip() {
        let c = corpus();
        for inline in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            write_dataset(dir.path(), &c, inline).unwrap();
            let back = read_dataset(&dir.path().join(DATASET_FILE)).unwrap();
            assert_eq!(back, c.samples);
            let caps = read_captions(&dir.path().join(CAPTIONS_FILE)).unwrap();
            assert_eq!(caps, c.captions);
        }
    }

    #[test]
    fn jsonl_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &corpus(), false).unwrap();
        write_dataset(b.path(), &corpus(), false).unwrap();
        let ra = fs::read(a.path().join(DATASET_FILE)).unwrap();
        let rb = fs::read(b.path().join(DATASET_FILE)).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let img = Image::filled(3, 4, 4, 0.5);
        let mut bytes = image_to_bytes(&img);
        assert_eq!(image_from_bytes(&bytes).unwrap(), img);
        bytes.pop();
        assert!(image_from_bytes(&bytes).is_err());
    }
}
