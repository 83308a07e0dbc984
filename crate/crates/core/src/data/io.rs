//! Line-delimited dataset files: one JSON record per line, pixels encoded as
//! base64 little-endian f64 bytes so round-trips are exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Attributes, BinaryExample, PairExample, PerspectiveTag, SyntheticImage, TextPrompt};
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    h: usize,
    w: usize,
    c: usize,
    data: String,
    attributes: Attributes,
}

impl ImageRecord {
    fn from_image(img: &SyntheticImage) -> Self {
        let mut bytes = Vec::with_capacity(img.pixels.len() * 8);
        for &p in img.pixels.iter() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let (h, w, c) = img.pixels.dim();
        Self {
            h,
            w,
            c,
            data: BASE64.encode(bytes),
            attributes: img.attributes,
        }
    }

    fn into_image(self) -> std::result::Result<SyntheticImage, String> {
        let bytes = BASE64
            .decode(self.data.as_bytes())
            .map_err(|e| format!("bad pixel encoding: {e}"))?;
        if bytes.len() != self.h * self.w * self.c * 8 {
            return Err(format!(
                "pixel payload holds {} bytes, expected {}",
                bytes.len(),
                self.h * self.w * self.c * 8
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        let pixels = Array3::from_shape_vec((self.h, self.w, self.c), values)
            .map_err(|e| format!("bad pixel shape: {e}"))?;
        Ok(SyntheticImage {
            pixels,
            attributes: self.attributes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt: TextPrompt,
    chosen: ImageRecord,
    rejected: ImageRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rejected_prompt: Option<TextPrompt>,
    perspective: PerspectiveTag,
}

#[derive(Serialize, Deserialize)]
struct BinaryRecord {
    prompt: TextPrompt,
    image: ImageRecord,
    label: bool,
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records.push((idx + 1, record));
    }
    Ok(records)
}

pub fn save_pairs(path: &Path, pairs: &[PairExample]) -> Result<()> {
    write_lines(
        path,
        pairs.iter().map(|ex| PairRecord {
            prompt: ex.prompt.clone(),
            chosen: ImageRecord::from_image(&ex.chosen),
            rejected: ImageRecord::from_image(&ex.rejected),
            rejected_prompt: ex.rejected_prompt.clone(),
            perspective: ex.perspective,
        }),
    )
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairExample>> {
    read_lines::<PairRecord>(path)?
        .into_iter()
        .map(|(line, record)| {
            Ok(PairExample {
                prompt: record.prompt,
                chosen: record.chosen.into_image().map_err(|msg| Error::Parse { line, msg })?,
                rejected: record
                    .rejected
                    .into_image()
                    .map_err(|msg| Error::Parse { line, msg })?,
                rejected_prompt: record.rejected_prompt,
                perspective: record.perspective,
            })
        })
        .collect()
}

pub fn save_binary(path: &Path, examples: &[BinaryExample]) -> Result<()> {
    write_lines(
        path,
        examples.iter().map(|ex| BinaryRecord {
            prompt: ex.prompt.clone(),
            image: ImageRecord::from_image(&ex.image),
            label: ex.label,
        }),
    )
}

pub fn load_binary(path: &Path) -> Result<Vec<BinaryExample>> {
    read_lines::<BinaryRecord>(path)?
        .into_iter()
        .map(|(line, record)| {
            Ok(BinaryExample {
                prompt: record.prompt,
                image: record.image.into_image().map_err(|msg| Error::Parse { line, msg })?,
                label: record.label,
            })
        })
        .collect()
}
