use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};

/// File layout of a generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn classes(&self) -> PathBuf {
        self.root.join("classes.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs")
    }

    pub fn heldout(&self) -> PathBuf {
        self.root.join("heldout")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_path: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub mask: String,
    pub caption: String,
    pub classes: Vec<usize>,
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_manifest<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_manifest<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Writes `images/NNNNN.png` plus `manifest.jsonl`.
pub fn write_pairs(dir: &Path, pairs: &[(RgbImage, String)]) -> Result<()> {
    create_dir(&dir.join("images"))?;
    let mut records = Vec::with_capacity(pairs.len());
    for (i, (img, caption)) in pairs.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        img.save(dir.join(&rel))?;
        records.push(PairRecord {
            image_path: rel,
            caption: caption.clone(),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)
}

pub fn read_pairs(dir: &Path) -> Result<Vec<(RgbImage, String)>> {
    let records: Vec<PairRecord> = read_manifest(&dir.join("manifest.jsonl"))?;
    records
        .into_iter()
        .map(|r| Ok((load_rgb(&dir.join(&r.image_path))?, r.caption)))
        .collect()
}

/// Writes images, masks and `manifest.jsonl`.
pub fn write_samples(dir: &Path, samples: &[SegSample]) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let mask = format!("masks/{i:05}.png");
        s.image.save(dir.join(&image))?;
        s.mask.save(dir.join(&mask))?;
        records.push(SampleRecord {
            image,
            mask,
            caption: s.caption.clone(),
            classes: s.present_classes.clone(),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)
}

pub fn read_samples(dir: &Path) -> Result<Vec<SegSample>> {
    let records: Vec<SampleRecord> = read_manifest(&dir.join("manifest.jsonl"))?;
    records
        .into_iter()
        .map(|r| {
            let image = load_rgb(&dir.join(&r.image))?;
            let mask = image::open(dir.join(&r.mask))?.to_luma8();
            if mask.dimensions() != image.dimensions() {
                return Err(Error::invalid(format!(
                    "mask {} does not match its image size",
                    r.mask
                )));
            }
            Ok(SegSample {
                image,
                mask,
                present_classes: r.classes,
                caption: r.caption,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{class_names, gen_corpus, make_classes, DataConfig};
    use crate::numcore::RngState;

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let classes = make_classes(&class_names(6), 2, &mut RngState::new(0));
        let cfg = DataConfig {
            n_classes: 6,
            ..Default::default()
        };
        let samples = gen_corpus(&classes, &cfg, 3, &RngState::new(1), 0);
        write_samples(dir.path(), &samples).unwrap();
        assert_eq!(read_samples(dir.path()).unwrap(), samples);

        let pairs: Vec<(RgbImage, String)> = samples
            .iter()
            .map(|s| (s.image.clone(), s.caption.clone()))
            .collect();
        let pdir = dir.path().join("pairs");
        write_pairs(&pdir, &pairs).unwrap();
        assert_eq!(read_pairs(&pdir).unwrap(), pairs);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_samples(dir.path()).unwrap_err().kind(), "io");
    }
}
