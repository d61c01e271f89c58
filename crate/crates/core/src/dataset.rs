//! VQA instances and the JSONL manifest they are read from and written to.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImagingError, RasterImage};
use crate::synthbench::{render, SynthScene};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("loading image for {instance_id}: {source}")]
    Image { instance_id: String, source: ImagingError },
}

/// Where an instance's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Synth(Arc<SynthScene>),
    Memory(Arc<RasterImage>),
}

#[derive(Debug, Clone)]
pub struct VqaInstance {
    pub instance_id: String,
    pub image: ImageSource,
    pub question: String,
    pub answer: String,
    pub options: Option<Vec<String>>,
    pub gt_cell: Option<usize>,
    pub grid_n: Option<u32>,
}

impl VqaInstance {
    pub fn load_image(&self) -> Result<Arc<RasterImage>, DatasetError> {
        match &self.image {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::Synth(scene) => Ok(Arc::new(render(scene))),
            ImageSource::Path(p) => RasterImage::load_png(p)
                .map(Arc::new)
                .map_err(|source| DatasetError::Image {
                    instance_id: self.instance_id.clone(),
                    source,
                }),
        }
    }
}

/// One manifest line. `gt_cell` is only present for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub instance_id: String,
    pub image_path: PathBuf,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cell: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_n: Option<u32>,
}

/// Reads a JSONL file of `T`, reporting the failing line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for item in items {
        let line = serde_json::to_string(item).expect("manifest types serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads a manifest. Relative image paths resolve against the manifest's
/// directory. Images are read lazily.
pub fn read_manifest(path: &Path) -> Result<Vec<VqaInstance>, DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = read_jsonl(path)?;
    Ok(entries
        .into_iter()
        .map(|e| VqaInstance {
            image: ImageSource::Path(if e.image_path.is_absolute() {
                e.image_path
            } else {
                base.join(e.image_path)
            }),
            instance_id: e.instance_id,
            question: e.question,
            answer: e.answer,
            options: e.options,
            gt_cell: e.gt_cell,
            grid_n: e.grid_n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::filled(4, 3, [1, 2, 3]).unwrap();
        img.save_png(dir.path().join("a.png")).unwrap();
        let entries = vec![ManifestEntry {
            instance_id: "a".into(),
            image_path: "a.png".into(),
            question: "q?".into(),
            answer: "x".into(),
            options: None,
            gt_cell: Some(4),
            grid_n: Some(3),
        }];
        let path = dir.path().join("manifest.jsonl");
        write_jsonl(&path, &entries).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            r#"{"instance_id":"a","image_path":"a.png","question":"q?","answer":"x","gt_cell":4,"grid_n":3}"#
        );
        let instances = read_manifest(&path).unwrap();
        assert_eq!(instances.len(), 1);
        assert_eq!(*instances[0].load_image().unwrap(), img);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "\n{\"instance_id\": 3}\n").unwrap();
        match read_manifest(&path) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
