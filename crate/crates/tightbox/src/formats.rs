//! On-disk formats.
//!
//! A dataset directory looks like
//!
//! ```text
//! manifest.json            format tag, version, generator spec, sample list
//! <id>/image.pgm           P5, maxval 255
//! <id>/mask_<c>.pgm        P5, maxval 1, one file per category c = 1..C
//! <id>/boxes.json          [{"x0":..,"y0":..,"x1":..,"y1":..,"category":..}, ...]
//! ```
//!
//! Image bytes are `round(255 · v)`, read back as `byte / 255`, so generated
//! images (already quantized) survive a round trip bit for bit.
//!
//! Checkpoints are JSON:
//!
//! ```text
//! {"format": "tightbox-checkpoint", "version": 1, "model_kind": "tiny-conv",
//!  "categories": C, "height": H, "width": W,
//!  "models": [{"sample_id": null, "tensors": [{"name", "shape", "data"}, ...]}]}
//! ```
//!
//! A tiny-conv checkpoint has one entry with `sample_id` null and tensors
//! `conv{k}.kernel` / `conv{k}.bias` for k = 1..3. A direct-logit checkpoint
//! has one entry per fitted sample holding a single `logits` tensor of shape
//! `[C, H, W]`. Floats are written in shortest round-trip form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tightbox_core::segmodel::{ConvLayer, Image};
use tightbox_core::synth::{DatasetSpec, Sample, Split};
use tightbox_core::{BoxLabel, ModelKind, ModelParams, Tensor};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "tightbox-dataset";
pub const CHECKPOINT_FORMAT: &str = "tightbox-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut line_start = 0;
    for _ in 1..line {
        match bytes[line_start..].iter().position(|&b| b == b'\n') {
            Some(p) => line_start += p + 1,
            None => break,
        }
    }
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(path, &read(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    s.push('\n');
    write(path, s.as_bytes())
}

/// Raw P5 raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub bytes: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.bytes);
        out
    }

    /// Parses a binary PGM with maxval below 256. Comments in the header are skipped.
    pub fn decode(path: &Path, data: &[u8]) -> Result<Self> {
        let err = |offset: usize, message: &str| Error::Parse { path: path.to_path_buf(), offset, message: message.into() };
        if !data.starts_with(b"P5") {
            return Err(err(0, "missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match data.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while data.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while data.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            if start == pos {
                return Err(err(pos, "expected a decimal header field"));
            }
            *field = std::str::from_utf8(&data[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(start, "header field out of range"))?;
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(err(pos, "zero image dimension"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(err(pos, "maxval must be in 1..=255"));
        }
        if !data.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(err(pos, "expected whitespace after maxval"));
        }
        pos += 1;
        let need = width * height;
        let body = &data[pos..];
        if body.len() < need {
            return Err(err(data.len(), &format!("truncated raster: expected {need} bytes, found {}", body.len())));
        }
        if body.len() > need {
            return Err(err(pos + need, "trailing bytes after raster"));
        }
        if let Some(k) = body.iter().position(|&b| b as usize > maxval) {
            return Err(err(pos + k, "sample exceeds maxval"));
        }
        Ok(Self { width, height, maxval: maxval as u16, bytes: body.to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(path, &read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write(path, &self.encode())
    }
}

pub fn image_to_pgm(img: &Image) -> Pgm {
    let bytes = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Pgm { width: img.width, height: img.height, maxval: 255, bytes }
}

pub fn pgm_to_image(path: &Path, pgm: &Pgm) -> Result<Image> {
    let scale = pgm.maxval as f64;
    let px = pgm.bytes.iter().map(|&b| b as f64 / scale).collect();
    Image::new(pgm.height, pgm.width, px).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn mask_to_pgm(mask: &[bool], height: usize, width: usize) -> Pgm {
    Pgm { width, height, maxval: 1, bytes: mask.iter().map(|&m| m as u8).collect() }
}

pub fn read_boxes(path: &Path, height: usize, width: usize) -> Result<Vec<BoxLabel>> {
    let boxes: Vec<BoxLabel> = read_json(path)?;
    for b in &boxes {
        b.validate(height, width).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(boxes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
    pub boxes: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    pub spec: Option<DatasetSpec>,
    pub samples: Vec<ManifestEntry>,
}

/// Samples plus the generator spec that produced them, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: Option<DatasetSpec>,
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(spec: Option<DatasetSpec>, samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("dataset has no samples".into()))?;
        let (height, width, categories) = (first.image.height, first.image.width, first.categories());
        if samples.iter().any(|s| (s.image.height, s.image.width, s.categories()) != (height, width, categories)) {
            return Err(Error::Invalid("samples differ in size or category count".into()));
        }
        Ok(Self { spec, height, width, categories, samples })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let base = PathBuf::from(&s.id);
            let image = base.join("image.pgm");
            image_to_pgm(&s.image).write(&dir.join(&image))?;
            let mut masks = Vec::with_capacity(s.masks.len());
            for (c, m) in s.masks.iter().enumerate() {
                let p = base.join(format!("mask_{}.pgm", c + 1));
                mask_to_pgm(m, s.image.height, s.image.width).write(&dir.join(&p))?;
                masks.push(p);
            }
            let boxes = base.join("boxes.json");
            write_json(&dir.join(&boxes), &s.boxes)?;
            entries.push(ManifestEntry { id: s.id.clone(), split: s.split, image, masks, boxes });
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            version: FORMAT_VERSION,
            height: self.height,
            width: self.width,
            categories: self.categories,
            spec: self.spec.clone(),
            samples: entries,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let m: Manifest = read_json(&mpath)?;
        if m.format != DATASET_FORMAT || m.version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("{}: unsupported format {} v{}", mpath.display(), m.format, m.version)));
        }
        let mut samples = Vec::with_capacity(m.samples.len());
        for e in &m.samples {
            let ipath = dir.join(&e.image);
            let image = pgm_to_image(&ipath, &Pgm::read(&ipath)?)?;
            if (image.height, image.width) != (m.height, m.width) {
                return Err(Error::Invalid(format!("{}: image size differs from manifest", ipath.display())));
            }
            if e.masks.len() != m.categories {
                return Err(Error::Invalid(format!("{}: sample {} lists {} masks", mpath.display(), e.id, e.masks.len())));
            }
            let mut masks = Vec::with_capacity(e.masks.len());
            for mp in &e.masks {
                let path = dir.join(mp);
                let pgm = Pgm::read(&path)?;
                if pgm.maxval != 1 || (pgm.height, pgm.width) != (m.height, m.width) {
                    return Err(Error::Invalid(format!("{}: mask must be {}x{} with maxval 1", path.display(), m.height, m.width)));
                }
                masks.push(pgm.bytes.iter().map(|&b| b == 1).collect());
            }
            let boxes = read_boxes(&dir.join(&e.boxes), m.height, m.width)?;
            if let Some(b) = boxes.iter().find(|b| b.category > m.categories) {
                return Err(Error::Invalid(format!("{}: box category {} exceeds {}", e.boxes.display(), b.category, m.categories)));
            }
            samples.push(Sample { id: e.id.clone(), split: e.split, image, masks, boxes });
        }
        Self::from_samples(m.spec, samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub sample_id: Option<String>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format: String,
    pub version: u32,
    pub model_kind: ModelKind,
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub models: Vec<CheckpointEntry>,
}

fn tensor_names(params: &ModelParams) -> Vec<String> {
    match params {
        ModelParams::DirectLogit { .. } => vec!["logits".into()],
        ModelParams::TinyConv { layers, .. } => {
            (1..=layers.len()).flat_map(|k| [format!("conv{k}.kernel"), format!("conv{k}.bias")]).collect()
        }
    }
}

pub fn entry_from_params(sample_id: Option<String>, params: &ModelParams) -> CheckpointEntry {
    let tensors = tensor_names(params)
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
        .collect();
    CheckpointEntry { sample_id, tensors }
}

pub fn params_from_entry(kind: ModelKind, categories: usize, entry: &CheckpointEntry) -> Result<ModelParams> {
    let bad = |m: String| Error::Invalid(format!("checkpoint: {m}"));
    let tensor = |nt: &NamedTensor| Tensor::new(nt.shape.clone(), nt.data.clone()).map_err(|e| bad(format!("{}: {e}", nt.name)));
    let params = match kind {
        ModelKind::DirectLogit => {
            let [t] = &entry.tensors[..] else {
                return Err(bad("direct-logit entries hold exactly one tensor".into()));
            };
            ModelParams::DirectLogit { logits: tensor(t)? }
        }
        ModelKind::TinyConv => {
            if !entry.tensors.len().is_multiple_of(2) || entry.tensors.is_empty() {
                return Err(bad("tiny-conv entries hold kernel/bias pairs".into()));
            }
            let layers = entry
                .tensors
                .chunks(2)
                .map(|kb| Ok(ConvLayer { kernel: tensor(&kb[0])?, bias: tensor(&kb[1])? }))
                .collect::<Result<Vec<_>>>()?;
            ModelParams::TinyConv { categories, layers }
        }
    };
    let names = tensor_names(&params);
    if entry.tensors.iter().map(|t| &t.name).ne(names.iter()) {
        return Err(bad(format!("expected tensors {names:?}")));
    }
    if params.categories() != categories {
        return Err(bad("category count mismatch".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tightbox_core::synth::{generate, ShapeKind};

    #[test]
    fn pgm_roundtrip_and_comments() {
        let p = Pgm { width: 3, height: 2, maxval: 255, bytes: vec![0, 1, 2, 253, 254, 255] };
        let path = Path::new("x.pgm");
        assert_eq!(Pgm::decode(path, &p.encode()).unwrap(), p);
        let mut with_comment = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        with_comment.extend_from_slice(&p.bytes);
        assert_eq!(Pgm::decode(path, &with_comment).unwrap(), p);
    }

    #[test]
    fn truncated_pgm_names_file() {
        let p = Pgm { width: 4, height: 4, maxval: 255, bytes: vec![7; 16] };
        let mut bytes = p.encode();
        bytes.truncate(bytes.len() - 3);
        let err = Pgm::decode(Path::new("d/s/image.pgm"), &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d/s/image.pgm") && msg.contains("truncated"), "{msg}");
        assert!(Pgm::decode(Path::new("a"), b"P6\n1 1\n255\n\0").is_err());
        assert!(Pgm::decode(Path::new("a"), b"P5\n1 1\n1\n\x02").is_err());
    }

    #[test]
    fn json_error_offset() {
        let bytes = b"[\n  {\"x0\": 1,, }\n]";
        let err = parse_json::<Vec<BoxLabel>>(Path::new("b.json"), bytes).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(bytes[offset], b','),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn inverted_box_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("boxes.json");
        fs::write(&p, r#"[{"x0":5,"y0":0,"x1":2,"y1":3,"category":1}]"#).unwrap();
        let err = read_boxes(&p, 8, 8).unwrap_err().to_string();
        assert!(err.contains("inverted"), "{err}");
    }

    #[test]
    fn dataset_roundtrip() {
        let spec = DatasetSpec {
            n_train: 2,
            n_val: 1,
            height: 32,
            width: 40,
            radius: (4.0, 8.0),
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Crescent],
            categories: 2,
            n_objects: (1, 2),
            ..DatasetSpec::default()
        };
        let ds = Dataset::from_samples(Some(spec.clone()), generate(&spec).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), ds);

        let img = dir.path().join("train_0000/image.pgm");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err().to_string();
        assert!(err.contains("train_0000/image.pgm"), "{err}");
    }

    #[test]
    fn checkpoint_entry_roundtrip() {
        let p = ModelParams::init(ModelKind::TinyConv, 2, 5, 5, 9).unwrap();
        let e = entry_from_params(None, &p);
        let json = serde_json::to_string(&e).unwrap();
        let back: CheckpointEntry = serde_json::from_str(&json).unwrap();
        assert_eq!(params_from_entry(ModelKind::TinyConv, 2, &back).unwrap(), p);
        assert!(params_from_entry(ModelKind::DirectLogit, 2, &back).is_err());
    }
}
