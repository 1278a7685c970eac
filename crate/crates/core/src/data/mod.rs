//! Samples, splits and the dataset directory format.
//!
//! A dataset directory holds:
//!
//! ```text
//! images/<filename>   16-bit binary pixmaps (P6, maxval 65535), one per sample
//! labels.tsv          one row per sample
//! schema.txt          attribute schema (see `schema`)
//! ```
//!
//! `labels.tsv` is tab-separated UTF-8 with `\n` line endings. Lines starting
//! with `#` are comments; the writer emits one header comment naming the
//! columns. Every other line is
//!
//! ```text
//! <filename> <split> <identity> <camera> <attr_0> ... <attr_{L-1}>
//! ```
//!
//! where `<split>` is `train`, `query` or `gallery`, identity and camera are
//! non-negative integers and the attribute columns are class indices in the
//! schema's label order.

pub mod augment;
pub mod pnm;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schema::AttributeSchema;
use crate::tensor::Tensor;

pub const LABELS_FILE: &str = "labels.tsv";
pub const SCHEMA_FILE: &str = "schema.txt";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub filename: String,
    pub split: Split,
    pub identity: usize,
    pub camera: usize,
    /// Class index per attribute, in label order.
    pub attributes: Vec<usize>,
    /// `[3, H, W]`, values in `[0, 1)`.
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: AttributeSchema,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn identities(&self, split: Split) -> BTreeSet<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.identity).collect()
    }

    /// Maps each training identity to a dense class index `0..K_train`.
    pub fn train_classes(&self) -> BTreeMap<usize, usize> {
        self.identities(Split::Train).into_iter().enumerate().map(|(c, id)| (id, c)).collect()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Checks the label and split invariants:
    /// * attribute labels fit the schema and are equal for equal identities,
    /// * training and test identities are disjoint,
    /// * every image has the same `[3, H, W]` shape.
    pub fn validate(&self) -> Result<()> {
        let mut per_id: BTreeMap<usize, &[usize]> = BTreeMap::new();
        let shape = self.image_shape().map(<[usize]>::to_vec);
        for s in &self.samples {
            self.schema.check_labels(&s.attributes).map_err(|e| {
                Error::Validation(format!("{}: {e}", s.filename))
            })?;
            if let Some(prev) = per_id.insert(s.identity, &s.attributes) {
                if prev != s.attributes.as_slice() {
                    return Err(Error::Validation(format!(
                        "identity {} has inconsistent attribute labels",
                        s.identity
                    )));
                }
            }
            if s.image.shape().len() != 3 || s.image.shape()[0] != 3 || Some(s.image.shape().to_vec()) != shape {
                return Err(Error::Integrity(format!(
                    "{}: image shape {:?} differs from {:?}",
                    s.filename,
                    s.image.shape(),
                    shape
                )));
            }
        }
        let train = self.identities(Split::Train);
        let test: BTreeSet<usize> = self.identities(Split::Query).union(&self.identities(Split::Gallery)).cloned().collect();
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::Validation(format!("identity {id} is in both train and test splits")));
        }
        Ok(())
    }

    pub fn render_labels(&self) -> String {
        let mut out = String::from("# filename\tsplit\tidentity\tcamera");
        for a in self.schema.attributes() {
            out.push('\t');
            out.push_str(&a.name);
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{}\t{}\t{}\t{}", s.filename, s.split.name(), s.identity, s.camera);
            for a in &s.attributes {
                let _ = write!(out, "\t{a}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        self.schema.save(&dir.join(SCHEMA_FILE))?;
        let labels = dir.join(LABELS_FILE);
        std::fs::write(&labels, self.render_labels()).map_err(|e| Error::io(&labels, e))?;
        for s in &self.samples {
            pnm::write_ppm(&images.join(&s.filename), &s.image)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let labels_path = dir.join(LABELS_FILE);
        if !dir.is_dir() {
            return Err(Error::io(dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        if !labels_path.exists() {
            let empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
            if empty {
                return Err(Error::EmptyDataset(dir.to_path_buf()));
            }
            return Err(Error::io(&labels_path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let schema = AttributeSchema::load(&dir.join(SCHEMA_FILE))?;
        let text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let rows = parse_labels(&text, &labels_path.display().to_string(), &schema)?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        let images = dir.join(IMAGES_DIR);
        let listed: BTreeSet<&str> = rows.iter().map(|r| r.filename.as_str()).collect();
        if listed.len() != rows.len() {
            return Err(Error::Integrity(format!("{}: duplicate filenames", labels_path.display())));
        }
        if let Ok(entries) = std::fs::read_dir(&images) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if !listed.contains(name.as_str()) {
                    return Err(Error::Integrity(format!("image {name} has no row in {LABELS_FILE}")));
                }
            }
        }
        let mut samples = Vec::with_capacity(rows.len());
        for r in rows {
            let path = images.join(&r.filename);
            if !path.is_file() {
                return Err(Error::Integrity(format!("{LABELS_FILE} lists {} but the image is missing", r.filename)));
            }
            let image = pnm::read_ppm(&path)?;
            samples.push(Sample { image, ..r });
        }
        let ds = Dataset { schema, samples };
        ds.validate()?;
        Ok(ds)
    }
}

/// Parses `labels.tsv` rows into samples with placeholder images.
pub fn parse_labels(text: &str, source: &str, schema: &AttributeSchema) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let perr = |detail: String| Error::Parse {
            file: source.to_string(),
            line: line_no,
            detail,
        };
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 4 {
            return Err(perr(format!("expected at least 4 fields, got {}", f.len())));
        }
        let attrs = &f[4..];
        if attrs.len() != schema.len() {
            return Err(perr(format!(
                "row for {} has {} attribute values, schema has {}",
                f[0],
                attrs.len(),
                schema.len()
            )));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| perr(format!("bad {what} {s:?}")));
        let attributes = attrs.iter().map(|a| num(a, "attribute value")).collect::<Result<Vec<_>>>()?;
        schema.check_labels(&attributes).map_err(|e| perr(e.to_string()))?;
        out.push(Sample {
            filename: f[0].to_string(),
            split: f[1].parse().map_err(perr)?,
            identity: num(f[2], "identity")?,
            camera: num(f[3], "camera")?,
            attributes,
            image: Tensor::scalar(0.0),
        });
    }
    Ok(out)
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::Shape {
                    op: "stack_images",
                    detail: format!("{:?} vs {s:?}", img.shape()),
                })
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::Usage("no images to stack".into()))?);
    Tensor::new(&full, data)
}
