//! Label manifests and on-disk datasets.
//!
//! A manifest is UTF-8 text with one image per line:
//!
//! ```text
//! # classes=4
//! # seed=7
//! img_0000,images/img_0000.dst,1;3,masks/img_0000.dst
//! ```
//!
//! `#` lines carry the class count and corpus seed. Paths are relative to the
//! manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

use super::scene::{Scene, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: String,
    pub labels: BTreeSet<u16>,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = None;
        let mut seed = 0;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once('=') {
                    let v = v.trim();
                    match k.trim() {
                        "classes" => classes = Some(parse_num(v, n)?),
                        "seed" => seed = parse_num(v, n)?,
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(Error::Config(format!(
                    "manifest line {}: expected 3 or 4 fields, found {}",
                    n + 1,
                    fields.len()
                )));
            }
            let labels = fields[2]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| parse_num::<u16>(s, n))
                .collect::<Result<BTreeSet<_>>>()?;
            entries.push(ManifestEntry {
                image_id: fields[0].to_string(),
                image_path: fields[1].to_string(),
                labels,
                mask_path: fields.get(3).map(|s| s.to_string()),
            });
        }
        let manifest = Self {
            classes: classes.ok_or_else(|| Error::Config("manifest lacks '# classes=K'".into()))?,
            seed,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("class count {} < 2", self.classes)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.image_id.is_empty() || e.image_id.contains([',', '\n']) {
                return Err(Error::Config(format!("bad image id {:?}", e.image_id)));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::Config(format!("duplicate image id {}", e.image_id)));
            }
            if e.labels.is_empty() || e.labels.len() >= self.classes {
                return Err(Error::Config(format!(
                    "{}: label set size out of range",
                    e.image_id
                )));
            }
            if e.labels
                .iter()
                .any(|&c| c == BACKGROUND || c as usize >= self.classes)
            {
                return Err(Error::Config(format!(
                    "{}: label outside 1..{}",
                    e.image_id, self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = format!("# classes={}\n# seed={}\n", self.classes, self.seed);
        for e in &self.entries {
            let labels: Vec<String> = e.labels.iter().map(u16::to_string).collect();
            write!(out, "{},{},{}", e.image_id, e.image_path, labels.join(";")).unwrap();
            if let Some(m) = &e.mask_path {
                write!(out, ",{m}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.serialize())?;
        Ok(())
    }
}

fn parse_num<N: std::str::FromStr>(s: &str, line: usize) -> Result<N> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("manifest line {}: bad number {s:?}", line + 1)))
}

/// One training image held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f64>,
    pub labels: BTreeSet<u16>,
    pub mask: Option<Tensor<u16>>,
}

impl Sample {
    pub fn present_classes(&self) -> BTreeSet<u16> {
        let mut s = self.labels.clone();
        s.insert(BACKGROUND);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_scenes(scenes: Vec<Scene>, classes: usize, seed: u64) -> Self {
        let samples = scenes
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample {
                id: image_id(i),
                image: s.image,
                labels: s.labels,
                mask: Some(s.mask),
            })
            .collect();
        Self {
            classes,
            seed,
            samples,
        }
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let image = read_tensor(root.join(&e.image_path))?.into_f64()?;
                if image.rank() != 3 {
                    return Err(Error::shape("dataset image", image.dims(), &[0, 0, 3]));
                }
                let mask = match &e.mask_path {
                    Some(p) => Some(read_tensor(root.join(p))?.into_u16()?),
                    None => None,
                };
                Ok(Sample {
                    id: e.image_id.clone(),
                    image,
                    labels: e.labels.clone(),
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: manifest.classes,
            seed: manifest.seed,
            samples,
        })
    }

    /// Writes images, masks and `manifest.csv` under `dir`; returns the
    /// manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image_path = format!("images/{}.dst", s.id);
            write_tensor(dir.join(&image_path), &s.image)?;
            let mask_path = match &s.mask {
                Some(m) => {
                    let p = format!("masks/{}.dst", s.id);
                    write_tensor(dir.join(&p), m)?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                image_id: s.id.clone(),
                image_path,
                labels: s.labels.clone(),
                mask_path,
            });
        }
        let manifest = DatasetManifest {
            classes: self.classes,
            seed: self.seed,
            entries,
        };
        manifest.validate()?;
        let path = dir.join("manifest.csv");
        manifest.save(&path)?;
        Ok(path)
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_corpus, SynthConfig};
    use proptest::prelude::*;

    const SAMPLE: &str =
        "# classes=4\n# seed=9\na,images/a.dst,1;3,masks/a.dst\nb,images/b.dst,2\n";

    #[test]
    fn parses_entries_and_metadata() {
        let m = DatasetManifest::parse(SAMPLE).unwrap();
        assert_eq!(m.classes, 4);
        assert_eq!(m.seed, 9);
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].labels, BTreeSet::from([1, 3]));
        assert_eq!(m.entries[0].mask_path.as_deref(), Some("masks/a.dst"));
        assert_eq!(m.entries[1].mask_path, None);
        assert_eq!(m.serialize(), SAMPLE);
    }

    #[test]
    fn rejects_duplicates_and_bad_labels() {
        assert!(DatasetManifest::parse("# classes=4\na,x,1\na,y,2\n").is_err());
        assert!(DatasetManifest::parse("# classes=4\na,x,0\n").is_err());
        assert!(DatasetManifest::parse("# classes=4\na,x,4\n").is_err());
        assert!(DatasetManifest::parse("# classes=1\n").is_err());
        assert!(DatasetManifest::parse("a,x,1\n").is_err());
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let scenes = generate_corpus(&SynthConfig::default(), 3, 11).unwrap();
        let ds = Dataset::from_scenes(scenes, 4, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
    }

    fn entry() -> impl Strategy<Value = (String, BTreeSet<u16>, bool)> {
        (
            "[a-z][a-z0-9_]{0,8}",
            prop::collection::btree_set(1u16..6, 1..5),
            any::<bool>(),
        )
    }

    proptest! {
        #[test]
        fn parse_serialize_is_idempotent(items in prop::collection::vec(entry(), 0..6), seed in any::<u64>()) {
            let mut seen = HashSet::new();
            let entries: Vec<ManifestEntry> = items
                .into_iter()
                .filter(|(id, _, _)| seen.insert(id.clone()))
                .map(|(id, labels, with_mask)| ManifestEntry {
                    image_path: format!("images/{id}.dst"),
                    mask_path: with_mask.then(|| format!("masks/{id}.dst")),
                    image_id: id,
                    labels,
                })
                .collect();
            let m = DatasetManifest { classes: 6, seed, entries };
            let text = m.serialize();
            let parsed = DatasetManifest::parse(&text).unwrap();
            prop_assert_eq!(&parsed, &m);
            prop_assert_eq!(parsed.serialize(), text);
        }
    }
}
