use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::file::read_feature_file;
use super::{EmotionVector, FeatureSequence, Split, NUM_EMOTIONS};
use crate::error::{Error, Result};

/// One line of the JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub face_detected: bool,
    pub label: Option<EmotionVector>,
    /// modality id → feature file, relative to the manifest directory unless absolute.
    pub streams: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative stream paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Feature dim per modality, read from file headers.
    pub dims: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Builds a manifest, checking id uniqueness and label presence.
    /// `dims` is left empty; [`DatasetManifest::load`] fills it from file headers.
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample_id `{}`", e.sample_id)));
            }
            if e.split != Split::Test && e.label.is_none() {
                return Err(Error::Manifest(format!(
                    "{} sample `{}` has no label",
                    e.split.as_str(),
                    e.sample_id
                )));
            }
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
            dims: BTreeMap::new(),
        })
    }

    /// Parses a JSON-lines manifest and verifies every referenced file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut manifest = DatasetManifest::new(root, entries)?;
        manifest.dims = manifest.probe_dims()?;
        Ok(manifest)
    }

    fn probe_dims(&self) -> Result<BTreeMap<String, usize>> {
        let mut dims: BTreeMap<String, usize> = BTreeMap::new();
        for e in &self.entries {
            for (modality, rel) in &e.streams {
                let p = self.resolve(rel);
                let dim = header_dim(&p)?;
                match dims.get(modality) {
                    Some(&d) if d != dim => {
                        return Err(Error::Manifest(format!(
                            "{}: modality `{modality}` has dim {dim}, expected {d}",
                            p.display()
                        )))
                    }
                    _ => {
                        dims.insert(modality.clone(), dim);
                    }
                }
            }
        }
        Ok(dims)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("manifest entry serializes");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Drops training entries without a detected face; val/test entries are kept
/// untouched along with their fallback features.
pub fn filter_trainable(manifest: &DatasetManifest) -> DatasetManifest {
    DatasetManifest {
        root: manifest.root.clone(),
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.split != Split::Train || e.face_detected)
            .cloned()
            .collect(),
        dims: manifest.dims.clone(),
    }
}

fn header_dim(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head).map_err(|_| Error::Corruption {
        path: path.into(),
        msg: "truncated header".into(),
    })?;
    if &head[..4] != super::FEATURE_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            msg: "missing ERIF magic".into(),
        });
    }
    Ok(u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize)
}

/// A sample with its feature streams in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub sample_id: String,
    pub streams: BTreeMap<String, FeatureSequence>,
    pub label: Option<EmotionVector>,
    pub split: Split,
    pub face_detected: bool,
}

/// Fully loaded dataset, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<MultimodalSample>,
    pub dims: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let mut streams = BTreeMap::new();
            for (modality, rel) in &e.streams {
                let seq = read_feature_file(manifest.resolve(rel))?.with_modality_id(modality);
                streams.insert(modality.clone(), seq);
            }
            samples.push(MultimodalSample {
                sample_id: e.sample_id.clone(),
                streams,
                label: e.label,
                split: e.split,
                face_detected: e.face_detected,
            });
        }
        let mut ds = Dataset {
            samples,
            dims: BTreeMap::new(),
        };
        ds.dims = ds.infer_dims()?;
        Ok(ds)
    }

    pub fn from_samples(samples: Vec<MultimodalSample>) -> Result<Self> {
        let mut ds = Dataset {
            samples,
            dims: BTreeMap::new(),
        };
        ds.dims = ds.infer_dims()?;
        Ok(ds)
    }

    fn infer_dims(&self) -> Result<BTreeMap<String, usize>> {
        let mut dims: BTreeMap<String, usize> = BTreeMap::new();
        for s in &self.samples {
            for (m, seq) in &s.streams {
                if let Some(&d) = dims.get(m) {
                    if d != seq.dim() {
                        return Err(Error::Manifest(format!(
                            "sample `{}`: modality `{m}` has dim {}, expected {d}",
                            s.sample_id,
                            seq.dim()
                        )));
                    }
                } else {
                    dims.insert(m.clone(), seq.dim());
                }
            }
        }
        Ok(dims)
    }

    pub fn split(&self, split: Split) -> Vec<&MultimodalSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// In-memory counterpart of [`filter_trainable`].
    pub fn filter_trainable(&self) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| s.split != Split::Train || s.face_detected)
                .cloned()
                .collect(),
            dims: self.dims.clone(),
        }
    }
}

/// Writes `sample_id,e0..e6` rows for every labeled sample in `samples`.
pub fn write_labels_csv<'a>(
    samples: impl IntoIterator<Item = &'a MultimodalSample>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let header: Vec<String> = (0..NUM_EMOTIONS).map(|i| format!("e{i}")).collect();
    writeln!(out, "sample_id,{}", header.join(",")).unwrap();
    for s in samples {
        if let Some(l) = &s.label {
            let vals: Vec<String> = l.values().iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{},{}", s.sample_id, vals.join(",")).unwrap();
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split, face: bool) -> ManifestEntry {
        ManifestEntry {
            sample_id: id.into(),
            split,
            face_detected: face,
            label: (split != Split::Test).then(|| EmotionVector::new([0.5; 7]).unwrap()),
            streams: BTreeMap::new(),
        }
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest::new(
            "/tmp",
            vec![
                entry("t0", Split::Train, true),
                entry("t1", Split::Train, false),
                entry("v0", Split::Val, false),
                entry("v1", Split::Val, true),
                entry("x0", Split::Test, false),
            ],
        )
        .unwrap()
    }

    #[test]
    fn filter_drops_only_faceless_train() {
        let m = manifest();
        let f = filter_trainable(&m);
        let ids: Vec<_> = f.entries.iter().map(|e| e.sample_id.as_str()).collect();
        assert_eq!(ids, ["t0", "v0", "v1", "x0"]);
        assert_eq!(filter_trainable(&f), f);
    }

    #[test]
    fn filter_is_noop_when_all_faces_found() {
        let mut m = manifest();
        for e in &mut m.entries {
            e.face_detected = true;
        }
        assert_eq!(filter_trainable(&m), m);
    }

    #[test]
    fn duplicate_ids_and_missing_labels_rejected() {
        let dup = vec![entry("a", Split::Train, true), entry("a", Split::Val, true)];
        assert!(DatasetManifest::new("/", dup).is_err());
        let mut unl = entry("b", Split::Val, true);
        unl.label = None;
        assert!(DatasetManifest::new("/", vec![unl]).is_err());
    }

    #[test]
    fn manifest_line_shape() {
        let mut e = entry("s", Split::Test, true);
        e.streams.insert("visual".into(), "f/s.visual.erif".into());
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(
            line,
            r#"{"sample_id":"s","split":"test","face_detected":true,"label":null,"streams":{"visual":"f/s.visual.erif"}}"#
        );
    }

    #[test]
    fn load_reports_missing_file_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = entry("s", Split::Train, true);
        e.streams.insert("visual".into(), "nope.erif".into());
        let m = DatasetManifest::new(dir.path(), vec![e]).unwrap();
        let p = dir.path().join("manifest.jsonl");
        m.save(&p).unwrap();
        let err = DatasetManifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("nope.erif"), "{err}");
    }
}
