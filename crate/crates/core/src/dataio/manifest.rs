use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layout::RawLayout;
use super::tensor::{self, ActivationMatrix};
use super::{ComponentId, DataError, Layout};

pub const FORMAT_VERSION: u32 = 1;

/// One labelled input sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub class_label: String,
    /// Detector output, higher means more spoof-like. Only used for EER.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_score: Option<f64>,
}

/// Location of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub sample: String,
    /// `BLOCK.ROLE`
    pub component: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    #[serde(default)]
    pub offset: u64,
    pub rows: u64,
    pub cols: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    format_version: u32,
    layout: RawLayout,
    samples: Vec<SampleRecord>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRef {
    pub path: PathBuf,
    pub offset: u64,
    pub rows: usize,
    pub cols: usize,
}

/// A validated dataset description. Immutable once loaded.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub format_version: u32,
    layout: Layout,
    samples: Vec<SampleRecord>,
    sample_index: HashMap<String, usize>,
    /// Keyed by (sample position, component position).
    tensors: BTreeMap<(usize, usize), TensorRef>,
}

impl DatasetManifest {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn sample(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.sample_index.get(sample_id).map(|&i| &self.samples[i])
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor_ref(&self, sample_id: &str, component: &ComponentId) -> Option<&TensorRef> {
        let s = *self.sample_index.get(sample_id)?;
        let c = self.layout.position(component)?;
        self.tensors.get(&(s, c))
    }

    /// Distinct class labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .samples
            .iter()
            .map(|s| s.class_label.as_str())
            .collect();
        set.into_iter().map(str::to_string).collect()
    }
}

fn schema(msg: impl Into<String>) -> DataError {
    DataError::SchemaViolation(msg.into())
}

/// Loads and fully validates a manifest, including every tensor header.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::io(path, e)
        }
    })?;
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    from_raw(raw, base)
}

/// Parses a manifest from JSON text; relative tensor paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest, DataError> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    from_raw(raw, base)
}

fn from_raw(raw: RawManifest, base: &Path) -> Result<DatasetManifest, DataError> {
    if raw.format_version != FORMAT_VERSION {
        return Err(schema(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            raw.format_version
        )));
    }
    let layout = Layout::new(raw.layout.blocks, raw.layout.components)?;

    let mut sample_index = HashMap::with_capacity(raw.samples.len());
    for (i, s) in raw.samples.iter().enumerate() {
        if s.sample_id.is_empty() {
            return Err(schema(format!("sample #{i} has empty sample_id")));
        }
        if s.class_label.is_empty() {
            return Err(schema(format!(
                "sample `{}` has empty class_label",
                s.sample_id
            )));
        }
        if let Some(score) = s.detector_score {
            if !score.is_finite() {
                return Err(schema(format!(
                    "sample `{}` has non-finite score",
                    s.sample_id
                )));
            }
        }
        if sample_index.insert(s.sample_id.clone(), i).is_some() {
            return Err(DataError::DuplicateSampleId(s.sample_id.clone()));
        }
    }

    let mut tensors = BTreeMap::new();
    let mut component_rows: Vec<Option<u64>> = vec![None; layout.len()];
    for t in &raw.tensors {
        let s = *sample_index
            .get(&t.sample)
            .ok_or_else(|| schema(format!("tensor references unknown sample `{}`", t.sample)))?;
        let id: ComponentId = t.component.parse()?;
        let c = layout
            .position(&id)
            .ok_or_else(|| schema(format!("tensor references unknown component `{id}`")))?;
        if t.rows == 0 || t.cols == 0 {
            return Err(schema(format!(
                "tensor {}/{id} declares a zero dimension",
                t.sample
            )));
        }
        match component_rows[c] {
            Some(r) if r != t.rows => {
                return Err(schema(format!(
                    "component {id} has inconsistent row counts ({r} vs {})",
                    t.rows
                )))
            }
            _ => component_rows[c] = Some(t.rows),
        }
        let full = base.join(&t.path);
        if !full.is_file() {
            return Err(DataError::DanglingTensorRef {
                sample: t.sample.clone(),
                component: id.to_string(),
                path: full,
            });
        }
        let header = tensor::read_header(&full, t.offset)?;
        if header.rows != t.rows || header.cols != t.cols {
            return Err(schema(format!(
                "tensor {}/{id}: header says {}x{}, manifest says {}x{}",
                t.sample, header.rows, header.cols, t.rows, t.cols
            )));
        }
        let r = TensorRef {
            path: full,
            offset: t.offset,
            rows: t.rows as usize,
            cols: t.cols as usize,
        };
        if tensors.insert((s, c), r).is_some() {
            return Err(schema(format!(
                "duplicate tensor entry for {}/{id}",
                t.sample
            )));
        }
    }
    for (s, sample) in raw.samples.iter().enumerate() {
        for (c, comp) in layout.components().iter().enumerate() {
            if !tensors.contains_key(&(s, c)) {
                return Err(schema(format!(
                    "no tensor for sample `{}` component {}",
                    sample.sample_id,
                    comp.id()
                )));
            }
        }
    }

    Ok(DatasetManifest {
        format_version: raw.format_version,
        layout,
        samples: raw.samples,
        sample_index,
        tensors,
    })
}

/// Reads the stored activations of one (sample, component) pair.
pub fn read_activation(
    manifest: &DatasetManifest,
    sample_id: &str,
    component: &ComponentId,
) -> Result<ActivationMatrix, DataError> {
    let r = manifest
        .tensor_ref(sample_id, component)
        .ok_or_else(|| DataError::NotFound {
            sample: sample_id.to_string(),
            component: component.to_string(),
        })?;
    let m = tensor::read_tensor(&r.path, r.offset, component.clone())?;
    if m.rows() != r.rows || m.cols() != r.cols {
        return Err(DataError::CorruptHeader(format!(
            "{}: dims changed since manifest load",
            r.path.display()
        )));
    }
    Ok(m)
}

/// Builds manifest JSON for tensors written by the caller. Paths are stored
/// as given.
pub fn manifest_json(layout: &Layout, samples: &[SampleRecord], tensors: &[TensorEntry]) -> String {
    let raw = RawManifest {
        format_version: FORMAT_VERSION,
        layout: RawLayout::from(layout.clone()),
        samples: samples.to_vec(),
        tensors: tensors.to_vec(),
    };
    serde_json::to_string_pretty(&raw).expect("manifest serialization is infallible")
}
