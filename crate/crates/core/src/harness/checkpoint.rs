//! Parameter files: every parameter and buffer of a model, packed as
//! little-endian `f32` in visiting order, plus a JSON layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{f32_to_le_bytes, le_bytes_to_f32, read_json, write_bytes, write_json};
use crate::model::{Extractor, ModelConfig};
use crate::nn::{Layer, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayout {
    pub format: String,
    pub model: ModelConfig,
    pub epoch: usize,
    pub n_values: usize,
    pub entries: Vec<LayoutEntry>,
}

/// The layout file sits next to the data file as `<path>.json`.
pub fn layout_path(path: &Path) -> std::path::PathBuf {
    crate::io::sidecar_path(path)
}

pub fn model_layout<T: Scalar>(model: &mut Extractor<T>) -> Vec<LayoutEntry> {
    let mut entries = Vec::new();
    let mut offset = 0;
    model.visit_params("", &mut |name, p| {
        entries.push(LayoutEntry { name: name.to_string(), shape: p.shape().to_vec(), offset });
        offset += p.value.len();
    });
    entries
}

pub fn save_checkpoint<T: Scalar>(model: &mut Extractor<T>, epoch: usize, path: &Path) -> Result<()> {
    let entries = model_layout(model);
    let mut values: Vec<f32> = Vec::new();
    model.visit_params("", &mut |_, p| {
        values.extend(p.value.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
    });
    let layout = CheckpointLayout {
        format: "f32le".into(),
        model: model.config,
        epoch,
        n_values: values.len(),
        entries,
    };
    write_bytes(path, &f32_to_le_bytes(&values))?;
    write_json(&layout_path(path), &layout)
}

fn describe(entries: &[LayoutEntry]) -> Vec<String> {
    entries.iter().map(|e| format!("{} {:?}", e.name, e.shape)).collect()
}

/// Load parameters into `model`, which must have exactly the stored layout.
pub fn load_checkpoint<T: Scalar>(model: &mut Extractor<T>, path: &Path) -> Result<CheckpointLayout> {
    let layout: CheckpointLayout = read_json(&layout_path(path))?;
    let expected = model_layout(model);
    let strip = |v: &[LayoutEntry]| v.iter().map(|e| (e.name.clone(), e.shape.clone())).collect::<Vec<_>>();
    if strip(&expected) != strip(&layout.entries) {
        let exp = describe(&expected);
        let found = describe(&layout.entries);
        let first = exp
            .iter()
            .zip(&found)
            .position(|(a, b)| a != b)
            .unwrap_or(exp.len().min(found.len()));
        return Err(Error::Layout(format!(
            "checkpoint {} does not match the configured model ({} vs {} entries); first difference at #{first}: expected `{}`, found `{}`\nexpected:\n  {}\nfound:\n  {}",
            path.display(),
            exp.len(),
            found.len(),
            exp.get(first).map(String::as_str).unwrap_or("<none>"),
            found.get(first).map(String::as_str).unwrap_or("<none>"),
            exp.join("\n  "),
            found.join("\n  "),
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = le_bytes_to_f32(&bytes, path)?;
    if values.len() != layout.n_values {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} values, layout says {}", values.len(), layout.n_values),
        });
    }
    let mut cursor = 0;
    model.visit_params("", &mut |_, p| {
        let n = p.value.len();
        for (dst, &src) in p.value.iter_mut().zip(&values[cursor..cursor + n]) {
            *dst = T::lit(src as f64);
        }
        cursor += n;
    });
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;
    use crate::nn::{FeatureMap, Mode};

    fn cfg(family: Family) -> ModelConfig {
        ModelConfig { channels: 8, family, n_groups: 4, n_scales: 2 }
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.f32");
        let mut a = Extractor::<f32>::new(cfg(Family::Gabor), 1).unwrap();
        let x = FeatureMap::from_shape_fn((1, 3, 32, 32), |(_, c, i, j)| ((c + i * 3 + j * 7) % 11) as f32 / 11.0);
        a.forward(&x, Mode::Train).unwrap();
        save_checkpoint(&mut a, 3, &path).unwrap();
        let mut b = Extractor::<f32>::new(cfg(Family::Gabor), 2).unwrap();
        let layout = load_checkpoint(&mut b, &path).unwrap();
        assert_eq!(layout.epoch, 3);
        assert_eq!(a.forward(&x, Mode::Eval).unwrap(), b.forward(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn layout_mismatch_lists_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.f32");
        save_checkpoint(&mut Extractor::<f32>::new(cfg(Family::Gabor), 1).unwrap(), 0, &path).unwrap();
        let mut other = Extractor::<f32>::new(cfg(Family::None), 1).unwrap();
        let err = load_checkpoint(&mut other, &path).unwrap_err().to_string();
        assert!(err.contains("expected") && err.contains("found") && err.contains("d2fm.fpu.pwc.weight"), "{err}");
    }
}
