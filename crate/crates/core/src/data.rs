//! On-disk datasets: a template OBJ, region masks, and per-sequence OTTK
//! feature and target tensors listed in `dataset.json`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{self, MaskLabel, TriangleMesh, VertexMask};
use crate::model::SequenceSample;
use crate::ottk;
use crate::train::{synth_dataset, SynthConfig, SynthDataset};

pub const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub name: String,
    pub features: String,
    pub targets: String,
    pub frames: usize,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFiles {
    pub lip: String,
    pub face: String,
    pub head: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub template: String,
    pub n_vertices: usize,
    pub masks: MaskFiles,
    pub samples: Vec<SampleEntry>,
    /// Generator settings when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

/// A dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: Arc<TriangleMesh>,
    pub lip: VertexMask,
    pub face: VertexMask,
    pub head: VertexMask,
    pub samples: Vec<SequenceSample>,
    pub synth: Option<SynthConfig>,
}

impl From<SynthDataset> for Dataset {
    fn from(d: SynthDataset) -> Self {
        Self {
            samples: d.samples(),
            template: d.template,
            lip: d.lip,
            face: d.face,
            head: d.head,
            synth: Some(d.config),
        }
    }
}

/// Where a dataset comes from: a generator spec or a directory.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    Dir(PathBuf),
}

impl DataSource {
    /// `synth:seed=1,n=8,frames=16[,fps=30,subdiv=3]` or a directory path.
    pub fn parse(spec: &str) -> Result<Self> {
        let Some(rest) = spec.strip_prefix("synth:") else {
            return Ok(DataSource::Dir(PathBuf::from(spec)));
        };
        let mut cfg = SynthConfig::new(0, 8, 16);
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value in data spec, got `{part}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::invalid(format!("data spec {key}: {e}"));
            match key {
                "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
                "n" => cfg.sequences = value.parse().map_err(|e| bad(&e))?,
                "frames" => cfg.frames = value.parse().map_err(|e| bad(&e))?,
                "fps" => cfg.fps = value.parse().map_err(|e| bad(&e))?,
                "subdiv" => cfg.subdivisions = value.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::invalid(format!("unknown data spec key `{key}`"))),
            }
        }
        Ok(DataSource::Synth(cfg))
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synth(cfg) => Ok(synth_dataset(cfg)?.into()),
            DataSource::Dir(dir) => load_dataset(dir),
        }
    }
}

/// Writes `data` under `dir` and returns the manifest.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    mesh::save_obj(&data.template, dir.join("template.obj"))?;
    for m in [&data.lip, &data.face, &data.head] {
        m.save(dir.join(format!("{}.txt", m.label.as_str())))?;
    }
    let mut samples = Vec::with_capacity(data.samples.len());
    for (i, s) in data.samples.iter().enumerate() {
        let name = format!("seq{i:03}");
        let features = format!("{name}.features.ottk");
        let targets = format!("{name}.targets.ottk");
        ottk::write(dir.join(&features), &s.features)?;
        ottk::write(dir.join(&targets), &s.targets)?;
        samples.push(SampleEntry { name, features, targets, frames: s.frames(), fps: s.fps });
    }
    let manifest = DatasetManifest {
        template: "template.obj".into(),
        n_vertices: data.template.n_vertices(),
        masks: MaskFiles { lip: "lip.txt".into(), face: "face.txt".into(), head: "head.txt".into() },
        samples,
        synth: data.synth.clone(),
    };
    std::fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(DATASET_MANIFEST))?)?;
    let template = Arc::new(mesh::load_obj(dir.join(&manifest.template))?);
    let n = template.n_vertices();
    if n != manifest.n_vertices {
        return Err(Error::Topology { expected: manifest.n_vertices, got: n });
    }
    let mask = |file: &str, label: MaskLabel| -> Result<VertexMask> {
        let m = VertexMask::load(dir.join(file), n)?;
        if m.label != label {
            return Err(Error::invalid(format!("{file} holds a {} mask", m.label.as_str())));
        }
        Ok(m)
    };
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let s = SequenceSample::new(
                template.clone(),
                ottk::read(dir.join(&e.features))?,
                ottk::read(dir.join(&e.targets))?,
                e.fps,
            )?;
            if s.frames() != e.frames {
                return Err(Error::invalid(format!("{}: manifest lists {} frames, file has {}", e.name, e.frames, s.frames())));
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        lip: mask(&manifest.masks.lip, MaskLabel::Lip)?,
        face: mask(&manifest.masks.face, MaskLabel::Face)?,
        head: mask(&manifest.masks.head, MaskLabel::Head)?,
        template,
        samples,
        synth: manifest.synth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        match DataSource::parse("synth:seed=1,n=8,frames=16").unwrap() {
            DataSource::Synth(c) => assert_eq!((c.seed, c.sequences, c.frames), (1, 8, 16)),
            other => panic!("{other:?}"),
        }
        assert_eq!(DataSource::parse("runs/data").unwrap(), DataSource::Dir("runs/data".into()));
        assert!(DataSource::parse("synth:bogus=1").is_err());
        assert!(DataSource::parse("synth:n=x").is_err());
    }

    #[test]
    fn roundtrip() {
        let mut cfg = SynthConfig::new(2, 2, 3);
        cfg.subdivisions = 1;
        let data: Dataset = synth_dataset(&cfg).unwrap().into();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 2);
        assert_eq!(back.samples[1].targets, data.samples[1].targets);
        assert_eq!(back.lip, data.lip);
        assert_eq!(back.synth, Some(cfg));
    }
}
