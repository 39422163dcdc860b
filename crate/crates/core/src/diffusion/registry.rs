//! Checkpoint registry and the Style Swap assembly rule.
//!
//! On disk every checkpoint is a directory `<root>/<id>/` holding
//! `descriptor.json` and an opaque `weights.bin`. Directories are written under
//! a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Registry key of the pretrained prior-domain denoiser.
pub const PRIOR_DENOISER: &str = "U_P";
/// Registry key of the source-domain fine-tuned denoiser.
pub const SOURCE_DENOISER: &str = "U_S";
/// Registry key of the control adapter trained against [`SOURCE_DENOISER`].
pub const SOURCE_CONTROL: &str = "control_S";

pub const DESCRIPTOR_FILE: &str = "descriptor.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    ControlAdapter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `pretrained`, `dreambooth_finetune`, `controlnet_train`, `bootstrap`, ...
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// Checkpoint this one was initialized from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Set when a protocol check was explicitly bypassed.
    #[serde(default)]
    pub forced_override: bool,
}

impl Provenance {
    pub fn stage(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            run_id: None,
            parent: None,
            forced_override: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub id: String,
    pub kind: ModelKind,
    pub backend: String,
    /// For adapters: the denoiser they were trained against.
    /// For fine-tuned denoisers: the denoiser they started from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_pairing: Option<String>,
    pub provenance: Provenance,
}

/// Which checkpoints an inference model was assembled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceModelDescriptor {
    pub backend: String,
    /// Runtime denoiser.
    pub base: String,
    pub control: String,
    /// Denoiser the adapter was trained against.
    pub control_trained_against: String,
    /// True when the runtime base differs from the adapter's training base.
    pub swapped: bool,
    pub forced_override: bool,
    /// Provenance chain, oldest first (e.g. `U_P → U_S → control_S`).
    pub lineage: Vec<String>,
}

#[derive(Debug, Clone)]
struct Entry {
    descriptor: CheckpointDescriptor,
    weights: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    root: Option<PathBuf>,
    entries: BTreeMap<String, Entry>,
}

fn valid_id(id: &str) -> Result<()> {
    if id.is_empty()
        || id.starts_with('.')
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
    {
        return Err(Error::Registry(format!("invalid checkpoint id `{id}`")));
    }
    Ok(())
}

impl ModelRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a registry rooted at `root` and loads every checkpoint.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
        let mut entries = BTreeMap::new();
        let mut dirs: Vec<_> = fs::read_dir(root)
            .map_err(|e| Error::file(root, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        dirs.sort();
        for dir in dirs {
            let desc_path = dir.join(DESCRIPTOR_FILE);
            if !desc_path.exists() {
                continue;
            }
            let text = fs::read(&desc_path).map_err(|e| Error::file(&desc_path, e))?;
            let descriptor: CheckpointDescriptor = serde_json::from_slice(&text)
                .map_err(|e| Error::Registry(format!("{}: {e}", desc_path.display())))?;
            let weights_path = dir.join(WEIGHTS_FILE);
            let weights = fs::read(&weights_path).map_err(|e| Error::file(&weights_path, e))?;
            entries.insert(descriptor.id.clone(), Entry { descriptor, weights });
        }
        Ok(Self {
            root: Some(root.to_path_buf()),
            entries,
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Adds or replaces a checkpoint; persisted before returning when disk-backed.
    pub fn register(&mut self, descriptor: CheckpointDescriptor, weights: Vec<u8>) -> Result<()> {
        valid_id(&descriptor.id)?;
        if let Some(root) = &self.root {
            let final_dir = root.join(&descriptor.id);
            let tmp_dir = root.join(format!(".{}.tmp{}", descriptor.id, std::process::id()));
            if tmp_dir.exists() {
                fs::remove_dir_all(&tmp_dir).map_err(|e| Error::file(&tmp_dir, e))?;
            }
            fs::create_dir_all(&tmp_dir).map_err(|e| Error::file(&tmp_dir, e))?;
            write_atomic(&tmp_dir.join(WEIGHTS_FILE), &weights)?;
            write_atomic(
                &tmp_dir.join(DESCRIPTOR_FILE),
                &serde_json::to_vec_pretty(&descriptor)?,
            )?;
            if final_dir.exists() {
                let old = root.join(format!(".{}.old{}", descriptor.id, std::process::id()));
                fs::rename(&final_dir, &old).map_err(|e| Error::file(&final_dir, e))?;
                fs::rename(&tmp_dir, &final_dir).map_err(|e| Error::file(&final_dir, e))?;
                fs::remove_dir_all(&old).map_err(|e| Error::file(&old, e))?;
            } else {
                fs::rename(&tmp_dir, &final_dir).map_err(|e| Error::file(&final_dir, e))?;
            }
        }
        self.entries
            .insert(descriptor.id.clone(), Entry { descriptor, weights });
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn descriptor(&self, id: &str) -> Result<&CheckpointDescriptor> {
        self.entries
            .get(id)
            .map(|e| &e.descriptor)
            .ok_or_else(|| Error::MissingCheckpoint(id.to_string()))
    }

    pub fn weights(&self, id: &str) -> Result<&[u8]> {
        self.entries
            .get(id)
            .map(|e| e.weights.as_slice())
            .ok_or_else(|| Error::MissingCheckpoint(id.to_string()))
    }

    fn expect_kind(&self, id: &str, kind: ModelKind) -> Result<&CheckpointDescriptor> {
        let d = self.descriptor(id)?;
        if d.kind != kind {
            return Err(Error::Registry(format!(
                "checkpoint `{id}` is a {:?}, expected {kind:?}",
                d.kind
            )));
        }
        Ok(d)
    }

    /// Walks `base_pairing` links from `id` back to a root checkpoint.
    pub fn lineage(&self, id: &str) -> Result<Vec<String>> {
        let mut chain = vec![id.to_string()];
        let mut current = self.descriptor(id)?;
        while let Some(parent) = &current.base_pairing {
            if chain.contains(parent) {
                return Err(Error::Registry(format!("cyclic base pairing at `{parent}`")));
            }
            chain.push(parent.clone());
            match self.entries.get(parent) {
                Some(e) => current = &e.descriptor,
                None => break,
            }
        }
        chain.reverse();
        Ok(chain)
    }
}

/// Pairs the prior denoiser `U_P` with the adapter `control_S`.
///
/// The adapter must have been trained against a denoiser other than `U_P`
/// (normally `U_S`) unless its provenance records a forced override.
pub fn assemble_swapped(registry: &ModelRegistry) -> Result<InferenceModelDescriptor> {
    let base = registry.expect_kind(PRIOR_DENOISER, ModelKind::Denoiser)?;
    let control = registry.expect_kind(SOURCE_CONTROL, ModelKind::ControlAdapter)?;
    let trained_against = control.base_pairing.clone().ok_or_else(|| {
        Error::Registry(format!("adapter `{SOURCE_CONTROL}` does not record its base pairing"))
    })?;
    let forced = control.provenance.forced_override;
    if trained_against == PRIOR_DENOISER && !forced {
        return Err(Error::Protocol(format!(
            "adapter `{SOURCE_CONTROL}` was trained against `{PRIOR_DENOISER}`; retrain it against `{SOURCE_DENOISER}`"
        )));
    }
    if base.backend != control.backend {
        return Err(Error::Registry(format!(
            "backend mismatch: `{PRIOR_DENOISER}` is {}, `{SOURCE_CONTROL}` is {}",
            base.backend, control.backend
        )));
    }
    Ok(InferenceModelDescriptor {
        backend: base.backend.clone(),
        base: PRIOR_DENOISER.to_string(),
        control: SOURCE_CONTROL.to_string(),
        swapped: trained_against != PRIOR_DENOISER,
        control_trained_against: trained_against,
        forced_override: forced,
        lineage: registry.lineage(SOURCE_CONTROL)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn denoiser(id: &str, base: Option<&str>) -> CheckpointDescriptor {
        CheckpointDescriptor {
            id: id.into(),
            kind: ModelKind::Denoiser,
            backend: "toy".into(),
            base_pairing: base.map(Into::into),
            provenance: Provenance::stage("pretrained"),
        }
    }

    fn control(base: &str, forced: bool) -> CheckpointDescriptor {
        CheckpointDescriptor {
            id: SOURCE_CONTROL.into(),
            kind: ModelKind::ControlAdapter,
            backend: "toy".into(),
            base_pairing: Some(base.into()),
            provenance: Provenance {
                forced_override: forced,
                ..Provenance::stage("controlnet_train")
            },
        }
    }

    fn full_registry() -> ModelRegistry {
        let mut r = ModelRegistry::in_memory();
        r.register(denoiser(PRIOR_DENOISER, None), vec![1]).unwrap();
        r.register(denoiser(SOURCE_DENOISER, Some(PRIOR_DENOISER)), vec![2]).unwrap();
        r.register(control(SOURCE_DENOISER, false), vec![3]).unwrap();
        r
    }

    #[test]
    fn swapped_model_uses_prior_base() {
        let d = assemble_swapped(&full_registry()).unwrap();
        assert_eq!(d.base, PRIOR_DENOISER);
        assert_ne!(d.base, SOURCE_DENOISER);
        assert_eq!(d.control, SOURCE_CONTROL);
        assert_eq!(d.control_trained_against, SOURCE_DENOISER);
        assert!(d.swapped && !d.forced_override);
        assert_eq!(d.lineage, vec!["U_P", "U_S", "control_S"]);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<InferenceModelDescriptor>(&json).unwrap(), d);
    }

    #[test]
    fn missing_checkpoints_are_named() {
        let mut r = ModelRegistry::in_memory();
        r.register(denoiser(PRIOR_DENOISER, None), vec![]).unwrap();
        match assemble_swapped(&r) {
            Err(Error::MissingCheckpoint(k)) => assert_eq!(k, SOURCE_CONTROL),
            other => panic!("{other:?}"),
        }
        let mut r = ModelRegistry::in_memory();
        r.register(control(SOURCE_DENOISER, false), vec![]).unwrap();
        match assemble_swapped(&r) {
            Err(Error::MissingCheckpoint(k)) => assert_eq!(k, PRIOR_DENOISER),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adapter_trained_on_prior_is_rejected_unless_forced() {
        let mut r = full_registry();
        r.register(control(PRIOR_DENOISER, false), vec![]).unwrap();
        assert!(matches!(assemble_swapped(&r), Err(Error::Protocol(_))));
        r.register(control(PRIOR_DENOISER, true), vec![]).unwrap();
        let d = assemble_swapped(&r).unwrap();
        assert!(d.forced_override && !d.swapped);
    }

    #[test]
    fn disk_registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut r = ModelRegistry::open(dir.path()).unwrap();
            r.register(denoiser(PRIOR_DENOISER, None), vec![9, 9]).unwrap();
            r.register(denoiser(SOURCE_DENOISER, Some(PRIOR_DENOISER)), vec![1]).unwrap();
            r.register(control(SOURCE_DENOISER, false), vec![7]).unwrap();
            // Replacing an existing checkpoint keeps one directory.
            r.register(control(SOURCE_DENOISER, false), vec![8]).unwrap();
        }
        let r = ModelRegistry::open(dir.path()).unwrap();
        assert_eq!(r.weights(SOURCE_CONTROL).unwrap(), &[8]);
        assert_eq!(r.ids().count(), 3);
        assert_eq!(
            assemble_swapped(&r).unwrap(),
            assemble_swapped(&full_registry()).unwrap()
        );
        let hidden = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with('.'))
            .count();
        assert_eq!(hidden, 0);
    }

    #[test]
    fn rejects_path_like_ids() {
        let mut r = ModelRegistry::in_memory();
        assert!(r.register(denoiser("../x", None), vec![]).is_err());
        assert!(r.register(denoiser("", None), vec![]).is_err());
    }
}
