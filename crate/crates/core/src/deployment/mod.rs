//! Checkpoint container and BN folding into an integer-domain inference
//! path.

mod checkpoint;
mod container;
mod fold;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, hash_warning, load_checkpoint, model_from_container,
    model_to_container, save_checkpoint, Checkpoint, MODEL_KIND,
};
pub use container::{Container, Entry, MAGIC, VERSION};
pub use fold::{fold_bn, FoldedConv, FoldedHead, FoldedModel, FOLDED_KIND};

use std::path::Path;

use crate::{Error, Result};

/// Contents of a container file of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Model(Checkpoint),
    Folded(FoldedModel),
}

pub fn load_artifact(path: &Path) -> Result<Artifact> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let c = Container::decode(&bytes)?;
    match c.kind.as_str() {
        MODEL_KIND => Ok(Artifact::Model(Checkpoint {
            model: model_from_container(&c)?,
            config_hash: c.config_hash,
        })),
        FOLDED_KIND => Ok(Artifact::Folded(FoldedModel::from_container(&c)?)),
        other => Err(Error::Checkpoint(format!(
            "unknown container kind `{other}`"
        ))),
    }
}

/// Folds a loaded artifact. Folding an already-folded file is
/// rejected rather than applied twice.
pub fn fold_artifact(artifact: &Artifact) -> Result<FoldedModel> {
    match artifact {
        Artifact::Model(c) => fold_bn(&c.model),
        Artifact::Folded(_) => Err(Error::NotFoldable("model is already folded".into())),
    }
}
