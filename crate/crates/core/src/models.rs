//! Bundled model files and lookup of user-supplied replacements.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::collision::CollisionGeometry;
use crate::error::{Error, Result};
use crate::human_model::{BodySkeletonModel, HandSkeletonModel};
use crate::kinematics::{load_chain, KinematicChain};

/// Environment variable naming a directory whose files replace the bundled ones.
pub const MODELS_DIR_ENV: &str = "TELEKINESIS_MODELS_DIR";

pub const HAND_CHAIN_FILE: &str = "hand16.chain";
pub const ARM_CHAIN_FILE: &str = "arm6.chain";
pub const HAND_COLLISION_FILE: &str = "hand16.collision";
pub const HUMAN_HAND_FILE: &str = "human_hand.skel";
pub const HUMAN_BODY_FILE: &str = "human_body.skel";

const BUNDLED: &[(&str, &str)] = &[
    (HAND_CHAIN_FILE, include_str!("../models/hand16.chain")),
    (ARM_CHAIN_FILE, include_str!("../models/arm6.chain")),
    (HAND_COLLISION_FILE, include_str!("../models/hand16.collision")),
    (HUMAN_HAND_FILE, include_str!("../models/human_hand.skel")),
    (HUMAN_BODY_FILE, include_str!("../models/human_body.skel")),
];

/// Resolves model documents either from a directory or from the copies
/// compiled into the library.
#[derive(Clone, Debug, Default)]
pub struct ModelStore {
    dir: Option<PathBuf>,
}

impl ModelStore {
    pub fn bundled() -> Self {
        ModelStore { dir: None }
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        ModelStore {
            dir: Some(dir.into()),
        }
    }

    /// Honors `TELEKINESIS_MODELS_DIR` when set.
    pub fn from_env() -> Self {
        match std::env::var_os(MODELS_DIR_ENV) {
            Some(dir) if !dir.is_empty() => ModelStore::from_dir(dir),
            _ => ModelStore::bundled(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn read(&self, file: &str) -> Result<(String, String)> {
        match &self.dir {
            Some(dir) => {
                let path = dir.join(file);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Ok((path.display().to_string(), text))
            }
            None => BUNDLED
                .iter()
                .find(|(name, _)| *name == file)
                .map(|(name, text)| (format!("bundled:{name}"), text.to_string()))
                .ok_or_else(|| Error::InvalidInput(format!("no bundled model named {file}"))),
        }
    }

    /// Hex SHA-256 of every model file, keyed by file name.
    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        BUNDLED
            .iter()
            .map(|(name, _)| {
                let (_, text) = self.read(name)?;
                Ok((name.to_string(), hex::encode(Sha256::digest(text.as_bytes()))))
            })
            .collect()
    }

    pub fn hand_chain(&self) -> Result<KinematicChain> {
        let (src, text) = self.read(HAND_CHAIN_FILE)?;
        load_chain(&src, &text)
    }

    pub fn arm_chain(&self) -> Result<KinematicChain> {
        let (src, text) = self.read(ARM_CHAIN_FILE)?;
        load_chain(&src, &text)
    }

    pub fn hand_collision(&self, chain: &KinematicChain) -> Result<CollisionGeometry> {
        let (src, text) = self.read(HAND_COLLISION_FILE)?;
        CollisionGeometry::load(&src, &text, chain)
    }

    pub fn human_hand(&self) -> Result<HandSkeletonModel> {
        let (src, text) = self.read(HUMAN_HAND_FILE)?;
        HandSkeletonModel::load(&src, &text)
    }

    pub fn human_body(&self) -> Result<BodySkeletonModel> {
        let (src, text) = self.read(HUMAN_BODY_FILE)?;
        BodySkeletonModel::load(&src, &text)
    }
}

/// The bundled robot hand. Panics only if the bundled file is broken.
pub fn hand_chain() -> KinematicChain {
    ModelStore::bundled().hand_chain().expect("bundled hand chain")
}

pub fn arm_chain() -> KinematicChain {
    ModelStore::bundled().arm_chain().expect("bundled arm chain")
}

pub fn hand_collision() -> CollisionGeometry {
    ModelStore::bundled()
        .hand_collision(&hand_chain())
        .expect("bundled collision geometry")
}

pub fn human_hand() -> HandSkeletonModel {
    ModelStore::bundled().human_hand().expect("bundled hand skeleton")
}

pub fn human_body() -> BodySkeletonModel {
    ModelStore::bundled().human_body().expect("bundled body skeleton")
}
