//! Self-describing model checkpoints.

use std::path::Path;

use karn_core::baseline::{CellKind, RecurrentNet};
use karn_core::data::ScalerParams;
use karn_core::grad::ParameterSet;
use karn_core::head::HeadMode;
use karn_core::karn::{KarnLayerShape, KarnNetwork};
use karn_core::train::TrainConfig;
use karn_core::{KnotGrid, Model, ModelFamily, Recurrent};
use serde::{Deserialize, Serialize};

use crate::container::{self, Payload, PayloadWriter};
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub degree: usize,
    pub interior_count: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    pub knots: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarnLayerDescriptor {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub grid: GridDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockDescriptor {
    pub layer: usize,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Karn {
        layers: Vec<KarnLayerDescriptor>,
        locks: Vec<LockDescriptor>,
    },
    Recurrent {
        cell: String,
        /// `(input_dim, hidden_dim)` per layer.
        layers: Vec<(usize, usize)>,
    },
}

/// Manifest body of a checkpoint; tensors live in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub family: ModelFamily,
    pub head: HeadMode,
    pub input_dim: usize,
    pub window: usize,
    pub horizon: usize,
    pub architecture: Architecture,
    pub features: Vec<String>,
    pub target_feature: String,
    pub config_hash: String,
    pub config: Option<TrainConfig>,
    pub dataset_id: String,
}

/// Model plus everything needed to apply it to raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub scaler: ScalerParams,
    pub features: Vec<String>,
    pub target_feature: String,
    pub window: usize,
    pub config_hash: String,
    pub config: Option<TrainConfig>,
    pub dataset_id: String,
}

impl Checkpoint {
    pub fn target_index(&self) -> Result<usize> {
        self.features
            .iter()
            .position(|f| *f == self.target_feature)
            .ok_or_else(|| Error::Data(format!("target `{}` is not among the features", self.target_feature)))
    }

    fn manifest(&self) -> CheckpointManifest {
        let (head, architecture) = match &self.model {
            Model::Karn(net) => (
                net.head_mode(),
                Architecture::Karn {
                    layers: net
                        .layers()
                        .iter()
                        .map(|l| KarnLayerDescriptor {
                            input_dim: l.input_dim,
                            hidden_dim: l.hidden_dim,
                            grid: GridDescriptor {
                                degree: l.grid.degree(),
                                interior_count: l.grid.interior_count(),
                                range_lo: l.grid.range().0,
                                range_hi: l.grid.range().1,
                                knots: l.grid.knots().to_vec(),
                            },
                        })
                        .collect(),
                    locks: net
                        .locks()
                        .iter()
                        .map(|g| LockDescriptor {
                            layer: g.layer,
                            edges: g.edges.clone(),
                        })
                        .collect(),
                },
            ),
            Model::Baseline(net) => (
                net.head_mode(),
                Architecture::Recurrent {
                    cell: net.cell().to_string(),
                    layers: net.dims().to_vec(),
                },
            ),
        };
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            family: self.model.family(),
            head,
            input_dim: self.model.input_dim(),
            window: self.window,
            horizon: self.model.horizon(),
            architecture,
            features: self.features.clone(),
            target_feature: self.target_feature.clone(),
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            dataset_id: self.dataset_id.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = PayloadWriter::new();
        for t in self.model.params().tensors() {
            w.push_flagged(&t.name, &t.shape, &t.data, t.trainable);
        }
        let nf = self.scaler.feature_count();
        w.push_flagged("scaler.min", &[nf], &self.scaler.min, false);
        w.push_flagged("scaler.max", &[nf], &self.scaler.max, false);
        container::encode(CHECKPOINT_KIND, &self.manifest(), &w)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (m, payload): (CheckpointManifest, Payload) = container::decode(bytes, CHECKPOINT_KIND, origin)?;
        let bad = |msg: String| Error::format(origin, msg);
        if m.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        let mut params = ParameterSet::new();
        for e in payload.entries().iter().filter(|e| !e.name.starts_with("scaler.")) {
            let i = params.push(&e.name, &e.shape, payload.get(&e.name)?.to_vec())?;
            params.set_trainable(i, e.trainable);
        }
        let model = match (&m.architecture, m.family.cell()) {
            (Architecture::Karn { layers, locks }, None) => {
                let mut shapes = Vec::with_capacity(layers.len());
                for (l, d) in layers.iter().enumerate() {
                    let g = &d.grid;
                    let grid = KnotGrid::new(g.degree, g.interior_count, g.range_lo, g.range_hi)?;
                    let same = grid.knots().len() == g.knots.len()
                        && grid.knots().iter().zip(&g.knots).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Err(bad(format!("layer {l}: stored knots disagree with the grid descriptor")));
                    }
                    shapes.push(KarnLayerShape {
                        input_dim: d.input_dim,
                        hidden_dim: d.hidden_dim,
                        grid,
                    });
                }
                let locks = locks.iter().map(|g| (g.layer, g.edges.clone())).collect();
                Model::Karn(KarnNetwork::from_parts(shapes, m.horizon, m.head, params, locks)?)
            }
            (Architecture::Recurrent { cell, layers }, Some(expected)) => {
                let cell: CellKind = cell.parse()?;
                if cell != expected {
                    return Err(bad(format!("family {} does not match cell {cell}", m.family)));
                }
                Model::Baseline(RecurrentNet::from_parts(cell, layers.clone(), m.horizon, m.head, params)?)
            }
            _ => return Err(bad(format!("architecture does not match family {}", m.family))),
        };
        if model.input_dim() != m.input_dim || m.features.len() != m.input_dim {
            return Err(bad(format!(
                "input width {} disagrees with {} listed features",
                model.input_dim(),
                m.features.len()
            )));
        }
        let scaler = ScalerParams {
            min: payload.get("scaler.min")?.to_vec(),
            max: payload.get("scaler.max")?.to_vec(),
        };
        if scaler.feature_count() != m.input_dim || scaler.max.len() != m.input_dim {
            return Err(bad("scaler width disagrees with the feature list".into()));
        }
        let ckpt = Checkpoint {
            model,
            scaler,
            features: m.features,
            target_feature: m.target_feature,
            window: m.window,
            config_hash: m.config_hash,
            config: m.config,
            dataset_id: m.dataset_id,
        };
        ckpt.target_index().map_err(|e| bad(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Error listing both descriptors unless `features`, window and horizon agree.
    pub fn check_compatible(&self, features: &[String], window: usize, horizon: usize) -> Result<()> {
        if self.features != features || self.window != window || self.model.horizon() != horizon {
            return Err(Error::Data(format!(
                "checkpoint expects features [{}] with window {} and horizon {}; dataset has [{}] with window {window} and horizon {horizon}",
                self.features.join(", "),
                self.window,
                self.model.horizon(),
                features.join(", ")
            )));
        }
        Ok(())
    }
}
