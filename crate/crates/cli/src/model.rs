//! Checkpoint round trip: building networks from an experiment config and
//! reconstructing them from a saved checkpoint.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use srfuse_autograd::nn::ParamStore;
use srfuse_core::consistency::{ColorMatchNet, ConsistencyConfig};
use srfuse_core::io::load_checkpoint;
use srfuse_core::metrics::ReconLoss;
use srfuse_core::misr::{HighResNet, HighResNetConfig, RevisitPad};
use srfuse_core::registration::{ShiftNet, ShiftNetConfig};
use srfuse_core::sisr::{SrResNet, SrResNetConfig};
use srfuse_core::train::{
    ConsistencyObjective, MisrObjective, ModelKind, SisrObjective, SrObjective,
};
use srfuse_core::{Error, Result};

use crate::config::ExperimentConfig;

/// Everything a checkpoint needs to be reconstructed and audited: the
/// experiment config plus the dataset-derived facts that fixed the network
/// shapes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub experiment: ExperimentConfig,
    pub bands: usize,
    pub sr_factor: usize,
    pub dataset_hash: String,
}

/// The networks of one trained (or freshly initialized) model.
pub enum ModelNets {
    Sisr(SrResNet),
    Misr { net: HighResNet, shift: ShiftNet },
    MisrConsistency { net: HighResNet, shift: ShiftNet, color_match: ColorMatchNet },
}

impl ModelNets {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelNets::Sisr(_) => ModelKind::Sisr,
            ModelNets::Misr { .. } => ModelKind::Misr,
            ModelNets::MisrConsistency { .. } => ModelKind::MisrConsistency,
        }
    }

    /// Wrap the networks in their training objective.
    pub fn objective(self, cfg: &ExperimentConfig) -> Result<Box<dyn SrObjective>> {
        let recon = recon_loss(&cfg.recon_loss)?;
        Ok(match self {
            ModelNets::Sisr(net) => Box::new(SisrObjective { net, recon }),
            ModelNets::Misr { net, shift } => {
                Box::new(MisrObjective { net, shiftnet: shift, recon })
            }
            ModelNets::MisrConsistency { net, shift, color_match } => {
                let weights = ConsistencyConfig {
                    w_consistency: cfg.w_consistency,
                    w_sr: cfg.w_sr,
                    cm_hidden: cfg.cm_hidden,
                };
                weights.validate()?;
                Box::new(ConsistencyObjective {
                    net,
                    color_match,
                    shiftnet: shift,
                    weights,
                })
            }
        })
    }
}

fn recon_loss(name: &str) -> Result<ReconLoss> {
    match name {
        "mse" => Ok(ReconLoss::Mse),
        "mae" => Ok(ReconLoss::Mae),
        "ssim" => Ok(ReconLoss::Ssim),
        other => Err(Error::invalid(format!("unknown recon_loss {other:?}"))),
    }
}

/// Initialize the networks of an experiment into `store`, deterministically
/// from the experiment seed.
pub fn init_nets(
    store: &mut ParamStore,
    cfg: &ExperimentConfig,
    bands: usize,
    sr_factor: usize,
) -> Result<ModelNets> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let kind = cfg.model_kind()?;
    match kind {
        ModelKind::Sisr => {
            let net_cfg = SrResNetConfig {
                in_bands: bands,
                hidden: cfg.width,
                residual_blocks: cfg.residual_blocks,
                sr_factor,
            };
            Ok(ModelNets::Sisr(SrResNet::init(store, &mut rng, "sisr", net_cfg)?))
        }
        ModelKind::Misr | ModelKind::MisrConsistency => {
            let net_cfg = HighResNetConfig {
                in_bands: bands,
                hidden: cfg.width,
                enc_residual_blocks: cfg.residual_blocks,
                sr_factor,
                fractional_upsample: None,
                revisit_pad: RevisitPad::RepeatLast,
            };
            let net = HighResNet::init(store, &mut rng, "misr", &net_cfg)?;
            let shift_cfg = ShiftNetConfig::reduced(bands, cfg.shift_width);
            let shift = ShiftNet::init(store, &mut rng, "shift", &shift_cfg);
            if kind == ModelKind::Misr {
                Ok(ModelNets::Misr { net, shift })
            } else {
                let color_match =
                    ColorMatchNet::init(store, &mut rng, "cm", bands, cfg.cm_hidden)?;
                Ok(ModelNets::MisrConsistency { net, shift, color_match })
            }
        }
    }
}

/// A checkpoint loaded back into memory with its networks rebuilt.
pub struct LoadedModel {
    pub store: ParamStore,
    pub nets: ModelNets,
    pub config: CheckpointConfig,
    pub seed: u64,
}

/// Load a checkpoint and rebuild its networks.  The parameter names the
/// config implies must exactly match the stored arrays.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = load_checkpoint(path)?;
    let config: CheckpointConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::schema(format!("{}: config: {e}", path.display())))?;
    let mut scratch = ParamStore::new();
    let nets = init_nets(&mut scratch, &config.experiment, config.bands, config.sr_factor)?;
    let expected: BTreeSet<String> = scratch.names().map(str::to_string).collect();
    let stored: BTreeSet<String> = ck.store.names().map(str::to_string).collect();
    if expected != stored {
        let missing: Vec<&String> = expected.difference(&stored).take(3).collect();
        let extra: Vec<&String> = stored.difference(&expected).take(3).collect();
        return Err(Error::schema(format!(
            "{}: checkpoint does not match its config (missing {missing:?}, unexpected {extra:?})",
            path.display()
        )));
    }
    for name in &expected {
        let want = scratch.get(name).shape();
        let got = ck.store.get(name).shape();
        if want != got {
            return Err(Error::schema(format!(
                "{}: array {name} has shape {got:?}, config implies {want:?}",
                path.display()
            )));
        }
    }
    Ok(LoadedModel { store: ck.store, nets, config, seed: ck.seed })
}
