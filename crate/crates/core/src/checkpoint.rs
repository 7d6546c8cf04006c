//! Checkpoint directories: `manifest.json` (configs, frozen flags, tensor
//! table, history) and `params.bin` (little-endian `f32`, manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fine::{FineConfig, FineModel};
use crate::params::ParamSet;
use crate::pc_encoder::{PcEncoder, PcEncoderConfig};
use crate::text_encoder::{Component, SteConfig, TextEncoder, Vocab};
use crate::training::{PhaseHistory, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Everything a training phase produces.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub text: TextEncoder,
    pub pc: Option<PcEncoder>,
    pub fine: Option<FineModel>,
    /// Configuration of the most recent phase.
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<PhaseHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub component: String,
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextSection {
    pub config: SteConfig,
    pub vocab: Vocab,
    pub frozen: BTreeMap<Component, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineSection {
    pub config: FineConfig,
    pub input_widths: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<PhaseHistory>,
    pub text: TextSection,
    pub pc: Option<PcEncoderConfig>,
    pub fine: Option<FineSection>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    fn sets(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut out = vec![
            ("ste.backbone", &self.text.params.backbone),
            ("ste.prior", &self.text.params.prior),
            ("ste.align", &self.text.params.align),
        ];
        if let Some(pc) = &self.pc {
            out.push(("pc", &pc.params));
        }
        if let Some(f) = &self.fine {
            out.push(("fine", &f.params));
        }
        out
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let tensors = self
            .sets()
            .into_iter()
            .flat_map(|(component, ps)| {
                ps.shapes().into_iter().map(move |(name, r, c)| TensorEntry {
                    component: component.to_string(),
                    name,
                    shape: [r, c],
                })
            })
            .collect();
        CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            train_config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            text: TextSection {
                config: self.text.config.clone(),
                vocab: self.text.vocab.clone(),
                frozen: self.text.params.frozen.clone(),
            },
            pc: self.pc.as_ref().map(|p| p.config.clone()),
            fine: self.fine.as_ref().map(|f| FineSection {
                config: f.config.clone(),
                input_widths: f.input_widths,
            }),
            tensors,
        }
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.sets().into_iter().flat_map(|(_, ps)| ps.to_le_bytes()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_vec_pretty(&self.manifest()).expect("manifest serializes");
        json.push(b'\n');
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let ppath = dir.join(PARAMS_FILE);
        fs::write(&ppath, self.param_bytes()).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if m.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format_version {}",
                m.format_version
            )));
        }
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;

        let mut text_enc = TextEncoder::new(m.text.config.clone(), m.text.vocab.clone());
        text_enc.params.frozen = m.text.frozen.clone();
        let mut pc = m.pc.clone().map(PcEncoder::new);
        let mut fine = match &m.fine {
            Some(f) => {
                let (a, b, c) = f.input_widths;
                Some(FineModel::new(f.config.clone(), a, b, c)?)
            }
            None => None,
        };

        let mut floats = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{PARAMS_FILE} length {} is not a multiple of 4", bytes.len())));
        }
        let mut entries = m.tensors.iter();
        {
            let mut sets: Vec<(&str, &mut ParamSet)> = vec![
                ("ste.backbone", &mut text_enc.params.backbone),
                ("ste.prior", &mut text_enc.params.prior),
                ("ste.align", &mut text_enc.params.align),
            ];
            if let Some(p) = pc.as_mut() {
                sets.push(("pc", &mut p.params));
            }
            if let Some(f) = fine.as_mut() {
                sets.push(("fine", &mut f.params));
            }
            for (component, ps) in sets {
                let ids: Vec<_> = ps.ids().collect();
                for id in ids {
                    let entry = entries.next().ok_or_else(|| {
                        Error::Checkpoint(format!("manifest lists no tensor for {component}/{}", ps.name(id)))
                    })?;
                    let shape = ps.get(id).dim();
                    if entry.component != component || entry.name != ps.name(id) || entry.shape != [shape.0, shape.1] {
                        return Err(Error::Checkpoint(format!(
                            "expected {component}/{} {:?}, manifest has {}/{} {:?}",
                            ps.name(id),
                            [shape.0, shape.1],
                            entry.component,
                            entry.name,
                            entry.shape
                        )));
                    }
                    let m = ps.get_mut(id);
                    for v in m.iter_mut() {
                        *v = floats
                            .next()
                            .ok_or_else(|| Error::Checkpoint(format!("{PARAMS_FILE} is truncated")))?;
                    }
                }
            }
        }
        if entries.next().is_some() {
            return Err(Error::Checkpoint("manifest lists more tensors than the model has".into()));
        }
        if floats.next().is_some() {
            return Err(Error::Checkpoint(format!("{PARAMS_FILE} has trailing data")));
        }
        Ok(Self {
            text: text_enc,
            pc,
            fine,
            config: m.train_config,
            epoch: m.epoch,
            history: m.history,
        })
    }
}
