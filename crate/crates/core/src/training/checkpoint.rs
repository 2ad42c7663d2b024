//! Checkpoint directories: tensors in safetensors files plus a JSON manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::{Direction, Progress, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::networks::{GeneratorParams, NamedParam, ParamGroup};
use crate::tensor::Tensor;
use crate::CODE_HASH;

pub const MANIFEST_FILE: &str = "manifest.json";
const MODEL_FILE: &str = "model.safetensors";
const OPTIMIZER_FILE: &str = "optimizer.safetensors";
const REPLAY_FILE: &str = "replay.safetensors";
pub const LAST_DIR: &str = "ckpt_last";
pub const BEST_DIR: &str = "ckpt_best";
const FORMAT_VERSION: u32 = 1;

const NETWORKS: [&str; 4] = ["g_ab", "g_ba", "d_a", "d_b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub name: String,
    pub theta_count: usize,
    pub theta_t_count: usize,
    pub params: Vec<ParamManifest>,
}

impl NetworkManifest {
    fn of(name: &str, params: &[NamedParam]) -> Self {
        let count = |g| params.iter().filter(|p| p.group == g).map(|p| p.value.numel()).sum();
        Self {
            name: name.into(),
            theta_count: count(ParamGroup::Theta),
            theta_t_count: count(ParamGroup::ThetaT),
            params: params
                .iter()
                .map(|p| ParamManifest {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    group: p.group,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Content hash of the library sources that wrote the checkpoint.
    pub code_hash: String,
    pub data_seed: u64,
    pub config: TrainConfig,
    pub progress: Progress,
    pub networks: Vec<NetworkManifest>,
    pub adam_steps: BTreeMap<String, u64>,
    pub replay_lengths: BTreeMap<String, usize>,
    pub rng: ChaCha8Rng,
}

impl CheckpointManifest {
    pub fn network(&self, name: &str) -> Option<&NetworkManifest> {
        self.networks.iter().find(|n| n.name == name)
    }

    /// Refuse to resume under a different configuration or dataset.
    pub fn check_compatible(&self, config: &TrainConfig, data_seed: u64) -> Result<()> {
        if data_seed != self.data_seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on data seed {}, dataset has seed {data_seed}",
                self.data_seed
            )));
        }
        let ours = serde_json::to_value(&self.config)?;
        let theirs = serde_json::to_value(config)?;
        if let (Some(a), Some(b)) = (ours.as_object(), theirs.as_object()) {
            let differing: Vec<&str> = a
                .iter()
                .filter(|(k, v)| b.get(*k) != Some(*v))
                .map(|(k, _)| k.as_str())
                .collect();
            if !differing.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "configuration differs from the checkpoint in: {}",
                    differing.join(", ")
                )));
            }
        }
        if self.code_hash != CODE_HASH {
            log::warn!("resuming a checkpoint written by code version {}", self.code_hash);
        }
        Ok(())
    }
}

fn write_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, t), b)| {
            safetensors::tensor::TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, &None, path).map_err(|e| Error::format(path, e.to_string()))
}

fn read_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::format(path, e.to_string()))?;
    st.tensors()
        .into_iter()
        .map(|(name, view)| {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(
                    path,
                    format!("{name}: expected f32, got {:?}", view.dtype()),
                ));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok((name, Tensor::from_vec(view.shape(), data)?))
        })
        .collect()
}

fn take(map: &mut HashMap<String, Tensor>, key: &str, shape: &[usize], path: &Path) -> Result<Tensor> {
    let t = map
        .remove(key)
        .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?;
    if t.shape() != shape {
        return Err(Error::format(
            path,
            format!("{key}: shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(t)
}

impl TrainState {
    fn networks(&self) -> [(&str, &[NamedParam]); 4] {
        [
            ("g_ab", &self.g_ab.params),
            ("g_ba", &self.g_ba.params),
            ("d_a", &self.d_a.params),
            ("d_b", &self.d_b.params),
        ]
    }

    fn networks_mut(&mut self) -> [(&mut Vec<NamedParam>, &mut super::Adam); 4] {
        [
            (&mut self.g_ab.params, &mut self.opt_g_ab),
            (&mut self.g_ba.params, &mut self.opt_g_ba),
            (&mut self.d_a.params, &mut self.opt_d_a),
            (&mut self.d_b.params, &mut self.opt_d_b),
        ]
    }

    fn optimizers(&self) -> [&super::Adam; 4] {
        [&self.opt_g_ab, &self.opt_g_ba, &self.opt_d_a, &self.opt_d_b]
    }
}

/// Write the complete training state into `dir` (replacing earlier contents).
pub fn save_checkpoint(state: &TrainState, data_seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model = Vec::new();
    let mut optim = Vec::new();
    for ((net, params), opt) in state.networks().into_iter().zip(state.optimizers()) {
        for (i, p) in params.iter().enumerate() {
            model.push((format!("{net}.{}", p.name), &p.value));
            optim.push((format!("{net}.m.{}", p.name), &opt.m[i]));
            optim.push((format!("{net}.v.{}", p.name), &opt.v[i]));
        }
    }
    let mut replay = Vec::new();
    for (pool, buf) in [("pool_a", &state.pool_a), ("pool_b", &state.pool_b)] {
        for (i, t) in buf.images.iter().enumerate() {
            replay.push((format!("{pool}.{i:04}"), t));
        }
    }
    write_tensors(&dir.join(MODEL_FILE), &model)?;
    write_tensors(&dir.join(OPTIMIZER_FILE), &optim)?;
    write_tensors(&dir.join(REPLAY_FILE), &replay)?;

    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        code_hash: CODE_HASH.into(),
        data_seed,
        config: state.config.clone(),
        progress: state.progress.clone(),
        networks: state
            .networks()
            .iter()
            .map(|(n, p)| NetworkManifest::of(n, p))
            .collect(),
        adam_steps: NETWORKS
            .iter()
            .zip(state.optimizers())
            .map(|(n, o)| (n.to_string(), o.step))
            .collect(),
        replay_lengths: [("pool_a", state.pool_a.len()), ("pool_b", state.pool_b.len())]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        rng: state.rng.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn generator(&self, direction: Direction) -> Result<&GeneratorParams> {
        let name = match direction {
            Direction::AToB => "g_ab",
            Direction::BToA => "g_ba",
        };
        if self.manifest.network(name).is_none() {
            return Err(Error::Checkpoint(format!("checkpoint has no {direction} generator")));
        }
        Ok(self.state.generator(direction))
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let mut state = TrainState::new(&manifest.config)?;
    for (name, net) in NETWORKS.iter().zip(state.networks()) {
        let expected = NetworkManifest::of(name, net.1);
        if manifest.network(name) != Some(&expected) {
            return Err(Error::Checkpoint(format!(
                "{}: network {name} does not match its configuration",
                path.display()
            )));
        }
    }

    let model_path = dir.join(MODEL_FILE);
    let optim_path = dir.join(OPTIMIZER_FILE);
    let mut model = read_tensors(&model_path)?;
    let mut optim = read_tensors(&optim_path)?;
    for (net, (params, opt)) in NETWORKS.iter().zip(state.networks_mut()) {
        for (i, p) in params.iter_mut().enumerate() {
            let shape = p.value.shape().to_vec();
            p.value = take(&mut model, &format!("{net}.{}", p.name), &shape, &model_path)?;
            opt.m[i] = take(&mut optim, &format!("{net}.m.{}", p.name), &shape, &optim_path)?;
            opt.v[i] = take(&mut optim, &format!("{net}.v.{}", p.name), &shape, &optim_path)?;
        }
        opt.step = manifest.adam_steps.get(*net).copied().unwrap_or(0);
    }
    let replay_path = dir.join(REPLAY_FILE);
    let mut replay = read_tensors(&replay_path)?;
    let c = manifest.config.generator.image_channels;
    for (pool, buf) in [("pool_a", &mut state.pool_a), ("pool_b", &mut state.pool_b)] {
        let n = manifest.replay_lengths.get(pool).copied().unwrap_or(0);
        buf.images = (0..n)
            .map(|i| {
                let key = format!("{pool}.{i:04}");
                let shape = replay.get(&key).map(|t| t.shape().to_vec()).unwrap_or_default();
                if shape.len() != 4 || shape[0] != 1 || shape[1] != c {
                    return Err(Error::format(
                        &replay_path,
                        format!("{key}: bad replay image {shape:?}"),
                    ));
                }
                take(&mut replay, &key, &shape, &replay_path)
            })
            .collect::<Result<_>>()?;
    }
    state.progress = manifest.progress.clone();
    state.rng = manifest.rng.clone();
    Ok(Checkpoint { manifest, state })
}
