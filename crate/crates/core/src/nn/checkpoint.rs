//! Frozen snapshots and the on-disk parameter container.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::network::{Network, Trace};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Immutable copy of a network taken at a task boundary.
///
/// There is no way to obtain mutable access to the wrapped parameters, and
/// its backward pass never produces parameter gradients.
#[derive(Debug, Clone)]
pub struct FrozenCheckpoint {
    net: Network,
    task_id: usize,
}

/// Deep-copies `net` into a frozen checkpoint for task `task_id`.
pub fn snapshot(net: &Network, task_id: usize) -> FrozenCheckpoint {
    FrozenCheckpoint {
        net: net.clone(),
        task_id,
    }
}

impl FrozenCheckpoint {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn forward(&self, x: &Tensor, y2: &Tensor) -> Result<Tensor> {
        self.net.forward(x, y2)
    }

    pub fn forward_traced(&self, x: &Tensor, y2: &Tensor) -> Result<(Tensor, Trace)> {
        self.net.forward_traced(x, y2)
    }

    pub fn features(&self, x: &Tensor, y2: &Tensor) -> Result<Tensor> {
        Ok(self.net.features_traced(x, y2)?.0)
    }

    /// Gradient w.r.t. the second input only.
    pub fn input_gradient(&self, trace: &Trace, dlogits: &Tensor) -> Result<Tensor> {
        Ok(self
            .net
            .backward(trace, Some(dlogits), None, None, true)?
            .expect("requested"))
    }

    pub(crate) fn from_parts(net: Network, task_id: usize) -> Self {
        Self { net, task_id }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameter-name → flat tensor map plus the architecture that gives the
/// names meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub architecture: Architecture,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl CheckpointFile {
    pub fn from_network(net: &Network) -> Self {
        let tensors = net
            .slots()
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    StoredTensor {
                        shape: s.shape.clone(),
                        data: net.params()[s.range.clone()].to_vec(),
                    },
                )
            })
            .collect();
        Self {
            architecture: net.architecture().clone(),
            tensors,
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::zeroed(self.architecture.clone())?;
        for slot in net.slots().to_vec() {
            let t = self
                .tensors
                .get(&slot.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", slot.name)))?;
            if t.shape != slot.shape || t.data.len() != slot.range.len() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    slot.name, t.shape, slot.shape
                )));
            }
            net.params_mut()[slot.range].copy_from_slice(&t.data);
        }
        if self.tensors.len() != net.slots().len() {
            return Err(Error::Format("checkpoint holds unknown tensors".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip_is_exact() {
        let arch = Architecture::desk_resnet([1, 6, 6], 4, 3);
        let net = Network::init(arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let file = CheckpointFile::from_network(&net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        file.save(&path).unwrap();
        let back = CheckpointFile::load(&path).unwrap().to_network().unwrap();
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn missing_tensor_is_a_format_error() {
        let arch = Architecture::mlp([1, 2, 2], 3, 2);
        let net = Network::zeroed(arch).unwrap();
        let mut file = CheckpointFile::from_network(&net);
        file.tensors.remove("label_embed.bias");
        assert!(matches!(file.to_network(), Err(Error::Format(_))));
    }
}
