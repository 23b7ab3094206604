//! Encoder plus GC fusion as one embedding function.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::config::RunConfig;
use crate::data::{Checkpoint, RngState};
use crate::encoder::{self, BnMode, BnStats, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::gc::{self, GcConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GccnNet {
    pub encoder: EncoderConfig,
    pub gc: GcConfig,
}

#[derive(Debug, Clone)]
pub struct NetVars {
    /// Fused feature vectors `[n, feature_len]`.
    pub features: Var,
    /// Flattened CNN vectors `[n, cnn_len]`.
    pub cnn: Var,
    /// GC vectors `[n, gc_len]`; `None` in plain mode.
    pub gc: Option<Var>,
    pub bn_stats: Vec<BnStats>,
}

impl GccnNet {
    /// Validates the encoder shape walk and the GC grid against it.
    pub fn new(encoder: EncoderConfig, gc: GcConfig) -> Result<Self> {
        let shapes = encoder.map_shapes()?;
        let sizes: Vec<_> = shapes.iter().map(|&(h, w, _)| (h, w)).collect();
        gc.validate(&sizes)?;
        Ok(Self { encoder, gc })
    }

    pub fn cnn_len(&self) -> usize {
        self.encoder.embedding_len().expect("validated at construction")
    }

    pub fn feature_len(&self) -> usize {
        self.gc.fused_len(self.cnn_len())
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        images: Var,
        mode: BnMode,
    ) -> Result<NetVars> {
        let enc = encoder::forward(graph, store, &self.encoder, images, mode)?;
        let gc = gc::gc_graph(graph, &enc.maps, &self.gc)?;
        let features = gc::fuse_graph(graph, enc.embedding, gc, self.gc.mode)?;
        Ok(NetVars {
            features,
            cnn: enc.embedding,
            gc,
            bn_stats: enc.bn_stats,
        })
    }

    /// Feature vectors `[n, feature_len]` for a list of images, computed in
    /// chunks without recording gradients.
    pub fn embed(&self, store: &ParamStore, images: &[&Tensor], mode: BnMode) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let d = self.feature_len();
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(CHUNK) {
            let mut graph = Graph::new();
            let x = graph.constant(encoder::stack_images(chunk)?);
            let vars = self.forward(&mut graph, store, x, mode)?;
            out.extend_from_slice(graph.value(vars.features).data());
        }
        Tensor::new(vec![images.len(), d], out)
    }
}

/// Configuration, network and parameters restored from (or destined for) a
/// checkpoint.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub net: GccnNet,
    pub store: ParamStore,
}

impl TrainedModel {
    /// Rebuilds the model from the config text stored in the checkpoint.
    /// The recomputed fingerprint must equal the stamped one.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_text(&ckpt.config_text)?;
        if config.fingerprint() != ckpt.fingerprint {
            return Err(Error::Format(
                "checkpoint config text does not match its fingerprint".into(),
            ));
        }
        if config.train.precision != ckpt.precision {
            return Err(Error::Format(format!(
                "checkpoint stored at {} but config says {}",
                ckpt.precision, config.train.precision
            )));
        }
        config.validate()?;
        let net = config.net()?;
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            store.insert(name.clone(), t.clone(), !name.contains("running_"));
        }
        Ok(Self { config, net, store })
    }

    pub fn to_checkpoint(&self, optimizer: &Optimizer, rng: &ChaCha8Rng) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        tensors.extend(optimizer.state_tensors());
        Checkpoint {
            fingerprint: self.config.fingerprint(),
            precision: self.config.train.precision,
            tensors,
            config_text: self.config.canonical(),
            rng: RngState::capture(rng),
        }
    }
}

/// Name prefix of optimizer state tensors inside checkpoints.
pub const OPTIM_PREFIX: &str = "optim.";
