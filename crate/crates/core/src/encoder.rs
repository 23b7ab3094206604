//! Convolutional embedding network: `num_blocks` repetitions of
//! conv 3x3 -> batch norm -> ReLU -> 2x2 max-pool.
//!
//! Convolutions are unpadded. When a conv output has an odd height or width
//! the last row/column is cropped before pooling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{dim_err, Error, Result};
use crate::ops::{BN_EPS, BN_MOMENTUM};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub filters: usize,
    /// `(height, width, channels)` of input images.
    pub input: (usize, usize, usize),
}

impl EncoderConfig {
    pub fn new(input: (usize, usize, usize)) -> Self {
        Self {
            num_blocks: 4,
            filters: 64,
            input,
        }
    }

    /// Post-pool `(h, w, c)` of every block, shallowest first. Fails if any
    /// block cannot fit its convolution or pool.
    pub fn map_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w, c) = self.input;
        if self.num_blocks == 0 || self.filters == 0 || c == 0 {
            return Err(Error::Config(
                "encoder needs at least one block, one filter and one input channel".into(),
            ));
        }
        let mut shapes = Vec::with_capacity(self.num_blocks);
        for block in 1..=self.num_blocks {
            if h < KERNEL || w < KERNEL {
                return Err(Error::Config(format!(
                    "encoder block {block}: {h}x{w} input is smaller than the {KERNEL}x{KERNEL} kernel \
                     ({} blocks do not fit a {}x{} image)",
                    self.num_blocks, self.input.0, self.input.1
                )));
            }
            h -= KERNEL - 1;
            w -= KERNEL - 1;
            h -= h % POOL;
            w -= w % POOL;
            if h < POOL || w < POOL {
                return Err(Error::Config(format!(
                    "encoder block {block}: {h}x{w} conv output is too small to pool"
                )));
            }
            h /= POOL;
            w /= POOL;
            shapes.push((h, w, self.filters));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.map_shapes().map(|_| ())
    }

    /// Length of the flattened final map.
    pub fn embedding_len(&self) -> Result<usize> {
        let (h, w, c) = *self.map_shapes()?.last().expect("at least one block");
        Ok(h * w * c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Stored running statistics.
    Eval,
}

pub fn param_name(block: usize, what: &str) -> String {
    format!("encoder.block{block}.{what}")
}

/// Kaiming-uniform conv kernels (`U(-b, b)`, `b = sqrt(6 / fan_in)`), unit
/// gamma, zero beta, and running statistics initialised to mean 0 / var 1.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_params_with(config, &mut rng, &mut store)?;
    Ok(store)
}

pub fn init_params_with<R: Rng>(
    config: &EncoderConfig,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<()> {
    config.validate()?;
    let mut cin = config.input.2;
    let f = config.filters;
    for block in 0..config.num_blocks {
        let fan_in = KERNEL * KERNEL * cin;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = fan_in * f;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        store.insert(
            param_name(block, "conv.weight"),
            Tensor::new(vec![KERNEL, KERNEL, cin, f], w)?,
            true,
        );
        store.insert(param_name(block, "bn.gamma"), Tensor::full(&[f], 1.0), true);
        store.insert(param_name(block, "bn.beta"), Tensor::zeros(&[f]), true);
        store.insert(param_name(block, "bn.running_mean"), Tensor::zeros(&[f]), false);
        store.insert(param_name(block, "bn.running_var"), Tensor::full(&[f], 1.0), false);
        cin = f;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub block: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// `[n, h * w * c]`, flattened row-major from the last map.
    pub embedding: Var,
    /// Post-pool maps `[n, h, w, c]`, one per block.
    pub maps: Vec<Var>,
    /// Batch statistics from training-mode batch norm (empty in eval mode).
    pub bn_stats: Vec<BnStats>,
}

/// Encodes a batch `[n, h, w, c]` on the graph.
pub fn forward(
    graph: &mut Graph,
    store: &ParamStore,
    config: &EncoderConfig,
    images: Var,
    mode: BnMode,
) -> Result<EncoderVars> {
    let (h, w, c) = config.input;
    match graph.shape(images) {
        [_, ih, iw, ic] if (*ih, *iw, *ic) == (h, w, c) => {}
        s => return dim_err(format!("encoder expects [n,{h},{w},{c}] images, got {s:?}")),
    }
    let mut x = images;
    let mut maps = Vec::with_capacity(config.num_blocks);
    let mut bn_stats = Vec::new();
    for block in 0..config.num_blocks {
        let kernel = graph.param(store, &param_name(block, "conv.weight"))?;
        let gamma = graph.param(store, &param_name(block, "bn.gamma"))?;
        let beta = graph.param(store, &param_name(block, "bn.beta"))?;
        let conv = graph.conv2d(x, kernel, 1).map_err(|e| block_err(block, e))?;
        let normed = match mode {
            BnMode::Train => {
                let (y, mean, var) = graph.batchnorm_train(conv, gamma, beta, BN_EPS)?;
                bn_stats.push(BnStats { block, mean, var });
                y
            }
            BnMode::Eval => {
                let mean = running(store, block, "bn.running_mean")?;
                let var = running(store, block, "bn.running_var")?;
                graph.batchnorm_eval(conv, gamma, beta, &mean, &var, BN_EPS)?
            }
        };
        let act = graph.relu(normed)?;
        let even = graph.crop_to_even(act).map_err(|e| block_err(block, e))?;
        x = graph.maxpool2x2(even).map_err(|e| block_err(block, e))?;
        maps.push(x);
    }
    let embedding = graph.flatten(x)?;
    Ok(EncoderVars {
        embedding,
        maps,
        bn_stats,
    })
}

fn running(store: &ParamStore, block: usize, what: &str) -> Result<Vec<f64>> {
    store
        .get(&param_name(block, what))
        .map(|t| t.data().to_vec())
        .ok_or_else(|| {
            Error::State(format!(
                "eval-mode batch norm in block {} has no running statistics",
                block + 1
            ))
        })
}

fn block_err(block: usize, e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("encoder block {}: {m}", block + 1)),
        other => other,
    }
}

/// Exponential moving average update of the running statistics.
pub fn update_running_stats(store: &mut ParamStore, stats: &[BnStats]) -> Result<()> {
    for s in stats {
        for (what, batch) in [("bn.running_mean", &s.mean), ("bn.running_var", &s.var)] {
            let name = param_name(s.block, what);
            let t = store
                .get_mut(&name)
                .ok_or_else(|| Error::State(format!("missing buffer `{name}`")))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

/// Result of encoding a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Tensor,
    /// Post-pool maps `[h, w, c]`, shallowest first.
    pub maps: Vec<Tensor>,
}

/// Encodes one `[h, w, c]` image. In training mode the batch statistics are
/// those of the image itself.
pub fn encode(
    image: &Tensor,
    config: &EncoderConfig,
    store: &ParamStore,
    mode: BnMode,
) -> Result<EncoderOutput> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut graph = Graph::new();
    let x = graph.constant(image.reshape(&shape)?);
    let vars = forward(&mut graph, store, config, x, mode)?;
    let maps = vars
        .maps
        .iter()
        .map(|&m| {
            let t = graph.value(m);
            t.reshape(&t.shape()[1..])
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = graph.value(vars.embedding);
    Ok(EncoderOutput {
        embedding: emb.reshape(&[emb.len()])?,
        maps,
    })
}

/// Stacks equally shaped `[h, w, c]` images into `[n, h, w, c]`.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty image list".into()))?;
    let mut data = Vec::with_capacity(first.len() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return dim_err(format!(
                "image shapes differ: {:?} vs {:?}",
                img.shape(),
                first.shape()
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_walk_28_allows_three_blocks() {
        let mut cfg = EncoderConfig::new((28, 28, 1));
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("block 4")), "{err}");
        cfg.num_blocks = 3;
        let shapes = cfg.map_shapes().unwrap();
        assert_eq!(shapes, vec![(13, 13, 64), (5, 5, 64), (1, 1, 64)]);
    }

    #[test]
    fn shape_walk_64() {
        let cfg = EncoderConfig::new((64, 64, 1));
        let shapes = cfg.map_shapes().unwrap();
        assert_eq!(
            shapes.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![31, 14, 6, 2]
        );
        assert_eq!(cfg.embedding_len().unwrap(), 256);
    }

    #[test]
    fn encode_64_gives_256() {
        let cfg = EncoderConfig {
            num_blocks: 4,
            filters: 64,
            input: (64, 64, 1),
        };
        let store = init_params(&cfg, 1).unwrap();
        let img = Tensor::full(&[64, 64, 1], 0.5);
        let out = encode(&img, &cfg, &store, BnMode::Eval).unwrap();
        assert_eq!(out.embedding.len(), 256);
        assert_eq!(out.maps.len(), 4);
        assert!(out.maps.iter().all(|m| m.shape()[2] == 64));
        assert_eq!(out.maps[3].shape(), &[2, 2, 64]);
    }

    #[test]
    fn zero_image_gives_zero_embedding() {
        let cfg = EncoderConfig {
            num_blocks: 2,
            filters: 4,
            input: (12, 12, 1),
        };
        let store = init_params(&cfg, 3).unwrap();
        let out = encode(&Tensor::zeros(&[12, 12, 1]), &cfg, &store, BnMode::Train).unwrap();
        assert!(out.embedding.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = EncoderConfig {
            num_blocks: 2,
            filters: 4,
            input: (12, 12, 1),
        };
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 10).unwrap());
    }

    #[test]
    fn kaiming_variance() {
        // 3*3*64 fan-in, 64 filters: 36864 weights in block 2
        let cfg = EncoderConfig {
            num_blocks: 2,
            filters: 64,
            input: (12, 12, 1),
        };
        let store = init_params(&cfg, 5).unwrap();
        let w = store.get(&param_name(1, "conv.weight")).unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 2.0 / (9.0 * 64.0);
        assert!((var / target - 1.0).abs() < 0.2, "var {var} target {target}");
    }

    #[test]
    fn eval_without_running_stats_is_state_error() {
        let cfg = EncoderConfig {
            num_blocks: 1,
            filters: 2,
            input: (4, 4, 1),
        };
        let mut store = ParamStore::new();
        for e in init_params(&cfg, 0).unwrap().iter() {
            if e.trainable {
                store.insert(e.name.clone(), e.value.clone(), true);
            }
        }
        let err = encode(&Tensor::zeros(&[4, 4, 1]), &cfg, &store, BnMode::Eval).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = EncoderConfig {
            num_blocks: 1,
            filters: 2,
            input: (4, 4, 1),
        };
        let store = init_params(&cfg, 0).unwrap();
        let err = encode(&Tensor::zeros(&[5, 4, 1]), &cfg, &store, BnMode::Eval).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
