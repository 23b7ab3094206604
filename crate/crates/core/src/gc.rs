//! Global-context features: per-patch maxima of channel-collapsed feature
//! maps, and their fusion with the flattened CNN embedding.
//!
//! For each selected map the channels are collapsed to one 2-D map, the map
//! is split into a grid of non-overlapping patches, and each patch
//! contributes its maximum. The maxima of all selected maps are concatenated
//! into the global-context (GC) vector. Fusion then either appends GC to the
//! CNN vector (`Aug`), divides the CNN vector by `||GC||_F` (`Norm`), or does
//! both (`AugNorm`).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, PatchBox, Var, NORM_FLOOR};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub use crate::autodiff::Collapse;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// GC disabled; the CNN vector is used as is.
    Plain,
    Aug,
    Norm,
    AugNorm,
}

impl FusionMode {
    pub fn uses_gc(self) -> bool {
        self != FusionMode::Plain
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Plain => "plain",
            FusionMode::Aug => "aug",
            FusionMode::Norm => "norm",
            FusionMode::AugNorm => "augnorm",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" | "none" => Ok(FusionMode::Plain),
            "aug" => Ok(FusionMode::Aug),
            "norm" => Ok(FusionMode::Norm),
            "augnorm" | "aug+norm" | "aug_norm" => Ok(FusionMode::AugNorm),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl fmt::Display for Collapse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Collapse::Max => "max",
            Collapse::Mean => "mean",
        })
    }
}

impl FromStr for Collapse {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Collapse::Max),
            "mean" => Ok(Collapse::Mean),
            other => Err(Error::Config(format!("unknown channel collapse `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub collapse: Collapse,
    /// How many of the deepest encoder maps feed the GC vector.
    pub layers: usize,
    pub mode: FusionMode,
}

impl Default for GcConfig {
    fn default() -> Self {
        Self {
            grid_rows: 3,
            grid_cols: 3,
            collapse: Collapse::Max,
            layers: 1,
            mode: FusionMode::AugNorm,
        }
    }
}

impl GcConfig {
    pub fn patches_per_layer(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Length of the GC vector (zero when GC is disabled).
    pub fn gc_len(&self) -> usize {
        if self.mode.uses_gc() {
            self.layers * self.patches_per_layer()
        } else {
            0
        }
    }

    /// Length of the fused vector for a CNN vector of length `cnn_len`.
    pub fn fused_len(&self, cnn_len: usize) -> usize {
        match self.mode {
            FusionMode::Plain | FusionMode::Norm => cnn_len,
            FusionMode::Aug | FusionMode::AugNorm => cnn_len + self.gc_len(),
        }
    }

    /// Checks the grid against the spatial sizes of the encoder's maps
    /// (shallowest first).
    pub fn validate(&self, map_sizes: &[(usize, usize)]) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("GC grid must have at least one patch".into()));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::Config(format!(
                "GC layers must be 1, 2 or 3, got {}",
                self.layers
            )));
        }
        if !self.mode.uses_gc() {
            return Ok(());
        }
        if self.layers > map_sizes.len() {
            return Err(Error::Config(format!(
                "GC uses {} layers but the encoder has {} blocks",
                self.layers,
                map_sizes.len()
            )));
        }
        for (i, &(h, w)) in map_sizes.iter().enumerate().skip(map_sizes.len() - self.layers) {
            if h < self.grid_rows || w < self.grid_cols {
                return Err(Error::Config(format!(
                    "block {} map is {h}x{w}, smaller than the {}x{} GC grid",
                    i + 1,
                    self.grid_rows,
                    self.grid_cols
                )));
            }
        }
        Ok(())
    }
}

/// One GC element's provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcSource {
    /// Index into the encoder's map list.
    pub layer: usize,
    pub patch: PatchBox,
    /// `(row, col)` of the winning cell in the collapsed map.
    pub argmax: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcVector {
    pub values: Vec<f64>,
    pub sources: Vec<GcSource>,
}

/// Splits an `h x w` map into `rows x cols` disjoint patches in row-major
/// patch order. Patches are `h / rows` tall (resp. `w / cols` wide); the
/// remainder goes to the last patch row (resp. column).
pub fn partition(h: usize, w: usize, rows: usize, cols: usize) -> Result<Vec<PatchBox>> {
    if rows == 0 || cols == 0 {
        return dim_err("grid must have at least one row and column");
    }
    if rows > h || cols > w {
        return dim_err(format!("{rows}x{cols} grid does not fit a {h}x{w} map"));
    }
    let (ph, pw) = (h / rows, w / cols);
    let mut boxes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row1 = if r + 1 == rows { h } else { (r + 1) * ph };
        for c in 0..cols {
            let col1 = if c + 1 == cols { w } else { (c + 1) * pw };
            boxes.push(PatchBox {
                row0: r * ph,
                row1,
                col0: c * pw,
                col1,
            });
        }
    }
    Ok(boxes)
}

/// `[h, w, c] -> [h, w]` channel reduction.
pub fn collapse_channels(map: &Tensor, method: Collapse) -> Result<Tensor> {
    let &[h, w, c] = map.shape() else {
        return dim_err(format!("collapse_channels expects [h,w,c], got {:?}", map.shape()));
    };
    let data = map
        .data()
        .chunks_exact(c)
        .map(|px| match method {
            Collapse::Max => px[crate::ops::argmax(px)],
            Collapse::Mean => px.iter().sum::<f64>() / c as f64,
        })
        .collect();
    Ok(Tensor::from_parts(vec![h, w], data))
}

/// GC vector of one image from its encoder maps (each `[h, w, c]`,
/// shallowest first). Uses the deepest `config.layers` maps in depth order.
pub fn extract_gc(maps: &[Tensor], config: &GcConfig) -> Result<GcVector> {
    if config.layers == 0 || config.layers > maps.len() {
        return Err(Error::Config(format!(
            "GC needs {} layers, got {} maps",
            config.layers,
            maps.len()
        )));
    }
    let mut values = Vec::with_capacity(config.layers * config.patches_per_layer());
    let mut sources = Vec::with_capacity(values.capacity());
    for layer in maps.len() - config.layers..maps.len() {
        let flat = collapse_channels(&maps[layer], config.collapse)?;
        let (h, w) = (flat.shape()[0], flat.shape()[1]);
        for patch in partition(h, w, config.grid_rows, config.grid_cols)? {
            let mut best = (patch.row0, patch.col0);
            for r in patch.row0..patch.row1 {
                for c in patch.col0..patch.col1 {
                    if flat.data()[r * w + c] > flat.data()[best.0 * w + best.1] {
                        best = (r, c);
                    }
                }
            }
            values.push(flat.data()[best.0 * w + best.1]);
            sources.push(GcSource {
                layer,
                patch,
                argmax: best,
            });
        }
    }
    Ok(GcVector { values, sources })
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Combines a CNN vector with a GC vector according to `mode`.
pub fn fuse(cnn: &[f64], gc: &[f64], mode: FusionMode) -> Vec<f64> {
    let denom = || frobenius_norm(gc).max(NORM_FLOOR);
    match mode {
        FusionMode::Plain => cnn.to_vec(),
        FusionMode::Aug => cnn.iter().chain(gc).copied().collect(),
        FusionMode::Norm => {
            let d = denom();
            cnn.iter().map(|v| v / d).collect()
        }
        FusionMode::AugNorm => {
            let d = denom();
            cnn.iter().chain(gc).map(|v| v / d).collect()
        }
    }
}

/// Batched GC extraction on graph nodes. `maps` are the encoder's
/// `[n, h, w, c]` outputs, shallowest first. Returns `[n, gc_len]`, or
/// `None` in plain mode.
pub fn gc_graph(graph: &mut Graph, maps: &[Var], config: &GcConfig) -> Result<Option<Var>> {
    if !config.mode.uses_gc() {
        return Ok(None);
    }
    if config.layers == 0 || config.layers > maps.len() {
        return Err(Error::Config(format!(
            "GC needs {} layers, got {} maps",
            config.layers,
            maps.len()
        )));
    }
    let mut out: Option<Var> = None;
    for &map in &maps[maps.len() - config.layers..] {
        let flat = graph.collapse_channels(map, config.collapse)?;
        let (h, w) = (graph.shape(flat)[1], graph.shape(flat)[2]);
        let boxes = partition(h, w, config.grid_rows, config.grid_cols)?;
        let maxima = graph.patch_max(flat, &boxes)?;
        out = Some(match out {
            Some(prev) => graph.concat(prev, maxima)?,
            None => maxima,
        });
    }
    Ok(out)
}

/// Batched fusion on graph nodes. `cnn` is `[n, d]`.
pub fn fuse_graph(graph: &mut Graph, cnn: Var, gc: Option<Var>, mode: FusionMode) -> Result<Var> {
    let need = |gc: Option<Var>| {
        gc.ok_or_else(|| Error::Config(format!("fusion mode {mode} needs a GC vector")))
    };
    match mode {
        FusionMode::Plain => Ok(cnn),
        FusionMode::Aug => {
            let gc = need(gc)?;
            graph.concat(cnn, gc)
        }
        FusionMode::Norm => {
            let gc = need(gc)?;
            graph.div_row_norm(cnn, gc)
        }
        FusionMode::AugNorm => {
            let gc = need(gc)?;
            let joined = graph.concat(cnn, gc)?;
            graph.div_row_norm(joined, gc)
        }
    }
}
