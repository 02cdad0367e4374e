//! Pooled-output embeddings of `[c, h, w]` feature maps.
//!
//! Every embedding is a list of rectangular sub-regions. Each sub-region
//! contributes its width-pooled slice (mean over columns, `c * rows` values)
//! followed by its height-pooled slice (mean over rows, `c * cols` values).
//!
//! * scale `s`: an `s x s` grid of equal cells, row-major; `s * c * (h + w)` values.
//! * shift spec `[e_0 = 0, .., e_n = 1]`: the irregular grid with row cuts
//!   at `e_i * h` and column cuts at `e_j * w`; `(n_e - 1) * c * (h + w)` values.

use serde::{Deserialize, Serialize};

use super::{DistillError, Result};
use crate::tensor::{pool_regions, Region, Tensor};

/// Ordered cut fractions of a shifted grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ShiftSpec {
    eps: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ShiftSpec {
    type Error = DistillError;
    fn try_from(eps: Vec<f64>) -> Result<Self> {
        ShiftSpec::new(eps)
    }
}

impl From<ShiftSpec> for Vec<f64> {
    fn from(s: ShiftSpec) -> Self {
        s.eps
    }
}

impl Default for ShiftSpec {
    /// `[0, 1/4, 3/4, 1]`: a 4x4 lattice with the interior 2x2 block merged.
    fn default() -> Self {
        ShiftSpec { eps: vec![0.0, 0.25, 0.75, 1.0] }
    }
}

impl ShiftSpec {
    pub fn new(eps: Vec<f64>) -> Result<Self> {
        if eps.len() < 2 || eps[0] != 0.0 || eps[eps.len() - 1] != 1.0 {
            return Err(DistillError::ShiftSpec(format!("{eps:?} must start at 0 and end at 1")));
        }
        if eps.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(DistillError::ShiftSpec(format!("{eps:?} is not strictly increasing")));
        }
        Ok(ShiftSpec { eps })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.eps
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Integer cut positions along an axis of length `extent`.
    pub fn cuts(&self, extent: usize) -> Result<Vec<usize>> {
        self.eps
            .iter()
            .map(|&e| {
                let pos = e * extent as f64;
                let r = pos.round();
                if (pos - r).abs() > 1e-9 {
                    return Err(DistillError::ShiftSpec(format!("cut {e} * {extent} = {pos} is not integral")));
                }
                Ok(r as usize)
            })
            .collect()
    }
}

/// Flat embedding plus the recipe that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PodEmbedding {
    pub values: Vec<f64>,
    pub scales: Vec<usize>,
    pub shift: Option<ShiftSpec>,
    pub source_shape: [usize; 3],
}

impl PodEmbedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn dims(x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(DistillError::Shape(format!("expected [c, h, w] features, got {s:?}"))),
    }
}

/// Cells of the regular `s x s` grid, row-major.
pub fn scale_regions(h: usize, w: usize, s: usize) -> Result<Vec<Region>> {
    if s == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(DistillError::Scale { scale: s, h, w });
    }
    let (dh, dw) = (h / s, w / s);
    Ok((0..s).flat_map(|i| (0..s).map(move |j| Region { row0: i * dh, row1: (i + 1) * dh, col0: j * dw, col1: (j + 1) * dw })).collect())
}

/// Cells of the irregular shifted grid, row-major.
pub fn shift_regions(h: usize, w: usize, spec: &ShiftSpec) -> Result<Vec<Region>> {
    let rows = spec.cuts(h)?;
    let cols = spec.cuts(w)?;
    Ok(rows.windows(2).flat_map(|r| cols.windows(2).map(move |c| Region { row0: r[0], row1: r[1], col0: c[0], col1: c[1] })).collect())
}

/// All regions of the multi-scale grids in order, then the shifted grid.
pub fn embedding_regions(shape: [usize; 3], scales: &[usize], shift: Option<&ShiftSpec>) -> Result<Vec<Region>> {
    let [_, h, w] = shape;
    let mut regions = Vec::new();
    for &s in scales {
        regions.extend(scale_regions(h, w, s)?);
    }
    if let Some(spec) = shift {
        regions.extend(shift_regions(h, w, spec)?);
    }
    Ok(regions)
}

fn embed(x: &Tensor, scales: &[usize], shift: Option<&ShiftSpec>) -> Result<PodEmbedding> {
    let shape = dims(x)?;
    let regions = embedding_regions(shape, scales, shift)?;
    Ok(PodEmbedding { values: pool_regions(x, &regions)?, scales: scales.to_vec(), shift: shift.cloned(), source_shape: shape })
}

pub fn pod_embedding(x: &Tensor, s: usize) -> Result<PodEmbedding> {
    embed(x, &[s], None)
}

pub fn multiscale_embedding(x: &Tensor, scales: &[usize]) -> Result<PodEmbedding> {
    embed(x, scales, None)
}

pub fn shifted_embedding(x: &Tensor, spec: &ShiftSpec) -> Result<PodEmbedding> {
    embed(x, &[], Some(spec))
}

/// Multi-scale embedding followed by the shifted embedding.
pub fn msshift_embedding(x: &Tensor, scales: &[usize], spec: &ShiftSpec) -> Result<PodEmbedding> {
    embed(x, scales, Some(spec))
}

/// Expected embedding length for a `[c, h, w]` map.
pub fn embedding_len(shape: [usize; 3], scales: &[usize], shift: Option<&ShiftSpec>) -> usize {
    let [c, h, w] = shape;
    let regular: usize = scales.iter().map(|s| s * c * (h + w)).sum();
    regular + shift.map_or(0, |sp| (sp.len() - 1) * c * (h + w))
}
