//! Gradient-magnitude importance scores and descending rank order.
//!
//! A gaussian's importance is the Euclidean norm of its nine-parameter
//! gradient of the combined loss, taken in a single backward pass over a
//! chosen render subset. Scoring can be restricted to a sub-subset so
//! hierarchy contexts are scored without re-rendering per gaussian.

use crate::error::{invalid, Result};
use crate::image::ImageBuffer;
use crate::loss::{combined_loss, LossConfig};
use crate::render::{render_backward_subset, render_subset};
use crate::splat::{GaussianSet, RenderConfig};

/// Importance scores for a set of gaussian indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    scope: Vec<u32>,
    scores: Vec<f64>,
}

/// Bytes per serialized score record: u32 index + f64 score.
const RECORD_SIZE: usize = 12;

impl ScoreTable {
    pub fn new(scope: Vec<u32>, scores: Vec<f64>) -> Result<Self> {
        if scope.len() != scores.len() {
            return Err(invalid!(
                "scope has {} indices but {} scores",
                scope.len(),
                scores.len()
            ));
        }
        if !scope.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid!("score table scope must be strictly ascending"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("score table contains non-finite scores"));
        }
        Ok(Self { scope, scores })
    }

    pub fn len(&self) -> usize {
        self.scope.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scope.is_empty()
    }

    pub fn scope(&self) -> &[u32] {
        &self.scope
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Score of gaussian `index`, if it is in scope.
    pub fn get(&self, index: u32) -> Option<f64> {
        self.scope.binary_search(&index).ok().map(|k| self.scores[k])
    }

    /// Little-endian (u32 index, f64 score) records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_SIZE);
        for (i, s) in self.scope.iter().zip(&self.scores) {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % RECORD_SIZE != 0 {
            return Err(invalid!(
                "score table payload of {} bytes is not a multiple of the {}-byte record",
                bytes.len(),
                RECORD_SIZE
            ));
        }
        let mut scope = Vec::with_capacity(bytes.len() / RECORD_SIZE);
        let mut scores = Vec::with_capacity(bytes.len() / RECORD_SIZE);
        for rec in bytes.chunks_exact(RECORD_SIZE) {
            scope.push(u32::from_le_bytes(rec[0..4].try_into().unwrap()));
            scores.push(f64::from_le_bytes(rec[4..12].try_into().unwrap()));
        }
        Self::new(scope, scores)
    }
}

/// Checks that sorted `inner` is a subset of sorted `outer`.
fn check_contained(inner: &[u32], outer: &[u32]) -> Result<()> {
    let mut it = outer.iter();
    for &want in inner {
        if !it.any(|&have| have == want) {
            return Err(invalid!("scored index {want} is not part of the rendered subset"));
        }
    }
    Ok(())
}

/// Scores `score_subset` against `target` using a single render and backward
/// pass over `render_subset`.
pub fn score_gaussians(
    set: &GaussianSet,
    render_indices: &[u32],
    score_indices: &[u32],
    target: &ImageBuffer,
    render_cfg: &RenderConfig,
    loss_cfg: &LossConfig,
) -> Result<ScoreTable> {
    set.check_subset(render_indices)?;
    set.check_subset(score_indices)?;
    check_contained(score_indices, render_indices)?;
    let rendered = render_subset(set, render_indices, render_cfg)?;
    let (_, upstream) = combined_loss(&rendered, target, loss_cfg)?;
    let grads = render_backward_subset(set, render_indices, render_cfg, &upstream)?;
    let scores = score_indices.iter().map(|&i| grads.norm(i as usize)).collect();
    ScoreTable::new(score_indices.to_vec(), scores)
}

/// Indices ordered by descending score, ties broken by ascending index.
pub fn rank_descending(table: &ScoreTable) -> Vec<u32> {
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        table.scores[b]
            .total_cmp(&table.scores[a])
            .then(table.scope[a].cmp(&table.scope[b]))
    });
    order.into_iter().map(|k| table.scope[k]).collect()
}
