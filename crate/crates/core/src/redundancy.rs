//! Contribution cosine similarity between the attention maps of a block.

use serde::Serialize;

use crate::attention::AttentionMapStack;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over rows `i` of `cos(Al[i, :], Am[i, :])`.
pub fn head_pair_similarity(al: &Tensor, am: &Tensor) -> Result<f64> {
    if al.rank() != 2 || al.shape() != am.shape() || al.dim(0) != al.dim(1) {
        return Err(Error::shape("head_pair_similarity", al.shape(), am.shape()));
    }
    let n = al.dim(0);
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (al.row(i), am.row(i));
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Similarity(format!("row {i} has zero norm")));
        }
        total += dot / (na.sqrt() * nb.sqrt());
    }
    Ok(total / n as f64)
}

/// Head similarity of one block: the average over all pairs `l < m`.
pub fn block_similarity(stack: &AttentionMapStack) -> Result<f64> {
    let h = stack.heads();
    if h < 2 {
        return Err(Error::Similarity(format!(
            "block similarity needs at least 2 heads, got {h}"
        )));
    }
    let heads: Vec<Tensor> = (0..h).map(|i| stack.head(i)).collect();
    let mut sum = 0.0;
    for l in 0..h {
        for m in l + 1..h {
            sum += head_pair_similarity(&heads[l], &heads[m])?;
        }
    }
    Ok(2.0 * sum / (h * (h - 1)) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CcsReport {
    pub per_block: Vec<f64>,
    pub overall: f64,
    pub h: usize,
    pub n: usize,
    pub b: usize,
    /// Number of images averaged over.
    pub images: usize,
}

/// CCS of one forward pass: per-block similarity and their mean.
pub fn ccs(stacks: &[AttentionMapStack]) -> Result<CcsReport> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Similarity("no attention-map stacks given".into()))?;
    let (h, n) = (first.heads(), first.tokens());
    let mut per_block = Vec::with_capacity(stacks.len());
    for s in stacks {
        if s.heads() != h {
            return Err(Error::Similarity(format!(
                "block {} has {} heads, expected {h}",
                s.block_index,
                s.heads()
            )));
        }
        per_block.push(block_similarity(s)?);
    }
    let overall = per_block.iter().sum::<f64>() / per_block.len() as f64;
    Ok(CcsReport {
        b: per_block.len(),
        per_block,
        overall,
        h,
        n,
        images: 1,
    })
}

/// CCS per image, then averaged over images block by block.
pub fn ccs_batch(per_image: &[Vec<AttentionMapStack>]) -> Result<CcsReport> {
    if per_image.is_empty() {
        return Err(Error::Similarity("no images given".into()));
    }
    let reports = per_image
        .iter()
        .map(|s| ccs(s))
        .collect::<Result<Vec<_>>>()?;
    let first = &reports[0];
    let mut per_block = vec![0.0; first.b];
    for r in &reports {
        if r.b != first.b || r.h != first.h {
            return Err(Error::Similarity(
                "images disagree on block or head count".into(),
            ));
        }
        for (acc, v) in per_block.iter_mut().zip(&r.per_block) {
            *acc += v / reports.len() as f64;
        }
    }
    let overall = per_block.iter().sum::<f64>() / per_block.len() as f64;
    Ok(CcsReport {
        per_block,
        overall,
        h: first.h,
        n: first.n,
        b: first.b,
        images: reports.len(),
    })
}

impl CcsReport {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "CCS over {} block(s), h={}, N={}, images={}\n",
            self.b, self.h, self.n, self.images
        );
        for (i, v) in self.per_block.iter().enumerate() {
            s += &format!("block {i:<3} S_n = {v:.6}\n");
        }
        s += &format!("overall CCS = {:.6}\n", self.overall);
        s
    }
}
