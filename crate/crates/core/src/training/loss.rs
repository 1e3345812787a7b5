use crate::error::{Error, Result};
use crate::retrieval::MultiVecEmbedding;
use crate::tensorcore::{Graph, Var};

/// In-batch contrastive loss over the `n×n` MaxSim matrix scaled by `1/τ`,
/// with document `i` the positive for query `i`; mean over queries.
pub fn colbert_loss_graph(g: &mut Graph<'_>, queries: &[Var], docs: &[Var], tau: f32) -> Result<Var> {
    let n = queries.len();
    if n == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if docs.len() != n {
        return Err(Error::Dimension(format!("{n} queries but {} documents", docs.len())));
    }
    let mut scores = Vec::with_capacity(n * n);
    for q in queries {
        for d in docs {
            scores.push(g.maxsim(*q, *d)?);
        }
    }
    let matrix = g.stack(&scores, n, n)?;
    let logits = g.scale(matrix, 1.0 / tau)?;
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    g.cross_entropy(logits, &targets)
}

/// Value-level [`colbert_loss_graph`].
pub fn colbert_loss(queries: &[MultiVecEmbedding], docs: &[MultiVecEmbedding], tau: f32) -> Result<f32> {
    let mut g = Graph::new();
    let q: Vec<Var> = queries.iter().map(|e| g.constant(e.vectors.clone())).collect();
    let d: Vec<Var> = docs.iter().map(|e| g.constant(e.vectors.clone())).collect();
    let loss = colbert_loss_graph(&mut g, &q, &d, tau)?;
    Ok(g.value(loss).data()[0])
}
