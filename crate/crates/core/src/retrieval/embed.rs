use crate::error::{Error, Result};
use crate::model::{Backbone, Dropout, ModelInput};
use crate::modeswitch::{set_mode, Mode};
use crate::tensorcore::{Graph, Tensor, Var};
use crate::tokens::{DOC_MARKER, QUERY_MARKER};

/// Unit-norm rows `[num_tokens × proj_dim]`, one per valid input position.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVecEmbedding {
    pub vectors: Tensor,
    pub source_id: String,
}

impl MultiVecEmbedding {
    pub fn new(vectors: Tensor, source_id: impl Into<String>) -> Self {
        Self {
            vectors,
            source_id: source_id.into(),
        }
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn num_tokens(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// The sequence actually embedded: patches, then a role marker, then tokens.
pub fn retrieval_input(input: &ModelInput, is_query: bool) -> ModelInput {
    let marker = if is_query { QUERY_MARKER } else { DOC_MARKER };
    let mut tokens = Vec::with_capacity(input.tokens.len() + 1);
    tokens.push(marker);
    tokens.extend_from_slice(&input.tokens);
    ModelInput {
        patches: input.patches.clone(),
        tokens,
    }
}

/// Embedding rows on a graph, for training. Padding positions are dropped
/// before projection.
pub fn embed_graph<'p>(
    model: &'p Backbone,
    g: &mut Graph<'p>,
    input: &ModelInput,
    is_query: bool,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if input.is_empty() {
        return Err(Error::Empty("embedding input"));
    }
    let seq = retrieval_input(input, is_query);
    let rows: Vec<usize> = seq
        .validity()
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.then_some(i))
        .collect();
    let hidden = model.forward_hidden(g, &seq, None, dropout.as_deref_mut())?;
    model.project(g, hidden, &rows, dropout)
}

/// Embeds with the model's current flags, without switching mode.
pub fn embed_current_state(model: &Backbone, input: &ModelInput, is_query: bool) -> Result<MultiVecEmbedding> {
    let mut g = Graph::new();
    let v = embed_graph(model, &mut g, input, is_query, None)?;
    let mut vectors = g.value(v).clone();
    vectors.requires_grad = false;
    vectors.grad = None;
    Ok(MultiVecEmbedding::new(vectors, ""))
}

/// Switches to retrieval mode and embeds.
pub fn embed(model: &mut Backbone, input: &ModelInput, is_query: bool) -> Result<MultiVecEmbedding> {
    set_mode(model, Mode::Retrieval);
    embed_current_state(model, input, is_query)
}
