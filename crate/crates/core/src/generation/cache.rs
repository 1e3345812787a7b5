use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer rotated keys and values for every position processed so far,
/// stored row-major as `[len × hidden]` (heads are contiguous column groups).
///
/// A cache is created by one generate call and dropped when it returns.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    validity: Vec<bool>,
    width: usize,
}

impl KvCache {
    pub fn new(num_layers: usize, width: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); num_layers],
            validity: Vec::new(),
            width,
        }
    }

    /// Positions committed so far, shared by all layers.
    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys[..self.len() * self.width]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values[..self.len() * self.width]
    }

    pub(crate) fn append_layer(&mut self, layer: usize, keys: &[f32], values: &[f32]) -> Result<()> {
        let committed = self.len() * self.width;
        let width = self.width;
        let slot = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Cache(format!("no layer {layer}")))?;
        if slot.keys.len() != committed || keys.len() != values.len() || !keys.len().is_multiple_of(width) {
            return Err(Error::Cache(format!(
                "layer {layer} holds {} values, expected {committed} before append",
                slot.keys.len()
            )));
        }
        slot.keys.extend_from_slice(keys);
        slot.values.extend_from_slice(values);
        Ok(())
    }

    pub(crate) fn commit(&mut self, new_validity: &[bool]) -> Result<()> {
        let expect = (self.len() + new_validity.len()) * self.width;
        if let Some((l, _)) = self
            .layers
            .iter()
            .enumerate()
            .find(|(_, kv)| kv.keys.len() != expect || kv.values.len() != expect)
        {
            return Err(Error::Cache(format!("layer {l} out of step with the other layers")));
        }
        self.validity.extend_from_slice(new_validity);
        Ok(())
    }
}
