use std::collections::BTreeMap;

use super::ModelConfig;
use crate::adapter::{AdapterConfig, AdapterLayer, Placement};
use crate::numcore::Parameter;
use crate::{Error, Result, Rng};

pub const ENC_EMBED_SLOT: &str = "enc.embed";
pub const DEC_EMBED_SLOT: &str = "dec.embed";

pub fn enc_layer_slot(i: usize) -> String {
    format!("enc.layer.{i}")
}

pub fn dec_layer_slot(i: usize) -> String {
    format!("dec.layer.{i}")
}

/// Slot names an adapter set must cover for `cfg`.
pub fn required_slots(cfg: &ModelConfig) -> Vec<String> {
    let mut slots = Vec::new();
    if cfg.use_embedding_adapters {
        slots.push(ENC_EMBED_SLOT.to_string());
        slots.push(DEC_EMBED_SLOT.to_string());
    }
    slots.extend((0..cfg.enc_layers).map(enc_layer_slot));
    slots.extend((0..cfg.dec_layers).map(dec_layer_slot));
    slots
}

/// One group's adapters, keyed by slot name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub set_id: String,
    slots: BTreeMap<String, AdapterLayer>,
}

impl AdapterSet {
    pub fn empty(set_id: impl Into<String>) -> Self {
        AdapterSet {
            set_id: set_id.into(),
            slots: BTreeMap::new(),
        }
    }

    /// Identity-initialized adapters for every slot `model` requires.
    pub fn fresh(
        model: &ModelConfig,
        adapter: &AdapterConfig,
        set_id: impl Into<String>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if adapter.model_dim != model.model_dim {
            return Err(Error::Config(vec![format!(
                "adapter width {} differs from model width {}",
                adapter.model_dim, model.model_dim
            )]));
        }
        let mut set = AdapterSet::empty(set_id);
        for slot in required_slots(model) {
            let placement = if slot.ends_with(".embed") {
                Placement::Embedding
            } else {
                model.adapter_placement
            };
            let cfg = adapter.with_placement(placement);
            let layer = AdapterLayer::init(&cfg, &format!("adapter.{slot}"), rng)?;
            set.slots.insert(slot, layer);
        }
        Ok(set)
    }

    pub fn insert(&mut self, slot: impl Into<String>, layer: AdapterLayer) -> Option<AdapterLayer> {
        self.slots.insert(slot.into(), layer)
    }

    pub fn remove(&mut self, slot: &str) -> Option<AdapterLayer> {
        self.slots.remove(slot)
    }

    pub fn get(&self, slot: &str) -> Option<&AdapterLayer> {
        self.slots.get(slot)
    }

    pub fn get_mut(&mut self, slot: &str) -> Option<&mut AdapterLayer> {
        self.slots.get_mut(slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = (&str, &AdapterLayer)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.slots.values().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.slots.values_mut().flat_map(|l| l.params_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Parameter::numel).sum()
    }

    /// Check that this set covers exactly the slots of `cfg` with the right width.
    pub fn check_coverage(&self, cfg: &ModelConfig) -> Result<()> {
        let required = required_slots(cfg);
        for slot in &required {
            match self.slots.get(slot) {
                None => {
                    return Err(Error::Coverage(format!(
                        "adapter set {:?} is missing slot {slot}",
                        self.set_id
                    )))
                }
                Some(layer) if layer.model_dim() != cfg.model_dim => {
                    return Err(Error::Coverage(format!(
                        "slot {slot} has width {} but the model has {}",
                        layer.model_dim(),
                        cfg.model_dim
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.slots.keys().find(|k| !required.contains(k)) {
            return Err(Error::Coverage(format!(
                "adapter set {:?} has slot {extra} the model does not use",
                self.set_id
            )));
        }
        Ok(())
    }
}
