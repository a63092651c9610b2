//! Bottleneck adapter: `U · ReLU(D · LN(z) + b_d) + b_u + z`.
//!
//! A fresh adapter has a zero up-projection and is therefore the identity map.

use rand::Rng as _;

use crate::numcore::{Graph, Parameter, Tensor, Var, LAYER_NORM_EPS};
use crate::{Error, Result, Rng};

/// Where a adapter is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    AfterFf,
    BeforeFf,
    Embedding,
}

impl Placement {
    pub fn as_str(self) -> &'static str {
        match self {
            Placement::AfterFf => "after_ff",
            Placement::BeforeFf => "before_ff",
            Placement::Embedding => "embedding",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after_ff" => Ok(Placement::AfterFf),
            "before_ff" => Ok(Placement::BeforeFf),
            "embedding" => Ok(Placement::Embedding),
            other => Err(Error::Config(vec![format!("unknown adapter placement {other:?}")])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub model_dim: usize,
    pub bottleneck: usize,
    pub init_scale: f64,
    pub placement: Placement,
}

impl AdapterConfig {
    /// Config with `init_scale = 1/sqrt(h)` placed after the feed-forward block.
    pub fn new(model_dim: usize, bottleneck: usize) -> Result<Self> {
        let cfg = AdapterConfig {
            model_dim,
            bottleneck,
            init_scale: 1.0 / (model_dim.max(1) as f64).sqrt(),
            placement: Placement::AfterFf,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.model_dim == 0 {
            errs.push("adapter model_dim must be >= 1".to_string());
        }
        if self.bottleneck == 0 {
            errs.push("adapter bottleneck must be >= 1".to_string());
        }
        if !(self.init_scale >= 0.0) {
            errs.push(format!("init_scale {} must be >= 0", self.init_scale));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Trainable parameters of one adapter layer: `2h + 2hd + d + h`.
pub fn adapter_param_count(cfg: &AdapterConfig) -> usize {
    let (h, d) = (cfg.model_dim, cfg.bottleneck);
    2 * h + 2 * h * d + d + h
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub ln_scale: Parameter,
    pub ln_offset: Parameter,
    pub down: Parameter,
    pub down_bias: Parameter,
    pub up: Parameter,
    pub up_bias: Parameter,
}

impl AdapterLayer {
    /// Identity-at-init adapter; parameter names are prefixed with `prefix`.
    pub fn init(cfg: &AdapterConfig, prefix: &str, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, d) = (cfg.model_dim, cfg.bottleneck);
        let s = cfg.init_scale;
        let down: Vec<f64> = (0..h * d)
            .map(|_| if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 })
            .collect();
        let p = |name: &str, t: Tensor| Parameter::new(format!("{prefix}.{name}"), t);
        Ok(AdapterLayer {
            ln_scale: p("ln.scale", Tensor::filled(&[h], 1.0)),
            ln_offset: p("ln.offset", Tensor::zeros(&[h])),
            down: p("down.weight", Tensor::new(vec![h, d], down)?),
            down_bias: p("down.bias", Tensor::zeros(&[d])),
            up: p("up.weight", Tensor::zeros(&[d, h])),
            up_bias: p("up.bias", Tensor::zeros(&[h])),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.ln_scale.numel()
    }

    pub fn bottleneck(&self) -> usize {
        self.down_bias.numel()
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let h = self.model_dim();
        if g.value(z).cols() != h || g.value(z).shape().len() != 2 {
            return Err(Error::Shape {
                op: "adapter",
                left: g.value(z).shape().to_vec(),
                right: vec![h],
            });
        }
        let scale = g.param(&self.ln_scale);
        let offset = g.param(&self.ln_offset);
        let down = g.param(&self.down);
        let down_bias = g.param(&self.down_bias);
        let up = g.param(&self.up);
        let up_bias = g.param(&self.up_bias);
        let normed = g.layer_norm(z, scale, offset, LAYER_NORM_EPS)?;
        let hidden = g.matmul(normed, down)?;
        let hidden = g.add_row(hidden, down_bias)?;
        let hidden = g.relu(hidden);
        let out = g.matmul(hidden, up)?;
        let out = g.add_row(out, up_bias)?;
        g.add(out, z)
    }

    /// Convenience evaluation outside of training.
    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let out = self.forward(&mut g, v)?;
        Ok(g.value(out).clone())
    }

    pub fn params(&self) -> [&Parameter; 6] {
        [
            &self.ln_scale,
            &self.ln_offset,
            &self.down,
            &self.down_bias,
            &self.up,
            &self.up_bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 6] {
        [
            &mut self.ln_scale,
            &mut self.ln_offset,
            &mut self.down,
            &mut self.down_bias,
            &mut self.up,
            &mut self.up_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
