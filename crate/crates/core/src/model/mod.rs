//! Pre-norm encoder-decoder transformer with named adapter slots.
//!
//! Each forward pass uses at most one [`AdapterSet`]. Slots:
//! `enc.embed` / `dec.embed` after the (scaled) token embedding and before the
//! positional encoding, and `enc.layer.{i}` / `dec.layer.{i}` either after
//! the feed-forward block or right before it.

mod adapters;

use rand::Rng as _;
use sha2::{Digest, Sha256};

pub use adapters::{
    dec_layer_slot, enc_layer_slot, required_slots, AdapterSet, DEC_EMBED_SLOT, ENC_EMBED_SLOT,
};

use crate::adapter::Placement;
use crate::numcore::{AttnLayout, Graph, ParamStore, Parameter, Tensor, Var, LAYER_NORM_EPS};
use crate::{Error, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// `AfterFf` or `BeforeFf`.
    pub adapter_placement: Placement,
    pub use_embedding_adapters: bool,
    /// Keep the token embedding trainable when the backbone is frozen.
    pub train_embeddings: bool,
}

impl ModelConfig {
    /// Small default shape used by the toy pipeline.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            model_dim: 32,
            ff_dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 32,
            dropout: 0.1,
            adapter_placement: Placement::AfterFf,
            use_embedding_adapters: true,
            train_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("heads", self.heads),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && !self.model_dim.is_multiple_of(self.heads) {
            errs.push(format!(
                "heads ({}) must divide model_dim ({})",
                self.heads, self.model_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.adapter_placement == Placement::Embedding {
            errs.push("layer adapter placement must be after_ff or before_ff".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Canonical `key=value` rendering, used for fingerprints and checkpoint metadata.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("model.vocab_size".into(), self.vocab_size.to_string()),
            ("model.dim".into(), self.model_dim.to_string()),
            ("model.ff_dim".into(), self.ff_dim.to_string()),
            ("model.heads".into(), self.heads.to_string()),
            ("model.enc_layers".into(), self.enc_layers.to_string()),
            ("model.dec_layers".into(), self.dec_layers.to_string()),
            ("model.max_len".into(), self.max_len.to_string()),
            ("model.dropout".into(), format!("{:?}", self.dropout)),
            ("model.placement".into(), self.adapter_placement.as_str().into()),
            ("model.embedding_adapters".into(), self.use_embedding_adapters.to_string()),
            ("model.train_embeddings".into(), self.train_embeddings.to_string()),
        ]
    }

    pub fn from_kv<'a>(mut get: impl FnMut(&str) -> Option<&'a str>) -> Result<Self> {
        let mut need = |k: &str| {
            get(k).ok_or_else(|| Error::Config(vec![format!("missing {k}")]))
                .map(str::to_string)
        };
        let num = |s: String, k: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Config(vec![format!("bad {k}: {s:?}")]))
        };
        let flag = |s: String, k: &str| -> Result<bool> {
            s.parse().map_err(|_| Error::Config(vec![format!("bad {k}: {s:?}")]))
        };
        let cfg = ModelConfig {
            vocab_size: num(need("model.vocab_size")?, "vocab_size")?,
            model_dim: num(need("model.dim")?, "dim")?,
            ff_dim: num(need("model.ff_dim")?, "ff_dim")?,
            heads: num(need("model.heads")?, "heads")?,
            enc_layers: num(need("model.enc_layers")?, "enc_layers")?,
            dec_layers: num(need("model.dec_layers")?, "dec_layers")?,
            max_len: num(need("model.max_len")?, "max_len")?,
            dropout: need("model.dropout")?
                .parse()
                .map_err(|_| Error::Config(vec!["bad dropout".into()]))?,
            adapter_placement: need("model.placement")?.parse()?,
            use_embedding_adapters: flag(need("model.embedding_adapters")?, "embedding_adapters")?,
            train_embeddings: flag(need("model.train_embeddings")?, "train_embeddings")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter count of the backbone for `cfg`, without adapters.
pub fn backbone_param_count(cfg: &ModelConfig) -> usize {
    let (h, f) = (cfg.model_dim, cfg.ff_dim);
    let attn = 4 * (h * h + h);
    let ln = 2 * h;
    let ff = h * f + f + f * h + h;
    let enc = attn + ff + 2 * ln;
    let dec = 2 * attn + ff + 3 * ln;
    cfg.vocab_size * h + cfg.enc_layers * enc + cfg.dec_layers * dec + 2 * ln
}

/// Whether a forward pass applies dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => g.dropout(x, p, rng),
        }
    }
}

/// Named intermediate values recorded during a forward pass.
pub type Probe = Vec<(String, Var)>;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    scale: usize,
    offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AttnParams {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    self_ln: Norm,
    self_attn: AttnParams,
    cross: Option<(Norm, AttnParams)>,
    ff_ln: Norm,
    ff_in: Lin,
    ff_out: Lin,
}

/// Encoder output for a packed batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch·max_len × h]`
    pub states: Var,
    /// valid positions per sequence, including the language tag
    pub lens: Vec<usize>,
    pub max_len: usize,
}

/// Decoder logits for a packed batch.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[batch·max_len × V]`
    pub logits: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    cfg: ModelConfig,
    params: ParamStore,
    embed: usize,
    enc: Vec<Layer>,
    enc_final: Norm,
    dec: Vec<Layer>,
    dec_final: Norm,
    positions: Tensor,
    active: Option<AdapterSet>,
}

fn sinusoid(rows: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; rows * h];
    for pos in 0..rows {
        for i in 0..h {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(k / h as f64);
            data[pos * h + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![rows, h], data).expect("sized")
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
    bound: f64,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize]) -> Result<usize> {
        let n = shape.iter().product();
        let b = self.bound;
        let data = (0..n).map(|_| self.rng.gen_range(-b..b)).collect();
        self.store.insert(Parameter::new(name, Tensor::new(shape.to_vec(), data)?))
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<usize> {
        self.store.insert(Parameter::new(name, Tensor::filled(shape, v)))
    }

    fn lin(&mut self, prefix: &str, rows: usize, cols: usize) -> Result<Lin> {
        Ok(Lin {
            w: self.uniform(format!("{prefix}.weight"), &[rows, cols])?,
            b: self.fill(format!("{prefix}.bias"), &[cols], 0.0)?,
        })
    }

    fn norm(&mut self, prefix: &str, h: usize) -> Result<Norm> {
        Ok(Norm {
            scale: self.fill(format!("{prefix}.scale"), &[h], 1.0)?,
            offset: self.fill(format!("{prefix}.offset"), &[h], 0.0)?,
        })
    }

    fn attn(&mut self, prefix: &str, h: usize) -> Result<AttnParams> {
        Ok(AttnParams {
            q: self.lin(&format!("{prefix}.q"), h, h)?,
            k: self.lin(&format!("{prefix}.k"), h, h)?,
            v: self.lin(&format!("{prefix}.v"), h, h)?,
            o: self.lin(&format!("{prefix}.o"), h, h)?,
        })
    }

    fn layer(&mut self, prefix: &str, cfg: &ModelConfig, cross: bool) -> Result<Layer> {
        let h = cfg.model_dim;
        Ok(Layer {
            self_ln: self.norm(&format!("{prefix}.self_attn_ln"), h)?,
            self_attn: self.attn(&format!("{prefix}.self_attn"), h)?,
            cross: if cross {
                Some((
                    self.norm(&format!("{prefix}.cross_attn_ln"), h)?,
                    self.attn(&format!("{prefix}.cross_attn"), h)?,
                ))
            } else {
                None
            },
            ff_ln: self.norm(&format!("{prefix}.ff_ln"), h)?,
            ff_in: self.lin(&format!("{prefix}.ff.in"), h, cfg.ff_dim)?,
            ff_out: self.lin(&format!("{prefix}.ff.out"), cfg.ff_dim, h)?,
        })
    }
}

impl Seq2SeqModel {
    /// Random backbone: projections and embeddings uniform in `±1/sqrt(h)`,
    /// biases zero, norms identity. No adapters attached.
    pub fn build(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.model_dim;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            bound: 1.0 / (h as f64).sqrt(),
        };
        let embed = b.uniform("embed.tokens".into(), &[cfg.vocab_size, h])?;
        let enc = (0..cfg.enc_layers)
            .map(|i| b.layer(&format!("enc.{i}"), &cfg, false))
            .collect::<Result<Vec<_>>>()?;
        let enc_final = b.norm("enc.final_ln", h)?;
        let dec = (0..cfg.dec_layers)
            .map(|i| b.layer(&format!("dec.{i}"), &cfg, true))
            .collect::<Result<Vec<_>>>()?;
        let dec_final = b.norm("dec.final_ln", h)?;
        Ok(Seq2SeqModel {
            positions: sinusoid(cfg.max_len + 2, h),
            params: b.store,
            cfg,
            embed,
            enc,
            enc_final,
            dec,
            dec_final,
            active: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Dropout probability used by `Mode::Train` passes.
    pub fn set_dropout(&mut self, p: f64) {
        self.cfg.dropout = p;
    }

    pub fn backbone(&self) -> &ParamStore {
        &self.params
    }

    pub fn backbone_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Mark every backbone parameter frozen (the token embedding stays
    /// trainable only when `train_embeddings` is set).
    pub fn freeze_backbone(&mut self) {
        let keep = self.cfg.train_embeddings;
        let embed = self.embed;
        for (i, p) in self.params.iter_mut().enumerate() {
            p.frozen = !(keep && i == embed);
        }
    }

    pub fn unfreeze_backbone(&mut self) {
        self.params.set_frozen(false);
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.params.iter().all(|p| p.frozen)
    }

    /// Make `set` the active adapters; returns the previously active set.
    pub fn attach_adapter_set(&mut self, set: AdapterSet) -> Result<Option<AdapterSet>> {
        set.check_coverage(&self.cfg)?;
        Ok(self.active.replace(set))
    }

    pub fn detach_adapter_set(&mut self) -> Option<AdapterSet> {
        self.active.take()
    }

    pub fn active_adapters(&self) -> Option<&AdapterSet> {
        self.active.as_ref()
    }

    pub fn active_adapters_mut(&mut self) -> Option<&mut AdapterSet> {
        self.active.as_mut()
    }

    /// Backbone followed by active adapter parameters.
    pub fn all_params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().chain(self.active.iter().flat_map(|s| s.params()))
    }

    pub fn all_params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params
            .iter_mut()
            .chain(self.active.iter_mut().flat_map(|s| s.params_mut()))
    }

    pub fn trainable_param_count(&self) -> usize {
        self.all_params().filter(|p| !p.frozen).map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.all_params_mut() {
            p.zero_grad();
        }
    }

    /// SHA-256 over backbone parameter names and value bits.
    pub fn backbone_hash(&self) -> String {
        hash_params(self.params.iter())
    }

    fn p(&self, g: &mut Graph, id: usize) -> Var {
        g.param(self.params.get(id))
    }

    fn linear(&self, g: &mut Graph, x: Var, lin: Lin) -> Result<Var> {
        let w = self.p(g, lin.w);
        let b = self.p(g, lin.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let s = self.p(g, n.scale);
        let o = self.p(g, n.offset);
        g.layer_norm(x, s, o, LAYER_NORM_EPS)
    }

    fn attention(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        a: &AttnParams,
        layout: &AttnLayout,
    ) -> Result<Var> {
        let q = self.linear(g, xq, a.q)?;
        let k = self.linear(g, xkv, a.k)?;
        let v = self.linear(g, xkv, a.v)?;
        let o = g.attention(q, k, v, self.cfg.heads, layout)?;
        self.linear(g, o, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, layer: &Layer, mode: &mut Mode) -> Result<Var> {
        let n = self.norm(g, x, layer.ff_ln)?;
        let hdn = self.linear(g, n, layer.ff_in)?;
        let hdn = g.relu(hdn);
        let hdn = mode.dropout(g, hdn, self.cfg.dropout);
        let out = self.linear(g, hdn, layer.ff_out)?;
        let out = mode.dropout(g, out, self.cfg.dropout);
        g.add(x, out)
    }

    fn embed_tokens(
        &self,
        g: &mut Graph,
        seqs: &[Vec<usize>],
        max_len: usize,
        adapter: Option<&crate::adapter::AdapterLayer>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let v = self.cfg.vocab_size;
        let mut ids = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            for &id in s {
                if id >= v {
                    return Err(Error::Index { id, bound: v });
                }
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, max_len - s.len()));
        }
        let table = self.p(g, self.embed);
        let e = g.embedding(table, &ids)?;
        let mut x = g.scale(e, (self.cfg.model_dim as f64).sqrt());
        if let Some(a) = adapter {
            x = a.forward(g, x)?;
        }
        let h = self.cfg.model_dim;
        let mut pos = Vec::with_capacity(seqs.len() * max_len * h);
        for _ in seqs {
            pos.extend_from_slice(&self.positions.data()[..max_len * h]);
        }
        let pos = g.constant(Tensor::new(vec![seqs.len() * max_len, h], pos)?);
        let x = g.add(x, pos)?;
        Ok(mode.dropout(g, x, self.cfg.dropout))
    }

    fn layer_adapter<'s>(&self, set: Option<&'s AdapterSet>, slot: &str) -> Option<&'s crate::adapter::AdapterLayer> {
        set.and_then(|s| s.get(slot))
    }

    /// Encode a packed batch; each source is prefixed with its tag.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        adapters: Option<&AdapterSet>,
        srcs: &[&[usize]],
        tags: &[usize],
        mode: &mut Mode,
        mut probe: Option<&mut Probe>,
    ) -> Result<Encoded> {
        if srcs.len() != tags.len() || srcs.is_empty() {
            return Err(Error::Contract("encode needs one tag per non-empty batch".into()));
        }
        let seqs: Vec<Vec<usize>> = srcs
            .iter()
            .zip(tags)
            .map(|(s, &t)| std::iter::once(t).chain(s.iter().copied()).collect())
            .collect();
        for s in srcs {
            if s.len() > self.cfg.max_len {
                return Err(Error::Length {
                    len: s.len(),
                    max: self.cfg.max_len,
                });
            }
        }
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let max_len = *lens.iter().max().unwrap();
        let embed_adapter = if self.cfg.use_embedding_adapters {
            self.layer_adapter(adapters, ENC_EMBED_SLOT)
        } else {
            None
        };
        let mut x = self.embed_tokens(g, &seqs, max_len, embed_adapter, mode)?;
        let layout = AttnLayout {
            batch: seqs.len(),
            q_len: max_len,
            k_len: max_len,
            key_valid: lens.clone(),
            causal: false,
        };
        for (i, layer) in self.enc.iter().enumerate() {
            let adapter = self.layer_adapter(adapters, &enc_layer_slot(i));
            x = self.layer_forward(g, x, layer, &layout, None, adapter, mode, &mut probe, &format!("enc.{i}"))?;
        }
        let states = self.norm(g, x, self.enc_final)?;
        Ok(Encoded {
            states,
            lens,
            max_len,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        g: &mut Graph,
        mut x: Var,
        layer: &Layer,
        self_layout: &AttnLayout,
        cross: Option<(&Encoded, &AttnLayout)>,
        adapter: Option<&crate::adapter::AdapterLayer>,
        mode: &mut Mode,
        probe: &mut Option<&mut Probe>,
        name: &str,
    ) -> Result<Var> {
        let n = self.norm(g, x, layer.self_ln)?;
        let a = self.attention(g, n, n, &layer.self_attn, self_layout)?;
        let a = mode.dropout(g, a, self.cfg.dropout);
        x = g.add(x, a)?;
        if let (Some((ln, params)), Some((enc, layout))) = (&layer.cross, cross) {
            let n = self.norm(g, x, *ln)?;
            let a = self.attention(g, n, enc.states, params, layout)?;
            let a = mode.dropout(g, a, self.cfg.dropout);
            x = g.add(x, a)?;
        }
        let before = self.cfg.adapter_placement == Placement::BeforeFf;
        if let (true, Some(ad)) = (before, adapter) {
            x = ad.forward(g, x)?;
        }
        if let Some(p) = probe.as_deref_mut() {
            p.push((format!("{name}.ff_input"), x));
        }
        x = self.feed_forward(g, x, layer, mode)?;
        if let (false, Some(ad)) = (before, adapter) {
            x = ad.forward(g, x)?;
        }
        if let Some(p) = probe.as_deref_mut() {
            p.push((format!("{name}.output"), x));
        }
        Ok(x)
    }

    /// Teacher-forced decoder over packed decoder inputs (tag already prepended).
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        adapters: Option<&AdapterSet>,
        enc: &Encoded,
        dec_inputs: &[&[usize]],
        mode: &mut Mode,
        mut probe: Option<&mut Probe>,
    ) -> Result<Decoded> {
        if dec_inputs.len() != enc.lens.len() {
            return Err(Error::Contract("decoder batch differs from encoder batch".into()));
        }
        for d in dec_inputs {
            if d.is_empty() {
                return Err(Error::Contract("decoder input needs at least the tag".into()));
            }
            if d.len() > self.cfg.max_len + 1 {
                return Err(Error::Length {
                    len: d.len() - 1,
                    max: self.cfg.max_len,
                });
            }
        }
        let seqs: Vec<Vec<usize>> = dec_inputs.iter().map(|d| d.to_vec()).collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let max_len = *lens.iter().max().unwrap();
        let embed_adapter = if self.cfg.use_embedding_adapters {
            self.layer_adapter(adapters, DEC_EMBED_SLOT)
        } else {
            None
        };
        let mut x = self.embed_tokens(g, &seqs, max_len, embed_adapter, mode)?;
        let self_layout = AttnLayout {
            batch: seqs.len(),
            q_len: max_len,
            k_len: max_len,
            key_valid: lens.clone(),
            causal: true,
        };
        let cross_layout = AttnLayout {
            batch: seqs.len(),
            q_len: max_len,
            k_len: enc.max_len,
            key_valid: enc.lens.clone(),
            causal: false,
        };
        for (i, layer) in self.dec.iter().enumerate() {
            let adapter = self.layer_adapter(adapters, &dec_layer_slot(i));
            x = self.layer_forward(
                g,
                x,
                layer,
                &self_layout,
                Some((enc, &cross_layout)),
                adapter,
                mode,
                &mut probe,
                &format!("dec.{i}"),
            )?;
        }
        let x = self.norm(g, x, self.dec_final)?;
        let table = self.p(g, self.embed);
        let logits = g.matmul_nt(x, table)?;
        Ok(Decoded {
            logits,
            lens,
            max_len,
        })
    }

    /// Encoder states `[(len+1) × h]` for one source using the active adapters.
    pub fn encode(&self, src: &[usize], lang_tag: usize, mut mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, self.active.as_ref(), &[src], &[lang_tag], &mut mode, None)?;
        Ok(g.value(enc.states).clone())
    }

    /// Logits `[len × V]` for target `tgt` (decoder input `[tag] + tgt[..len-1]`).
    pub fn decode_teacher_forced(
        &self,
        enc_out: &Tensor,
        tgt: &[usize],
        lang_tag: usize,
        mut mode: Mode,
    ) -> Result<Tensor> {
        if enc_out.shape().len() != 2 || enc_out.cols() != self.cfg.model_dim {
            return Err(Error::Shape {
                op: "decode",
                left: enc_out.shape().to_vec(),
                right: vec![self.cfg.model_dim],
            });
        }
        if tgt.is_empty() {
            return Err(Error::Contract("empty target".into()));
        }
        let mut g = Graph::new();
        let states = g.constant(enc_out.clone());
        let enc = Encoded {
            states,
            lens: vec![enc_out.rows()],
            max_len: enc_out.rows(),
        };
        let input: Vec<usize> = std::iter::once(lang_tag)
            .chain(tgt[..tgt.len() - 1].iter().copied())
            .collect();
        let dec = self.decode_graph(&mut g, self.active.as_ref(), &enc, &[&input], &mut mode, None)?;
        Ok(g.value(dec.logits).clone())
    }
}

pub(crate) fn hash_params<'a>(params: impl Iterator<Item = &'a Parameter>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        h.update([0u8]);
        for x in p.tensor.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
