//! Decoder-only transformer with per-head observability.
//!
//! Layers are numbered from 1 (hidden state `x^0` is the embedding) and heads
//! from 0. Each layer computes
//!
//! ```text
//! a = concat_h(s_h · X · W_V,h) · W_o        (MHA update)
//! m = f((X + a) · W_1) · W_2                 (FFN update)
//! X' = X + a + m
//! ```
//!
//! optionally with pre-norm layer normalization in front of both blocks and
//! the vocabulary head. The vocabulary head is the transposed embedding.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{ComponentKind, Directive, HeadId, HeadSelection, InterventionPlan};
use crate::tensor::{self, matmul, softmax_causal, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalEncoding {
    #[default]
    LearnedAbsolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub use_layer_norm: bool,
    pub activation: Activation,
    #[serde(default)]
    pub positional_encoding: PositionalEncoding,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Spec(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Spec("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn check_head(&self, id: HeadId) -> Result<()> {
        self.check_layer(id.layer)?;
        if id.head >= self.heads {
            return Err(Error::HeadOutOfRange {
                head: id.head,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.layers {
            return Err(Error::LayerOutOfRange {
                layer,
                layers: self.layers,
            });
        }
        Ok(())
    }

    /// Every (layer, head) pair in lexicographic order.
    pub fn all_heads(&self) -> Vec<HeadId> {
        (1..=self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    /// Per-head query projections, each `d × d/M`.
    pub w_q: Vec<Tensor<T>>,
    pub w_k: Vec<Tensor<T>>,
    pub w_v: Vec<Tensor<T>>,
    /// Shared output projection `d × d`; rows `h·d/M .. (h+1)·d/M` belong to head h.
    pub w_o: Tensor<T>,
    pub w_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T: Real = f32> {
    /// `|V| × d`; also the vocabulary head (transposed).
    pub embed: Tensor<T>,
    /// `N_max × d` learned absolute positions.
    pub pos: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
}

impl<T: Real> Weights<T> {
    /// All-zero weights with unit norm gains, shaped for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.d_model;
        let dh = spec.head_dim();
        let layer = || LayerWeights {
            w_q: vec![Tensor::zeros(&[d, dh]); spec.heads],
            w_k: vec![Tensor::zeros(&[d, dh]); spec.heads],
            w_v: vec![Tensor::zeros(&[d, dh]); spec.heads],
            w_o: Tensor::zeros(&[d, d]),
            w_1: Tensor::zeros(&[d, spec.d_ff]),
            w_2: Tensor::zeros(&[spec.d_ff, d]),
            ln1_gain: vec![T::one(); d],
            ln1_bias: vec![T::zero(); d],
            ln2_gain: vec![T::one(); d],
            ln2_bias: vec![T::zero(); d],
        };
        Self {
            embed: Tensor::zeros(&[spec.vocab, d]),
            pos: Tensor::zeros(&[spec.max_seq, d]),
            layers: (0..spec.layers).map(|_| layer()).collect(),
            lnf_gain: vec![T::one(); d],
            lnf_bias: vec![T::zero(); d],
        }
    }

    /// Named tensors in archive order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = vec![
            ("embed".into(), self.embed.shape().to_vec(), self.embed.data()),
            ("pos".into(), self.pos.shape().to_vec(), self.pos.data()),
        ];
        for (i, lw) in self.layers.iter().enumerate() {
            let l = i + 1;
            for (h, ((q, k), v)) in lw.w_q.iter().zip(&lw.w_k).zip(&lw.w_v).enumerate() {
                out.push((format!("layers.{l}.attn.{h}.w_q"), q.shape().to_vec(), q.data()));
                out.push((format!("layers.{l}.attn.{h}.w_k"), k.shape().to_vec(), k.data()));
                out.push((format!("layers.{l}.attn.{h}.w_v"), v.shape().to_vec(), v.data()));
            }
            out.push((format!("layers.{l}.attn.w_o"), lw.w_o.shape().to_vec(), lw.w_o.data()));
            out.push((format!("layers.{l}.ffn.w_1"), lw.w_1.shape().to_vec(), lw.w_1.data()));
            out.push((format!("layers.{l}.ffn.w_2"), lw.w_2.shape().to_vec(), lw.w_2.data()));
            out.push((format!("layers.{l}.ln1.gain"), vec![lw.ln1_gain.len()], &lw.ln1_gain));
            out.push((format!("layers.{l}.ln1.bias"), vec![lw.ln1_bias.len()], &lw.ln1_bias));
            out.push((format!("layers.{l}.ln2.gain"), vec![lw.ln2_gain.len()], &lw.ln2_gain));
            out.push((format!("layers.{l}.ln2.bias"), vec![lw.ln2_bias.len()], &lw.ln2_bias));
        }
        out.push(("ln_f.gain".into(), vec![self.lnf_gain.len()], &self.lnf_gain));
        out.push(("ln_f.bias".into(), vec![self.lnf_bias.len()], &self.lnf_bias));
        out
    }

    /// Mutable view of the tensor called `name`, for loaders.
    pub fn slot_mut(&mut self, name: &str) -> Option<&mut [T]> {
        match name {
            "embed" => return Some(self.embed.data_mut()),
            "pos" => return Some(self.pos.data_mut()),
            "ln_f.gain" => return Some(&mut self.lnf_gain),
            "ln_f.bias" => return Some(&mut self.lnf_bias),
            _ => {}
        }
        let rest = name.strip_prefix("layers.")?;
        let (l, rest) = rest.split_once('.')?;
        let l: usize = l.parse().ok()?;
        let lw = self.layers.get_mut(l.checked_sub(1)?)?;
        match rest {
            "attn.w_o" => Some(lw.w_o.data_mut()),
            "ffn.w_1" => Some(lw.w_1.data_mut()),
            "ffn.w_2" => Some(lw.w_2.data_mut()),
            "ln1.gain" => Some(&mut lw.ln1_gain),
            "ln1.bias" => Some(&mut lw.ln1_bias),
            "ln2.gain" => Some(&mut lw.ln2_gain),
            "ln2.bias" => Some(&mut lw.ln2_bias),
            _ => {
                let rest = rest.strip_prefix("attn.")?;
                let (h, which) = rest.split_once('.')?;
                let h: usize = h.parse().ok()?;
                let bank = match which {
                    "w_q" => &mut lw.w_q,
                    "w_k" => &mut lw.w_k,
                    "w_v" => &mut lw.w_v,
                    _ => return None,
                };
                bank.get_mut(h).map(|t| t.data_mut())
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let v = |xs: &[T]| xs.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Weights {
            embed: self.embed.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|lw| LayerWeights {
                    w_q: lw.w_q.iter().map(Tensor::cast).collect(),
                    w_k: lw.w_k.iter().map(Tensor::cast).collect(),
                    w_v: lw.w_v.iter().map(Tensor::cast).collect(),
                    w_o: lw.w_o.cast(),
                    w_1: lw.w_1.cast(),
                    w_2: lw.w_2.cast(),
                    ln1_gain: v(&lw.ln1_gain),
                    ln1_bias: v(&lw.ln1_bias),
                    ln2_gain: v(&lw.ln2_gain),
                    ln2_bias: v(&lw.ln2_bias),
                })
                .collect(),
            lnf_gain: v(&self.lnf_gain),
            lnf_bias: v(&self.lnf_bias),
        }
    }

    /// Checks every shape against `spec` and every value for finiteness.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let d = spec.d_model;
        let dh = spec.head_dim();
        let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
            if got != want {
                return Err(Error::Shape(format!("{name}: shape {got:?}, expected {want:?}")));
            }
            Ok(())
        };
        expect("embed", self.embed.shape(), &[spec.vocab, d])?;
        expect("pos", self.pos.shape(), &[spec.max_seq, d])?;
        if self.layers.len() != spec.layers {
            return Err(Error::Shape(format!(
                "{} layers of weights for a {}-layer spec",
                self.layers.len(),
                spec.layers
            )));
        }
        for (i, lw) in self.layers.iter().enumerate() {
            for bank in [&lw.w_q, &lw.w_k, &lw.w_v] {
                if bank.len() != spec.heads {
                    return Err(Error::Shape(format!("layer {}: wrong head count", i + 1)));
                }
                for t in bank {
                    expect("head projection", t.shape(), &[d, dh])?;
                }
            }
            expect("w_o", lw.w_o.shape(), &[d, d])?;
            expect("w_1", lw.w_1.shape(), &[d, spec.d_ff])?;
            expect("w_2", lw.w_2.shape(), &[spec.d_ff, d])?;
            for v in [&lw.ln1_gain, &lw.ln1_bias, &lw.ln2_gain, &lw.ln2_bias] {
                expect("norm", &[v.len()], &[d])?;
            }
        }
        expect("ln_f", &[self.lnf_gain.len()], &[d])?;
        expect("ln_f", &[self.lnf_bias.len()], &[d])?;
        for (name, _, data) in self.named_tensors() {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteTensor(name));
            }
        }
        Ok(())
    }
}

/// Everything one forward pass computed, layer by layer.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Real = f32> {
    /// Post-softmax (and post-intervention) attention weights, `N × N` per head.
    pub attn: Vec<Tensor<T>>,
    /// Per-head outputs `H = s · X · W_V` after interventions, `N × d/M`.
    pub heads: Vec<Tensor<T>>,
    /// MHA residual update `a^ℓ`, `N × d`.
    pub mha: Tensor<T>,
    /// FFN residual update `m^ℓ`, `N × d`.
    pub ffn: Tensor<T>,
    /// Hidden state `x^ℓ` after the layer, `N × d`.
    pub hidden: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct RunTrace<T: Real = f32> {
    pub tokens: Vec<usize>,
    /// `x^0`: token plus position embeddings. Empty unless recorded.
    pub embedded: Option<Tensor<T>>,
    /// One entry per layer when recorded, otherwise empty.
    pub layers: Vec<LayerTrace<T>>,
    /// Final residual of the last position.
    pub final_hidden: Vec<T>,
    /// `φ(x_N^L)`.
    pub logits: Vec<T>,
    /// `σ(φ(x_N^L))`.
    pub probs: Vec<T>,
    /// Plan conflicts resolved during this pass (e.g. a patch overriding a prune).
    pub conflicts: Vec<String>,
}

impl<T: Real> RunTrace<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn top_token(&self) -> usize {
        top_token(&self.logits)
    }

    /// Recorded head output `H^{layer,head}`.
    pub fn head_output(&self, id: HeadId) -> Result<&Tensor<T>> {
        let lt = self
            .layers
            .get(id.layer.wrapping_sub(1))
            .ok_or_else(|| Error::Plan(format!("trace has no recorded layer {}", id.layer)))?;
        lt.heads
            .get(id.head)
            .ok_or_else(|| Error::Plan(format!("trace has no recorded head {id}")))
    }
}

/// Argmax over logits, ties broken by the lowest token id.
pub fn top_token<T: Real>(logits: &[T]) -> usize {
    tensor::argmax(logits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub spec: ModelSpec,
    pub weights: Weights<T>,
}

/// Per-pass lookup tables compiled from an [`InterventionPlan`].
struct Hooks<T: Real> {
    knock_mha: Vec<BTreeSet<usize>>,
    knock_ffn: Vec<BTreeSet<usize>>,
    /// Indexed by `(layer-1) * M + head`.
    blocks: Vec<Vec<(usize, BTreeSet<usize>, bool)>>,
    scale: Vec<Option<T>>,
    prune: Vec<bool>,
    patch: Vec<Option<Tensor<T>>>,
    conflicts: Vec<String>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: ModelSpec, weights: Weights<T>) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Rows of `W_o` that carry head `head`'s output into the residual.
    pub fn head_out_slice(&self, layer: usize, head: usize) -> Result<Tensor<T>> {
        let dh = self.spec.head_dim();
        self.weights.layers[layer - 1].w_o.row_block(head * dh, dh)
    }

    /// The head's additive contribution to the residual at one position:
    /// its output row times its slice of `W_o`.
    pub fn head_contribution(&self, id: HeadId, head_row: &[T]) -> Result<Vec<T>> {
        self.spec.check_head(id)?;
        let slice = self.head_out_slice(id.layer, id.head)?;
        tensor::vecmat(head_row, &slice)
    }

    /// Vocabulary head: optional final norm, then projection on the embedding.
    pub fn readout(&self, x: &[T]) -> Result<Vec<T>> {
        let d = self.spec.d_model;
        if x.len() != d {
            return Err(Error::Shape(format!("readout of width {} for d={d}", x.len())));
        }
        let normed;
        let v = if self.spec.use_layer_norm {
            normed = tensor::layer_norm(
                x,
                &self.weights.lnf_gain,
                &self.weights.lnf_bias,
                T::lit(self.spec.ln_eps),
            )?;
            &normed[..]
        } else {
            x
        };
        let e = &self.weights.embed;
        let mut logits = Vec::with_capacity(self.spec.vocab);
        for tok in 0..self.spec.vocab {
            let mut acc = T::zero();
            for (&a, &b) in v.iter().zip(e.row(tok)) {
                acc = acc + a * b;
            }
            logits.push(acc);
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("readout".into()));
        }
        Ok(logits)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.spec.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.spec.max_seq,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.spec.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.spec.vocab,
            });
        }
        Ok(())
    }

    fn compile(&self, plan: &InterventionPlan, n: usize) -> Result<Hooks<T>> {
        let spec = &self.spec;
        let slots = spec.layers * spec.heads;
        let mut hooks = Hooks {
            knock_mha: vec![BTreeSet::new(); spec.layers],
            knock_ffn: vec![BTreeSet::new(); spec.layers],
            blocks: vec![Vec::new(); slots],
            scale: vec![None; slots],
            prune: vec![false; slots],
            patch: vec![None; slots],
            conflicts: Vec::new(),
        };
        let idx = |id: HeadId| (id.layer - 1) * spec.heads + id.head;
        let check_pos = |p: usize| -> Result<()> {
            if p >= n {
                Err(Error::PositionOutOfRange { pos: p, len: n })
            } else {
                Ok(())
            }
        };
        for d in plan.directives() {
            match d {
                Directive::Knockout {
                    kind,
                    positions,
                    layers,
                } => {
                    for &p in positions {
                        check_pos(p)?;
                    }
                    for &l in layers {
                        spec.check_layer(l)?;
                        let set = match kind {
                            ComponentKind::Mha => &mut hooks.knock_mha[l - 1],
                            ComponentKind::Ffn => &mut hooks.knock_ffn[l - 1],
                        };
                        set.extend(positions.iter().copied());
                    }
                }
                Directive::BlockAttention {
                    query,
                    keys,
                    layers,
                    heads,
                    renormalize,
                } => {
                    check_pos(*query)?;
                    for &k in keys {
                        check_pos(k)?;
                    }
                    let head_list: Vec<usize> = match heads {
                        HeadSelection::All => (0..spec.heads).collect(),
                        HeadSelection::Subset(hs) => hs.iter().copied().collect(),
                    };
                    for &l in layers {
                        spec.check_layer(l)?;
                        for &h in &head_list {
                            let id = HeadId::new(l, h);
                            spec.check_head(id)?;
                            hooks.blocks[idx(id)].push((*query, keys.clone(), *renormalize));
                        }
                    }
                }
                Directive::PatchHead { head, replacement } => {
                    spec.check_head(*head)?;
                    if replacement.shape() != [n, spec.head_dim()] {
                        return Err(Error::LengthMismatch(format!(
                            "patch for {head} has shape {:?}, run needs [{n}, {}]",
                            replacement.shape(),
                            spec.head_dim()
                        )));
                    }
                    let r = replacement.cast::<T>();
                    let slot = &mut hooks.patch[idx(*head)];
                    if let Some(prev) = slot {
                        if *prev != r {
                            return Err(Error::Plan(format!(
                                "two different patches target head {head}"
                            )));
                        }
                    }
                    *slot = Some(r);
                }
                Directive::PruneHeads { heads } => {
                    for &h in heads {
                        spec.check_head(h)?;
                        hooks.prune[idx(h)] = true;
                    }
                }
                Directive::ScaleHead { head, alpha } => {
                    spec.check_head(*head)?;
                    if !alpha.is_finite() {
                        return Err(Error::Plan(format!("non-finite scale for {head}")));
                    }
                    let a = T::lit(*alpha);
                    let slot = &mut hooks.scale[idx(*head)];
                    if let Some(prev) = slot {
                        if *prev != a {
                            return Err(Error::Plan(format!(
                                "contradictory scale factors for head {head}"
                            )));
                        }
                    }
                    *slot = Some(a);
                }
            }
        }
        for id in spec.all_heads() {
            let i = idx(id);
            if hooks.patch[i].is_some() && (hooks.prune[i] || hooks.scale[i].is_some()) {
                hooks
                    .conflicts
                    .push(format!("head {id}: patch overrides prune/scale"));
            } else if hooks.prune[i] && hooks.scale[i].is_some() {
                hooks.conflicts.push(format!("head {id}: prune overrides scale"));
            }
        }
        for c in &hooks.conflicts {
            log::warn!("intervention conflict: {c}");
        }
        Ok(hooks)
    }

    /// Runs the model on `tokens` under `plan`. Per-layer quantities are kept
    /// only when `record` is set; logits are always returned.
    pub fn forward(&self, tokens: &[usize], plan: &InterventionPlan, record: bool) -> Result<RunTrace<T>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let spec = &self.spec;
        let d = spec.d_model;
        let dh = spec.head_dim();
        let m = spec.heads;
        let hooks = self.compile(plan, n)?;
        let w = &self.weights;
        let eps = T::lit(spec.ln_eps);
        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();

        let mut x = Tensor::<T>::zeros(&[n, d]);
        for (i, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, &e), &p) in row.iter_mut().zip(w.embed.row(tok)).zip(w.pos.row(i)) {
                *o = e + p;
            }
        }
        x.ensure_finite("embedding")?;
        let embedded = record.then(|| x.clone());
        let mut layers = Vec::with_capacity(if record { spec.layers } else { 0 });

        for (li, lw) in w.layers.iter().enumerate() {
            let attn_in = if spec.use_layer_norm {
                tensor::layer_norm_rows(&x, &lw.ln1_gain, &lw.ln1_bias, eps)?
            } else {
                x.clone()
            };
            let mut attn_weights = Vec::with_capacity(m);
            let mut head_outs = Vec::with_capacity(m);
            for h in 0..m {
                let slot = li * m + h;
                let q = matmul(&attn_in, &lw.w_q[h])?;
                let k = matmul(&attn_in, &lw.w_k[h])?;
                let v = matmul(&attn_in, &lw.w_v[h])?;
                let scores = matmul(&q, &k.transpose()?)?.scale(inv_sqrt)?;
                let mut s = softmax_causal(&scores)?;
                for (query, keys, renorm) in &hooks.blocks[slot] {
                    let row = s.row_mut(*query);
                    for &kp in keys {
                        row[kp] = T::zero();
                    }
                    if *renorm {
                        let mut total = T::zero();
                        for &val in row.iter() {
                            total = total + val;
                        }
                        if total > T::zero() {
                            for val in row.iter_mut() {
                                *val = *val / total;
                            }
                        }
                    }
                }
                let mut out = matmul(&s, &v)?;
                if let Some(a) = hooks.scale[slot] {
                    out = out.scale(a)?;
                }
                if hooks.prune[slot] {
                    out = Tensor::zeros(&[n, dh]);
                }
                if let Some(p) = &hooks.patch[slot] {
                    out = p.clone();
                }
                attn_weights.push(s);
                head_outs.push(out);
            }
            let concat = Tensor::hcat(&head_outs)?;
            let mut a = matmul(&concat, &lw.w_o)?;
            for &p in &hooks.knock_mha[li] {
                a.row_mut(p).iter_mut().for_each(|v| *v = T::zero());
            }
            let mid = x.add(&a)?;
            let ffn_in = if spec.use_layer_norm {
                tensor::layer_norm_rows(&mid, &lw.ln2_gain, &lw.ln2_bias, eps)?
            } else {
                mid.clone()
            };
            let pre = matmul(&ffn_in, &lw.w_1)?;
            let act = match spec.activation {
                Activation::Gelu => tensor::gelu(&pre)?,
                Activation::Relu => tensor::relu(&pre)?,
            };
            let mut f = matmul(&act, &lw.w_2)?;
            for &p in &hooks.knock_ffn[li] {
                f.row_mut(p).iter_mut().for_each(|v| *v = T::zero());
            }
            let next = mid.add(&f)?;
            if record {
                layers.push(LayerTrace {
                    attn: attn_weights,
                    heads: head_outs,
                    mha: a,
                    ffn: f,
                    hidden: next.clone(),
                });
            }
            x = next;
        }

        let final_hidden = x.row(n - 1).to_vec();
        let logits = self.readout(&final_hidden)?;
        let probs = tensor::softmax_rows(&Tensor::matrix(1, logits.len(), logits.clone())?)?.into_data();
        Ok(RunTrace {
            tokens: tokens.to_vec(),
            embedded,
            layers,
            final_hidden,
            logits,
            probs,
            conflicts: hooks.conflicts,
        })
    }
}

impl Model<f32> {
    /// Gaussian-initialized model for tests and smoke runs.
    pub fn random(spec: ModelSpec, seed: u64, scale: f32) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::<f32>::zeros(&spec);
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for name in names {
            let is_norm = name.contains("ln");
            let slot = w.slot_mut(&name).expect("known tensor");
            for v in slot.iter_mut() {
                let g: f32 = rng.gen_range(-1.0..1.0);
                *v = if is_norm { 1.0 + 0.1 * g } else { scale * g };
            }
        }
        Model::new(spec, w)
    }
}
