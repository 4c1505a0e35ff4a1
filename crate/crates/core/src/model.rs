//! A small fine-grained Mixture-of-Experts transformer.
//!
//! Each block is `x -> x + attn(norm(x)) -> x + moe(norm(x))`. The MoE
//! sublayer is either routed (top-K over `N` routing experts plus always-on
//! shared experts) or condensed (a fixed set of experts with fixed gates and
//! no router, see [`crate::condense`]).
//!
//! A routed layer on its own computes
//! `h = Σ_i g_i E_i(x) + Σ_s E_s(x) + x` with `g_i = softmax(x·e)_i` for the
//! top-K scores and zero elsewhere. Inside the model the experts and router
//! see the RMS-normalised stream while the residual carries the raw stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condense::CondensedLayer;
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_in_place, topk_slice, vec_mat_into, Tensor};

pub type TokenId = u32;

pub(crate) const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub expert_inner: usize,
    pub num_blocks: usize,
    pub num_routing_experts: usize,
    pub num_shared_experts: usize,
    pub k_active: usize,
    pub max_seq_len: usize,
    pub attention: bool,
    /// Renormalise the top-K gates to sum to one. Off by default.
    #[serde(default)]
    pub renormalize_gates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_size: 32,
            expert_inner: 16,
            num_blocks: 8,
            num_routing_experts: 16,
            num_shared_experts: 1,
            k_active: 2,
            max_seq_len: 128,
            attention: true,
            renormalize_gates: false,
        }
    }
}

impl ModelConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("expert_inner", self.expert_inner),
            ("num_blocks", self.num_blocks),
            ("num_routing_experts", self.num_routing_experts),
            ("num_shared_experts", self.num_shared_experts),
            ("k_active", self.k_active),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.k_active > self.num_routing_experts {
            errs.push(format!(
                "k_active ({}) must not exceed num_routing_experts ({})",
                self.k_active, self.num_routing_experts
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn expert_params(&self) -> u64 {
        3 * (self.hidden_size * self.expert_inner) as u64
    }
}

/// Gated SiLU feed-forward expert: `E(x) = (silu(x·Wg) ⊙ (x·Wu))·Wd`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMlp {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl ExpertMlp {
    pub fn new(w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Result<Self> {
        let [d, f] = match w_gate.shape() {
            [d, f] => [*d, *f],
            s => return Err(Error::shape(format!("w_gate must be a matrix, got {s:?}"))),
        };
        w_up.expect_shape(&[d, f], "w_up")?;
        w_down.expect_shape(&[f, d], "w_down")?;
        Ok(Self { w_gate, w_up, w_down })
    }

    pub fn zeros(d: usize, f: usize) -> Self {
        Self { w_gate: Tensor::zeros(&[d, f]), w_up: Tensor::zeros(&[d, f]), w_down: Tensor::zeros(&[f, d]) }
    }

    pub fn random(d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        let s_in = 1.0 / (d as f32).sqrt();
        let s_out = 1.0 / (f as f32).sqrt();
        Self {
            w_gate: Tensor::randn(&[d, f], s_in, rng),
            w_up: Tensor::randn(&[d, f], s_in, rng),
            w_down: Tensor::randn(&[f, d], s_out, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn inner_size(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub fn num_params(&self) -> u64 {
        (self.w_gate.numel() + self.w_up.numel() + self.w_down.numel()) as u64
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.hidden_size()];
        let mut scratch = ExpertScratch::new(self.inner_size());
        self.accumulate(x, 1.0, &mut scratch, &mut out);
        out
    }

    /// `out += scale · E(x)`.
    pub(crate) fn accumulate(&self, x: &[f32], scale: f32, s: &mut ExpertScratch, out: &mut [f32]) {
        let f = self.inner_size();
        let d = self.hidden_size();
        vec_mat_into(x, self.w_gate.data(), f, &mut s.gate);
        vec_mat_into(x, self.w_up.data(), f, &mut s.up);
        for (g, u) in s.gate.iter_mut().zip(&s.up) {
            *g = silu(*g) * u;
        }
        s.down.resize(d, 0.0);
        vec_mat_into(&s.gate, self.w_down.data(), d, &mut s.down);
        for (o, v) in out.iter_mut().zip(&s.down) {
            *o += scale * v;
        }
    }

    pub(crate) fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_gate, &self.w_up, &self.w_down]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_gate, &mut self.w_up, &mut self.w_down]
    }
}

pub(crate) struct ExpertScratch {
    gate: Vec<f32>,
    up: Vec<f32>,
    down: Vec<f32>,
}

impl ExpertScratch {
    pub(crate) fn new(f: usize) -> Self {
        Self { gate: vec![0.0; f], up: vec![0.0; f], down: Vec::new() }
    }
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedMoeLayer {
    pub experts: Vec<ExpertMlp>,
    pub shared: Vec<ExpertMlp>,
    /// Row `i` is the centroid `e_i` of routing expert `i`.
    pub centroids: Tensor,
    pub k_active: usize,
    pub renormalize: bool,
}

/// Per-token routing decision of a routed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Dense gate vector of length `N`; exactly `K` entries are nonzero.
    pub gates: Vec<f32>,
    /// Selected experts, highest score first.
    pub selected: Vec<usize>,
}

impl RoutedMoeLayer {
    pub fn new(experts: Vec<ExpertMlp>, shared: Vec<ExpertMlp>, centroids: Tensor, k_active: usize) -> Result<Self> {
        let n = experts.len();
        if n == 0 || shared.is_empty() {
            return Err(Error::arg("a routed layer needs at least one routing and one shared expert"));
        }
        if k_active == 0 || k_active > n {
            return Err(Error::arg(format!("k_active must be in 1..={n}, got {k_active}")));
        }
        let d = experts[0].hidden_size();
        centroids.expect_shape(&[n, d], "centroids")?;
        if experts.iter().chain(&shared).any(|e| e.hidden_size() != d) {
            return Err(Error::shape("experts disagree on hidden size"));
        }
        Ok(Self { experts, shared, centroids, k_active, renormalize: false })
    }

    pub fn random(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (config.hidden_size, config.expert_inner);
        let experts = (0..config.num_routing_experts).map(|_| ExpertMlp::random(d, f, rng)).collect();
        let shared = (0..config.num_shared_experts).map(|_| ExpertMlp::random(d, f, rng)).collect();
        let centroids = Tensor::randn(&[config.num_routing_experts, d], 1.0 / (d as f32).sqrt(), rng);
        Self { experts, shared, centroids, k_active: config.k_active, renormalize: config.renormalize_gates }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Token-to-expert affinities `s_i = softmax_i(x·e_i)`.
    pub fn gate_scores(&self, x: &[f32]) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(Tensor::from_vec(self.scores(x)))
    }

    pub(crate) fn scores(&self, x: &[f32]) -> Vec<f32> {
        let mut s: Vec<f32> = (0..self.num_experts()).map(|i| dot(x, self.centroids.row(i))).collect();
        let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        s.iter_mut().for_each(|v| *v = (*v - max).exp());
        // sum in value order so relabelling experts cannot change a single bit
        let mut sorted = s.clone();
        sorted.sort_by(f32::total_cmp);
        let total: f32 = sorted.iter().sum();
        s.iter_mut().for_each(|v| *v /= total);
        s
    }

    pub fn route(&self, x: &[f32]) -> Result<Routing> {
        self.check_input(x)?;
        Ok(self.route_unchecked(x))
    }

    pub(crate) fn route_unchecked(&self, x: &[f32]) -> Routing {
        let scores = self.scores(x);
        let selected = topk_slice(&scores, self.k_active);
        let mut gates = vec![0.0; scores.len()];
        if self.renormalize {
            let total: f32 = selected.iter().map(|&i| scores[i]).sum();
            for &i in &selected {
                gates[i] = scores[i] / total;
            }
        } else {
            for &i in &selected {
                gates[i] = scores[i];
            }
        }
        Routing { gates, selected }
    }

    /// Full routed output `h = Σ g_i E_i(x) + Σ E_s(x) + x`, plus the gate vector.
    pub fn routed_forward(&self, x: &[f32]) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let routing = self.mix_into(x, &mut h, &mut ExpertScratch::new(self.experts[0].inner_size()));
        Ok((Tensor::from_vec(h), Tensor::from_vec(routing.gates)))
    }

    /// `out += Σ g_i E_i(x) + Σ E_s(x)`; returns the routing used.
    pub(crate) fn mix_into(&self, x: &[f32], out: &mut [f32], scratch: &mut ExpertScratch) -> Routing {
        let routing = self.route_unchecked(x);
        for &i in &routing.selected {
            self.experts[i].accumulate(x, routing.gates[i], scratch, out);
        }
        for e in &self.shared {
            e.accumulate(x, 1.0, scratch, out);
        }
        routing
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.hidden_size() {
            return Err(Error::shape(format!(
                "token vector has length {}, layer expects {}",
                x.len(),
                self.hidden_size()
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> u64 {
        self.experts.iter().chain(&self.shared).map(ExpertMlp::num_params).sum::<u64>() + self.centroids.numel() as u64
    }
}

/// Free-function form of [`RoutedMoeLayer::gate_scores`].
pub fn gate_scores(x: &Tensor, layer: &RoutedMoeLayer) -> Result<Tensor> {
    layer.gate_scores(x.data())
}

/// Free-function form of [`RoutedMoeLayer::routed_forward`].
pub fn routed_forward(x: &Tensor, layer: &RoutedMoeLayer) -> Result<(Tensor, Tensor)> {
    layer.routed_forward(x.data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl Attention {
    fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f32).sqrt();
        Self {
            wq: Tensor::randn(&[d, d], s, rng),
            wk: Tensor::randn(&[d, d], s, rng),
            wv: Tensor::randn(&[d, d], s, rng),
            wo: Tensor::randn(&[d, d], s, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
        }
    }

    /// Single-head causal self-attention over `a[T×d]`; returns `out[T×d]`.
    fn forward(&self, a: &[f32], t: usize, d: usize) -> Vec<f32> {
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for p in 0..t {
            let row = &a[p * d..(p + 1) * d];
            vec_mat_into(row, self.wq.data(), d, &mut q[p * d..(p + 1) * d]);
            vec_mat_into(row, self.wk.data(), d, &mut k[p * d..(p + 1) * d]);
            vec_mat_into(row, self.wv.data(), d, &mut v[p * d..(p + 1) * d]);
        }
        let scale = 1.0 / (d as f32).sqrt();
        let mut out = vec![0.0; t * d];
        let mut att = vec![0.0f32; t];
        let mut o = vec![0.0f32; d];
        for p in 0..t {
            let qp = &q[p * d..(p + 1) * d];
            for j in 0..=p {
                att[j] = dot(qp, &k[j * d..(j + 1) * d]) * scale;
            }
            softmax_in_place(&mut att[..=p]);
            o.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..=p {
                let w = att[j];
                for (oi, vi) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *oi += w * vi;
                }
            }
            vec_mat_into(&o, self.wo.data(), d, &mut out[p * d..(p + 1) * d]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MoeLayer {
    Routed(RoutedMoeLayer),
    Condensed(CondensedLayer),
}

impl MoeLayer {
    pub fn as_view(&self) -> LayerView<'_> {
        match self {
            MoeLayer::Routed(l) => LayerView::Routed(l),
            MoeLayer::Condensed(l) => LayerView::Condensed(l),
        }
    }

    pub fn is_routed(&self) -> bool {
        matches!(self, MoeLayer::Routed(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MoeLayer::Routed(_) => "routed",
            MoeLayer::Condensed(_) => "condensed",
        }
    }
}

/// Borrowed view of a block's MoE sublayer. Lets callers run the model with
/// some layers swapped for tentative condensations without cloning weights.
#[derive(Clone, Copy, Debug)]
pub enum LayerView<'a> {
    Routed(&'a RoutedMoeLayer),
    Condensed(&'a CondensedLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub attention: Option<Attention>,
    pub moe_norm: Tensor,
    pub layer: MoeLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Everything the calibration and selection code needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Next-token logits, `T×vocab`.
    pub logits: Tensor,
    /// Residual stream entering each block's MoE sublayer, `T×d`.
    pub moe_inputs: Vec<Tensor>,
    /// Residual stream leaving each block's MoE sublayer, `T×d`.
    pub moe_outputs: Vec<Tensor>,
    /// Dense gate values `T×N` for routed blocks, `None` for condensed ones.
    pub gates: Vec<Option<Tensor>>,
}

impl MoeModel {
    /// Random initialisation from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;
        let token_embedding = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_seq_len, d], 0.1, &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                attn_norm: Tensor::filled(&[d], 1.0),
                attention: config.attention.then(|| Attention::random(d, &mut rng)),
                moe_norm: Tensor::filled(&[d], 1.0),
                layer: MoeLayer::Routed(RoutedMoeLayer::random(&config, &mut rng)),
            })
            .collect();
        let lm_head = Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f32).sqrt(), &mut rng);
        Ok(Self { token_embedding, position_embedding, blocks, final_norm: Tensor::filled(&[d], 1.0), lm_head, config })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn routed_layer(&self, index: usize) -> Result<&RoutedMoeLayer> {
        match &self.blocks.get(index).ok_or_else(|| Error::arg(format!("no block {index}")))?.layer {
            MoeLayer::Routed(l) => Ok(l),
            MoeLayer::Condensed(_) => Err(Error::State(format!("layer {index} is already condensed"))),
        }
    }

    pub fn condensed_layers(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&b| !self.blocks[b].layer.is_routed()).collect()
    }

    pub fn views(&self) -> Vec<LayerView<'_>> {
        self.blocks.iter().map(|b| b.layer.as_view()).collect()
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Next-token logits for every position, `T×vocab`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.forward_with(&self.views(), tokens)
    }

    pub fn forward_trace(&self, tokens: &[TokenId]) -> Result<ForwardTrace> {
        self.forward_trace_with(&self.views(), tokens)
    }

    /// Forward pass where block `b` uses `layers[b]` in place of its own MoE sublayer.
    pub fn forward_with(&self, layers: &[LayerView<'_>], tokens: &[TokenId]) -> Result<Tensor> {
        let mut x = self.embed(tokens)?;
        self.run_blocks(layers, &mut x, tokens.len(), 0, None);
        Ok(self.head(&x, tokens.len()))
    }

    pub fn forward_trace_with(&self, layers: &[LayerView<'_>], tokens: &[TokenId]) -> Result<ForwardTrace> {
        let t = tokens.len();
        let mut x = self.embed(tokens)?;
        let mut cap = Capture::default();
        self.run_blocks(layers, &mut x, t, 0, Some(&mut cap));
        let d = self.config.hidden_size;
        let to_t = |v: Vec<f32>| Tensor::new(vec![t, d], v).expect("capture shape");
        Ok(ForwardTrace {
            logits: self.head(&x, t),
            moe_inputs: cap.inputs.into_iter().map(to_t).collect(),
            moe_outputs: cap.outputs.into_iter().map(to_t).collect(),
            gates: cap
                .gates
                .into_iter()
                .map(|g| g.map(|(n, v)| Tensor::new(vec![t, n], v).expect("gate shape")))
                .collect(),
        })
    }

    /// Finish a forward pass from the residual stream entering block
    /// `block`'s MoE sublayer (`moe_input` is `T×d`).
    pub fn resume_from_moe(&self, layers: &[LayerView<'_>], block: usize, moe_input: &Tensor) -> Tensor {
        let t = moe_input.rows();
        let mut x = moe_input.data().to_vec();
        self.moe_sublayer(block, layers[block], &mut x, t, None);
        self.run_blocks(layers, &mut x, t, block + 1, None);
        self.head(&x, t)
    }

    fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        let d = self.config.hidden_size;
        let mut x = vec![0.0; tokens.len() * d];
        for (p, &tok) in tokens.iter().enumerate() {
            let row = &mut x[p * d..(p + 1) * d];
            for ((o, e), q) in
                row.iter_mut().zip(self.token_embedding.row(tok as usize)).zip(self.position_embedding.row(p))
            {
                *o = e + q;
            }
        }
        Ok(x)
    }

    fn run_blocks(
        &self,
        layers: &[LayerView<'_>],
        x: &mut [f32],
        t: usize,
        from: usize,
        mut cap: Option<&mut Capture>,
    ) {
        let d = self.config.hidden_size;
        for b in from..self.blocks.len() {
            let block = &self.blocks[b];
            if let Some(attn) = &block.attention {
                let mut a = x.to_vec();
                for p in 0..t {
                    rms_norm_in_place(&mut a[p * d..(p + 1) * d], block.attn_norm.data());
                }
                let o = attn.forward(&a, t, d);
                x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
            }
            self.moe_sublayer(b, layers[b], x, t, cap.as_deref_mut());
        }
    }

    fn moe_sublayer(&self, b: usize, layer: LayerView<'_>, x: &mut [f32], t: usize, cap: Option<&mut Capture>) {
        let d = self.config.hidden_size;
        let norm = self.blocks[b].moe_norm.data();
        let mut u = vec![0.0f32; d];
        let mut scratch = ExpertScratch::new(self.config.expert_inner);
        let mut gates = match layer {
            LayerView::Routed(l) if cap.is_some() => Some(Vec::with_capacity(t * l.num_experts())),
            _ => None,
        };
        let input = cap.is_some().then(|| x.to_vec());
        for p in 0..t {
            let row = &mut x[p * d..(p + 1) * d];
            u.copy_from_slice(row);
            rms_norm_in_place(&mut u, norm);
            match layer {
                LayerView::Routed(l) => {
                    let r = l.mix_into(&u, row, &mut scratch);
                    if let Some(g) = gates.as_mut() {
                        g.extend_from_slice(&r.gates);
                    }
                }
                LayerView::Condensed(l) => l.mix_into(&u, row, &mut scratch),
            }
        }
        if let Some(cap) = cap {
            cap.inputs.push(input.expect("captured input"));
            cap.outputs.push(x.to_vec());
            cap.gates.push(gates.map(|g| {
                let n = g.len() / t.max(1);
                (n, g)
            }));
        }
    }

    fn head(&self, x: &[f32], t: usize) -> Tensor {
        let d = self.config.hidden_size;
        let v = self.config.vocab_size;
        let mut logits = vec![0.0; t * v];
        let mut z = vec![0.0f32; d];
        for p in 0..t {
            z.copy_from_slice(&x[p * d..(p + 1) * d]);
            rms_norm_in_place(&mut z, self.final_norm.data());
            vec_mat_into(&z, self.lm_head.data(), v, &mut logits[p * v..(p + 1) * v]);
        }
        Tensor::new(vec![t, v], logits).expect("logit shape")
    }

    /// All parameter tensors under their canonical names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{b}.attn_norm"), &block.attn_norm));
            if let Some(a) = &block.attention {
                for (n, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                    out.push((format!("blocks.{b}.attn.{n}"), t));
                }
            }
            out.push((format!("blocks.{b}.moe_norm"), &block.moe_norm));
            fn push_expert<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, e: &'a ExpertMlp) {
                for (n, t) in EXPERT_TENSOR_NAMES.iter().zip(e.tensors()) {
                    out.push((format!("{prefix}.{n}"), t));
                }
            }
            match &block.layer {
                MoeLayer::Routed(l) => {
                    out.push((format!("blocks.{b}.moe.centroids"), &l.centroids));
                    for (i, e) in l.experts.iter().enumerate() {
                        push_expert(&mut out, format!("blocks.{b}.moe.experts.{i}"), e);
                    }
                    for (i, e) in l.shared.iter().enumerate() {
                        push_expert(&mut out, format!("blocks.{b}.moe.shared.{i}"), e);
                    }
                }
                MoeLayer::Condensed(l) => {
                    for (j, e) in l.experts.iter().enumerate() {
                        push_expert(&mut out, format!("blocks.{b}.moe.kept.{j}"), e);
                    }
                    out.push((format!("blocks.{b}.moe.fixed_gates"), &l.fixed_gates));
                    for (i, e) in l.shared.iter().enumerate() {
                        push_expert(&mut out, format!("blocks.{b}.moe.shared.{i}"), e);
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for block in &mut self.blocks {
            out.push(&mut block.attn_norm);
            if let Some(a) = &mut block.attention {
                out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            }
            out.push(&mut block.moe_norm);
            match &mut block.layer {
                MoeLayer::Routed(l) => {
                    out.push(&mut l.centroids);
                    for e in l.experts.iter_mut().chain(l.shared.iter_mut()) {
                        out.extend(e.tensors_mut());
                    }
                }
                MoeLayer::Condensed(l) => {
                    for e in &mut l.experts {
                        out.extend(e.tensors_mut());
                    }
                    out.push(&mut l.fixed_gates);
                    for e in &mut l.shared {
                        out.extend(e.tensors_mut());
                    }
                }
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }
}

pub(crate) const EXPERT_TENSOR_NAMES: [&str; 3] = ["w_gate", "w_up", "w_down"];

#[derive(Default)]
struct Capture {
    inputs: Vec<Vec<f32>>,
    outputs: Vec<Vec<f32>>,
    gates: Vec<Option<(usize, Vec<f32>)>>,
}

pub(crate) fn rms_norm_in_place(x: &mut [f32], gain: &[f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let r = 1.0 / (ms + NORM_EPS).sqrt();
    for (v, g) in x.iter_mut().zip(gain) {
        *v = *v * r * g;
    }
}

pub(crate) fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let mut v = x.to_vec();
    rms_norm_in_place(&mut v, gain);
    v
}

/// Calibration statistics for one routed layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub activation_count: Vec<u64>,
    pub gate_sum: Vec<f64>,
}

impl GateStats {
    pub fn new(num_experts: usize) -> Self {
        Self { activation_count: vec![0; num_experts], gate_sum: vec![0.0; num_experts] }
    }

    pub fn num_experts(&self) -> usize {
        self.activation_count.len()
    }

    /// Add one token's dense gate vector.
    pub fn record(&mut self, gates: &[f32]) {
        for (i, &g) in gates.iter().enumerate() {
            if g != 0.0 {
                self.activation_count[i] += 1;
                self.gate_sum[i] += g as f64;
            }
        }
    }

    pub fn merge(&mut self, other: &GateStats) {
        for i in 0..self.num_experts() {
            self.activation_count[i] += other.activation_count[i];
            self.gate_sum[i] += other.gate_sum[i];
        }
    }

    pub fn total_activations(&self) -> u64 {
        self.activation_count.iter().sum()
    }

    /// Mean nonzero gate of expert `i`, `None` if it was never routed to.
    pub fn mean_gate(&self, i: usize) -> Option<f64> {
        (self.activation_count[i] > 0).then(|| self.gate_sum[i] / self.activation_count[i] as f64)
    }
}

/// Accumulate gate statistics for routed layer `layer_index` over a calibration set.
pub fn collect_gate_stats(calibration: &[Vec<TokenId>], model: &MoeModel, layer_index: usize) -> Result<GateStats> {
    let layer = model.routed_layer(layer_index)?;
    let mut stats = GateStats::new(layer.num_experts());
    for seq in calibration {
        let trace = model.forward_trace(seq)?;
        let gates = trace.gates[layer_index].as_ref().expect("routed layer has gates");
        for t in 0..gates.rows() {
            stats.record(gates.row(t));
        }
    }
    Ok(stats)
}

/// Gate statistics for every block in one sweep; `None` for condensed blocks.
pub fn collect_all_gate_stats(calibration: &[Vec<TokenId>], model: &MoeModel) -> Result<Vec<Option<GateStats>>> {
    let mut all: Vec<Option<GateStats>> = model
        .blocks
        .iter()
        .map(|b| match &b.layer {
            MoeLayer::Routed(l) => Some(GateStats::new(l.num_experts())),
            MoeLayer::Condensed(_) => None,
        })
        .collect();
    for seq in calibration {
        let trace = model.forward_trace(seq)?;
        for (stats, gates) in all.iter_mut().zip(&trace.gates) {
            if let (Some(s), Some(g)) = (stats.as_mut(), gates.as_ref()) {
                for t in 0..g.rows() {
                    s.record(g.row(t));
                }
            }
        }
    }
    Ok(all)
}
