//! Reverse-mode gradients for [`MoeModel`], computed in f64.
//!
//! The engine works on an f64 copy of every parameter tensor, laid out in
//! [`MoeModel::named_tensors`] order. Routed layers treat the top-K choice
//! as a constant per token: gradients reach the selected experts and flow
//! into the router only through the selected scores (plus the optional
//! load-balancing term, which touches every score).

use crate::error::{Error, Result};
use crate::model::{MoeLayer, MoeModel, TokenId};
use crate::tensor::topk_slice;

use super::ParamMask;

const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ExpertIdx {
    gate: usize,
    up: usize,
    down: usize,
}

#[derive(Clone, Debug)]
enum MoeIdx {
    Routed { centroids: usize, experts: Vec<ExpertIdx>, shared: Vec<ExpertIdx>, k: usize, renormalize: bool },
    Condensed { kept: Vec<ExpertIdx>, gates: usize, shared: Vec<ExpertIdx> },
}

#[derive(Clone, Debug)]
struct BlockIdx {
    attn_norm: usize,
    attn: Option<[usize; 4]>,
    moe_norm: usize,
    moe: MoeIdx,
}

/// Where each parameter lives in the flat tensor list.
#[derive(Clone, Debug)]
struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    final_norm: usize,
    head: usize,
    routed_layers: usize,
}

impl Layout {
    fn of(model: &MoeModel) -> Self {
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let tok = take();
        let pos = take();
        let mut blocks = Vec::with_capacity(model.num_blocks());
        let mut routed_layers = 0;
        for block in &model.blocks {
            let attn_norm = take();
            let attn = block.attention.as_ref().map(|_| [take(), take(), take(), take()]);
            let moe_norm = take();
            let expert = |take: &mut dyn FnMut() -> usize| ExpertIdx { gate: take(), up: take(), down: take() };
            let moe = match &block.layer {
                MoeLayer::Routed(l) => {
                    routed_layers += 1;
                    let centroids = take();
                    let experts = (0..l.experts.len()).map(|_| expert(&mut take)).collect();
                    let shared = (0..l.shared.len()).map(|_| expert(&mut take)).collect();
                    MoeIdx::Routed { centroids, experts, shared, k: l.k_active, renormalize: l.renormalize }
                }
                MoeLayer::Condensed(l) => {
                    let kept = (0..l.experts.len()).map(|_| expert(&mut take)).collect();
                    let gates = take();
                    let shared = (0..l.shared.len()).map(|_| expert(&mut take)).collect();
                    MoeIdx::Condensed { kept, gates, shared }
                }
            };
            blocks.push(BlockIdx { attn_norm, attn, moe_norm, moe });
        }
        let final_norm = take();
        let head = take();
        Self { tok, pos, blocks, final_norm, head, routed_layers }
    }
}

/// f64 parameters of a model plus the structure needed to differentiate it.
#[derive(Clone, Debug)]
pub struct Engine {
    layout: Layout,
    names: Vec<String>,
    /// Parameter tensors in [`MoeModel::named_tensors`] order.
    pub params: Vec<Vec<f64>>,
    d: usize,
    f: usize,
    vocab: usize,
    max_seq_len: usize,
}

/// Loss of one batch and the gradients of the trainable tensors.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Mean next-token cross-entropy in nats.
    pub loss: f64,
    /// Load-balancing term (already scaled by its coefficient).
    pub aux_loss: f64,
    /// `Some` exactly for trainable tensors, same order as the parameters.
    pub grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn objective(&self) -> f64 {
        self.loss + self.aux_loss
    }
}

struct ExpertEval {
    idx: ExpertIdx,
    scale: f64,
    /// Position in `expert_evals` order of routed experts, `None` for shared.
    slot: Slot,
    hg: Vec<f64>,
    hu: Vec<f64>,
    act: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Slot {
    Routed(usize),
    Kept(usize),
    Shared,
}

struct AttnCache {
    a: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>,
    o: Vec<f64>,
}

struct BlockCache {
    x_in: Vec<f64>,
    attn: Option<AttnCache>,
    x_mid: Vec<f64>,
    u: Vec<f64>,
    r_moe: Vec<f64>,
    /// Router softmax per token (routed layers only), `T×N`.
    scores: Vec<f64>,
    selected: Vec<Vec<usize>>,
    gates: Vec<Vec<f64>>,
    evals: Vec<Vec<ExpertEval>>,
    /// Mean router score per expert over the sequence.
    fractions: Vec<f64>,
}

struct SeqCache {
    inputs: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    x_final: Vec<f64>,
    z: Vec<f64>,
    r_final: Vec<f64>,
    probs: Vec<f64>,
}

fn matvec(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// `dx += W·dy` for `W` of shape `len(dx)×len(dy)`.
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    for (d, row) in dx.iter_mut().zip(w.chunks_exact(dy.len())) {
        *d += row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
    for (xi, row) in x.iter().zip(dw.chunks_exact_mut(dy.len())) {
        for (g, d) in row.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    x.iter_mut().for_each(|v| *v /= sum);
}

fn rms_fwd(x: &[f64], g: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + EPS).sqrt();
    for ((o, v), gi) in out.iter_mut().zip(x).zip(g) {
        *o = v * r * gi;
    }
    r
}

fn rms_bwd(x: &[f64], g: &[f64], r: f64, dy: &[f64], dx: &mut [f64], dg: Option<&mut Vec<f64>>) {
    let s: f64 = x.iter().zip(g).zip(dy).map(|((a, b), c)| a * b * c).sum();
    let c = r * r * r * s / x.len() as f64;
    for (((d, xi), gi), dyi) in dx.iter_mut().zip(x).zip(g).zip(dy) {
        *d += r * gi * dyi - xi * c;
    }
    if let Some(dg) = dg {
        for ((d, xi), dyi) in dg.iter_mut().zip(x).zip(dy) {
            *d += dyi * xi * r;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Engine {
    pub fn from_model(model: &MoeModel) -> Self {
        let named = model.named_tensors();
        let layout = Layout::of(model);
        debug_assert_eq!(layout.head + 1, named.len());
        Self {
            layout,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            params: named.iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect(),
            d: model.config.hidden_size,
            f: model.config.expert_inner,
            vocab: model.config.vocab_size,
            max_seq_len: model.config.max_seq_len,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Copy the listed tensors back into `model` (rounded to f32).
    pub fn write_back(&self, model: &mut MoeModel, which: &[bool]) {
        for ((t, p), &w) in model.tensors_mut().into_iter().zip(&self.params).zip(which) {
            if w {
                for (dst, &src) in t.data_mut().iter_mut().zip(p) {
                    *dst = src as f32;
                }
            }
        }
    }

    fn check_batch(&self, batch: &[Vec<TokenId>]) -> Result<usize> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut preds = 0;
        for seq in batch {
            if seq.len() < 2 {
                return Err(Error::arg("training sequences need at least two tokens"));
            }
            if seq.len() > self.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    seq.len(),
                    self.max_seq_len
                )));
            }
            if let Some(bad) = seq.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::Input(format!("token id {bad} out of range for vocab {}", self.vocab)));
            }
            preds += seq.len() - 1;
        }
        Ok(preds)
    }

    /// `(cross-entropy, aux)` for a batch without gradients.
    pub fn loss(&self, batch: &[Vec<TokenId>], aux_coef: f64) -> Result<(f64, f64)> {
        let preds = self.check_batch(batch)?;
        let mut ce = 0.0;
        let mut aux = 0.0;
        for seq in batch {
            let cache = self.forward(seq);
            ce += self.seq_nll(&cache, seq);
            aux += self.aux_value(&cache);
        }
        Ok((ce / preds as f64, aux_coef * aux / batch.len() as f64))
    }

    /// Top-K choices of every routed layer on every token of the batch.
    pub fn routing_signature(&self, batch: &[Vec<TokenId>]) -> Vec<usize> {
        let mut out = Vec::new();
        for seq in batch {
            let cache = self.forward(seq);
            for b in &cache.blocks {
                for s in &b.selected {
                    out.extend(s);
                }
            }
        }
        out
    }

    /// Loss and gradients of `CE + aux_coef·balance` for the tensors `mask` marks trainable.
    pub fn loss_and_grads(&self, batch: &[Vec<TokenId>], mask: &ParamMask, aux_coef: f64) -> Result<Gradients> {
        if mask.len() != self.params.len() {
            return Err(Error::arg(format!("mask covers {} tensors, model has {}", mask.len(), self.params.len())));
        }
        let preds = self.check_batch(batch)?;
        let want = mask.flags();
        let mut grads: Vec<Option<Vec<f64>>> =
            self.params.iter().zip(want).map(|(p, &w)| w.then(|| vec![0.0; p.len()])).collect();
        let mut ce = 0.0;
        let mut aux = 0.0;
        let ce_w = 1.0 / preds as f64;
        let aux_w = aux_coef / batch.len() as f64;
        for seq in batch {
            let cache = self.forward(seq);
            ce += self.seq_nll(&cache, seq);
            aux += self.aux_value(&cache);
            self.backward(&cache, seq, ce_w, aux_w, &mut grads);
        }
        let loss = ce / preds as f64;
        let aux_loss = aux_coef * aux / batch.len() as f64;
        if !loss.is_finite() || !aux_loss.is_finite() {
            let tensor = self
                .params
                .iter()
                .position(|p| p.iter().any(|v| !v.is_finite()))
                .map_or_else(|| "logits".to_string(), |i| self.names[i].clone());
            return Err(Error::Numeric { tensor, detail: format!("non-finite loss {loss}") });
        }
        Ok(Gradients { loss, aux_loss, grads })
    }

    fn seq_nll(&self, cache: &SeqCache, seq: &[TokenId]) -> f64 {
        let v = self.vocab;
        (0..cache.inputs.len()).map(|p| -cache.probs[p * v + seq[p + 1] as usize].max(f64::MIN_POSITIVE).ln()).sum()
    }

    /// Per-sequence balance penalty averaged over routed layers (unscaled).
    fn aux_value(&self, cache: &SeqCache) -> f64 {
        if self.layout.routed_layers == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for b in &cache.blocks {
            if b.fractions.is_empty() {
                continue;
            }
            let n = b.fractions.len() as f64;
            total += b.fractions.iter().map(|f| (f - 1.0 / n).powi(2)).sum::<f64>() / n;
        }
        total / self.layout.routed_layers as f64
    }

    fn expert_fwd(&self, idx: ExpertIdx, u: &[f64], scale: f64, slot: Slot) -> ExpertEval {
        let (d, f) = (self.d, self.f);
        let mut hg = vec![0.0; f];
        let mut hu = vec![0.0; f];
        matvec(u, &self.params[idx.gate], f, &mut hg);
        matvec(u, &self.params[idx.up], f, &mut hu);
        let act: Vec<f64> = hg.iter().zip(&hu).map(|(g, h)| g * sigmoid(*g) * h).collect();
        let mut y = vec![0.0; d];
        matvec(&act, &self.params[idx.down], d, &mut y);
        ExpertEval { idx, scale, slot, hg, hu, act, y }
    }

    fn forward(&self, seq: &[TokenId]) -> SeqCache {
        let d = self.d;
        let inputs = seq[..seq.len() - 1].to_vec();
        let t = inputs.len();
        let mut x = vec![0.0; t * d];
        for (p, &tok) in inputs.iter().enumerate() {
            let e = &self.params[self.layout.tok][tok as usize * d..(tok as usize + 1) * d];
            let q = &self.params[self.layout.pos][p * d..(p + 1) * d];
            for ((o, a), b) in x[p * d..(p + 1) * d].iter_mut().zip(e).zip(q) {
                *o = a + b;
            }
        }
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for bl in &self.layout.blocks {
            let x_in = x.clone();
            let attn = bl.attn.map(|w| {
                let c = self.attn_fwd(w, &self.params[bl.attn_norm], &x_in, t);
                let mut out = vec![0.0; d];
                for p in 0..t {
                    matvec(&c.o[p * d..(p + 1) * d], &self.params[w[3]], d, &mut out);
                    for (xi, oi) in x[p * d..(p + 1) * d].iter_mut().zip(&out) {
                        *xi += oi;
                    }
                }
                c
            });
            let x_mid = x.clone();
            let mut u = vec![0.0; t * d];
            let mut r_moe = vec![0.0; t];
            for p in 0..t {
                r_moe[p] = rms_fwd(&x_mid[p * d..(p + 1) * d], &self.params[bl.moe_norm], &mut u[p * d..(p + 1) * d]);
            }
            let mut scores = Vec::new();
            let mut selected = Vec::new();
            let mut gates = Vec::new();
            let mut evals = Vec::with_capacity(t);
            let mut fractions = Vec::new();
            for p in 0..t {
                let up = &u[p * d..(p + 1) * d];
                let mut ev = Vec::new();
                match &bl.moe {
                    MoeIdx::Routed { centroids, experts, shared, k, renormalize } => {
                        let n = experts.len();
                        let mut s = vec![0.0; n];
                        for (j, sj) in s.iter_mut().enumerate() {
                            *sj = dot(up, &self.params[*centroids][j * d..(j + 1) * d]);
                        }
                        softmax(&mut s);
                        let mut sel = topk_slice(&s, *k);
                        sel.sort_unstable();
                        let total: f64 = sel.iter().map(|&i| s[i]).sum();
                        let g: Vec<f64> = sel.iter().map(|&i| if *renormalize { s[i] / total } else { s[i] }).collect();
                        for (slot, (&i, &gi)) in sel.iter().zip(&g).enumerate() {
                            ev.push(self.expert_fwd(experts[i], up, gi, Slot::Routed(slot)));
                        }
                        for &e in shared {
                            ev.push(self.expert_fwd(e, up, 1.0, Slot::Shared));
                        }
                        scores.extend_from_slice(&s);
                        selected.push(sel);
                        gates.push(g);
                    }
                    MoeIdx::Condensed { kept, gates: gi, shared } => {
                        for (j, &e) in kept.iter().enumerate() {
                            ev.push(self.expert_fwd(e, up, self.params[*gi][j], Slot::Kept(j)));
                        }
                        for &e in shared {
                            ev.push(self.expert_fwd(e, up, 1.0, Slot::Shared));
                        }
                    }
                }
                let row = &mut x[p * d..(p + 1) * d];
                for e in &ev {
                    for (xi, yi) in row.iter_mut().zip(&e.y) {
                        *xi += e.scale * yi;
                    }
                }
                evals.push(ev);
            }
            if let MoeIdx::Routed { experts, .. } = &bl.moe {
                let n = experts.len();
                fractions = vec![0.0; n];
                for p in 0..t {
                    for (f, s) in fractions.iter_mut().zip(&scores[p * n..(p + 1) * n]) {
                        *f += s / t as f64;
                    }
                }
            }
            blocks.push(BlockCache { x_in, attn, x_mid, u, r_moe, scores, selected, gates, evals, fractions });
        }
        let v = self.vocab;
        let mut z = vec![0.0; t * d];
        let mut r_final = vec![0.0; t];
        let mut probs = vec![0.0; t * v];
        for p in 0..t {
            r_final[p] =
                rms_fwd(&x[p * d..(p + 1) * d], &self.params[self.layout.final_norm], &mut z[p * d..(p + 1) * d]);
            let row = &mut probs[p * v..(p + 1) * v];
            matvec(&z[p * d..(p + 1) * d], &self.params[self.layout.head], v, row);
            softmax(row);
        }
        SeqCache { inputs, blocks, x_final: x, z, r_final, probs }
    }

    fn attn_fwd(&self, w: [usize; 4], norm: &[f64], x: &[f64], t: usize) -> AttnCache {
        let d = self.d;
        let mut a = vec![0.0; t * d];
        let mut r = vec![0.0; t];
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for p in 0..t {
            let rows = p * d..(p + 1) * d;
            r[p] = rms_fwd(&x[rows.clone()], norm, &mut a[rows.clone()]);
            matvec(&a[rows.clone()], &self.params[w[0]], d, &mut q[rows.clone()]);
            matvec(&a[rows.clone()], &self.params[w[1]], d, &mut k[rows.clone()]);
            matvec(&a[rows.clone()], &self.params[w[2]], d, &mut v[rows]);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut pm = vec![0.0; t * t];
        let mut o = vec![0.0; t * d];
        for p in 0..t {
            let qp = &q[p * d..(p + 1) * d];
            let row = &mut pm[p * t..p * t + p + 1];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qp, &k[j * d..(j + 1) * d]) * scale;
            }
            softmax(row);
            let op = &mut o[p * d..(p + 1) * d];
            for (j, &w) in row.iter().enumerate() {
                for (oi, vi) in op.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *oi += w * vi;
                }
            }
        }
        AttnCache { a, r, q, k, v, p: pm, o }
    }

    fn expert_bwd(&self, e: &ExpertEval, u: &[f64], dy: &[f64], du: &mut [f64], grads: &mut [Option<Vec<f64>>]) {
        let f = self.f;
        if let Some(g) = grads[e.idx.down].as_mut() {
            outer_acc(&e.act, dy, g);
        }
        let mut dact = vec![0.0; f];
        matvec_t_acc(&self.params[e.idx.down], dy, &mut dact);
        let mut dhg = vec![0.0; f];
        let mut dhu = vec![0.0; f];
        for j in 0..f {
            let s = sigmoid(e.hg[j]);
            dhg[j] = dact[j] * e.hu[j] * s * (1.0 + e.hg[j] * (1.0 - s));
            dhu[j] = dact[j] * e.hg[j] * s;
        }
        if let Some(g) = grads[e.idx.gate].as_mut() {
            outer_acc(u, &dhg, g);
        }
        if let Some(g) = grads[e.idx.up].as_mut() {
            outer_acc(u, &dhu, g);
        }
        matvec_t_acc(&self.params[e.idx.gate], &dhg, du);
        matvec_t_acc(&self.params[e.idx.up], &dhu, du);
    }

    fn backward(&self, c: &SeqCache, seq: &[TokenId], ce_w: f64, aux_w: f64, grads: &mut [Option<Vec<f64>>]) {
        let (d, v) = (self.d, self.vocab);
        let t = c.inputs.len();
        let ly = &self.layout;
        // lowest block whose parameters (or anything below) need gradients
        let embed_wanted = grads[ly.tok].is_some() || grads[ly.pos].is_some();
        let first_block = if embed_wanted {
            0
        } else {
            match (0..ly.blocks.len()).find(|&b| self.block_wanted(b, grads)) {
                Some(b) => b,
                None if grads[ly.final_norm].is_none() && grads[ly.head].is_none() => return,
                None => ly.blocks.len(),
            }
        };

        let mut dx = vec![0.0; t * d];
        let mut dlog = vec![0.0; v];
        let mut dz = vec![0.0; d];
        for p in 0..t {
            dlog.copy_from_slice(&c.probs[p * v..(p + 1) * v]);
            dlog[seq[p + 1] as usize] -= 1.0;
            dlog.iter_mut().for_each(|g| *g *= ce_w);
            let zp = &c.z[p * d..(p + 1) * d];
            if let Some(g) = grads[ly.head].as_mut() {
                outer_acc(zp, &dlog, g);
            }
            dz.iter_mut().for_each(|g| *g = 0.0);
            matvec_t_acc(&self.params[ly.head], &dlog, &mut dz);
            let rows = p * d..(p + 1) * d;
            rms_bwd(
                &c.x_final[rows.clone()],
                &self.params[ly.final_norm],
                c.r_final[p],
                &dz,
                &mut dx[rows],
                grads[ly.final_norm].as_mut(),
            );
        }

        for b in (first_block..ly.blocks.len()).rev() {
            let bl = &ly.blocks[b];
            let bc = &c.blocks[b];
            // MoE sublayer: dx flows straight through the residual and into u
            let mut du = vec![0.0; t * d];
            let n = bc.fractions.len();
            let aux_grad: Vec<f64> = if n > 0 && aux_w != 0.0 {
                let nf = n as f64;
                bc.fractions
                    .iter()
                    .map(|f| aux_w / ly.routed_layers as f64 * 2.0 * (f - 1.0 / nf) / nf / t as f64)
                    .collect()
            } else {
                Vec::new()
            };
            let mut dy = vec![0.0; d];
            for p in 0..t {
                let rows = p * d..(p + 1) * d;
                let up = &bc.u[rows.clone()];
                let dxp = &dx[rows.clone()];
                let mut dgate_routed = vec![0.0; bc.selected.get(p).map_or(0, Vec::len)];
                for e in &bc.evals[p] {
                    match e.slot {
                        Slot::Routed(s) => dgate_routed[s] = dot(dxp, &e.y),
                        Slot::Kept(j) => {
                            if let MoeIdx::Condensed { gates, .. } = &bl.moe {
                                if let Some(g) = grads[*gates].as_mut() {
                                    g[j] += dot(dxp, &e.y);
                                }
                            }
                        }
                        Slot::Shared => {}
                    }
                    for (o, g) in dy.iter_mut().zip(dxp) {
                        *o = e.scale * g;
                    }
                    self.expert_bwd(e, up, &dy, &mut du[rows.clone()], grads);
                }
                if let MoeIdx::Routed { centroids, renormalize, .. } = &bl.moe {
                    let s = &bc.scores[p * n..(p + 1) * n];
                    let sel = &bc.selected[p];
                    let mut ds = if aux_grad.is_empty() { vec![0.0; n] } else { aux_grad.clone() };
                    if *renormalize {
                        let total: f64 = sel.iter().map(|&i| s[i]).sum();
                        let gd: f64 = bc.gates[p].iter().zip(&dgate_routed).map(|(g, dg)| g * dg).sum();
                        for (slot, &i) in sel.iter().enumerate() {
                            ds[i] += (dgate_routed[slot] - gd) / total;
                        }
                    } else {
                        for (slot, &i) in sel.iter().enumerate() {
                            ds[i] += dgate_routed[slot];
                        }
                    }
                    let sd: f64 = s.iter().zip(&ds).map(|(a, b)| a * b).sum();
                    let cen = &self.params[*centroids];
                    let mut cgrad = grads[*centroids].as_mut();
                    for j in 0..n {
                        let dl = s[j] * (ds[j] - sd);
                        if dl == 0.0 {
                            continue;
                        }
                        if let Some(g) = cgrad.as_mut() {
                            for (gi, ui) in g[j * d..(j + 1) * d].iter_mut().zip(up) {
                                *gi += dl * ui;
                            }
                        }
                        for (di, ci) in du[rows.clone()].iter_mut().zip(&cen[j * d..(j + 1) * d]) {
                            *di += dl * ci;
                        }
                    }
                }
            }
            for p in 0..t {
                let rows = p * d..(p + 1) * d;
                rms_bwd(
                    &bc.x_mid[rows.clone()],
                    &self.params[bl.moe_norm],
                    bc.r_moe[p],
                    &du[rows.clone()],
                    &mut dx[rows],
                    grads[bl.moe_norm].as_mut(),
                );
            }
            if let (Some(w), Some(ac)) = (bl.attn, &bc.attn) {
                self.attn_bwd(w, bl.attn_norm, ac, &bc.x_in, t, &mut dx, grads);
            }
        }

        if first_block == 0 {
            for (p, &tok) in c.inputs.iter().enumerate() {
                let dxp = &dx[p * d..(p + 1) * d];
                if let Some(g) = grads[ly.tok].as_mut() {
                    for (gi, di) in g[tok as usize * d..(tok as usize + 1) * d].iter_mut().zip(dxp) {
                        *gi += di;
                    }
                }
                if let Some(g) = grads[ly.pos].as_mut() {
                    for (gi, di) in g[p * d..(p + 1) * d].iter_mut().zip(dxp) {
                        *gi += di;
                    }
                }
            }
        }
    }

    fn block_wanted(&self, b: usize, grads: &[Option<Vec<f64>>]) -> bool {
        let bl = &self.layout.blocks[b];
        let w = |i: usize| grads[i].is_some();
        let ex = |e: &ExpertIdx| w(e.gate) || w(e.up) || w(e.down);
        w(bl.attn_norm)
            || w(bl.moe_norm)
            || bl.attn.is_some_and(|a| a.iter().any(|&i| w(i)))
            || match &bl.moe {
                MoeIdx::Routed { centroids, experts, shared, .. } => {
                    w(*centroids) || experts.iter().chain(shared).any(ex)
                }
                MoeIdx::Condensed { kept, gates, shared } => w(*gates) || kept.iter().chain(shared).any(ex),
            }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_bwd(
        &self,
        w: [usize; 4],
        norm: usize,
        c: &AttnCache,
        x_in: &[f64],
        t: usize,
        dx: &mut [f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.d;
        let scale = 1.0 / (d as f64).sqrt();
        let mut do_ = vec![0.0; t * d];
        for p in 0..t {
            let rows = p * d..(p + 1) * d;
            if let Some(g) = grads[w[3]].as_mut() {
                outer_acc(&c.o[rows.clone()], &dx[rows.clone()], g);
            }
            matvec_t_acc(&self.params[w[3]], &dx[rows.clone()], &mut do_[rows]);
        }
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for p in 0..t {
            let dop = &do_[p * d..(p + 1) * d];
            let prow = &c.p[p * t..p * t + p + 1];
            for j in 0..=p {
                dp[j] = dot(dop, &c.v[j * d..(j + 1) * d]);
                for (g, o) in dv[j * d..(j + 1) * d].iter_mut().zip(dop) {
                    *g += prow[j] * o;
                }
            }
            let pd: f64 = (0..=p).map(|j| prow[j] * dp[j]).sum();
            for j in 0..=p {
                let ds = prow[j] * (dp[j] - pd) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (g, kv) in dq[p * d..(p + 1) * d].iter_mut().zip(&c.k[j * d..(j + 1) * d]) {
                    *g += ds * kv;
                }
                for (g, qv) in dk[j * d..(j + 1) * d].iter_mut().zip(&c.q[p * d..(p + 1) * d]) {
                    *g += ds * qv;
                }
            }
        }
        let mut da = vec![0.0; d];
        for p in 0..t {
            let rows = p * d..(p + 1) * d;
            let ap = &c.a[rows.clone()];
            da.iter_mut().for_each(|g| *g = 0.0);
            for (wi, dm) in [(w[0], &dq), (w[1], &dk), (w[2], &dv)] {
                if let Some(g) = grads[wi].as_mut() {
                    outer_acc(ap, &dm[rows.clone()], g);
                }
                matvec_t_acc(&self.params[wi], &dm[rows.clone()], &mut da);
            }
            rms_bwd(&x_in[rows.clone()], &self.params[norm], c.r[p], &da, &mut dx[rows], grads[norm].as_mut());
        }
    }
}
