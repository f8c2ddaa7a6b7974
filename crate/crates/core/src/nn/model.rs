//! Teacher-forced loss and reverse-mode gradients of the encoder–decoder.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::kernels::{add_into, matmul, matmul_bt};
use super::layers::{
    attn_backward, attn_forward, ffn_backward, ffn_forward, ln_backward, ln_forward, norm_backward, norm_forward,
    AttnCache, AttnIdx, FfnCache, FfnIdx, LnCache, LnIdx,
};
use super::state::{parameter_shapes, ModelState};
use crate::data::{Pair, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::NamedTensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncIdx {
    pub attn: AttnIdx,
    pub ffn: FfnIdx,
    pub ln1: LnIdx,
    pub ln2: LnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecIdx {
    pub attn: AttnIdx,
    pub xattn: AttnIdx,
    pub ffn: FfnIdx,
    pub ln1: LnIdx,
    pub ln2: LnIdx,
    pub ln3: LnIdx,
}

/// Positions of every parameter in the name-sorted tensor list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub enc: Vec<EncIdx>,
    pub dec: Vec<DecIdx>,
    pub out_w: usize,
    pub out_b: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Layout {
        let shapes: Vec<_> = parameter_shapes(config).into_iter().collect();
        let index: BTreeMap<&str, usize> = shapes.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
        let at = |name: String| index[name.as_str()];
        let attn = |p: &str| AttnIdx {
            wq: at(format!("{p}.wq")),
            wk: at(format!("{p}.wk")),
            wv: at(format!("{p}.wv")),
            wo: at(format!("{p}.wo")),
        };
        let ffn = |p: &str| FfnIdx {
            w1: at(format!("{p}.ffn.w1")),
            b1: at(format!("{p}.ffn.b1")),
            w2: at(format!("{p}.ffn.w2")),
            b2: at(format!("{p}.ffn.b2")),
        };
        let ln = |p: &str| LnIdx {
            g: at(format!("{p}.g")),
            b: at(format!("{p}.b")),
        };
        let enc = (0..config.enc_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                EncIdx {
                    attn: attn(&format!("{p}.attn")),
                    ffn: ffn(&p),
                    ln1: ln(&format!("{p}.ln1")),
                    ln2: ln(&format!("{p}.ln2")),
                }
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|i| {
                let p = format!("dec.{i}");
                DecIdx {
                    attn: attn(&format!("{p}.attn")),
                    xattn: attn(&format!("{p}.xattn")),
                    ffn: ffn(&p),
                    ln1: ln(&format!("{p}.ln1")),
                    ln2: ln(&format!("{p}.ln2")),
                    ln3: ln(&format!("{p}.ln3")),
                }
            })
            .collect();
        Layout {
            tok: at("emb.tok".into()),
            pos: at("emb.pos".into()),
            enc,
            dec,
            out_w: at("out.w".into()),
            out_b: at("out.b".into()),
            shapes,
        }
    }

    pub fn zero_grads<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.shapes
            .iter()
            .map(|(_, s)| vec![T::zero(); s.iter().product()])
            .collect()
    }
}

/// Parameter slices in layout order.
pub(crate) fn param_slices<T: Scalar>(model: &ModelState<T>) -> Vec<&[T]> {
    model.tensors().map(NamedTensor::values).collect()
}

/// Checks token ranges and lengths; sources and targets each need one slot
/// for EOS (targets also get BOS on the decoder side).
pub(crate) fn validate_batch(config: &ModelConfig, batch: &[Pair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (i, pair) in batch.iter().enumerate() {
        for (side, seq) in [("source", &pair.source), ("target", &pair.target)] {
            if seq.len() + 1 > config.max_len {
                return Err(Error::SequenceTooLong {
                    pair: i,
                    side,
                    len: seq.len(),
                    limit: config.max_len - 1,
                });
            }
            if let Some(position) = seq.iter().position(|&t| t as usize >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    pair: i,
                    side,
                    position,
                    token: seq[position],
                    vocab: config.vocab_size,
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn embed<T: Scalar>(params: &[&[T]], layout: &Layout, ids: &[u32], d: usize) -> Vec<T> {
    let (tok, pos) = (params[layout.tok], params[layout.pos]);
    let mut x = vec![T::zero(); ids.len() * d];
    for (t, &id) in ids.iter().enumerate() {
        let id = id as usize;
        for c in 0..d {
            x[t * d + c] = tok[id * d + c] + pos[t * d + c];
        }
    }
    x
}

fn embed_backward<T: Scalar>(grads: &mut [Vec<T>], layout: &Layout, ids: &[u32], dx: &[T], d: usize) {
    for (t, &id) in ids.iter().enumerate() {
        let id = id as usize;
        add_into(&mut grads[layout.tok][id * d..(id + 1) * d], &dx[t * d..(t + 1) * d]);
        add_into(&mut grads[layout.pos][t * d..(t + 1) * d], &dx[t * d..(t + 1) * d]);
    }
}

struct EncLayerCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

struct DecLayerCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln3: LnCache<T>,
    xattn: AttnCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

pub(crate) fn encode<T: Scalar>(params: &[&[T]], layout: &Layout, cfg: &ModelConfig, src: &[u32]) -> Vec<T> {
    encode_cached(params, layout, cfg, src).0
}

/// Encoder stack followed by an affine-free layer norm.
fn encode_cached<T: Scalar>(
    params: &[&[T]],
    layout: &Layout,
    cfg: &ModelConfig,
    src: &[u32],
) -> (Vec<T>, Vec<EncLayerCache<T>>, LnCache<T>) {
    let (d, f, h) = (cfg.d_model, cfg.d_ffn, cfg.n_heads);
    let n = src.len();
    let mut x = embed(params, layout, src, d);
    let mut caches = Vec::with_capacity(layout.enc.len());
    for l in &layout.enc {
        let (n1, ln1) = ln_forward(&x, params[l.ln1.g], params[l.ln1.b], d);
        let (a, attn) = attn_forward(params, l.attn, &n1, n, &n1, n, false, d, h);
        add_into(&mut x, &a);
        let (n2, ln2) = ln_forward(&x, params[l.ln2.g], params[l.ln2.b], d);
        let (y, ffn) = ffn_forward(params, l.ffn, &n2, n, d, f);
        add_into(&mut x, &y);
        caches.push(EncLayerCache { ln1, attn, ln2, ffn });
    }
    let (y, out_norm) = norm_forward(&x, d);
    (y, caches, out_norm)
}

fn decode_cached<T: Scalar>(
    params: &[&[T]],
    layout: &Layout,
    cfg: &ModelConfig,
    tgt_in: &[u32],
    memory: &[T],
    mem_len: usize,
) -> (Vec<T>, Vec<DecLayerCache<T>>, LnCache<T>) {
    let (d, f, h) = (cfg.d_model, cfg.d_ffn, cfg.n_heads);
    let n = tgt_in.len();
    let mut x = embed(params, layout, tgt_in, d);
    let mut caches = Vec::with_capacity(layout.dec.len());
    for l in &layout.dec {
        let (n1, ln1) = ln_forward(&x, params[l.ln1.g], params[l.ln1.b], d);
        let (a, attn) = attn_forward(params, l.attn, &n1, n, &n1, n, true, d, h);
        add_into(&mut x, &a);
        let (n3, ln3) = ln_forward(&x, params[l.ln3.g], params[l.ln3.b], d);
        let (c, xattn) = attn_forward(params, l.xattn, &n3, n, memory, mem_len, false, d, h);
        add_into(&mut x, &c);
        let (n2, ln2) = ln_forward(&x, params[l.ln2.g], params[l.ln2.b], d);
        let (y, ffn) = ffn_forward(params, l.ffn, &n2, n, d, f);
        add_into(&mut x, &y);
        caches.push(DecLayerCache {
            ln1,
            attn,
            ln3,
            xattn,
            ln2,
            ffn,
        });
    }
    let (y, out_norm) = norm_forward(&x, d);
    (y, caches, out_norm)
}

pub(crate) fn logits<T: Scalar>(params: &[&[T]], layout: &Layout, x: &[T], n: usize, d: usize, vocab: usize) -> Vec<T> {
    let mut z = matmul_bt(x, params[layout.out_w], n, d, vocab);
    super::kernels::add_row_bias(&mut z, params[layout.out_b]);
    z
}

fn decoder_io(target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(EOS);
    (input, gold)
}

fn with_eos(source: &[u32]) -> Vec<u32> {
    let mut s = source.to_vec();
    s.push(EOS);
    s
}

/// Sum of token cross-entropies over one pair, optionally with its gradient
/// scaled by `grad_scale`.
fn pair_pass<T: Scalar>(
    params: &[&[T]],
    layout: &Layout,
    cfg: &ModelConfig,
    pair: &Pair,
    grads: Option<(&mut [Vec<T>], T)>,
) -> (f64, usize) {
    let (d, f, h, vocab) = (cfg.d_model, cfg.d_ffn, cfg.n_heads, cfg.vocab_size);
    let src = with_eos(&pair.source);
    let (tgt_in, gold) = decoder_io(&pair.target);
    let (ns, nt) = (src.len(), tgt_in.len());
    let (memory, enc_caches, enc_norm) = encode_cached(params, layout, cfg, &src);
    let (x, dec_caches, dec_norm) = decode_cached(params, layout, cfg, &tgt_in, &memory, ns);
    let mut z = logits(params, layout, &x, nt, d, vocab);
    let mut loss = 0.0f64;
    let mut count = 0usize;
    for (t, &g) in gold.iter().enumerate() {
        let row = &mut z[t * vocab..(t + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        if g == PAD {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        loss -= row[g as usize].as_f64().ln();
        count += 1;
        row[g as usize] -= T::one();
    }
    let Some((grads, scale)) = grads else {
        return (loss, count);
    };
    // z now holds softmax - onehot
    z.iter_mut().for_each(|v| *v *= scale);
    super::kernels::acc_at_b(&mut grads[layout.out_w], &z, &x, nt, vocab, d);
    super::kernels::acc_rows(&mut grads[layout.out_b], &z, vocab);
    let dy = matmul(&z, params[layout.out_w], nt, vocab, d);
    let mut dx = norm_backward(&dy, &dec_norm, d);
    let mut dmem = vec![T::zero(); memory.len()];
    for (l, c) in layout.dec.iter().zip(&dec_caches).rev() {
        let dn2 = ffn_backward(params, l.ffn, &c.ffn, &dx, grads, d, f);
        let d2 = ln_backward(&dn2, &c.ln2, params[l.ln2.g], l.ln2, grads, d);
        add_into(&mut dx, &d2);
        let (dn3, dm) = attn_backward(params, l.xattn, &c.xattn, &dx, grads, d, h);
        add_into(&mut dmem, &dm);
        let d3 = ln_backward(&dn3, &c.ln3, params[l.ln3.g], l.ln3, grads, d);
        add_into(&mut dx, &d3);
        let (dq, dkv) = attn_backward(params, l.attn, &c.attn, &dx, grads, d, h);
        let mut dn1 = dq;
        add_into(&mut dn1, &dkv);
        let d1 = ln_backward(&dn1, &c.ln1, params[l.ln1.g], l.ln1, grads, d);
        add_into(&mut dx, &d1);
    }
    embed_backward(grads, layout, &tgt_in, &dx, d);
    let mut dx = norm_backward(&dmem, &enc_norm, d);
    for (l, c) in layout.enc.iter().zip(&enc_caches).rev() {
        let dn2 = ffn_backward(params, l.ffn, &c.ffn, &dx, grads, d, f);
        let d2 = ln_backward(&dn2, &c.ln2, params[l.ln2.g], l.ln2, grads, d);
        add_into(&mut dx, &d2);
        let (dq, dkv) = attn_backward(params, l.attn, &c.attn, &dx, grads, d, h);
        let mut dn1 = dq;
        add_into(&mut dn1, &dkv);
        let d1 = ln_backward(&dn1, &c.ln1, params[l.ln1.g], l.ln1, grads, d);
        add_into(&mut dx, &d1);
    }
    embed_backward(grads, layout, &src, &dx, d);
    (loss, count)
}

fn target_tokens(batch: &[Pair]) -> usize {
    batch
        .iter()
        .map(|p| p.target.iter().filter(|&&t| t != PAD).count() + 1)
        .sum()
}

/// Mean token-level cross-entropy over non-PAD target positions (EOS included),
/// with teacher forcing.
pub fn forward_loss<T: Scalar>(model: &ModelState<T>, batch: &[Pair]) -> Result<f64> {
    let cfg = model.config();
    validate_batch(cfg, batch)?;
    let layout = Layout::new(cfg);
    let params = param_slices(model);
    let (mut total, mut count) = (0.0, 0usize);
    for pair in batch {
        let (l, c) = pair_pass(&params, &layout, cfg, pair, None);
        total += l;
        count += c;
    }
    Ok(total / count as f64)
}

/// Loss and gradient of [`forward_loss`] with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub loss: f64,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors
            .binary_search_by(|t| t.name().cmp(name))
            .ok()
            .map(|i| &self.tensors[i])
    }
}

pub(crate) fn backward_raw<T: Scalar>(model: &ModelState<T>, layout: &Layout, batch: &[Pair]) -> (f64, Vec<Vec<T>>) {
    let cfg = model.config();
    let params = param_slices(model);
    let mut grads = layout.zero_grads::<T>();
    let n_tokens = target_tokens(batch);
    let scale = T::of(1.0 / n_tokens as f64);
    let mut total = 0.0;
    for pair in batch {
        let (l, _) = pair_pass(&params, layout, cfg, pair, Some((&mut grads, scale)));
        total += l;
    }
    (total / n_tokens as f64, grads)
}

/// dLoss/dθ for every tensor; names and shapes mirror the model.
pub fn backward<T: Scalar>(model: &ModelState<T>, batch: &[Pair]) -> Result<Gradients<T>> {
    validate_batch(model.config(), batch)?;
    let layout = Layout::new(model.config());
    let (loss, grads) = backward_raw(model, &layout, batch);
    let tensors = layout
        .shapes
        .iter()
        .zip(grads)
        .map(|((name, shape), g)| NamedTensor::new(name.clone(), shape.clone(), g))
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients { loss, tensors })
}
