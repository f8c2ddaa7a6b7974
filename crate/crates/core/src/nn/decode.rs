//! Greedy decoding with cached self-attention keys and values.

use super::kernels::{add_into, matmul};
use super::layers::{attend, ffn_forward, ln_apply, norm_forward};
use super::model::{encode, logits, param_slices, Layout};
use super::state::ModelState;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// BOS-seeded argmax decoding until EOS or until `max_len - 1` tokens. Ties go to the lowest token id. EOS is not returned.
pub fn greedy_decode<T: Scalar>(model: &ModelState<T>, source: &[u32]) -> Result<Vec<u32>> {
    let cfg = model.config();
    if source.len() + 1 > cfg.max_len {
        return Err(Error::SequenceTooLong {
            pair: 0,
            side: "source",
            len: source.len(),
            limit: cfg.max_len - 1,
        });
    }
    if let Some(position) = source.iter().position(|&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            pair: 0,
            side: "source",
            position,
            token: source[position],
            vocab: cfg.vocab_size,
        });
    }
    let layout = Layout::new(cfg);
    let params = param_slices(model);
    let (d, f, h, vocab) = (cfg.d_model, cfg.d_ffn, cfg.n_heads, cfg.vocab_size);
    let mut src = source.to_vec();
    src.push(EOS);
    let memory = encode(&params, &layout, cfg, &src);
    let ns = src.len();
    // cross-attention keys/values are fixed per layer
    let cross: Vec<(Vec<T>, Vec<T>)> = layout
        .dec
        .iter()
        .map(|l| {
            (
                matmul(&memory, params[l.xattn.wk], ns, d, d),
                matmul(&memory, params[l.xattn.wv], ns, d, d),
            )
        })
        .collect();
    let mut keys: Vec<Vec<T>> = vec![Vec::new(); layout.dec.len()];
    let mut values: Vec<Vec<T>> = vec![Vec::new(); layout.dec.len()];
    let mut out = Vec::new();
    let mut token = BOS;
    // a target plus EOS must fit in max_len positions
    for pos in 0..cfg.max_len - 1 {
        let pos_row = &params[layout.pos][pos * d..(pos + 1) * d];
        let tok_row = &params[layout.tok][token as usize * d..(token as usize + 1) * d];
        let mut x: Vec<T> = tok_row.iter().zip(pos_row).map(|(&a, &b)| a + b).collect();
        for (li, l) in layout.dec.iter().enumerate() {
            let n1 = ln_apply(&x, params[l.ln1.g], params[l.ln1.b], d);
            let q = matmul(&n1, params[l.attn.wq], 1, d, d);
            keys[li].extend(matmul(&n1, params[l.attn.wk], 1, d, d));
            values[li].extend(matmul(&n1, params[l.attn.wv], 1, d, d));
            let (ctx, _) = attend(&q, &keys[li], &values[li], 1, pos + 1, d, h, None);
            add_into(&mut x, &matmul(&ctx, params[l.attn.wo], 1, d, d));
            let n3 = ln_apply(&x, params[l.ln3.g], params[l.ln3.b], d);
            let q = matmul(&n3, params[l.xattn.wq], 1, d, d);
            let (ctx, _) = attend(&q, &cross[li].0, &cross[li].1, 1, ns, d, h, None);
            add_into(&mut x, &matmul(&ctx, params[l.xattn.wo], 1, d, d));
            let n2 = ln_apply(&x, params[l.ln2.g], params[l.ln2.b], d);
            let (y, _) = ffn_forward(&params, l.ffn, &n2, 1, d, f);
            add_into(&mut x, &y);
        }
        let (x, _) = norm_forward(&x, d);
        let z = logits(&params, &layout, &x, 1, d, vocab);
        let mut best = 0usize;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        token = best as u32;
        if token == EOS {
            break;
        }
        out.push(token);
    }
    Ok(out)
}
