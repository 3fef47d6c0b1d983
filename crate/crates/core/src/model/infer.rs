//! Incremental decoding with cached keys and values.
//!
//! Adapters are folded into the base weights for the chosen aspect once, so
//! each generated token costs one row-by-matrix product per projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_next, Model, Projection, SamplingConfig};
use crate::autodiff::{kernels, LN_EPS};
use crate::error::{Error, Result};
use crate::gating::AspectId;

struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        kernels::matmul_acc(x, &self.w, 1, self.d_in, self.d_out, &mut out);
        out
    }
}

struct Norm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl Norm {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        kernels::normalize_row(x, &mut out, LN_EPS);
        for ((o, g), b) in out.iter_mut().zip(&self.gain).zip(&self.bias) {
            *o = *o * g + b;
        }
        out
    }
}

struct Block {
    proj: Vec<Linear>,
    ln_attn: Norm,
    ln_ffn: Norm,
}

/// A model specialised to one aspect for decoding.
pub struct InferenceModel {
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    blocks: Vec<Block>,
    head: Linear,
    d_model: usize,
    n_heads: usize,
    max_seq_len: usize,
    vocab_size: usize,
}

/// Per-sequence key/value cache.
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl InferenceModel {
    pub fn new(model: &Model, aspect: AspectId) -> Result<Self> {
        model.check_aspect(aspect)?;
        let cfg = &model.config;
        let ids = model.layout_ids();
        let p = &model.params;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let proj = Projection::ALL
                .iter()
                .map(|&pr| {
                    let (d_in, d_out) = pr.dims(cfg);
                    Ok(Linear {
                        w: model.effective_weight(layer, pr, aspect)?.into_data(),
                        b: p.get(ids.bias(layer, pr)).data().to_vec(),
                        d_in,
                        d_out,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = |(g, b)| Norm {
                gain: p.get(g).data().to_vec(),
                bias: p.get(b).data().to_vec(),
            };
            blocks.push(Block {
                proj,
                ln_attn: norm(ids.ln_attn(layer)),
                ln_ffn: norm(ids.ln_ffn(layer)),
            });
        }
        let (hw, hb) = ids.head();
        Ok(InferenceModel {
            tok_emb: p.get(ids.tok_emb()).data().to_vec(),
            pos_emb: p.get(ids.pos_emb()).data().to_vec(),
            blocks,
            head: Linear {
                w: p.get(hw).data().to_vec(),
                b: p.get(hb).data().to_vec(),
                d_in: cfg.d_model,
                d_out: cfg.vocab_size,
            },
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            max_seq_len: cfg.max_seq_len,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn start(&self) -> DecodeState {
        DecodeState {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }

    /// Feed one token; returns the next-token logits at its position.
    pub fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab_size {
            return Err(Error::Domain(format!("token {token} outside vocabulary of {}", self.vocab_size)));
        }
        let pos = state.len;
        if pos >= self.max_seq_len {
            return Err(Error::Config(format!("sequence exceeds max_seq_len {}", self.max_seq_len)));
        }
        let d = self.d_model;
        let mut x: Vec<f64> = self.tok_emb[token * d..(token + 1) * d]
            .iter()
            .zip(&self.pos_emb[pos * d..(pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let q = block.proj[0].apply(&x);
            let k = block.proj[1].apply(&x);
            let v = block.proj[2].apply(&x);
            state.keys[l].extend_from_slice(&k);
            state.values[l].extend_from_slice(&v);
            let n = pos + 1;
            let mut cat = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for h in 0..self.n_heads {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &state.keys[l][j * d + h * dh..j * d + (h + 1) * dh];
                    *s = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
                }
                kernels::softmax_in_place(&mut scores);
                let out = &mut cat[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vh = &state.values[l][j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
            }
            let attn = block.proj[3].apply(&cat);
            let normed = block.ln_attn.apply(&attn);
            let xp: Vec<f64> = x.iter().zip(&normed).map(|(a, b)| a + b).collect();
            let mut hidden = block.proj[4].apply(&xp);
            hidden.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let o = block.proj[5].apply(&hidden);
            let normed = block.ln_ffn.apply(&o);
            x = xp.iter().zip(&normed).map(|(a, b)| a + b).collect();
        }
        state.len += 1;
        Ok(self.head.apply(&x))
    }

    /// Logits at every position of `tokens`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut state = self.start();
        tokens.iter().map(|&t| self.step(&mut state, t)).collect()
    }

    pub fn generate(&self, prompt: &[usize], sampling: &SamplingConfig, seed: u64) -> Result<Vec<usize>> {
        sampling.validate()?;
        if prompt.is_empty() {
            return Err(Error::Domain("empty prompt".into()));
        }
        if prompt.len() > self.max_seq_len {
            return Err(Error::Config(format!(
                "prompt of {} tokens exceeds max_seq_len {}",
                prompt.len(),
                self.max_seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.start();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.step(&mut state, t)?;
        }
        let mut out = Vec::new();
        while out.len() < sampling.max_new_tokens {
            let next = sample_next(&logits, sampling, &mut rng)?;
            if Some(next) == sampling.stop_token {
                break;
            }
            out.push(next);
            if prompt.len() + out.len() >= self.max_seq_len {
                break;
            }
            logits = self.step(&mut state, next)?;
        }
        Ok(out)
    }
}
