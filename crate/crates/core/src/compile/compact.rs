use super::PrunedStructure;
use crate::error::{Error, Result};
use crate::model::{mean_pool_matrix, MaskableEncoder, ModelConfig};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CompactAttention {
    pub n_heads: usize,
    /// `[d', h·d_h]`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[h·d_h, d']`
    pub wo: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactFfn {
    /// `[d', f']`
    pub wu: Tensor,
    /// `[f', d']`
    pub wd: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactBlock {
    pub attn: Option<CompactAttention>,
    pub ffn: Option<CompactFfn>,
}

/// A physically smaller encoder with every pruned row, column, head and layer
/// removed and every surviving gate folded into the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactModel {
    /// Dimensions of the model this one was extracted from.
    pub source: ModelConfig,
    pub hidden: usize,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gamma: Tensor,
    pub emb_ln_beta: Tensor,
    pub blocks: Vec<CompactBlock>,
    pub classifier: Tensor,
}

#[derive(Debug, Clone)]
pub struct CompactOutput {
    pub logits: Tensor,
    /// Block outputs `[B·S, d']`, one per source block (a fully dropped block
    /// repeats its input).
    pub hidden_states: Vec<Tensor>,
}

/// `w[rows, cols]` with row `r` scaled by `row_scale[r]` and column `c` by
/// `col_scale[c]`.
fn submatrix(w: &Tensor, rows: &[usize], cols: &[usize], row_scale: &[f32], col_scale: &[f32]) -> Tensor {
    let c = w.cols();
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for (ri, &r) in rows.iter().enumerate() {
        for (ci, &k) in cols.iter().enumerate() {
            data.push(w.data()[r * c + k] * row_scale[ri] * col_scale[ci]);
        }
    }
    Tensor::matrix(rows.len(), cols.len(), data).expect("shape")
}

fn scaled_entries(v: &Tensor, idx: &[usize], scale: &[f32]) -> Tensor {
    Tensor::vector(idx.iter().zip(scale).map(|(&k, &s)| v.data()[k] * s).collect())
}

/// Deletes pruned units and folds surviving gate values into the weights.
pub fn extract(model: &MaskableEncoder, s: &PrunedStructure) -> Result<CompactModel> {
    let cfg = &model.config;
    s.validate(cfg)?;
    if model.blocks.len() != cfg.n_layers {
        return Err(Error::StructureMismatch("block count differs from config".into()));
    }
    let hk = &s.kept_hidden_dims;
    let hs = &s.fold_scales.hidden;
    let ones_h = vec![1.0f32; hk.len()];
    let dh = cfg.head_dim();
    let all_vocab: Vec<usize> = (0..cfg.vocab).collect();
    let all_pos: Vec<usize> = (0..cfg.max_seq).collect();

    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let attn = s.keep_mha[i].then(|| {
                let heads = &s.kept_heads[i];
                let cols: Vec<usize> = heads.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect();
                let head_scale: Vec<f32> = s.fold_scales.heads[i]
                    .iter()
                    .flat_map(|&z| std::iter::repeat(z * s.fold_scales.mha[i]).take(dh))
                    .collect();
                let ones_c = vec![1.0f32; cols.len()];
                CompactAttention {
                    n_heads: heads.len(),
                    wq: submatrix(&w.wq, hk, &cols, hs, &ones_c),
                    wk: submatrix(&w.wk, hk, &cols, hs, &ones_c),
                    wv: submatrix(&w.wv, hk, &cols, hs, &ones_c),
                    wo: submatrix(&w.wo, &cols, hk, &head_scale, hs),
                    ln_gamma: scaled_entries(&w.attn_ln_gamma, hk, &ones_h),
                    ln_beta: scaled_entries(&w.attn_ln_beta, hk, &ones_h),
                }
            });
            let ffn = s.keep_ffn[i].then(|| {
                let dims = &s.kept_int_dims[i];
                let int_scale: Vec<f32> = s.fold_scales.int_dims[i]
                    .iter()
                    .map(|&z| z * s.fold_scales.ffn[i])
                    .collect();
                CompactFfn {
                    wu: submatrix(&w.wu, hk, dims, hs, &vec![1.0; dims.len()]),
                    wd: submatrix(&w.wd, dims, hk, &int_scale, hs),
                    ln_gamma: scaled_entries(&w.ffn_ln_gamma, hk, &ones_h),
                    ln_beta: scaled_entries(&w.ffn_ln_beta, hk, &ones_h),
                }
            });
            CompactBlock { attn, ffn }
        })
        .collect();

    Ok(CompactModel {
        source: *cfg,
        hidden: hk.len(),
        tok_emb: submatrix(&model.tok_emb, &all_vocab, hk, &vec![1.0; cfg.vocab], &ones_h),
        pos_emb: submatrix(&model.pos_emb, &all_pos, hk, &vec![1.0; cfg.max_seq], &ones_h),
        // the embedding output is gated by z_hidn after its layer norm
        emb_ln_gamma: scaled_entries(&model.emb_ln_gamma, hk, hs),
        emb_ln_beta: scaled_entries(&model.emb_ln_beta, hk, hs),
        blocks,
        classifier: submatrix(&model.classifier, hk, &(0..cfg.n_classes).collect::<Vec<_>>(), hs, &vec![1.0; cfg.n_classes]),
    })
}

impl CompactModel {
    /// The unpruned model in compact form (identity structure).
    pub fn dense(model: &MaskableEncoder) -> Result<Self> {
        extract(model, &PrunedStructure::identity(&model.config))
    }

    /// Tensors in checkpoint order; absent sublayers contribute nothing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embeddings.token".into(), &self.tok_emb),
            ("embeddings.position".into(), &self.pos_emb),
            ("embeddings.ln.gamma".into(), &self.emb_ln_gamma),
            ("embeddings.ln.beta".into(), &self.emb_ln_beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(a) = &b.attn {
                for (n, t) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                    out.push((format!("blocks.{i}.attn.{n}"), t));
                }
                out.push((format!("blocks.{i}.attn.ln.gamma"), &a.ln_gamma));
                out.push((format!("blocks.{i}.attn.ln.beta"), &a.ln_beta));
            }
            if let Some(f) = &b.ffn {
                out.push((format!("blocks.{i}.ffn.wu"), &f.wu));
                out.push((format!("blocks.{i}.ffn.wd"), &f.wd));
                out.push((format!("blocks.{i}.ffn.ln.gamma"), &f.ln_gamma));
                out.push((format!("blocks.{i}.ffn.ln.beta"), &f.ln_beta));
            }
        }
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Rebuilds a compact model whose layout is described by `s`.
    pub fn from_tensors(
        source: ModelConfig,
        s: &PrunedStructure,
        mut fetch: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        source.validate()?;
        s.validate(&source)?;
        let d = s.kept_hidden_dims.len();
        let dh = source.head_dim();
        let mut get = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = fetch(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut blocks = Vec::with_capacity(source.n_layers);
        for i in 0..source.n_layers {
            let attn = if s.keep_mha[i] {
                let h = s.kept_heads[i].len();
                let w = h * dh;
                Some(CompactAttention {
                    n_heads: h,
                    wq: get(format!("blocks.{i}.attn.wq"), &[d, w])?,
                    wk: get(format!("blocks.{i}.attn.wk"), &[d, w])?,
                    wv: get(format!("blocks.{i}.attn.wv"), &[d, w])?,
                    wo: get(format!("blocks.{i}.attn.wo"), &[w, d])?,
                    ln_gamma: get(format!("blocks.{i}.attn.ln.gamma"), &[d])?,
                    ln_beta: get(format!("blocks.{i}.attn.ln.beta"), &[d])?,
                })
            } else {
                None
            };
            let ffn = if s.keep_ffn[i] {
                let f = s.kept_int_dims[i].len();
                Some(CompactFfn {
                    wu: get(format!("blocks.{i}.ffn.wu"), &[d, f])?,
                    wd: get(format!("blocks.{i}.ffn.wd"), &[f, d])?,
                    ln_gamma: get(format!("blocks.{i}.ffn.ln.gamma"), &[d])?,
                    ln_beta: get(format!("blocks.{i}.ffn.ln.beta"), &[d])?,
                })
            } else {
                None
            };
            blocks.push(CompactBlock { attn, ffn });
        }
        Ok(Self {
            source,
            hidden: d,
            tok_emb: get("embeddings.token".into(), &[source.vocab, d])?,
            pos_emb: get("embeddings.position".into(), &[source.max_seq, d])?,
            emb_ln_gamma: get("embeddings.ln.gamma".into(), &[d])?,
            emb_ln_beta: get("embeddings.ln.beta".into(), &[d])?,
            blocks,
            classifier: get("classifier".into(), &[d, source.n_classes])?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.source.head_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.cols()
    }

    /// Tape-free forward on a batch of equal-length sequences.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<CompactOutput> {
        let seq = tokens.first().map(|t| t.len()).unwrap_or(0);
        if tokens.is_empty() || seq == 0 || seq > self.source.max_seq {
            return Err(Error::InvalidArgument(format!(
                "batch of {} sequences of length {seq} (max_seq {})",
                tokens.len(),
                self.source.max_seq
            )));
        }
        let batch = tokens.len();
        let d = self.hidden;
        let rows = batch * seq;
        let mut x = vec![0.0f32; rows * d];
        for (b, t) in tokens.iter().enumerate() {
            if t.len() != seq {
                return Err(Error::InvalidArgument(format!("sequence {b} has length {}", t.len())));
            }
            for (p, &id) in t.iter().enumerate() {
                if id >= self.source.vocab {
                    return Err(Error::InvalidArgument(format!("token id {id} out of range")));
                }
                let r = b * seq + p;
                let (te, pe) = (self.tok_emb.row(id), self.pos_emb.row(p));
                for k in 0..d {
                    x[r * d + k] = te[k] + pe[k];
                }
            }
        }
        let mut x = tensor::layer_norm_rows(&x, self.emb_ln_gamma.data(), self.emb_ln_beta.data());
        let mut hidden_states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if let Some(a) = &block.attn {
                let out = self.attention(a, &x, batch, seq);
                add_in_place(&mut x, &out);
                x = tensor::layer_norm_rows(&x, a.ln_gamma.data(), a.ln_beta.data());
            }
            if let Some(f) = &block.ffn {
                let width = f.wu.cols();
                let mut h = tensor::matmul(&x, f.wu.data(), rows, d, width);
                h.iter_mut().for_each(|v| *v = tensor::gelu(*v));
                let out = tensor::matmul(&h, f.wd.data(), rows, width, d);
                add_in_place(&mut x, &out);
                x = tensor::layer_norm_rows(&x, f.ln_gamma.data(), f.ln_beta.data());
            }
            hidden_states.push(Tensor::matrix(rows, d, x.clone())?);
        }
        let pool = mean_pool_matrix(batch, seq);
        let pooled = tensor::matmul(pool.data(), &x, batch, rows, d);
        let c = self.n_classes();
        let logits = Tensor::matrix(batch, c, tensor::matmul(&pooled, self.classifier.data(), batch, d, c))?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("compact model logits".into()));
        }
        Ok(CompactOutput {
            logits,
            hidden_states,
        })
    }

    pub fn logits(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.forward(tokens)?.logits)
    }

    fn attention(&self, a: &CompactAttention, x: &[f32], batch: usize, seq: usize) -> Vec<f32> {
        let d = self.hidden;
        let dh = self.head_dim();
        let w = a.n_heads * dh;
        let rows = batch * seq;
        let q = tensor::matmul(x, a.wq.data(), rows, d, w);
        let k = tensor::matmul(x, a.wk.data(), rows, d, w);
        let v = tensor::matmul(x, a.wv.data(), rows, d, w);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ctx = vec![0.0f32; rows * w];
        let mut scores = vec![0.0f32; seq];
        let mut probs = vec![0.0f32; seq];
        for b in 0..batch {
            for h in 0..a.n_heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &q[(b * seq + i) * w + off..(b * seq + i) * w + off + dh];
                    for j in 0..seq {
                        let kj = &k[(b * seq + j) * w + off..(b * seq + j) * w + off + dh];
                        let s = tensor::dot(qi, kj) as f32;
                        scores[j] = (scale as f64 * s as f64) as f32;
                    }
                    tensor::softmax_into(&scores, &mut probs);
                    let out = &mut ctx[(b * seq + i) * w + off..(b * seq + i) * w + off + dh];
                    for t in 0..dh {
                        let mut acc = 0.0f64;
                        for j in 0..seq {
                            acc += probs[j] as f64 * v[(b * seq + j) * w + off + t] as f64;
                        }
                        out[t] = acc as f32;
                    }
                }
            }
        }
        tensor::matmul(&ctx, a.wo.data(), rows, w, d)
    }
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}
