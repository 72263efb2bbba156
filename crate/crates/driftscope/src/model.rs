//! Desk-scale decoder-only transformer with hand-implemented reverse-mode
//! gradients. The scalar type is generic: f32 for training, f64 for the
//! finite-difference and optimizer oracle checks.
//!
//! Architecture: token + learned positional embeddings, pre-norm blocks
//! (LayerNorm -> causal multi-head attention -> residual, LayerNorm -> GELU
//! MLP -> residual), final LayerNorm, untied LM head. Linear layers carry
//! no bias; only the layer norms have gain/bias parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorData, TrunkSelector};
use crate::error::{Error, Result};
use crate::numeric::{gaussian, Real};
use crate::task::Batch;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.d_model == 0
            || self.heads == 0
            || self.d_ff == 0
            || self.vocab == 0
            || self.seq_len == 0
        {
            return Err(Error::InvalidConfig("all model dims must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Desk-scale defaults: small enough for CPU minutes, large enough to
    /// show the trajectory geometry.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            vocab: 256,
            seq_len: 64,
        }
    }

    /// Analytic trunk size: attention QKV/output plus MLP up/down weights.
    pub fn trunk_dim(&self) -> usize {
        self.layers * (4 * self.d_model * self.d_model + 2 * self.d_model * self.d_ff)
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.vocab * self.d_model          // tok
            + self.seq_len * self.d_model  // pos
            + self.trunk_dim()
            + self.layers * 4 * self.d_model // ln gains/biases per block
            + 2 * self.d_model               // final ln
            + self.d_model * self.vocab // head
    }
}

#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether weight decay applies (trunk weight matrices only).
    pub decay: bool,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_in: usize,
    w_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Loss values of one forward pass, reported in f64.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub composite: f64,
    pub lm: f64,
    pub probe: f64,
    pub lm_positions: usize,
    pub probe_sequences: usize,
}

fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("embed.tok".to_string(), vec![cfg.vocab, d], false),
        ("embed.pos".to_string(), vec![cfg.seq_len, d], false),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("block{l:03}.{s}");
        specs.push((p("ln1.g"), vec![d], false));
        specs.push((p("ln1.b"), vec![d], false));
        specs.push((p("attn.wq"), vec![d, d], true));
        specs.push((p("attn.wk"), vec![d, d], true));
        specs.push((p("attn.wv"), vec![d, d], true));
        specs.push((p("attn.wo"), vec![d, d], true));
        specs.push((p("ln2.g"), vec![d], false));
        specs.push((p("ln2.b"), vec![d], false));
        specs.push((p("mlp.w_in"), vec![d, cfg.d_ff], true));
        specs.push((p("mlp.w_out"), vec![cfg.d_ff, d], true));
    }
    specs.push(("final_ln.g".to_string(), vec![d], false));
    specs.push(("final_ln.b".to_string(), vec![d], false));
    specs.push(("lm_head.w".to_string(), vec![d, cfg.vocab], false));
    specs
}

impl<T: Real> Model<T> {
    /// Gaussian init (std 0.02) for all weight matrices; layer-norm gains 1,
    /// biases 0. Draws are made in f64 so f32 and f64 models initialized
    /// from the same seed coincide.
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let specs = tensor_specs(&cfg);
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, decay) in specs {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if name.ends_with(".b") {
                vec![T::zero(); n]
            } else {
                (0..n)
                    .map(|_| T::from_f64(gaussian(rng) * INIT_STD))
                    .collect()
            };
            params.push(Tensor {
                name,
                shape,
                decay,
                data,
            });
        }
        Ok(Self::assemble(cfg, params))
    }

    fn assemble(cfg: ModelConfig, params: Vec<Tensor<T>>) -> Self {
        let find = |n: &str| params.iter().position(|t| t.name == n).unwrap();
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| find(&format!("block{l:03}.{s}"));
                BlockIdx {
                    ln1_g: p("ln1.g"),
                    ln1_b: p("ln1.b"),
                    wq: p("attn.wq"),
                    wk: p("attn.wk"),
                    wv: p("attn.wv"),
                    wo: p("attn.wo"),
                    ln2_g: p("ln2.g"),
                    ln2_b: p("ln2.b"),
                    w_in: p("mlp.w_in"),
                    w_out: p("mlp.w_out"),
                }
            })
            .collect();
        let layout = Layout {
            tok: find("embed.tok"),
            pos: find("embed.pos"),
            blocks,
            lnf_g: find("final_ln.g"),
            lnf_b: find("final_ln.b"),
            head: find("lm_head.w"),
        };
        Model {
            cfg,
            params,
            layout,
        }
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut c = Checkpoint::new(step);
        for t in &self.params {
            c.tensors.insert(
                t.name.clone(),
                TensorData::new(
                    t.shape.iter().map(|&s| s as u64).collect(),
                    t.data.iter().map(|&x| x.to_f64() as f32).collect(),
                ),
            );
        }
        c
    }

    pub fn from_checkpoint(cfg: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let specs = tensor_specs(&cfg);
        if ckpt.tensors.len() != specs.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                ckpt.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, decay) in specs {
            let t = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))?;
            let want: Vec<u64> = shape.iter().map(|&s| s as u64).collect();
            if t.shape != want {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor {name}: shape {:?} vs expected {:?}",
                    t.shape, want
                )));
            }
            params.push(Tensor {
                name,
                shape,
                decay,
                data: t.data.iter().map(|&x| T::from_f64(x as f64)).collect(),
            });
        }
        Ok(Self::assemble(cfg, params))
    }

    /// Zeroed gradient (or moment) buffers matching the parameter layout.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    fn p(&self, i: usize) -> &[T] {
        &self.params[i].data
    }

    /// Flattens the gradients of trunk tensors in lexicographic name order,
    /// matching `checkpoint::flatten_trunk` on an exported checkpoint.
    pub fn flatten_trunk_grads(&self, grads: &[Vec<T>], sel: &TrunkSelector) -> Result<Vec<f64>> {
        let mut named: Vec<(&str, usize)> = self
            .params
            .iter()
            .enumerate()
            .filter(|(_, t)| sel.matches(&t.name))
            .map(|(i, t)| (t.name.as_str(), i))
            .collect();
        if named.is_empty() {
            return Err(Error::EmptySelection);
        }
        named.sort_by_key(|(n, _)| *n);
        let mut out = Vec::new();
        for (_, i) in named {
            out.extend(grads[i].iter().map(|&x| Real::to_f64(x)));
        }
        Ok(out)
    }

    /// Flattens the live trunk parameter values in the same order as
    /// `flatten_trunk_grads` / `checkpoint::flatten_trunk`.
    pub fn flatten_trunk_params(&self, sel: &TrunkSelector) -> Result<Vec<f64>> {
        let mut named: Vec<(&str, usize)> = self
            .params
            .iter()
            .enumerate()
            .filter(|(_, t)| sel.matches(&t.name))
            .map(|(i, t)| (t.name.as_str(), i))
            .collect();
        if named.is_empty() {
            return Err(Error::EmptySelection);
        }
        named.sort_by_key(|(n, _)| *n);
        let mut out = Vec::new();
        for (_, i) in named {
            out.extend(self.params[i].data.iter().map(|&x| Real::to_f64(x)));
        }
        Ok(out)
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardPass<T>> {
        let cfg = &self.cfg;
        let (b, s, d) = (batch.batch_size, cfg.seq_len, cfg.d_model);
        if batch.tokens.len() != b * s {
            return Err(Error::InvalidConfig("batch token length mismatch".into()));
        }
        if batch.tokens.iter().any(|&t| t as usize >= cfg.vocab) {
            return Err(Error::InvalidConfig("token id out of vocab range".into()));
        }
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let tok = self.p(self.layout.tok);
        let pos = self.p(self.layout.pos);
        let mut x = vec![T::zero(); b * s * d];
        for bi in 0..b {
            for si in 0..s {
                let id = batch.tokens[bi * s + si] as usize;
                let out = &mut x[(bi * s + si) * d..(bi * s + si + 1) * d];
                for (o, (&tv, &pv)) in out
                    .iter_mut()
                    .zip(tok[id * d..(id + 1) * d].iter().zip(&pos[si * d..(si + 1) * d]))
                {
                    *o = tv + pv;
                }
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for blk in &self.layout.blocks {
            // attention sublayer
            let (xh1, inv1) = layer_norm(&x, self.p(blk.ln1_g), self.p(blk.ln1_b), d);
            let h1 = apply_gain(&xh1, self.p(blk.ln1_g), self.p(blk.ln1_b), d);
            let q = matmul(&h1, self.p(blk.wq), b * s, d, d);
            let k = matmul(&h1, self.p(blk.wk), b * s, d, d);
            let v = matmul(&h1, self.p(blk.wv), b * s, d, d);
            let mut probs = vec![T::zero(); b * heads * s * s];
            let mut ctx = vec![T::zero(); b * s * d];
            for bi in 0..b {
                for h in 0..heads {
                    for i in 0..s {
                        let qi = &q[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        let row = &mut probs
                            [((bi * heads + h) * s + i) * s..((bi * heads + h) * s + i + 1) * s];
                        let mut maxv = T::neg_infinity();
                        for j in 0..=i {
                            let kj =
                                &k[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                            let mut sc = T::zero();
                            for (a, bb) in qi.iter().zip(kj) {
                                sc = sc + *a * *bb;
                            }
                            row[j] = sc * scale;
                            if row[j] > maxv {
                                maxv = row[j];
                            }
                        }
                        let mut sum = T::zero();
                        for item in row.iter_mut().take(i + 1) {
                            *item = (*item - maxv).exp();
                            sum = sum + *item;
                        }
                        let cvec = &mut ctx
                            [(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        for j in 0..=i {
                            row[j] = row[j] / sum;
                            let vj =
                                &v[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                            for (c, &vv) in cvec.iter_mut().zip(vj) {
                                *c = *c + row[j] * vv;
                            }
                        }
                    }
                }
            }
            let attn_out = matmul(&ctx, self.p(blk.wo), b * s, d, d);
            let x1: Vec<T> = x.iter().zip(&attn_out).map(|(a, o)| *a + *o).collect();

            // MLP sublayer
            let (xh2, inv2) = layer_norm(&x1, self.p(blk.ln2_g), self.p(blk.ln2_b), d);
            let h2 = apply_gain(&xh2, self.p(blk.ln2_g), self.p(blk.ln2_b), d);
            let u = matmul(&h2, self.p(blk.w_in), b * s, d, cfg.d_ff);
            let a: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
            let mlp_out = matmul(&a, self.p(blk.w_out), b * s, cfg.d_ff, d);
            let x2: Vec<T> = x1.iter().zip(&mlp_out).map(|(p, o)| *p + *o).collect();

            layers.push(LayerCache {
                xh1,
                inv1,
                h1,
                q,
                k,
                v,
                probs,
                ctx,
                xh2,
                inv2,
                h2,
                u,
                a,
            });
            x = x2;
        }

        let (xhf, invf) = layer_norm(&x, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b), d);
        let hf = apply_gain(&xhf, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b), d);
        let logits = matmul(&hf, self.p(self.layout.head), b * s, d, cfg.vocab);
        Ok(ForwardPass {
            layers,
            xhf,
            invf,
            hf,
            logits,
        })
    }

    /// Composite loss L = L_LM + lambda * L_probe. The LM term averages
    /// next-token cross-entropy over the non-probe sequences; the probe term
    /// averages cross-entropy at the single value position of each probe
    /// sequence.
    pub fn forward_loss(&self, batch: &Batch, lambda: f64) -> Result<LossBreakdown> {
        let pass = self.forward(batch)?;
        let (loss, _) = self.loss_and_dlogits(batch, lambda, &pass.logits, false)?;
        Ok(loss)
    }

    /// Gradients of the composite loss for every parameter, plus the loss.
    pub fn backward(&self, batch: &Batch, lambda: f64) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
        let pass = self.forward(batch)?;
        let (loss, dlogits) = self.loss_and_dlogits(batch, lambda, &pass.logits, true)?;
        let dlogits = dlogits.unwrap();
        let grads = self.backprop(batch, &pass, dlogits)?;
        for (g, t) in grads.iter().zip(&self.params) {
            if g.iter().any(|&x| !Real::to_f64(x).is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", t.name),
                    step: 0,
                });
            }
        }
        Ok((loss, grads))
    }

    fn loss_and_dlogits(
        &self,
        batch: &Batch,
        lambda: f64,
        logits: &[T],
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Vec<T>>)> {
        let (b, s, vsz) = (batch.batch_size, self.cfg.seq_len, self.cfg.vocab);
        let n_lm: usize = batch
            .is_probe
            .iter()
            .filter(|p| !**p)
            .count()
            * (s - 1);
        let n_probe = batch.is_probe.iter().filter(|p| **p).count();
        let mut dlogits = if want_grad {
            Some(vec![T::zero(); b * s * vsz])
        } else {
            None
        };
        let mut lm_sum = 0.0f64;
        let mut probe_sum = 0.0f64;
        for bi in 0..b {
            let positions: Vec<usize> = if batch.is_probe[bi] {
                vec![batch.probe_pos[bi]]
            } else {
                (0..s - 1).collect()
            };
            let weight = if batch.is_probe[bi] {
                lambda / n_probe as f64
            } else {
                1.0 / n_lm as f64
            };
            for &si in &positions {
                let target = batch.tokens[bi * s + si + 1] as usize;
                let row = &logits[(bi * s + si) * vsz..(bi * s + si + 1) * vsz];
                let maxv = row
                    .iter()
                    .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
                let mut sum = T::zero();
                for &x in row {
                    sum = sum + (x - maxv).exp();
                }
                let logz = sum.ln() + maxv;
                let nll = (logz - row[target]).to_f64();
                if batch.is_probe[bi] {
                    probe_sum += nll / n_probe as f64;
                } else {
                    lm_sum += nll / n_lm as f64;
                }
                if let Some(dl) = dlogits.as_mut() {
                    let w = T::from_f64(weight);
                    let drow = &mut dl[(bi * s + si) * vsz..(bi * s + si + 1) * vsz];
                    for (dv, &x) in drow.iter_mut().zip(row) {
                        *dv = *dv + w * ((x - logz).exp());
                    }
                    drow[target] = drow[target] - w;
                }
            }
        }
        let composite = lm_sum + lambda * probe_sum;
        if !composite.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: 0,
            });
        }
        Ok((
            LossBreakdown {
                composite,
                lm: lm_sum,
                probe: probe_sum,
                lm_positions: n_lm,
                probe_sequences: n_probe,
            },
            dlogits,
        ))
    }

    fn backprop(
        &self,
        batch: &Batch,
        pass: &ForwardPass<T>,
        dlogits: Vec<T>,
    ) -> Result<Vec<Vec<T>>> {
        let cfg = &self.cfg;
        let (b, s, d) = (batch.batch_size, cfg.seq_len, cfg.d_model);
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut grads = self.zeros_like();

        // head
        matmul_db(&pass.hf, &dlogits, b * s, d, cfg.vocab, &mut grads[self.layout.head]);
        let dhf = matmul_da(&dlogits, self.p(self.layout.head), b * s, d, cfg.vocab);
        // final layer norm
        let mut dx = {
            let (dg, db) = pair_muts(&mut grads, self.layout.lnf_g, self.layout.lnf_b);
            ln_backward(&dhf, &pass.xhf, &pass.invf, self.p(self.layout.lnf_g), d, dg, db)
        };

        for (li, blk) in self.layout.blocks.iter().enumerate().rev() {
            let lc = &pass.layers[li];
            // MLP sublayer: x2 = x1 + gelu(ln2(x1) Win) Wout
            let da_out = &dx; // d mlp_out
            let mut da = matmul_da(da_out, self.p(blk.w_out), b * s, cfg.d_ff, d);
            matmul_db(&lc.a, da_out, b * s, cfg.d_ff, d, &mut grads[blk.w_out]);
            for (g, &z) in da.iter_mut().zip(&lc.u) {
                *g = *g * gelu_grad(z);
            }
            let du = da;
            let dh2 = matmul_da(&du, self.p(blk.w_in), b * s, d, cfg.d_ff);
            matmul_db(&lc.h2, &du, b * s, d, cfg.d_ff, &mut grads[blk.w_in]);
            let dx1_from_mlp = {
                let (dg, db) = pair_muts(&mut grads, blk.ln2_g, blk.ln2_b);
                ln_backward(&dh2, &lc.xh2, &lc.inv2, self.p(blk.ln2_g), d, dg, db)
            };
            let dx1: Vec<T> = dx
                .iter()
                .zip(&dx1_from_mlp)
                .map(|(a, m)| *a + *m)
                .collect();

            // attention sublayer: x1 = x0 + (attn(ln1(x0))) Wo
            let dattn_out = &dx1;
            let dctx = matmul_da(dattn_out, self.p(blk.wo), b * s, d, d);
            matmul_db(&lc.ctx, dattn_out, b * s, d, d, &mut grads[blk.wo]);
            let mut dq = vec![T::zero(); b * s * d];
            let mut dk = vec![T::zero(); b * s * d];
            let mut dv = vec![T::zero(); b * s * d];
            for bi in 0..b {
                for h in 0..heads {
                    for i in 0..s {
                        let prow = &lc.probs
                            [((bi * heads + h) * s + i) * s..((bi * heads + h) * s + i + 1) * s];
                        let dctx_i =
                            &dctx[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        // dp_j and softmax backward
                        let mut dp = vec![T::zero(); i + 1];
                        let mut inner = T::zero();
                        for (j, dpj) in dp.iter_mut().enumerate() {
                            let vj =
                                &lc.v[(bi * s + j) * d + h * dh..(bi * s + j) * d + (h + 1) * dh];
                            let mut acc = T::zero();
                            for (a, bb) in dctx_i.iter().zip(vj) {
                                acc = acc + *a * *bb;
                            }
                            *dpj = acc;
                            inner = inner + prow[j] * acc;
                        }
                        let qi =
                            &lc.q[(bi * s + i) * d + h * dh..(bi * s + i) * d + (h + 1) * dh];
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - inner) * scale;
                            let kj = (bi * s + j) * d + h * dh;
                            for (t, (dqv, kv)) in dq[(bi * s + i) * d + h * dh
                                ..(bi * s + i) * d + (h + 1) * dh]
                                .iter_mut()
                                .zip(&lc.k[kj..kj + dh])
                                .enumerate()
                            {
                                *dqv = *dqv + ds * *kv;
                                dk[kj + t] = dk[kj + t] + ds * qi[t];
                            }
                            // dv_j += p_j * dctx_i
                            let vj = (bi * s + j) * d + h * dh;
                            for (t, dvv) in dv[vj..vj + dh].iter_mut().enumerate() {
                                *dvv = *dvv + prow[j] * dctx_i[t];
                            }
                        }
                    }
                }
            }
            let mut dh1 = matmul_da(&dq, self.p(blk.wq), b * s, d, d);
            matmul_db(&lc.h1, &dq, b * s, d, d, &mut grads[blk.wq]);
            let dh1_k = matmul_da(&dk, self.p(blk.wk), b * s, d, d);
            matmul_db(&lc.h1, &dk, b * s, d, d, &mut grads[blk.wk]);
            let dh1_v = matmul_da(&dv, self.p(blk.wv), b * s, d, d);
            matmul_db(&lc.h1, &dv, b * s, d, d, &mut grads[blk.wv]);
            for ((g, a), bb) in dh1.iter_mut().zip(&dh1_k).zip(&dh1_v) {
                *g = *g + *a + *bb;
            }
            let dx0_from_attn = {
                let (dg, db) = pair_muts(&mut grads, blk.ln1_g, blk.ln1_b);
                ln_backward(&dh1, &lc.xh1, &lc.inv1, self.p(blk.ln1_g), d, dg, db)
            };
            dx = dx1
                .iter()
                .zip(&dx0_from_attn)
                .map(|(a, m)| *a + *m)
                .collect();
        }

        // embeddings
        let (gtok, gpos) = {
            let (lo, hi) = if self.layout.tok < self.layout.pos {
                let (a, b2) = grads.split_at_mut(self.layout.pos);
                (&mut a[self.layout.tok], &mut b2[0])
            } else {
                unreachable!()
            };
            (lo, hi)
        };
        for bi in 0..b {
            for si in 0..s {
                let id = batch.tokens[bi * s + si] as usize;
                let src = &dx[(bi * s + si) * d..(bi * s + si + 1) * d];
                for (t, &g) in src.iter().enumerate() {
                    gtok[id * d + t] = gtok[id * d + t] + g;
                    gpos[si * d + t] = gpos[si * d + t] + g;
                }
            }
        }
        Ok(grads)
    }

    /// Probe accuracy on an eval batch: exact match of the argmax logit at
    /// each probe value position.
    pub fn probe_accuracy(&self, batch: &Batch) -> Result<(usize, usize)> {
        let pass = self.forward(batch)?;
        let (s, vsz) = (self.cfg.seq_len, self.cfg.vocab);
        let mut correct = 0;
        let mut total = 0;
        for bi in 0..batch.batch_size {
            if !batch.is_probe[bi] {
                continue;
            }
            let si = batch.probe_pos[bi];
            let row = &pass.logits[(bi * s + si) * vsz..(bi * s + si + 1) * vsz];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            if best == batch.tokens[bi * s + si + 1] as usize {
                correct += 1;
            }
            total += 1;
        }
        Ok((correct, total))
    }
}

pub struct ForwardPass<T> {
    layers: Vec<LayerCache<T>>,
    xhf: Vec<T>,
    invf: Vec<T>,
    hf: Vec<T>,
    pub logits: Vec<T>,
}

struct LayerCache<T> {
    xh1: Vec<T>,
    inv1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    xh2: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
}

/// Normalized activations and inverse std per row; gain/bias applied
/// separately so the backward pass can reuse xh.
fn layer_norm<T: Real>(x: &[T], _g: &[T], _b: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xh = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let dn = T::from_f64(d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row {
            var = var + (v - mean) * (v - mean);
        }
        var = var / dn;
        let istd = T::one() / (var + eps).sqrt();
        inv[r] = istd;
        for (o, &v) in xh[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
    }
    (xh, inv)
}

fn apply_gain<T: Real>(xh: &[T], g: &[T], b: &[T], d: usize) -> Vec<T> {
    xh.chunks_exact(d)
        .flat_map(|row| {
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(&x, (&gg, &bb))| x * gg + bb)
        })
        .collect()
}

/// Disjoint mutable references to buffers i < j of the gradient vector.
fn pair_muts<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

/// dL/dx for y = g * xh + b given dL/dy; accumulates dg, db.
fn ln_backward<T: Real>(
    dy: &[T],
    xh: &[T],
    inv: &[T],
    g: &[T],
    d: usize,
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / d;
    let dn = T::from_f64(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhr = &xh[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..d {
            dg[i] = dg[i] + dyr[i] * xhr[i];
            db[i] = db[i] + dyr[i];
            let dxh = dyr[i] * g[i];
            m1 = m1 + dxh;
            m2 = m2 + dxh * xhr[i];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            dx[r * d + i] = inv[r] * (dxh - m1 - xhr[i] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// out[m,n] = sum_k a[m,k] b[k,n]; output rows are independent, so rows are
/// computed in parallel (bitwise identical to the sequential order).
fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    use rayon::prelude::*;
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(mi, orow)| {
            for ki in 0..k {
                let av = a[mi * k + ki];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[ki * n..(ki + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        });
    out
}

/// dA[m,k] = sum_n dY[m,n] B[k,n]
fn matmul_da<T: Real>(dy: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    use rayon::prelude::*;
    let mut da = vec![T::zero(); m * k];
    da.par_chunks_mut(k)
        .enumerate()
        .for_each(|(mi, darow)| {
            let dyr = &dy[mi * n..(mi + 1) * n];
            for (ki, slot) in darow.iter_mut().enumerate() {
                let brow = &b[ki * n..(ki + 1) * n];
                let mut acc = T::zero();
                for (&dv, &bv) in dyr.iter().zip(brow) {
                    acc = acc + dv * bv;
                }
                *slot = acc;
            }
        });
    da
}

/// dB[k,n] += sum_m a[m,k] dY[m,n]
fn matmul_db<T: Real>(a: &[T], dy: &[T], m: usize, k: usize, n: usize, db: &mut [T]) {
    for mi in 0..m {
        let dyr = &dy[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            if av == T::zero() {
                continue;
            }
            let dbr = &mut db[ki * n..(ki + 1) * n];
            for (o, &dv) in dbr.iter_mut().zip(dyr) {
                *o = *o + av * dv;
            }
        }
    }
}
