//! Forward pass, analytic backward pass, and evaluation for the two-layer
//! pre-norm Transformer encoder over token pairs.
//!
//! Everything is written against the flat parameter vector: gradients come
//! back in the same layout, so optimizer and geometry code never touch
//! tensor shapes. Math is generic over [`Real`]; training runs in f32 and
//! analysis replays widen to f64 through the identical code path.

use super::config::{ModelConfig, LN_EPS};
use super::layout::ParamLayout;
use super::params::ParamVector;
use super::real::Real;
use crate::data::{LabeledBatch, PairDataset};
use crate::error::{Error, Result};
use std::sync::Arc;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Arc<ParamLayout>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        Ok(Model { config, layout })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamVector<T> {
        ParamVector::init(self.layout.clone(), seed)
    }
}

/// Per-task evaluation results over a set of dataset indices.
#[derive(Debug, Clone)]
pub struct EvalStats {
    pub accuracy: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub examples: usize,
}

/// Reusable activation and gradient buffers. Allocation happens on growth
/// only, so steady-state training does no per-step allocation.
pub struct Workspace<T> {
    rows_cap: usize,
    /// Residual stream, rows x d. Holds the block output in place.
    x: Vec<T>,
    layers: Vec<LayerCache<T>>,
    fin_xhat: Vec<T>,
    fin_inv: Vec<T>,
    fin_out: Vec<T>,
    /// tasks x batch x vocab
    logits: Vec<T>,
    dlogits: Vec<T>,
    /// Position-0 rows of the final LN output, gathered contiguously for
    /// the head matmuls. batch x d.
    h0: Vec<T>,
    d_h0: Vec<T>,
    // Backward scratch.
    dx: Vec<T>,
    d_fin: Vec<T>,
    d_act: Vec<T>,
    d_n: Vec<T>,
    d_ctx: Vec<T>,
    d_q: Vec<T>,
    d_k: Vec<T>,
    d_v: Vec<T>,
    /// Transposed weight scratch, max(d*ff, d*d, d*vocab).
    wt: Vec<T>,
}

struct LayerCache<T> {
    ln1_xhat: Vec<T>,
    ln1_inv: Vec<T>,
    n1out: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// batch x heads x 2 x 2 attention probabilities
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_inv: Vec<T>,
    n2out: Vec<T>,
    ffn_pre: Vec<T>,
    ffn_act: Vec<T>,
}

impl<T: Real> Workspace<T> {
    pub fn new() -> Self {
        Workspace {
            rows_cap: 0,
            x: Vec::new(),
            layers: Vec::new(),
            fin_xhat: Vec::new(),
            fin_inv: Vec::new(),
            fin_out: Vec::new(),
            logits: Vec::new(),
            dlogits: Vec::new(),
            h0: Vec::new(),
            d_h0: Vec::new(),
            dx: Vec::new(),
            d_fin: Vec::new(),
            d_act: Vec::new(),
            d_n: Vec::new(),
            d_ctx: Vec::new(),
            d_q: Vec::new(),
            d_k: Vec::new(),
            d_v: Vec::new(),
            wt: Vec::new(),
        }
    }

    fn ensure(&mut self, cfg: &ModelConfig, batch: usize) {
        let rows = batch * cfg.positions;
        if rows <= self.rows_cap && self.layers.len() == cfg.layers {
            return;
        }
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let grow = |v: &mut Vec<T>, n: usize| v.resize(n, T::zero());
        grow(&mut self.x, rows * d);
        self.layers = (0..cfg.layers)
            .map(|_| LayerCache {
                ln1_xhat: vec![T::zero(); rows * d],
                ln1_inv: vec![T::zero(); rows],
                n1out: vec![T::zero(); rows * d],
                q: vec![T::zero(); rows * d],
                k: vec![T::zero(); rows * d],
                v: vec![T::zero(); rows * d],
                probs: vec![T::zero(); batch * cfg.heads * 4],
                ctx: vec![T::zero(); rows * d],
                ln2_xhat: vec![T::zero(); rows * d],
                ln2_inv: vec![T::zero(); rows],
                n2out: vec![T::zero(); rows * d],
                ffn_pre: vec![T::zero(); rows * ff],
                ffn_act: vec![T::zero(); rows * ff],
            })
            .collect();
        grow(&mut self.fin_xhat, rows * d);
        grow(&mut self.fin_inv, rows);
        grow(&mut self.fin_out, rows * d);
        grow(&mut self.logits, cfg.tasks.len() * batch * cfg.vocab);
        grow(&mut self.dlogits, cfg.tasks.len() * batch * cfg.vocab);
        grow(&mut self.h0, batch * d);
        grow(&mut self.d_h0, batch * d);
        grow(&mut self.dx, rows * d);
        grow(&mut self.d_fin, rows * d);
        grow(&mut self.d_act, rows * ff);
        grow(&mut self.d_n, rows * d.max(ff));
        grow(&mut self.d_ctx, rows * d);
        grow(&mut self.d_q, rows * d);
        grow(&mut self.d_k, rows * d);
        grow(&mut self.d_v, rows * d);
        grow(&mut self.wt, (d * ff).max(d * d).max(d * cfg.vocab));
        self.rows_cap = rows;
    }

    /// Logits for one task after a forward pass over `batch` pairs.
    pub fn logits(&self, cfg: &ModelConfig, batch: usize, task: usize) -> &[T] {
        let v = cfg.vocab;
        &self.logits[task * batch * v..(task + 1) * batch * v]
    }
}

impl<T: Real> Default for Workspace<T> {
    fn default() -> Self {
        Workspace::new()
    }
}

impl Model {
    /// Forward pass over token pairs; logits land in the workspace.
    pub fn forward<T: Real>(
        &self,
        params: &ParamVector<T>,
        pairs: &[(u16, u16)],
        ws: &mut Workspace<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let batch = pairs.len();
        if batch == 0 {
            return Err(Error::data("empty batch"));
        }
        for &(a, b) in pairs {
            if a as usize >= cfg.vocab || b as usize >= cfg.vocab {
                return Err(Error::data(format!(
                    "token out of range for vocab {}: ({a}, {b})",
                    cfg.vocab
                )));
            }
        }
        ws.ensure(cfg, batch);
        let d = cfg.d_model;
        let rows = batch * 2;

        // Token + position embeddings.
        {
            let tok = params.segment("tok_embed");
            let pos = params.segment("pos_embed");
            for (bi, &(a, b)) in pairs.iter().enumerate() {
                for (s, token) in [(0usize, a as usize), (1usize, b as usize)] {
                    let row = &mut ws.x[(bi * 2 + s) * d..(bi * 2 + s) * d + d];
                    let te = &tok[token * d..token * d + d];
                    let pe = &pos[s * d..s * d + d];
                    for j in 0..d {
                        row[j] = te[j] + pe[j];
                    }
                }
            }
        }

        for l in 0..cfg.layers {
            self.layer_forward(params, l, batch, ws);
        }

        // Final LayerNorm over every row; heads read position 0.
        layer_norm_forward(
            &ws.x[..rows * d],
            params.segment("final_ln.scale"),
            params.segment("final_ln.bias"),
            d,
            &mut ws.fin_out[..rows * d],
            &mut ws.fin_xhat[..rows * d],
            &mut ws.fin_inv[..rows],
        );

        // Gather readout rows (position 0) contiguously, then one matmul
        // per task head.
        let v = cfg.vocab;
        for bi in 0..batch {
            ws.h0[bi * d..bi * d + d]
                .copy_from_slice(&ws.fin_out[(bi * 2) * d..(bi * 2) * d + d]);
        }
        for (t, task) in cfg.tasks.iter().enumerate() {
            let w = params.segment(&format!("heads.{task}.weight"));
            let bias = params.segment(&format!("heads.{task}.bias"));
            let out = &mut ws.logits[t * batch * v..(t + 1) * batch * v];
            broadcast_rows(out, bias, batch, v);
            matmul_acc(out, &ws.h0[..batch * d], w, batch, d, v);
        }
        Ok(())
    }

    fn layer_forward<T: Real>(
        &self,
        params: &ParamVector<T>,
        l: usize,
        batch: usize,
        ws: &mut Workspace<T>,
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let rows = batch * 2;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let cache = &mut ws.layers[l];
        let seg = |n: &str| params.segment(&format!("layer{l}.{n}"));

        layer_norm_forward(
            &ws.x[..rows * d],
            seg("ln1.scale"),
            seg("ln1.bias"),
            d,
            &mut cache.n1out[..rows * d],
            &mut cache.ln1_xhat[..rows * d],
            &mut cache.ln1_inv[..rows],
        );

        let n1 = &cache.n1out[..rows * d];
        for (dst, w) in [
            (&mut cache.q, seg("attn.wq")),
            (&mut cache.k, seg("attn.wk")),
            (&mut cache.v, seg("attn.wv")),
        ] {
            dst[..rows * d].fill(T::zero());
            matmul_acc(&mut dst[..rows * d], n1, w, rows, d, d);
        }

        // Two-token attention: per sample and head, a 2x2 score matrix.
        for bi in 0..batch {
            let r0 = bi * 2 * d;
            let r1 = r0 + d;
            for h in 0..heads {
                let hs = h * dh;
                let q0 = &cache.q[r0 + hs..r0 + hs + dh];
                let q1 = &cache.q[r1 + hs..r1 + hs + dh];
                let k0 = &cache.k[r0 + hs..r0 + hs + dh];
                let k1 = &cache.k[r1 + hs..r1 + hs + dh];
                let p = &mut cache.probs[(bi * heads + h) * 4..(bi * heads + h) * 4 + 4];
                for (i, q) in [(0usize, q0), (1usize, q1)] {
                    let s0 = dot(q, k0) * scale;
                    let s1 = dot(q, k1) * scale;
                    let m = s0.max(s1);
                    let e0 = (s0 - m).exp();
                    let e1 = (s1 - m).exp();
                    let z = e0 + e1;
                    p[i * 2] = e0 / z;
                    p[i * 2 + 1] = e1 / z;
                }
                for i in 0..2 {
                    let p0 = p[i * 2];
                    let p1 = p[i * 2 + 1];
                    let base = (bi * 2 + i) * d + hs;
                    for j in 0..dh {
                        cache.ctx[base + j] =
                            p0 * cache.v[r0 + hs + j] + p1 * cache.v[r1 + hs + j];
                    }
                }
            }
        }

        // Residual add of the attention projection, in place on the stream.
        matmul_acc(
            &mut ws.x[..rows * d],
            &cache.ctx[..rows * d],
            seg("attn.wo"),
            rows,
            d,
            d,
        );

        layer_norm_forward(
            &ws.x[..rows * d],
            seg("ln2.scale"),
            seg("ln2.bias"),
            d,
            &mut cache.n2out[..rows * d],
            &mut cache.ln2_xhat[..rows * d],
            &mut cache.ln2_inv[..rows],
        );

        broadcast_rows(&mut cache.ffn_pre[..rows * ff], seg("ffn.b1"), rows, ff);
        matmul_acc(
            &mut cache.ffn_pre[..rows * ff],
            &cache.n2out[..rows * d],
            seg("ffn.w1"),
            rows,
            d,
            ff,
        );
        for (a, &p) in cache.ffn_act[..rows * ff]
            .iter_mut()
            .zip(&cache.ffn_pre[..rows * ff])
        {
            *a = gelu(p);
        }

        // Residual add of the FFN output.
        add_row_broadcast(&mut ws.x[..rows * d], seg("ffn.b2"), rows, d);
        matmul_acc(
            &mut ws.x[..rows * d],
            &cache.ffn_act[..rows * ff],
            seg("ffn.w2"),
            rows,
            ff,
            d,
        );
    }

    /// Forward + analytic backward. Returns per-task mean cross-entropy for
    /// every configured task; only `active` tasks contribute gradient. The
    /// gradient vector is overwritten.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &ParamVector<T>,
        batch: &LabeledBatch,
        active: &[usize],
        ws: &mut Workspace<T>,
        grad: &mut ParamVector<T>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let n_tasks = cfg.tasks.len();
        if batch.labels.len() != n_tasks {
            return Err(Error::data(format!(
                "batch carries {} label sets, model has {} tasks",
                batch.labels.len(),
                n_tasks
            )));
        }
        if active.is_empty() || active.iter().any(|&t| t >= n_tasks) {
            return Err(Error::config("active task set empty or out of range"));
        }
        self.forward(params, &batch.pairs, ws)?;

        let b = batch.pairs.len();
        let d = cfg.d_model;
        let v = cfg.vocab;
        let rows = b * 2;
        grad.fill(T::zero());
        let inv_b = T::from_f64(1.0 / b as f64);

        // Softmax cross-entropy per task; gradient rows only for active.
        let mut losses = vec![0.0f64; n_tasks];
        ws.dlogits[..n_tasks * b * v].fill(T::zero());
        for t in 0..n_tasks {
            let want_grad = active.contains(&t);
            let logit_base = t * b * v;
            let mut total = 0.0f64;
            for bi in 0..b {
                let y = batch.labels[t][bi] as usize;
                if y >= v {
                    return Err(Error::data(format!("label {y} out of range")));
                }
                let row = &ws.logits[logit_base + bi * v..logit_base + bi * v + v];
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for &r in row {
                    z = z + (r - m).exp();
                }
                let log_z = m + z.ln();
                total += (log_z - row[y]).into_f64();
                if want_grad {
                    let dst = &mut ws.dlogits[logit_base + bi * v..logit_base + bi * v + v];
                    for (dj, &r) in dst.iter_mut().zip(row) {
                        *dj = (r - log_z).exp() * inv_b;
                    }
                    dst[y] = dst[y] - inv_b;
                }
            }
            losses[t] = total / b as f64;
        }

        // Heads backward. d_h0 accumulates the readout-row gradient across
        // tasks; it scatters into d_fin (position-0 rows) afterwards.
        ws.d_h0[..b * d].fill(T::zero());
        for (t, task) in cfg.tasks.iter().enumerate() {
            if !active.contains(&t) {
                continue;
            }
            let dz = &ws.dlogits[t * b * v..(t + 1) * b * v];
            matmul_tn_acc(
                grad.segment_mut(&format!("heads.{task}.weight")),
                &ws.h0[..b * d],
                dz,
                b,
                d,
                v,
            );
            col_sum_acc(grad.segment_mut(&format!("heads.{task}.bias")), dz, b, v);
            transpose_into(
                &mut ws.wt[..d * v],
                params.segment(&format!("heads.{task}.weight")),
                d,
                v,
            );
            matmul_acc(&mut ws.d_h0[..b * d], dz, &ws.wt[..d * v], b, v, d);
        }
        ws.d_fin[..rows * d].fill(T::zero());
        for bi in 0..b {
            ws.d_fin[(bi * 2) * d..(bi * 2) * d + d]
                .copy_from_slice(&ws.d_h0[bi * d..bi * d + d]);
        }

        // Final LN backward into the residual-stream gradient.
        ws.dx[..rows * d].fill(T::zero());
        {
            let (gscale, gbias) = two_segments_mut(grad, "final_ln.scale", "final_ln.bias");
            layer_norm_backward(
                &ws.d_fin[..rows * d],
                &ws.fin_xhat[..rows * d],
                &ws.fin_inv[..rows],
                params.segment("final_ln.scale"),
                d,
                &mut ws.dx[..rows * d],
                gscale,
                gbias,
            );
        }

        for l in (0..cfg.layers).rev() {
            self.layer_backward(params, l, b, ws, grad);
        }

        // Embedding backward.
        {
            let gtok = grad.segment_mut("tok_embed");
            for (bi, &(a, bb)) in batch.pairs.iter().enumerate() {
                let dr0 = &ws.dx[(bi * 2) * d..(bi * 2) * d + d];
                axpy(&mut gtok[a as usize * d..a as usize * d + d], T::one(), dr0);
                let dr1 = &ws.dx[(bi * 2 + 1) * d..(bi * 2 + 1) * d + d];
                axpy(
                    &mut gtok[bb as usize * d..bb as usize * d + d],
                    T::one(),
                    dr1,
                );
            }
        }
        {
            let gpos = grad.segment_mut("pos_embed");
            for bi in 0..b {
                for s in 0..2 {
                    let dr = &ws.dx[(bi * 2 + s) * d..(bi * 2 + s) * d + d];
                    axpy(&mut gpos[s * d..s * d + d], T::one(), dr);
                }
            }
        }
        Ok(losses)
    }

    fn layer_backward<T: Real>(
        &self,
        params: &ParamVector<T>,
        l: usize,
        batch: usize,
        ws: &mut Workspace<T>,
        grad: &mut ParamVector<T>,
    ) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let rows = batch * 2;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let name = |n: &str| format!("layer{l}.{n}");

        // FFN backward. ws.dx currently holds d(x_out); the residual means
        // d(x_mid) = dx + LN2-chain, accumulated into dx in place after the
        // weight gradients (which read dx as d(output)) are done.
        {
            let cache = &ws.layers[l];
            matmul_tn_acc(
                grad.segment_mut(&name("ffn.w2")),
                &cache.ffn_act[..rows * ff],
                &ws.dx[..rows * d],
                rows,
                ff,
                d,
            );
            col_sum_acc(grad.segment_mut(&name("ffn.b2")), &ws.dx[..rows * d], rows, d);
        }
        transpose_into(&mut ws.wt[..ff * d], params.segment(&name("ffn.w2")), ff, d);
        ws.d_act[..rows * ff].fill(T::zero());
        matmul_acc(
            &mut ws.d_act[..rows * ff],
            &ws.dx[..rows * d],
            &ws.wt[..ff * d],
            rows,
            d,
            ff,
        );
        {
            let cache = &ws.layers[l];
            for (da, &p) in ws.d_act[..rows * ff]
                .iter_mut()
                .zip(&cache.ffn_pre[..rows * ff])
            {
                *da = *da * gelu_grad(p);
            }
            matmul_tn_acc(
                grad.segment_mut(&name("ffn.w1")),
                &cache.n2out[..rows * d],
                &ws.d_act[..rows * ff],
                rows,
                d,
                ff,
            );
            col_sum_acc(
                grad.segment_mut(&name("ffn.b1")),
                &ws.d_act[..rows * ff],
                rows,
                ff,
            );
        }
        transpose_into(&mut ws.wt[..d * ff], params.segment(&name("ffn.w1")), d, ff);
        ws.d_n[..rows * d].fill(T::zero());
        matmul_acc(
            &mut ws.d_n[..rows * d],
            &ws.d_act[..rows * ff],
            &ws.wt[..d * ff],
            rows,
            ff,
            d,
        );
        {
            let cache = &ws.layers[l];
            let (gscale, gbias) =
                two_segments_mut(grad, &name("ln2.scale"), &name("ln2.bias"));
            layer_norm_backward(
                &ws.d_n[..rows * d],
                &cache.ln2_xhat[..rows * d],
                &cache.ln2_inv[..rows],
                params.segment(&name("ln2.scale")),
                d,
                &mut ws.dx[..rows * d],
                gscale,
                gbias,
            );
        }

        // Attention backward; dx now holds d(x_mid).
        {
            let cache = &ws.layers[l];
            matmul_tn_acc(
                grad.segment_mut(&name("attn.wo")),
                &cache.ctx[..rows * d],
                &ws.dx[..rows * d],
                rows,
                d,
                d,
            );
        }
        transpose_into(&mut ws.wt[..d * d], params.segment(&name("attn.wo")), d, d);
        ws.d_ctx[..rows * d].fill(T::zero());
        matmul_acc(
            &mut ws.d_ctx[..rows * d],
            &ws.dx[..rows * d],
            &ws.wt[..d * d],
            rows,
            d,
            d,
        );

        ws.d_q[..rows * d].fill(T::zero());
        ws.d_k[..rows * d].fill(T::zero());
        ws.d_v[..rows * d].fill(T::zero());
        {
            let cache = &ws.layers[l];
            for bi in 0..batch {
                let r0 = bi * 2 * d;
                let r1 = r0 + d;
                for h in 0..heads {
                    let hs = h * dh;
                    let p = &cache.probs[(bi * heads + h) * 4..(bi * heads + h) * 4 + 4];
                    let v0 = &cache.v[r0 + hs..r0 + hs + dh];
                    let v1 = &cache.v[r1 + hs..r1 + hs + dh];
                    let k0 = &cache.k[r0 + hs..r0 + hs + dh];
                    let k1 = &cache.k[r1 + hs..r1 + hs + dh];
                    for i in 0..2 {
                        let ri = if i == 0 { r0 } else { r1 };
                        let dctx = &ws.d_ctx[ri + hs..ri + hs + dh];
                        let dp0 = dot(dctx, v0);
                        let dp1 = dot(dctx, v1);
                        let (p0, p1) = (p[i * 2], p[i * 2 + 1]);
                        // dv_j += p_ij * dctx_i
                        axpy(&mut ws.d_v[r0 + hs..r0 + hs + dh], p0, dctx);
                        axpy(&mut ws.d_v[r1 + hs..r1 + hs + dh], p1, dctx);
                        // Softmax backward over the two scores.
                        let inner = p0 * dp0 + p1 * dp1;
                        let ds0 = p0 * (dp0 - inner) * scale;
                        let ds1 = p1 * (dp1 - inner) * scale;
                        let dq = &mut ws.d_q[ri + hs..ri + hs + dh];
                        for j in 0..dh {
                            dq[j] = ds1.mul_add(k1[j], ds0.mul_add(k0[j], dq[j]));
                        }
                        let qi = &cache.q[ri + hs..ri + hs + dh];
                        axpy(&mut ws.d_k[r0 + hs..r0 + hs + dh], ds0, qi);
                        axpy(&mut ws.d_k[r1 + hs..r1 + hs + dh], ds1, qi);
                    }
                }
            }
        }

        ws.d_n[..rows * d].fill(T::zero());
        for (dsrc, wname) in [
            (&ws.d_q, "attn.wq"),
            (&ws.d_k, "attn.wk"),
            (&ws.d_v, "attn.wv"),
        ] {
            {
                let cache = &ws.layers[l];
                matmul_tn_acc(
                    grad.segment_mut(&name(wname)),
                    &cache.n1out[..rows * d],
                    &dsrc[..rows * d],
                    rows,
                    d,
                    d,
                );
            }
            transpose_into(&mut ws.wt[..d * d], params.segment(&name(wname)), d, d);
            matmul_acc(
                &mut ws.d_n[..rows * d],
                &dsrc[..rows * d],
                &ws.wt[..d * d],
                rows,
                d,
                d,
            );
        }
        {
            let cache = &ws.layers[l];
            let (gscale, gbias) =
                two_segments_mut(grad, &name("ln1.scale"), &name("ln1.bias"));
            layer_norm_backward(
                &ws.d_n[..rows * d],
                &cache.ln1_xhat[..rows * d],
                &cache.ln1_inv[..rows],
                params.segment(&name("ln1.scale")),
                d,
                &mut ws.dx[..rows * d],
                gscale,
                gbias,
            );
        }
        // dx now holds d(x_in) for this layer.
    }

    /// Accuracy and mean loss per task over the given dataset indices.
    /// Argmax ties resolve to the lowest class index.
    pub fn evaluate<T: Real>(
        &self,
        params: &ParamVector<T>,
        dataset: &PairDataset,
        indices: &[u32],
        ws: &mut Workspace<T>,
    ) -> Result<EvalStats> {
        let cfg = &self.config;
        let n_tasks = cfg.tasks.len();
        if dataset.tasks.len() != n_tasks
            || dataset
                .tasks
                .iter()
                .zip(&cfg.tasks)
                .any(|(spec, &kind)| spec.op != kind)
        {
            return Err(Error::data("dataset task list does not match model tasks"));
        }
        if indices.is_empty() {
            return Err(Error::data("empty evaluation index set"));
        }
        let v = cfg.vocab;
        let mut correct = vec![0usize; n_tasks];
        let mut loss = vec![0.0f64; n_tasks];
        for chunk in indices.chunks(EVAL_CHUNK) {
            let pairs: Vec<(u16, u16)> =
                chunk.iter().map(|&i| dataset.pairs[i as usize]).collect();
            self.forward(params, &pairs, ws)?;
            let b = pairs.len();
            for t in 0..n_tasks {
                let logits = &ws.logits[t * b * v..(t + 1) * b * v];
                for (bi, &idx) in chunk.iter().enumerate() {
                    let y = dataset.labels[t][idx as usize] as usize;
                    let row = &logits[bi * v..bi * v + v];
                    if argmax_lowest(row) == y {
                        correct[t] += 1;
                    }
                    let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for &r in row {
                        z = z + (r - m).exp();
                    }
                    loss[t] += ((m + z.ln()) - row[y]).into_f64();
                }
            }
        }
        let n = indices.len();
        Ok(EvalStats {
            accuracy: correct.iter().map(|&c| c as f64 / n as f64).collect(),
            mean_loss: loss.iter().map(|&l| l / n as f64).collect(),
            examples: n,
        })
    }
}

/// First index of the maximum value; earlier index wins ties.
pub fn argmax_lowest<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

#[inline(always)]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(*xi, *yi);
    }
}

#[inline(always)]
fn axpy4<T: Real>(
    c: &mut [T],
    n: usize,
    a0: T,
    a1: T,
    a2: T,
    a3: T,
    x: &[T],
) {
    assert_eq!(c.len(), 4 * n);
    assert_eq!(x.len(), n);
    let (c0, rest) = c.split_at_mut(n);
    let (c1, rest) = rest.split_at_mut(n);
    let (c2, c3) = rest.split_at_mut(n);
    for j in 0..n {
        c0[j] = a0.mul_add(x[j], c0[j]);
        c1[j] = a1.mul_add(x[j], c1[j]);
        c2[j] = a2.mul_add(x[j], c2[j]);
        c3[j] = a3.mul_add(x[j], c3[j]);
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s = x.mul_add(*y, s);
    }
    s
}

/// c[m x n] += a[m x k] * b[k x n], all row-major. The widths used by the
/// standard architecture get a register-tiled path where the output row
/// stays in an accumulator array across the whole k loop; other widths fall
/// back to a blocked axpy form.
fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    match n {
        97 => matmul_acc_reg::<T, 97>(c, a, b, m, k),
        128 => matmul_acc_reg::<T, 128>(c, a, b, m, k),
        256 => matmul_acc_reg::<T, 256>(c, a, b, m, k),
        _ => matmul_acc_generic(c, a, b, m, k, n),
    }
}

/// c[k x n] += a[m x k]^T * b[m x n], all row-major.
fn matmul_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    assert!(c.len() >= k * n && a.len() >= m * k && b.len() >= m * n);
    match n {
        97 => matmul_tn_acc_reg::<T, 97>(c, a, b, m, k),
        128 => matmul_tn_acc_reg::<T, 128>(c, a, b, m, k),
        256 => matmul_tn_acc_reg::<T, 256>(c, a, b, m, k),
        _ => matmul_tn_acc_generic(c, a, b, m, k, n),
    }
}

#[inline(always)]
fn matmul_acc_reg<T: Real, const N: usize>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize) {
    for i in 0..m {
        let mut acc = [T::zero(); N];
        let arow = &a[i * k..i * k + k];
        for (p, &apv) in arow.iter().enumerate() {
            let brow: &[T; N] = b[p * N..p * N + N].try_into().unwrap();
            for j in 0..N {
                acc[j] = apv.mul_add(brow[j], acc[j]);
            }
        }
        let crow = &mut c[i * N..i * N + N];
        for j in 0..N {
            crow[j] = crow[j] + acc[j];
        }
    }
}

#[inline(always)]
fn matmul_tn_acc_reg<T: Real, const N: usize>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
) {
    for p in 0..k {
        let mut acc = [T::zero(); N];
        for i in 0..m {
            let apv = a[i * k + p];
            let brow: &[T; N] = b[i * N..i * N + N].try_into().unwrap();
            for j in 0..N {
                acc[j] = apv.mul_add(brow[j], acc[j]);
            }
        }
        let crow = &mut c[p * N..p * N + N];
        for j in 0..N {
            crow[j] = crow[j] + acc[j];
        }
    }
}

fn matmul_acc_generic<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let cblock = &mut c[i * n..(i + 4) * n];
        for p in 0..k {
            let brow = &b[p * n..p * n + n];
            axpy4(
                cblock,
                n,
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
                brow,
            );
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..i * n + n];
        let arow = &a[i * k..i * k + k];
        for p in 0..k {
            axpy(crow, arow[p], &b[p * n..p * n + n]);
        }
        i += 1;
    }
}

fn matmul_tn_acc_generic<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let brow = &b[i * n..i * n + n];
        let mut p = 0;
        while p + 4 <= k {
            let cblock = &mut c[p * n..(p + 4) * n];
            axpy4(cblock, n, arow[p], arow[p + 1], arow[p + 2], arow[p + 3], brow);
            p += 4;
        }
        while p < k {
            axpy(&mut c[p * n..p * n + n], arow[p], brow);
            p += 1;
        }
    }
}

fn transpose_into<T: Real>(dst: &mut [T], src: &[T], rows: usize, cols: usize) {
    assert!(dst.len() >= rows * cols && src.len() >= rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn broadcast_rows<T: Real>(dst: &mut [T], row: &[T], rows: usize, n: usize) {
    assert!(dst.len() >= rows * n && row.len() == n);
    for r in 0..rows {
        dst[r * n..r * n + n].copy_from_slice(row);
    }
}

fn add_row_broadcast<T: Real>(dst: &mut [T], row: &[T], rows: usize, n: usize) {
    assert!(dst.len() >= rows * n && row.len() == n);
    for r in 0..rows {
        axpy(&mut dst[r * n..r * n + n], T::one(), row);
    }
}

/// dst[n] += column sums of src[rows x n].
fn col_sum_acc<T: Real>(dst: &mut [T], src: &[T], rows: usize, n: usize) {
    assert!(dst.len() == n && src.len() >= rows * n);
    for r in 0..rows {
        axpy(dst, T::one(), &src[r * n..r * n + n]);
    }
}

fn layer_norm_forward<T: Real>(
    x: &[T],
    scale: &[T],
    bias: &[T],
    d: usize,
    out: &mut [T],
    xhat: &mut [T],
    inv_std: &mut [T],
) {
    let rows = x.len() / d;
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..r * d + d];
        let mut mean = T::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in xr {
            let c = v - mean;
            var = c.mul_add(c, var);
        }
        var = var * inv_d;
        let inv = (var + eps).sqrt().recip();
        inv_std[r] = inv;
        let xh = &mut xhat[r * d..r * d + d];
        let o = &mut out[r * d..r * d + d];
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xh[j] = h;
            o[j] = h.mul_add(scale[j], bias[j]);
        }
    }
}

/// Accumulates dx += dL/dx given dy = dL/d(out); also accumulates the scale
/// and bias gradients.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    scale: &[T],
    d: usize,
    dx: &mut [T],
    dscale: &mut [T],
    dbias: &mut [T],
) {
    let rows = dy.len() / d;
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..r * d + d];
        let xhr = &xhat[r * d..r * d + d];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for j in 0..d {
            dbias[j] = dbias[j] + dyr[j];
            dscale[j] = dyr[j].mul_add(xhr[j], dscale[j]);
            let dxh = dyr[j] * scale[j];
            sum_dxh = sum_dxh + dxh;
            sum_dxh_xh = dxh.mul_add(xhr[j], sum_dxh_xh);
        }
        let mean_dxh = sum_dxh * inv_d;
        let mean_dxh_xh = sum_dxh_xh * inv_d;
        let inv = inv_std[r];
        let dxr = &mut dx[r * d..r * d + d];
        for j in 0..d {
            let dxh = dyr[j] * scale[j];
            dxr[j] = dxr[j] + inv * (dxh - mean_dxh - xhr[j] * mean_dxh_xh);
        }
    }
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let u = c0 * (x + c1 * x * x * x);
    let half = T::from_f64(0.5);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let three = T::from_f64(3.0);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c0 * (T::one() + three * c1 * x * x);
    half * (T::one() + t) + half * x * sech2 * du
}

/// Two disjoint mutable segments of one gradient vector.
fn two_segments_mut<'a, T: Real>(
    grad: &'a mut ParamVector<T>,
    a: &str,
    b: &str,
) -> (&'a mut [T], &'a mut [T]) {
    let layout = grad.layout().clone();
    let sa = layout.find(a).unwrap_or_else(|| panic!("segment {a}")).range();
    let sb = layout.find(b).unwrap_or_else(|| panic!("segment {b}")).range();
    assert!(sa.end <= sb.start || sb.end <= sa.start, "overlapping segments");
    let values = grad.values.as_mut_slice();
    if sa.start < sb.start {
        let (left, right) = values.split_at_mut(sb.start);
        (&mut left[sa], &mut right[..sb.end - sb.start])
    } else {
        let (left, right) = values.split_at_mut(sa.start);
        let bs = &mut left[sb];
        (&mut right[..sa.end - sa.start], bs)
    }
}
