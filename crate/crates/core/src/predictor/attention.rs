//! A small pre-norm transformer with segment-level recurrence: hidden states
//! of the previous window are cached per layer and attended as extra
//! key/value rows (stop-gradient), so contexts longer than one window still
//! inform prediction. Forward and backward passes are written out by hand in
//! f64; everything is single-threaded and bit-deterministic.

use super::{FavoriteWeights, Predictor, PredictorSession};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest window processed in one forward pass.
    pub window: usize,
    /// Cached rows from the previous window, per layer.
    pub memory: usize,
    pub vocab_size: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            window: 128,
            memory: 128,
            vocab_size: crate::remi::VOCAB_SIZE,
        }
    }
}

impl AttentionConfig {
    fn validate(&self) {
        assert!(self.embed_dim > 0 && self.embed_dim.is_multiple_of(self.heads));
        assert!(self.layers > 0);
        assert!(self.window >= 2);
        assert!(self.vocab_size > 1);
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerTensors {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    wf1: Vec<f64>,
    bf1: Vec<f64>,
    wf2: Vec<f64>,
    bf2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensors {
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    layers: Vec<LayerTensors>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

impl Tensors {
    fn zeros(cfg: &AttentionConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim();
        Tensors {
            tok_emb: vec![0.0; cfg.vocab_size * d],
            pos_emb: vec![0.0; cfg.window * d],
            layers: (0..cfg.layers)
                .map(|_| LayerTensors {
                    ln1_g: vec![0.0; d],
                    ln1_b: vec![0.0; d],
                    wq: vec![0.0; d * d],
                    wk: vec![0.0; d * d],
                    wv: vec![0.0; d * d],
                    wo: vec![0.0; d * d],
                    ln2_g: vec![0.0; d],
                    ln2_b: vec![0.0; d],
                    wf1: vec![0.0; d * f],
                    bf1: vec![0.0; f],
                    wf2: vec![0.0; f * d],
                    bf2: vec![0.0; d],
                })
                .collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            w_out: vec![0.0; d * cfg.vocab_size],
            b_out: vec![0.0; cfg.vocab_size],
        }
    }

    /// Visit every tensor in a fixed order. Shapes depend only on the config,
    /// so two models with one config visit identically-shaped tensors.
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f64>)) {
        f("tok_emb".into(), &mut self.tok_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layer{i}.ln1_g"), &mut l.ln1_g);
            f(format!("layer{i}.ln1_b"), &mut l.ln1_b);
            f(format!("layer{i}.wq"), &mut l.wq);
            f(format!("layer{i}.wk"), &mut l.wk);
            f(format!("layer{i}.wv"), &mut l.wv);
            f(format!("layer{i}.wo"), &mut l.wo);
            f(format!("layer{i}.ln2_g"), &mut l.ln2_g);
            f(format!("layer{i}.ln2_b"), &mut l.ln2_b);
            f(format!("layer{i}.wf1"), &mut l.wf1);
            f(format!("layer{i}.bf1"), &mut l.bf1);
            f(format!("layer{i}.wf2"), &mut l.wf2);
            f(format!("layer{i}.bf2"), &mut l.bf2);
        }
        f("lnf_g".into(), &mut self.lnf_g);
        f("lnf_b".into(), &mut self.lnf_b);
        f("w_out".into(), &mut self.w_out);
        f("b_out".into(), &mut self.b_out);
    }
}

/// Gradients with the same shape as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) tensors: Tensors,
}

impl Gradients {
    /// Scale all gradients down to a global L2 norm of `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let mut sq = 0.0;
        self.tensors.visit_mut(&mut |_, t| {
            for v in t.iter() {
                sq += v * v;
            }
        });
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.tensors.visit_mut(&mut |_, t| {
                for v in t.iter_mut() {
                    *v *= scale;
                }
            });
        }
    }
}

/// Per-layer cached rows from preceding windows (residual-stream inputs).
pub type Memory = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct AttentionModel {
    config: AttentionConfig,
    seed: u64,
    tensors: Tensors,
}

// --- small dense helpers (row-major) ---------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// dW[k,n] += A[m,k]^T * dY[m,n]
fn accumulate_at_b(a: &[f64], m: usize, k: usize, dy: &[f64], n: usize, dw: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dyrow = &dy[i * n..(i + 1) * n];
            let dwrow = &mut dw[p * n..(p + 1) * n];
            for j in 0..n {
                dwrow[j] += av * dyrow[j];
            }
        }
    }
}

/// dX[m,k] = dY[m,n] * W[k,n]^T
fn a_bt(dy: &[f64], m: usize, n: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; m * k];
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let dxrow = &mut dx[i * k..(i + 1) * k];
        for p in 0..k {
            let wrow = &w[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += dyrow[j] * wrow[j];
            }
            dxrow[p] = acc;
        }
    }
    dx
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns (y, xhat, inv_std) for the backward pass.
fn layer_norm(x: &[f64], rows: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut istd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        istd[r] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[r * d + j] = xh;
            y[r * d + j] = g[j] * xh + b[j];
        }
    }
    (y, xhat, istd)
}

/// Backward of `layer_norm`; accumulates into dg/db and returns dx.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    istd: &[f64],
    g: &[f64],
    rows: usize,
    d: usize,
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xhr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xhr[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] = istd[r] * (dxh - mean_dxhat - xhr[j] * mean_dxhat_xhat);
        }
    }
    dx
}

// --- forward tape -----------------------------------------------------------

struct LayerTape {
    x_in: Vec<f64>,
    mem_rows: usize,
    ln_x: (Vec<f64>, Vec<f64>, Vec<f64>),
    ln_m: (Vec<f64>, Vec<f64>, Vec<f64>),
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn_weights: Vec<f64>, // [T, S] with zeros on masked entries
    ctx: Vec<f64>,
    ln2: (Vec<f64>, Vec<f64>, Vec<f64>),
    f1pre: Vec<f64>,
    f1: Vec<f64>,
}

struct Tape {
    layers: Vec<LayerTape>,
    lnf: (Vec<f64>, Vec<f64>, Vec<f64>),
    probs: Vec<f64>, // [T, C]
}

impl AttentionModel {
    /// Fresh model with seeded normal(0, 0.02) weights, unit layer-norm
    /// gains, and zero biases.
    pub fn new(config: AttentionConfig, seed: u64) -> Self {
        config.validate();
        let mut tensors = Tensors::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        tensors.visit_mut(&mut |name, t| {
            if name.ends_with("_g") {
                t.iter_mut().for_each(|v| *v = 1.0);
            } else if name.ends_with("_b") || name.starts_with("b") || name.contains(".b") {
                // biases stay zero
            } else {
                t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        });
        AttentionModel {
            config,
            seed,
            tensors,
        }
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn empty_memory(&self) -> Memory {
        vec![Vec::new(); self.config.layers]
    }

    /// Parameter count over all tensors.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut t = self.tensors.clone();
        t.visit_mut(&mut |_, v| n += v.len());
        n
    }

    /// Named (name, data) views for serialization, in visit order.
    pub fn export_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut t = self.tensors.clone();
        t.visit_mut(&mut |name, v| out.push((name, v.clone())));
        out
    }

    /// Declared shape of a named tensor.
    pub fn shape_of(&self, name: &str) -> Vec<usize> {
        let (d, f, c, w) = (
            self.config.embed_dim,
            self.config.ffn_dim(),
            self.config.vocab_size,
            self.config.window,
        );
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            "tok_emb" => vec![c, d],
            "pos_emb" => vec![w, d],
            "wq" | "wk" | "wv" | "wo" => vec![d, d],
            "wf1" => vec![d, f],
            "bf1" => vec![f],
            "wf2" => vec![f, d],
            "bf2" => vec![d],
            "w_out" => vec![d, c],
            "b_out" => vec![c],
            _ => vec![d], // layer-norm gains and biases
        }
    }

    /// Rebuild a model from exported tensors; shapes must match the config.
    pub fn from_tensors(
        config: AttentionConfig,
        seed: u64,
        tensors: &[(String, Vec<f64>)],
    ) -> Result<Self, String> {
        config.validate();
        let mut model = AttentionModel {
            config,
            seed,
            tensors: Tensors::zeros(&config),
        };
        let mut idx = 0usize;
        let mut err = None;
        model.tensors.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match tensors.get(idx) {
                Some((got_name, data)) if *got_name == name && data.len() == t.len() => {
                    t.copy_from_slice(data);
                }
                Some((got_name, data)) => {
                    err = Some(format!(
                        "tensor {idx}: expected {name} ({} values), got {got_name} ({} values)",
                        t.len(),
                        data.len()
                    ));
                }
                None => err = Some(format!("missing tensor {name}")),
            }
            idx += 1;
        });
        if err.is_none() && idx != tensors.len() {
            err = Some(format!("expected {idx} tensors, got {}", tensors.len()));
        }
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        let mut flat: Vec<f64> = Vec::new();
        let mut g = grads.tensors.clone();
        g.visit_mut(&mut |_, t| flat.extend_from_slice(t));
        let mut offset = 0;
        self.tensors.visit_mut(&mut |_, t| {
            for v in t.iter_mut() {
                *v -= learning_rate * flat[offset];
                offset += 1;
            }
        });
    }

    /// Round every parameter through f32, matching the checkpoint precision.
    pub fn quantize_to_f32(&mut self) {
        self.tensors.visit_mut(&mut |_, t| {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        });
    }

    fn forward(&self, ids: &[u32], memory: &Memory) -> Tape {
        let cfg = &self.config;
        let (d, heads, dh) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
        let t_len = ids.len();
        assert!(t_len >= 1 && t_len <= cfg.window, "window length {t_len} out of range");
        assert_eq!(memory.len(), cfg.layers);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let emb = &self.tensors.tok_emb[id as usize * d..(id as usize + 1) * d];
            let pos = &self.tensors.pos_emb[t * d..(t + 1) * d];
            for j in 0..d {
                x[t * d + j] = emb[j] + pos[j];
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for (l, lt) in self.tensors.layers.iter().enumerate() {
            let mem = &memory[l];
            let m_rows = mem.len() / d.max(1);
            let s_len = m_rows + t_len;

            let ln_x = layer_norm(&x, t_len, d, &lt.ln1_g, &lt.ln1_b);
            let ln_m = layer_norm(mem, m_rows, d, &lt.ln1_g, &lt.ln1_b);
            let mut kv_ln = Vec::with_capacity(s_len * d);
            kv_ln.extend_from_slice(&ln_m.0);
            kv_ln.extend_from_slice(&ln_x.0);

            let q = matmul(&ln_x.0, t_len, d, &lt.wq, d);
            let k = matmul(&kv_ln, s_len, d, &lt.wk, d);
            let v = matmul(&kv_ln, s_len, d, &lt.wv, d);

            // per-head softmax weights, [heads][T][S] flat, zeros when masked
            let mut attn_full = vec![0.0; heads * t_len * s_len];
            let mut ctx = vec![0.0; t_len * d];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..t_len {
                    let visible = m_rows + t + 1;
                    let qrow = &q[t * d + off..t * d + off + dh];
                    let mut row = vec![0.0; visible];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..visible {
                        let krow = &k[s * d + off..s * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..dh {
                            dot += qrow[j] * krow[j];
                        }
                        let sc = dot * scale;
                        row[s] = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                    let mut total = 0.0;
                    for sc in row.iter_mut() {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    for (s, sc) in row.iter().enumerate() {
                        let a = sc / total;
                        attn_full[(h * t_len + t) * s_len + s] = a;
                        let vrow = &v[s * d + off..s * d + off + dh];
                        for j in 0..dh {
                            ctx[t * d + off + j] += a * vrow[j];
                        }
                    }
                }
            }

            let attn_out = matmul(&ctx, t_len, d, &lt.wo, d);
            let mut x_mid = x.clone();
            for i in 0..t_len * d {
                x_mid[i] += attn_out[i];
            }

            let ln2 = layer_norm(&x_mid, t_len, d, &lt.ln2_g, &lt.ln2_b);
            let f = cfg.ffn_dim();
            let mut f1pre = matmul(&ln2.0, t_len, d, &lt.wf1, f);
            for t in 0..t_len {
                for j in 0..f {
                    f1pre[t * f + j] += lt.bf1[j];
                }
            }
            let f1: Vec<f64> = f1pre.iter().map(|&v| v.max(0.0)).collect();
            let mut f2 = matmul(&f1, t_len, f, &lt.wf2, d);
            for t in 0..t_len {
                for j in 0..d {
                    f2[t * d + j] += lt.bf2[j];
                }
            }
            let mut x_next = x_mid.clone();
            for i in 0..t_len * d {
                x_next[i] += f2[i];
            }

            layers.push(LayerTape {
                x_in: x,
                mem_rows: m_rows,
                ln_x,
                ln_m,
                q,
                k,
                v,
                attn_weights: attn_full,
                ctx,
                ln2,
                f1pre,
                f1,
            });
            x = x_next;
        }

        let lnf = layer_norm(&x, t_len, d, &self.tensors.lnf_g, &self.tensors.lnf_b);
        let c = cfg.vocab_size;
        let mut probs = matmul(&lnf.0, t_len, d, &self.tensors.w_out, c);
        for t in 0..t_len {
            let row = &mut probs[t * c..(t + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.tensors.b_out[j];
                if *v > max {
                    max = *v;
                }
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }

        Tape {
            layers,
            lnf,
            probs,
        }
    }

    /// Memory for the next window: per layer, the trailing `memory` rows of
    /// (old memory ++ this window's layer inputs).
    fn next_memory(&self, tape: &Tape, memory: &Memory) -> Memory {
        let d = self.config.embed_dim;
        let keep = self.config.memory;
        tape.layers
            .iter()
            .enumerate()
            .map(|(l, lt)| {
                let mut rows = memory[l].clone();
                rows.extend_from_slice(&lt.x_in);
                let total_rows = rows.len() / d;
                if total_rows > keep {
                    rows.drain(..(total_rows - keep) * d);
                }
                rows
            })
            .collect()
    }

    /// Distribution over the next token after `ids` (one window), plus the
    /// memory to carry forward.
    pub fn forward_infer(&self, ids: &[u32], memory: &Memory) -> (Vec<f64>, Memory) {
        let tape = self.forward(ids, memory);
        let c = self.config.vocab_size;
        let last = ids.len() - 1;
        let dist = tape.probs[last * c..(last + 1) * c].to_vec();
        let new_memory = self.next_memory(&tape, memory);
        (dist, new_memory)
    }

    /// Mean weighted next-token loss over one segment (`ids[t]` predicts
    /// `ids[t+1]`), with gradients and the carried memory.
    pub fn loss_and_grad(
        &self,
        ids: &[u32],
        weights: &FavoriteWeights,
        memory: &Memory,
    ) -> (f64, Gradients, Memory) {
        assert!(ids.len() >= 2, "need at least two tokens to train");
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let tape = self.forward(inputs, memory);
        let new_memory = self.next_memory(&tape, memory);

        let cfg = &self.config;
        let (d, heads, dh, c) = (cfg.embed_dim, cfg.heads, cfg.head_dim(), cfg.vocab_size);
        let t_len = inputs.len();
        let nf = t_len as f64;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t_len * c];
        for t in 0..t_len {
            let target = targets[t] as usize;
            let w = weights.weights[target];
            let p_target = tape.probs[t * c + target];
            loss -= w * p_target.max(1e-300).ln();
            for j in 0..c {
                let p = tape.probs[t * c + j];
                let indicator = if j == target { 1.0 } else { 0.0 };
                dlogits[t * c + j] = w / nf * (p - indicator);
            }
        }
        loss /= nf;

        let mut grads = Gradients {
            tensors: Tensors::zeros(cfg),
        };
        let gt = &mut grads.tensors;

        // output projection
        accumulate_at_b(&tape.lnf.0, t_len, d, &dlogits, c, &mut gt.w_out);
        for t in 0..t_len {
            for j in 0..c {
                gt.b_out[j] += dlogits[t * c + j];
            }
        }
        let dy_ln = a_bt(&dlogits, t_len, c, &self.tensors.w_out, d);
        let mut dx = layer_norm_backward(
            &dy_ln,
            &tape.lnf.1,
            &tape.lnf.2,
            &self.tensors.lnf_g,
            t_len,
            d,
            &mut gt.lnf_g,
            &mut gt.lnf_b,
        );

        for l in (0..cfg.layers).rev() {
            let lt = &self.tensors.layers[l];
            let glt = &mut gt.layers[l];
            let tape_l = &tape.layers[l];
            let m_rows = tape_l.mem_rows;
            let s_len = m_rows + t_len;
            let f = cfg.ffn_dim();

            // FFN block: x_next = x_mid + f2
            let df2 = &dx;
            accumulate_at_b(&tape_l.f1, t_len, f, df2, d, &mut glt.wf2);
            for t in 0..t_len {
                for j in 0..d {
                    glt.bf2[j] += df2[t * d + j];
                }
            }
            let df1 = a_bt(df2, t_len, d, &lt.wf2, f);
            let mut df1pre = df1;
            for (g, pre) in df1pre.iter_mut().zip(&tape_l.f1pre) {
                if *pre <= 0.0 {
                    *g = 0.0;
                }
            }
            accumulate_at_b(&tape_l.ln2.0, t_len, d, &df1pre, f, &mut glt.wf1);
            for t in 0..t_len {
                for j in 0..f {
                    glt.bf1[j] += df1pre[t * f + j];
                }
            }
            let db_ln = a_bt(&df1pre, t_len, f, &lt.wf1, d);
            let dx_from_ln2 = layer_norm_backward(
                &db_ln,
                &tape_l.ln2.1,
                &tape_l.ln2.2,
                &lt.ln2_g,
                t_len,
                d,
                &mut glt.ln2_g,
                &mut glt.ln2_b,
            );
            let mut dx_mid = dx.clone();
            for i in 0..t_len * d {
                dx_mid[i] += dx_from_ln2[i];
            }

            // attention block: x_mid = x_in + ctx * Wo
            accumulate_at_b(&tape_l.ctx, t_len, d, &dx_mid, d, &mut glt.wo);
            let dctx = a_bt(&dx_mid, t_len, d, &lt.wo, d);

            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; s_len * d];
            let mut dv = vec![0.0; s_len * d];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..t_len {
                    let visible = m_rows + t + 1;
                    let arow = &tape_l.attn_weights[(h * t_len + t) * s_len..][..visible];
                    let dctx_row = &dctx[t * d + off..t * d + off + dh];
                    // dA and softmax backward
                    let mut da = vec![0.0; visible];
                    for s in 0..visible {
                        let vrow = &tape_l.v[s * d + off..s * d + off + dh];
                        let mut acc = 0.0;
                        for j in 0..dh {
                            acc += dctx_row[j] * vrow[j];
                        }
                        da[s] = acc;
                        // dV += A^T dctx
                        for j in 0..dh {
                            dv[s * d + off + j] += arow[s] * dctx_row[j];
                        }
                    }
                    let dot: f64 = (0..visible).map(|s| da[s] * arow[s]).sum();
                    for s in 0..visible {
                        let dscore = arow[s] * (da[s] - dot) * scale;
                        let krow = &tape_l.k[s * d + off..s * d + off + dh];
                        let qrow = &tape_l.q[t * d + off..t * d + off + dh];
                        for j in 0..dh {
                            dq[t * d + off + j] += dscore * krow[j];
                            dk[s * d + off + j] += dscore * qrow[j];
                        }
                    }
                }
            }

            // projections back to the normalized inputs
            let mut kv_ln = Vec::with_capacity(s_len * d);
            kv_ln.extend_from_slice(&tape_l.ln_m.0);
            kv_ln.extend_from_slice(&tape_l.ln_x.0);
            accumulate_at_b(&tape_l.ln_x.0, t_len, d, &dq, d, &mut glt.wq);
            accumulate_at_b(&kv_ln, s_len, d, &dk, d, &mut glt.wk);
            accumulate_at_b(&kv_ln, s_len, d, &dv, d, &mut glt.wv);
            let dln_x_q = a_bt(&dq, t_len, d, &lt.wq, d);
            let dkv_k = a_bt(&dk, s_len, d, &lt.wk, d);
            let dkv_v = a_bt(&dv, s_len, d, &lt.wv, d);
            let mut dln_x = dln_x_q;
            for t in 0..t_len {
                for j in 0..d {
                    dln_x[t * d + j] +=
                        dkv_k[(m_rows + t) * d + j] + dkv_v[(m_rows + t) * d + j];
                }
            }
            // memory rows contribute to ln1 parameter grads only (stop-grad)
            if m_rows > 0 {
                let mut dln_m = vec![0.0; m_rows * d];
                for s in 0..m_rows {
                    for j in 0..d {
                        dln_m[s * d + j] = dkv_k[s * d + j] + dkv_v[s * d + j];
                    }
                }
                let _ = layer_norm_backward(
                    &dln_m,
                    &tape_l.ln_m.1,
                    &tape_l.ln_m.2,
                    &lt.ln1_g,
                    m_rows,
                    d,
                    &mut glt.ln1_g,
                    &mut glt.ln1_b,
                );
            }
            let dx_from_ln1 = layer_norm_backward(
                &dln_x,
                &tape_l.ln_x.1,
                &tape_l.ln_x.2,
                &lt.ln1_g,
                t_len,
                d,
                &mut glt.ln1_g,
                &mut glt.ln1_b,
            );
            dx = dx_mid;
            for i in 0..t_len * d {
                dx[i] += dx_from_ln1[i];
            }
        }

        // embeddings
        for (t, &id) in inputs.iter().enumerate() {
            for j in 0..d {
                gt.tok_emb[id as usize * d + j] += dx[t * d + j];
                gt.pos_emb[t * d + j] += dx[t * d + j];
            }
        }

        (loss, grads, new_memory)
    }

    /// Loss only, at the current parameters (used by finite differencing).
    pub fn loss(&self, ids: &[u32], weights: &FavoriteWeights, memory: &Memory) -> f64 {
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let tape = self.forward(inputs, memory);
        let c = self.config.vocab_size;
        let mut loss = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            let w = weights.weights[target as usize];
            loss -= w * tape.probs[t * c + target as usize].max(1e-300).ln();
        }
        loss / targets.len() as f64
    }

    /// Nudge one flat parameter coordinate by `delta`; test hook for the
    /// finite-difference gradient oracle.
    pub fn nudge_parameter(&mut self, coordinate: usize, delta: f64) {
        let mut offset = 0usize;
        self.tensors.visit_mut(&mut |_, t| {
            if coordinate >= offset && coordinate < offset + t.len() {
                t[coordinate - offset] += delta;
            }
            offset += t.len();
        });
    }

    /// Flat gradient vector in the same coordinate order as
    /// `nudge_parameter`.
    pub fn flatten_gradients(grads: &Gradients) -> Vec<f64> {
        let mut flat = Vec::new();
        let mut g = grads.tensors.clone();
        g.visit_mut(&mut |_, t| flat.extend_from_slice(t));
        flat
    }
}

impl Predictor for AttentionModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn session(&self) -> Box<dyn PredictorSession + '_> {
        Box::new(AttentionSession {
            model: self,
            memory: self.empty_memory(),
            buffer: Vec::new(),
            last_dist: None,
        })
    }
}

/// Append-only decoding over windows: tokens accumulate in a buffer; every
/// full window folds into the per-layer memory.
struct AttentionSession<'a> {
    model: &'a AttentionModel,
    memory: Memory,
    buffer: Vec<u32>,
    last_dist: Option<Vec<f64>>,
}

impl PredictorSession for AttentionSession<'_> {
    fn push(&mut self, token: u32) {
        self.buffer.push(token);
        if self.buffer.len() == self.model.config.window {
            let (dist, memory) = self.model.forward_infer(&self.buffer, &self.memory);
            self.memory = memory;
            self.last_dist = Some(dist);
            self.buffer.clear();
        }
    }

    fn next_distribution(&mut self) -> Vec<f64> {
        if self.buffer.is_empty() {
            return match &self.last_dist {
                Some(d) => d.clone(),
                None => {
                    let c = self.model.config.vocab_size;
                    vec![1.0 / c as f64; c]
                }
            };
        }
        let (dist, _) = self.model.forward_infer(&self.buffer, &self.memory);
        dist
    }
}
