//! Single-head self-attention encoder.
//!
//! Each token row is projected by three learned matrices, `q = x Q`,
//! `k = x K`, `v = x V`; attention weights are `softmax(q k^T / 8)` and the
//! layer output is `weights . v`. A block wraps attention and a three-layer
//! MLP in residual add & layer-norm steps. The stack adds learned position
//! embeddings, runs six blocks (the last one widens to the output width) and
//! mean-pools the tokens into a single `[1, out_dim]` row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub tokens: usize,
    pub d_model: usize,
    /// Width of the query/key/value projections.
    pub d_k: usize,
    pub mlp_hidden: usize,
    /// Feed-forward output width of the last block (pooled output width).
    pub out_dim: usize,
    pub depth: usize,
    /// Divisor applied to `q k^T`.
    pub scale_divisor: f64,
    /// Row-softmax over attention scores. Off only for ablations.
    pub softmax: bool,
}

impl EncoderConfig {
    pub fn new(tokens: usize, d_model: usize) -> Self {
        EncoderConfig {
            tokens,
            d_model,
            d_k: 64,
            mlp_hidden: 128,
            out_dim: 200,
            depth: 6,
            scale_divisor: 8.0,
            softmax: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.d_model == 0 || self.d_k == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("degenerate encoder {self:?}")));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.scale_divisor.is_nan() || self.scale_divisor <= 0.0 {
            return Err(Error::Config("attention scale divisor must be positive".into()));
        }
        Ok(())
    }
}

fn dense_params<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = store.add_glorot(&format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng);
    let b = store.add_zeros(&format!("{name}.b"), &[d_out]);
    (w, b)
}

fn apply_dense(g: &mut Graph, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    g.dense(x, w, b)
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub scale_divisor: f64,
    pub softmax: bool,
}

/// Nodes recorded by one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace {
    /// `q k^T / divisor`, `[t, t]`.
    pub scores: Var,
    /// Row-softmax of `scores` (equal to `scores` when softmax is off).
    pub weights: Var,
    /// `[t, d_k]`.
    pub output: Var,
}

impl AttentionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_k: usize,
        scale_divisor: f64,
        softmax: bool,
        rng: &mut R,
    ) -> Self {
        let mut proj = |tag: &str| {
            store.add_glorot(&format!("{name}.{tag}"), &[d_model, d_k], d_model, d_k, rng)
        };
        let q = proj("q");
        let k = proj("k");
        let v = proj("v");
        AttentionLayer {
            q,
            k,
            v,
            scale_divisor,
            softmax,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<AttentionTrace> {
        let (t, d) = g.value(x).dims2()?;
        let d_model = store.get(self.q).value.shape()[0];
        if t == 0 || d != d_model {
            return Err(Error::shape(
                "self_attention",
                format!("input [{t}x{d}], expected [T x {d_model}] with T >= 1"),
            ));
        }
        let q = g.param(store, self.q);
        let k = g.param(store, self.k);
        let v = g.param(store, self.v);
        let q_out = g.matmul(x, q)?;
        let k_out = g.matmul(x, k)?;
        let v_out = g.matmul(x, v)?;
        let raw = g.matmul_t(q_out, k_out)?;
        let scores = g.scale(raw, 1.0 / self.scale_divisor);
        let weights = if self.softmax { g.softmax(scores) } else { scores };
        let output = g.matmul(weights, v_out)?;
        Ok(AttentionTrace {
            scores,
            weights,
            output,
        })
    }
}

/// `x [t, d_model] -> [t, d_k]`.
pub fn self_attention(g: &mut Graph, store: &ParamStore, layer: &AttentionLayer, x: Var) -> Result<Var> {
    Ok(layer.forward(g, store, x)?.output)
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    shift: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add_ones(&format!("{name}.gain"), &[d]),
            shift: store.add_zeros(&format!("{name}.shift"), &[d]),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift)
    }
}

/// Attention and MLP sub-layers, each followed by residual add and layer norm.
///
/// The attention output (`d_k` wide) is projected back to `d_model` before
/// the first residual add. When the MLP widens or narrows the token (last
/// block of a stack), the second residual goes through a bias-free linear
/// projection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attention: AttentionLayer,
    out_proj: ParamId,
    norm1: Norm,
    mlp: [(ParamId, ParamId); 3],
    skip_proj: Option<ParamId>,
    norm2: Norm,
    d_in: usize,
    d_out: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        let attention = AttentionLayer::new(
            store,
            &format!("{name}.attn"),
            d,
            config.d_k,
            config.scale_divisor,
            config.softmax,
            rng,
        );
        let out_proj = store.add_glorot(&format!("{name}.attn.o"), &[config.d_k, d], config.d_k, d, rng);
        let norm1 = Norm::new(store, &format!("{name}.norm1"), d);
        let h = config.mlp_hidden;
        let mlp = [
            dense_params(store, &format!("{name}.mlp0"), d, h, rng),
            dense_params(store, &format!("{name}.mlp1"), h, h, rng),
            dense_params(store, &format!("{name}.mlp2"), h, d_out, rng),
        ];
        let skip_proj = (d_out != d)
            .then(|| store.add_glorot(&format!("{name}.skip.w"), &[d, d_out], d, d_out, rng));
        let norm2 = Norm::new(store, &format!("{name}.norm2"), d_out);
        TransformerBlock {
            attention,
            out_proj,
            norm1,
            mlp,
            skip_proj,
            norm2,
            d_in: d,
            d_out,
        }
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = g.value(x).dims2()?;
        if d != self.d_in {
            return Err(Error::shape(
                "encode_block",
                format!("token width {d}, block expects {}", self.d_in),
            ));
        }
        let att = self_attention(g, store, &self.attention, x)?;
        let o = g.param(store, self.out_proj);
        let att = g.matmul(att, o)?;
        let res1 = g.add(x, att)?;
        let h1 = self.norm1.apply(g, store, res1)?;

        let mut m = apply_dense(g, store, h1, self.mlp[0])?;
        m = g.relu(m);
        m = apply_dense(g, store, m, self.mlp[1])?;
        m = g.relu(m);
        m = apply_dense(g, store, m, self.mlp[2])?;

        let skip = match self.skip_proj {
            Some(w) => {
                let w = g.param(store, w);
                g.matmul(h1, w)?
            }
            None => h1,
        };
        let res2 = g.add(skip, m)?;
        self.norm2.apply(g, store, res2)
    }

    /// Parameters whose zeroing silences the attention and MLP branches.
    pub fn branch_output_params(&self) -> [ParamId; 3] {
        [self.out_proj, self.mlp[2].0, self.mlp[2].1]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    config: EncoderConfig,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl EncoderStack {
    pub fn new<R: Rng>(config: EncoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let position = store.add_glorot(
            &format!("{prefix}.position"),
            &[config.tokens, config.d_model],
            config.tokens,
            config.d_model,
            rng,
        );
        let blocks = (0..config.depth)
            .map(|i| {
                let d_out = if i + 1 == config.depth {
                    config.out_dim
                } else {
                    config.d_model
                };
                TransformerBlock::new(store, &format!("{prefix}.block{i}"), &config, d_out, rng)
            })
            .collect();
        Ok(EncoderStack {
            config,
            position,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `[tokens, d_model] -> [1, out_dim]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let h = self.encode_tokens(g, store, tokens)?;
        g.mean_rows(h)
    }

    /// Per-token encodings after the last block, `[tokens, out_dim]`.
    pub fn encode_tokens(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let (t, d) = g.value(tokens).dims2()?;
        if (t, d) != (self.config.tokens, self.config.d_model) {
            return Err(Error::shape(
                "encode_sequence",
                format!(
                    "tokens [{t}x{d}], expected [{}x{}]",
                    self.config.tokens, self.config.d_model
                ),
            ));
        }
        let pos = g.param(store, self.position);
        let mut h = g.add(tokens, pos)?;
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, softmax_in_place, Tensor, LAYER_NORM_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set(store: &mut ParamStore, id: ParamId, values: &[f64]) {
        store.get_mut(id).value.data_mut().copy_from_slice(values);
    }

    #[test]
    fn single_token_identity() {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 3, 3, 8.0, true, &mut rng());
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for id in [layer.q, layer.k, layer.v] {
            set(&mut store, id, &eye);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::row(&[0.3, -1.2, 2.5]));
        let tr = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(tr.weights).data(), &[1.0]);
        assert_eq!(g.value(tr.output).data(), &[0.3, -1.2, 2.5]);
    }

    /// Literal step-by-step evaluation of the attention equations.
    fn scalar_attention(x: &[[f64; 2]; 2], q: &[[f64; 2]; 2], k: &[[f64; 2]; 2], v: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mm = |a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]| {
            let mut c = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
                }
            }
            c
        };
        let (qo, ko, vo) = (mm(x, q), mm(x, k), mm(x, v));
        let mut w = [[0.0; 2]; 2];
        for i in 0..2 {
            let mut row = [0.0; 2];
            for j in 0..2 {
                row[j] = (qo[i][0] * ko[j][0] + qo[i][1] * ko[j][1]) / 8.0;
            }
            softmax_in_place(&mut row);
            w[i] = row;
        }
        mm(&w, &vo)
    }

    #[test]
    fn two_token_hand_case() {
        let x = [[1.0, 2.0], [-0.5, 3.0]];
        let q = [[0.5, -1.0], [2.0, 0.25]];
        let k = [[1.5, 0.0], [-1.0, 2.0]];
        let v = [[0.2, 0.4], [-0.6, 1.0]];
        let want = scalar_attention(&x, &q, &k, &v);

        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 2, 2, 8.0, true, &mut rng());
        let flat = |m: [[f64; 2]; 2]| [m[0][0], m[0][1], m[1][0], m[1][1]];
        set(&mut store, layer.q, &flat(q));
        set(&mut store, layer.k, &flat(k));
        set(&mut store, layer.v, &flat(v));
        let mut g = Graph::new();
        let xi = g.input(Tensor::new(vec![2, 2], flat(x).to_vec()).unwrap());
        let out = self_attention(&mut g, &store, &layer, xi).unwrap();
        for (a, b) in g.value(out).data().iter().zip(flat(want)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_rows_are_distributions_and_keys_scale_scores() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 6, 4, 8.0, true, &mut r);
        let x = random_tensor(&[5, 6], &mut r);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let tr = layer.forward(&mut g, &store, xi).unwrap();
        for row in g.value(tr.weights).data().chunks(5) {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let before = g.value(tr.scores).clone();

        let halved: Vec<f64> = store.get(layer.k).value.data().iter().map(|v| v * 0.5).collect();
        set(&mut store, layer.k, &halved);
        let mut g2 = Graph::new();
        let xi = g2.input(x);
        let tr2 = layer.forward(&mut g2, &store, xi).unwrap();
        for (a, b) in before.data().iter().zip(g2.value(tr2.scores).data()) {
            assert!((0.5 * a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn blocks_preserve_width_and_last_widens() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let mut cfg = EncoderConfig::new(4, 8);
        cfg.out_dim = 5;
        cfg.mlp_hidden = 6;
        let stack = EncoderStack::new(cfg, "enc", &mut store, &mut r).unwrap();
        assert_eq!(stack.blocks.len(), 6);
        let mut g = Graph::new();
        let mut h = g.input(random_tensor(&[4, 8], &mut r));
        for (i, b) in stack.blocks.iter().enumerate() {
            h = b.forward(&mut g, &store, h).unwrap();
            let want = if i < 5 { [4, 8] } else { [4, 5] };
            assert_eq!(g.value(h).shape(), &want);
        }
        let mut g = Graph::new();
        let t = g.input(random_tensor(&[4, 8], &mut r));
        let y = stack.encode(&mut g, &store, t).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 5]);

        let mut g = Graph::new();
        let bad = g.input(random_tensor(&[3, 8], &mut r));
        assert!(stack.encode(&mut g, &store, bad).is_err());
    }

    #[test]
    fn silenced_branches_leave_double_layer_norm() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            mlp_hidden: 5,
            ..EncoderConfig::new(3, 4)
        };
        let block = TransformerBlock::new(&mut store, "b", &cfg, 4, &mut r);
        for id in block.branch_output_params() {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let x = random_tensor(&[3, 4], &mut r);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = block.forward(&mut g, &store, xi).unwrap();

        let ln = |row: &[f64]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - m) / (var + LAYER_NORM_EPS).sqrt()).collect()
        };
        for (row, got) in x.data().chunks(4).zip(g.value(y).data().chunks(4)) {
            let want = ln(&ln(row));
            for (a, b) in want.iter().zip(got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_tokens_pool_to_any_token() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            d_k: 3,
            mlp_hidden: 5,
            out_dim: 4,
            ..EncoderConfig::new(5, 6)
        };
        let stack = EncoderStack::new(cfg, "enc", &mut store, &mut r).unwrap();
        store.get_mut(stack.position).value.data_mut().fill(0.0);
        let row: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let tokens = Tensor::new(vec![5, 6], row.repeat(5)).unwrap();
        let mut g = Graph::new();
        let t = g.input(tokens);
        let per_token = stack.encode_tokens(&mut g, &store, t).unwrap();
        let pooled = g.mean_rows(per_token).unwrap();
        let first = &g.value(per_token).data()[..4];
        for chunk in g.value(per_token).data().chunks(4) {
            assert_eq!(chunk, first);
        }
        for (a, b) in g.value(pooled).data().iter().zip(first) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_tokens_with_positions_is_invariant() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            d_k: 3,
            mlp_hidden: 5,
            out_dim: 4,
            depth: 2,
            ..EncoderConfig::new(4, 6)
        };
        let stack = EncoderStack::new(cfg, "enc", &mut store, &mut r).unwrap();
        let tokens = random_tensor(&[4, 6], &mut r);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| {
            let mut out = Vec::new();
            for &p in &perm {
                out.extend_from_slice(&t.data()[p * 6..(p + 1) * 6]);
            }
            Tensor::new(vec![4, 6], out).unwrap()
        };
        let run = |store: &ParamStore, t: Tensor| {
            let mut g = Graph::new();
            let x = g.input(t);
            let y = stack.encode(&mut g, store, x).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(&store, tokens.clone());
        let pos = store.get(stack.position).value.clone();
        store.get_mut(stack.position).value = permute(&pos);
        let b = run(&store, permute(&tokens));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_qkv_gradients() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "a", 4, 3, 8.0, true, &mut r);
        let x = random_tensor(&[3, 4], &mut r);
        let probe = random_tensor(&[3, 3], &mut r);
        let report = gradcheck::check_params(&mut store, 1e-5, None, |store, g| {
            let xi = g.input(x.clone());
            let y = self_attention(g, store, &layer, xi)?;
            weighted_sum(g, y, &probe)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn block_gradients_two_tokens() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            d_k: 4,
            mlp_hidden: 6,
            ..EncoderConfig::new(2, 4)
        };
        let block = TransformerBlock::new(&mut store, "b", &cfg, 4, &mut r);
        let x = random_tensor(&[2, 4], &mut r);
        let probe = random_tensor(&[2, 4], &mut r);
        let report = gradcheck::check_params(&mut store, 1e-5, None, |store, g| {
            let xi = g.input(x.clone());
            let y = block.forward(g, store, xi)?;
            weighted_sum(g, y, &probe)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    /// Scalar `sum(y * probe)` used as a gradient-check objective.
    pub(crate) fn weighted_sum(g: &mut Graph, y: Var, probe: &Tensor) -> Result<Var> {
        let n = g.value(y).len();
        let flat = g.reshape(y, &[1, n])?;
        let p = g.input(probe.clone().reshape(&[n, 1])?);
        let s = g.matmul(flat, p)?;
        g.reshape(s, &[1])
    }
}
