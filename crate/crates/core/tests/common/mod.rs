#![allow(dead_code)]

use dscx::attention::{self_attention, AttentionLayer, EncoderConfig, EncoderStack};
use dscx::dynamics::{DynamicsConfig, DynamicsExtractor};
use dscx::nn::gradcheck::{check_params, GradCheckReport, DEFAULT_STEP};
use dscx::nn::{grad_check_error, ConvGeom, Graph, ParamStore, Tensor, Var};
use dscx::spatial::{SpatialConfig, SpatialExtractor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(probe * y)` with a fixed pseudo-random probe, as a `[1]` node.
pub fn probe_sum(g: &mut Graph, y: Var) -> Var {
    let n = g.value(y).len();
    let probe: Vec<f64> = (0..n).map(|i| (((i * 7919) % 13) as f64 - 6.0) / 6.0).collect();
    let flat = g.reshape(y, &[1, n]).unwrap();
    let p = g.input(Tensor::new(vec![n, 1], probe).unwrap());
    let s = g.matmul(flat, p).unwrap();
    g.reshape(s, &[1]).unwrap()
}

/// Largest relative error between tape and finite-difference gradients
/// with respect to the input `x`.
pub fn input_grad_error(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    input_grad_error_with(&ParamStore::new(), x, |g, _, v| f(g, v))
}

/// As [`input_grad_error`] for a forward pass that reads parameters.
pub fn input_grad_error_with(
    params: &ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Graph, &ParamStore, Var) -> Var,
) -> f64 {
    let mut store = params.clone();
    let mut g = Graph::new();
    let xv = g.input_tracked(x.clone());
    let y = f(&mut g, params, xv);
    let root = probe_sum(&mut g, y);
    let grads = g.backward(root, 1.0, &mut store).unwrap();
    let analytic = grads.wrt(xv).unwrap().to_vec();
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let xv = g.input(t);
        let y = f(&mut g, params, xv);
        let root = probe_sum(&mut g, y);
        g.value(root).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += DEFAULT_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= DEFAULT_STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * DEFAULT_STEP);
        worst = worst.max(grad_check_error(a, numeric));
    }
    worst
}

/// Parameter gradient check of `forward`, scalarized by [`probe_sum`].
pub fn param_report(
    store: &mut ParamStore,
    per_param: Option<usize>,
    forward: impl Fn(&ParamStore, &mut Graph) -> Var,
) -> GradCheckReport {
    check_params(store, DEFAULT_STEP, per_param, |s, g| {
        let y = forward(s, g);
        Ok(probe_sum(g, y))
    })
    .unwrap()
}

/// Named gradient checks, one per layer type and miniature stack. Each
/// entry is the larger of the parameter and input errors.
pub fn layer_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    // conv2d: stride 2 and padding on a [2, 3, 7, 6] batch
    {
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&[4, 3, 3, 2], 1));
        let b = store.add("b", random_tensor(&[4], 2));
        let geom = ConvGeom::new((2, 1), (1, 1));
        let r = param_report(&mut store, None, |s, g| {
            let x = g.input(random_tensor(&[2, 3, 7, 6], 3));
            let (w, b) = (g.param(s, w), g.param(s, b));
            g.conv2d(x, w, Some(b), geom).unwrap()
        });
        let wt = store.get(w).value.clone();
        let e = input_grad_error(&random_tensor(&[2, 3, 7, 6], 3), |g, x| {
            let w = g.input(wt.clone());
            g.conv2d(x, w, None, geom).unwrap()
        });
        out.push(("conv2d", r.max_error.max(e)));
    }

    // conv1d: stride 2, padding 2, kernel 5
    {
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&[3, 4, 5], 4));
        let b = store.add("b", random_tensor(&[3], 5));
        let r = param_report(&mut store, None, |s, g| {
            let x = g.input(random_tensor(&[4, 11], 6));
            let (w, b) = (g.param(s, w), g.param(s, b));
            g.conv1d(x, w, Some(b), 2, 2).unwrap()
        });
        let wt = store.get(w).value.clone();
        let e = input_grad_error(&random_tensor(&[4, 11], 6), |g, x| {
            let w = g.input(wt.clone());
            g.conv1d(x, w, None, 2, 2).unwrap()
        });
        out.push(("conv1d", r.max_error.max(e)));
    }

    // dense over three rows
    {
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&[5, 4], 7));
        let b = store.add("b", random_tensor(&[4], 8));
        let r = param_report(&mut store, None, |s, g| {
            let x = g.input(random_tensor(&[3, 5], 9));
            let (w, b) = (g.param(s, w), g.param(s, b));
            g.dense(x, w, b).unwrap()
        });
        let wt = store.get(w).value.clone();
        let bt = store.get(b).value.clone();
        let e = input_grad_error(&random_tensor(&[3, 5], 9), |g, x| {
            let (w, b) = (g.input(wt.clone()), g.input(bt.clone()));
            g.dense(x, w, b).unwrap()
        });
        out.push(("dense", r.max_error.max(e)));
    }

    // layer norm with non-trivial gain and shift
    {
        let mut store = ParamStore::new();
        let gain = store.add("gain", random_tensor(&[6], 10));
        let shift = store.add("shift", random_tensor(&[6], 11));
        let r = param_report(&mut store, None, |s, g| {
            let x = g.input(random_tensor(&[3, 6], 12));
            let (a, b) = (g.param(s, gain), g.param(s, shift));
            g.layer_norm(x, a, b).unwrap()
        });
        let (gt, st) = (store.get(gain).value.clone(), store.get(shift).value.clone());
        let e = input_grad_error(&random_tensor(&[3, 6], 12), |g, x| {
            let (a, b) = (g.input(gt.clone()), g.input(st.clone()));
            g.layer_norm(x, a, b).unwrap()
        });
        out.push(("layer_norm", r.max_error.max(e)));
    }

    // single-head attention Q/K/V
    {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "att", 6, 4, 8.0, true, &mut rng(13));
        let r = param_report(&mut store, None, |s, g| {
            let x = g.input(random_tensor(&[5, 6], 14).scaled(3.0));
            self_attention(g, s, &layer, x).unwrap()
        });
        let e = input_grad_error_with(&store, &random_tensor(&[5, 6], 14).scaled(3.0), |g, s, x| {
            self_attention(g, s, &layer, x).unwrap()
        });
        out.push(("attention_qkv", r.max_error.max(e)));
    }

    // two-layer head with ReLU and softmax cross-entropy
    {
        let mut store = ParamStore::new();
        let w0 = store.add("w0", random_tensor(&[10, 6], 15));
        let b0 = store.add("b0", random_tensor(&[6], 16).scaled(0.3));
        let w1 = store.add("w1", random_tensor(&[6, 5], 17));
        let b1 = store.add("b1", random_tensor(&[5], 18));
        let r = check_params(&mut store, DEFAULT_STEP, None, |s, g| {
            let x = g.input(random_tensor(&[1, 10], 19));
            let (w0, b0, w1, b1) = (g.param(s, w0), g.param(s, b0), g.param(s, w1), g.param(s, b1));
            let h = g.dense(x, w0, b0)?;
            let h = g.relu(h);
            let logits = g.dense(h, w1, b1)?;
            g.cross_entropy(logits, 3, 1.0)
        })
        .unwrap();
        out.push(("mlp_head", r.max_error));
    }

    // camera path at 16x9: spatial extractor + encoder over 12 tokens
    {
        let mut store = ParamStore::new();
        let sc = SpatialConfig::miniature();
        let spatial = SpatialExtractor::new(sc.clone(), "spatial", &mut store, &mut rng(20));
        let mut ec = EncoderConfig::new(12, sc.feature_len());
        ec.d_k = 3;
        ec.mlp_hidden = 5;
        ec.depth = 2;
        let encoder = EncoderStack::new(ec, "camera", &mut store, &mut rng(21)).unwrap();
        nudge_biases(&mut store);
        let maps = random_tensor(&[12, 1, 16, 9], 22).abs();
        let r = param_report(&mut store, Some(40), |s, g| {
            let x = g.input(maps.clone());
            let y = spatial.forward(g, s, x).unwrap();
            let t = g.reshape(y, &[12, sc.feature_len()]).unwrap();
            encoder.encode(g, s, t).unwrap()
        });
        out.push(("camera_path_16x9", r.max_error));
    }

    // dynamics path on a 16-sample window
    {
        let mut store = ParamStore::new();
        let ex = DynamicsExtractor::new(DynamicsConfig::miniature(), "dyn", &mut store, &mut rng(23)).unwrap();
        nudge_biases(&mut store);
        let r = param_report(&mut store, Some(40), |s, g| {
            let x = g.input(random_tensor(&[4, 16], 24).scaled(2.0));
            ex.forward(g, s, x).unwrap()
        });
        out.push(("dynamics_path_16", r.max_error));
    }
    out
}

/// Small positive biases keep ReLU units away from the kink at zero.
pub fn nudge_biases(store: &mut ParamStore) {
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            let n = p.value.len() as f64;
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = 0.02 + 0.03 * i as f64 / n;
            }
        }
    }
}

pub trait TensorExt {
    fn scaled(self, k: f64) -> Tensor;
    fn abs(self) -> Tensor;
}

impl TensorExt for Tensor {
    fn scaled(mut self, k: f64) -> Tensor {
        self.data_mut().iter_mut().for_each(|v| *v *= k);
        self
    }

    fn abs(mut self) -> Tensor {
        self.data_mut().iter_mut().for_each(|v| *v = v.abs());
        self
    }
}

/// Worst deviations of the heat-map renderer from its closed forms over
/// random odd-sized integer boxes on grids up to 64x64.
#[derive(Debug, Clone)]
pub struct HeatmapSuite {
    pub cases: usize,
    /// Max `|z - sqrt(2)|` at box corners.
    pub corner: f64,
    /// Max `|z - sqrt(2) exp(sqrt(n))|` at box centers, for n = 1, 2, 4.
    pub center: [f64; 3],
    /// Max difference between mirrored pixels, both axes.
    pub symmetry: f64,
    /// Max difference from a direct per-pixel evaluation of the formula.
    pub formula: f64,
    pub permutation_exact: bool,
    pub additivity_exact: bool,
}

fn oracle_pixel(x: usize, y: usize, b: (usize, usize, usize, usize), n: f64) -> f64 {
    use std::f64::consts::PI;
    let angle = |p: usize, lo: usize, hi: usize| -PI / 2.0 + PI * (p - lo) as f64 / (hi - lo) as f64;
    let zh = (n.sqrt() * angle(x, b.0, b.2).cos()).exp();
    let zv = (n.sqrt() * angle(y, b.1, b.3).cos()).exp();
    (zh * zh + zv * zv).sqrt()
}

pub fn heatmap_suite(cases: usize, seed: u64) -> HeatmapSuite {
    use dscx::heatmap::{class_weight, render_heatmap, Detection, ObjectClass};
    let mut r = rng(seed);
    let mut s = HeatmapSuite {
        cases,
        corner: 0.0,
        center: [0.0; 3],
        symmetry: 0.0,
        formula: 0.0,
        permutation_exact: true,
        additivity_exact: true,
    };
    let odd_span = |r: &mut ChaCha8Rng, extent: usize| {
        let len = 3 + 2 * r.gen_range(0..=(extent - 3) / 2);
        let lo = r.gen_range(0..=extent - len);
        (lo, lo + len - 1)
    };
    for _ in 0..cases {
        let (w, h) = (r.gen_range(3..=64), r.gen_range(3..=64));
        let class = ObjectClass::ALL[r.gen_range(0..ObjectClass::ALL.len())];
        let n = f64::from(class_weight(class).n());
        let (x0, x1) = odd_span(&mut r, w);
        let (y0, y1) = odd_span(&mut r, h);
        let det = Detection::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64, class).unwrap();
        let map = render_heatmap(&[det], w, h);
        for (x, y) in [(x0, y0), (x0, y1), (x1, y0), (x1, y1)] {
            s.corner = s.corner.max((map.get(x, y) - 2f64.sqrt()).abs());
        }
        let slot = match n as u8 {
            1 => 0,
            2 => 1,
            _ => 2,
        };
        let center = map.get((x0 + x1) / 2, (y0 + y1) / 2);
        s.center[slot] = s.center[slot].max((center - 2f64.sqrt() * n.sqrt().exp()).abs());
        for x in x0..=x1 {
            for y in y0..=y1 {
                let v = map.get(x, y);
                s.symmetry = s.symmetry.max((v - map.get(x1 - (x - x0), y)).abs());
                s.symmetry = s.symmetry.max((v - map.get(x, y1 - (y - y0))).abs());
                s.formula = s.formula.max((v - oracle_pixel(x, y, (x0, y0, x1, y1), n)).abs());
            }
        }

        // a random scene, rendered in shuffled orders
        let k = r.gen_range(2..8);
        let mut scene: Vec<Detection> = (0..k)
            .map(|_| {
                let (a, b) = (r.gen_range(-5.0..w as f64 + 5.0), r.gen_range(-5.0..w as f64 + 5.0));
                let (c, d) = (r.gen_range(-5.0..h as f64 + 5.0), r.gen_range(-5.0..h as f64 + 5.0));
                let class = ObjectClass::ALL[r.gen_range(0..ObjectClass::ALL.len())];
                Detection::new(a.min(b), c.min(d), a.max(b), c.max(d), class).unwrap()
            })
            .collect();
        let base = render_heatmap(&scene, w, h);
        for _ in 0..3 {
            use rand::seq::SliceRandom;
            scene.shuffle(&mut r);
            let again = render_heatmap(&scene, w, h);
            if again.values() != base.values() || again.total_intensity().to_bits() != base.total_intensity().to_bits() {
                s.permutation_exact = false;
            }
        }

        // two boxes in disjoint halves of a wider grid
        if w >= 8 {
            let half = w / 2;
            let a = Detection::new(0.0, 0.0, (half - 1) as f64, (h - 1) as f64, class).unwrap();
            let b = Detection::new(half as f64, 1.0, (w - 1) as f64, (h - 1) as f64, ObjectClass::Pedestrian).unwrap();
            let za = render_heatmap(&[a], w, h).total_intensity();
            let zb = render_heatmap(&[b], w, h).total_intensity();
            if render_heatmap(&[b, a], w, h).total_intensity() != za + zb {
                s.additivity_exact = false;
            }
        }
    }
    s
}
