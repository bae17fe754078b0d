//! Plain-loop float64 reimplementations of the model's operations, written
//! from their definitions without the graph engine, plus helpers that run
//! them against the library on random small instances.

#![allow(dead_code)]

use magnet::autograd::gradcheck::{check_param_grads, GradCheckReport};
use magnet::autograd::{Graph, ParamStore, Tensor, Var};
use magnet::cam::{pyramid_pool, CamConfig, CamStage, SpatialCache, Xmha};
use magnet::datagen::{CLS, PAD};
use magnet::encoders::{FeatureMap, TextBatch};
use magnet::losses::{bce_loss, cal_p2p, cal_p2t, dice_loss, CalForm, PixelPartition};
use magnet::maskgrounding::{
    grounding_loss, mask_tokens, GroundingConfig, GroundingInputs, MaskEncoder, MaskGrounding, MaskedBatch,
};
use magnet::nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub const INSTANCES: u64 = 10;
pub const FORWARD_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference steps: small for the sharp contrastive losses, larger
/// for deep compositions where rounding noise dominates.
pub const LOSS_STEP: f64 = 1e-5;
pub const NET_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;
const LN_EPS: f64 = 1e-5;
const DICE_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_m(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> M {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

pub fn to_m(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn to_t(m: &M) -> Tensor<f64> {
    Tensor::from_rows(m)
}

/// `max |a - b| / max |b|` over all entries.
pub fn rel_err(a: &M, b: &M) -> f64 {
    assert_eq!((a.len(), a[0].len()), (b.len(), b[0].len()), "shape mismatch");
    let diff = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn scalar_rel_err(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Replaces every parameter with uniform noise in `(-scale, scale)`.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn param(store: &ParamStore<f64>, name: &str) -> M {
    to_m(store.get(name).unwrap())
}

// ---- dense building blocks ----------------------------------------------

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn linear(store: &ParamStore<f64>, name: &str, x: &M) -> M {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    let mut y = matmul(x, &w);
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(&b[0]) {
            *v += bb;
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn map(x: &M, f: impl Fn(f64) -> f64) -> M {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_row(a: &M, r: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

fn concat_cols(parts: &[M]) -> M {
    (0..parts[0].len()).map(|i| parts.iter().flat_map(|p| p[i].clone()).collect()).collect()
}

pub fn mlp(store: &ParamStore<f64>, name: &str, layers: usize, x: &M) -> M {
    let mut h = x.clone();
    for i in 0..layers {
        if i > 0 {
            h = map(&h, gelu);
        }
        h = linear(store, &format!("{name}.fc{i}"), &h);
    }
    h
}

pub fn layer_norm(store: &ParamStore<f64>, name: &str, x: &M) -> M {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[0][j] + b[0][j])
                .collect()
        })
        .collect()
}

/// Softmax over the entries whose flag is set; the others get weight 0.
pub fn masked_softmax(v: &[f64], keep: &[bool]) -> Vec<f64> {
    let m = v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().zip(keep).map(|(x, &k)| if k { (x - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v / rows.len() as f64;
        }
    }
    m
}

/// Multi-head scaled dot-product attention of one sequence; `keep` flags
/// the keys that may be attended.
pub fn attention(q: &M, k: &M, v: &M, heads: usize, keep: &[bool]) -> M {
    let (dk, dv) = (q[0].len() / heads, v[0].len() / heads);
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| dot(&qi[h * dk..(h + 1) * dk], &kj[h * dk..(h + 1) * dk]) / (dk as f64).sqrt())
                .collect();
            let w = masked_softmax(&s, keep);
            for (j, vj) in v.iter().enumerate() {
                for c in 0..dv {
                    out[i][h * dv + c] += w[j] * vj[h * dv + c];
                }
            }
        }
    }
    out
}

pub fn transformer_block(store: &ParamStore<f64>, name: &str, x: &M, heads: usize, keep: &[bool]) -> M {
    let width = x[0].len();
    let h = layer_norm(store, &format!("{name}.norm1"), x);
    let qkv = linear(store, &format!("{name}.qkv"), &h);
    let cols = |a: usize| -> M { qkv.iter().map(|r| r[a * width..(a + 1) * width].to_vec()).collect() };
    let a = attention(&cols(0), &cols(1), &cols(2), heads, keep);
    let x = add(x, &linear(store, &format!("{name}.proj"), &a));
    let h = layer_norm(store, &format!("{name}.norm2"), &x);
    add(&x, &mlp(store, &format!("{name}.mlp"), 2, &h))
}

// ---- losses ------------------------------------------------------------

pub fn bce(logits: &[f64], gt: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(gt)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn dice(p: &[f64], gt: &[f64]) -> f64 {
    let inter: f64 = p.iter().zip(gt).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sg: f64 = gt.iter().sum();
    1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS)
}

/// `-mean_x f(e^{x.a/tau} / (e^{x.a/tau} + sum_y e^{x.y/tau}))` with `f = log`
/// or the identity; zero when `others` is empty.
fn contrast_term(rows: &[Vec<f64>], anchor: &[f64], others: &[Vec<f64>], tau: f64, literal: bool) -> f64 {
    if rows.is_empty() || others.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for x in rows {
        let num = (dot(x, anchor) / tau).exp();
        let den = num + others.iter().map(|y| (dot(x, y) / tau).exp()).sum::<f64>();
        let ratio = num / den;
        acc += if literal { ratio } else { ratio.ln() };
    }
    -acc / rows.len() as f64
}

fn split(features: &M, fg: &[bool]) -> (M, M) {
    let rows: M = features.iter().map(|r| normalize(r)).collect();
    let pos = rows.iter().zip(fg).filter(|(_, &f)| f).map(|(r, _)| r.clone()).collect();
    let neg = rows.iter().zip(fg).filter(|(_, &f)| !f).map(|(r, _)| r.clone()).collect();
    (pos, neg)
}

pub fn cal_p2p_oracle(features: &M, fg: &[bool], tau: f64, literal: bool) -> f64 {
    let (pos, neg) = split(features, fg);
    let mut total = 0.0;
    if !pos.is_empty() {
        total += contrast_term(&pos, &normalize(&mean_rows(&pos)), &neg, tau, literal);
    }
    if !neg.is_empty() {
        total += contrast_term(&neg, &normalize(&mean_rows(&neg)), &pos, tau, literal);
    }
    total
}

pub fn cal_p2t_oracle(store: &ParamStore<f64>, proj: &str, features: &M, fg: &[bool], words: &M, tau: f64, literal: bool) -> f64 {
    let (pos, neg) = split(features, fg);
    let t = linear(store, proj, &vec![mean_rows(words)]);
    contrast_term(&pos, &normalize(&t[0]), &neg, tau, literal)
}

pub fn cross_entropy(logits: &M, targets: &[usize]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            z.ln() - row[t]
        })
        .sum::<f64>()
        / targets.len() as f64
}

// ---- spatial ops -------------------------------------------------------

/// Adaptive average pooling of `batch` maps (`h x w` positions, row-major,
/// one row per position) onto `k x k` bins `[floor(a n / k), floor((a+1) n / k))`.
pub fn pool(x: &M, batch: usize, h: usize, w: usize, k: usize) -> M {
    let c = x[0].len();
    let mut out = Vec::new();
    for b in 0..batch {
        for a in 0..k {
            for bb in 0..k {
                let (y0, y1) = (a * h / k, (a + 1) * h / k);
                let (x0, x1) = (bb * w / k, (bb + 1) * w / k);
                let mut acc = vec![0.0; c];
                for y in y0..y1 {
                    for xx in x0..x1 {
                        for ch in 0..c {
                            acc[ch] += x[b * h * w + y * w + xx][ch];
                        }
                    }
                }
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                out.push(acc.iter().map(|v| v / n).collect());
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn bilinear(x: &M, batch: usize, h: usize, w: usize, ho: usize, wo: usize) -> M {
    let c = x[0].len();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::new();
    for b in 0..batch {
        for y in 0..ho {
            let (y0, y1, fy) = coord(y, h, ho);
            for xx in 0..wo {
                let (x0, x1, fx) = coord(xx, w, wo);
                let at = |r: usize, cc: usize, ch: usize| x[b * h * w + r * w + cc][ch];
                out.push(
                    (0..c)
                        .map(|ch| {
                            (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x1, ch))
                                + fy * ((1.0 - fx) * at(y1, x0, ch) + fx * at(y1, x1, ch))
                        })
                        .collect(),
                );
            }
        }
    }
    out
}

// ---- cross-modal ops ---------------------------------------------------

/// One similarity matrix per sample and head; words take its row softmax
/// over image positions, image positions take its column softmax over the
/// non-PAD words.
pub fn xmha_oracle(
    store: &ParamStore<f64>,
    name: &str,
    o: &M,
    p: &M,
    batch: usize,
    keep: &[bool],
    heads: usize,
) -> (M, M) {
    let l = o.len() / batch;
    let n = p.len() / batch;
    let qt = linear(store, &format!("{name}.text_q"), o);
    let ki = linear(store, &format!("{name}.image_k"), p);
    let vt = linear(store, &format!("{name}.text_v"), o);
    let vi = linear(store, &format!("{name}.image_v"), p);
    let width = qt[0].len();
    let d = width / heads;
    let mut ot = vec![vec![0.0; width]; o.len()];
    let mut pi = vec![vec![0.0; width]; p.len()];
    for b in 0..batch {
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let a: M = (0..l)
                .map(|i| (0..n).map(|j| dot(&qt[b * l + i][cols.clone()], &ki[b * n + j][cols.clone()]) / (d as f64).sqrt()).collect())
                .collect();
            for i in 0..l {
                let w = masked_softmax(&a[i], &vec![true; n]);
                for j in 0..n {
                    for c in cols.clone() {
                        ot[b * l + i][c] += w[j] * vi[b * n + j][c];
                    }
                }
            }
            for j in 0..n {
                let column: Vec<f64> = (0..l).map(|i| a[i][j]).collect();
                let w = masked_softmax(&column, &keep[b * l..(b + 1) * l]);
                for i in 0..l {
                    for c in cols.clone() {
                        pi[b * n + j][c] += w[i] * vt[b * l + i][c];
                    }
                }
            }
        }
    }
    (
        linear(store, &format!("{name}.text_out"), &ot),
        linear(store, &format!("{name}.image_out"), &pi),
    )
}

/// Pool, 3-layer MLP, cross attention and upsampling per scale; both
/// modalities concatenated over scales, reduced by a 2-layer MLP, gated by
/// tanh and added to the inputs.
#[allow(clippy::too_many_arguments)]
pub fn cam_oracle(
    store: &ParamStore<f64>,
    stage: usize,
    scales: &[usize],
    o: &M,
    p: &M,
    batch: usize,
    h: usize,
    w: usize,
    keep: &[bool],
    heads: usize,
) -> (M, M) {
    let name = format!("cam.stage{stage}");
    let mut texts = Vec::new();
    let mut images = Vec::new();
    for &k in scales {
        let pooled = pool(p, batch, h, w, k);
        let refined = mlp(store, &format!("{name}.scale{k}.mlp"), 3, &pooled);
        let (ot, pi) = xmha_oracle(store, &format!("{name}.scale{k}.xmha"), o, &refined, batch, keep, heads);
        texts.push(ot);
        images.push(bilinear(&pi, batch, k, k, h, w));
    }
    let dt = map(&mlp(store, &format!("{name}.text_reduce"), 2, &concat_cols(&texts)), f64::tanh);
    let di = map(&mlp(store, &format!("{name}.image_reduce"), 2, &concat_cols(&images)), f64::tanh);
    (add(o, &dt), add(p, &di))
}

pub fn encode_mask_oracle(store: &ParamStore<f64>, name: &str, centroids: &[(f64, f64)]) -> M {
    let x: M = centroids.iter().map(|&(cx, cy)| vec![cx, cy]).collect();
    mlp(store, name, 2, &x)
}

/// Predictor over `[text + type0 ; proj(image) + type1 + position ; mask + type2]`
/// per sample, read out at the masked slots.
pub fn predict_masked_oracle(
    store: &ParamStore<f64>,
    cfg: &GroundingConfig,
    o_masked: &M,
    image: &M,
    text: &TextBatch,
    batches: &[MaskedBatch],
) -> M {
    let (batch, len) = (text.batch, text.len);
    let n = image.len() / batch;
    let types = param(store, "grounding.type_emb");
    let pos = param(store, "grounding.image_pos");
    let proj = linear(store, "grounding.image_proj", image);
    let mut logits = Vec::new();
    for (b, mb) in batches.iter().enumerate() {
        let mut seq: M = Vec::new();
        let mut keep = Vec::new();
        for i in 0..len {
            seq.push(add_row(&vec![o_masked[b * len + i].clone()], &types[0])[0].clone());
            keep.push(text.tokens[b * len + i] != PAD);
        }
        for j in 0..n {
            let row = add_row(&add_row(&vec![proj[b * n + j].clone()], &types[1]), &pos[j]);
            seq.push(row[0].clone());
            keep.push(true);
        }
        let c = encode_mask_oracle(store, "grounding.mask_encoder", &[mb.centroid]);
        seq.push(add_row(&c, &types[2])[0].clone());
        keep.push(true);
        for d in 0..cfg.depth {
            seq = transformer_block(store, &format!("grounding.predictor.block{d}"), &seq, cfg.heads, &keep);
        }
        let read: M = mb.positions.iter().map(|&p| seq[p].clone()).collect();
        let read = layer_norm(store, "grounding.predictor.norm", &read);
        logits.extend(linear(store, "grounding.predictor.head", &read));
    }
    logits
}

// ---- library side --------------------------------------------------------

/// `sum(out * R)` for a fixed pseudo-random `R`, so every output entry
/// reaches the scalar with its own weight.
pub fn weighted_sum(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Var {
    let (r, c) = g.shape(out);
    let w = g.constant(to_t(&rand_m(&mut rng(seed ^ 0x5eed), r, c, 1.0)));
    let m = g.mul(out, w).unwrap();
    g.sum_all(m)
}

/// Finite-difference check of every parameter of `store` (inputs included)
/// for the scalar built by `f`.
pub fn grad_check<F>(store: &ParamStore<f64>, per_tensor: usize, step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> magnet::Result<Var>,
{
    grad_check_floor(store, per_tensor, step, FD_FLOOR, f)
}

/// As [`grad_check`] with an explicit magnitude below which differences
/// count as absolute rather than relative.
pub fn grad_check_floor<F>(store: &ParamStore<f64>, per_tensor: usize, step: f64, floor: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> magnet::Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g).unwrap();
        g.param_grads(loss).unwrap()
    };
    check_param_grads(store, &grads, |_| true, per_tensor, step, floor, |p| {
        let mut g = Graph::with_params(p);
        f(&mut g).map(|l| g.value(l).item())
    })
}

/// Outcome of one operation's checks over all instances.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub forward_err: f64,
    pub grad_err: f64,
    pub worst: String,
}

impl OpCheck {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            forward_err: 0.0,
            grad_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, forward_err: f64, grad: GradCheckReport) {
        self.instances += 1;
        self.forward_err = self.forward_err.max(forward_err);
        if grad.max_rel_err > self.grad_err || !grad.max_rel_err.is_finite() {
            self.grad_err = grad.max_rel_err;
            self.worst = grad.worst;
        }
    }

    pub fn passes(&self) -> bool {
        self.instances >= INSTANCES as usize && self.forward_err <= FORWARD_TOL && self.grad_err <= GRAD_TOL
    }
}

impl std::fmt::Display for OpCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<15} instances {:>2}  forward rel err {:.1e}  gradient rel err {:.1e}",
            self.name, self.instances, self.forward_err, self.grad_err
        )?;
        if !self.worst.is_empty() && self.grad_err > GRAD_TOL {
            write!(f, " ({})", self.worst)?;
        }
        Ok(())
    }
}

fn eval(store: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> magnet::Result<Var>) -> M {
    let mut g = Graph::with_params(store);
    let v = f(&mut g).unwrap();
    to_m(g.value(v))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    loop {
        let m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if m.iter().any(|&v| v) && m.iter().any(|&v| !v) {
            return m;
        }
    }
}

/// Random token sequences with a CLS head, 1.. words and PAD tails.
pub fn random_text(rng: &mut ChaCha8Rng, batch: usize, len: usize, vocab: usize) -> TextBatch {
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let words = rng.gen_range(1..len);
            let mut s = vec![CLS];
            s.extend((0..words).map(|_| rng.gen_range(3..vocab)));
            s.resize(len, PAD);
            s
        })
        .collect();
    TextBatch::new(&seqs).unwrap()
}

pub fn check_bce() -> OpCheck {
    let mut out = OpCheck::new("bce_loss");
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
        let x = rand_m(&mut r, h * w, 1, 3.0);
        let gt: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect();
        let gt_t = Tensor::new(h * w, 1, gt.clone()).unwrap();
        let mut store = ParamStore::new();
        store.insert("logits", to_t(&x));
        let f = |g: &mut Graph<'_, f64>| {
            let l = g.param("logits")?;
            bce_loss(g, l, &gt_t)
        };
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let err = scalar_rel_err(eval(&store, f)[0][0], bce(&flat, &gt));
        out.record(err, grad_check(&store, 64, LOSS_STEP, f));
    }
    out
}

pub fn check_dice() -> OpCheck {
    let mut out = OpCheck::new("dice_loss");
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let n = r.gen_range(4..30);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
        let gt: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect();
        let gt_t = Tensor::new(n, 1, gt.clone()).unwrap();
        let mut store = ParamStore::new();
        store.insert("probs", Tensor::new(n, 1, p.clone()).unwrap());
        let f = |g: &mut Graph<'_, f64>| {
            let v = g.param("probs")?;
            dice_loss(g, v, &gt_t)
        };
        let err = scalar_rel_err(eval(&store, f)[0][0], dice(&p, &gt));
        out.record(err, grad_check(&store, 64, LOSS_STEP, f));
    }
    out
}

fn form(literal: bool) -> CalForm {
    if literal {
        CalForm::Literal
    } else {
        CalForm::Log
    }
}

pub fn check_cal_p2p() -> OpCheck {
    let mut out = OpCheck::new("cal_p2p");
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (n, c) = (r.gen_range(3..10), r.gen_range(2..6));
        let x = rand_m(&mut r, n, c, 1.0);
        let fg = random_mask(&mut r, n);
        let tau = r.gen_range(0.2..1.5);
        let literal = seed % 2 == 1;
        let mut store = ParamStore::new();
        store.insert("features", to_t(&x));
        let f = |g: &mut Graph<'_, f64>| {
            let v = g.param("features")?;
            let part = PixelPartition::new(g, v, &fg)?;
            cal_p2p(g, &part, tau, form(literal))
        };
        let err = scalar_rel_err(eval(&store, f)[0][0], cal_p2p_oracle(&x, &fg, tau, literal));
        out.record(err, grad_check(&store, 64, LOSS_STEP, f));
    }
    out
}

pub fn check_cal_p2t() -> OpCheck {
    let mut out = OpCheck::new("cal_p2t");
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (n, c, d, m) = (r.gen_range(3..10), r.gen_range(2..6), r.gen_range(2..6), r.gen_range(1..5));
        let x = rand_m(&mut r, n, c, 1.0);
        let words = rand_m(&mut r, m, d, 1.0);
        let fg = random_mask(&mut r, n);
        let tau = r.gen_range(0.2..1.5);
        let literal = seed % 2 == 1;
        let proj = Linear::new("proj", d, c);
        let mut store = ParamStore::new();
        proj.init(&mut store, seed);
        randomize(&mut store, &mut r, 0.8);
        store.insert("features", to_t(&x));
        store.insert("words", to_t(&words));
        let f = |g: &mut Graph<'_, f64>| {
            let v = g.param("features")?;
            let wv = g.param("words")?;
            let part = PixelPartition::new(g, v, &fg)?;
            cal_p2t(g, &part, wv, &proj, tau, form(literal))
        };
        let oracle = cal_p2t_oracle(&store, "proj", &x, &fg, &words, tau, literal);
        let err = scalar_rel_err(eval(&store, f)[0][0], oracle);
        out.record(err, grad_check(&store, 64, LOSS_STEP, f));
    }
    out
}

pub fn check_grounding_loss() -> OpCheck {
    let mut out = OpCheck::new("grounding_loss");
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (n, v) = (r.gen_range(1..6), r.gen_range(2..12));
        let x = rand_m(&mut r, n, v, 2.0);
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
        let mut store = ParamStore::new();
        store.insert("logits", to_t(&x));
        let f = |g: &mut Graph<'_, f64>| {
            let l = g.param("logits")?;
            grounding_loss(g, l, &targets)
        };
        let err = scalar_rel_err(eval(&store, f)[0][0], cross_entropy(&x, &targets));
        out.record(err, grad_check(&store, 64, LOSS_STEP, f));
    }
    out
}

fn feature_map(g: &mut Graph<'_, f64>, name: &str, batch: usize, h: usize, w: usize, c: usize) -> magnet::Result<FeatureMap> {
    Ok(FeatureMap {
        var: g.param(name)?,
        batch,
        h,
        w,
        c,
    })
}

pub fn check_pyramid_pool() -> OpCheck {
    let mut out = OpCheck::new("pyramid_pool");
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let (batch, h, w, c) = (r.gen_range(1..3), r.gen_range(2..8), r.gen_range(2..8), r.gen_range(1..4));
        let k = r.gen_range(1..=h.min(w));
        let x = rand_m(&mut r, batch * h * w, c, 1.0);
        let mut store = ParamStore::new();
        store.insert("p", to_t(&x));
        let build = |g: &mut Graph<'_, f64>| {
            let p = feature_map(g, "p", batch, h, w, c)?;
            Ok(pyramid_pool(g, &p, k)?.var)
        };
        let err = rel_err(&eval(&store, build), &pool(&x, batch, h, w, k));
        let grad = grad_check(&store, 32, NET_STEP, |g| {
            let v = build(g)?;
            Ok(weighted_sum(g, v, seed))
        });
        out.record(err, grad);
    }
    out
}

pub fn check_xmha() -> OpCheck {
    let mut out = OpCheck::new("xmha");
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let (batch, len, k) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(1..4));
        let (d, c, heads) = (r.gen_range(2..6), r.gen_range(2..6), r.gen_range(1..3));
        let width = heads * r.gen_range(1..4);
        let text = random_text(&mut r, batch, len, 16);
        let x = Xmha::new("x", d, c, width, heads);
        let mut store = ParamStore::new();
        x.init(&mut store, seed);
        randomize(&mut store, &mut r, 0.8);
        let o = rand_m(&mut r, batch * len, d, 1.0);
        let p = rand_m(&mut r, batch * k * k, c, 1.0);
        store.insert("o", to_t(&o));
        store.insert("p", to_t(&p));
        let build = |g: &mut Graph<'_, f64>| -> magnet::Result<(Var, Var)> {
            let ov = g.param("o")?;
            let pm = feature_map(g, "p", batch, k, k, c)?;
            let (ot, pi) = x.forward(g, ov, &text, &pm)?;
            Ok((ot, pi))
        };
        let (ot, pi) = {
            let mut g = Graph::with_params(&store);
            let (a, b) = build(&mut g).unwrap();
            (to_m(g.value(a)), to_m(g.value(b)))
        };
        let (ot_ref, pi_ref) = xmha_oracle(&store, "x", &o, &p, batch, &text.key_mask, heads);
        let err = rel_err(&ot, &ot_ref).max(rel_err(&pi, &pi_ref));
        let grad = grad_check(&store, 16, NET_STEP, |g| {
            let (a, b) = build(g)?;
            let sa = weighted_sum(g, a, seed);
            let sb = weighted_sum(g, b, seed + 1);
            Ok(g.add(sa, sb)?)
        });
        out.record(err, grad);
    }
    out
}

pub fn check_cam_forward() -> OpCheck {
    let mut out = OpCheck::new("cam_forward");
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let (batch, len) = (r.gen_range(1..3), r.gen_range(2..5));
        let hw = r.gen_range(2..6);
        let (d, c, heads) = (r.gen_range(2..6), r.gen_range(2..6), r.gen_range(1..3));
        let cfg = CamConfig {
            scales: vec![1, 2, 3, 6],
            heads,
            width: heads * 2,
        };
        let scales = cfg.scales_for(hw, hw);
        let stage = CamStage::new(2, d, c, &scales, &cfg).unwrap();
        let text = random_text(&mut r, batch, len, 16);
        let mut store = ParamStore::new();
        stage.init(&mut store, seed);
        randomize(&mut store, &mut r, 0.8);
        let o = rand_m(&mut r, batch * len, d, 1.0);
        let p = rand_m(&mut r, batch * hw * hw, c, 1.0);
        store.insert("o", to_t(&o));
        store.insert("p", to_t(&p));
        let build = |g: &mut Graph<'_, f64>| -> magnet::Result<(Var, Var)> {
            let ov = g.param("o")?;
            let pm = feature_map(g, "p", batch, hw, hw, c)?;
            let (on, pn) = stage.forward(g, ov, &pm, &text, &mut SpatialCache::new())?;
            Ok((on, pn.var))
        };
        let (on, pn) = {
            let mut g = Graph::with_params(&store);
            let (a, b) = build(&mut g).unwrap();
            (to_m(g.value(a)), to_m(g.value(b)))
        };
        let (on_ref, pn_ref) = cam_oracle(&store, 2, &scales, &o, &p, batch, hw, hw, &text.key_mask, heads);
        let err = rel_err(&on, &on_ref).max(rel_err(&pn, &pn_ref));
        let grad = grad_check(&store, 6, NET_STEP, |g| {
            let (a, b) = build(g)?;
            let sa = weighted_sum(g, a, seed);
            let sb = weighted_sum(g, b, seed + 1);
            Ok(g.add(sa, sb)?)
        });
        out.record(err, grad);
    }
    out
}

pub fn check_encode_mask() -> OpCheck {
    let mut out = OpCheck::new("encode_mask");
    for seed in 0..INSTANCES {
        let mut r = rng(800 + seed);
        let (n, d) = (r.gen_range(1..4), r.gen_range(2..8));
        let enc = MaskEncoder::new("m", 2, d);
        let mut store = ParamStore::new();
        enc.mlp.init(&mut store, seed);
        randomize(&mut store, &mut r, 0.8);
        let cs: Vec<(f64, f64)> = (0..n).map(|_| (r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0))).collect();
        let build = |g: &mut Graph<'_, f64>| enc.encode_centroids(g, &cs);
        let err = rel_err(&eval(&store, build), &encode_mask_oracle(&store, "m", &cs));
        let grad = grad_check(&store, 32, NET_STEP, |g| {
            let v = build(g)?;
            Ok(weighted_sum(g, v, seed))
        });
        out.record(err, grad);
    }
    out
}

pub fn check_predict_masked() -> OpCheck {
    let mut out = OpCheck::new("predict_masked");
    for seed in 0..INSTANCES {
        let mut r = rng(900 + seed);
        let (batch, len, hw) = (r.gen_range(1..3), r.gen_range(3..6), r.gen_range(1..3));
        let (d, c, vocab) = (4, r.gen_range(2..5), 12);
        let cfg = GroundingConfig {
            depth: r.gen_range(1..3),
            heads: 2,
            ..GroundingConfig::default()
        };
        let mg = MaskGrounding::new(cfg.clone(), d, c, hw * hw, vocab).unwrap();
        let text0 = random_text(&mut r, batch, len, vocab);
        let batches: Vec<MaskedBatch> = (0..batch)
            .map(|b| {
                let cen = (r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0));
                mask_tokens(text0.sequence(b), cen, 0.5, &mut r).unwrap()
            })
            .collect();
        let masked: Vec<Vec<usize>> = batches.iter().map(|b| b.tokens.clone()).collect();
        let text = TextBatch::new(&masked).unwrap();
        let mut store = ParamStore::new();
        mg.init(&mut store, seed);
        randomize(&mut store, &mut r, 0.6);
        let o = rand_m(&mut r, batch * len, d, 1.0);
        let p = rand_m(&mut r, batch * hw * hw, c, 1.0);
        store.insert("o", to_t(&o));
        store.insert("p", to_t(&p));
        let build = |g: &mut Graph<'_, f64>| {
            let ov = g.param("o")?;
            let pm = feature_map(g, "p", batch, hw, hw, c)?;
            let inputs = GroundingInputs {
                image: Some(&pm),
                batches: &batches,
                region_average: None,
            };
            Ok(mg.predict_masked(g, ov, &text, &inputs)?.0)
        };
        let oracle = predict_masked_oracle(&store, &cfg, &o, &p, &text, &batches);
        let err = rel_err(&eval(&store, build), &oracle);
        let grad = grad_check(&store, 4, NET_STEP, |g| {
            let v = build(g)?;
            Ok(weighted_sum(g, v, seed))
        });
        out.record(err, grad);
    }
    out
}

pub fn check_all() -> Vec<OpCheck> {
    vec![
        check_dice(),
        check_bce(),
        check_cal_p2p(),
        check_cal_p2t(),
        check_grounding_loss(),
        check_pyramid_pool(),
        check_xmha(),
        check_cam_forward(),
        check_encode_mask(),
        check_predict_masked(),
    ]
}
