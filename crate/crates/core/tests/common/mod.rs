//! Scalar-loop reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` matrices with explicit
//! loops, independent of the tape and of the slice kernels.
#![allow(dead_code)]

use vcr_core::numerics::{ParamSet, RngState, Scalar, Tensor};
use vcr_core::pipeline::ModelConfig;
use vcr_core::taskdata::{SceneExample, SubtaskInputs, Vocabulary};

pub type M = Vec<Vec<f64>>;

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest elementwise error relative to the largest magnitude in `want`.
pub fn max_scaled_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    got.iter().zip(want).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max)
}

pub fn flat(m: &M) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn random_m(rng: &mut RngState, r: usize, c: usize) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.normal()).collect()).collect()
}

pub fn to_tensor<T: Scalar>(m: &M) -> Tensor<T> {
    let rows: Vec<Vec<T>> = m.iter().map(|r| r.iter().map(|&v| T::cast(v)).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

pub fn from_slice(data: &[f64], rows: usize, cols: usize) -> M {
    assert_eq!(data.len(), rows * cols);
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> M {
    let (r, c) = t.as_matrix_dims();
    let data: Vec<f64> = t.data().iter().map(|v| v.to_f64_lossless()).collect();
    from_slice(&data, r, c)
}

/// A named parameter as a matrix; vectors become a single row.
pub fn param<T: Scalar>(params: &ParamSet<T>, name: &str) -> M {
    let id = params.lookup(name).unwrap_or_else(|| panic!("no parameter {name}"));
    from_tensor(params.get(id))
}

pub fn mm(a: &M, b: &M) -> M {
    let k = b.len();
    let n = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &M, bias: &M) -> M {
    a.iter().map(|r| r.iter().zip(&bias[0]).map(|(x, b)| x + b).collect()).collect()
}

pub fn scale(a: &M, s: f64) -> M {
    a.iter().map(|r| r.iter().map(|x| x * s).collect()).collect()
}

pub fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()).collect()
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &M) -> M {
    a.iter().map(|r| softmax_row(r)).collect()
}

pub fn layer_norm(a: &M, gamma: &M, beta: &M, eps: f64) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            r.iter().enumerate().map(|(j, x)| (x - mean) * inv * gamma[0][j] + beta[0][j]).collect()
        })
        .collect()
}

pub fn concat_cols(parts: &[&M]) -> M {
    (0..parts[0].len()).map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect()).collect()
}

pub fn concat_rows(parts: &[&M]) -> M {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

pub fn slice_cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn linear(x: &M, w: &M, b: Option<&M>) -> M {
    let y = mm(x, w);
    match b {
        Some(b) => add_bias(&y, b),
        None => y,
    }
}

/// softmax(Q·Kᵀ/√d)·V with explicit loops; returns (output, weights).
pub fn attention(q: &M, k: &M, v: &M) -> (M, M) {
    let d = q[0].len() as f64;
    let logits: M = q
        .iter()
        .map(|qr| k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect())
        .collect();
    let w = softmax_rows(&logits);
    (mm(&w, v), w)
}

/// Multi-head attention weights read out of a parameter set.
pub struct MhaW {
    pub heads: usize,
    pub wq: M,
    pub bq: M,
    pub wk: M,
    pub bk: M,
    pub wv: M,
    pub bv: M,
    pub wo: M,
    pub bo: M,
}

impl MhaW {
    pub fn load<T: Scalar>(p: &ParamSet<T>, prefix: &str, heads: usize) -> Self {
        let g = |s: &str| param(p, &format!("{prefix}.{s}"));
        Self {
            heads,
            wq: g("q.weight"),
            bq: g("q.bias"),
            wk: g("k.weight"),
            bk: g("k.bias"),
            wv: g("v.weight"),
            bv: g("v.bias"),
            wo: g("out.weight"),
            bo: g("out.bias"),
        }
    }
}

pub fn mha(qin: &M, kin: &M, vin: &M, w: &MhaW) -> M {
    let q = linear(qin, &w.wq, Some(&w.bq));
    let k = linear(kin, &w.wk, Some(&w.bk));
    let v = linear(vin, &w.wv, Some(&w.bv));
    let d = q[0].len();
    let dk = d / w.heads;
    let outs: Vec<M> = (0..w.heads)
        .map(|h| attention(&slice_cols(&q, h * dk, dk), &slice_cols(&k, h * dk, dk), &slice_cols(&v, h * dk, dk)).0)
        .collect();
    let refs: Vec<&M> = outs.iter().collect();
    linear(&concat_cols(&refs), &w.wo, Some(&w.bo))
}

pub fn positional(n: usize, d: usize) -> M {
    (0..n)
        .map(|pos| {
            (0..d)
                .map(|j| {
                    let i = j / 2;
                    let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                    if j % 2 == 0 {
                        angle.sin()
                    } else {
                        angle.cos()
                    }
                })
                .collect()
        })
        .collect()
}

pub struct FfnW {
    pub w1: M,
    pub b1: M,
    pub w2: M,
    pub b2: M,
}

impl FfnW {
    pub fn load<T: Scalar>(p: &ParamSet<T>, prefix: &str) -> Self {
        let g = |s: &str| param(p, &format!("{prefix}.{s}"));
        Self { w1: g("fc1.weight"), b1: g("fc1.bias"), w2: g("fc2.weight"), b2: g("fc2.bias") }
    }
}

pub fn ffn(x: &M, w: &FfnW) -> M {
    linear(&relu(&linear(x, &w.w1, Some(&w.b1))), &w.w2, Some(&w.b2))
}

/// LN(h + FFN(h)) with h = LN(x + MHA(x, guide, guide)).
pub fn attention_unit<T: Scalar>(p: &ParamSet<T>, prefix: &str, heads: usize, x: &M, guide: &M, eps: f64) -> M {
    let g = |s: &str| param(p, &format!("{prefix}.{s}"));
    let att = mha(x, guide, guide, &MhaW::load(p, &format!("{prefix}.attention"), heads));
    let h = layer_norm(&add(x, &att), &g("norm1.gamma"), &g("norm1.beta"), eps);
    let f = ffn(&h, &FfnW::load(p, &format!("{prefix}.ffn")));
    layer_norm(&add(&h, &f), &g("norm2.gamma"), &g("norm2.beta"), eps)
}

pub fn co_attention<T: Scalar>(p: &ParamSet<T>, blocks: usize, heads: usize, q: &M, r: &M, eps: f64) -> (M, M) {
    let (mut zq, mut zr) = (q.clone(), r.clone());
    for i in 0..blocks {
        let b = format!("encoder.block{i}");
        let sq = attention_unit(p, &format!("{b}.self_query"), heads, &zq, &zq, eps);
        let sr = attention_unit(p, &format!("{b}.self_response"), heads, &zr, &zr, eps);
        zq = attention_unit(p, &format!("{b}.guided_query"), heads, &sq, &sr, eps);
        zr = attention_unit(p, &format!("{b}.guided_response"), heads, &sr, &sq, eps);
    }
    (zq, zr)
}

/// Textual branch, visual branch and text-object unit for one token stream.
pub fn fuse_sequence<T: Scalar>(p: &ParamSet<T>, heads: usize, tokens: &M, objects: &M, eps: f64, positions: bool) -> M {
    let x1 = mha(tokens, tokens, tokens, &MhaW::load(p, "fusion.textual", heads));
    let normed = layer_norm(objects, &param(p, "fusion.object_norm.gamma"), &param(p, "fusion.object_norm.beta"), eps);
    let q_ve = if positions { add(&normed, &positional(objects.len(), objects[0].len())) } else { normed };
    let (x3, _) = attention(&q_ve, &x1, &x1);
    let joint = concat_cols(&[&q_ve, &x3]);
    let fused = mha(&joint, &joint, &joint, &MhaW::load(p, "fusion.visual", heads));
    mha(&x1, &fused, &fused, &MhaW::load(p, "fusion.text_object", heads))
}

pub fn reduce<T: Scalar>(p: &ParamSet<T>, prefix: &str, z: &M) -> (Vec<f64>, Vec<f64>) {
    let g = |s: &str| param(p, &format!("{prefix}.{s}"));
    let h = relu(&linear(z, &g("hidden.weight"), Some(&g("hidden.bias"))));
    let scores = linear(&h, &g("score.weight"), Some(&g("score.bias")));
    let alpha = softmax_row(&scores.iter().map(|r| r[0]).collect::<Vec<_>>());
    let d = z[0].len();
    let summary = (0..d).map(|j| (0..z.len()).map(|i| alpha[i] * z[i][j]).sum()).collect();
    (summary, alpha)
}

pub fn fuse_streams<T: Scalar>(p: &ParamSet<T>, zq: &[f64], zr: &[f64], eps: f64) -> Vec<f64> {
    let a = mm(&vec![zq.to_vec()], &param(p, "head.project_query"));
    let b = mm(&vec![zr.to_vec()], &param(p, "head.project_response"));
    layer_norm(&add(&a, &b), &param(p, "head.norm.gamma"), &param(p, "head.norm.beta"), eps).remove(0)
}

pub fn classify<T: Scalar>(p: &ParamSet<T>, c: &[f64]) -> f64 {
    let g = |s: &str| param(p, &format!("head.classifier.{s}"));
    let h = relu(&linear(&vec![c.to_vec()], &g("fc1.weight"), Some(&g("fc1.bias"))));
    linear(&h, &g("fc2.weight"), Some(&g("fc2.bias")))[0][0]
}

/// Eval-mode logits of the whole model by loops. `memory` carries the
/// query/response memory means; `None` means memory is switched off.
pub fn model_logits<T: Scalar>(
    p: &ParamSet<T>,
    cfg: &ModelConfig,
    ex: &SceneExample,
    inputs: &SubtaskInputs,
    vocab: &Vocabulary,
    memory: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let (heads, eps) = (cfg.heads, cfg.layer_norm_eps);
    let feats: M = ex.objects.iter().map(|o| o.features.clone()).collect();
    let objects = linear(&feats, &param(p, "embedding.objects.weight"), Some(&param(p, "embedding.objects.bias")));
    let table = param(p, "embedding.tokens");
    let embed = |seq: &[usize]| -> M {
        seq.iter()
            .map(|&t| match vocab.tag_of(t) {
                Some(tag) => objects[ex.object_with_tag(tag).unwrap()].clone(),
                None => table[t].clone(),
            })
            .collect()
    };
    let pooled: Vec<f64> = (0..cfg.d_model).map(|j| objects.iter().map(|r| r[j]).sum::<f64>() / objects.len() as f64).collect();
    let fuse = |tokens: M| -> M {
        if cfg.fusion {
            fuse_sequence(p, heads, &tokens, &objects, eps, true)
        } else {
            concat_rows(&[&tokens, &vec![pooled.clone()]])
        }
    };
    let q_o = fuse(embed(&inputs.query));
    let mem_row = |mean: &[f64]| {
        linear(&vec![mean.to_vec()], &param(p, "encoder.memory_projection.weight"), Some(&param(p, "encoder.memory_projection.bias")))
    };
    inputs
        .responses
        .iter()
        .map(|r| {
            let r_o = fuse(embed(r));
            let (mut zq, mut zr) = co_attention(p, cfg.blocks, heads, &q_o, &r_o, eps);
            if let Some((mq, mr)) = memory {
                zq = concat_rows(&[&zq, &mem_row(mq)]);
                zr = concat_rows(&[&zr, &mem_row(mr)]);
            }
            let (sq, _) = reduce(p, "head.reduce_query", &zq);
            let (sr, _) = reduce(p, "head.reduce_response", &zr);
            classify(p, &fuse_streams(p, &sq, &sr, eps))
        })
        .collect()
}

/// Precision at each relevant position, averaged over the relevant items.
pub fn brute_force_ap(scores: &[f64], relevant: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Bubble sort with explicit tie-breaking: higher score first, then lower index.
    for i in 0..order.len() {
        for j in 0..order.len() - 1 - i {
            let (a, b) = (order[j], order[j + 1]);
            if scores[b] > scores[a] || (scores[b] == scores[a] && b < a) {
                order.swap(j, j + 1);
            }
        }
    }
    let mut hits = 0.0;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1.0;
            total += hits / (k + 1) as f64;
        }
    }
    total / relevant.iter().filter(|&&r| r).count() as f64
}

/// Twenty hand-picked (scores, gold) ranking cases, ties and signed zeros included.
pub fn map_cases() -> Vec<(Vec<f64>, usize)> {
    vec![
        (vec![4.0, 3.0, 2.0, 1.0], 0),
        (vec![4.0, 3.0, 2.0, 1.0], 1),
        (vec![4.0, 3.0, 2.0, 1.0], 2),
        (vec![4.0, 3.0, 2.0, 1.0], 3),
        (vec![1.0, 2.0, 3.0, 4.0], 3),
        (vec![1.0, 2.0, 3.0, 4.0], 0),
        (vec![0.0, 0.0, 0.0, 0.0], 0),
        (vec![0.0, 0.0, 0.0, 0.0], 3),
        (vec![0.5, 0.5, -1.0, 2.0], 1),
        (vec![0.5, 0.5, -1.0, 2.0], 0),
        (vec![-3.0, -1.0, -2.0, -4.0], 2),
        (vec![1e-9, 0.0, -1e-9, 2e-9], 0),
        (vec![7.0, 7.0, 7.0, 1.0], 2),
        (vec![f64::MAX, 0.0, f64::MIN, 1.0], 3),
        (vec![2.0, 1.0, 2.0, 1.0], 3),
        (vec![2.0, 1.0, 2.0, 1.0], 2),
        (vec![0.1, 0.2, 0.3, 0.25], 3),
        (vec![0.1, 0.2, 0.3, 0.25], 1),
        (vec![-0.0, 0.0, 1.0, -1.0], 1),
        (vec![5.0, 4.0, 6.0, 3.0], 2),
    ]
}
