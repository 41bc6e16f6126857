mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use wavedino::model::ModelNetwork;
use wavedino::tensor::{Graph, ParamId, ParamStore, Tensor};
use wavedino::tfm::TimeFrequencyMap;
use wavedino::vit::{patchify, Encoder, ViTConfig, LN_EPS};

type Mat = Vec<Vec<f64>>;

fn param(p: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    p.get(id).data().to_vec()
}

fn as_mat(data: &[f64], cols: usize) -> Mat {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) / (var + LN_EPS).sqrt() * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.045 * x.powi(3))).tanh())
}

fn random_maps(n: usize, size: usize, seed: u64) -> Vec<TimeFrequencyMap> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|_| {
            let px = (0..size * size * 3).map(|_| r.random_range(0.0f32..1.0)).collect();
            TimeFrequencyMap::new(size, size, 3, px, "").unwrap()
        })
        .collect()
}

fn perturbed(seed: u64) -> (ModelNetwork, ParamStore<f64>) {
    let (net, mut params) = ModelNetwork::init::<f64>(&common::tiny_model(), seed).unwrap();
    let mut r = common::rng(seed + 1);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
    (net, params)
}

/// Patch embedding as a stride-P convolution read straight from the image.
fn conv_embed(map: &TimeFrequencyMap, w: &[f64], cfg: &ViTConfig) -> Mat {
    let (p, c, d, size) = (cfg.patch_size, cfg.channels, cfg.embed_dim, cfg.image_size);
    let grid = size / p;
    let mut out = vec![vec![0.0; d]; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        let v = map.pixels()[((gy * p + dy) * size + gx * p + dx) * c + ch] as f64;
                        let k = (dy * p + dx) * c + ch;
                        for j in 0..d {
                            out[gy * grid + gx][j] += v * w[k * d + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Loop-level encoder: class token and features per map.
fn naive_encoder(enc: &Encoder, p: &ParamStore<f64>, map: &TimeFrequencyMap) -> Vec<f64> {
    let cfg = enc.config();
    let (d, h, dk) = (cfg.embed_dim, cfg.n_heads, cfg.head_dim);
    let pos = as_mat(&param(p, enc.e_pos), d);
    let mut z: Mat = vec![param(p, enc.x_class)];
    z.extend(conv_embed(map, &param(p, enc.w_emd), cfg));
    for (row, e) in z.iter_mut().zip(&pos) {
        row.iter_mut().zip(e).for_each(|(x, e)| *x += e);
    }
    let s = z.len();
    for b in &enc.blocks {
        let u: Mat = z.iter().map(|r| layer_norm(r, &param(p, b.ln1_gain), &param(p, b.ln1_bias))).collect();
        let q = matmul(&u, &as_mat(&param(p, b.w_q), h * dk));
        let k = matmul(&u, &as_mat(&param(p, b.w_k), h * dk));
        let v = matmul(&u, &as_mat(&param(p, b.w_v), h * dk));
        let mut merged = vec![vec![0.0; h * dk]; s];
        for head in 0..h {
            let cols = head * dk..(head + 1) * dk;
            for i in 0..s {
                let logits: Vec<f64> = (0..s)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in cols.clone() {
                    merged[i][c] = (0..s).map(|j| e[j] / sum * v[j][c]).sum();
                }
            }
        }
        let attn_out = matmul(&merged, &as_mat(&param(p, b.w_o), d));
        let z1: Mat = z.iter().zip(&attn_out).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let u2: Mat = z1.iter().map(|r| layer_norm(r, &param(p, b.ln2_gain), &param(p, b.ln2_bias))).collect();
        let (b1, b2) = (param(p, b.b1), param(p, b.b2));
        let hidden: Mat = matmul(&u2, &as_mat(&param(p, b.w1), cfg.mlp_dim))
            .into_iter()
            .map(|r| r.iter().zip(&b1).map(|(x, b)| gelu(x + b)).collect())
            .collect();
        let mlp = matmul(&hidden, &as_mat(&param(p, b.w2), d));
        z = z1
            .iter()
            .zip(&mlp)
            .map(|(a, m)| a.iter().zip(m).zip(&b2).map(|((x, y), b)| x + y + b).collect())
            .collect();
    }
    layer_norm(&z[0], &param(p, enc.ln_gain), &param(p, enc.ln_bias))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
    v.iter().map(|x| x / n).collect()
}

#[test]
fn patch_embedding_is_a_strided_convolution() {
    let (net, params) = perturbed(1);
    let cfg = net.encoder.config().clone();
    let maps = random_maps(2, cfg.image_size, 3);
    let refs: Vec<_> = maps.iter().collect();
    let patches: Tensor<f64> = patchify(&refs, &cfg).unwrap();
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let z = net.encoder.patch_embed(&bound, g.constant(patches)).unwrap().value();
    let pos = param(&params, net.encoder.e_pos);
    let s = cfg.seq_len();
    for (i, map) in maps.iter().enumerate() {
        let conv = conv_embed(map, &param(&params, net.encoder.w_emd), &cfg);
        for (t, row) in conv.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let got = z.data()[(i * s + t + 1) * cfg.embed_dim + j] - pos[(t + 1) * cfg.embed_dim + j];
                assert!((got - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_and_projector_match_loop_oracle() {
    let (net, params) = perturbed(4);
    let maps = random_maps(3, net.encoder.config().image_size, 8);
    let refs: Vec<_> = maps.iter().collect();
    let y = net.encoder.encode(&params, &refs).unwrap();
    let d = net.encoder.config().embed_dim;
    let g = Graph::new();
    let bound = params.bind(&g, false);
    let patches = g.constant(patchify::<f64>(&refs, net.encoder.config()).unwrap());
    let (_, q) = net.forward(&bound, patches).unwrap();
    let q = q.value();
    let k = net.out_dim();
    let v_rows = as_mat(net.projector.normalized_weights(&params).data(), net.projector.config().bottleneck());
    for (i, map) in maps.iter().enumerate() {
        let oracle = naive_encoder(&net.encoder, &params, map);
        for j in 0..d {
            assert!((y.data()[i * d + j] - oracle[j]).abs() < 1e-10);
        }
        let mut u = oracle.clone();
        for (li, &(w, b)) in net.projector.layers.iter().enumerate() {
            let out = net.projector.config().dims[li];
            let bias = param(&params, b);
            u = matmul(&vec![u], &as_mat(&param(&params, w), out))[0].iter().zip(&bias).map(|(x, b)| x + b).collect();
            if li + 1 < net.projector.layers.len() {
                u = u.into_iter().map(gelu).collect();
            }
        }
        let u = unit(&u);
        for (c, row) in v_rows.iter().enumerate() {
            let dot: f64 = u.iter().zip(row).map(|(a, b)| a * b).sum();
            assert!((q.data()[i * k + c] - dot).abs() < 1e-10);
            assert!(dot.abs() <= 1.0 + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn without_positions_features_ignore_patch_order(seed in any::<u64>()) {
        let (net, mut params) = perturbed(seed % 1000);
        params.get_mut(net.encoder.e_pos).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let cfg = net.encoder.config().clone();
        let map = &random_maps(1, cfg.image_size, seed)[0];
        let patches: Tensor<f64> = patchify(&[map], &cfg).unwrap();
        let rows = cfg.patch_dim();
        let mut order: Vec<usize> = (0..cfg.n_patches()).collect();
        order.shuffle(&mut common::rng(seed));
        let shuffled: Vec<f64> = order.iter().flat_map(|&i| patches.data()[i * rows..(i + 1) * rows].to_vec()).collect();
        let shuffled = Tensor::new(patches.shape(), shuffled).unwrap();
        let y = |t: Tensor<f64>| {
            let g = Graph::new();
            let b = params.bind(&g, false);
            net.encoder.forward(&b, g.constant(t)).unwrap().0.value().data().to_vec()
        };
        for (a, b) in y(patches).iter().zip(y(shuffled)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
