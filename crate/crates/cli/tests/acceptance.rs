//! Acceptance suite: one verdict line per criterion, written straight to
//! stderr so it shows even when test output is captured.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use histoforge::augment::{augment_class, plan_for_class};
use histoforge::container::{sha256_hex, Tensor};
use histoforge::head::{self, count_params, gradients, logits, softmax, HeadConfig, HeadParams, TrainConfig};
use histoforge::metrics::{aggregate, class_metrics, confusion, f1_score, ConfusionMatrix};
use histoforge::stain::{
    column, cosine, factorize, normalize_to_target, rgb_to_od, SnmfParams, StainMatrix, StainModel,
};
use histoforge::synthetic::{dense_concentrations, noise_image, random_stain_matrix, render, separable_blobs};
use histoforge::vit::{
    attention_weights, encode_tokens, encoder_block, gelu, load_weights, multi_head_attention, BlockWeights, Matrix,
    VitConfig, VitWeights,
};
use histoforge::{ClassLabel, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs `body`, prints the verdict line and fails the test on FAIL.
fn criterion(n: u8, title: &str, body: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let line = format!(
        "criterion {n} [{}] {title}: {detail} ({:.1} s)\n",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

#[test]
fn criterion_1_parameter_accounting() {
    criterion(1, "head parameter counts", || {
        let t = Instant::now();
        let one = count_params(&HeadConfig::one_layer(768, 5));
        let two = count_params(&HeadConfig::two_layer(768, 256, 5, 0.5));
        let inst = HeadParams::zeros(HeadConfig::two_layer(768, 256, 5, 0.5)).count();
        let secs = t.elapsed().as_secs_f64();
        let pass = one == 3845 && two == 198_149 && inst == two && secs < 1.0;
        (
            pass,
            format!("one-layer {one} (want 3845), two-layer {two} (want 198149), instantiated {inst}"),
        )
    });
}

fn digest_outputs(outputs: &[histoforge::augment::AugmentedImage]) -> String {
    let mut bytes = Vec::new();
    for o in outputs {
        bytes.extend_from_slice(o.input_id.as_bytes());
        bytes.extend_from_slice(o.step.as_bytes());
        bytes.extend_from_slice(&o.image.width().to_le_bytes());
        bytes.extend_from_slice(&o.image.height().to_le_bytes());
        bytes.extend_from_slice(o.image.as_bytes());
    }
    sha256_hex(&bytes)
}

#[test]
fn criterion_2_augmentation_counts() {
    criterion(2, "augmentation conformance", || {
        let t = Instant::now();
        let sizes = [400usize, 553, 100, 132, 93];
        let want = [2800usize, 2765, 3000, 3036, 3069];
        let mut got = Vec::new();
        let mut identical = true;
        for (class, &n) in ClassLabel::ALL.iter().zip(&sizes) {
            let inputs: Vec<(String, ImageTensor)> = (0..n)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 * class.index() as u64 + i as u64);
                    (format!("{}-{i:03}", class.short()), noise_image(&mut rng, 224, 224))
                })
                .collect();
            let plan = plan_for_class(*class);
            let a = augment_class(&inputs, &plan, 42).unwrap();
            let (count, da) = (a.len(), digest_outputs(&a));
            drop(a);
            let db = digest_outputs(&augment_class(&inputs, &plan, 42).unwrap());
            identical &= da == db;
            got.push(count);
        }
        let secs = t.elapsed().as_secs_f64();
        let pass = got == want && identical && secs < 300.0;
        (
            pass,
            format!("new images {got:?} (want {want:?}), reruns byte-identical: {identical}"),
        )
    });
}

#[test]
fn criterion_3_snmf_recovery() {
    criterion(3, "SNMF stain recovery", || {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(2023);
        let params = SnmfParams::default();
        let mut worst_cos: f64 = 1.0;
        let mut worst_rise: f64 = f64::NEG_INFINITY;
        let mut worst_diff = 0u8;
        for trial in 0..50u64 {
            let w_true: StainMatrix = random_stain_matrix(&mut rng, 0.9, 0.05);
            let mut img_rng = ChaCha8Rng::seed_from_u64(7000 + trial);
            let h = dense_concentrations(&mut img_rng, 64 * 64, [1.0, 1.0]);
            let img = render(&w_true, &h, 64, 64, 255.0);
            let od = rgb_to_od(&img, params.i0, params.beta).unwrap();
            let fit = factorize(od.values(), &SnmfParams { seed: trial, ..params }).unwrap();
            for k in 0..2 {
                worst_cos = worst_cos.min(cosine(column(&fit.w, k), column(&w_true, k)));
            }
            for trace in [&fit.objective_trace, &fit.refit_trace] {
                for pair in trace.windows(2) {
                    worst_rise = worst_rise.max(pair[1] - pair[0]);
                }
            }
            let model = StainModel {
                w: fit.w,
                p99: histoforge::stain::estimate_from_od(&od, &params).unwrap().p99,
                params,
            };
            let out = normalize_to_target(&img, &model, &params).unwrap();
            let d = img
                .as_bytes()
                .iter()
                .zip(out.as_bytes())
                .map(|(a, b)| a.abs_diff(*b))
                .max()
                .unwrap();
            worst_diff = worst_diff.max(d);
        }
        let secs = t.elapsed().as_secs_f64();
        let pass = worst_cos >= 0.99 && worst_rise <= 1e-9 && worst_diff <= 8 && secs < 120.0;
        (
            pass,
            format!(
                "50 images: worst column cosine {worst_cos:.5} (>= 0.99), largest objective rise {worst_rise:.2e} \
                 (<= 1e-9), worst self-normalization diff {worst_diff} (<= 8)"
            ),
        )
    });
}

type M = Vec<Vec<f64>>;

fn to_naive(m: &Matrix) -> M {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

fn mm(a: &M, b: &M) -> M {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &mut M, b: &[f32]) {
    for row in a.iter_mut() {
        for (x, y) in row.iter_mut().zip(b) {
            *x += *y as f64;
        }
    }
}

fn naive_attention(q: &M, k: &M, v: &M) -> M {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let scores: M = q
        .iter()
        .map(|qi| {
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - max).exp()).sum();
            s.iter().map(|x| (x - max).exp() / z).collect()
        })
        .collect();
    mm(&scores, v)
}

fn naive_mha(x: &M, b: &BlockWeights, heads: usize) -> M {
    let d = x[0].len();
    let dk = d / heads;
    let mut qkv = mm(x, &to_naive(&b.qkv_w));
    add_bias(&mut qkv, &b.qkv_b);
    let cols = |s: usize| -> M { qkv.iter().map(|r| r[s..s + dk].to_vec()).collect() };
    let mut concat: M = vec![Vec::new(); x.len()];
    for h in 0..heads {
        let o = naive_attention(&cols(h * dk), &cols(d + h * dk), &cols(2 * d + h * dk));
        for (c, r) in concat.iter_mut().zip(o) {
            c.extend(r);
        }
    }
    let mut y = mm(&concat, &to_naive(&b.out_w));
    add_bias(&mut y, &b.out_b);
    y
}

fn naive_ln(x: &M, g: &[f32], b: &[f32], eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] as f64 + b[i] as f64)
                .collect()
        })
        .collect()
}

fn naive_block(x: &M, b: &BlockWeights, cfg: &VitConfig) -> M {
    let eps = cfg.layernorm_eps as f64;
    let a = naive_mha(&naive_ln(x, &b.ln1_g, &b.ln1_b, eps), b, cfg.n_heads);
    let r: M = x
        .iter()
        .zip(&a)
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect())
        .collect();
    let mut h = mm(&naive_ln(&r, &b.ln2_g, &b.ln2_b, eps), &to_naive(&b.mlp1_w));
    add_bias(&mut h, &b.mlp1_b);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for v in h.iter_mut().flatten() {
        *v = 0.5 * *v * (1.0 + (c * (*v + 0.044715 * v.powi(3))).tanh());
    }
    let mut m = mm(&h, &to_naive(&b.mlp2_w));
    add_bias(&mut m, &b.mlp2_b);
    r.iter()
        .zip(&m)
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect())
        .collect()
}

fn max_diff(a: &Matrix, b: &M) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (r, c, *v)))
        .map(|(r, c, v)| (a.get(r, c) as f64 - v).abs())
        .fold(0.0, f64::max)
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
}

fn random_block(rng: &mut impl Rng, d: usize) -> BlockWeights {
    let mut v = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.gen_range(lo..=hi)).collect::<Vec<f32>>();
    let (ln1_g, ln1_b, qkv_b, out_b) = (v(d, 0.5, 1.5), v(d, -0.2, 0.2), v(3 * d, -0.2, 0.2), v(d, -0.2, 0.2));
    let (ln2_g, ln2_b, mlp1_b, mlp2_b) = (v(d, 0.5, 1.5), v(d, -0.2, 0.2), v(4 * d, -0.2, 0.2), v(d, -0.2, 0.2));
    let s = 1.0 / (d as f32).sqrt();
    BlockWeights {
        ln1_g,
        ln1_b,
        qkv_w: random_matrix(rng, d, 3 * d, s),
        qkv_b,
        out_w: random_matrix(rng, d, d, s),
        out_b,
        ln2_g,
        ln2_b,
        mlp1_w: random_matrix(rng, d, 4 * d, s),
        mlp1_b,
        mlp2_w: random_matrix(rng, 4 * d, d, 0.5 * s),
        mlp2_b,
    }
}

/// Moves whole 16x16 patches: output patch `i` holds input patch `perm[i]`.
fn permute_patches(img: &[f32], perm: &[usize]) -> Vec<f32> {
    let mut moved = vec![0.0f32; img.len()];
    for (i, &src) in perm.iter().enumerate() {
        let (dy, dx, sy, sx) = (i / 14 * 16, i % 14 * 16, src / 14 * 16, src % 14 * 16);
        for c in 0..3 {
            for y in 0..16 {
                let to = c * 224 * 224 + (dy + y) * 224 + dx;
                let from = c * 224 * 224 + (sy + y) * 224 + sx;
                moved[to..to + 16].copy_from_slice(&img[from..from + 16]);
            }
        }
    }
    moved
}

#[test]
fn criterion_4_encoder_numerics() {
    criterion(4, "attention and encoder numerics", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut row_err, mut mha_err, mut block_err, mut perm_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f32);
        let mut shapes_ok = true;
        for d in [8usize, 16, 32] {
            let heads = if d == 8 { 2 } else { 4 };
            let cfg = VitConfig::toy(d, 2, heads);
            let q = random_matrix(&mut rng, 197, d / heads, 2.0);
            let k = random_matrix(&mut rng, 197, d / heads, 2.0);
            let a = attention_weights(&q, &k);
            for r in 0..a.rows() {
                row_err = row_err.max((a.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
            }
            for _ in 0..2 {
                let block = random_block(&mut rng, d);
                let x = random_matrix(&mut rng, 50, d, 1.0);
                mha_err = mha_err.max(max_diff(
                    &multi_head_attention(&x, &block, heads),
                    &naive_mha(&to_naive(&x), &block, heads),
                ));
                block_err = block_err.max(max_diff(
                    &encoder_block(&x, &block, &cfg),
                    &naive_block(&to_naive(&x), &block, &cfg),
                ));
            }

            let w = VitWeights::random(cfg, d as u64).unwrap();
            let img: Vec<f32> = (0..3 * 224 * 224).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tokens = encode_tokens(&img, &w).unwrap();
            shapes_ok &= tokens.shape() == (197, d);

            let mut cfg_np = cfg;
            cfg_np.use_class_token = false;
            let mut w = VitWeights::random(cfg_np, 100 + d as u64).unwrap();
            w.pos = Matrix::zeros(196, d);
            let mut perm: Vec<usize> = (0..196).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let base = encode_tokens(&img, &w).unwrap();
            let moved = encode_tokens(&permute_patches(&img, &perm), &w).unwrap();
            shapes_ok &= base.shape() == (196, d);
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..d {
                    perm_err = perm_err.max((moved.get(i, j) - base.get(src, j)).abs());
                }
            }
        }
        let exact = |x: f64| 0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        let gelu_err = (-5000..=5000)
            .map(|i| i as f64 * 1e-3)
            .map(|x| (gelu(x as f32) as f64 - exact(x)).abs())
            .fold(0.0, f64::max);
        let pass = row_err <= 1e-5
            && shapes_ok
            && perm_err <= 1e-5
            && mha_err <= 1e-6
            && block_err <= 1e-6
            && gelu_err <= 1e-3;
        (
            pass,
            format!(
                "D in {{8,16,32}}, 2 blocks: row-sum error {row_err:.1e} (<= 1e-5), shapes kept {shapes_ok}, \
                 permutation error {perm_err:.1e} (<= 1e-5), MHA vs oracle {mha_err:.1e} (<= 1e-6), \
                 block vs oracle {block_err:.1e} (<= 1e-6), GELU vs erf {gelu_err:.1e} (<= 1e-3)"
            ),
        )
    });
}

fn hidden_pattern(xs: &[&[f64]], p: &HeadParams) -> Vec<bool> {
    if p.layers.len() == 1 {
        return Vec::new();
    }
    let l = &p.layers[0];
    xs.iter()
        .flat_map(|x| {
            (0..l.out_dim).map(move |j| (0..l.in_dim).map(|i| l.w[j * l.in_dim + i] * x[i]).sum::<f64>() + l.b[j] > 0.0)
        })
        .collect()
}

fn mean_loss(xs: &[&[f64]], ys: &[usize], p: &HeadParams) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| -softmax(&logits(x, p))[y].ln())
        .sum::<f64>()
        / xs.len() as f64
}

#[test]
fn criterion_5_gradient_correctness() {
    criterion(5, "head gradients vs central differences", || {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
        for inst in 0..200u64 {
            let in_dim = rng.gen_range(2..12);
            let k = rng.gen_range(2..6);
            let cfg = if inst % 2 == 0 {
                HeadConfig::one_layer(in_dim, k)
            } else {
                HeadConfig::two_layer(in_dim, rng.gen_range(2..10), k, 0.0)
            };
            let mut p = HeadParams::init(cfg, inst).unwrap();
            let n = rng.gen_range(1..8);
            let feats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..in_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let xs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let ys: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let analytic: Vec<f64> = gradients(&xs, &ys, &p).1.values().copied().collect();
            let base = hidden_pattern(&xs, &p);
            for (i, &a) in analytic.iter().enumerate() {
                let orig = *p.values().nth(i).unwrap();
                *p.values_mut().nth(i).unwrap() = orig + h;
                let (lp, pp) = (mean_loss(&xs, &ys, &p), hidden_pattern(&xs, &p));
                *p.values_mut().nth(i).unwrap() = orig - h;
                let (lm, pm) = (mean_loss(&xs, &ys, &p), hidden_pattern(&xs, &p));
                *p.values_mut().nth(i).unwrap() = orig;
                // a ReLU switching inside the stencil makes the difference meaningless
                if pp != base || pm != base {
                    skipped += 1;
                    continue;
                }
                let num = (lp - lm) / (2.0 * h);
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
                checked += 1;
            }
        }
        let secs = t.elapsed().as_secs_f64();
        let pass = worst <= 1e-4 && checked > 0 && secs < 60.0;
        (
            pass,
            format!(
                "100 one-layer + 100 two-layer heads, {checked} coordinates ({skipped} at ReLU kinks skipped): \
                 worst relative error {worst:.2e} (<= 1e-4)"
            ),
        )
    });
}

#[test]
fn criterion_6_metric_oracle() {
    criterion(6, "metric oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut worst, mut identity) = (0.0f64, 0.0f64);
        for _ in 0..1000 {
            let labels: Vec<usize> = (0..200).map(|_| (rng.gen::<f64>().powi(2) * 5.0) as usize).collect();
            let acc: f64 = rng.gen();
            let preds: Vec<usize> = labels
                .iter()
                .map(|&t| if rng.gen::<f64>() < acc { t } else { rng.gen_range(0..5) })
                .collect();
            let cm = confusion(&preds, &labels, 5).unwrap();
            let report = aggregate(&cm).unwrap();
            let mut weighted_recall = 0.0;
            for k in 0..5 {
                let count = |f: &dyn Fn(usize, usize) -> bool| {
                    preds.iter().zip(&labels).filter(|(&p, &t)| f(p, t)).count() as f64
                };
                let tp = count(&|p, t| p == k && t == k);
                let fp = count(&|p, t| p == k && t != k);
                let fn_ = count(&|p, t| p != k && t == k);
                let tn = count(&|p, t| p != k && t != k);
                let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
                let (pr, re) = (div(tp, tp + fp), div(tp, tp + fn_));
                let want = [
                    pr,
                    re,
                    div(2.0 * pr * re, pr + re),
                    div(tn, tn + fp),
                    div(fp, fp + tn),
                    div(fn_, fn_ + tp),
                    div(pr, (tp + fn_) / 200.0),
                ];
                let m = class_metrics(&cm, k);
                let got = [m.precision, m.recall, m.f1, m.specificity, m.fpr, m.fnr, m.lift];
                for (g, w) in got.iter().zip(want) {
                    worst = worst.max((g - w).abs());
                }
                if m.flags.is_empty() {
                    let prevalence = (tp + fn_) / 200.0;
                    identity = identity
                        .max((m.fpr - (1.0 - m.specificity)).abs())
                        .max((m.fnr - (1.0 - m.recall)).abs())
                        .max((m.lift * prevalence - m.precision).abs());
                }
                weighted_recall += (tp + fn_) / 200.0 * re;
            }
            worst = worst.max((report.weighted.recall - weighted_recall).abs());
            identity = identity.max((report.weighted.recall - report.accuracy).abs());
        }
        let f1 = f1_score(0.75, 0.64).unwrap();
        let spot = (f1 * 100.0).round() / 100.0;
        let lift = class_metrics(&ConfusionMatrix::from_counts(vec![vec![3, 1], vec![1, 5]]).unwrap(), 0).lift;
        let pass = worst <= 1e-12 && identity <= 1e-9 && spot == 0.69 && (lift - 1.875).abs() < 1e-12;
        (
            pass,
            format!(
                "1000 instances, K=5, 200 samples: worst oracle difference {worst:.1e} (<= 1e-12), worst identity \
                 residual {identity:.1e}, f1(0.75, 0.64) = {f1:.4} -> {spot}, lift(TP3 FP1 FN1 TN5) = {lift}"
            ),
        )
    });
}

fn sha_of(path: &Path) -> String {
    sha256_hex(&std::fs::read(path).unwrap())
}

fn histoforge(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_histoforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn criterion_7_end_to_end() {
    criterion(7, "end-to-end smoke run", || {
        let t = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let fx = dir.path().join("fixture");
        let fx_s = fx.to_str().unwrap();
        let made = histoforge(&[
            "make-fixture",
            "--out",
            fx_s,
            "--per-class",
            "8",
            "--size",
            "224",
            "--seed",
            "0",
        ]);
        assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));
        let config = fx.join("config.json");
        let out = fx.join("out");

        let first = histoforge(&["run", "--config", config.to_str().unwrap()]);
        assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
        let sha_a = sha_of(&out.join("report.json"));
        let record: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
        let stages: Vec<&str> = record["stages"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["stage"].as_str().unwrap())
            .collect();

        let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
        let losses: Vec<f64> = history
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let (l1, l20) = (losses[0], losses[losses.len() - 1]);

        let second = histoforge(&["run", "--config", config.to_str().unwrap()]);
        assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
        let sha_b = sha_of(&out.join("report.json"));

        let (tx, ty) = separable_blobs(70, 40, 8);
        let (vx, vy) = separable_blobs(71, 40, 8);
        let tc = TrainConfig {
            batch_size: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut sep = Vec::new();
        for cfg in [HeadConfig::one_layer(8, 5), HeadConfig::two_layer(8, 256, 5, 0.5)] {
            sep.push(
                head::train(&tx, &ty, &vx, &vy, &cfg, &tc)
                    .unwrap()
                    .history
                    .last()
                    .unwrap()
                    .val_acc,
            );
        }
        let secs = t.elapsed().as_secs_f64();
        let all_stages = stages
            == [
                "ingest",
                "split",
                "normalize",
                "augment",
                "features",
                "train",
                "evaluate",
            ];
        let pass = all_stages
            && losses.len() == 20
            && l20 < l1
            && sep.iter().all(|&a| a >= 0.95)
            && sha_a == sha_b
            && secs < 600.0;
        (
            pass,
            format!(
                "stages {stages:?}, train loss epoch 1 {l1:.4} -> epoch 20 {l20:.4}, separable-blob val acc \
                 {sep:?} (>= 0.95), report.json sha256 {}.. twice identical: {}",
                &sha_a[..16],
                sha_a == sha_b
            ),
        )
    });
}

#[test]
fn criterion_8_container_round_trip() {
    criterion(8, "weight container round trip", || {
        let dir = tempfile::tempdir().unwrap();
        let w = VitWeights::random(VitConfig::toy(16, 2, 4), 8).unwrap();
        let path = dir.path().join("vit.hfwt");
        w.save(&path).unwrap();
        let back = load_weights(&path, None).unwrap().to_container();
        let orig = w.to_container();
        let exact = orig.tensors.len() == back.tensors.len()
            && orig.tensors.iter().all(|(name, t)| {
                back.tensors.get(name).is_some_and(|u| {
                    t.shape == u.shape && t.data.iter().zip(&u.data).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            });

        let mut negatives = Vec::new();
        let mut c = w.to_container();
        c.tensors.remove("block.1.mlp1.w");
        let e = VitWeights::from_container(c, w.config).unwrap_err().to_string();
        negatives.push(("missing", e.contains("block.1.mlp1.w"), e));

        let mut c = w.to_container();
        c.insert("block.0.qkv.w", Tensor::zeros(vec![16, 47]));
        let e = VitWeights::from_container(c, w.config).unwrap_err().to_string();
        negatives.push(("shape", e.contains("block.0.qkv.w"), e));

        let mut c = w.to_container();
        c.tensors.get_mut("pos").unwrap().data[5] = f32::NAN;
        let nan_path = dir.path().join("nan.hfwt");
        c.save(&nan_path).unwrap();
        let e = load_weights(&nan_path, None).unwrap_err().to_string();
        negatives.push(("NaN", e.contains("pos"), e));

        let pass = exact && negatives.iter().all(|n| n.1);
        let detail = negatives
            .iter()
            .map(|(k, ok, e)| format!("{k}: {} ({e})", if *ok { "named" } else { "NOT named" }));
        (
            pass,
            format!(
                "{} tensors bit-exact: {exact}; {}",
                orig.tensors.len(),
                detail.collect::<Vec<_>>().join("; ")
            ),
        )
    });
}
