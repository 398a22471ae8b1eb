#![allow(clippy::needless_range_loop)]

//! Stain estimation and normalization against forward-generated images.
//!
//! Every synthetic image is produced as `I = 255 exp(-W* H*)` from a known
//! stain matrix, so recovery can be checked column by column.

use histoforge::image::ImageTensor;
use histoforge::stain::{
    column, cosine, estimate_stain_model, factorize, normalize_to_target, od_to_rgb, percentile, rgb_to_od,
    solve_concentrations, ODMatrix, SnmfParams, StainMatrix, StainModel,
};
use histoforge::synthetic::{dense_concentrations, random_stain_matrix, render, tissue_concentrations, HE_REFERENCE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIZE: u32 = 64;

fn synthetic(w: &StainMatrix, seed: u64) -> (ImageTensor, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = dense_concentrations(&mut rng, (SIZE * SIZE) as usize, [1.0, 1.0]);
    (render(w, &h, SIZE, SIZE, 255.0), h)
}

fn max_channel_diff(a: &ImageTensor, b: &ImageTensor) -> u8 {
    a.as_bytes()
        .iter()
        .zip(b.as_bytes())
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap_or(0)
}

#[test]
fn recovers_random_stain_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let w_true = random_stain_matrix(&mut rng, 0.9, 0.05);
        let (img, _) = synthetic(&w_true, 100 + trial);
        let model = estimate_stain_model(&img, &SnmfParams::default()).unwrap();
        for k in 0..2 {
            let c = cosine(model.column(k), column(&w_true, k));
            assert!(c >= 0.99, "trial {trial} column {k}: cosine {c:.5}");
        }
    }
}

#[test]
fn columns_are_unit_and_nonnegative() {
    let (img, _) = synthetic(&HE_REFERENCE, 3);
    let model = estimate_stain_model(&img, &SnmfParams::default()).unwrap();
    for k in 0..2 {
        let col = model.column(k);
        let n = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
        assert!((n - 1.0).abs() <= 1e-9, "norm {n}");
        assert!(col.iter().all(|&x| x >= 0.0));
    }
    assert!(model.p99.iter().all(|&p| p > 0.0));
    // hematoxylin first
    assert!(model.w[2][0] >= model.w[2][1]);
}

#[test]
fn objective_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        let w_true = random_stain_matrix(&mut rng, 0.9, 0.05);
        let (img, _) = synthetic(&w_true, 200 + trial);
        let od = rgb_to_od(&img, 255.0, 0.15).unwrap();
        let params = SnmfParams {
            rel_tol: 0.0,
            seed: trial,
            ..SnmfParams::default()
        };
        let fit = factorize(od.values(), &params).unwrap();
        assert!(fit.objective_trace.len() > 1);
        assert!(fit.refit_trace.len() > 1);
        for trace in [&fit.objective_trace, &fit.refit_trace] {
            for pair in trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "objective rose {} -> {}", pair[0], pair[1]);
            }
        }
    }
}

#[test]
fn single_stain_image_aligns_one_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w_true = HE_REFERENCE;
    let h: Vec<[f64; 2]> = (0..SIZE * SIZE)
        .map(|_| [rand::Rng::gen_range(&mut rng, 0.0..1.2), 0.0])
        .collect();
    let img = render(&w_true, &h, SIZE, SIZE, 255.0);
    let model = estimate_stain_model(&img, &SnmfParams::default()).unwrap();
    let best = (0..2)
        .map(|k| cosine(model.column(k), column(&w_true, 0)))
        .fold(f64::MIN, f64::max);
    assert!(best >= 0.99, "best cosine {best}");
}

#[test]
fn reconstruction_error_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..5 {
        let w_true = random_stain_matrix(&mut rng, 0.9, 0.05);
        let (img, _) = synthetic(&w_true, 300 + trial);
        let od = rgb_to_od(&img, 255.0, 0.15).unwrap();
        let fit = factorize(od.values(), &SnmfParams::default()).unwrap();
        let mut res = 0.0;
        let mut tot = 0.0;
        for (v, h) in od.values().iter().zip(&fit.h) {
            for c in 0..3 {
                let r = v[c] - fit.w[c][0] * h[0] - fit.w[c][1] * h[1];
                res += r * r;
                tot += v[c] * v[c];
            }
        }
        let rel = (res / tot).sqrt();
        assert!(rel <= 0.05, "trial {trial}: relative residual {rel:.4}");
    }
}

#[test]
fn self_normalization_reproduces_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..5 {
        let w_true = random_stain_matrix(&mut rng, 0.9, 0.05);
        let (img, _) = synthetic(&w_true, 400 + trial);
        let params = SnmfParams::default();
        let model = estimate_stain_model(&img, &params).unwrap();
        let out = normalize_to_target(&img, &model, &params).unwrap();
        let d = max_channel_diff(&img, &out);
        assert!(d <= 8, "trial {trial}: max channel difference {d}");
    }
}

/// Normalizes `img` with its known stain matrix instead of an estimate.
fn oracle_normalize(img: &ImageTensor, w: &StainMatrix, target: &StainModel) -> ImageTensor {
    let od = rgb_to_od(img, 255.0, 0.15).unwrap();
    let h = solve_concentrations(&od, w, 0.0).unwrap();
    let p99: [f64; 2] = std::array::from_fn(|k| {
        let mut row: Vec<f64> = h.iter().map(|x| x[k]).collect();
        percentile(&mut row, 0.99)
    });
    let v = h
        .iter()
        .map(|x| {
            let a = x[0] * target.p99[0] / p99[0];
            let b = x[1] * target.p99[1] / p99[1];
            std::array::from_fn(|c| target.w[c][0] * a + target.w[c][1] * b)
        })
        .collect();
    od_to_rgb(
        &ODMatrix::from_parts(img.width(), img.height(), v, od.mask().to_vec()).unwrap(),
        255.0,
    )
}

#[test]
fn sources_sharing_concentrations_converge() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let params = SnmfParams::default();
    let (target_img, _) = synthetic(&HE_REFERENCE, 7);
    let target = estimate_stain_model(&target_img, &params).unwrap();
    for trial in 0..5 {
        // Background is decided per source and passed through, so every pixel
        // must be foreground under any unit basis: max-channel OD is at least
        // (h_e + h_h) / 3.
        let h: Vec<[f64; 2]> = tissue_concentrations(&mut rng, SIZE, SIZE, 12, 7.0, 0.6)
            .into_iter()
            .map(|[he, eo]| if he >= 0.6 { [he, eo] } else { [he, eo.max(0.45)] })
            .collect();
        let wa = random_stain_matrix(&mut rng, 0.9, 0.05);
        let wb = random_stain_matrix(&mut rng, 0.9, 0.05);
        let a = render(&wa, &h, SIZE, SIZE, 255.0);
        let b = render(&wb, &h, SIZE, SIZE, 255.0);
        assert_eq!(rgb_to_od(&a, 255.0, 0.15).unwrap().foreground(), h.len());
        assert_eq!(rgb_to_od(&b, 255.0, 0.15).unwrap().foreground(), h.len());

        // Both sources are 8-bit quantized, so even the known matrices leave a
        // floor of 2 to 3 levels between the outputs.
        let floor = max_channel_diff(&oracle_normalize(&a, &wa, &target), &oracle_normalize(&b, &wb, &target));
        assert!(floor <= 3, "trial {trial}: oracle floor {floor}");
        let na = normalize_to_target(&a, &target, &params).unwrap();
        let nb = normalize_to_target(&b, &target, &params).unwrap();
        let d = max_channel_diff(&na, &nb);
        assert!(
            d <= 3,
            "trial {trial}: normalized sources differ by {d} (oracle {floor})"
        );
    }
}

#[test]
fn normalized_output_carries_target_stains() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let params = SnmfParams::default();
    let (target_img, _) = synthetic(&HE_REFERENCE, 9);
    let target = estimate_stain_model(&target_img, &params).unwrap();
    for trial in 0..3 {
        let w_src = random_stain_matrix(&mut rng, 0.9, 0.05);
        let (src, _) = synthetic(&w_src, 500 + trial);
        let out = normalize_to_target(&src, &target, &params).unwrap();
        let m = estimate_stain_model(&out, &params).unwrap();
        for k in 0..2 {
            let c = cosine(m.column(k), target.column(k));
            assert!(c >= 0.98, "trial {trial} column {k}: cosine {c:.4}");
        }
    }
}

#[test]
fn normalization_keeps_dimensions_and_background() {
    let (mut img, _) = synthetic(&HE_REFERENCE, 12);
    for x in 0..SIZE {
        img.set_pixel(x, 0, [255, 255, 255]);
        img.set_pixel(x, 1, [250, 251, 249]);
    }
    let params = SnmfParams::default();
    let target = estimate_stain_model(&synthetic(&HE_REFERENCE, 13).0, &params).unwrap();
    let out = normalize_to_target(&img, &target, &params).unwrap();
    assert_eq!((out.width(), out.height()), (img.width(), img.height()));
    for x in 0..SIZE {
        assert_eq!(out.pixel(x, 0), [255, 255, 255]);
        assert_eq!(out.pixel(x, 1), [250, 251, 249]);
    }
}

#[test]
fn concentrations_follow_known_matrix() {
    let (img, h_true) = synthetic(&HE_REFERENCE, 14);
    let od = rgb_to_od(&img, 255.0, 0.0).unwrap();
    let h = solve_concentrations(&od, &HE_REFERENCE, 0.0).unwrap();
    // 8-bit quantisation bounds the error.
    let worst = h
        .iter()
        .zip(&h_true)
        .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 0.1, "worst concentration error {worst}");
}

proptest! {
    #[test]
    fn od_round_trip_within_one(
        w in 1u32..12, h in 1u32..12, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..w * h * 3).map(|_| rand::Rng::gen_range(&mut rng, 1..=255u8)).collect();
        let img = ImageTensor::new(w, h, data).unwrap();
        let od = rgb_to_od(&img, 255.0, 0.0).unwrap();
        prop_assert_eq!(od.foreground(), (w * h) as usize);
        let back = od_to_rgb(&od, 255.0);
        prop_assert!(max_channel_diff(&img, &back) <= 1);
    }
}
