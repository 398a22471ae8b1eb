//! Synthetic data: stain-mixed rasters, a BreakHis-shaped fixture tree, and
//! randomly initialised encoder weights. Used by tests, the acceptance suite
//! and the `make-fixture` command.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::ClassLabel;
use crate::image::{to_u8, ImageTensor};
use crate::stain::{cosine, StainMatrix};

/// Typical H&E optical-density directions, unit columns (hematoxylin, eosin).
pub const HE_REFERENCE: StainMatrix = [
    [0.651_107_83, 0.070_101_72],
    [0.701_193_04, 0.991_438_63],
    [0.290_494_26, 0.110_159_85],
];

/// Draws a non-negative unit-column stain matrix with column cosine at most
/// `max_cosine`, hematoxylin-first (larger blue component in column 0), the
/// blue components differing by at least `min_blue_gap`.
pub fn random_stain_matrix(rng: &mut impl Rng, max_cosine: f64, min_blue_gap: f64) -> StainMatrix {
    loop {
        let mut cols = [[0.0f64; 3]; 2];
        for c in cols.iter_mut() {
            for x in c.iter_mut() {
                *x = rng.gen_range(0.02..1.0);
            }
            let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            for x in c.iter_mut() {
                *x /= n;
            }
        }
        if cosine(cols[0], cols[1]) > max_cosine || (cols[0][2] - cols[1][2]).abs() < min_blue_gap {
            continue;
        }
        if cols[1][2] > cols[0][2] {
            cols.swap(0, 1);
        }
        return std::array::from_fn(|c| [cols[0][c], cols[1][c]]);
    }
}

/// `I = i0 exp(-W h)` per pixel, rounded to 8 bits.
pub fn render(w: &StainMatrix, h: &[[f64; 2]], width: u32, height: u32, i0: f64) -> ImageTensor {
    assert_eq!(h.len(), width as usize * height as usize);
    let mut data = Vec::with_capacity(h.len() * 3);
    for hp in h {
        for c in 0..3 {
            let od = w[c][0] * hp[0] + w[c][1] * hp[1];
            data.push(to_u8((i0 * (-od).exp()) as f32));
        }
    }
    ImageTensor::new(width, height, data).expect("size matches")
}

/// Dense concentrations, each row uniform on `[0, max]`.
pub fn dense_concentrations(rng: &mut impl Rng, n: usize, max: [f64; 2]) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.gen_range(0.0..=max[0]), rng.gen_range(0.0..=max[1])])
        .collect()
}

/// Tissue-like concentrations: eosin-rich stroma with hematoxylin-dense round
/// nuclei whose centres are nearly pure hematoxylin. `nuclei`, `radius` and the intensities shape the texture.
pub fn tissue_concentrations(
    rng: &mut impl Rng,
    width: u32,
    height: u32,
    nuclei: usize,
    radius: f64,
    stroma: f64,
) -> Vec<[f64; 2]> {
    let centres: Vec<(f64, f64, f64)> = (0..nuclei)
        .map(|_| {
            (
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                radius * rng.gen_range(0.6..1.4),
            )
        })
        .collect();
    let mut h = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            let mut hema: f64 = rng.gen_range(0.0..0.15);
            // eosin fades towards nucleus centres
            let mut fade: f64 = 1.0;
            for &(cx, cy, r) in &centres {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 < r * r {
                    hema = hema.max(0.6 + 0.5 * (1.0 - d2 / (r * r)));
                    fade = fade.min(d2 / (r * r));
                }
            }
            let eosin = stroma * rng.gen_range(0.2..1.0) * fade;
            h.push([hema, eosin]);
        }
    }
    h
}

/// Writes `per_class` synthetic tissue images of `size`x`size` per class into a
/// BreakHis-style tree under `root` at 40x. Classes differ in nucleus density,
/// nucleus size and stroma intensity; every image uses a slightly perturbed
/// stain matrix so normalization has something to do.
pub fn write_fixture(root: &Path, per_class: usize, size: u32, seed: u64) -> std::io::Result<()> {
    for class in ClassLabel::ALL {
        let (group, sub, code) = match class {
            ClassLabel::Benign => ("benign", "adenosis", "B_A"),
            ClassLabel::DuctalCarcinoma => ("malignant", "ductal_carcinoma", "M_DC"),
            ClassLabel::LobularCarcinoma => ("malignant", "lobular_carcinoma", "M_LC"),
            ClassLabel::MucinousCarcinoma => ("malignant", "mucinous_carcinoma", "M_MC"),
            ClassLabel::PapillaryCarcinoma => ("malignant", "papillary_carcinoma", "M_PC"),
        };
        let slide = format!("SOB_{code}_14-{:05}", 10000 + class.index());
        let dir = root
            .join("breast")
            .join(group)
            .join("SOB")
            .join(sub)
            .join(&slide)
            .join("40X");
        std::fs::create_dir_all(&dir)?;
        let k = class.index() as f64;
        for i in 0..per_class {
            let mut rng = crate::rng::stream(seed, "fixture", &[class.name().into(), i.into()]);
            let mut w = HE_REFERENCE;
            for row in w.iter_mut() {
                for x in row.iter_mut() {
                    *x = (*x + rng.gen_range(-0.05..0.05)).max(0.01);
                }
            }
            for c in 0..2 {
                let n = (w[0][c].powi(2) + w[1][c].powi(2) + w[2][c].powi(2)).sqrt();
                for row in w.iter_mut() {
                    row[c] /= n;
                }
            }
            let nuclei = 6 + 8 * class.index();
            let radius = 14.0 - 2.0 * k;
            let stroma = 0.35 + 0.12 * k;
            let h = tissue_concentrations(&mut rng, size, size, nuclei, radius, stroma);
            let img = render(&w, &h, size, size, 255.0);
            let name = format!("SOB_{}-14-{:05}-40-{:03}.png", code, 10000 + class.index(), i + 1);
            img.save_png(&dir.join(name))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
        }
    }
    Ok(())
}

/// A uniformly random RGB raster.
pub fn noise_image(rng: &mut impl Rng, width: u32, height: u32) -> ImageTensor {
    let data = (0..width as usize * height as usize * 3).map(|_| rng.gen()).collect();
    ImageTensor::new(width, height, data).expect("size matches")
}

/// Five well-separated Gaussian blobs, `per_class` vectors each, labelled
/// `0..5`; the standard linearly separable check for heads.
pub fn separable_blobs(seed: u64, per_class: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = crate::rng::stream(seed, "blobs", &[]);
    let mut xs = Vec::with_capacity(5 * per_class);
    let mut ys = Vec::with_capacity(5 * per_class);
    for k in 0..5 {
        for _ in 0..per_class {
            xs.push(
                (0..dim)
                    .map(|i| if i == k % dim { 4.0 } else { 0.0 } + 0.5 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            ys.push(k);
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn reference_columns_are_unit() {
        for k in 0..2 {
            let n: f64 = (0..3).map(|c| HE_REFERENCE[c][k].powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(HE_REFERENCE[2][0] > HE_REFERENCE[2][1]);
    }

    #[test]
    fn random_matrices_respect_constraints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let w = random_stain_matrix(&mut rng, 0.9, 0.05);
            let a = [w[0][0], w[1][0], w[2][0]];
            let b = [w[0][1], w[1][1], w[2][1]];
            assert!(cosine(a, b) <= 0.9);
            assert!(a[2] >= b[2] + 0.05);
        }
    }
}
