//! Structure-preserving stain normalization.
//!
//! Images are mapped to optical density `V = ln(I0 / I)`, where Beer-Lambert
//! mixing makes `V = W H` with a 3x2 stain color matrix `W` (hematoxylin,
//! eosin) and a 2xP concentration matrix `H`. `W` and `H` are estimated by
//! sparse non-negative factorization
//!
//! ```text
//! min ||V - W H||_F^2 + lambda ||H||_1   s.t.  W >= 0, H >= 0, ||w_k||_2 = 1
//! ```
//!
//! solved by alternating exact block updates: every pixel's concentrations are
//! solved in closed form for fixed `W`, then each unit-norm column of `W` is
//! solved in closed form for fixed `H` and the other column. Each block update
//! is a global minimizer of its subproblem, so the objective never increases.
//!
//! The l1 term shrinks concentrations and tilts `W` towards the data mean. After
//! the sparse fit the same updates are run with `lambda = 0`, starting from the
//! sparse solution, so the basis and the concentrations used for rendering are
//! unbiased. The sparse phase still picks the basin.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{to_u8, ImageTensor};
use crate::rng;

/// Number of stains. The factorization is specialised to H&E.
pub const N_STAINS: usize = 2;

const MIN_FOREGROUND: usize = 100;
const PARALLEL_COSINE: f64 = 0.999;
const MIN_PERCENTILE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("illumination intensity must be positive, got {0}")]
    BadIntensity(f64),
    #[error("invalid SNMF parameters: {0}")]
    BadParams(String),
    #[error("only {found} foreground pixels; stain estimation needs at least {needed}")]
    TooFewPixels { found: usize, needed: usize },
    #[error("SNMF objective became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("stain matrix columns are nearly parallel (cosine {0:.6})")]
    RankDeficient(f64),
    #[error("optical density matrix and concentrations disagree in size ({od} vs {h})")]
    SizeMismatch { od: usize, h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnmfParams {
    /// Illumination intensity `I0`.
    pub i0: f64,
    /// Pixels whose largest channel OD is below `beta` are background.
    pub beta: f64,
    /// l1 weight on the concentrations during estimation.
    pub lambda_sparse: f64,
    pub max_iters: usize,
    /// Stop once the relative objective decrease drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    /// Independent seeded initialisations; the lowest final objective wins.
    pub restarts: usize,
    /// Iterations of unpenalized refinement started from the sparse solution,
    /// removing the l1 shrinkage from `W` and `H`. Zero disables it.
    pub refit_iters: usize,
}

impl Default for SnmfParams {
    fn default() -> Self {
        Self {
            i0: 255.0,
            beta: 0.15,
            lambda_sparse: 0.1,
            max_iters: 200,
            rel_tol: 1e-4,
            seed: 0,
            restarts: 4,
            refit_iters: 200,
        }
    }
}

impl SnmfParams {
    pub fn validate(&self) -> Result<(), StainError> {
        if !(self.i0 > 0.0) || !self.i0.is_finite() {
            return Err(StainError::BadIntensity(self.i0));
        }
        if !(self.beta >= 0.0) {
            return Err(StainError::BadParams(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lambda_sparse >= 0.0) {
            return Err(StainError::BadParams(format!(
                "lambda must be >= 0, got {}",
                self.lambda_sparse
            )));
        }
        if self.max_iters == 0 {
            return Err(StainError::BadParams("max_iters must be >= 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(StainError::BadParams("rel_tol must be >= 0".into()));
        }
        if self.restarts == 0 {
            return Err(StainError::BadParams("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// A 3x2 stain color matrix, `w[channel][stain]`.
pub type StainMatrix = [[f64; N_STAINS]; 3];

pub fn column(w: &StainMatrix, k: usize) -> [f64; 3] {
    [w[0][k], w[1][k], w[2][k]]
}

fn set_column(w: &mut StainMatrix, k: usize, c: [f64; 3]) {
    for (row, v) in w.iter_mut().zip(c) {
        row[k] = v;
    }
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = norm3(a) * norm3(b);
    if d == 0.0 {
        0.0
    } else {
        dot3(a, b) / d
    }
}

/// Optical density of one channel value; zero intensities are lifted to 1 and
/// the result is clamped at 0.
pub fn optical_density(intensity: f64, i0: f64) -> f64 {
    (i0 / intensity.max(1.0)).ln().max(0.0)
}

/// Channel intensity for an optical density, clamped to `[0, i0]`.
pub fn intensity(od: f64, i0: f64) -> f64 {
    (i0 * (-od).exp()).clamp(0.0, i0)
}

/// Optical densities of the foreground pixels of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ODMatrix {
    width: u32,
    height: u32,
    /// One column of the 3xP matrix per foreground pixel, raster order.
    values: Vec<[f64; 3]>,
    /// Foreground flag per raster pixel.
    mask: Vec<bool>,
}

impl ODMatrix {
    pub fn from_parts(width: u32, height: u32, values: Vec<[f64; 3]>, mask: Vec<bool>) -> Option<Self> {
        let fg = mask.iter().filter(|&&m| m).count();
        let ok = mask.len() == width as usize * height as usize
            && fg == values.len()
            && values.iter().flatten().all(|v| *v >= 0.0 && v.is_finite());
        ok.then_some(Self {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn foreground(&self) -> usize {
        self.values.len()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Same mask, new pixel values.
    fn with_values(&self, values: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            width: self.width,
            height: self.height,
            values,
            mask: self.mask.clone(),
        }
    }
}

pub fn rgb_to_od(image: &ImageTensor, i0: f64, beta: f64) -> Result<ODMatrix, StainError> {
    if !(i0 > 0.0) || !i0.is_finite() {
        return Err(StainError::BadIntensity(i0));
    }
    let mut values = Vec::new();
    let mut mask = Vec::with_capacity(image.pixel_count());
    for px in image.pixels() {
        let od = px.map(|c| optical_density(c as f64, i0));
        let fg = od[0].max(od[1]).max(od[2]) >= beta;
        mask.push(fg);
        if fg {
            values.push(od);
        }
    }
    Ok(ODMatrix {
        width: image.width(),
        height: image.height(),
        values,
        mask,
    })
}

/// Renders optical densities back to RGB; background pixels become `i0` white.
pub fn od_to_rgb(od: &ODMatrix, i0: f64) -> ImageTensor {
    let white = to_u8(i0 as f32);
    let mut data = Vec::with_capacity(od.mask.len() * 3);
    let mut fg = od.values.iter();
    for &m in &od.mask {
        if m {
            let v = fg.next().expect("mask count equals foreground count");
            data.extend(v.iter().map(|&x| to_u8(intensity(x, i0) as f32)));
        } else {
            data.extend_from_slice(&[white; 3]);
        }
    }
    ImageTensor::new(od.width, od.height, data).expect("size follows mask")
}

/// `||V - W H||_F^2 + lambda ||H||_1`.
pub fn objective(v: &[[f64; 3]], w: &StainMatrix, h: &[[f64; N_STAINS]], lambda: f64) -> f64 {
    let mut fit = 0.0;
    let mut l1 = 0.0;
    for (vp, hp) in v.iter().zip(h) {
        for c in 0..3 {
            let r = vp[c] - (w[c][0] * hp[0] + w[c][1] * hp[1]);
            fit += r * r;
        }
        l1 += hp[0] + hp[1];
    }
    fit + lambda * l1
}

/// Gram matrix entries of `W`.
struct Gram {
    g00: f64,
    g01: f64,
    g11: f64,
}

impl Gram {
    fn of(w: &StainMatrix) -> Self {
        let a = column(w, 0);
        let b = column(w, 1);
        Self {
            g00: dot3(a, a),
            g01: dot3(a, b),
            g11: dot3(b, b),
        }
    }
}

/// Exact minimizer of `||v - W h||^2 + lambda (h0 + h1)` over `h >= 0`.
fn solve_pixel(w: &StainMatrix, gram: &Gram, v: [f64; 3], lambda: f64) -> [f64; 2] {
    let b0 = w[0][0] * v[0] + w[1][0] * v[1] + w[2][0] * v[2];
    let b1 = w[0][1] * v[0] + w[1][1] * v[1] + w[2][1] * v[2];
    let r0 = b0 - 0.5 * lambda;
    let r1 = b1 - 0.5 * lambda;
    // f(h) - ||v||^2
    let f = |h: [f64; 2]| {
        gram.g00 * h[0] * h[0] + 2.0 * gram.g01 * h[0] * h[1] + gram.g11 * h[1] * h[1] - 2.0 * (r0 * h[0] + r1 * h[1])
    };

    let det = gram.g00 * gram.g11 - gram.g01 * gram.g01;
    if det > 1e-12 {
        let h0 = (gram.g11 * r0 - gram.g01 * r1) / det;
        let h1 = (gram.g00 * r1 - gram.g01 * r0) / det;
        if h0 >= 0.0 && h1 >= 0.0 {
            return [h0, h1];
        }
    }
    let mut best = [0.0, 0.0];
    let mut best_f = 0.0;
    if gram.g00 > 0.0 {
        let c = [(r0 / gram.g00).max(0.0), 0.0];
        let fc = f(c);
        if fc < best_f {
            best = c;
            best_f = fc;
        }
    }
    if gram.g11 > 0.0 {
        let c = [0.0, (r1 / gram.g11).max(0.0)];
        if f(c) < best_f {
            best = c;
        }
    }
    best
}

fn check_rank(w: &StainMatrix) -> Result<(), StainError> {
    let c = cosine(column(w, 0), column(w, 1));
    if c > PARALLEL_COSINE {
        return Err(StainError::RankDeficient(c));
    }
    Ok(())
}

/// Non-negative, l1-penalised concentrations for a fixed stain matrix.
pub fn solve_concentrations(od: &ODMatrix, w: &StainMatrix, lambda: f64) -> Result<Vec<[f64; N_STAINS]>, StainError> {
    check_rank(w)?;
    let gram = Gram::of(w);
    Ok(od.values.iter().map(|&v| solve_pixel(w, &gram, v, lambda)).collect())
}

/// Updates column `k` of `W` to the exact minimizer over non-negative unit
/// vectors, holding `H` and the other column fixed.
fn update_column(v: &[[f64; 3]], w: &mut StainMatrix, h: &[[f64; N_STAINS]], k: usize) {
    let j = 1 - k;
    let wj = column(w, j);
    let mut g = [0.0; 3];
    let mut cross = 0.0;
    for (vp, hp) in v.iter().zip(h) {
        for c in 0..3 {
            g[c] += vp[c] * hp[k];
        }
        cross += hp[j] * hp[k];
    }
    for c in 0..3 {
        g[c] -= wj[c] * cross;
    }
    // Objective in w_k is const - 2 w_k.g, maximise w_k.g on the unit sphere
    // restricted to the non-negative orthant.
    let pos = g.map(|x| x.max(0.0));
    let n = norm3(pos);
    if n > 0.0 {
        set_column(w, k, pos.map(|x| x / n));
    } else if g.iter().any(|&x| x != 0.0) {
        let best = (0..3).max_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap_or(0);
        let mut e = [0.0; 3];
        e[best] = 1.0;
        set_column(w, k, e);
    }
}

/// Alternating exact block updates until `max_iters` or the relative
/// objective decrease drops below `rel_tol`. Returns the objective trace.
fn descend(
    v: &[[f64; 3]],
    w: &mut StainMatrix,
    h: &mut [[f64; N_STAINS]],
    lambda: f64,
    max_iters: usize,
    rel_tol: f64,
) -> Result<(Vec<f64>, usize), StainError> {
    let mut trace = vec![objective(v, w, h, lambda)];
    if !trace[0].is_finite() {
        return Err(StainError::NonFinite(0));
    }
    let mut iterations = 0;
    for it in 1..=max_iters {
        let gram = Gram::of(w);
        for (hp, &vp) in h.iter_mut().zip(v) {
            *hp = solve_pixel(w, &gram, vp, lambda);
        }
        for k in 0..N_STAINS {
            update_column(v, w, h, k);
        }
        let obj = objective(v, w, h, lambda);
        if !obj.is_finite() {
            return Err(StainError::NonFinite(it));
        }
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(obj);
        iterations = it;
        if obj == 0.0 || prev - obj < rel_tol * prev {
            break;
        }
    }
    Ok((trace, iterations))
}

/// Result of a factorization run.
#[derive(Debug, Clone)]
pub struct SnmfFit {
    pub w: StainMatrix,
    /// Concentrations after the final phase (unpenalized when refit ran).
    pub h: Vec<[f64; N_STAINS]>,
    /// Penalized objective of the winning restart, before the first update
    /// and after every iteration.
    pub objective_trace: Vec<f64>,
    /// Unpenalized objective during the refit, same layout. Empty when
    /// `refit_iters` is zero.
    pub refit_trace: Vec<f64>,
    pub iterations: usize,
}

fn initial_factors(n: usize, seed: u64, restart: usize) -> (StainMatrix, Vec<[f64; N_STAINS]>) {
    let mut stream = rng::stream(seed, "snmf", &[restart.into()]);
    // uniform on (0, 1]
    let mut draw = || 1.0 - stream.gen::<f64>();
    let mut w: StainMatrix = [[0.0; N_STAINS]; 3];
    for k in 0..N_STAINS {
        let c = [draw(), draw(), draw()];
        let n = norm3(c);
        set_column(&mut w, k, c.map(|x| x / n));
    }
    let h = (0..n).map(|_| [draw(), draw()]).collect();
    (w, h)
}

/// Sparse NMF of the foreground optical densities, hematoxylin first.
///
/// Alternating minimization only finds a local optimum; when the two stains
/// are far apart some initialisations settle on a poor one, so several seeded
/// starts are run and the lowest penalized objective is kept.
pub fn factorize(v: &[[f64; 3]], params: &SnmfParams) -> Result<SnmfFit, StainError> {
    params.validate()?;
    if v.len() < MIN_FOREGROUND {
        return Err(StainError::TooFewPixels {
            found: v.len(),
            needed: MIN_FOREGROUND,
        });
    }
    // (W, H, objective trace, iterations)
    type Candidate = (StainMatrix, Vec<[f64; N_STAINS]>, Vec<f64>, usize);
    let mut best: Option<Candidate> = None;
    for restart in 0..params.restarts {
        let (mut w, mut h) = initial_factors(v.len(), params.seed, restart);
        let (trace, iters) = descend(
            v,
            &mut w,
            &mut h,
            params.lambda_sparse,
            params.max_iters,
            params.rel_tol,
        )?;
        let last = *trace.last().expect("trace starts non-empty");
        if best.as_ref().is_none_or(|b| last < *b.2.last().expect("non-empty")) {
            best = Some((w, h, trace, iters));
        }
    }
    let (mut w, mut h, trace, iterations) = best.expect("restarts >= 1");

    let refit_trace = if params.refit_iters > 0 {
        descend(v, &mut w, &mut h, 0.0, params.refit_iters, params.rel_tol)?.0
    } else {
        Vec::new()
    };

    // Hematoxylin absorbs more in the blue channel.
    if w[2][1] > w[2][0] {
        for row in w.iter_mut() {
            row.swap(0, 1);
        }
        for hp in h.iter_mut() {
            hp.swap(0, 1);
        }
    }
    Ok(SnmfFit {
        w,
        h,
        objective_trace: trace,
        refit_trace,
        iterations,
    })
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

fn row_percentiles(h: &[[f64; N_STAINS]]) -> [f64; N_STAINS] {
    let mut out = [0.0; N_STAINS];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut row: Vec<f64> = h.iter().map(|hp| hp[k]).collect();
        *slot = percentile(&mut row, 0.99).max(MIN_PERCENTILE);
    }
    out
}

/// Stain basis of a reference image plus its concentration scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainModel {
    /// Row-major 3x2, column 0 hematoxylin, column 1 eosin.
    pub w: StainMatrix,
    /// 99th percentile of each concentration row.
    pub p99: [f64; N_STAINS],
    pub params: SnmfParams,
}

impl StainModel {
    pub fn column(&self, k: usize) -> [f64; 3] {
        column(&self.w, k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stain model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Estimates the stain model from an already-converted OD matrix.
pub fn estimate_from_od(od: &ODMatrix, params: &SnmfParams) -> Result<StainModel, StainError> {
    let fit = factorize(&od.values, params)?;
    Ok(StainModel {
        w: fit.w,
        p99: row_percentiles(&fit.h),
        params: *params,
    })
}

pub fn estimate_stain_model(image: &ImageTensor, params: &SnmfParams) -> Result<StainModel, StainError> {
    params.validate()?;
    let od = rgb_to_od(image, params.i0, params.beta)?;
    estimate_from_od(&od, params)
}

/// Re-renders `source` in the target's stain basis.
///
/// The source's own stain matrix is estimated, its concentrations are
/// rescaled row-wise by `target.p99 / source.p99`, and the result is rendered
/// with the target's `W`. Background pixels are copied from the source.
pub fn normalize_to_target(
    source: &ImageTensor,
    target: &StainModel,
    params: &SnmfParams,
) -> Result<ImageTensor, StainError> {
    params.validate()?;
    let od = rgb_to_od(source, params.i0, params.beta)?;
    if od.foreground() == 0 {
        return Ok(source.clone());
    }
    let fit = factorize(&od.values, params)?;
    check_rank(&fit.w)?;
    let src_p99 = row_percentiles(&fit.h);
    let scale: [f64; N_STAINS] = std::array::from_fn(|k| target.p99[k] / src_p99[k]);

    let rendered: Vec<[f64; 3]> = fit
        .h
        .iter()
        .map(|hp| {
            let a = hp[0] * scale[0];
            let b = hp[1] * scale[1];
            std::array::from_fn(|c| target.w[c][0] * a + target.w[c][1] * b)
        })
        .collect();
    let mut out = od_to_rgb(&od.with_values(rendered), params.i0);
    for (i, &fg) in od.mask.iter().enumerate() {
        if !fg {
            let x = (i % source.width() as usize) as u32;
            let y = (i / source.width() as usize) as u32;
            out.set_pixel(x, y, source.pixel(x, y));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use rand::SeedableRng;

    #[test]
    fn od_trivial_values() {
        assert_eq!(optical_density(255.0, 255.0), 0.0);
        let v = optical_density(255.0 * (-1.0f64).exp(), 255.0);
        assert!((v - 1.0).abs() < 1e-12);
        // zero lifted to one
        assert_eq!(optical_density(0.0, 255.0), 255f64.ln());
        // brighter than the illuminant clamps to zero
        assert_eq!(optical_density(255.0, 200.0), 0.0);
    }

    #[test]
    fn intensity_trivial_values() {
        assert_eq!(intensity(0.0, 255.0), 255.0);
        assert_eq!(to_u8(intensity(1.0, 255.0) as f32), 94);
    }

    #[test]
    fn rejects_non_positive_illumination() {
        let img = ImageTensor::filled(2, 2, [10, 10, 10]);
        assert!(matches!(rgb_to_od(&img, 0.0, 0.15), Err(StainError::BadIntensity(_))));
        assert!(matches!(rgb_to_od(&img, -3.0, 0.15), Err(StainError::BadIntensity(_))));
    }

    #[test]
    fn white_image_is_all_background() {
        let img = ImageTensor::filled(16, 16, [255, 255, 255]);
        let od = rgb_to_od(&img, 255.0, 0.15).unwrap();
        assert_eq!(od.foreground(), 0);
        assert_eq!(od.mask().len(), 256);
        let back = od_to_rgb(&od, 255.0);
        assert_eq!(back, img);
    }

    #[test]
    fn too_few_pixels() {
        let mut img = ImageTensor::filled(20, 20, [255, 255, 255]);
        for i in 0..50 {
            img.set_pixel(i % 20, i / 20, [100, 50, 120]);
        }
        let err = estimate_stain_model(&img, &SnmfParams::default()).unwrap_err();
        assert!(matches!(err, StainError::TooFewPixels { found: 50, .. }));
    }

    #[test]
    fn concentrations_exact_single_pixel() {
        // Oracle: with lambda = 0 and h >= 0 the 3x2 least-squares solution is
        // exact for V = W h.
        let w = synthetic::HE_REFERENCE;
        for h_true in [[0.3, 0.7], [1.2, 0.0], [0.0, 0.45], [0.01, 2.0]] {
            let v: [f64; 3] = std::array::from_fn(|c| w[c][0] * h_true[0] + w[c][1] * h_true[1]);
            let od = ODMatrix::from_parts(1, 1, vec![v], vec![true]).unwrap();
            let h = solve_concentrations(&od, &w, 0.0).unwrap();
            assert!((h[0][0] - h_true[0]).abs() < 1e-6, "{h:?} vs {h_true:?}");
            assert!((h[0][1] - h_true[1]).abs() < 1e-6, "{h:?} vs {h_true:?}");
        }
    }

    #[test]
    fn concentrations_zero_and_heavy_penalty() {
        let w = synthetic::HE_REFERENCE;
        let od = ODMatrix::from_parts(2, 1, vec![[0.0; 3], [0.4, 0.9, 0.3]], vec![true, true]).unwrap();
        let h = solve_concentrations(&od, &w, 0.0).unwrap();
        assert_eq!(h[0], [0.0, 0.0]);
        let h = solve_concentrations(&od, &w, 1e6).unwrap();
        assert!(h.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn concentrations_match_brute_force_grid() {
        // Grid search oracle for the penalised 2-variable problem.
        let w = synthetic::HE_REFERENCE;
        let gram = Gram::of(&w);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let v = [
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
            ];
            let lambda = rng.gen_range(0.0..0.5);
            let cost = |h: [f64; 2]| {
                let mut s = lambda * (h[0] + h[1]);
                for c in 0..3 {
                    let r = v[c] - w[c][0] * h[0] - w[c][1] * h[1];
                    s += r * r;
                }
                s
            };
            let solved = solve_pixel(&w, &gram, v, lambda);
            let mut best = f64::INFINITY;
            for i in 0..=400 {
                for j in 0..=400 {
                    best = best.min(cost([i as f64 * 0.01, j as f64 * 0.01]));
                }
            }
            assert!(cost(solved) <= best + 1e-12, "{} > {}", cost(solved), best);
        }
    }

    #[test]
    fn parallel_columns_rejected() {
        let w = [[0.6, 0.6], [0.6, 0.6001], [0.52, 0.52]];
        let od = ODMatrix::from_parts(1, 1, vec![[0.5; 3]], vec![true]).unwrap();
        assert!(matches!(
            solve_concentrations(&od, &w, 0.1),
            Err(StainError::RankDeficient(_))
        ));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v: Vec<f64> = (0..=100).map(|x| x as f64).collect();
        assert!((percentile(&mut v, 0.99) - 99.0).abs() < 1e-12);
        let mut v = vec![0.0, 10.0];
        assert!((percentile(&mut v, 0.99) - 9.9).abs() < 1e-12);
    }

    #[test]
    fn model_json_round_trip() {
        let m = StainModel {
            w: synthetic::HE_REFERENCE,
            p99: [1.5, 0.75],
            params: SnmfParams::default(),
        };
        let back = StainModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn all_white_source_passes_through() {
        let img = ImageTensor::filled(32, 32, [255, 255, 255]);
        let target = StainModel {
            w: synthetic::HE_REFERENCE,
            p99: [1.0, 1.0],
            params: SnmfParams::default(),
        };
        let out = normalize_to_target(&img, &target, &SnmfParams::default()).unwrap();
        assert_eq!(out, img);
    }
}
