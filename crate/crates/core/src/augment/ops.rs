//! Pixel-level transforms. Geometry uses inverse mapping with nearest-neighbour
//! sampling about the image centre; pixels that map outside the source are black.

use rand::Rng;

use crate::image::{to_u8, ImageTensor};

use super::{TransformError, TransformKind};

/// Applies one transform. Every kind yields one image except `FiveCrop`, which
/// yields upper-left, upper-right, bottom-left, bottom-right and centre crops.
pub fn apply_transform(
    image: &ImageTensor,
    kind: &TransformKind,
    rng: &mut impl Rng,
) -> Result<Vec<ImageTensor>, TransformError> {
    Ok(match *kind {
        TransformKind::HorizontalFlip => vec![horizontal_flip(image)],
        TransformKind::VerticalFlip => vec![vertical_flip(image)],
        TransformKind::CenterCrop { size } => vec![center_crop(image, size)?],
        TransformKind::FiveCrop { size } => five_crop(image, size)?.to_vec(),
        TransformKind::Rotate { degrees } => vec![affine(image, degrees, (0, 0), 0.0)],
        TransformKind::Affine {
            degrees,
            translate,
            shear,
        } => {
            let angle = sample(rng, degrees);
            let (w, h) = (image.width() as f64, image.height() as f64);
            let (tx, ty) = match translate {
                Some((fx, fy)) => {
                    let mx = (fx * w).round();
                    let my = (fy * h).round();
                    (
                        rng.gen_range(-mx..=mx).round() as i64,
                        rng.gen_range(-my..=my).round() as i64,
                    )
                }
                None => (0, 0),
            };
            let sx = shear.map_or(0.0, |s| sample(rng, s));
            vec![affine(image, angle, (tx, ty), sx)]
        }
        TransformKind::ColorJitter {
            brightness,
            saturation,
            hue,
        } => {
            let b = rng.gen_range(1.0 - brightness..=1.0 + brightness).max(0.0);
            let s = rng.gen_range(1.0 - saturation..=1.0 + saturation).max(0.0);
            let h = rng.gen_range(-hue..=hue);
            vec![color_jitter(image, b as f32, s as f32, h as f32)]
        }
    })
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn horizontal_flip(image: &ImageTensor) -> ImageTensor {
    let w = image.width();
    ImageTensor::from_fn(w, image.height(), |x, y| image.pixel(w - 1 - x, y))
}

pub fn vertical_flip(image: &ImageTensor) -> ImageTensor {
    let h = image.height();
    ImageTensor::from_fn(image.width(), h, |x, y| image.pixel(x, h - 1 - y))
}

fn check_size(image: &ImageTensor, size: u32) -> Result<(), TransformError> {
    if image.width() < size || image.height() < size {
        return Err(TransformError::TooSmall {
            width: image.width(),
            height: image.height(),
            needed: size,
        });
    }
    Ok(())
}

/// Offset of a centred window: half the slack, ties rounded to even.
fn centre_offset(total: u32, size: u32) -> u32 {
    let slack = total - size;
    let half = slack / 2;
    if slack % 2 == 1 && half % 2 == 1 {
        half + 1
    } else {
        half
    }
}

pub fn center_crop(image: &ImageTensor, size: u32) -> Result<ImageTensor, TransformError> {
    check_size(image, size)?;
    let x0 = centre_offset(image.width(), size);
    let y0 = centre_offset(image.height(), size);
    Ok(image.crop(x0, y0, size, size))
}

pub fn five_crop(image: &ImageTensor, size: u32) -> Result<[ImageTensor; 5], TransformError> {
    check_size(image, size)?;
    let (w, h) = (image.width(), image.height());
    Ok([
        image.crop(0, 0, size, size),
        image.crop(w - size, 0, size, size),
        image.crop(0, h - size, size, size),
        image.crop(w - size, h - size, size, size),
        center_crop(image, size)?,
    ])
}

/// Rotation by `degrees` (anticlockwise on screen), then an x-shear of
/// `shear_deg`, then an integer translation; canvas size is kept.
pub fn affine(image: &ImageTensor, degrees: f64, translate: (i64, i64), shear_deg: f64) -> ImageTensor {
    let (w, h) = (image.width(), image.height());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let k = shear_deg.to_radians().tan();
    // Forward map in y-down coordinates: A = R * Sx with
    // R = [cos sin; -sin cos], Sx = [1 k; 0 1].
    let a = [[cos, cos * k + sin], [-sin, -sin * k + cos]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    let (tx, ty) = (translate.0 as f64, translate.1 as f64);
    ImageTensor::from_fn(w, h, |x, y| {
        let u = x as f64 + 0.5 - cx - tx;
        let v = y as f64 + 0.5 - cy - ty;
        let sx = (inv[0][0] * u + inv[0][1] * v + cx).floor();
        let sy = (inv[1][0] * u + inv[1][1] * v + cy).floor();
        if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
            image.pixel(sx as u32, sy as u32)
        } else {
            [0, 0, 0]
        }
    })
}

/// Brightness scale, then saturation blend towards luma, then hue rotation in
/// HSV (`hue_shift` in turns). Values are carried in `[0, 1]` floats and
/// rounded once at the end.
pub fn color_jitter(image: &ImageTensor, brightness: f32, saturation: f32, hue_shift: f32) -> ImageTensor {
    let mut data = Vec::with_capacity(image.pixel_count() * 3);
    for src in image.pixels() {
        let mut rgb = src.map(|c| c as f32 / 255.0);
        rgb = rgb.map(|c| (c * brightness).clamp(0.0, 1.0));
        let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        rgb = rgb.map(|c| (saturation * c + (1.0 - saturation) * luma).clamp(0.0, 1.0));
        if hue_shift != 0.0 {
            let [h, s, v] = rgb_to_hsv(rgb);
            rgb = hsv_to_rgb([(h + hue_shift).rem_euclid(1.0), s, v]);
        }
        data.extend(rgb.map(|c| to_u8(c * 255.0)));
    }
    ImageTensor::new(image.width(), image.height(), data).expect("same size")
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
