//! Training-time augmentation: rotation, horizontal flip, zoom and contrast,
//! applied in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Angles are drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub flip_prob: f64,
    pub zoom: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: 20.0,
            flip_prob: 0.5,
            zoom: (0.8, 1.2),
            contrast: (0.8, 1.2),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi;
        if !(self.rotation_deg.is_finite() && self.rotation_deg >= 0.0) {
            return Err(format!("rotation range {} must be non-negative", self.rotation_deg));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        if !ordered(self.zoom) {
            return Err(format!("zoom range {:?} must be positive and ordered", self.zoom));
        }
        if !ordered(self.contrast) {
            return Err(format!("contrast range {:?} must be positive and ordered", self.contrast));
        }
        Ok(())
    }

    /// Draws one sample's parameters. All four draws are always made so the
    /// stream layout does not depend on the ranges.
    pub fn draw(&self, sample_seed: u64) -> AugmentParams {
        let mut rng = rng_from(&[sample_seed]);
        let u_angle: f64 = rng.random();
        let u_flip: f64 = rng.random();
        let u_zoom: f64 = rng.random();
        let u_contrast: f64 = rng.random();
        let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
        AugmentParams {
            angle_deg: lerp((-self.rotation_deg, self.rotation_deg), u_angle),
            flip: u_flip < self.flip_prob,
            zoom: lerp(self.zoom, u_zoom),
            contrast: lerp(self.contrast, u_contrast),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub flip: bool,
    pub zoom: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const NEUTRAL: Self = Self {
        angle_deg: 0.0,
        flip: false,
        zoom: 1.0,
        contrast: 1.0,
    };
}

pub fn augment(img: &Image, cfg: &AugmentConfig, sample_seed: u64) -> Image {
    if !cfg.enabled {
        return img.clone();
    }
    apply(img, &cfg.draw(sample_seed))
}

pub fn apply(img: &Image, p: &AugmentParams) -> Image {
    let mut out = img.clone();
    if p.angle_deg != 0.0 {
        let (s, c) = p.angle_deg.to_radians().sin_cos();
        // inverse rotation maps each output pixel back into the source
        out = warp(&out, |dy, dx| (c * dy - s * dx, s * dy + c * dx));
    }
    if p.flip {
        out = hflip(&out);
    }
    if p.zoom != 1.0 {
        let inv = 1.0 / p.zoom;
        out = warp(&out, |dy, dx| (dy * inv, dx * inv));
    }
    if p.contrast != 1.0 {
        adjust_contrast(&mut out, p.contrast);
    }
    out
}

/// Resamples through `map`, which takes an output offset from the image
/// center and returns the source offset. Out-of-range samples replicate the
/// nearest edge.
fn warp(img: &Image, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64 - cy, x as f64 - cx);
            let sy = (sy + cy).clamp(0.0, (h - 1) as f64);
            let sx = (sx + cx).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            taps.push((y0, y1, x0, x1, (sy - y0 as f64) as f32, (sx - x0 as f64) as f32));
        }
    }
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        let p = img.plane(c);
        for &(y0, y1, x0, x1, fy, fx) in &taps {
            let at = |y: usize, x: usize| p[y * w + x];
            let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
            let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
            data.push(top + (bot - top) * fy);
        }
    }
    Image::new(h, w, data)
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width;
    let data = img
        .data
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Image::new(img.height, w, data)
}

/// `x' = clamp(mean + f (x - mean))` with the mean over the whole image.
pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64;
    for v in &mut img.data {
        *v = (mean + factor * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let n = h * w;
        Image::new(h, w, (0..3 * n).map(|i| (i % n) as f32 / n as f32).collect())
    }

    #[test]
    fn disabled_is_identity() {
        let img = ramp(5, 7);
        assert_eq!(augment(&img, &AugmentConfig::disabled(), 3), img);
    }

    #[test]
    fn flip_mirrors_rows() {
        let img = Image::new(2, 2, [1.0, 2.0, 3.0, 4.0].repeat(3));
        assert_eq!(hflip(&img).plane(0), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let img = ramp(6, 6);
        assert_eq!(apply(&img, &AugmentParams::NEUTRAL), img);
        // force the resampling paths with parameters that map onto the grid
        let p = AugmentParams {
            angle_deg: 360.0,
            flip: false,
            zoom: 1.0,
            contrast: 1.0,
        };
        let out = apply(&img, &p);
        let diff = out.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn outputs_stay_in_range_and_shape() {
        let img = ramp(9, 11);
        let cfg = AugmentConfig {
            contrast: (1.5, 3.0),
            ..AugmentConfig::default()
        };
        for seed in 0..50 {
            let out = augment(&img, &cfg, seed);
            assert_eq!((out.height, out.width), (9, 11));
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn draws_are_seeded_and_in_range() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.draw(11), cfg.draw(11));
        for s in 0..200 {
            let p = cfg.draw(s);
            assert!(p.angle_deg.abs() <= 20.0);
            assert!((0.8..=1.2).contains(&p.zoom) && (0.8..=1.2).contains(&p.contrast));
        }
    }
}
