//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zsfuse_core::pipeline::encode_png;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-3 {
            return v;
        }
    }
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Lowest index of the largest value.
pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// 224×224 PNG whose pixels encode `index`, so every index gives distinct bytes.
pub fn indexed_png(index: u32) -> Vec<u8> {
    encode_png(&RgbImage::from_fn(224, 224, |x, y| {
        Rgb([
            (index % 251) as u8,
            (index / 251) as u8,
            ((x * 7 + y * 3) % 256) as u8,
        ])
    }))
}

pub fn solid_png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    encode_png(&RgbImage::from_pixel(w, h, Rgb(rgb)))
}

/// Solid 224×224 background with one filled square.
pub fn marker_png(background: [u8; 3], marker: [u8; 3], x: u32, y: u32, side: u32) -> Vec<u8> {
    encode_png(&RgbImage::from_fn(224, 224, |px, py| {
        if (x..x + side).contains(&px) && (y..y + side).contains(&py) {
            Rgb(marker)
        } else {
            Rgb(background)
        }
    }))
}
