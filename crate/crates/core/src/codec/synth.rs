//! Procedural test pictures: smooth gradients with a few flat shapes and
//! mild noise. Stand-ins for natural images in tests and self-checks.

use rand::Rng;

use super::image_io::RgbImage;

pub fn synthetic_image(width: usize, height: usize, rng: &mut impl Rng) -> RgbImage {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(40.0..200.0));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-60.0..60.0));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-60.0..60.0));
    let mut px: Vec<[f64; 3]> = (0..width * height)
        .map(|i| {
            let (x, y) = (
                (i % width) as f64 / width as f64,
                (i / width) as f64 / height as f64,
            );
            std::array::from_fn(|c| base[c] + gx[c] * (x - 0.5) + gy[c] * (y - 0.5))
        })
        .collect();
    for _ in 0..rng.gen_range(2..6) {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let r = rng.gen_range(0.1..0.4) * width.min(height) as f64;
        let disc = rng.gen_bool(0.5);
        for (i, p) in px.iter_mut().enumerate() {
            let dx = (i % width) as f64 - cx;
            let dy = (i / width) as f64 - cy;
            let inside = if disc {
                dx * dx + dy * dy < r * r
            } else {
                dx.abs() < r && dy.abs() < 0.6 * r
            };
            if inside {
                *p = color;
            }
        }
    }
    let data = px
        .iter()
        .flat_map(|p| *p)
        .map(|v| (v + rng.gen_range(-4.0..4.0)).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::new(width, height, data).expect("sizes agree")
}

/// Uniform random pixels.
pub fn noise_image(width: usize, height: usize, rng: &mut impl Rng) -> RgbImage {
    let data = (0..width * height * 3).map(|_| rng.gen()).collect();
    RgbImage::new(width, height, data).expect("sizes agree")
}
