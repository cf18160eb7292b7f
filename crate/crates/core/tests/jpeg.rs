use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwrforge_core::reward::{jpeg_score, RewardError};

/// Byte counts of the two reference rasters, recorded from the pinned encoder.
const CONSTANT_GRAY_BYTES: f64 = 689.0;
const UNIFORM_NOISE_BYTES: f64 = 3389.0;

fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

fn constant_gray() -> RgbImage {
    RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]))
}

/// Constant gray plus per-channel uniform noise in `[-amplitude, amplitude]`.
fn noisy(amplitude: i32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(64, 64, |_, _| {
        Rgb(std::array::from_fn(|_| (128 + rng.random_range(-amplitude..=amplitude)).clamp(0, 255) as u8))
    })
}

fn uniform_noise() -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    RgbImage::from_fn(64, 64, |_, _| Rgb(std::array::from_fn(|_| rng.random::<u8>())))
}

#[test]
fn reference_rasters() {
    let gray = jpeg_score(&png(&constant_gray())).unwrap();
    let noise = jpeg_score(&png(&uniform_noise())).unwrap();
    assert_eq!(gray, CONSTANT_GRAY_BYTES);
    assert_eq!(noise, UNIFORM_NOISE_BYTES);
    assert!(noise > gray);
}

#[test]
fn deterministic() {
    let bytes = png(&uniform_noise());
    assert_eq!(jpeg_score(&bytes).unwrap(), jpeg_score(&bytes).unwrap());
}

#[test]
fn truncated_payload_is_a_decode_error() {
    let bytes = png(&uniform_noise());
    assert!(matches!(jpeg_score(&bytes[..bytes.len() / 2]), Err(RewardError::Decode(_))));
}

#[test]
fn monotone_in_noise_amplitude() {
    let scores: Vec<f64> = [0, 4, 16, 48, 96, 127]
        .iter()
        .map(|&a| jpeg_score(&png(&noisy(a, 11))).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] < w[1]), "{scores:?}");
}
