//! Synthetic images and exports for tests, benches and demos.
//!
//! Scenes are a flat background with one rectangular object. Channel values
//! stay at or below 200 so they never collide with the mock attribute codes.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::mock::encode_png;
use crate::ingest::RawRecord;
use crate::model::Split;

pub fn solid_png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    encode_png(DynamicImage::ImageRgb8(RgbImage::from_pixel(w, h, Rgb(rgb))))
}

pub fn rect_mask(w: u32, h: u32, x: u32, y: u32, rw: u32, rh: u32) -> GrayImage {
    let mut m = GrayImage::new(w, h);
    for yy in y..(y + rh).min(h) {
        for xx in x..(x + rw).min(w) {
            m.put_pixel(xx, yy, Luma([255]));
        }
    }
    m
}

/// Background plus one object rectangle, all colors drawn from `seed`.
pub fn scene_png(seed: u64, w: u32, h: u32) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || [rng.random_range(0..=200u8), rng.random_range(0..=200u8), rng.random_range(0..=200u8)];
    let bg = color();
    let fg = color();
    let mut img = RgbImage::from_pixel(w, h, Rgb(bg));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x0 = rng.random_range(0..w / 3 + 1);
    let y0 = rng.random_range(0..h / 3 + 1);
    for y in y0..(y0 + h / 2).min(h) {
        for x in x0..(x0 + w / 2).min(w) {
            // mild texture so inpainting visibly changes pixels
            let t = ((x + y) % 7) as u8;
            img.put_pixel(x, y, Rgb([fg[0] / 2 + t, fg[1] / 2 + t, fg[2] / 2 + t]));
        }
    }
    encode_png(DynamicImage::ImageRgb8(img))
}

const NOUNS: [&str; 10] = [
    "car", "fountain", "dome", "tower", "bench", "kite", "umbrella", "vase", "clock", "boat",
];
const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "yellow", "brown", "gray"];
const SHAPES: [&str; 6] = ["round", "square", "triangular", "rectangular", "oval", "conical"];

/// Kind of synthetic record, cycled by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    WebqaYesNo,
    WebqaColor,
    WebqaShape,
    WebqaColorPair,
    Vqav2,
    Okvqa,
    WebqaNumber,
    WebqaShapePair,
}

const KINDS: [SynthKind; 8] = [
    SynthKind::WebqaYesNo,
    SynthKind::WebqaColor,
    SynthKind::WebqaShape,
    SynthKind::WebqaColorPair,
    SynthKind::Vqav2,
    SynthKind::Okvqa,
    SynthKind::WebqaNumber,
    SynthKind::WebqaShapePair,
];

pub fn kind_of(index: usize) -> SynthKind {
    KINDS[index % KINDS.len()]
}

/// Write `n` synthetic records and their images under `dir`; returns the records.
///
/// Images go to `dir/images/`, records to `dir/records.jsonl`, with image
/// paths relative to `dir`.
pub fn write_export(dir: &Path, n: usize, seed: u64, image_size: u32) -> std::io::Result<Vec<RawRecord>> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let kind = kind_of(i);
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let color = COLORS[rng.random_range(0..COLORS.len())];
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let (dataset, question, answer, hint, n_images) = match kind {
            SynthKind::WebqaYesNo => (
                "webqa",
                format!("Is there anything next to the {noun}?"),
                if rng.random_bool(0.5) { "yes" } else { "no" }.to_string(),
                Some("YesNo"),
                1,
            ),
            SynthKind::WebqaColor => ("webqa", format!("What color is the {noun}?"), color.to_string(), None, 1),
            SynthKind::WebqaShape => ("webqa", format!("What is the shape of the {noun}?"), shape.to_string(), Some("shape"), 1),
            SynthKind::WebqaColorPair => (
                "webqa",
                format!("Across both pictures, what color is the {noun}?"),
                color.to_string(),
                None,
                2,
            ),
            SynthKind::Vqav2 => ("vqav2", format!("What is on top of the {noun}?"), "a bird".to_string(), None, 1),
            SynthKind::Okvqa => ("okvqa", format!("What is the {noun} used for?"), "transportation".to_string(), None, 1),
            SynthKind::WebqaNumber => (
                "webqa",
                format!("How many windows does the {noun} have?"),
                rng.random_range(1..9u32).to_string(),
                None,
                1,
            ),
            SynthKind::WebqaShapePair => (
                "webqa",
                format!("What shape is the top of the {noun}?"),
                shape.to_string(),
                Some("shape"),
                2,
            ),
        };
        let mut images = Vec::new();
        for k in 0..n_images {
            let name = format!("img_{i:05}_{k}.png");
            let img_seed = seed.wrapping_mul(1_000_003).wrapping_add((i * 2 + k) as u64);
            fs::write(img_dir.join(&name), scene_png(img_seed, image_size, image_size))?;
            images.push(format!("images/{name}"));
        }
        records.push(RawRecord {
            source_id: format!("s{i:05}"),
            question,
            answer,
            images,
            dataset: dataset.to_string(),
            split: if i % 5 == 4 { Split::Validation } else { Split::Train },
            category: hint.map(str::to_string),
        });
    }
    let body: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    fs::write(dir.join("records.jsonl"), body)?;
    Ok(records)
}
