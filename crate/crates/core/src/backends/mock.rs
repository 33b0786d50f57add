//! Deterministic in-process backends.
//!
//! Every mock is a pure function of the request (plus a fixed seed), so a run
//! over mocks is reproducible byte for byte. The image mocks cooperate
//! through a pixel code: [`MockInfiller`] paints the masked region with a
//! color that encodes the requested attribute token, and [`MockVlm`] reads it
//! back when asked about the color or shape of an object.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;

use image::{DynamicImage, GrayImage, ImageFormat, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendRequest, CallError, RawReply};
use crate::metrics::vocab::{tokenize, CategoryVocabulary};
use crate::model::Attribute;

/// Replies from an exact-match table.
///
/// Lookup order: the request key, the exact prompt, the first substring
/// rule, then the default. Keys in `fail_keys` produce transient failures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBackend {
    pub name: String,
    #[serde(default)]
    pub table: BTreeMap<String, String>,
    #[serde(default)]
    pub keyed: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<(String, String)>,
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub fail_keys: BTreeSet<String>,
}

/// Scripted text backend: `table` maps exact prompts to replies.
pub fn mock_script<'a>(
    name: &str,
    table: impl IntoIterator<Item = (&'a str, &'a str)>,
    default: Option<&str>,
) -> ScriptedBackend {
    ScriptedBackend {
        name: name.to_string(),
        table: table
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        default: default.map(str::to_string),
        ..Default::default()
    }
}

impl ScriptedBackend {
    pub fn keyed<'a>(mut self, entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        self.keyed
            .extend(entries.into_iter().map(|(k, v)| (k.to_string(), v.to_string())));
        self
    }

    pub fn rule(mut self, needle: &str, reply: &str) -> Self {
        self.rules.push((needle.to_string(), reply.to_string()));
        self
    }

    pub fn failing(mut self, key: &str) -> Self {
        self.fail_keys.insert(key.to_string());
        self
    }

    pub fn lookup(&self, req: &BackendRequest) -> Option<&str> {
        req.key
            .as_ref()
            .and_then(|k| self.keyed.get(k))
            .or_else(|| self.table.get(&req.prompt))
            .or_else(|| {
                self.rules
                    .iter()
                    .find(|(needle, _)| req.prompt.contains(needle.as_str()))
                    .map(|(_, r)| r)
            })
            .or(self.default.as_ref())
            .map(String::as_str)
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError> {
        if req.key.as_ref().is_some_and(|k| self.fail_keys.contains(k)) {
            return Err(CallError::Transient("scripted failure".into()));
        }
        match self.lookup(req) {
            Some(reply) => Ok(RawReply::text(reply)),
            None => Err(CallError::Protocol(format!(
                "no scripted reply for prompt {:?}",
                req.prompt
            ))),
        }
    }
}

fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, CallError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| CallError::Protocol(format!("undecodable image: {e}")))
}

fn decode_mask(bytes: &[u8]) -> Result<GrayImage, CallError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_luma8())
        .map_err(|e| CallError::Protocol(format!("undecodable mask: {e}")))
}

pub fn encode_png(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding into memory");
    out.into_inner()
}

fn first_image(req: &BackendRequest) -> Result<&[u8], CallError> {
    req.images
        .first()
        .map(|i| i.bytes.as_slice())
        .ok_or_else(|| CallError::Protocol("request carries no image".into()))
}

/// Segments a fixed rectangle, given as fractions of the image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSegmenter {
    pub name: String,
    /// `[x0, y0, x1, y1]` in `0..=1`.
    pub rect: [f64; 4],
    /// Nouns for which the mask comes back empty.
    #[serde(default)]
    pub empty_nouns: BTreeSet<String>,
}

impl Default for MockSegmenter {
    fn default() -> Self {
        MockSegmenter {
            name: "mock-segmenter".into(),
            rect: [0.25, 0.25, 0.75, 0.75],
            empty_nouns: BTreeSet::new(),
        }
    }
}

impl Backend for MockSegmenter {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError> {
        let img = decode_rgb(first_image(req)?)?;
        let (w, h) = img.dimensions();
        let mut mask = GrayImage::new(w, h);
        if !self.empty_nouns.contains(req.prompt.trim()) {
            let x0 = (self.rect[0] * w as f64).floor() as u32;
            let y0 = (self.rect[1] * h as f64).floor() as u32;
            let x1 = ((self.rect[2] * w as f64).ceil() as u32).min(w);
            let y1 = ((self.rect[3] * h as f64).ceil() as u32).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    mask.put_pixel(x, y, Luma([255]));
                }
            }
        }
        Ok(RawReply::image(encode_png(DynamicImage::ImageLuma8(mask))))
    }
}

/// Fills the masked region with the mean color of the unmasked pixels that
/// touch it (4-neighbourhood). Pixels outside the mask are untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockInpainter {
    pub name: String,
}

impl Default for MockInpainter {
    fn default() -> Self {
        MockInpainter {
            name: "mock-inpainter".into(),
        }
    }
}

/// Mean color of unmasked pixels 4-adjacent to the mask; whole-image mean if none.
pub fn mask_border_mean(img: &RgbImage, mask: &GrayImage) -> [u8; 3] {
    let (w, h) = img.dimensions();
    let masked = |x: u32, y: u32| mask.get_pixel(x, y).0[0] != 0;
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for y in 0..h {
        for x in 0..w {
            if masked(x, y) {
                continue;
            }
            let touches = (x > 0 && masked(x - 1, y))
                || (x + 1 < w && masked(x + 1, y))
                || (y > 0 && masked(x, y - 1))
                || (y + 1 < h && masked(x, y + 1));
            if touches {
                for (s, c) in sum.iter_mut().zip(img.get_pixel(x, y).0) {
                    *s += c as u64;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        for p in img.pixels() {
            for (s, c) in sum.iter_mut().zip(p.0) {
                *s += c as u64;
            }
        }
        n = (w as u64 * h as u64).max(1);
    }
    // round half up
    sum.map(|s| ((s + n / 2) / n) as u8)
}

fn fill_masked(img: &mut RgbImage, mask: &GrayImage, color: [u8; 3]) {
    for (x, y, p) in img.enumerate_pixels_mut() {
        if mask.get_pixel(x, y).0[0] != 0 {
            p.0 = color;
        }
    }
}

fn image_and_mask(req: &BackendRequest) -> Result<(RgbImage, GrayImage), CallError> {
    let img = decode_rgb(first_image(req)?)?;
    let mask = decode_mask(
        req.mask
            .as_deref()
            .ok_or_else(|| CallError::Protocol("request carries no mask".into()))?,
    )?;
    if mask.dimensions() != img.dimensions() {
        return Err(CallError::Protocol("mask and image sizes differ".into()));
    }
    Ok((img, mask))
}

impl Backend for MockInpainter {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError> {
        let (mut img, mask) = image_and_mask(req)?;
        let color = mask_border_mean(&img, &mask);
        fill_masked(&mut img, &mask, color);
        Ok(RawReply::image(encode_png(DynamicImage::ImageRgb8(img))))
    }
}

/// Pixel color that encodes `token` of `attribute`. Red channel 251/252 marks
/// the code; green carries the token index in the sorted vocabulary.
pub fn attribute_code(attribute: Attribute, index: u8) -> [u8; 3] {
    let tag = match attribute {
        Attribute::Color => 251,
        Attribute::Shape => 252,
    };
    [tag, index, 255 - index]
}

/// First token of `text` that belongs to the color or shape vocabulary.
pub fn find_attribute_token(text: &str, vocab: &CategoryVocabulary) -> Option<(Attribute, u8)> {
    tokenize(text).find_map(|t| {
        [Attribute::Color, Attribute::Shape]
            .into_iter()
            .find_map(|a| {
                let tokens = vocab.tokens(a.category());
                tokens.iter().position(|x| *x == t).map(|i| (a, i as u8))
            })
    })
}

/// Most frequent attribute code painted into `img`, as a vocabulary token.
pub fn read_attribute_code(
    img: &RgbImage,
    attribute: Attribute,
    vocab: &CategoryVocabulary,
) -> Option<String> {
    let tag = attribute_code(attribute, 0)[0];
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for p in img.pixels() {
        let [r, g, b] = p.0;
        if r == tag && g as u16 + b as u16 == 255 {
            *counts.entry(g).or_default() += 1;
        }
    }
    let (idx, _) = counts.into_iter().max_by_key(|(i, n)| (*n, std::cmp::Reverse(*i)))?;
    vocab.tokens(attribute.category()).get(idx as usize).cloned()
}

/// Paints the masked region with the code of the attribute token named in the prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockInfiller {
    pub name: String,
    #[serde(skip)]
    vocab: CategoryVocabulary,
}

impl MockInfiller {
    pub fn new(name: &str) -> Self {
        MockInfiller {
            name: name.to_string(),
            vocab: CategoryVocabulary::default(),
        }
    }
}

impl Backend for MockInfiller {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError> {
        let (mut img, mask) = image_and_mask(req)?;
        let color = match find_attribute_token(&req.prompt, &self.vocab) {
            Some((a, i)) => attribute_code(a, i),
            None => [128, 128, 128],
        };
        fill_masked(&mut img, &mask, color);
        Ok(RawReply::image(encode_png(DynamicImage::ImageRgb8(img))))
    }
}

/// Stand-in vision-language model for the extractor, judge and subject roles.
///
/// Replies are derived from a hash of the seed, prompt and image bytes, and
/// from attribute codes painted by [`MockInfiller`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockVlm {
    pub name: String,
    pub seed: u64,
    /// Per-mille of removal checks answered affirmatively (quality failures).
    #[serde(default = "default_removal_fail")]
    pub removal_fail_permille: u32,
    #[serde(skip)]
    vocab: CategoryVocabulary,
}

fn default_removal_fail() -> u32 {
    150
}

impl MockVlm {
    pub fn new(name: &str, seed: u64) -> Self {
        MockVlm {
            name: name.to_string(),
            seed,
            removal_fail_permille: default_removal_fail(),
            vocab: CategoryVocabulary::default(),
        }
    }

    fn hash(&self, req: &BackendRequest) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(req.prompt.as_bytes());
        for img in &req.images {
            h.update(&img.bytes);
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    fn decoded(&self, req: &BackendRequest, attribute: Attribute) -> Option<String> {
        req.images.iter().find_map(|i| {
            decode_rgb(&i.bytes)
                .ok()
                .and_then(|img| read_attribute_code(&img, attribute, &self.vocab))
        })
    }

    fn question<'a>(&self, prompt: &'a str) -> &'a str {
        prompt
            .lines()
            .rev()
            .find_map(|l| l.trim().strip_prefix("Question:"))
            .map(str::trim)
            .unwrap_or(prompt.trim())
    }
}

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Word after the last article, or the last word.
fn guess_object(question: &str) -> Option<String> {
    let words: Vec<String> = tokenize(question).collect();
    let after_article = words
        .iter()
        .rposition(|w| ARTICLES.contains(&w.as_str()))
        .and_then(|i| words.get(i + 1));
    after_article.or(words.last()).cloned()
}

impl Backend for MockVlm {
    fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &BackendRequest) -> Result<RawReply, CallError> {
        let prompt = req.prompt.to_lowercase();
        let h = self.hash(req);
        let q = self.question(&req.prompt);

        if prompt.contains("extract the noun") {
            return Ok(RawReply::text(guess_object(q).unwrap_or_default()));
        }
        if prompt.contains("present in both") {
            let fail = (h % 1000) < self.removal_fail_permille as u64;
            return Ok(RawReply::text(if fail {
                "Yes, it is present in both images."
            } else {
                "No."
            }));
        }
        let system = req.system.as_deref().unwrap_or("").to_lowercase();
        if prompt.contains("contextualization score") || system.contains("contextualization score") {
            return Ok(RawReply::text(format!("{}", 1 + h % 10)));
        }
        for attribute in [Attribute::Color, Attribute::Shape] {
            let asks = format!("what is the {} of", attribute.as_str());
            if prompt.contains(&asks) && req.images.len() == 1 && !prompt.contains("answer the question") {
                // quality-check form: describe the attribute only
                return Ok(RawReply::text(match self.decoded(req, attribute) {
                    Some(t) => format!("It is {t}."),
                    None => "unknown".into(),
                }));
            }
        }

        // subject role
        let ql = q.to_lowercase();
        let asked = if ql.contains("color") || ql.contains("colour") {
            Some(Attribute::Color)
        } else if ql.contains("shape") {
            Some(Attribute::Shape)
        } else {
            None
        };
        if let Some(t) = asked.and_then(|a| self.decoded(req, a)) {
            return Ok(RawReply::text(match h % 4 {
                0 => "I cannot tell from the image.".to_string(),
                _ => format!("It is {t}."),
            }));
        }
        let first = tokenize(&ql).next().unwrap_or_default();
        let yes_no = ["is", "are", "does", "do", "was", "were", "can", "has"].contains(&first.as_str());
        let reply = if yes_no {
            ["Yes.", "Yes, it is.", "No.", "Sorry, I cannot determine that.", "<RET>"][(h % 5) as usize]
        } else if asked == Some(Attribute::Color) {
            ["It is red.", "Blue.", "I am not sure.", "White and grey."][(h % 4) as usize]
        } else if asked == Some(Attribute::Shape) {
            ["It is round.", "Square.", "The image is too blurry."][(h % 3) as usize]
        } else {
            ["I am not sure.", "2", "A dog.", "Not enough information in the image."][(h % 4) as usize]
        };
        Ok(RawReply::text(reply))
    }
}
