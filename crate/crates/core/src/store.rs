//! Content-addressed image and mask store.
//!
//! Layout: `{root}/{first two hash chars}/{hash}.{ext}` for the payload and
//! `{hash}.json` next to it for the asset metadata. The first writer of a
//! given hash wins; later writers read the existing metadata back.

use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::{GrayImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{content_hash, ImageAsset, ImageOrigin, MaskAsset, MediaType};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("unsupported image format {0:?}")]
    Unsupported(String),
    #[error("asset {0} not found")]
    NotFound(String),
    #[error("asset {id} is a {found}, expected a {wanted}")]
    WrongKind {
        id: String,
        found: &'static str,
        wanted: &'static str,
    },
    #[error("corrupt metadata for {id}: {detail}")]
    Corrupt { id: String, detail: String },
    #[error("parent image {0} is not in the store")]
    MissingParent(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("lineage of {0} does not terminate at an original image")]
    BrokenLineage(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Entry {
    Image(ImageAsset),
    Mask(MaskAsset),
}

impl Entry {
    fn kind(&self) -> &'static str {
        match self {
            Entry::Image(_) => "image",
            Entry::Mask(_) => "mask",
        }
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Decoded dimensions and container format of an encoded image.
pub fn probe(bytes: &[u8]) -> Result<(MediaType, u32, u32), StoreError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| StoreError::Decode(e.to_string()))?;
    let media = match reader.format() {
        Some(ImageFormat::Png) => MediaType::Png,
        Some(ImageFormat::Jpeg) => MediaType::Jpeg,
        Some(other) => return Err(StoreError::Unsupported(format!("{other:?}"))),
        None => return Err(StoreError::Decode("unrecognized image container".into())),
    };
    let img = reader
        .decode()
        .map_err(|e| StoreError::Decode(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(StoreError::Decode("zero-sized image".into()));
    }
    Ok((media, img.width(), img.height()))
}

/// Encode a single-channel mask as PNG.
pub fn encode_mask(mask: &GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    mask.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding into memory");
    out.into_inner()
}

impl ImageStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(ImageStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn shard(&self, id: &str) -> PathBuf {
        self.root.join(id.get(..2).unwrap_or(id))
    }

    pub fn payload_path(&self, id: &str, media: MediaType) -> PathBuf {
        self.shard(id).join(format!("{id}.{}", media.extension()))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.shard(id).join(format!("{id}.json"))
    }

    fn write_payload(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("payload path has a shard directory");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = self.tmp_path(dir);
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    fn tmp_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!(
            ".{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ))
    }

    /// Write metadata unless some other writer got there first; return what is stored.
    fn claim(&self, id: &str, entry: Entry) -> Result<Entry, StoreError> {
        let path = self.meta_path(id);
        let dir = path.parent().expect("metadata path has a shard directory");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = self.tmp_path(dir);
        let body = serde_json::to_vec(&entry).expect("asset metadata serializes");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        // hard_link never replaces an existing file, so the metadata appears whole or not at all
        let linked = fs::hard_link(&tmp, &path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(entry),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => self.entry(id),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn entry(&self, id: &str) -> Result<Entry, StoreError> {
        let path = self.meta_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(id.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            id: id.to_string(),
            detail: e.to_string(),
        })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.meta_path(id).exists()
    }

    /// Store encoded image bytes. Perturbed origins must reference a stored parent.
    pub fn put_image(&self, bytes: &[u8], origin: ImageOrigin) -> Result<ImageAsset, StoreError> {
        if let ImageOrigin::Perturbed {
            parent_image_id, ..
        } = &origin
        {
            self.image(parent_image_id)
                .map_err(|_| StoreError::MissingParent(parent_image_id.clone()))?;
        }
        let (media, width, height) = probe(bytes)?;
        let id = content_hash(bytes);
        self.write_payload(&self.payload_path(&id, media), bytes)?;
        let asset = ImageAsset {
            id: id.clone(),
            media,
            width,
            height,
            origin,
        };
        match self.claim(&id, Entry::Image(asset))? {
            Entry::Image(a) => Ok(a),
            other => Err(StoreError::WrongKind {
                id,
                found: other.kind(),
                wanted: "image",
            }),
        }
    }

    /// Store a mask for a stored image. Any nonzero luma value marks a masked pixel.
    pub fn put_mask(&self, mask: &GrayImage, parent_image_id: &str) -> Result<MaskAsset, StoreError> {
        self.image(parent_image_id)
            .map_err(|_| StoreError::MissingParent(parent_image_id.to_string()))?;
        let nonzero = mask.pixels().filter(|p| p.0[0] != 0).count() as u64;
        if nonzero == 0 {
            return Err(StoreError::EmptyMask);
        }
        let bytes = encode_mask(mask);
        // masks of different parents can share pixels; key the id by parent too
        let mut keyed = bytes.clone();
        keyed.extend_from_slice(parent_image_id.as_bytes());
        let id = content_hash(&keyed);
        self.write_payload(&self.payload_path(&id, MediaType::Png), &bytes)?;
        let asset = MaskAsset {
            id: id.clone(),
            parent_image_id: parent_image_id.to_string(),
            width: mask.width(),
            height: mask.height(),
            nonzero_pixel_count: nonzero,
        };
        match self.claim(&id, Entry::Mask(asset))? {
            Entry::Mask(a) => Ok(a),
            other => Err(StoreError::WrongKind {
                id,
                found: other.kind(),
                wanted: "mask",
            }),
        }
    }

    pub fn image(&self, id: &str) -> Result<ImageAsset, StoreError> {
        match self.entry(id)? {
            Entry::Image(a) => Ok(a),
            other => Err(StoreError::WrongKind {
                id: id.to_string(),
                found: other.kind(),
                wanted: "image",
            }),
        }
    }

    pub fn mask(&self, id: &str) -> Result<MaskAsset, StoreError> {
        match self.entry(id)? {
            Entry::Mask(a) => Ok(a),
            other => Err(StoreError::WrongKind {
                id: id.to_string(),
                found: other.kind(),
                wanted: "mask",
            }),
        }
    }

    pub fn image_bytes(&self, asset: &ImageAsset) -> Result<Vec<u8>, StoreError> {
        let path = self.payload_path(&asset.id, asset.media);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn mask_image(&self, asset: &MaskAsset) -> Result<GrayImage, StoreError> {
        let path = self.payload_path(&asset.id, MediaType::Png);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        image::load_from_memory_with_format(&bytes, ImageFormat::Png)
            .map(|img| img.to_luma8())
            .map_err(|e| StoreError::Decode(e.to_string()))
    }

    /// Walk parent links back to the original image; returns the chain, newest first.
    pub fn lineage(&self, id: &str) -> Result<Vec<ImageAsset>, StoreError> {
        let mut chain = Vec::new();
        let mut cur = self.image(id)?;
        loop {
            let parent = cur.parent_id().map(str::to_string);
            chain.push(cur);
            match parent {
                None => return Ok(chain),
                Some(p) => {
                    if chain.len() > 64 || chain.iter().any(|a| a.id == p) {
                        return Err(StoreError::BrokenLineage(id.to_string()));
                    }
                    cur = self
                        .image(&p)
                        .map_err(|_| StoreError::BrokenLineage(id.to_string()))?;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dataset, PerturbationMethod};
    use crate::synth;

    fn original() -> ImageOrigin {
        ImageOrigin::Original {
            dataset: Dataset::Custom,
            source_id: "1".into(),
        }
    }

    #[test]
    fn put_is_idempotent_and_first_writer_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let png = synth::solid_png(8, 6, [1, 2, 3]);
        let a = store.put_image(&png, original()).unwrap();
        let b = store
            .put_image(
                &png,
                ImageOrigin::Original {
                    dataset: Dataset::Webqa,
                    source_id: "other".into(),
                },
            )
            .unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width, a.height, a.media), (8, 6, MediaType::Png));
        let path = store.payload_path(&a.id, MediaType::Png);
        assert!(path.starts_with(dir.path().join(&a.id[..2])));
        assert_eq!(store.image_bytes(&a).unwrap(), png);
    }

    #[test]
    fn perturbed_needs_parent() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let png = synth::solid_png(4, 4, [9, 9, 9]);
        let err = store
            .put_image(
                &png,
                ImageOrigin::Perturbed {
                    parent_image_id: "nope".into(),
                    method: PerturbationMethod::ObjectRemoval,
                },
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::MissingParent(_)));
    }

    #[test]
    fn lineage_terminates_at_original() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let a = store.put_image(&synth::solid_png(4, 4, [1, 1, 1]), original()).unwrap();
        let b = store
            .put_image(
                &synth::solid_png(4, 4, [2, 2, 2]),
                ImageOrigin::Perturbed {
                    parent_image_id: a.id.clone(),
                    method: PerturbationMethod::ObjectRemoval,
                },
            )
            .unwrap();
        let chain = store.lineage(&b.id).unwrap();
        assert_eq!(chain.len(), 2);
        assert_eq!(chain[1].id, a.id);
    }

    #[test]
    fn masks_count_nonzero_and_reject_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::open(dir.path()).unwrap();
        let a = store.put_image(&synth::solid_png(100, 100, [1, 1, 1]), original()).unwrap();
        let mask = synth::rect_mask(100, 100, 10, 10, 10, 10);
        let m = store.put_mask(&mask, &a.id).unwrap();
        assert_eq!(m.nonzero_pixel_count, 100);
        assert_eq!(store.mask_image(&m).unwrap(), mask);
        let empty = GrayImage::new(100, 100);
        assert!(matches!(store.put_mask(&empty, &a.id), Err(StoreError::EmptyMask)));
    }

    #[test]
    fn rejects_garbage_bytes() {
        assert!(probe(b"not an image").is_err());
    }
}
