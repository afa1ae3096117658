//! Datasets on disk, batching, and image/mask pyramids.
//!
//! Layout: `root/images/<id>.png`, `root/masks/<id>.png`,
//! `root/captions.jsonl` (`{"id": .., "captions": [..]}` per line), and for
//! synthetic data `root/attributes.jsonl` and `root/meta.json`.

pub mod shapes;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Scalar, Tensor};

use crate::mask::SegmentationMask;
use crate::text::{Caption, CaptionOptions, PosTagger, Vocabulary};
use crate::Error;

pub use shapes::{generate_shapeworld, DatasetMeta, GeneratedSummary, NamedColor, Shape, ShapeWorldConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground truth of a synthetic sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub id: String,
    pub color: String,
    pub shape: String,
    pub background: String,
    pub split: Split,
}

/// Paths and captions of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub captions: Vec<String>,
}

fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

/// Indexes a directory in the documented layout. Images lacking a mask or a
/// captions entry are skipped with a warning.
pub fn ingest_coco_style(root: &Path) -> Result<Vec<IndexEntry>, Error> {
    let text = fs::read_to_string(root.join("captions.jsonl"))
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", root.join("captions.jsonl").display())))?;
    let mut captions: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord =
            serde_json::from_str(line).map_err(|e| Error::Dataset(format!("captions.jsonl line {}: {e}", n + 1)))?;
        captions.entry(rec.id).or_default().extend(rec.captions);
    }

    let mut ids: Vec<String> = Vec::new();
    if let Ok(rd) = fs::read_dir(root.join("images")) {
        for entry in rd {
            let path = entry?.path();
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    ids.dedup();

    let mut index = Vec::new();
    for id in ids {
        let Some(image) = find_with_stem(&root.join("images"), &id) else { continue };
        let Some(mask) = find_with_stem(&root.join("masks"), &id) else {
            log::warn!("skipping {id}: no mask");
            continue;
        };
        match captions.get(&id) {
            Some(c) if !c.is_empty() => index.push(IndexEntry { id, image, mask, captions: c.clone() }),
            _ => log::warn!("skipping {id}: no captions"),
        }
    }
    if index.is_empty() {
        return Err(Error::Dataset(format!("no usable samples under {}", root.display())));
    }
    Ok(index)
}

/// Centre-crops to a square and resizes to `side`.
pub fn load_rgb(path: &Path, side: usize) -> Result<RgbImage, Error> {
    let img = image::open(path)?.to_rgb8();
    let s = img.width().min(img.height());
    let img = image::imageops::crop_imm(&img, (img.width() - s) / 2, (img.height() - s) / 2, s, s).to_image();
    if img.width() as usize == side {
        Ok(img)
    } else {
        Ok(image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle))
    }
}

/// `[3, side, side]` in `[-1, 1]`.
pub fn rgb_to_tensor<T: Scalar>(rgb: &[u8], side: usize) -> Tensor<T> {
    let plane = side * side;
    let mut data = vec![T::zero(); 3 * plane];
    for (p, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = T::lit(px[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::new(&[3, side, side], data).expect("rgb buffer matches side")
}

/// Inverse of [`rgb_to_tensor`] for one `[3, s, s]` or `[1, 3, s, s]`
/// image, clamping.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let side = *t.shape().last().expect("image tensor");
    let plane = side * side;
    RgbImage::from_fn(side as u32, side as u32, |x, y| {
        let p = y as usize * side + x as usize;
        let px = |c: usize| ((t.data()[c * plane + p].as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Averages `factor x factor` blocks of a `[N, C, H, W]` tensor.
pub fn area_downsample<T: Scalar>(x: &Tensor<T>, side: usize) -> Result<Tensor<T>, Error> {
    let s = x.shape();
    if s.len() != 4 || side == 0 || !s[2].is_multiple_of(side) || s[3] != s[2] {
        return Err(Error::Input(format!("cannot area-downsample {s:?} to {side}")));
    }
    let f = s[2] / side;
    if f == 1 {
        return Ok(x.clone());
    }
    let (n, c, h) = (s[0], s[1], s[2]);
    let norm = T::lit((f * f) as f64);
    let mut out = vec![T::zero(); n * c * side * side];
    for nc in 0..n * c {
        let src = &x.data()[nc * h * h..(nc + 1) * h * h];
        let dst = &mut out[nc * side * side..(nc + 1) * side * side];
        for y in 0..side {
            for xx in 0..side {
                let mut acc = T::zero();
                for dy in 0..f {
                    for dx in 0..f {
                        acc += src[(y * f + dy) * h + xx * f + dx];
                    }
                }
                dst[y * side + xx] = acc / norm;
            }
        }
    }
    Ok(Tensor::new(&[n, c, side, side], out)?)
}

/// One image with its mask, captions and (for synthetic data) attributes.
#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub id: String,
    /// Interleaved RGB, `side * side * 3` bytes.
    pub rgb: Vec<u8>,
    pub mask: SegmentationMask,
    pub captions: Vec<String>,
    pub attributes: Option<Attributes>,
}

/// A fully loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub side: usize,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    /// Loads every indexed sample, resized to `side`. Attributes are
    /// attached when `attributes.jsonl` exists.
    pub fn load(root: &Path, side: usize) -> Result<Self, Error> {
        let index = ingest_coco_style(root)?;
        let attributes = load_attributes(root)?;
        let mut items = Vec::with_capacity(index.len());
        for e in index {
            let rgb = load_rgb(&e.image, side)?.into_raw();
            let mask = SegmentationMask::load(&e.mask, side)?;
            let attributes = attributes.as_ref().and_then(|a| a.get(&e.id).cloned());
            items.push(DatasetItem { id: e.id, rgb, mask, captions: e.captions, attributes });
        }
        Ok(Self { root: root.to_path_buf(), side, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn has_attributes(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|i| i.attributes.is_some())
    }

    /// Items of one split. Items without attributes count as training data.
    pub fn split(&self, split: Split) -> Self {
        let items = self
            .items
            .iter()
            .filter(|i| i.attributes.as_ref().map_or(Split::Train, |a| a.split) == split)
            .cloned()
            .collect();
        Self { root: self.root.clone(), side: self.side, items }
    }

    pub fn image<T: Scalar>(&self, idx: usize) -> Tensor<T> {
        rgb_to_tensor(&self.items[idx].rgb, self.side)
    }

    /// Processes every caption of every item. Captions that filter to
    /// nothing become the placeholder.
    pub fn prepare_captions(
        &self,
        tagger: &dyn PosTagger,
        vocab: &Vocabulary,
        options: &CaptionOptions,
    ) -> Result<Vec<Vec<Caption>>, Error> {
        self.items
            .iter()
            .map(|item| {
                item.captions
                    .iter()
                    .map(|c| Caption::process(c, tagger, vocab, options).map(Caption::or_placeholder))
                    .collect()
            })
            .collect()
    }

    /// Vocabulary over the filtered captions of this dataset.
    pub fn build_vocabulary(&self, tagger: &dyn PosTagger, options: &CaptionOptions) -> Result<Vocabulary, Error> {
        let mut corpus = Vec::new();
        for item in &self.items {
            for c in &item.captions {
                corpus.push(crate::text::preprocess(c, tagger, options)?.2);
            }
        }
        Ok(Vocabulary::build(&corpus))
    }

    /// One sample with its real-image pyramid.
    pub fn sample<T: Scalar>(&self, idx: usize, caption: Caption, resolutions: &[usize]) -> Result<Sample<T>, Error> {
        let img = self.image::<T>(idx).reshape(&[1, 3, self.side, self.side])?;
        let pyramid = resolutions
            .iter()
            .map(|&r| area_downsample(&img, r).and_then(|t| Ok(t.reshape(&[3, r, r])?)))
            .collect::<Result<_, _>>()?;
        Ok(Sample { id: self.items[idx].id.clone(), pyramid, mask: self.items[idx].mask.clone(), caption })
    }

    /// Stacks the planned items into stage tensors.
    pub fn batch<T: Scalar>(
        &self,
        plan: &BatchPlan,
        captions: &[Vec<Caption>],
        resolutions: &[usize],
        mask_resolutions: &[usize],
    ) -> Result<Batch<T>, Error> {
        let n = plan.indices.len();
        let finest: Vec<Tensor<T>> = plan.indices.iter().map(|&i| self.image(i)).collect();
        let finest = Tensor::stack0(&finest)?;
        let images = resolutions.iter().map(|&r| area_downsample(&finest, r)).collect::<Result<_, _>>()?;
        let mut masks = BTreeMap::new();
        for &r in mask_resolutions {
            let mut data = Vec::with_capacity(n * r * r);
            for &i in &plan.indices {
                let m = self.items[i].mask.downsample(r)?;
                data.extend(m.data().iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
            }
            masks.insert(r, Tensor::new(&[n, 1, r, r], data)?);
        }
        let caption_ids =
            plan.indices.iter().zip(&plan.caption_choice).map(|(&i, &c)| captions[i][c].ids.clone()).collect();
        Ok(Batch { indices: plan.indices.clone(), images, masks, caption_ids })
    }
}

fn load_attributes(root: &Path) -> Result<Option<HashMap<String, Attributes>>, Error> {
    let path = root.join("attributes.jsonl");
    if !path.is_file() {
        return Ok(None);
    }
    let mut map = HashMap::new();
    for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: Attributes =
            serde_json::from_str(line).map_err(|e| Error::Dataset(format!("attributes.jsonl line {}: {e}", n + 1)))?;
        map.insert(a.id.clone(), a);
    }
    Ok(Some(map))
}

/// One training sample: the real image at every stage resolution.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    /// `[3, r_i, r_i]` per stage.
    pub pyramid: Vec<Tensor<T>>,
    pub mask: SegmentationMask,
    pub caption: Caption,
}

/// Which items form one batch and which caption each uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub caption_choice: Vec<usize>,
}

/// Stacked batch tensors.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    /// `[N, 3, r_i, r_i]` per stage, coarse to fine.
    pub images: Vec<Tensor<T>>,
    /// `[N, 1, r, r]` keyed by side.
    pub masks: BTreeMap<usize, Tensor<T>>,
    pub caption_ids: Vec<Vec<usize>>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seed of the stream for one `(seed, epoch)` pair.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Batches of one epoch: a seeded shuffle of all items, cut into batches
/// of `batch_size` (the last may be short), with one caption drawn per item.
pub fn batch_stream(
    caption_counts: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<BatchPlan>, Error> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if caption_counts.contains(&0) {
        return Err(Error::Dataset("every sample needs at least one caption".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    let mut order: Vec<usize> = (0..caption_counts.len()).collect();
    order.shuffle(&mut rng);
    let choice: Vec<usize> = order.iter().map(|&i| rng.random_range(0..caption_counts[i])).collect();
    Ok(order
        .chunks(batch_size)
        .zip(choice.chunks(batch_size))
        .map(|(i, c)| BatchPlan { indices: i.to_vec(), caption_choice: c.to_vec() })
        .collect())
}
