//! The full parameter set and its checkpoint archive.
//!
//! A checkpoint is one safetensors file. Parameter arrays are keyed by
//! their `module/stage/parameter` path, optimiser moments by
//! `optim/<group>/<m|v>/<parameter path>`. String metadata holds the model
//! configuration (`model`), the vocabulary (`vocab`, one token per line),
//! and for training checkpoints the training state (`train`).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use textmask_tensor::{ParamStore, Scalar, Tape, Tensor};

use crate::mask::{FusionKind, SegmentationMask};
use crate::netstack::{DiscriminatorStage, Generator, ImageEncoder, StagePlan};
use crate::text::{Caption, CaptionOptions, LexiconTagger, TextEncoder, Vocabulary};
use crate::Error;

pub const CHECKPOINT_FORMAT: &str = "textmask-checkpoint-1";

/// Architecture choices that fix the parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub plan: StagePlan,
    pub fusion: FusionKind,
    pub embed_dim: usize,
    /// Per direction; sentence features are twice this wide.
    pub text_hidden: usize,
    pub image_encoder_width: usize,
    pub caption: CaptionOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            plan: StagePlan::desk(),
            fusion: FusionKind::Acm,
            embed_dim: 32,
            text_hidden: 16,
            image_encoder_width: 16,
            caption: CaptionOptions::default(),
        }
    }
}

/// Text encoder, image encoder, generator pyramid, and one discriminator
/// per stage, sharing a single parameter store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub text: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub generator: Generator,
    pub discriminators: Vec<DiscriminatorStage>,
}

pub const TEXT_PREFIX: &str = "text/";
pub const IMAGE_ENCODER_PREFIX: &str = "image_encoder/";
pub const GENERATOR_PREFIX: &str = "generator/";

pub fn discriminator_prefix(stage: usize) -> String {
    format!("discriminator/stage{stage}/")
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, Error> {
        config.plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, "text", vocab.len(), config.embed_dim, config.text_hidden, &mut rng);
        let dim = text.dim();
        let image_encoder = ImageEncoder::new(
            &mut store,
            "image_encoder",
            config.plan.finest(),
            config.image_encoder_width,
            dim,
            &mut rng,
        );
        let generator = Generator::new(&mut store, "generator", &config.plan, dim, config.fusion, &mut rng);
        let discriminators = config
            .plan
            .stages
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let p = discriminator_prefix(i + 1);
                DiscriminatorStage::new(&mut store, p.trim_end_matches('/'), spec, dim, &mut rng)
            })
            .collect();
        Ok(Self { config, vocab, store, text, image_encoder, generator, discriminators })
    }

    pub fn plan(&self) -> &StagePlan {
        &self.config.plan
    }

    pub fn text_dim(&self) -> usize {
        self.text.dim()
    }

    /// Processes a raw caption with the bundled tagger and this model's
    /// caption options, substituting the placeholder for empty results.
    pub fn caption(&self, text: &str) -> Result<Caption, Error> {
        let tagger = LexiconTagger::bundled();
        Ok(Caption::process(text, &tagger, &self.vocab, &self.config.caption)?.or_placeholder())
    }

    /// `[n, noise_dim]` standard normal draws.
    pub fn noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        Tensor::randn(&[n, self.plan().noise_dim], 1.0, rng)
    }

    /// Per-stage fusion masks `[N, 1, r_i/2, r_i/2]` from finest masks.
    pub fn fusion_masks(&self, masks: &[SegmentationMask]) -> Result<Vec<Tensor<T>>, Error> {
        let plan = self.plan();
        (0..plan.k())
            .map(|i| {
                let r = plan.fusion_resolution(i);
                let mut data = Vec::with_capacity(masks.len() * r * r);
                for m in masks {
                    data.extend(m.downsample(r)?.data().iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
                }
                Ok(Tensor::new(&[masks.len(), 1, r, r], data)?)
            })
            .collect()
    }

    /// Sentence features `[N, D]` without gradient tracking.
    pub fn sentence_features(&self, caption_ids: &[Vec<usize>]) -> Tensor<T> {
        self.text.sentences(&self.store, caption_ids)
    }

    /// Image-encoder embeddings `[N, D]` of finest-resolution images.
    pub fn image_features(&self, images: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::frozen(&self.store);
        let x = tape.constant(images.clone());
        let e = self.image_encoder.forward(&mut tape, x);
        tape.value(e).clone()
    }

    /// Generated images per stage, `[N, 3, r_i, r_i]`.
    pub fn generate_with_features(
        &self,
        noise: &Tensor<T>,
        sentences: &Tensor<T>,
        fusion_masks: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>, Error> {
        let mut tape = Tape::frozen(&self.store);
        let z = tape.constant(noise.clone());
        let s = tape.constant(sentences.clone());
        let m: Vec<_> = fusion_masks.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.generator.forward(&mut tape, z, s, &m)?;
        Ok(out.images.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Generated images per stage for captions and finest-resolution masks.
    pub fn generate(
        &self,
        noise: &Tensor<T>,
        caption_ids: &[Vec<usize>],
        masks: &[SegmentationMask],
    ) -> Result<Vec<Tensor<T>>, Error> {
        if caption_ids.len() != masks.len() || noise.shape()[0] != masks.len() {
            return Err(Error::Input(format!(
                "{} noise rows, {} captions and {} masks",
                noise.shape()[0],
                caption_ids.len(),
                masks.len()
            )));
        }
        if let Some(&bad) = caption_ids.iter().flatten().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        if caption_ids.iter().any(Vec::is_empty) {
            return Err(Error::Caption("empty caption".into()));
        }
        let s = self.sentence_features(caption_ids);
        let m = self.fusion_masks(masks)?;
        self.generate_with_features(noise, &s, &m)
    }

    /// Parameters and model metadata.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let tensors = self.store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect();
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        metadata.insert("model".to_string(), serde_json::to_string(&self.config).expect("config serializes"));
        metadata.insert("vocab".to_string(), self.vocab.corpus_tokens().join("\n"));
        Checkpoint { tensors, metadata }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, Error> {
        if ckpt.metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_str(ckpt.meta("model")?)?;
        let vocab = Vocabulary::parse(ckpt.meta("vocab")?)?;
        let mut model = Self::new(config, vocab, 0)?;
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = ckpt.tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            model.store.assign(&name, t.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Named arrays plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub metadata: BTreeMap<String, String>,
}

fn to_bytes<T: Scalar>(t: &Tensor<T>) -> (Dtype, Vec<u8>) {
    if T::DTYPE == "f32" {
        (Dtype::F32, t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect())
    } else {
        (Dtype::F64, t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect())
    }
}

fn from_bytes<T: Scalar>(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>, Error> {
    let data: Vec<T> = match dtype {
        Dtype::F32 => {
            bytes.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect()
        }
        Dtype::F64 => {
            bytes.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect()
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Tensor::new(shape, data)?)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn meta(&self, key: &str) -> Result<&str, Error> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata entry {key}")))
    }

    /// Writes to a sibling temporary file and renames it into place; a
    /// failed write leaves no partial file behind.
    pub fn write(&self, path: &Path) -> Result<(), Error> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let (dtype, bytes) = to_bytes(t);
                (k.clone(), dtype, t.shape().to_vec(), bytes)
            })
            .collect();
        let views = encoded
            .iter()
            .map(|(k, dtype, shape, bytes)| {
                safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes).map(|v| (k.as_str(), v))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        let tmp = temp_path(path);
        let result = safetensors::serialize_to_file(views, Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(e.to_string()))
            .and_then(|()| fs::rename(&tmp, path).map_err(Error::from));
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    pub fn read(path: &Path) -> Result<Self, Error> {
        let bytes = fs::read(path)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = from_bytes(view.dtype(), view.shape(), view.data())?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors, metadata })
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> Model<f32> {
        let vocab = Vocabulary::from_tokens(vec!["red".into(), "circle".into()]);
        Model::new(ModelConfig::default(), vocab, 3).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = small_model();
        model.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.vocab, model.vocab);
        for ((_, n1, t1), (_, n2, t2)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert!(!dir.path().join("m.safetensors.partial").exists());
    }

    #[test]
    fn parameter_keys_are_paths() {
        let model = small_model();
        for (_, name, _) in model.store.iter() {
            assert!(name.split('/').count() >= 2, "{name}");
        }
        assert!(model.store.id("discriminator/stage1/uncond/weight").is_some());
        assert!(model.store.id("generator/stage2/acm/shared/weight").is_some());
    }

    #[test]
    fn generation_shapes_and_range() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = model.noise(2, &mut rng);
        let masks = vec![SegmentationMask::empty(32), SegmentationMask::full(32)];
        let ids = vec![vec![2, 3], vec![3]];
        let imgs = model.generate(&noise, &ids, &masks).unwrap();
        let sides: Vec<usize> = imgs.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sides, [8, 16, 32]);
        assert!(imgs.iter().all(|t| t.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(imgs, model.generate(&noise, &ids, &masks).unwrap());
        assert!(model.generate(&noise, &[vec![2], vec![4]], &masks).is_err());
    }
}
