use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textmask_tensor::{Adam, AdamConfig, Conv2d, Init, Linear, ParamStore, Scalar, Tape, Tensor, Var, LEAKY_SLOPE};

use super::metrics::{Classifier, Embedder};
use crate::data::{area_downsample, Dataset, DatasetMeta};
use crate::model::{Checkpoint, Model};
use crate::Error;

pub const CLASSIFIER_FORMAT: &str = "textmask-classifier-1";

/// Training schedule of the attribute classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

/// Small CNN over `color shape` classes of the synthetic dataset.
#[derive(Clone, Debug)]
pub struct AttributeClassifier<T> {
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
    head: Linear,
    side: usize,
    labels: Vec<String>,
}

fn class_labels(meta: &DatasetMeta) -> Vec<String> {
    let mut labels = Vec::new();
    for c in &meta.palette {
        for s in &meta.shapes {
            labels.push(format!("{} {}", c.name, s.name()));
        }
    }
    labels
}

impl<T: Scalar> AttributeClassifier<T> {
    /// Untrained network for `labels` over `side x side` inputs.
    pub fn new(labels: Vec<String>, side: usize, seed: u64) -> Result<Self, Error> {
        if labels.is_empty() {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        if side < 8 || !side.is_power_of_two() {
            return Err(Error::Config(format!("classifier side {side} must be a power of two >= 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [3, 16, 32, 32];
        let convs: Vec<Conv2d> = (0..3)
            .map(|i| Conv2d::down4(&mut store, &format!("classifier/conv{i}"), widths[i], widths[i + 1], &mut rng))
            .collect();
        let s = side / 8;
        let head = Linear::new(&mut store, "classifier/head", 32 * s * s, labels.len(), Init::FanIn, &mut rng);
        Ok(Self { store, convs, head, side, labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Index of `color shape` in the label list.
    pub fn class_of(&self, color: &str, shape: &str) -> Option<usize> {
        let key = format!("{color} {shape}");
        self.labels.iter().position(|l| *l == key)
    }

    fn logits(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, h);
            h = tape.leaky_relu(h, T::lit(LEAKY_SLOPE));
        }
        let n = tape.shape(h)[0];
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat]);
        self.head.forward(tape, h)
    }

    fn prepare(&self, images: &Tensor<T>) -> Result<Tensor<T>, Error> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!("classifier expects [N, 3, H, W], got {s:?}")));
        }
        if s[2] == self.side {
            return Ok(images.clone());
        }
        if s[2] > self.side {
            return area_downsample(images, self.side);
        }
        let mut t = images.clone();
        while t.shape()[2] < self.side {
            let mut tape = Tape::frozen(&self.store);
            let v = tape.constant(t);
            let u = tape.upsample2(v);
            t = tape.value(u).clone();
        }
        Ok(t)
    }

    /// Trains on every item with attributes. Deterministic given the
    /// schedule's seed.
    pub fn train(dataset: &Dataset, meta: &DatasetMeta, schedule: &ClassifierTraining) -> Result<Self, Error> {
        if !dataset.has_attributes() {
            return Err(Error::Input("classifier training needs attributes.jsonl".into()));
        }
        let mut clf = Self::new(class_labels(meta), dataset.side, schedule.seed)?;
        let targets: Vec<usize> = dataset
            .items
            .iter()
            .map(|item| {
                let a = item.attributes.as_ref().expect("checked above");
                clf.class_of(&a.color, &a.shape)
                    .ok_or_else(|| Error::Dataset(format!("{}: {} {} not in meta.json", a.id, a.color, a.shape)))
            })
            .collect::<Result<_, _>>()?;
        let images: Vec<Tensor<T>> = (0..dataset.len()).map(|i| dataset.image(i)).collect();
        let ids = clf.store.ids().collect();
        let mut opt = Adam::new(&clf.store, ids, AdamConfig { lr: schedule.lr, ..AdamConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0xC1A5);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for epoch in 0..schedule.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(schedule.batch_size.max(1)) {
                let x = Tensor::stack0(&chunk.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
                let y: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let grads = {
                    let mut tape = Tape::new(&clf.store, |_| true);
                    let xv = tape.constant(x);
                    let logits = clf.logits(&mut tape, xv);
                    let loss = tape.softmax_cross_entropy(logits, &y);
                    total += tape.value(loss).item().as_f64() * chunk.len() as f64;
                    tape.backward(loss)
                };
                opt.step(&mut clf.store, &grads);
            }
            log::debug!("classifier epoch {} loss {:.4}", epoch + 1, total / dataset.len() as f64);
        }
        Ok(clf)
    }

    /// Fraction of items whose arg-max class matches their attributes.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64, Error> {
        let mut correct = 0;
        for (start, chunk) in dataset.items.chunks(64).enumerate() {
            let x: Vec<Tensor<T>> = (0..chunk.len()).map(|i| dataset.image(start * 64 + i)).collect();
            let probs = self.predict(&Tensor::stack0(&x)?)?;
            for (item, p) in chunk.iter().zip(probs) {
                let a = item.attributes.as_ref().ok_or_else(|| Error::Input("missing attributes".into()))?;
                if Some(argmax(&p)) == self.class_of(&a.color, &a.shape) {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let tensors = self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), CLASSIFIER_FORMAT.to_string());
        metadata.insert("labels".to_string(), self.labels.join("\n"));
        metadata.insert("side".to_string(), self.side.to_string());
        Checkpoint { tensors, metadata }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, Error> {
        if ckpt.metadata.get("format").map(String::as_str) != Some(CLASSIFIER_FORMAT) {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let labels = ckpt.meta("labels")?.lines().map(str::to_string).collect();
        let side = ckpt.meta("side")?.parse().map_err(|_| Error::Checkpoint("bad classifier side".into()))?;
        let mut clf = Self::new(labels, side, 0)?;
        let names: Vec<String> = clf.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = ckpt.tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            clf.store.assign(&name, t.clone())?;
        }
        Ok(clf)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Loads `path` if present, otherwise trains and writes it there.
    pub fn load_or_train(
        path: &Path,
        dataset: &Dataset,
        meta: &DatasetMeta,
        schedule: &ClassifierTraining,
    ) -> Result<Self, Error> {
        if path.is_file() {
            let clf = Self::load(path)?;
            if clf.labels == class_labels(meta) && clf.side == dataset.side {
                return Ok(clf);
            }
            log::warn!("{} does not match the dataset; retraining", path.display());
        }
        let clf = Self::train(dataset, meta, schedule)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        clf.save(path)?;
        Ok(clf)
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, v)| if *v > p[best] { i } else { best })
}

impl<T: Scalar> Classifier<T> for AttributeClassifier<T> {
    fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn predict(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>, Error> {
        let x = self.prepare(images)?;
        let mut tape = Tape::frozen(&self.store);
        let xv = tape.constant(x);
        let logits = self.logits(&mut tape, xv);
        let l = tape.value(logits);
        let c = self.labels.len();
        Ok(l.data()
            .chunks(c)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect())
    }
}

/// Embeds captions with the model's text encoder and images with its
/// image encoder.
pub struct ModelEmbedder<'a, T> {
    pub model: &'a Model<T>,
}

impl<T: Scalar> Embedder<T> for ModelEmbedder<'_, T> {
    fn embed_images(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>, Error> {
        let finest = self.model.plan().finest();
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != finest {
            return Err(Error::Input(format!("image encoder expects [N, 3, {finest}, {finest}], got {s:?}")));
        }
        Ok(rows(&self.model.image_features(images)))
    }

    fn embed_captions(&self, captions: &[String]) -> Result<Vec<Vec<f64>>, Error> {
        let ids = captions.iter().map(|c| Ok(self.model.caption(c)?.ids)).collect::<Result<Vec<_>, Error>>()?;
        Ok(rows(&self.model.sentence_features(&ids)))
    }
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_sum_to_one() {
        let clf = AttributeClassifier::<f64>::new(vec!["a".into(), "b".into(), "c".into()], 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for side in [8, 16, 32] {
            let x = Tensor::randn(&[4, 3, side, side], 1.0, &mut rng);
            for p in clf.predict(&x).unwrap() {
                assert_eq!(p.len(), 3);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let clf = AttributeClassifier::<f32>::new(vec!["x y".into(), "z w".into()], 8, 5).unwrap();
        let back = AttributeClassifier::<f32>::from_checkpoint(&clf.to_checkpoint()).unwrap();
        let x = Tensor::full(&[1, 3, 8, 8], 0.3f32);
        assert_eq!(clf.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert_eq!(back.class_of("z", "w"), Some(1));
    }
}
