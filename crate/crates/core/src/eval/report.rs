use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Scalar, Tensor};

use super::classifier::ModelEmbedder;
use super::metrics::{inception_score, mean_std, r_precision_hits, Classifier, Embedder};
use super::probes::{controllability_probe, disentanglement_probe, ControllabilityResult, DisentanglementResult};
use crate::data::{Dataset, DatasetMeta, Split};
use crate::model::{Model, ModelConfig};
use crate::train::{fit, TrainConfig};
use crate::Error;

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub is_splits: usize,
    pub pool: usize,
    /// Splits of the generated set over which R-precision spread is taken.
    pub r_precision_splits: usize,
    pub disentanglement_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, is_splits: 2, pool: 100, r_precision_splits: 2, disentanglement_pairs: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl From<(f64, f64)> for MeanStd {
    fn from((mean, std): (f64, f64)) -> Self {
        Self { mean, std }
    }
}

/// Settings that produced a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub eval: EvalConfig,
    pub model: ModelConfig,
    pub checkpoint: Option<PathBuf>,
    pub dataset: PathBuf,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inception_score: MeanStd,
    /// Percentage.
    pub r_precision: MeanStd,
    pub controllability: ControllabilityResult,
    pub disentanglement: DisentanglementResult,
    pub config: ConfigEcho,
}

impl EvalReport {
    pub fn check(&self) -> Result<(), Error> {
        let values = [
            self.inception_score.mean,
            self.inception_score.std,
            self.r_precision.mean,
            self.r_precision.std,
            self.controllability.hit_rate,
            self.disentanglement.background_change,
            self.disentanglement.foreground_change,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("evaluation produced a non-finite value".into()));
        }
        for p in [self.r_precision.mean, self.controllability.hit_rate] {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Input(format!("percentage {p} out of range")));
            }
        }
        Ok(())
    }
}

/// Generates the held-out split once from its masks and first captions.
/// Returns the finest images and the captions used.
pub fn generate_test_set<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    seed: u64,
) -> Result<(Vec<Tensor<T>>, Vec<String>), Error> {
    let mut test = dataset.split(Split::Test);
    if test.is_empty() {
        test = dataset.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E4E);
    let mut images = Vec::with_capacity(test.len());
    let mut captions = Vec::with_capacity(test.len());
    for chunk in test.items.chunks(64) {
        let texts: Vec<String> = chunk.iter().map(|i| i.captions[0].clone()).collect();
        let ids = texts.iter().map(|t| Ok(model.caption(t)?.ids)).collect::<Result<Vec<_>, Error>>()?;
        let masks: Vec<_> = chunk.iter().map(|i| i.mask.clone()).collect();
        let noise = model.noise(chunk.len(), &mut rng);
        let out = model.generate(&noise, &ids, &masks)?;
        let finest = out.last().expect("at least one stage");
        images.extend((0..chunk.len()).map(|n| finest.select0(n)));
        captions.extend(texts);
    }
    Ok((images, captions))
}

/// Every distinct caption of the dataset, in first-seen order.
pub fn caption_pool(dataset: &Dataset) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut pool = Vec::new();
    for item in &dataset.items {
        for c in &item.captions {
            if seen.insert(c.as_str()) {
                pool.push(c.clone());
            }
        }
    }
    pool
}

/// Inception score, R-precision and both probes for one model.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    meta: &DatasetMeta,
    classifier: &dyn Classifier<T>,
    config: &EvalConfig,
    checkpoint: Option<&Path>,
) -> Result<EvalReport, Error> {
    let (images, captions) = generate_test_set(model, dataset, config.seed)?;
    let mut probs = Vec::with_capacity(images.len());
    let mut embedded = Vec::with_capacity(images.len());
    let embedder = ModelEmbedder { model };
    for chunk in images.chunks(64) {
        let batch = Tensor::stack0(chunk)?;
        probs.extend(classifier.predict(&batch)?);
        embedded.extend(embedder.embed_images(&batch)?);
    }
    let is = inception_score(&probs, config.is_splits)?;

    let pool = caption_pool(dataset);
    let truth: Vec<usize> =
        captions.iter().map(|c| pool.iter().position(|p| p == c).expect("caption comes from the dataset")).collect();
    let pool_vectors = embedder.embed_captions(&pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4B50);
    let hits = r_precision_hits(&embedded, &truth, &pool_vectors, config.pool, &mut rng)?;
    let splits = config.r_precision_splits.clamp(1, hits.len().max(1));
    let rates: Vec<f64> = (0..splits)
        .map(|s| {
            let part = &hits[s * hits.len() / splits..(s + 1) * hits.len() / splits];
            100.0 * part.iter().filter(|&&h| h).count() as f64 / part.len().max(1) as f64
        })
        .collect();

    let controllability = controllability_probe(model, dataset, meta, config.seed)?;
    let disentanglement = disentanglement_probe(model, dataset, config.disentanglement_pairs, config.seed)?;
    let report = EvalReport {
        inception_score: is.into(),
        r_precision: mean_std(&rates).into(),
        controllability,
        disentanglement,
        config: ConfigEcho {
            eval: config.clone(),
            model: model.config.clone(),
            checkpoint: checkpoint.map(Path::to_path_buf),
            dataset: dataset.root.clone(),
            images: images.len(),
        },
    };
    report.check()?;
    Ok(report)
}

pub const ABLATION_ROWS: [&str; 5] = ["full", "w/o POS", "w/ Concat.", "w/o Refined", "w/o SL"];

/// The full configuration and its four ablations, each writing into its
/// own subdirectory of `base.out_dir`.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let dirs = ["full", "no_pos", "concat", "no_refined", "no_sl"];
    ABLATION_ROWS
        .iter()
        .zip(dirs)
        .enumerate()
        .map(|(i, (&name, dir))| {
            let mut c = base.clone();
            match i {
                1 => c.use_pos = false,
                2 => c.use_acm = false,
                3 => c.use_refined = false,
                4 => c.use_structure_loss = false,
                _ => {}
            }
            c.out_dir = base.out_dir.join(dir);
            (name, c)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Trains and evaluates every ablation row in order.
pub fn run_ablation<T: Scalar>(
    base: &TrainConfig,
    dataset: &Dataset,
    meta: &DatasetMeta,
    classifier: &dyn Classifier<T>,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>, Error> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        log::info!("ablation row {name}: training into {}", cfg.out_dir.display());
        let checkpoint = fit::<T>(&cfg, dataset)?;
        let model = Model::<T>::load(&checkpoint)?;
        let report = evaluate(&model, dataset, meta, classifier, eval, Some(&checkpoint))?;
        log::info!("ablation row {name}: controllability {:.1}%", report.controllability.hit_rate);
        rows.push(AblationRow { name: name.to_string(), checkpoint, report });
    }
    Ok(rows)
}

/// Markdown table with one line per row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| Model | IS | R-precision (%) | Controllability (%) | Background change | Foreground change |\n\
         |---|---|---|---|---|---|\n",
    );
    for r in rows {
        let rep = &r.report;
        out.push_str(&format!(
            "| {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {:.1} | {:.4} | {:.4} |\n",
            r.name,
            rep.inception_score.mean,
            rep.inception_score.std,
            rep.r_precision.mean,
            rep.r_precision.std,
            rep.controllability.hit_rate,
            rep.disentanglement.background_change,
            rep.disentanglement.foreground_change,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_flip_one_flag_each() {
        let base = TrainConfig::default();
        let rows = ablation_configs(&base);
        let names: Vec<_> = rows.iter().map(|r| r.0).collect();
        assert_eq!(names, ABLATION_ROWS);
        assert_eq!(rows[0].1.out_dir, base.out_dir.join("full"));
        assert!(!rows[1].1.use_pos && rows[1].1.use_acm);
        assert!(!rows[2].1.use_acm && rows[2].1.use_refined);
        assert!(!rows[3].1.use_refined && rows[3].1.use_structure_loss);
        assert!(!rows[4].1.use_structure_loss && rows[4].1.use_pos);
    }
}
