use rand::seq::index::sample;
use rand::Rng;

use crate::Error;

/// Something that maps images to class probabilities.
pub trait Classifier<T> {
    fn num_classes(&self) -> usize;
    /// One probability vector per image of a `[N, 3, H, W]` batch.
    fn predict(&self, images: &textmask_tensor::Tensor<T>) -> Result<Vec<Vec<f64>>, Error>;
}

/// Images and captions embedded into one space.
pub trait Embedder<T> {
    fn embed_images(&self, images: &textmask_tensor::Tensor<T>) -> Result<Vec<Vec<f64>>, Error>;
    fn embed_captions(&self, captions: &[String]) -> Result<Vec<Vec<f64>>, Error>;
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `exp(E_x KL(p(y|x) || p(y)))` per split of the probability rows, then
/// mean and standard deviation across splits.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64), Error> {
    if splits == 0 || probs.len() < splits {
        return Err(Error::Input(format!("{} images cannot fill {splits} splits", probs.len())));
    }
    let c = probs[0].len();
    if c == 0 || probs.iter().any(|p| p.len() != c) {
        return Err(Error::Input("probability rows must share a non-zero width".into()));
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; c];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mut kl = 0.0;
        for p in part {
            for (pv, mv) in p.iter().zip(&marginal) {
                if *pv > 0.0 {
                    kl += pv * (pv.ln() - mv.ln());
                }
            }
        }
        scores.push((kl / part.len() as f64).exp());
    }
    Ok(mean_std(&scores))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fraction (as a percentage) of images whose true caption outranks
/// `pool - 1` randomly drawn other captions by cosine similarity. A tie
/// with any distractor counts as a miss.
///
/// `truth[i]` indexes the true caption of image `i` in `captions`.
pub fn r_precision<R: Rng + ?Sized>(
    images: &[Vec<f64>],
    truth: &[usize],
    captions: &[Vec<f64>],
    pool: usize,
    rng: &mut R,
) -> Result<f64, Error> {
    let hits = r_precision_hits(images, truth, captions, pool, rng)?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

/// Per-image hit flags behind [`r_precision`].
pub fn r_precision_hits<R: Rng + ?Sized>(
    images: &[Vec<f64>],
    truth: &[usize],
    captions: &[Vec<f64>],
    pool: usize,
    rng: &mut R,
) -> Result<Vec<bool>, Error> {
    if pool == 0 || captions.len() < pool {
        return Err(Error::Input(format!("{} captions cannot fill a pool of {pool}", captions.len())));
    }
    if images.len() != truth.len() || truth.iter().any(|&t| t >= captions.len()) {
        return Err(Error::Input("every image needs a valid true caption index".into()));
    }
    let mut hits = Vec::with_capacity(images.len());
    for (img, &t) in images.iter().zip(truth) {
        let true_sim = cosine(img, &captions[t]);
        let mut hit = true;
        // draw from every index but the true one
        for j in sample(rng, captions.len() - 1, pool - 1) {
            let j = if j >= t { j + 1 } else { j };
            if cosine(img, &captions[j]) >= true_sim {
                hit = false;
            }
        }
        hits.push(hit);
    }
    Ok(hits)
}
