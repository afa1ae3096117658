use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textmask_tensor::{Scalar, Tensor};

use crate::data::{Dataset, DatasetMeta, NamedColor, Split};
use crate::mask::SegmentationMask;
use crate::model::Model;
use crate::Error;

/// Mean RGB in `[0, 255]` of a `[3, s, s]` (or `[1, 3, s, s]`) image
/// inside `mask`, or `None` for an empty mask.
pub fn masked_mean_rgb<T: Scalar>(image: &Tensor<T>, mask: &SegmentationMask) -> Result<Option<[f64; 3]>, Error> {
    let s = mask.side();
    if image.numel() != 3 * s * s || image.shape().last() != Some(&s) {
        return Err(Error::Input(format!("image {:?} does not match a {s}x{s} mask", image.shape())));
    }
    let n = mask.count();
    if n == 0 {
        return Ok(None);
    }
    let plane = s * s;
    let mut sum = [0.0; 3];
    for (p, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            for (c, acc) in sum.iter_mut().enumerate() {
                *acc += (image.data()[c * plane + p].as_f64() + 1.0) * 127.5;
            }
        }
    }
    Ok(Some(sum.map(|v| v / n as f64)))
}

/// Index of the palette entry closest to `rgb` in Euclidean distance.
pub fn nearest_color(rgb: [f64; 3], palette: &[NamedColor]) -> usize {
    let dist = |c: &NamedColor| (0..3).map(|k| (rgb[k] - c.rgb[k] as f64).powi(2)).sum::<f64>();
    (0..palette.len()).fold(0, |best, i| if dist(&palette[i]) < dist(&palette[best]) { i } else { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllabilityResult {
    pub hits: usize,
    pub evaluated: usize,
    /// Samples skipped because their mask has no foreground pixel.
    pub excluded: usize,
    /// Percentage of evaluated samples whose colour matched.
    pub hit_rate: f64,
}

fn check_side<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<(), Error> {
    if dataset.side != model.plan().finest() {
        return Err(Error::Input(format!(
            "dataset loaded at {} but the model generates {}",
            dataset.side,
            model.plan().finest()
        )));
    }
    Ok(())
}

/// Generates every held-out item from its mask and one of its captions
/// (cycling through templates) and checks the colour inside the mask.
pub fn controllability_probe<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    meta: &DatasetMeta,
    seed: u64,
) -> Result<ControllabilityResult, Error> {
    if !dataset.has_attributes() {
        return Err(Error::Input("controllability probe needs attributes.jsonl".into()));
    }
    check_side(model, dataset)?;
    let test = dataset.split(Split::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut evaluated, mut excluded) = (0, 0, 0);
    for (chunk_idx, chunk) in test.items.chunks(64).enumerate() {
        let mut ids = Vec::new();
        let mut masks = Vec::new();
        let mut targets = Vec::new();
        for (k, item) in chunk.iter().enumerate() {
            if item.mask.count() == 0 {
                excluded += 1;
                continue;
            }
            let a = item.attributes.as_ref().expect("checked above");
            let target = meta
                .color_index(&a.color)
                .ok_or_else(|| Error::Input(format!("{}: colour {} not in meta.json", a.id, a.color)))?;
            let text = &item.captions[(chunk_idx * 64 + k) % item.captions.len()];
            ids.push(model.caption(text)?.ids);
            masks.push(item.mask.clone());
            targets.push(target);
        }
        if ids.is_empty() {
            continue;
        }
        let noise = model.noise(ids.len(), &mut rng);
        let images = model.generate(&noise, &ids, &masks)?;
        let finest = images.last().expect("at least one stage");
        for (n, (mask, target)) in masks.iter().zip(&targets).enumerate() {
            let rgb = masked_mean_rgb(&finest.select0(n), mask)?.expect("non-empty mask");
            if nearest_color(rgb, &meta.palette) == *target {
                hits += 1;
            }
            evaluated += 1;
        }
    }
    let hit_rate = if evaluated == 0 { 0.0 } else { 100.0 * hits as f64 / evaluated as f64 };
    Ok(ControllabilityResult { hits, evaluated, excluded, hit_rate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementResult {
    /// Mean absolute difference in `[0, 1]` pixel units outside both masks.
    pub background_change: f64,
    /// The same inside the union of both masks.
    pub foreground_change: f64,
    pub pairs: usize,
    /// Whether every empty-mask generation produced a finite image.
    pub empty_mask_ok: bool,
}

/// Mean absolute difference of two `[3, s, s]` images over the pixels
/// where `region` is `want`, in `[0, 1]` units.
pub fn region_difference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, region: &SegmentationMask, want: u8) -> f64 {
    let plane = region.side() * region.side();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &m) in region.data().iter().enumerate() {
        if m == want {
            for c in 0..3 {
                sum += (a.data()[c * plane + p].as_f64() - b.data()[c * plane + p].as_f64()).abs() / 2.0;
            }
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores how much the background moves when only the mask changes.
pub fn disentanglement_pair<T: Scalar>(
    model: &Model<T>,
    caption: &[usize],
    mask_a: &SegmentationMask,
    mask_b: &SegmentationMask,
    noise: &Tensor<T>,
) -> Result<(f64, f64, bool), Error> {
    let empty = SegmentationMask::empty(mask_a.side());
    let noise = Tensor::stack0(&[noise.clone(), noise.clone(), noise.clone()])?;
    let ids = vec![caption.to_vec(); 3];
    let images = model.generate(&noise, &ids, &[empty, mask_a.clone(), mask_b.clone()])?;
    let finest = images.last().expect("at least one stage");
    let (e, a, b) = (finest.select0(0), finest.select0(1), finest.select0(2));
    let union = mask_a.union(mask_b)?;
    Ok((region_difference(&a, &b, &union, 0), region_difference(&a, &b, &union, 1), e.all_finite()))
}

/// Averages [`disentanglement_pair`] over `pairs` pairs of test masks,
/// each generated with the first caption of mask A's item.
pub fn disentanglement_probe<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    pairs: usize,
    seed: u64,
) -> Result<DisentanglementResult, Error> {
    check_side(model, dataset)?;
    let mut pool = dataset.split(Split::Test);
    if pool.len() < 2 {
        pool = dataset.clone();
    }
    let usable: Vec<usize> = (0..pool.len()).filter(|&i| pool.items[i].mask.count() > 0).collect();
    if usable.len() < 2 {
        return Err(Error::Input("disentanglement probe needs two non-empty masks".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bg, mut fg, mut ok, mut used) = (0.0, 0.0, true, 0);
    let stride = usable.len() / 2;
    for p in 0..pairs {
        let ia = usable[p % usable.len()];
        let ib = usable[(p + stride.max(1)) % usable.len()];
        let a = &pool.items[ia];
        let b = &pool.items[ib];
        if a.mask.union(&b.mask)?.count() == a.mask.side() * a.mask.side() {
            continue;
        }
        let ids = model.caption(&a.captions[0])?.ids;
        let noise = model.noise(1, &mut rng).reshape(&[model.plan().noise_dim])?;
        let (b_change, f_change, finite) = disentanglement_pair(model, &ids, &a.mask, &b.mask, &noise)?;
        bg += b_change;
        fg += f_change;
        ok &= finite;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Input("no mask pair leaves any background".into()));
    }
    Ok(DisentanglementResult {
        background_change: bg / used as f64,
        foreground_change: fg / used as f64,
        pairs: used,
        empty_mask_ok: ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::default_palette;

    #[test]
    fn nearest_palette_colour() {
        let p = default_palette();
        assert_eq!(p[nearest_color([230.0, 20.0, 25.0], &p)].name, "red");
        assert_eq!(p[nearest_color([250.0, 250.0, 250.0], &p)].name, "white");
    }

    #[test]
    fn red_region_is_a_hit() {
        let mut mask = SegmentationMask::empty(4);
        mask.set(1, 1, true);
        let mut img = Tensor::<f64>::full(&[3, 4, 4], -1.0);
        img.data_mut()[5] = 220.0 / 127.5 - 1.0;
        let rgb = masked_mean_rgb(&img, &mask).unwrap().unwrap();
        assert_eq!(default_palette()[nearest_color(rgb, &default_palette())].name, "red");
        assert!(masked_mean_rgb(&img, &SegmentationMask::empty(4)).unwrap().is_none());
    }

    #[test]
    fn identical_images_have_no_change() {
        let img = Tensor::<f64>::full(&[3, 4, 4], 0.2);
        let m = SegmentationMask::full(4);
        assert_eq!(region_difference(&img, &img, &m, 1), 0.0);
        let other = Tensor::<f64>::full(&[3, 4, 4], -0.2);
        assert!((region_difference(&img, &other, &m, 1) - 0.2).abs() < 1e-12);
        assert_eq!(region_difference(&img, &other, &m, 0), 0.0);
    }
}
