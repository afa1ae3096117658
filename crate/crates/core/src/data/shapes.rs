//! Captioned flat-colour shapes on flat-colour backgrounds.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Attributes, CaptionRecord, Split};
use crate::mask::SegmentationMask;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre `(x, y)` lies inside a shape of radius `r`
    /// centred at `(cx, cy)`.
    pub fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Triangle => {
                // apex up, base at cy + r
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [u8; 3]) -> Self {
        Self { name: name.to_string(), rgb }
    }
}

pub fn default_palette() -> Vec<NamedColor> {
    vec![
        NamedColor::new("red", [220, 30, 30]),
        NamedColor::new("green", [30, 190, 40]),
        NamedColor::new("blue", [30, 60, 220]),
        NamedColor::new("yellow", [235, 220, 40]),
        NamedColor::new("purple", [150, 40, 190]),
        NamedColor::new("white", [245, 245, 245]),
    ]
}

pub fn default_backgrounds() -> Vec<NamedColor> {
    vec![
        NamedColor::new("black", [15, 15, 15]),
        NamedColor::new("gray", [120, 120, 120]),
        NamedColor::new("brown", [110, 70, 30]),
    ]
}

pub fn default_templates() -> Vec<String> {
    [
        "a {color} {shape} on a {background} background",
        "the {shape} is {color} and the background is {background}",
        "there is a {color} {shape} in the middle of a {background} background",
        "a picture of a {color} {shape} with a {background} background",
        "this {color} {shape} sits on top of a {background} background",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Generator settings for the synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeWorldConfig {
    pub palette: Vec<NamedColor>,
    pub shapes: Vec<Shape>,
    pub backgrounds: Vec<NamedColor>,
    pub side: usize,
    /// Samples per (colour, shape, background) combination.
    pub per_combination: usize,
    /// `{color}`, `{shape}` and `{background}` are substituted.
    pub templates: Vec<String>,
    /// Hold out one shape per colour for the test split.
    pub hold_out: bool,
    pub seed: u64,
}

impl Default for ShapeWorldConfig {
    fn default() -> Self {
        Self {
            palette: default_palette(),
            shapes: Shape::ALL.to_vec(),
            backgrounds: default_backgrounds(),
            side: 32,
            per_combination: 20,
            templates: default_templates(),
            hold_out: true,
            seed: 0,
        }
    }
}

impl ShapeWorldConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.palette.is_empty() || self.shapes.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Config("palettes and shape set must be non-empty".into()));
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains("{color}")) {
            return Err(Error::Config("every caption template must mention {color}".into()));
        }
        if self.side < 8 {
            return Err(Error::Config(format!("image side {} is too small", self.side)));
        }
        let names: Vec<&str> = self.palette.iter().chain(&self.backgrounds).map(|c| c.name.as_str()).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) || names[..i].contains(n) {
                return Err(Error::Config(format!("colour names must be distinct single words, got {n:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.palette.len() * self.shapes.len() * self.backgrounds.len() * self.per_combination
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether `(color, shape)` belongs to the test split.
    pub fn is_held_out(&self, color: usize, shape: usize) -> bool {
        self.hold_out && shape == color % self.shapes.len()
    }

    pub fn caption(&self, template: &str, color: &str, shape: Shape, background: &str) -> String {
        template.replace("{color}", color).replace("{shape}", shape.name()).replace("{background}", background)
    }
}

/// One rendered sample.
pub struct Rendered {
    pub image: RgbImage,
    pub mask: SegmentationMask,
}

/// Draws one shape with a random size and position.
pub fn render<R: Rng + ?Sized>(
    side: usize,
    shape: Shape,
    color: [u8; 3],
    background: [u8; 3],
    rng: &mut R,
) -> Rendered {
    let s = side as f64;
    let r = rng.random_range(0.2 * s..=0.32 * s);
    let cx = rng.random_range(r + 1.0..=s - r - 1.0);
    let cy = rng.random_range(r + 1.0..=s - r - 1.0);
    let mut image = RgbImage::from_pixel(side as u32, side as u32, Rgb(background));
    let mut mask = SegmentationMask::empty(side);
    for y in 0..side {
        for x in 0..side {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r) {
                image.put_pixel(x as u32, y as u32, Rgb(color));
                mask.set(y, x, true);
            }
        }
    }
    Rendered { image, mask }
}

/// Counts of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSummary {
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub side: usize,
    pub palette: Vec<NamedColor>,
    pub backgrounds: Vec<NamedColor>,
    pub shapes: Vec<Shape>,
    pub per_combination: usize,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn read(root: &Path) -> Result<Self, Error> {
        let path = root.join("meta.json");
        let text =
            fs::read_to_string(&path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn color_index(&self, name: &str) -> Option<usize> {
        self.palette.iter().position(|c| c.name == name)
    }

    pub fn shape_index(&self, name: &str) -> Option<usize> {
        self.shapes.iter().position(|s| s.name() == name)
    }
}

/// Writes the dataset under `root`: `images/`, `masks/`, `captions.jsonl`,
/// `attributes.jsonl` and `meta.json`. Output is a function of the config
/// alone.
pub fn generate_shapeworld(config: &ShapeWorldConfig, root: &Path) -> Result<GeneratedSummary, Error> {
    config.validate()?;
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut captions = fs::File::create(root.join("captions.jsonl"))?;
    let mut attributes = fs::File::create(root.join("attributes.jsonl"))?;
    let mut summary = GeneratedSummary { total: 0, train: 0, test: 0 };
    for (ci, color) in config.palette.iter().enumerate() {
        for (si, &shape) in config.shapes.iter().enumerate() {
            let split = if config.is_held_out(ci, si) { Split::Test } else { Split::Train };
            for bg in &config.backgrounds {
                for _ in 0..config.per_combination {
                    let id = format!("{:05}", summary.total);
                    let rendered = render(config.side, shape, color.rgb, bg.rgb, &mut rng);
                    rendered.image.save(root.join("images").join(format!("{id}.png")))?;
                    let gray = GrayImage::from_fn(config.side as u32, config.side as u32, |x, y| {
                        Luma([rendered.mask.get(y as usize, x as usize) * 255])
                    });
                    gray.save(root.join("masks").join(format!("{id}.png")))?;
                    let texts =
                        config.templates.iter().map(|t| config.caption(t, &color.name, shape, &bg.name)).collect();
                    let rec = CaptionRecord { id: id.clone(), captions: texts };
                    writeln!(captions, "{}", serde_json::to_string(&rec)?)?;
                    let attr = Attributes {
                        id,
                        color: color.name.clone(),
                        shape: shape.name().to_string(),
                        background: bg.name.clone(),
                        split,
                    };
                    writeln!(attributes, "{}", serde_json::to_string(&attr)?)?;
                    summary.total += 1;
                    match split {
                        Split::Train => summary.train += 1,
                        Split::Test => summary.test += 1,
                    }
                }
            }
        }
    }
    let meta = DatasetMeta {
        side: config.side,
        palette: config.palette.clone(),
        backgrounds: config.backgrounds.clone(),
        shapes: config.shapes.clone(),
        per_combination: config.per_combination,
        seed: config.seed,
    };
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_matches_coloured_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for shape in Shape::ALL {
            let r = render(32, shape, [200, 0, 0], [0, 0, 0], &mut rng);
            assert!(r.mask.count() > 20, "{shape:?} too small");
            for y in 0..32 {
                for x in 0..32 {
                    let fg = r.image.get_pixel(x, y).0 == [200, 0, 0];
                    assert_eq!(fg, r.mask.get(y as usize, x as usize) == 1);
                }
            }
        }
    }

    #[test]
    fn hold_out_covers_each_colour_once() {
        let c = ShapeWorldConfig::default();
        for ci in 0..c.palette.len() {
            let held = (0..c.shapes.len()).filter(|&si| c.is_held_out(ci, si)).count();
            assert_eq!(held, 1);
        }
        for si in 0..c.shapes.len() {
            let held = (0..c.palette.len()).filter(|&ci| c.is_held_out(ci, si)).count();
            assert_eq!(held, 2);
        }
    }

    #[test]
    fn rejects_duplicate_colour_names() {
        let mut c = ShapeWorldConfig::default();
        c.backgrounds.push(NamedColor::new("red", [1, 2, 3]));
        assert!(c.validate().is_err());
    }
}
