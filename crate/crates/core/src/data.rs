//! Image datasets: the TCPD container, a seeded synthetic generator and
//! epoch batching.
//!
//! TCPD layout, little-endian: `"TCPD"`, u32 version, u32 sample count,
//! u16 height, u16 width, u8 channels, u16 class count, every image as f64
//! in row-major `[H, W, C]` order, then one u16 label per sample.

use std::path::Path;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::format::{put_f64s, FormatError, Reader};
use crate::numerics::Tensor;
use crate::rng::Rng;

const MAGIC: [u8; 4] = *b"TCPD";
const VERSION: u32 = 1;
/// Largest per-channel distance of a template color from mid-grey.
pub const PALETTE_OFFSET: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[S × H × W × C]`, values in `[0, 1]`.
    pub images: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        [height, width, channels]: [usize; 3],
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Contract(format!(
                "{} pixel values for {} images of {height}×{width}×{channels}",
                images.len(),
                labels.len()
            )));
        }
        let ds = Self {
            images,
            height,
            width,
            channels,
            labels,
            num_classes,
            split: "train".into(),
        };
        ds.check_ranges()?;
        Ok(ds)
    }

    fn check_ranges(&self) -> Result<(), FormatError> {
        for (index, &label) in self.labels.iter().enumerate() {
            if label >= self.num_classes {
                return Err(FormatError::LabelRange {
                    index,
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        let per = self.image_len();
        if let Some((i, &value)) = self
            .images
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(FormatError::ValueRange {
                index: i / per,
                value,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Sample `i` as an `[H, W, C]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.pixels(i).to_vec(),
        )
        .expect("extents checked at construction")
    }

    /// Errors unless the image extents fit `config`.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        let have = [self.height, self.width, self.channels];
        let want = [config.image_h, config.image_w, config.channels];
        if have != want {
            return Err(Error::Config(format!(
                "dataset images are {have:?} but the model expects {want:?}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.images.len() * 8 + self.len() * 2);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        put_f64s(&mut out, &self.images);
        for &l in &self.labels {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::Version {
                expected: VERSION,
                found: version,
            });
        }
        let count = r.u32("sample count")? as usize;
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let channels = r.u8("channels")? as usize;
        let num_classes = r.u16("class count")? as usize;
        if height * width * channels == 0 {
            return Err(FormatError::ShapeTable(format!(
                "zero image extent {height}×{width}×{channels}"
            )));
        }
        let n = count
            .checked_mul(height * width * channels)
            .ok_or_else(|| FormatError::ShapeTable("image payload overflows".into()))?;
        let images = r.f64s(n, || "image payload".into())?;
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            labels.push(r.u16("labels")? as usize);
        }
        r.finish()?;
        let ds = Self {
            images,
            height,
            width,
            channels,
            labels,
            num_classes,
            split: "train".into(),
        };
        ds.check_ranges()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            classes: 4,
            samples_per_class: 64,
            noise_std: 0.05,
            seed: 7,
            image_h: m.image_h,
            image_w: m.image_w,
            channels: m.channels,
            patch_h: m.patch_h,
            patch_w: m.patch_w,
        }
    }
}

/// The two patch colors every template is painted with.
/// Two colors mirrored about mid-grey along a random channel direction.
/// The largest channel offset is [`PALETTE_OFFSET`].
fn class_palette(rng: &mut Rng, channels: usize) -> [Vec<f64>; 2] {
    let dir: Vec<f64> = (0..channels).map(|_| rng.standard_normal()).collect();
    let scale = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let a: Vec<f64> = dir
        .iter()
        .map(|v| 0.5 + PALETTE_OFFSET * v / scale)
        .collect();
    let b = a.iter().map(|v| 1.0 - v).collect();
    [a, b]
}

/// Per-class patch colorings. Each class paints exactly half of the grid
/// with each of its two palette colors, and every palette is symmetric
/// about 0.5, so all classes share the same average pixel. Classes differ
/// in their palette direction and in where the colors sit.
pub fn synthetic_templates(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    validate_spec(spec)?;
    let (gr, gc) = (spec.image_h / spec.patch_h, spec.image_w / spec.patch_w);
    let cells = gr * gc;
    let mut rng = Rng::derived(spec.seed, 0);
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(spec.classes);
    while assignments.len() < spec.classes {
        let mut a: Vec<usize> = (0..cells).map(|i| usize::from(i >= cells / 2)).collect();
        rng.shuffle(&mut a);
        if !assignments.contains(&a) {
            assignments.push(a);
        }
    }
    let c = spec.channels;
    Ok(assignments
        .iter()
        .map(|a| {
            let colors = class_palette(&mut rng, c);
            let mut img = vec![0.0; spec.image_h * spec.image_w * c];
            for y in 0..spec.image_h {
                for x in 0..spec.image_w {
                    let cell = (y / spec.patch_h) * gc + x / spec.patch_w;
                    let px = (y * spec.image_w + x) * c;
                    img[px..px + c].copy_from_slice(&colors[a[cell]]);
                }
            }
            img
        })
        .collect())
}

fn validate_spec(spec: &SyntheticSpec) -> Result<()> {
    if spec.classes < 2 {
        return Err(Error::Config(format!(
            "classes must be at least 2, got {}",
            spec.classes
        )));
    }
    if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return Err(Error::Config(format!(
            "noise must be a finite non-negative number, got {}",
            spec.noise_std
        )));
    }
    let extents = [
        spec.image_h,
        spec.image_w,
        spec.channels,
        spec.patch_h,
        spec.patch_w,
    ];
    if extents.contains(&0)
        || !spec.image_h.is_multiple_of(spec.patch_h)
        || !spec.image_w.is_multiple_of(spec.patch_w)
    {
        return Err(Error::Config(format!(
            "image {}×{} does not tile into {}×{} patches",
            spec.image_h, spec.image_w, spec.patch_h, spec.patch_w
        )));
    }
    let cells = (spec.image_h / spec.patch_h) * (spec.image_w / spec.patch_w);
    if cells < 4 {
        return Err(Error::Config("at least four patches are needed".into()));
    }
    if spec.image_h > u16::MAX as usize || spec.image_w > u16::MAX as usize || spec.channels > 255 {
        return Err(Error::Config(
            "image extents exceed the container limits".into(),
        ));
    }
    if spec.classes > u16::MAX as usize {
        return Err(Error::Config("too many classes".into()));
    }
    Ok(())
}

/// Template plus Gaussian pixel noise, clipped to `[0, 1]`. Sample `i` has
/// label `i mod classes`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let templates = synthetic_templates(spec)?;
    let mut rng = Rng::derived(spec.seed, 1);
    let total = spec.classes * spec.samples_per_class;
    let per = templates[0].len();
    let mut images = Vec::with_capacity(total * per);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % spec.classes;
        for &t in &templates[label] {
            let v = if spec.noise_std > 0.0 {
                t + spec.noise_std * rng.standard_normal()
            } else {
                t
            };
            images.push(v.clamp(0.0, 1.0));
        }
        labels.push(label);
    }
    let mut ds = Dataset::new(
        images,
        [spec.image_h, spec.image_w, spec.channels],
        labels,
        spec.classes,
    )?;
    ds.split = "synthetic".into();
    Ok(ds)
}

/// Shuffled index batches for one epoch. The order depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    Rng::derived(seed ^ 0x5EED_BA7C, epoch).shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
