//! Procedural multi-domain shape images, domain splits, and the
//! class-balanced batch sampler.
//!
//! Class decides geometry; domain decides style (background colour,
//! foreground palette, noise amplitude, contrast). Every per-sample random
//! draw is keyed by `(seed, class, index)` and shared across domains, so the
//! domains differ only through style, and at `style_gap = 0` they are
//! pixel-identical.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::regularizers::{groups_from_labels, ClassGroup};

pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 16;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Shapes in class order; a dataset with `C` classes uses the first `C`.
pub const SHAPES: [&str; 7] = ["disk", "square", "cross", "triangle", "ring", "bar", "checker"];

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `[3, 16, 16]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    /// 0 = identical domains, 1 = full style divergence.
    pub style_gap: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            num_domains: 4,
            samples_per_class_per_domain: 60,
            style_gap: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes > SHAPES.len() {
            return Err(Error::UnsupportedClassCount {
                requested: self.num_classes,
                available: SHAPES.len(),
            });
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "must be at least 2"));
        }
        if self.num_domains < 1 {
            return Err(Error::param("num_domains", "must be at least 1"));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::param("samples_per_class_per_domain", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.style_gap) {
            return Err(Error::param(
                "style_gap",
                format!("must lie in [0, 1], got {}", self.style_gap),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.num_domains * self.samples_per_class_per_domain
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Style parameters of one domain at a given gap.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub background: [f64; 3],
    pub foreground: [f64; 3],
    pub noise: f64,
    pub contrast: f64,
}

const BASE_BACKGROUND: f64 = 0.2;
/// Foreground-over-background margin per channel; rotated across domains.
const BASE_MARGIN: [f64; 3] = [0.5, 0.4, 0.3];
const BASE_NOISE: f64 = 0.05;
/// Background lift of the first domains; later domains draw one.
const DOMAIN_LIFT: [f64; 4] = [0.0, 0.25, 0.1, 0.35];

/// Stream ids keep the style, content, and noise draws independent.
fn keyed_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (a << 32) ^ b);
    rng
}

/// Every style component moves linearly with `style_gap` away from a shared
/// base style. The foreground stays brighter than the background in every
/// channel, so shape polarity is domain-invariant.
pub fn domain_style(spec: &DatasetSpec, domain: usize) -> DomainStyle {
    let g = spec.style_gap;
    let mut rng = keyed_rng(spec.seed, 1, domain as u64, 0);
    let lift = match DOMAIN_LIFT.get(domain) {
        Some(&l) => l,
        None => rng.random_range(0.0..0.35),
    };
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let margin_scale: f64 = rng.random_range(0.7..1.0);
    let noise_extra: f64 = rng.random_range(0.0..0.1);
    let contrast_target: f64 = rng.random_range(0.6..1.0);
    let shift = domain % 3;
    let background: [f64; 3] = std::array::from_fn(|c| BASE_BACKGROUND + g * (lift + tint[c]));
    DomainStyle {
        background,
        foreground: std::array::from_fn(|c| {
            let margin = (1.0 - g) * BASE_MARGIN[c] + g * margin_scale * BASE_MARGIN[(c + shift) % 3];
            background[c] + margin
        }),
        noise: BASE_NOISE + g * noise_extra,
        contrast: 1.0 + g * (contrast_target - 1.0),
    }
}

/// Binary mask of `class` centred at `(cx, cy)`.
fn shape_mask(class: usize, cx: f64, cy: f64) -> [f64; PIXELS] {
    let mut mask = [0.0; PIXELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let r = (dx * dx + dy * dy).sqrt();
            let inside = match class {
                0 => r <= 5.0,
                1 => dx.abs() <= 4.5 && dy.abs() <= 4.5,
                2 => (dx.abs() <= 1.5 && dy.abs() <= 5.5) || (dy.abs() <= 1.5 && dx.abs() <= 5.5),
                3 => (-5.0..=5.0).contains(&dy) && dx.abs() <= (dy + 5.0) / 2.0,
                4 => (3.0..=5.5).contains(&r),
                5 => dx.abs() <= 6.5 && dy.abs() <= 1.5,
                _ => {
                    dx.abs() <= 6.0
                        && dy.abs() <= 6.0
                        && ((dx + 6.0) / 3.0).floor() as i64 % 2 == ((dy + 6.0) / 3.0).floor() as i64 % 2
                }
            };
            mask[y * IMAGE_SIZE + x] = if inside { 1.0 } else { 0.0 };
        }
    }
    mask
}

/// Per-sample content shared by every domain: jittered mask plus a unit
/// noise field.
struct Content {
    mask: [f64; PIXELS],
    noise: Vec<f64>,
}

fn content(spec: &DatasetSpec, class: usize, index: usize) -> Content {
    let mut rng = keyed_rng(spec.seed, 2, class as u64, index as u64);
    let cx = 7.5 + rng.random_range(-2.0..2.0);
    let cy = 7.5 + rng.random_range(-2.0..2.0);
    let noise = (0..IMAGE_CHANNELS * PIXELS)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Content {
        mask: shape_mask(class, cx, cy),
        noise,
    }
}

fn render(content: &Content, style: &DomainStyle) -> Tensor {
    let mut data = Vec::with_capacity(IMAGE_CHANNELS * PIXELS);
    for c in 0..IMAGE_CHANNELS {
        for p in 0..PIXELS {
            let m = content.mask[p];
            let base = style.background[c] * (1.0 - m) + style.foreground[c] * m;
            let v = 0.5 + style.contrast * (base - 0.5) + style.noise * content.noise[c * PIXELS + p];
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_parts(vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Generate the full dataset, ordered by domain, then class, then index.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<DomainSample>> {
    spec.validate()?;
    let styles: Vec<DomainStyle> = (0..spec.num_domains).map(|d| domain_style(spec, d)).collect();
    let contents: Vec<Vec<Content>> = (0..spec.num_classes)
        .map(|c| (0..spec.samples_per_class_per_domain).map(|i| content(spec, c, i)).collect())
        .collect();
    let mut out = Vec::with_capacity(spec.len());
    for (domain, style) in styles.iter().enumerate() {
        for (label, per_class) in contents.iter().enumerate() {
            for c in per_class {
                out.push(DomainSample {
                    image: render(c, style),
                    label,
                    domain,
                });
            }
        }
    }
    Ok(out)
}

fn num_domains(samples: &[DomainSample]) -> usize {
    samples.iter().map(|s| s.domain + 1).max().unwrap_or(0)
}

/// `(train, test)` with the target domain held out.
pub fn leave_one_domain_out(
    dataset: &[DomainSample],
    target_domain: usize,
) -> Result<(Vec<DomainSample>, Vec<DomainSample>)> {
    if target_domain >= num_domains(dataset) {
        return Err(Error::param(
            "target_domain",
            format!("{target_domain} is not a domain of this dataset"),
        ));
    }
    Ok(dataset.iter().cloned().partition(|s| s.domain != target_domain))
}

/// `(train, test)` training on one source domain only.
pub fn single_source_split(
    dataset: &[DomainSample],
    source_domain: usize,
) -> Result<(Vec<DomainSample>, Vec<DomainSample>)> {
    if source_domain >= num_domains(dataset) {
        return Err(Error::param(
            "source_domain",
            format!("{source_domain} is not a domain of this dataset"),
        ));
    }
    Ok(dataset.iter().cloned().partition(|s| s.domain == source_domain))
}

/// Stack sample images into `[N, 3, 16, 16]`.
pub fn stack_images(samples: &[DomainSample]) -> Result<Tensor> {
    let parts: Vec<Tensor> = samples
        .iter()
        .map(|s| s.image.clone().reshape(vec![1, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::stack_rows(&refs)
}

pub fn labels_of(samples: &[DomainSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub instances_per_class: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            instances_per_class: 16,
        }
    }
}

impl BatchPlan {
    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.instances_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances_per_class == 0 || self.batch_size == 0 {
            return Err(Error::param("batch_size", "batch plan sizes must be positive"));
        }
        if self.batch_size % self.instances_per_class != 0 {
            return Err(Error::param(
                "batch_size",
                format!(
                    "{} is not divisible by instances_per_class {}",
                    self.batch_size, self.instances_per_class
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub groups: Vec<ClassGroup>,
    /// Some class had fewer than K samples and was drawn with replacement.
    pub with_replacement: bool,
}

/// P×K sampler over a fixed training set.
pub struct BatchSampler<'a> {
    samples: &'a [DomainSample],
    by_class: Vec<(usize, Vec<usize>)>,
    plan: BatchPlan,
}

impl<'a> BatchSampler<'a> {
    pub fn new(samples: &'a [DomainSample], plan: BatchPlan) -> Result<Self> {
        plan.validate()?;
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        let by_class: Vec<_> = by_class.into_iter().collect();
        if plan.classes_per_batch() > by_class.len() {
            return Err(Error::param(
                "batch_size",
                format!(
                    "plan needs {} classes per batch but only {} are available",
                    plan.classes_per_batch(),
                    by_class.len()
                ),
            ));
        }
        Ok(Self {
            samples,
            by_class,
            plan,
        })
    }

    /// Draw P distinct classes, then K instances of each from the pooled
    /// source domains. Members of a class are contiguous in the batch.
    pub fn sample(&self, rng: &mut dyn RngCore) -> Result<Batch> {
        let k = self.plan.instances_per_class;
        let classes: Vec<&(usize, Vec<usize>)> = self
            .by_class
            .choose_multiple(rng, self.plan.classes_per_batch())
            .collect();
        let mut picked = Vec::with_capacity(self.plan.batch_size);
        let mut with_replacement = false;
        for (_, pool) in classes {
            if pool.len() >= k {
                picked.extend(pool.choose_multiple(rng, k).copied());
            } else {
                with_replacement = true;
                for _ in 0..k {
                    picked.push(*pool.choose(rng).expect("class pools are non-empty"));
                }
            }
        }
        let chosen: Vec<DomainSample> = picked.iter().map(|&i| self.samples[i].clone()).collect();
        let labels = labels_of(&chosen);
        Ok(Batch {
            images: stack_images(&chosen)?,
            domains: chosen.iter().map(|s| s.domain).collect(),
            groups: groups_from_labels(&labels),
            labels,
            with_replacement,
        })
    }
}

pub fn sample_batch(train: &[DomainSample], plan: &BatchPlan, rng: &mut dyn RngCore) -> Result<Batch> {
    BatchSampler::new(train, plan.clone())?.sample(rng)
}

/// Shuffle helper used by the probes.
pub fn shuffled_indices(n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// `n` samples chosen without replacement by a seeded shuffle, in their
/// original order; all of them when `n` is 0 or at least the set size.
pub fn subsample(samples: &[DomainSample], n: usize, seed: u64) -> Vec<DomainSample> {
    if n == 0 || n >= samples.len() {
        return samples.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = shuffled_indices(samples.len(), &mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

const DATA_MAGIC: &[u8; 8] = b"XDEDDATA";
pub const DATA_VERSION: u32 = 1;

/// Write the dataset: magic, version, JSON spec, then per sample the image
/// as little-endian f64 followed by u16 label and u16 domain.
pub fn write_dataset<W: Write>(w: &mut W, spec: &DatasetSpec, samples: &[DomainSample]) -> std::io::Result<()> {
    let json = serde_json::to_vec(spec)?;
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for s in samples {
        for &v in s.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(s.label as u16).to_le_bytes())?;
        w.write_all(&(s.domain as u16).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<(DatasetSpec, Vec<DomainSample>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(e.to_string()))?;
    let header_len = 8 + 4 + 8;
    if bytes.len() < header_len || &bytes[..8] != DATA_MAGIC {
        return Err(Error::Format("bad magic, not a dataset export".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATA_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATA_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = header_len + json_len;
    if bytes.len() < body_start {
        return Err(Error::Format("truncated header".into()));
    }
    let spec: DatasetSpec = serde_json::from_slice(&bytes[header_len..body_start])?;
    let record = IMAGE_CHANNELS * PIXELS * 8 + 4;
    let body = &bytes[body_start..];
    if body.len() % record != 0 {
        return Err(Error::Format(format!(
            "body of {} bytes is not a whole number of {record}-byte records",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(record)
        .map(|rec| {
            let (img, tail) = rec.split_at(record - 4);
            let data = img
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            DomainSample {
                image: Tensor::from_parts(vec![IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data),
                label: u16::from_le_bytes([tail[0], tail[1]]) as usize,
                domain: u16::from_le_bytes([tail[2], tail[3]]) as usize,
            }
        })
        .collect();
    Ok((spec, samples))
}

pub fn export_dataset(path: &Path, spec: &DatasetSpec, samples: &[DomainSample]) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, spec, samples).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn import_dataset(path: &Path) -> Result<(DatasetSpec, Vec<DomainSample>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_dataset(&mut bytes.as_slice())
}

/// Mean colour of each domain, `[domain][channel]`.
pub fn domain_channel_means(samples: &[DomainSample]) -> Vec<[f64; 3]> {
    let d = num_domains(samples);
    let mut sums = vec![[0.0; 3]; d];
    let mut counts = vec![0usize; d];
    for s in samples {
        for (c, plane) in s.image.data().chunks(PIXELS).enumerate() {
            sums[s.domain][c] += plane.iter().sum::<f64>();
        }
        counts[s.domain] += PIXELS;
    }
    for (sum, &n) in sums.iter_mut().zip(&counts) {
        for v in sum.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    sums
}
