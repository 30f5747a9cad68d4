//! Dataset construction: registration pairs from a pool of source images,
//! synthetic labelled shapes with known ground-truth deformations, resizing
//! and test-time noise corruption.
//!
//! Every function here is a pure function of its inputs and seed; reruns are
//! bitwise identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::warp::{warp_bilinear, warp_nearest, DeformationField, LabelMap};

/// One registration example. Labels and the generating field are present for
/// synthetic data only.
#[derive(Debug, Clone)]
pub struct ImagePair<T> {
    pub moving: Tensor<T>,
    pub fixed: Tensor<T>,
    pub moving_labels: Option<LabelMap>,
    pub fixed_labels: Option<LabelMap>,
    pub true_field: Option<DeformationField<T>>,
}

impl<T: Float> ImagePair<T> {
    pub fn plain(moving: Tensor<T>, fixed: Tensor<T>) -> Self {
        ImagePair {
            moving,
            fixed,
            moving_labels: None,
            fixed_labels: None,
            true_field: None,
        }
    }
}

/// Train/validation/test pair lists, disjoint at the source-image level.
#[derive(Debug, Clone)]
pub struct DatasetSplit<T> {
    pub train: Vec<ImagePair<T>>,
    pub val: Vec<ImagePair<T>>,
    pub test: Vec<ImagePair<T>>,
    pub seed: u64,
}

/// How to carve a source-image pool into splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_sources: usize,
    pub val_sources: usize,
    pub test_sources: usize,
    pub max_train_pairs: usize,
    pub max_val_pairs: usize,
    pub max_test_pairs: usize,
    pub target_size: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_sources: 200,
            val_sources: 30,
            test_sources: 60,
            max_train_pairs: 10_000,
            max_val_pairs: 100,
            max_test_pairs: 1000,
            target_size: 32,
        }
    }
}

/// Keeps only the images whose class label equals `class` (e.g. MNIST digit 5).
pub fn select_class<T: Clone>(images: &[Tensor<T>], labels: &[u8], class: u8) -> Vec<Tensor<T>> {
    images
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .map(|(img, _)| img.clone())
        .collect()
}

/// Splits sources disjointly, resizes them to `target_size`, and forms all
/// ordered pairs of distinct images within each split (shuffled by the seed,
/// truncated to the per-split caps).
pub fn make_pairs<T: Float>(
    images: &[Tensor<T>],
    spec: &SplitSpec,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if images.len() < 2 {
        return Err(CoreError::Empty("make_pairs: need at least two source images"));
    }
    if spec.target_size == 0 {
        return Err(CoreError::Config("target size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    shuffle(&mut order, &mut rng);

    let n_train = spec.train_sources.min(order.len());
    let n_val = spec.val_sources.min(order.len() - n_train);
    let n_test = spec.test_sources.min(order.len() - n_train - n_val);
    if n_train < 2 {
        return Err(CoreError::Empty("make_pairs: fewer than two training sources"));
    }

    let build = |src: &[usize], cap: usize, rng: &mut ChaCha8Rng| -> Result<Vec<ImagePair<T>>> {
        let resized: Vec<Tensor<T>> = src
            .iter()
            .map(|&i| resize_bilinear(&images[i], spec.target_size, spec.target_size))
            .collect::<Result<_>>()?;
        let mut combos: Vec<(usize, usize)> = Vec::with_capacity(src.len() * src.len());
        for a in 0..src.len() {
            for b in 0..src.len() {
                if a != b {
                    combos.push((a, b));
                }
            }
        }
        shuffle(&mut combos, rng);
        combos.truncate(cap);
        Ok(combos
            .into_iter()
            .map(|(a, b)| ImagePair::plain(resized[a].clone(), resized[b].clone()))
            .collect())
    };

    let train = build(&order[..n_train], spec.max_train_pairs, &mut rng)?;
    let val = build(&order[n_train..n_train + n_val], spec.max_val_pairs, &mut rng)?;
    let test = build(
        &order[n_train + n_val..n_train + n_val + n_test],
        spec.max_test_pairs,
        &mut rng,
    )?;
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}

fn shuffle<E>(items: &mut [E], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Bilinear resampling onto a corner-aligned `new_h x new_w` grid.
pub fn resize_bilinear<T: Float>(image: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    if new_h == 0 || new_w == 0 {
        return Err(CoreError::Config("resize targets must be positive".into()));
    }
    let s = image.shape();
    if s.len() != 4 {
        return Err(CoreError::Contract("resize_bilinear expects [N,C,H,W]"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (new_h, new_w) {
        return Ok(image.clone());
    }
    let scale = |src: usize, dst: usize| -> f64 {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let sy = scale(h, new_h);
    let sx = scale(w, new_w);
    let src = image.data();
    let mut out = vec![T::zero(); n * c * new_h * new_w];
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * new_h * new_w;
        for y in 0..new_h {
            let fy = y as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = T::from(fy - y0 as f64).unwrap();
            for x in 0..new_w {
                let fx = x as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = T::from(fx - x0 as f64).unwrap();
                let top = (T::one() - wx) * src[base + y0 * w + x0] + wx * src[base + y0 * w + x1];
                let bot = (T::one() - wx) * src[base + y1 * w + x0] + wx * src[base + y1 * w + x1];
                out[obase + y * new_w + x] = (T::one() - wy) * top + wy * bot;
            }
        }
    }
    Tensor::from_vec(&[n, c, new_h, new_w], out)
}

/// Adds clipped elementwise Gaussian noise; `sigma == 0` returns the image
/// unchanged and consumes no randomness.
pub fn add_gaussian_noise<T: Float, R: Rng>(
    image: &Tensor<T>,
    sigma: T,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if sigma < T::zero() {
        return Err(CoreError::Config("noise sigma must be >= 0".into()));
    }
    if sigma == T::zero() {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        let noisy = *v + sigma * T::from(z).unwrap();
        *v = noisy.max(T::zero()).min(T::one());
    }
    Ok(out)
}

/// Geometry of the synthetic shape generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub blur_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 32,
            min_regions: 2,
            max_regions: 4,
            blur_sigma: 5.0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(CoreError::Config("synthetic canvas must be at least 16px".into()));
        }
        if self.min_regions < 1 || self.max_regions < self.min_regions || self.max_regions > 4 {
            return Err(CoreError::Config(format!(
                "region count range {}..={} is invalid",
                self.min_regions, self.max_regions
            )));
        }
        if self.blur_sigma <= 0.0 {
            return Err(CoreError::Config("field blur sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Renders `n` labelled moving images, draws a smooth random field with peak
/// displacement magnitude `max_disp`, and derives the fixed image (and its
/// labels) by warping — so the ground-truth field exactly explains each pair.
pub fn synth_pairs<T: Float>(
    n: usize,
    spec: &SynthSpec,
    max_disp: f64,
    seed: u64,
) -> Result<Vec<ImagePair<T>>> {
    spec.validate()?;
    if !(0.0..=4.0).contains(&max_disp) {
        return Err(CoreError::Config(format!(
            "max_disp must lie in [0, 4] px, got {max_disp}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let (moving, labels) = render_shapes::<T>(spec, max_disp, &mut rng);
        let field = random_smooth_field::<T>(spec.size, max_disp, spec.blur_sigma, &mut rng);
        let fixed = warp_bilinear(&moving, &field)?;
        let fixed_labels = warp_nearest(&labels, &field)?;
        pairs.push(ImagePair {
            moving,
            fixed,
            moving_labels: Some(labels),
            fixed_labels: Some(fixed_labels),
            true_field: Some(field),
        });
    }
    Ok(pairs)
}

struct Placed {
    cx: f64,
    cy: f64,
    r: f64,
}

fn render_shapes<T: Float>(
    spec: &SynthSpec,
    max_disp: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor<T>, LabelMap) {
    let size = spec.size;
    let want = rng.random_range(spec.min_regions..=spec.max_regions);
    let r_lo = size as f64 / 12.0;
    let r_hi = size as f64 / 7.0;

    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    while placed.len() < want && attempts < 500 {
        attempts += 1;
        let r = rng.random_range(r_lo..r_hi);
        let margin = r + max_disp + 1.5;
        if 2.0 * margin >= size as f64 {
            break;
        }
        let cx = rng.random_range(margin..size as f64 - margin);
        let cy = rng.random_range(margin..size as f64 - margin);
        let ok = placed
            .iter()
            .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() >= p.r + r + 1.5);
        if ok {
            placed.push(Placed { cx, cy, r });
        }
    }
    // guarantee the minimum region count with corner fallbacks
    if placed.len() < spec.min_regions {
        let r = size as f64 / 10.0;
        let m = r + max_disp + 1.5;
        let corners = [
            (m, m),
            (size as f64 - 1.0 - m, size as f64 - 1.0 - m),
            (m, size as f64 - 1.0 - m),
            (size as f64 - 1.0 - m, m),
        ];
        for &(cx, cy) in &corners {
            if placed.len() >= spec.min_regions {
                break;
            }
            let ok = placed
                .iter()
                .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() >= p.r + r + 1.5);
            if ok {
                placed.push(Placed { cx, cy, r });
            }
        }
    }

    let mut intensity = vec![0.0f64; size * size];
    let mut labels = vec![0u32; size * size];
    for (idx, shape) in placed.iter().enumerate() {
        let ring = rng.random_bool(0.5);
        let amp = rng.random_range(0.65..1.0);
        let feather = 1.2;
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 - shape.cx).powi(2) + (y as f64 - shape.cy).powi(2)).sqrt();
                // radial membership: solid disk or annulus band
                let inside = if ring {
                    let rc = 0.775 * shape.r;
                    let half = 0.225 * shape.r + 0.3;
                    (half - (d - rc).abs()) / feather
                } else {
                    (shape.r - d) / feather
                };
                let t = smoothstep(inside.clamp(0.0, 1.0));
                if t <= 0.0 {
                    continue;
                }
                let tex = 0.6 + 0.4 * (core::f64::consts::PI * d / (shape.r + 0.5)).cos();
                let i = y * size + x;
                intensity[i] = (intensity[i] + amp * t * tex).clamp(0.0, 1.0);
                if t > 0.5 {
                    labels[i] = idx as u32 + 1;
                }
            }
        }
    }
    let img = Tensor::from_vec(
        &[1, 1, size, size],
        intensity.iter().map(|&v| T::from(v).unwrap()).collect(),
    )
    .unwrap();
    (img, LabelMap::new(size, size, labels).unwrap())
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Gaussian-smoothed white noise scaled so the peak displacement magnitude
/// equals `max_disp`.
fn random_smooth_field<T: Float>(
    size: usize,
    max_disp: f64,
    blur_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> DeformationField<T> {
    if max_disp == 0.0 {
        return DeformationField::zeros(size, size);
    }
    let mut dx: Vec<f64> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    let mut dy: Vec<f64> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    blur_gaussian(&mut dx, size, size, blur_sigma);
    blur_gaussian(&mut dy, size, size, blur_sigma);
    let peak = dx
        .iter()
        .zip(&dy)
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { max_disp / peak } else { 0.0 };
    let mut data = Vec::with_capacity(2 * size * size);
    data.extend(dx.iter().map(|&v| T::from(v * scale).unwrap()));
    data.extend(dy.iter().map(|&v| T::from(v * scale).unwrap()));
    DeformationField::new(Tensor::from_vec(&[2, size, size], data).unwrap()).unwrap()
}

/// Separable zero-padded Gaussian blur, kernel truncated at three sigma.
fn blur_gaussian(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    let mut norm = 0.0;
    for i in -half..=half {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in kernel.iter_mut() {
        *v /= norm;
    }

    let mut tmp = vec![0.0f64; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + ki as isize - half;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + ki as isize - half;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            plane[y * w + x] = acc;
        }
    }
}
