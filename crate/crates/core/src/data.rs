//! In-memory datasets, deterministic shuffling, expanded-MNIST placement and
//! synthetic affine test sets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng};

/// Images `[n, c, h, w]` in `[0, 1]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub n_classes: usize,
    /// Seed of the last shuffle applied (0 if never shuffled).
    pub seed: u64,
}

impl DatasetSplit {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<u8>, n_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::InvalidArgument(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                bound: n_classes,
            });
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            n_classes,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n: usize = self.image_shape().iter().product();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// New split holding the given samples, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("cannot build an empty split".into()));
        }
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, bound: self.len() });
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok(Self {
            name: self.name.clone(),
            images: Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            n_classes: self.n_classes,
            seed: self.seed,
        })
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Splits into `[0, n)` and `[n, len)`.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} must lie strictly inside 0..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    /// Seeded permutation of the samples.
    pub fn shuffled(&self, seed: u64) -> Self {
        let order = permutation(self.len(), &mut seeded_rng(seed));
        let mut out = self.select(&order).expect("permutation of a non-empty split");
        out.seed = seed;
        out
    }

    /// Images and labels of `indices` as a model batch.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, bound: self.len() });
            }
            data.extend(self.image(i).iter().map(|&p| T::from_f64(p as f64)));
            labels.push(self.labels[i] as usize);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }
}

/// Uniform random permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Contiguous index batches over a seeded permutation; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    permutation(n, rng).chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Copies a `[c, h, w]` image into a zero `[c, canvas, canvas]` canvas with
/// its top-left corner at `(row, col)`.
pub fn place(image: &[f32], shape: [usize; 3], canvas: usize, row: usize, col: usize) -> Vec<f32> {
    let [c, h, w] = shape;
    assert!(row + h <= canvas && col + w <= canvas, "image does not fit the canvas");
    let mut out = vec![0.0; c * canvas * canvas];
    for ch in 0..c {
        for y in 0..h {
            let src = &image[(ch * h + y) * w..][..w];
            out[(ch * canvas + row + y) * canvas + col..][..w].copy_from_slice(src);
        }
    }
    out
}

/// Places every image at a uniform integer offset in `[0, canvas - h]` x
/// `[0, canvas - w]`. Returns the new split and the `(row, col)` offsets.
pub fn expand_mnist(split: &DatasetSplit, canvas: usize, rng: &mut Rng) -> Result<(DatasetSplit, Vec<(usize, usize)>)> {
    let [c, h, w] = split.image_shape();
    if canvas < h || canvas < w {
        return Err(Error::Geometry(format!(
            "canvas {canvas} smaller than images {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(split.len() * c * canvas * canvas);
    let mut offsets = Vec::with_capacity(split.len());
    for i in 0..split.len() {
        let row = rng.random_range(0..=canvas - h);
        let col = rng.random_range(0..=canvas - w);
        data.extend(place(split.image(i), [c, h, w], canvas, row, col));
        offsets.push((row, col));
    }
    let images = Tensor::new(&[split.len(), c, canvas, canvas], data)?;
    let out = DatasetSplit {
        name: format!("{}-expanded", split.name),
        images,
        labels: split.labels.clone(),
        n_classes: split.n_classes,
        seed: split.seed,
    };
    Ok((out, offsets))
}

/// Ranges of the random affine maps. All ranges are symmetric about the
/// identity except `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AffineSpec {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute horizontal shear factor.
    pub shear: f64,
    /// Isotropic scale range.
    pub scale: [f64; 2],
    /// Maximum absolute translation in pixels per axis, further limited so
    /// the digit stays on the canvas.
    pub translation: f64,
    pub canvas: usize,
    pub seed: u64,
}

impl Default for AffineSpec {
    fn default() -> Self {
        Self::standard(0)
    }
}

impl AffineSpec {
    /// Rotation +-20 degrees, shear +-0.2, scale 0.8-1.2, translation up to
    /// 6 pixels on a 40x40 canvas.
    pub fn standard(seed: u64) -> Self {
        Self {
            rotation_deg: 20.0,
            shear: 0.2,
            scale: [0.8, 1.2],
            translation: 6.0,
            canvas: 40,
            seed,
        }
    }

    pub fn identity(seed: u64) -> Self {
        Self {
            rotation_deg: 0.0,
            shear: 0.0,
            scale: [1.0, 1.0],
            translation: 0.0,
            canvas: 40,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.rotation_deg, self.shear, self.scale[0], self.scale[1], self.translation]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.rotation_deg < 0.0 || self.shear < 0.0 || self.translation < 0.0 {
            return Err(Error::Config("affine ranges must be finite and non-negative".into()));
        }
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return Err(Error::Config(format!("invalid scale range {:?}", self.scale)));
        }
        Ok(())
    }
}

/// `p -> matrix (p - center) + center + translation` on `(x, y)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        matrix: [[1.0, 0.0], [0.0, 1.0]],
        translation: [0.0, 0.0],
    };

    /// Rotation, then shear, then scale read right to left:
    /// `R(deg) * [[1, shear], [0, 1]] * scale`.
    pub fn new(rotation_deg: f64, shear: f64, scale: f64, translation: [f64; 2]) -> Self {
        let t = rotation_deg.to_radians();
        let (s, c) = (Float::sin(t), Float::cos(t));
        let r = [[c, -s], [s, c]];
        let sh = [[scale, shear * scale], [0.0, scale]];
        Self {
            matrix: mat_mul(r, sh),
            translation,
        }
    }

    pub fn rotation(deg: f64) -> Self {
        Self::new(deg, 0.0, 1.0, [0.0, 0.0])
    }

    /// Image of point `p` (relative to center `center`).
    pub fn apply_point(&self, p: [f64; 2], center: f64) -> [f64; 2] {
        let d = [p[0] - center, p[1] - center];
        let m = self.matrix;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + center + self.translation[0],
            m[1][0] * d[0] + m[1][1] * d[1] + center + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Option<Self> {
        let [[a, b], [c, d]] = self.matrix;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = self.translation;
        Some(Self {
            matrix: inv,
            translation: [-(inv[0][0] * t[0] + inv[0][1] * t[1]), -(inv[1][0] * t[0] + inv[1][1] * t[1])],
        })
    }
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Resamples a square `[c, n, n]` image under `t` (about the image center)
/// with bilinear interpolation; samples outside the source are zero.
pub fn apply_affine(image: &[f32], channels: usize, size: usize, t: &AffineTransform) -> Result<Vec<f32>> {
    if image.len() != channels * size * size {
        return Err(Error::shape("apply_affine", &[image.len()], &[channels, size, size]));
    }
    let inv = t
        .inverse()
        .ok_or_else(|| Error::InvalidArgument("affine map is singular".into()))?;
    let center = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; image.len()];
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
            0.0
        } else {
            image[(ch * size + y as usize) * size + x as usize] as f64
        }
    };
    for y in 0..size {
        for x in 0..size {
            let [sx, sy] = inv.apply_point([x as f64, y as f64], center);
            let (x0, y0) = (Float::floor(sx), Float::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..channels {
                let v = (1.0 - fy) * ((1.0 - fx) * at(ch, y0, x0) + fx * at(ch, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(ch, y0 + 1, x0) + fx * at(ch, y0 + 1, x0 + 1));
                out[(ch * size + y) * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

/// Bounding box `(x_min, y_min, x_max, y_max)` of the non-zero pixels of a
/// `[c, n, n]` image, or `None` for a blank image.
fn ink_bbox(image: &[f32], channels: usize, size: usize) -> Option<[f64; 4]> {
    let mut bbox: Option<[f64; 4]> = None;
    for ch in 0..channels {
        for y in 0..size {
            for x in 0..size {
                if image[(ch * size + y) * size + x] > 0.0 {
                    let (xf, yf) = (x as f64, y as f64);
                    bbox = Some(match bbox {
                        None => [xf, yf, xf, yf],
                        Some(b) => [b[0].min(xf), b[1].min(yf), b[2].max(xf), b[3].max(yf)],
                    });
                }
            }
        }
    }
    bbox
}

fn fits(t: &AffineTransform, bbox: [f64; 4], size: usize) -> bool {
    let center = (size as f64 - 1.0) / 2.0;
    let limit = size as f64 - 1.0;
    // one pixel of slack for the bilinear footprint
    let corners = [
        [bbox[0] - 1.0, bbox[1] - 1.0],
        [bbox[2] + 1.0, bbox[1] - 1.0],
        [bbox[0] - 1.0, bbox[3] + 1.0],
        [bbox[2] + 1.0, bbox[3] + 1.0],
    ];
    corners.iter().all(|&p| {
        let [x, y] = t.apply_point(p, center);
        (0.0..=limit).contains(&x) && (0.0..=limit).contains(&y)
    })
}

/// Draws a transform within `spec` that keeps the ink of `image` on the
/// canvas. Falls back to the identity after repeated misses.
pub fn sample_affine(spec: &AffineSpec, image: &[f32], channels: usize, rng: &mut Rng) -> AffineTransform {
    let size = spec.canvas;
    let Some(bbox) = ink_bbox(image, channels, size) else {
        return AffineTransform::IDENTITY;
    };
    let sym = |rng: &mut Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    for _ in 0..64 {
        let rot = sym(rng, spec.rotation_deg);
        let shear = sym(rng, spec.shear);
        let scale = if spec.scale[1] > spec.scale[0] {
            rng.random_range(spec.scale[0]..=spec.scale[1])
        } else {
            spec.scale[0]
        };
        let tx = sym(rng, spec.translation);
        let ty = sym(rng, spec.translation);
        let t = AffineTransform::new(rot, shear, scale, [tx, ty]);
        if fits(&t, bbox, size) {
            return t;
        }
    }
    AffineTransform::IDENTITY
}

/// Centres each image on a `spec.canvas` canvas and applies an independent
/// random affine map to it. Labels are unchanged.
pub fn affine_test_set(split: &DatasetSplit, spec: &AffineSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let [c, h, w] = split.image_shape();
    let size = spec.canvas;
    if size < h || size < w || (size - h) % 2 != 0 || (size - w) % 2 != 0 {
        return Err(Error::Geometry(format!(
            "cannot centre {h}x{w} images on a {size}x{size} canvas"
        )));
    }
    let mut rng = seeded_rng(spec.seed);
    let mut data = Vec::with_capacity(split.len() * c * size * size);
    for i in 0..split.len() {
        let centred = place(split.image(i), [c, h, w], size, (size - h) / 2, (size - w) / 2);
        let t = sample_affine(spec, &centred, c, &mut rng);
        data.extend(apply_affine(&centred, c, size, &t)?);
    }
    Ok(DatasetSplit {
        name: format!("{}-affine", split.name),
        images: Tensor::new(&[split.len(), c, size, size], data)?,
        labels: split.labels.clone(),
        n_classes: split.n_classes,
        seed: spec.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> DatasetSplit {
        let mut data = vec![0.0f32; n * 28 * 28];
        for (i, img) in data.chunks_mut(28 * 28).enumerate() {
            for y in 8..20 {
                for x in 10..18 {
                    img[y * 28 + x] = ((i + x + y) % 7) as f32 / 7.0 + 0.1;
                }
            }
        }
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        DatasetSplit::new("toy", Tensor::new(&[n, 1, 28, 28], data).unwrap(), labels, 10).unwrap()
    }

    #[test]
    fn constructor_checks() {
        let imgs = Tensor::full(&[2, 1, 2, 2], 0.5f32);
        assert!(DatasetSplit::new("x", imgs.clone(), vec![0], 10).is_err());
        assert!(DatasetSplit::new("x", imgs.clone(), vec![0, 10], 10).is_err());
        assert!(DatasetSplit::new("x", Tensor::full(&[1, 1, 1, 1], 2.0), vec![0], 10).is_err());
        assert!(DatasetSplit::new("x", imgs, vec![0, 9], 10).is_ok());
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let s = toy(30);
        let a = s.shuffled(4);
        let b = s.shuffled(4);
        assert_eq!(a, b);
        let mut la = a.labels.clone();
        let mut ls = s.labels.clone();
        la.sort();
        ls.sort();
        assert_eq!(la, ls);
        assert_ne!(a.labels, s.labels);
    }

    #[test]
    fn placement_at_origin_and_conservation() {
        let s = toy(3);
        let placed = place(s.image(0), [1, 28, 28], 40, 0, 0);
        for y in 0..28 {
            assert_eq!(&placed[y * 40..y * 40 + 28], &s.image(0)[y * 28..(y + 1) * 28]);
        }
        let (e, offsets) = expand_mnist(&s, 40, &mut seeded_rng(1)).unwrap();
        assert_eq!(e.image_shape(), [1, 40, 40]);
        for (i, &(row, col)) in offsets.iter().enumerate() {
            let a: f32 = s.image(i).iter().sum();
            let b: f32 = e.image(i).iter().sum();
            assert_eq!(a, b);
            assert!(row <= 12 && col <= 12);
        }
    }

    #[test]
    fn identity_affine_equals_centered_placement() {
        let s = toy(4);
        let a = affine_test_set(&s, &AffineSpec::identity(3)).unwrap();
        for i in 0..4 {
            assert_eq!(a.image(i), place(s.image(i), [1, 28, 28], 40, 6, 6).as_slice());
        }
        assert_eq!(a.labels, s.labels);
    }

    #[test]
    fn two_half_turns_are_identity() {
        let s = toy(1);
        let img = place(s.image(0), [1, 28, 28], 40, 6, 6);
        let half = AffineTransform::rotation(180.0);
        let once = apply_affine(&img, 1, 40, &half).unwrap();
        let twice = apply_affine(&once, 1, 40, &half).unwrap();
        let mad: f32 = img.iter().zip(&twice).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.len() as f32;
        assert!(mad < 1e-3, "mean abs diff {mad}");
    }

    #[test]
    fn standard_affine_keeps_ink_on_canvas() {
        let s = toy(20);
        let a = affine_test_set(&s, &AffineSpec::standard(5)).unwrap();
        for i in 0..20 {
            let img = a.image(i);
            let border: f32 = (0..40).map(|k| img[k] + img[39 * 40 + k] + img[k * 40] + img[k * 40 + 39]).sum();
            assert_eq!(border, 0.0);
            assert!(img.iter().any(|&p| p > 0.0));
        }
    }
}
