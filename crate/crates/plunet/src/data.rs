//! Synthetic datasets, PPM/PGM image files, and deterministic splits.
//!
//! Images travel as binary PPM (P6, 8-bit RGB, maxval 255) and masks
//! as binary PGM (P5, maxval 255) holding only 0 and 255. A dataset
//! directory is flat: `<id>.ppm` paired with `<id>_mask.pgm`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dims, Scalar, Tensor};

const BG_LEVEL: f64 = 0.15;
const NOISE_SIGMA: f64 = 0.08;
const FG_MIN: f64 = 0.02;
const FG_MAX: f64 = 0.60;
const MAX_RESAMPLES: usize = 100;

fn data_err(what: impl Into<String>) -> Error {
    Error::Data(what.into())
}

fn format_err(what: impl Into<String>) -> Error {
    Error::Format(what.into())
}

/// One image/mask pair. Image values live in [0, 1]; the mask holds
/// exactly 0 and 1 at the same spatial size.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn validate(&self) -> Result<()> {
        let i = self.image.dims();
        let m = self.mask.dims();
        if i.n != 1 || m.n != 1 || m.c != 1 {
            return Err(data_err(format!(
                "sample {:?} must be a single image with a single-channel mask",
                self.id
            )));
        }
        if i.h != m.h || i.w != m.w {
            return Err(data_err(format!(
                "sample {:?}: image is {}x{} but mask is {}x{}",
                self.id, i.h, i.w, m.h, m.w
            )));
        }
        for &v in self.mask.data() {
            if v != T::ZERO && v != T::ONE {
                return Err(data_err(format!(
                    "sample {:?}: mask value {v} is not binary",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    peak: f64,
    edge: f64,
}

impl Ellipse {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Ellipse {
        let lo = h as f64 / 8.0;
        let hi = h as f64 / 3.0;
        let theta = rng.random_range(0.0..PI);
        let peak = rng.random_range(0.75..0.90);
        Ellipse {
            cx: rng.random_range(0.0..w as f64),
            cy: rng.random_range(0.0..h as f64),
            a: rng.random_range(lo..hi),
            b: rng.random_range(lo..hi),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            peak,
            edge: peak - 0.20,
        }
    }

    /// Squared normalized radius of the pixel center; inside iff <= 1.
    fn radius2(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Generates `count` image/mask pairs of filled random ellipses on a
/// flat noisy background, fully determined by `seed`. Each accepted
/// mask covers between 2% and 60% of the frame; draws that land
/// outside that band are thrown away and resampled from the same
/// stream, so the output is still a pure function of the seed.
pub fn synth_generate<T: Scalar>(
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    if h < 32 || w < 32 {
        return Err(data_err(format!(
            "synthetic frames must be at least 32x32, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("sigma is positive");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let sample = synth_one(&mut rng, &noise, h, w, format!("synth_{i:04}"))?;
        out.push(sample);
    }
    Ok(out)
}

fn synth_one<T: Scalar>(
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    h: usize,
    w: usize,
    id: String,
) -> Result<Sample<T>> {
    for _ in 0..MAX_RESAMPLES {
        let n_ellipses = rng.random_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..n_ellipses)
            .map(|_| Ellipse::sample(rng, h, w))
            .collect();

        let mut lum = vec![BG_LEVEL; h * w];
        let mut fg = vec![false; h * w];
        let mut fg_count = 0usize;
        for y in 0..h {
            for x in 0..w {
                let mut best: Option<f64> = None;
                for e in &ellipses {
                    let r2 = e.radius2(x, y);
                    if r2 <= 1.0 {
                        let val = e.peak - (e.peak - e.edge) * r2.sqrt();
                        best = Some(best.map_or(val, |acc: f64| acc.max(val)));
                    }
                }
                if let Some(v) = best {
                    lum[y * w + x] = v;
                    fg[y * w + x] = true;
                    fg_count += 1;
                }
            }
        }

        let frac = fg_count as f64 / (h * w) as f64;
        if !(FG_MIN..=FG_MAX).contains(&frac) {
            continue;
        }

        let mut image = Tensor::zeros(dims(1, 3, h, w));
        {
            let img = image.data_mut();
            for ch in 0..3 {
                for (i, &l) in lum.iter().enumerate() {
                    let v = (l + noise.sample(rng)).clamp(0.0, 1.0);
                    img[ch * h * w + i] = T::from_f64(v);
                }
            }
        }
        let mut mask = Tensor::zeros(dims(1, 1, h, w));
        {
            let m = mask.data_mut();
            for (i, &is_fg) in fg.iter().enumerate() {
                m[i] = if is_fg { T::ONE } else { T::ZERO };
            }
        }
        return Ok(Sample { id, image, mask });
    }
    Err(data_err(format!(
        "could not draw a mask with foreground fraction in [{FG_MIN}, {FG_MAX}] after {MAX_RESAMPLES} tries"
    )))
}

struct PnmBody<'a> {
    w: usize,
    h: usize,
    pixels: &'a [u8],
}

/// Parses a binary PNM header (`P5` or `P6`), returning the raster.
/// Maxval must be 255; `#` comments in the header are skipped.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<PnmBody<'a>> {
    let err = |what: &str| format_err(format!("{}: {what}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(err(&format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err("malformed header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| err("header field overflows"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(&format!("maxval must be 255, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(err("zero-sized raster"));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let need = w * h * channels;
    let pixels = bytes
        .get(pos..pos + need)
        .ok_or_else(|| err("raster shorter than header promises"))?;
    if bytes.len() != pos + need {
        return Err(err("trailing bytes after raster"));
    }
    Ok(PnmBody { w, h, pixels })
}

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a P6 image into a (1, 3, H, W) tensor scaled to [0, 1].
pub fn load_image_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let body = parse_pnm(&bytes, "P6", path)?;
    let (w, h) = (body.w, body.h);
    let mut t = Tensor::zeros(dims(1, 3, h, w));
    let data = t.data_mut();
    for (i, px) in body.pixels.chunks_exact(3).enumerate() {
        for (ch, &b) in px.iter().enumerate() {
            data[ch * h * w + i] = T::from_f64(b as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Reads a P5 mask into a (1, 1, H, W) tensor of 0s and 1s. Pixels
/// must be exactly 0 or 255; anything else is rejected rather than
/// thresholded, so a raw grayscale image cannot pass as a mask.
pub fn load_mask_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let body = parse_pnm(&bytes, "P5", path)?;
    let (w, h) = (body.w, body.h);
    let mut t = Tensor::zeros(dims(1, 1, h, w));
    let data = t.data_mut();
    for (i, &b) in body.pixels.iter().enumerate() {
        if b != 0 && b != 255 {
            return Err(data_err(format!(
                "{}: mask pixel value {b} is not binary",
                path.display()
            )));
        }
        data[i] = if b >= 128 { T::ONE } else { T::ZERO };
    }
    Ok(t)
}

/// Writes a (1, 3, H, W) tensor as a P6 file, quantizing [0, 1] to 8 bits.
pub fn write_image_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let d = image.dims();
    if d.n != 1 || d.c != 3 {
        return Err(data_err(format!(
            "image for {} must be (1, 3, h, w), got {d:?}",
            path.display()
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", d.w, d.h).into_bytes();
    let data = image.data();
    let plane = d.h * d.w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(data[ch * plane + i]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes a (1, 1, H, W) binary tensor as a P5 file with values 0 and 255.
pub fn write_mask_pgm<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    let d = mask.dims();
    if d.n != 1 || d.c != 1 {
        return Err(data_err(format!(
            "mask for {} must be (1, 1, h, w), got {d:?}",
            path.display()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", d.w, d.h).into_bytes();
    for &v in mask.data() {
        if v == T::ZERO {
            out.push(0);
        } else if v == T::ONE {
            out.push(255);
        } else {
            return Err(data_err(format!(
                "mask for {} holds non-binary value {v}",
                path.display()
            )));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `<id>.ppm` and `<id>_mask.pgm` into `dir`.
pub fn save_sample<T: Scalar>(sample: &Sample<T>, dir: &Path) -> Result<()> {
    sample.validate()?;
    write_image_ppm(&dir.join(format!("{}.ppm", sample.id)), &sample.image)?;
    write_mask_pgm(&dir.join(format!("{}_mask.pgm", sample.id)), &sample.mask)?;
    Ok(())
}

/// Loads every `<id>.ppm`/`<id>_mask.pgm` pair in `dir`, sorted by id.
/// An image without its mask is an error, as is a size mismatch.
pub fn load_dir<T: Scalar>(dir: &Path) -> Result<Vec<Sample<T>>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        if ext == "ppm" {
            ids.push(stem.to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(data_err(format!(
            "{}: no .ppm images found",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image_ppm(&dir.join(format!("{id}.ppm")))?;
        let mask_path = dir.join(format!("{id}_mask.pgm"));
        if !mask_path.exists() {
            return Err(data_err(format!(
                "image {id:?} has no mask at {}",
                mask_path.display()
            )));
        }
        let mask = load_mask_pgm(&mask_path)?;
        let sample = Sample { id, image, mask };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

fn frac_train() -> f64 {
    0.6
}
fn frac_val() -> f64 {
    0.2
}
fn frac_test() -> f64 {
    0.2
}

/// Fractions and seed for the train/val/test partition.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "frac_train")]
    pub train: f64,
    #[serde(default = "frac_val")]
    pub val: f64,
    #[serde(default = "frac_test")]
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> SplitSpec {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(data_err("split fractions must lie in [0, 1]"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(data_err(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Shuffles with a seeded Fisher-Yates pass and cuts at
/// floor(train * n) and floor((train + val) * n); the remainder lands
/// in the test split. Ids must be unique so the partition is leak-free.
pub fn split<T: Scalar>(
    samples: Vec<Sample<T>>,
    spec: &SplitSpec,
) -> Result<(Vec<Sample<T>>, Vec<Sample<T>>, Vec<Sample<T>>)> {
    spec.validate()?;
    let n = samples.len();
    if n < 5 {
        return Err(data_err(format!("need at least 5 samples to split, got {n}")));
    }
    let mut ids = HashSet::new();
    for s in &samples {
        if !ids.insert(s.id.clone()) {
            return Err(data_err(format!("duplicate sample id {:?}", s.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shuffled = samples;
    for i in (1..shuffled.len()).rev() {
        let j = rng.random_range(0..=i);
        shuffled.swap(i, j);
    }
    let train_end = (spec.train * n as f64).floor() as usize;
    let val_end = ((spec.train + spec.val) * n as f64).floor() as usize;
    let test: Vec<_> = shuffled.drain(val_end..).collect();
    let val: Vec<_> = shuffled.drain(train_end..).collect();
    Ok((shuffled, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(t: &Tensor<f32>) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn same_seed_reproduces_the_dataset_bit_for_bit() {
        let a = synth_generate::<f32>(4, 48, 40, 7).unwrap();
        let b = synth_generate::<f32>(4, 48, 40, 7).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(bits(&x.image), bits(&y.image));
            assert_eq!(bits(&x.mask), bits(&y.mask));
        }
        let c = synth_generate::<f32>(4, 48, 40, 8).unwrap();
        assert_ne!(bits(&a[0].image), bits(&c[0].image));
    }

    #[test]
    fn generated_masks_are_binary_with_bounded_foreground() {
        for sample in synth_generate::<f32>(12, 64, 64, 3).unwrap() {
            sample.validate().unwrap();
            let fg: usize = sample
                .mask
                .data()
                .iter()
                .filter(|&&v| v == 1.0)
                .count();
            let frac = fg as f64 / sample.mask.len() as f64;
            assert!((0.02..=0.60).contains(&frac), "fraction {frac}");
            for &v in sample.image.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn tiny_frames_are_rejected() {
        assert!(synth_generate::<f32>(1, 31, 64, 0).is_err());
        assert!(synth_generate::<f32>(1, 64, 16, 0).is_err());
    }

    #[test]
    fn save_then_load_round_trips_masks_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate::<f32>(3, 40, 36, 11).unwrap();
        for s in &samples {
            save_sample(s, dir.path()).unwrap();
        }
        let loaded = load_dir::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(bits(&orig.mask), bits(&back.mask));
            assert_eq!(orig.image.dims(), back.image.dims());
            for (&a, &b) in orig.image.data().iter().zip(back.image.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn eight_bit_endpoints_map_to_exact_zero_and_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("endpoints.ppm");
        let mut image = Tensor::<f32>::zeros(dims(1, 3, 1, 2));
        for ch in 0..3 {
            image.data_mut()[ch * 2 + 1] = 1.0;
        }
        write_image_ppm(&path, &image).unwrap();
        let back = load_image_ppm::<f32>(&path).unwrap();
        for ch in 0..3 {
            assert_eq!(back.data()[ch * 2], 0.0);
            assert_eq!(back.data()[ch * 2 + 1], 1.0);
        }
    }

    #[test]
    fn gray_mask_pixels_are_rejected_not_thresholded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray_mask.pgm");
        fs::write(&path, b"P5\n2 1\n255\n\x00\x7f").unwrap();
        let err = load_mask_pgm::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("not binary"), "{err}");
    }

    #[test]
    fn mismatched_mask_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.ppm"),
            [b"P6\n2 2\n255\n".as_slice(), &[10u8; 12]].concat(),
        )
        .unwrap();
        fs::write(
            dir.path().join("a_mask.pgm"),
            [b"P5\n3 3\n255\n".as_slice(), &[0u8; 9]].concat(),
        )
        .unwrap();
        let err = load_dir::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mask is"), "{err}");
    }

    #[test]
    fn missing_mask_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("lonely.ppm"),
            [b"P6\n1 1\n255\n".as_slice(), &[0u8; 3]].concat(),
        )
        .unwrap();
        let err = load_dir::<f32>(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no mask"), "{err}");
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [(&str, &[u8]); 4] = [
            ("wrong_magic.ppm", b"P5\n1 1\n255\n\x00\x00\x00"),
            ("bad_maxval.ppm", b"P6\n1 1\n65535\n\x00\x00\x00"),
            ("short.ppm", b"P6\n2 2\n255\n\x00"),
            ("no_fields.ppm", b"P6garbage"),
        ];
        for (name, bytes) in cases {
            let path = dir.path().join(name);
            fs::write(&path, bytes).unwrap();
            assert!(load_image_ppm::<f32>(&path).is_err(), "{name}");
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("commented.pgm");
        fs::write(&path, b"P5\n# made by hand\n1 2\n255\n\x00\xff").unwrap();
        let mask = load_mask_pgm::<f32>(&path).unwrap();
        assert_eq!(mask.data(), &[0.0, 1.0]);
    }

    fn dummy_samples(n: usize) -> Vec<Sample<f32>> {
        (0..n)
            .map(|i| Sample {
                id: format!("s{i:03}"),
                image: Tensor::zeros(dims(1, 3, 1, 1)),
                mask: Tensor::zeros(dims(1, 1, 1, 1)),
            })
            .collect()
    }

    #[test]
    fn split_sizes_follow_floor_cuts() {
        let spec = SplitSpec::new(42);
        let (tr, va, te) = split(dummy_samples(10), &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        let (tr, va, te) = split(dummy_samples(670), &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (402, 134, 134));
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let spec = SplitSpec::new(9);
        let ids = |v: &[Sample<f32>]| -> Vec<String> {
            v.iter().map(|s| s.id.clone()).collect()
        };
        let (tr1, va1, te1) = split(dummy_samples(23), &spec).unwrap();
        let (tr2, va2, te2) = split(dummy_samples(23), &spec).unwrap();
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&va1), ids(&va2));
        assert_eq!(ids(&te1), ids(&te2));

        let mut all: Vec<String> = ids(&tr1);
        all.extend(ids(&va1));
        all.extend(ids(&te1));
        assert_eq!(all.len(), 23);
        let unique: HashSet<&String> = all.iter().collect();
        assert_eq!(unique.len(), 23);

        let (tr3, _, _) = split(dummy_samples(23), &SplitSpec::new(10)).unwrap();
        assert_ne!(ids(&tr1), ids(&tr3));
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split(dummy_samples(4), &SplitSpec::new(0)).is_err());

        let mut dup = dummy_samples(6);
        dup[5].id = dup[0].id.clone();
        assert!(split(dup, &SplitSpec::new(0)).is_err());

        let bad = SplitSpec {
            train: 0.5,
            val: 0.2,
            test: 0.2,
            seed: 0,
        };
        assert!(split(dummy_samples(6), &bad).is_err());
    }
}
