//! Image samples, dataset ingestion (`root/<class>/<files>`, PNG and binary
//! PPM), and the synthetic shapes dataset used for desk-scale runs: colored
//! geometric foregrounds with class-coded hue on textured backgrounds.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// An RGB image in `[3, H, W]` layout with values in `[0, 1]`, plus an
/// optional class label.
#[derive(Debug, Clone)]
pub struct ImageSample<T: Scalar> {
    pub pixels: Tensor<T>,
    pub label: Option<usize>,
}

impl<T: Scalar> ImageSample<T> {
    pub fn new(pixels: Tensor<T>, label: Option<usize>) -> Result<Self> {
        let &[c, _, _] = pixels.shape() else {
            return Err(Error::Data(format!("expected [3, H, W] image, got {:?}", pixels.shape())));
        };
        if c != 3 {
            return Err(Error::Data(format!("expected 3 channels, got {c}")));
        }
        if !pixels.data().iter().all(|v| (0.0..=1.0).contains(&v.to_f64())) {
            return Err(Error::Data("pixel values outside [0, 1]".into()));
        }
        Ok(ImageSample { pixels, label })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

fn from_rgb8<T: Scalar>(rgb: &[u8], h: usize, w: usize, label: Option<usize>) -> ImageSample<T> {
    let mut data = vec![T::ZERO; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = T::from_f64(rgb[p * 3 + ch] as f64 / 255.0);
        }
    }
    ImageSample {
        pixels: Tensor::from_vec(data, &[3, h, w]).expect("shape"),
        label,
    }
}

fn load_ppm<T: Scalar>(path: &Path, label: Option<usize>) -> Result<ImageSample<T>> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    // header: "P6" <w> <h> <maxval> separated by whitespace/comments, then raw
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?.to_string());
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok(from_rgb8(&bytes[pos..pos + need], h, w, label))
}

fn load_png<T: Scalar>(path: &Path, label: Option<usize>) -> Result<ImageSample<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(from_rgb8(img.as_raw(), h, w, label))
}

/// Load one image file, dispatching on extension.
pub fn load_image<T: Scalar>(path: &Path, label: Option<usize>) -> Result<ImageSample<T>> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "ppm" => load_ppm(path, label),
        Some(ext) if ext == "png" => load_png(path, label),
        _ => Err(Error::Data(format!(
            "{}: unsupported format (expected .ppm or .png)",
            path.display()
        ))),
    }
}

/// A labeled image dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub samples: Vec<ImageSample<T>>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ingest `root/<class_name>/<image files>`. Classes and files are
    /// visited in sorted order so labels are stable across runs.
    pub fn from_dir(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!("{}: not a directory", root.display())));
        }
        let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Data(format!("{}: no class directories", root.display())));
        }
        let mut samples = Vec::new();
        let mut class_names = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            class_names.push(
                dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            );
            let mut files: Vec<_> = std::fs::read_dir(dir)?
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .map(|e| e.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                        Some(ref e) if e == "ppm" || e == "png"
                    )
                })
                .collect();
            files.sort();
            for file in files {
                samples.push(load_image(&file, Some(label))?);
            }
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("{}: no images found", root.display())));
        }
        Ok(Dataset { samples, class_names })
    }
}

/// hue (in turns), full saturation-ish HSV to RGB
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
}

/// One generated sample plus its ground-truth foreground mask (row-major
/// over pixels), kept for feature-analysis recall scoring.
#[derive(Debug, Clone)]
pub struct SynthSample<T: Scalar> {
    pub image: ImageSample<T>,
    pub foreground: Vec<bool>,
}

fn render_synth<T: Scalar>(label: usize, classes: usize, size: usize, rng: &mut ChaCha8Rng) -> SynthSample<T> {
    let hw = size * size;
    let mut px = vec![0.0f64; 3 * hw];

    // textured background: two low-frequency waves plus per-pixel noise,
    // in a muted color away from the class hues
    let base = 0.25 + rng.random_range(0.0..0.25);
    let (fx, fy) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0));
    let (phx, phy) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
    let tint: [f64; 3] = [
        rng.random_range(0.8..1.0),
        rng.random_range(0.8..1.0),
        rng.random_range(0.8..1.0),
    ];
    for y in 0..size {
        for x in 0..size {
            let wave = 0.08
                * ((x as f64 / size as f64 * fx * 6.28 + phx).sin()
                    + (y as f64 / size as f64 * fy * 6.28 + phy).sin());
            let noise = rng.random_range(-0.04..0.04);
            let v = (base + wave + noise).clamp(0.0, 1.0);
            for ch in 0..3 {
                px[ch * hw + y * size + x] = (v * tint[ch]).clamp(0.0, 1.0);
            }
        }
    }

    // class-coded foreground: hue from the class index, shape cycles
    let hue = label as f64 / classes.max(1) as f64;
    let color = hsv_to_rgb(hue, 0.85, 0.9);
    let shape = match label % 3 {
        0 => Shape::Disk,
        1 => Shape::Square,
        _ => Shape::Triangle,
    };
    // target fraction inside [0.2, 0.5] with margin for raster error
    let frac = rng.random_range(0.24..0.46);
    let s = size as f64;
    let mut fg = vec![false; hw];
    let inside: Box<dyn Fn(f64, f64) -> bool> = match shape {
        Shape::Disk => {
            let r = (frac * s * s / std::f64::consts::PI).sqrt();
            let cx = rng.random_range(r..s - r);
            let cy = rng.random_range(r..s - r);
            Box::new(move |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
        }
        Shape::Square => {
            let half = (frac * s * s).sqrt() / 2.0;
            let cx = rng.random_range(half..s - half);
            let cy = rng.random_range(half..s - half);
            Box::new(move |x, y| (x - cx).abs() <= half && (y - cy).abs() <= half)
        }
        Shape::Triangle => {
            // axis-aligned isoceles triangle, area = base*height/2
            let side = (2.0 * frac * s * s).sqrt();
            let x0 = rng.random_range(0.0..s - side);
            let y0 = rng.random_range(0.0..s - side);
            Box::new(move |x, y| {
                let (dx, dy) = (x - x0, y - y0);
                dx >= 0.0 && dy >= 0.0 && dy <= side && dx <= dy
            })
        }
    };
    for y in 0..size {
        for x in 0..size {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                fg[y * size + x] = true;
                for ch in 0..3 {
                    px[ch * hw + y * size + x] = color[ch];
                }
            }
        }
    }

    let data: Vec<T> = px.into_iter().map(T::from_f64).collect();
    SynthSample {
        image: ImageSample {
            pixels: Tensor::from_vec(data, &[3, size, size]).expect("shape"),
            label: Some(label),
        },
        foreground: fg,
    }
}

/// Generate `n` synthetic samples with their foreground masks. Deterministic
/// per seed: sample `i` draws from stream `i` of a seeded ChaCha8 generator,
/// so any subset can be regenerated independently.
pub fn synth_dataset_with_masks<T: Scalar>(
    n: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<SynthSample<T>>> {
    if size % 16 != 0 {
        return Err(Error::Config(format!("synthetic image size {size} not divisible by 16")));
    }
    if classes == 0 {
        return Err(Error::Config("synthetic dataset needs at least one class".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_synth(i % classes, classes, size, &mut rng)
        })
        .collect())
}

pub fn synth_dataset<T: Scalar>(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset<T>> {
    let samples = synth_dataset_with_masks(n, classes, size, seed)?
        .into_iter()
        .map(|s| s.image)
        .collect();
    Ok(Dataset {
        samples,
        class_names: (0..classes).map(|c| format!("class_{c}")).collect(),
    })
}

/// Parse a `synth:<n>x<classes>x<size>` data address; returns None when the
/// string does not carry the `synth:` prefix.
pub fn parse_synth_spec(spec: &str) -> Option<Result<(usize, usize, usize)>> {
    let rest = spec.strip_prefix("synth:")?;
    let parts: Vec<&str> = rest.split('x').collect();
    let parsed = (|| {
        if parts.len() != 3 {
            return Err(());
        }
        Ok((
            parts[0].parse().map_err(|_| ())?,
            parts[1].parse().map_err(|_| ())?,
            parts[2].parse().map_err(|_| ())?,
        ))
    })();
    Some(parsed.map_err(|_| {
        Error::Data(format!("bad synthetic dataset spec {spec:?}, expected synth:<n>x<classes>x<size>"))
    }))
}
