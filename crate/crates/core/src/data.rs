//! Dataset loaders. Every loader produces `C×32×32` images with pixels in
//! `[0, 1]` (raw bytes divided by 255) and class indices below the class
//! count.
//!
//! Supported sources:
//!
//! * MNIST IDX pairs: big-endian magic `0x00000803` for images (followed by
//!   count, rows, cols and one byte per pixel) and `0x00000801` for labels
//!   (count, one byte per label). 28×28 digits are resized to 32×32.
//! * CIFAR-100 binary: 3074-byte records of coarse label, fine label, then
//!   the R, G and B planes of a 32×32 image. The coarse label is dropped.
//! * A directory of class subdirectories holding binary PPM (P6, maxval 255)
//!   files. Class indices follow the lexicographic order of the subdirectory
//!   names.
//! * Seeded synthetic noise images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::IMAGE_SIDE;
use crate::tensor::{Rng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 2 + 3 * 32 * 32;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<Tensor>,
        labels: Vec<usize>,
        num_classes: usize,
        channels: usize,
    ) -> Result<Self> {
        let name = name.into();
        if images.is_empty() {
            return Err(Error::EmptyDataset(name));
        }
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{name}: {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let shape = [channels, IMAGE_SIDE, IMAGE_SIDE];
        for (i, (img, &label)) in images.iter().zip(&labels).enumerate() {
            if img.shape() != shape {
                return Err(Error::dim(format!(
                    "{name}: image {i} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            if label >= num_classes {
                return Err(Error::Index {
                    index: label,
                    len: num_classes,
                });
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "{name}: image {i} has pixels outside [0, 1]"
                )));
            }
        }
        Ok(Dataset {
            name,
            images,
            labels,
            num_classes,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn sample(&self, index: usize) -> Result<(&Tensor, usize)> {
        match (self.images.get(index), self.labels.get(index)) {
            (Some(img), Some(&label)) => Ok((img, label)),
            _ => Err(Error::InvalidArgument(format!(
                "sample index {index} out of range for {} samples in {}",
                self.len(),
                self.name
            ))),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], source: &'a str) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            source,
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let chunk = self.take(4, what)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.source,
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.source,
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Parses an IDX image file into `1×rows×cols` tensors at native resolution,
/// pixels divided by 255.
pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<Vec<Tensor>> {
    let mut r = ByteReader::new(bytes, source);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::parse(
            source,
            0,
            format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = r.u32_be("image count")? as usize;
    let dims_at = r.pos;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::parse(source, dims_at, format!("empty image extent {rows}×{cols}")));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let raw = r.take(rows * cols, &format!("image {i}"))?;
        let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(Tensor::new(&[1, rows, cols], data)?);
    }
    r.expect_end()?;
    Ok(images)
}

pub fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<u8>> {
    let mut r = ByteReader::new(bytes, source);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::parse(
            source,
            0,
            format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = r.u32_be("label count")? as usize;
    let labels = r.take(count, "labels")?.to_vec();
    r.expect_end()?;
    Ok(labels)
}

pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_file(ip)?, &ip.display().to_string())?;
    let lsrc = lp.display().to_string();
    let labels = parse_idx_labels(&read_file(lp)?, &lsrc)?;
    if images.len() != labels.len() {
        return Err(Error::parse(
            lsrc,
            4,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::parse(lsrc, 8 + pos, format!("label {} is not a digit", labels[pos])));
    }
    let images = images
        .iter()
        .map(|img| resize_bilinear(img, IMAGE_SIDE))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new("mnist", images, labels.into_iter().map(usize::from).collect(), 10, 1)
}

pub fn parse_cifar100(bytes: &[u8], source: &str) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD_LEN;
        return Err(Error::parse(
            source,
            offset,
            format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD_LEN}-byte record",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in bytes.chunks(CIFAR_RECORD_LEN).enumerate() {
        let fine = rec[1] as usize;
        if fine >= 100 {
            return Err(Error::parse(
                source,
                i * CIFAR_RECORD_LEN + 1,
                format!("fine label {fine} out of range"),
            ));
        }
        let data = rec[2..].iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(Tensor::new(&[3, 32, 32], data)?);
        labels.push(fine);
    }
    Dataset::new("cifar100", images, labels, 100, 3)
}

pub fn load_cifar100(bin_path: impl AsRef<Path>) -> Result<Dataset> {
    let p = bin_path.as_ref();
    parse_cifar100(&read_file(p)?, &p.display().to_string())
}

/// A decoded binary PNM image (P5 or P6, maxval 255) in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// `channels × height × width` bytes.
    pub planes: Vec<u8>,
}

impl Pnm {
    pub fn to_tensor(&self) -> Tensor {
        let data = self.planes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("extents are positive")
    }
}

/// Decodes a binary P5 (grey) or P6 (RGB) file with maxval 255.
pub fn decode_pnm(bytes: &[u8], source: &str) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::parse(source, 0, "not a binary PGM/PPM (P5/P6) file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (n, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(source, start, format!("missing header field {}", n + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::parse(source, start, "invalid header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::parse(source, pos, format!("maxval {maxval} unsupported, need 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(source, pos, "expected whitespace after header"));
    }
    pos += 1;
    let len = width * height * channels;
    let payload = bytes.get(pos..pos + len).ok_or_else(|| {
        Error::parse(
            source,
            bytes.len(),
            format!("truncated pixel data: need {len} bytes, {} present", bytes.len() - pos),
        )
    })?;
    let mut planes = vec![0u8; len];
    let plane = width * height;
    for (i, &b) in payload.iter().enumerate() {
        planes[(i % channels) * plane + i / channels] = b;
    }
    Ok(Pnm {
        channels,
        width,
        height,
        planes,
    })
}

/// Encodes channel-major bytes as P5 (one channel) or P6 (three channels).
pub fn encode_pnm(pnm: &Pnm) -> Vec<u8> {
    let magic = if pnm.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", pnm.width, pnm.height).into_bytes();
    let plane = pnm.width * pnm.height;
    for i in 0..plane {
        for c in 0..pnm.channels {
            out.push(pnm.planes[c * plane + i]);
        }
    }
    out
}

/// Loads `root/<class>/<image>.ppm`, one class per subdirectory in
/// lexicographic order. Hidden entries are skipped.
pub fn load_image_dir(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let list = |dir: &Path, want_dirs: bool| -> Result<Vec<std::path::PathBuf>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            let ty = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
            if ty.is_dir() == want_dirs {
                out.push(entry.path());
            }
        }
        out.sort();
        Ok(out)
    };
    let classes = list(root, true)?;
    if classes.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, dir) in classes.iter().enumerate() {
        for file in list(dir, false)? {
            let source = file.display().to_string();
            let bytes = read_file(&file)?;
            if !bytes.starts_with(b"P6") {
                return Err(Error::parse(source, 0, "not a binary PPM (P6) file"));
            }
            let pnm = decode_pnm(&bytes, &source)?;
            images.push(resize_bilinear(&pnm.to_tensor(), IMAGE_SIDE)?);
            labels.push(class);
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("{} contains no images", root.display())));
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "images".into());
    Dataset::new(name, images, labels, classes.len(), 3)
}

/// Uniform-noise images with uniform labels, drawn image then label per
/// sample.
pub fn synthetic_dataset(rng: &mut Rng, count: usize, channels: usize, num_classes: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::EmptyDataset("synthetic dataset with count 0".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        images.push(rng.sample_uniform(&[channels, IMAGE_SIDE, IMAGE_SIDE], 0.0, 1.0)?);
        labels.push(rng.below(num_classes));
    }
    Dataset::new("synthetic", images, labels, num_classes, channels)
}

/// Source coordinate table for one axis: `(low index, high index, weight of
/// high)` per output position, half-pixel centres, clamped at the borders.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` image to `C×side×side` (half-pixel centres,
/// edge clamped). Interpolation is written as `a + t(b - a)`, so constant
/// images stay exactly constant.
pub fn resize_bilinear(img: &Tensor, out_side: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::dim(format!("resize expects C×H×W, got {:?}", img.shape())));
    };
    if out_side == 0 {
        return Err(Error::dim("resize to zero size"));
    }
    if h == out_side && w == out_side {
        return Ok(img.clone());
    }
    let rows = axis_taps(h, out_side);
    let cols = axis_taps(w, out_side);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_side * out_side);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, ty) in &rows {
            for &(c0, c1, tx) in &cols {
                let (a, b) = (plane[r0 * w + c0], plane[r0 * w + c1]);
                let (d, e) = (plane[r1 * w + c0], plane[r1 * w + c1]);
                let top = a + tx * (b - a);
                let bottom = d + tx * (e - d);
                out.push(top + ty * (bottom - top));
            }
        }
    }
    Tensor::new(&[c, out_side, out_side], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for n in [count, rows, cols] {
            v.extend(n.to_be_bytes());
        }
        v.extend(pixels);
        v
    }

    #[test]
    fn idx_magic_is_checked() {
        let good = idx_images(1, 2, 2, &[0, 1, 2, 3]);
        assert_eq!(parse_idx_images(&good, "t").unwrap().len(), 1);
        let mut bad = good.clone();
        bad[3] = 0x01;
        let err = parse_idx_images(&bad, "t").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let short = idx_images(2, 2, 2, &[0; 6]);
        match parse_idx_images(&short, "t").unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 16 + 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn constant_resize_is_exact() {
        for &(h, w, side) in &[(28, 28, 32), (64, 64, 32), (3, 7, 32), (1, 1, 5)] {
            let img = Tensor::full(&[2, h, w], 0.3);
            let out = resize_bilinear(&img, side).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn resize_identity() {
        let img = Rng::new(3).sample_normal(&[3, 32, 32]);
        assert_eq!(resize_bilinear(&img, 32).unwrap(), img);
    }

    #[test]
    fn resize_matches_per_pixel_oracle() {
        let img = Rng::new(4).sample_uniform(&[2, 8, 8], 0.0, 1.0).unwrap();
        let out = resize_bilinear(&img, 32).unwrap();
        let at = |c: usize, y: usize, x: usize| img.data()[(c * 8 + y) * 8 + x];
        let mut max_rel: f64 = 0.0;
        for c in 0..2 {
            for oy in 0..32 {
                for ox in 0..32 {
                    let sy = ((oy as f64 + 0.5) * 8.0 / 32.0 - 0.5).clamp(0.0, 7.0);
                    let sx = ((ox as f64 + 0.5) * 8.0 / 32.0 - 0.5).clamp(0.0, 7.0);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(7), (x0 + 1).min(7));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let want = (1.0 - fy) * (1.0 - fx) * at(c, y0, x0)
                        + (1.0 - fy) * fx * at(c, y0, x1)
                        + fy * (1.0 - fx) * at(c, y1, x0)
                        + fy * fx * at(c, y1, x1);
                    let got = out.data()[(c * 32 + oy) * 32 + ox];
                    max_rel = max_rel.max(((got - want) / want).abs());
                }
            }
        }
        assert!(max_rel < 1e-12, "{max_rel}");
    }

    #[test]
    fn resize_roughly_preserves_mean() {
        let img = Rng::new(5).sample_uniform(&[1, 28, 28], 0.0, 1.0).unwrap();
        let out = resize_bilinear(&img, 32).unwrap();
        let m_in = img.sum() / img.len() as f64;
        let m_out = out.sum() / out.len() as f64;
        assert!(((m_out - m_in) / m_in).abs() < 0.05);
    }

    #[test]
    fn cifar_length_checked() {
        let err = parse_cifar100(&[0u8; CIFAR_RECORD_LEN + 3], "c").unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == CIFAR_RECORD_LEN));
        assert!(parse_cifar100(&[], "c").is_err());
    }

    #[test]
    fn pnm_header_with_comments() {
        let mut bytes = b"P6 # comment\n2 1\n# more\n255\n".to_vec();
        bytes.extend([10, 20, 30, 40, 50, 60]);
        let p = decode_pnm(&bytes, "p").unwrap();
        assert_eq!((p.channels, p.width, p.height), (3, 2, 1));
        assert_eq!(p.planes, vec![10, 40, 20, 50, 30, 60]);
        assert_eq!(decode_pnm(&encode_pnm(&p), "p").unwrap(), p);
    }

    #[test]
    fn pnm_rejects_bad_input() {
        assert!(decode_pnm(b"P3\n1 1\n255\n1 2 3", "p").is_err());
        assert!(decode_pnm(b"P6\n1 1\n65535\n", "p").is_err());
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00\x00", "p").is_err());
        assert!(decode_pnm(b"P6\n2\n", "p").is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_in_range() {
        let a = synthetic_dataset(&mut Rng::new(9), 20, 3, 10).unwrap();
        let b = synthetic_dataset(&mut Rng::new(9), 20, 3, 10).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.iter().all(|i| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synthetic_dataset(&mut Rng::new(9), 0, 3, 10).is_err());
    }

    #[test]
    fn synthetic_label_histogram() {
        let d = synthetic_dataset(&mut Rng::new(10), 10_000, 1, 10).unwrap();
        let mut hist = [0usize; 10];
        d.labels.iter().for_each(|&l| hist[l] += 1);
        // 1000 ± 150 is beyond 5 binomial standard deviations (σ = 30)
        assert!(hist.iter().all(|&n| (850..=1150).contains(&n)), "{hist:?}");
    }
}
