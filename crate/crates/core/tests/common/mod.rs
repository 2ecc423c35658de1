//! Fixture generators shared by the integration tests. Real MNIST, CIFAR-100
//! and LFW files are not bundled, so stand-ins with the same byte layouts are
//! produced here from a seed.

#![allow(dead_code)]

pub mod parsers;

use std::fs;
use std::path::Path;

use gradleak::data::{encode_pnm, Pnm, CIFAR_RECORD_LEN, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use gradleak::Rng;

pub fn idx_file(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

// Seven-segment layout on a unit box: (x0, y0, x1, y1).
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (0.0, 0.0, 1.0, 0.0),
    (1.0, 0.0, 1.0, 0.5),
    (1.0, 0.5, 1.0, 1.0),
    (0.0, 1.0, 1.0, 1.0),
    (0.0, 0.5, 0.0, 1.0),
    (0.0, 0.0, 0.0, 0.5),
    (0.0, 0.5, 1.0, 0.5),
];
const DIGIT_SEGMENTS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111,
    0b1111111, 0b1101111,
];

fn seg_distance(px: f64, py: f64, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt()
}

/// A 28×28 greyscale digit: jittered, slanted seven-segment strokes with
/// soft edges on a black background.
pub fn digit_image(rng: &mut Rng, digit: usize) -> Vec<u8> {
    let width = 9.0 + 4.0 * rng.next_f64();
    let height = 15.0 + 4.0 * rng.next_f64();
    let left = 14.0 - width / 2.0 + 3.0 * (rng.next_f64() - 0.5);
    let top = 14.0 - height / 2.0 + 3.0 * (rng.next_f64() - 0.5);
    let slant = 0.25 * (rng.next_f64() - 0.3);
    let thickness = 1.2 + 1.0 * rng.next_f64();
    let segs: Vec<_> = SEGMENTS
        .iter()
        .enumerate()
        .filter(|(i, _)| DIGIT_SEGMENTS[digit] >> i & 1 == 1)
        .map(|(_, &(x0, y0, x1, y1))| {
            let map = |x: f64, y: f64| (left + x * width + slant * (1.0 - y) * height, top + y * height);
            let (a, b) = map(x0, y0);
            let (c, d) = map(x1, y1);
            (a, b, c, d)
        })
        .collect();
    let mut out = Vec::with_capacity(28 * 28);
    for r in 0..28 {
        for c in 0..28 {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = segs.iter().map(|&s| seg_distance(px, py, s)).fold(f64::INFINITY, f64::min);
            let v = (thickness + 0.5 - d).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// IDX image and label files of `count` procedural digits.
pub fn mnist_bytes(seed: u64, count: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = Rng::new(seed);
    let mut pixels = Vec::with_capacity(count * 784);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let digit = rng.below(10);
        pixels.extend(digit_image(&mut rng, digit));
        labels.push(digit as u8);
    }
    let n = count as u32;
    (
        idx_file(IDX_IMAGES_MAGIC, &[n, 28, 28], &pixels),
        idx_file(IDX_LABELS_MAGIC, &[n], &labels),
    )
}

/// Writes the digit files into `dir` and returns the dataset spec string.
pub fn write_mnist(dir: &Path, seed: u64, count: usize) -> String {
    let (imgs, lbls) = mnist_bytes(seed, count);
    let ip = dir.join("images.idx");
    let lp = dir.join("labels.idx");
    fs::write(&ip, imgs).unwrap();
    fs::write(&lp, lbls).unwrap();
    format!("mnist:{},{}", ip.display(), lp.display())
}

/// A smooth colour image: background gradient plus a few soft blobs, as
/// channel-major R, G, B planes of side `side`.
pub fn blob_planes(rng: &mut Rng, side: usize) -> Vec<u8> {
    let mut planes = vec![0.0f64; 3 * side * side];
    let base: Vec<f64> = (0..3).map(|_| 0.2 + 0.6 * rng.next_f64()).collect();
    let tilt: Vec<f64> = (0..3).map(|_| 0.4 * (rng.next_f64() - 0.5)).collect();
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.next_f64() * side as f64,
                rng.next_f64() * side as f64,
                (0.1 + 0.25 * rng.next_f64()) * side as f64,
                [rng.next_f64() - 0.5, rng.next_f64() - 0.5, rng.next_f64() - 0.5],
            )
        })
        .collect();
    for ch in 0..3 {
        for r in 0..side {
            for c in 0..side {
                let mut v = base[ch] + tilt[ch] * (r as f64 / side as f64 - 0.5);
                for &(cx, cy, s, amp) in &blobs {
                    let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                    v += amp[ch] * (-d2 / (2.0 * s * s)).exp();
                }
                planes[(ch * side + r) * side + c] = v;
            }
        }
    }
    planes.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// CIFAR-100 binary records of smooth colour images with uniform fine labels.
pub fn cifar_bytes(seed: u64, count: usize) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count * CIFAR_RECORD_LEN);
    for _ in 0..count {
        let fine = rng.below(100) as u8;
        out.push(fine / 5);
        out.push(fine);
        out.extend(blob_planes(&mut rng, 32));
    }
    out
}

pub fn write_cifar(dir: &Path, seed: u64, count: usize) -> String {
    let p = dir.join("cifar.bin");
    fs::write(&p, cifar_bytes(seed, count)).unwrap();
    format!("cifar100:{}", p.display())
}

/// `root/class_NNN/img_K.ppm` with `per_class` smooth images of side `side`.
pub fn write_ppm_tree(root: &Path, seed: u64, classes: usize, per_class: usize, side: usize) {
    let mut rng = Rng::new(seed);
    for class in 0..classes {
        let dir = root.join(format!("class_{class:03}"));
        fs::create_dir_all(&dir).unwrap();
        for k in 0..per_class {
            let pnm = Pnm {
                channels: 3,
                width: side,
                height: side,
                planes: blob_planes(&mut rng, side),
            };
            fs::write(dir.join(format!("img_{k}.ppm")), encode_pnm(&pnm)).unwrap();
        }
    }
}
