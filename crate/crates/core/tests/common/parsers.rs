//! Parser round-trip and corruption checks on hand-built fixtures. Each
//! check returns a description of the first violation.

use std::fs;
use std::path::Path;

use gradleak::data::{
    decode_pnm, encode_pnm, load_cifar100, load_image_dir, load_mnist, parse_cifar100, parse_idx_images,
    parse_idx_labels, Dataset, Pnm, CIFAR_RECORD_LEN, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use gradleak::harness::export_image;
use gradleak::{Error, Tensor};

use super::idx_file;

pub type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn located(err: Error, len: usize) -> Check {
    match err {
        Error::Parse { offset, .. } if offset <= len => Ok(()),
        other => Err(format!("expected a located parse error, got {other}")),
    }
}

fn dataset_invariants(ds: &Dataset) -> Check {
    for (i, (img, &l)) in ds.images.iter().zip(&ds.labels).enumerate() {
        ensure!(img.shape() == [ds.channels, 32, 32], "image {i} shape {:?}", img.shape());
        ensure!(l < ds.num_classes, "label {l} of image {i}");
        ensure!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "image {i} out of range");
    }
    Ok(())
}

/// Two hand-written 28×28 records: each parsed pixel times 255 is the source
/// byte, an all-zero record resizes to all zeros.
pub fn idx_round_trip(dir: &Path) -> Check {
    let mut pixels = vec![0u8; 2 * 784];
    for (i, p) in pixels[784..].iter_mut().enumerate() {
        *p = ((i * 37 + 11) % 256) as u8;
    }
    let images = idx_file(IDX_IMAGES_MAGIC, &[2, 28, 28], &pixels);
    let labels = idx_file(IDX_LABELS_MAGIC, &[2], &[3, 9]);
    let parsed = parse_idx_images(&images, "images").map_err(|e| e.to_string())?;
    ensure!(parsed.len() == 2, "{} records", parsed.len());
    for (k, img) in parsed.iter().enumerate() {
        ensure!(img.shape() == [1, 28, 28], "native shape {:?}", img.shape());
        for (i, &v) in img.data().iter().enumerate() {
            let byte = pixels[k * 784 + i];
            ensure!(v * 255.0 == f64::from(byte), "record {k} pixel {i}: {v} vs byte {byte}");
        }
    }
    let ip = dir.join("rt-images.idx");
    let lp = dir.join("rt-labels.idx");
    fs::write(&ip, &images).map_err(|e| e.to_string())?;
    fs::write(&lp, &labels).map_err(|e| e.to_string())?;
    let ds = load_mnist(&ip, &lp).map_err(|e| e.to_string())?;
    ensure!(ds.labels == [3, 9], "labels {:?}", ds.labels);
    ensure!(ds.channels == 1 && ds.num_classes == 10, "metadata");
    ensure!(ds.images[0].data().iter().all(|&v| v == 0.0), "zero record not zero after resize");
    dataset_invariants(&ds)
}

/// Wrong magic, truncation at every length, trailing bytes and count
/// mismatch are all rejected with an offset inside the file.
pub fn idx_corruptions(dir: &Path) -> Check {
    let images = idx_file(IDX_IMAGES_MAGIC, &[2, 28, 28], &[7u8; 2 * 784]);
    let labels = idx_file(IDX_LABELS_MAGIC, &[2], &[1, 2]);

    let wrong = idx_file(IDX_LABELS_MAGIC, &[2, 28, 28], &[7u8; 2 * 784]);
    located(parse_idx_images(&wrong, "x").err().ok_or("label magic accepted for images")?, wrong.len())?;
    let wrong = idx_file(IDX_IMAGES_MAGIC, &[2], &[1, 2]);
    located(parse_idx_labels(&wrong, "x").err().ok_or("image magic accepted for labels")?, wrong.len())?;

    for cut in 0..images.len() {
        let err = parse_idx_images(&images[..cut], "x").err().ok_or(format!("image file cut at {cut} accepted"))?;
        located(err, cut)?;
    }
    for cut in 0..labels.len() {
        let err = parse_idx_labels(&labels[..cut], "x").err().ok_or(format!("label file cut at {cut} accepted"))?;
        located(err, cut)?;
    }
    let mut long = images.clone();
    long.push(0);
    located(parse_idx_images(&long, "x").err().ok_or("trailing byte accepted")?, long.len())?;

    let ip = dir.join("mm-images.idx");
    let lp = dir.join("mm-labels.idx");
    fs::write(&ip, &images).map_err(|e| e.to_string())?;
    fs::write(&lp, idx_file(IDX_LABELS_MAGIC, &[3], &[1, 2, 3])).map_err(|e| e.to_string())?;
    located(load_mnist(&ip, &lp).err().ok_or("count mismatch accepted")?, 11)?;
    fs::write(&lp, idx_file(IDX_LABELS_MAGIC, &[2], &[1, 12])).map_err(|e| e.to_string())?;
    located(load_mnist(&ip, &lp).err().ok_or("label 12 accepted")?, 10)?;
    Ok(())
}

fn cifar_record(coarse: u8, fine: u8, pixels: &[u8]) -> Vec<u8> {
    let mut r = vec![coarse, fine];
    r.extend_from_slice(pixels);
    r
}

/// Fine label, scaling and the R/G/B plane layout.
pub fn cifar_round_trip(dir: &Path) -> Check {
    let ds = parse_cifar100(&cifar_record(1, 7, &[0u8; 3072]), "c").map_err(|e| e.to_string())?;
    ensure!(ds.labels == [7], "labels {:?}", ds.labels);
    ensure!(ds.num_classes == 100 && ds.channels == 3, "metadata");

    let ds = parse_cifar100(&cifar_record(0, 0, &[255u8; 3072]), "c").map_err(|e| e.to_string())?;
    ensure!(ds.images[0].data().iter().all(|&v| v == 1.0), "all-255 record is not all 1.0");

    // red at (0, 0), green at (0, 1), blue at (31, 31), everything else 0
    let mut px = vec![0u8; 3072];
    px[0] = 200;
    px[1024 + 1] = 100;
    px[2048 + 1023] = 50;
    let two = [cifar_record(2, 42, &px), cifar_record(3, 99, &[0u8; 3072])].concat();
    let path = dir.join("c.bin");
    fs::write(&path, &two).map_err(|e| e.to_string())?;
    let ds = load_cifar100(&path).map_err(|e| e.to_string())?;
    ensure!(ds.labels == [42, 99], "labels {:?}", ds.labels);
    let img = ds.images[0].data();
    let at = |c: usize, y: usize, x: usize| img[(c * 32 + y) * 32 + x];
    ensure!(at(0, 0, 0) * 255.0 == 200.0, "red plane");
    ensure!(at(1, 0, 1) * 255.0 == 100.0, "green plane");
    ensure!(at(2, 31, 31) * 255.0 == 50.0, "blue plane");
    let lit = img.iter().filter(|&&v| v != 0.0).count();
    ensure!(lit == 3, "{lit} non-zero pixels");
    dataset_invariants(&ds)
}

pub fn cifar_corruptions() -> Check {
    let rec = cifar_record(0, 5, &[9u8; 3072]);
    for len in [0, 1, 2, 100, CIFAR_RECORD_LEN - 1, CIFAR_RECORD_LEN + 1, 2 * CIFAR_RECORD_LEN - 3] {
        let bytes: Vec<u8> = rec.iter().cycle().take(len).copied().collect();
        located(parse_cifar100(&bytes, "c").err().ok_or(format!("length {len} accepted"))?, len)?;
    }
    let bad_label = cifar_record(0, 100, &[0u8; 3072]);
    located(parse_cifar100(&bad_label, "c").err().ok_or("fine label 100 accepted")?, bad_label.len())
}

fn write_ppm(path: &Path, width: usize, height: usize, planes: Vec<u8>) -> Check {
    let pnm = Pnm {
        channels: 3,
        width,
        height,
        planes,
    };
    fs::write(path, encode_pnm(&pnm)).map_err(|e| e.to_string())
}

/// Class order, constant resize, the checkerboard mixing oracle and the
/// export/import round trip.
pub fn ppm_round_trip(root: &Path) -> Check {
    for name in ["bob", "alice"] {
        fs::create_dir_all(root.join(name)).map_err(|e| e.to_string())?;
    }
    // alice: constant 64×64 colour
    let colour = [30u8, 140, 250];
    let planes = colour.iter().flat_map(|&c| std::iter::repeat(c).take(64 * 64)).collect();
    write_ppm(&root.join("alice/flat.ppm"), 64, 64, planes)?;
    // bob: 2×2 checkerboard per channel
    let (a, b) = (220u8, 20u8);
    let board = vec![a, b, b, a, b, a, a, b, a, b, b, a];
    write_ppm(&root.join("bob/board.ppm"), 2, 2, board.clone())?;

    let ds = load_image_dir(root).map_err(|e| e.to_string())?;
    ensure!(ds.num_classes == 2 && ds.channels == 3, "metadata");
    ensure!(ds.labels == [0, 1], "alice must be class 0, bob class 1: {:?}", ds.labels);
    for (c, &v) in colour.iter().enumerate() {
        let want = f64::from(v) / 255.0;
        let plane = &ds.images[0].data()[c * 1024..(c + 1) * 1024];
        ensure!(plane.iter().all(|&p| p == want), "channel {c} of the constant image drifted");
    }

    // Upsampling 2 → 32 with half-pixel centres gives each 16×16 block a
    // mean of 7/8 own value + 1/8 neighbour per axis: (50 own + 14 other)/64,
    // the diagonal neighbour sharing the own value.
    let img = ds.images[1].data();
    let block_mean = |c: usize, by: usize, bx: usize| {
        let mut s = 0.0;
        for y in by * 16..(by + 1) * 16 {
            for x in bx * 16..(bx + 1) * 16 {
                s += img[(c * 32 + y) * 32 + x];
            }
        }
        s / 256.0
    };
    for c in 0..3 {
        let px = |y: usize, x: usize| f64::from(board[c * 4 + y * 2 + x]) / 255.0;
        for (by, bx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let own = px(by, bx);
            let other = px(by, 1 - bx);
            let m = block_mean(c, by, bx);
            let want = (50.0 * own + 14.0 * other) / 64.0;
            ensure!((m - want).abs() < 1e-12, "channel {c} block ({by},{bx}): {m} vs {want}");
            // and invert the mixing
            let m_other = block_mean(c, by, 1 - bx);
            let recovered = (50.0 * m - 14.0 * m_other) / 36.0;
            ensure!((recovered - own).abs() < 1e-12, "checkerboard not recovered: {recovered} vs {own}");
        }
    }

    // export then re-import
    let export_root = root.join("export");
    fs::create_dir_all(export_root.join("only")).map_err(|e| e.to_string())?;
    let t = Tensor::new(
        &[3, 32, 32],
        (0..3072).map(|i| ((i * 7919) % 1000) as f64 / 999.0).collect(),
    )
    .map_err(|e| e.to_string())?;
    export_image(&t, export_root.join("only/x.ppm")).map_err(|e| e.to_string())?;
    let back = load_image_dir(&export_root).map_err(|e| e.to_string())?;
    let worst = back.images[0]
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 1.0 / 255.0, "export round trip off by {worst}");
    dataset_invariants(&ds)
}

pub fn ppm_corruptions(root: &Path) -> Check {
    let good = encode_pnm(&Pnm {
        channels: 3,
        width: 3,
        height: 2,
        planes: (0..18).collect(),
    });
    for cut in 0..good.len() {
        located(decode_pnm(&good[..cut], "p").err().ok_or(format!("cut at {cut} accepted"))?, cut)?;
    }
    for bad in [&b"P3\n1 1\n255\n0 0 0"[..], b"P6\n1 1\n65535\n\0\0\0\0\0\0", b"P6\n0 1\n255\n", b"P6 x 1 255\n"] {
        located(decode_pnm(bad, "p").err().ok_or(format!("{bad:?} accepted"))?, bad.len())?;
    }

    // a P5 file inside a class directory is named in the error
    let dir = root.join("cls");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let grey = encode_pnm(&Pnm {
        channels: 1,
        width: 2,
        height: 2,
        planes: vec![1, 2, 3, 4],
    });
    fs::write(dir.join("grey.pgm"), grey).map_err(|e| e.to_string())?;
    match load_image_dir(root) {
        Err(Error::Parse { source_name, .. }) if source_name.ends_with("grey.pgm") => {}
        other => return Err(format!("P5 file in a class dir: {other:?}")),
    }

    let empty = root.join("empty");
    fs::create_dir_all(&empty).map_err(|e| e.to_string())?;
    match load_image_dir(&empty) {
        Err(Error::EmptyDataset(_)) => Ok(()),
        other => Err(format!("empty root: {other:?}")),
    }
}

/// Every parser check, by name, each in a fresh directory.
pub fn all_checks() -> Vec<(&'static str, Check)> {
    let run = |f: &dyn Fn(&Path) -> Check| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        f(dir.path())
    };
    vec![
        ("idx round trip", run(&idx_round_trip)),
        ("idx corruptions", run(&idx_corruptions)),
        ("cifar round trip", run(&cifar_round_trip)),
        ("cifar corruptions", cifar_corruptions()),
        ("ppm round trip", run(&ppm_round_trip)),
        ("ppm corruptions", run(&ppm_corruptions)),
    ]
}
