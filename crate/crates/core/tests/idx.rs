use std::fs;
use std::path::{Path, PathBuf};

use alrao::datasets::load_idx;
use alrao::error::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn be32(b: &[u8], at: usize) -> usize {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize
}

fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    let (ip, lp) = (dir.join("img"), dir.join("lbl"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend(d.to_be_bytes());
    }
    v
}

#[test]
fn fixture_matches_raw_bytes() {
    let ip = fixture("digits-2k-images-idx3-ubyte");
    let lp = fixture("digits-2k-labels-idx1-ubyte");
    let raw_i = fs::read(&ip).unwrap();
    let raw_l = fs::read(&lp).unwrap();
    assert_eq!(be32(&raw_i, 0), 0x803);
    assert_eq!(be32(&raw_l, 0), 0x801);
    let (n, r, c) = (be32(&raw_i, 4), be32(&raw_i, 8), be32(&raw_i, 12));
    assert_eq!((n, r, c), (2000, 28, 28));

    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), n);
    assert_eq!(ds.xs.shape(), &[n, 1, r, c]);
    assert_eq!(ds.meta.num_classes, 10);
    assert_eq!(&ds.ys[..10], &[9, 7, 8, 4, 5, 7, 5, 8, 1, 3]);
    for (i, &y) in ds.ys.iter().enumerate() {
        assert_eq!(y, raw_l[8 + i] as usize);
    }
    // Spot-check pixels of a few images against the file bytes.
    for &img in &[0, 1, 999, 1999] {
        for &(row, col) in &[(0, 0), (14, 14), (10, 20), (27, 27)] {
            let byte = raw_i[16 + img * r * c + row * c + col];
            let got = ds.xs.data()[img * r * c + row * c + col];
            assert_eq!(got, byte as f64 / 255.0);
        }
    }
    assert!(ds.xs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert!(ds.class_counts().iter().all(|&k| k > 100));
}

#[test]
fn header_only_files_give_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(
        dir.path(),
        &header(0x803, &[0, 28, 28]),
        &header(0x801, &[0]),
    );
    let ds = load_idx(&ip, &lp).unwrap();
    assert!(ds.is_empty());
    assert_eq!(ds.meta.input_shape, vec![1, 28, 28]);
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = header(0x803, &[2, 2, 2]);
    img.extend([0u8; 8]);
    let mut lbl = header(0x801, &[3]);
    lbl.extend([1u8, 2, 3]);

    let (ip, lp) = write_pair(dir.path(), &img, &lbl);
    assert!(
        matches!(load_idx(&ip, &lp), Err(Error::Idx { .. })),
        "count mismatch"
    );

    let (ip, lp) = write_pair(dir.path(), &img[..20], &header(0x801, &[2]));
    assert!(
        matches!(load_idx(&ip, &lp), Err(Error::Idx { .. })),
        "truncated pixels"
    );

    let (ip, lp) = write_pair(dir.path(), &header(0x801, &[0, 1, 1]), &header(0x801, &[0]));
    assert!(
        matches!(load_idx(&ip, &lp), Err(Error::Idx { .. })),
        "bad magic"
    );

    let (ip, lp) = write_pair(dir.path(), &img[..6], &lbl);
    assert!(
        matches!(load_idx(&ip, &lp), Err(Error::Idx { .. })),
        "truncated header"
    );

    assert!(load_idx(dir.path().join("missing"), &lp).is_err());
}

#[test]
fn small_valid_pair_loads() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = header(0x803, &[2, 1, 2]);
    img.extend([0u8, 255, 51, 102]);
    let mut lbl = header(0x801, &[2]);
    lbl.extend([3u8, 12]);
    let (ip, lp) = write_pair(dir.path(), &img, &lbl);
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.xs.data(), &[0.0, 1.0, 0.2, 0.4]);
    assert_eq!(ds.ys, vec![3, 12]);
    assert_eq!(ds.meta.num_classes, 13);
}
