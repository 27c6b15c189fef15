//! IDX ingestion against the MNIST test set, cross-checked by a separate
//! byte-level reader written only for this file.

use std::io::Read;
use std::path::{Path, PathBuf};

use clusterfl::fl_engine::{ingest_idx, parse_idx_images, parse_idx_labels, IdxError};

fn fixture(name: &str) -> Vec<u8> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(std::fs::File::open(path).unwrap()).read_to_end(&mut out).unwrap();
    out
}

/// Reference reader: magic, then one big-endian u32 per dimension.
fn reference_header(bytes: &[u8]) -> (u8, Vec<u32>) {
    assert_eq!(&bytes[..2], &[0, 0]);
    let dtype = bytes[2];
    let ndim = bytes[3] as usize;
    let dims = (0..ndim)
        .map(|d| {
            let at = 4 + 4 * d;
            (u32::from(bytes[at]) << 24)
                | (u32::from(bytes[at + 1]) << 16)
                | (u32::from(bytes[at + 2]) << 8)
                | u32::from(bytes[at + 3])
        })
        .collect();
    (dtype, dims)
}

fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    let ip = dir.join("images");
    let lp = dir.join("labels");
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (ip, lp)
}

#[test]
fn test_set_matches_reference_reader() {
    let images = fixture("t10k-images-idx3-ubyte.gz");
    let labels = fixture("t10k-labels-idx1-ubyte.gz");
    let (img_type, img_dims) = reference_header(&images);
    let (lab_type, lab_dims) = reference_header(&labels);
    assert_eq!((img_type, img_dims.as_slice()), (0x08, &[10000, 28, 28][..]));
    assert_eq!((lab_type, lab_dims.as_slice()), (0x08, &[10000][..]));
    assert_eq!(labels[8], 7);

    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), &images, &labels);
    let pool = ingest_idx(&ip, &lp).unwrap();
    assert_eq!(pool.len(), 10000);
    assert_eq!((pool.rows, pool.cols), (28, 28));
    assert_eq!(pool.labels[0], 7);
    assert!(pool.labels.iter().zip(&labels[8..]).all(|(&a, &b)| a == usize::from(b)));
    assert!(pool.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    let first: f64 = pool.image(0).iter().sum();
    let raw: u32 = images[16..16 + 784].iter().map(|&b| u32::from(b)).sum();
    assert!((first - f64::from(raw) / 255.0).abs() < 1e-9);
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let images = fixture("t10k-images-idx3-ubyte.gz");
    let labels = fixture("t10k-labels-idx1-ubyte.gz");

    assert_eq!(
        parse_idx_labels(&images[..64]).unwrap_err(),
        IdxError::WrongMagic { expected: 0x0801, found: 0x0803 }
    );
    assert_eq!(
        parse_idx_images(&labels).unwrap_err(),
        IdxError::WrongMagic { expected: 0x0803, found: 0x0801 }
    );
    assert_eq!(
        parse_idx_images(&images[..images.len() - 1]).unwrap_err(),
        IdxError::Truncated { needed: images.len(), available: images.len() - 1 }
    );
    assert_eq!(parse_idx_labels(&labels[..6]).unwrap_err(), IdxError::Truncated { needed: 8, available: 6 });

    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), &images, &labels[..8 + 9999]);
    // Truncated labels are caught before the count comparison.
    assert!(matches!(ingest_idx(&ip, &lp), Err(IdxError::Truncated { .. })));

    let mut short = labels[..8 + 9999].to_vec();
    short[4..8].copy_from_slice(&9999u32.to_be_bytes());
    let (ip, lp) = write_pair(dir.path(), &images, &short);
    assert_eq!(ingest_idx(&ip, &lp).unwrap_err(), IdxError::CountMismatch { images: 10000, labels: 9999 });

    let missing = dir.path().join("absent");
    assert!(matches!(ingest_idx(&missing, &lp), Err(IdxError::Io { .. })));

    let mut huge = images[..16].to_vec();
    huge[4..8].copy_from_slice(&u32::MAX.to_be_bytes());
    huge[8..16].copy_from_slice(&[0xff; 8]);
    assert!(matches!(parse_idx_images(&huge), Err(IdxError::Truncated { .. })));
}
