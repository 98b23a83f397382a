use std::fs;

use exitnet::data::{load_dataset, synthetic_blobs, BlobConfig, DatasetSource, CIFAR_RECORD};
use exitnet::Error;
use proptest::prelude::*;

fn idx_bytes(kind: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, kind, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn blobs_are_reproducible_to_the_byte() {
    let src = DatasetSource::SyntheticBlobs(BlobConfig::new(100, 10, 7));
    let a = load_dataset(&src).unwrap();
    let b = load_dataset(&src).unwrap();
    let bytes = |d: &exitnet::data::Dataset| d.images().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a.len(), 100);
}

#[test]
fn idx_files_load_through_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 8) as u8).collect();
    fs::write(dir.path().join("img"), idx_bytes(0x08, &[2, 4, 4], &pixels)).unwrap();
    fs::write(dir.path().join("lbl"), idx_bytes(0x08, &[2], &[3, 1])).unwrap();
    let src: DatasetSource = serde_json::from_value(serde_json::json!({
        "kind": "idx-images",
        "images": dir.path().join("img"),
        "labels": dir.path().join("lbl"),
        "num_classes": 4
    }))
    .unwrap();
    let d = load_dataset(&src).unwrap();
    assert_eq!(d.sample_shape, vec![1, 4, 4]);
    assert_eq!(d.labels(), Some(&[3, 1][..]));
    assert_eq!(d.image(1)[0], 128.0 / 255.0);
}

#[test]
fn idx_wrong_magic_reports_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = idx_bytes(0x08, &[1, 2, 2], &[0; 4]);
    bytes[0] = 1;
    fs::write(dir.path().join("img"), bytes).unwrap();
    let src = DatasetSource::IdxImages {
        images: dir.path().join("img"),
        labels: None,
        num_classes: 2,
    };
    assert!(matches!(load_dataset(&src), Err(Error::DatasetFormat { offset: 0, .. })));
}

#[test]
fn idx_label_out_of_range_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("img"), idx_bytes(0x08, &[1, 2, 2], &[0; 4])).unwrap();
    fs::write(dir.path().join("lbl"), idx_bytes(0x08, &[1], &[9])).unwrap();
    let src = DatasetSource::IdxImages {
        images: dir.path().join("img"),
        labels: Some(dir.path().join("lbl")),
        num_classes: 2,
    };
    assert!(load_dataset(&src).is_err());
}

#[test]
fn cifar_file_of_ten_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for r in 0..10u8 {
        bytes.push(r);
        bytes.extend(std::iter::repeat_n(r * 20, 3072));
    }
    assert_eq!(bytes.len(), 30_730);
    let path = dir.path().join("data_batch_1.bin");
    fs::write(&path, &bytes).unwrap();
    let d = load_dataset(&DatasetSource::CifarBinary {
        files: vec![path.clone()],
        num_classes: 10,
    })
    .unwrap();
    assert_eq!(d.len(), 10);
    assert_eq!(d.sample_shape, vec![3, 32, 32]);
    assert_eq!(d.labels().unwrap()[7], 7);
    assert_eq!(d.image(7)[100], 140.0 / 255.0);

    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match load_dataset(&DatasetSource::CifarBinary {
        files: vec![path],
        num_classes: 10,
    }) {
        Err(Error::DatasetFormat { offset, .. }) => assert_eq!(offset, 9 * CIFAR_RECORD as u64),
        other => panic!("expected a format error, got {:?}", other.map(|d| d.len())),
    }
}

#[test]
fn split_is_ninety_ten_and_seeded() {
    let d = synthetic_blobs(&BlobConfig::new(200, 4, 1)).unwrap();
    let (a, b) = d.split(0.9, 3).unwrap();
    let (c, _) = d.split(0.9, 3).unwrap();
    assert_eq!((a.len(), b.len()), (180, 20));
    assert_eq!(a.images(), c.images());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn blobs_stay_in_range(n in 1usize..40, k in 2usize..12, size in 4usize..12, seed in any::<u64>()) {
        let mut cfg = BlobConfig::new(n, k, seed);
        cfg.image_size = size;
        let d = synthetic_blobs(&cfg).unwrap();
        prop_assert!(d.images().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(d.labels().unwrap().iter().all(|y| *y < k));
        prop_assert_eq!(d.images().len(), n * 3 * size * size);
    }
}
