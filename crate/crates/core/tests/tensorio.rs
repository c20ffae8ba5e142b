use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tid_core::error::DecodeError;
use tid_core::tensorio::{
    decode_tensor, encode_tensor, load_bundle, load_ground_truth, read_tensor, save_bundle,
    write_tensor,
};
use tid_core::{LevelBundle, Tensor, TidError};

fn bundle(c: usize, h: usize, w: usize, k: usize) -> LevelBundle {
    let feature = Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| i as f32 * 0.5).collect()).unwrap();
    let scores = Tensor::new(vec![h, w, k], vec![0.25; h * w * k]).unwrap();
    let mut boxes = Vec::with_capacity(h * w * 4);
    for r in 0..h {
        for col in 0..w {
            boxes.extend([col as f32, r as f32, col as f32 + 1.0, r as f32 + 1.0]);
        }
    }
    let boxes = Tensor::new(vec![h, w, 4], boxes).unwrap();
    LevelBundle::new(0, feature, scores, boxes).unwrap()
}

proptest! {
    #[test]
    fn roundtrip_is_bit_exact(data in prop::collection::vec(-1e30f32..1e30, 60)) {
        let t = Tensor::new(vec![3, 4, 5], data).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn any_truncation_is_rejected(cut in 0usize..36) {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_tensor(&t);
        prop_assert!(decode_tensor(&bytes[..cut]).is_err());
    }
}

#[test]
fn negative_zero_and_subnormals_survive() {
    let vals = vec![-0.0f32, f32::MIN_POSITIVE / 2.0, f32::MAX, f32::MIN];
    let t = Tensor::new(vec![4], vals).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tidt");
    write_tensor(&path, &t).unwrap();
    assert!(read_tensor(&path).unwrap().bit_eq(&t));
}

#[test]
fn non_finite_payload_is_rejected() {
    let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut bytes = encode_tensor(&t);
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_tensor(&bytes), Err(DecodeError::NonFinite { index: 1 })));
}

#[test]
fn bundle_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(3, 4, 5, 2);
    let meta = save_bundle(dir.path(), "teacher", &b).unwrap();
    let back = load_bundle(&meta).unwrap();
    assert_eq!(back.level_id, 0);
    assert!(back.feature.bit_eq(&b.feature));
    assert!(back.class_scores.bit_eq(&b.class_scores));
    assert!(back.pred_boxes.bit_eq(&b.pred_boxes));
}

fn swap_tensor(dir: &Path, name: &str, t: &Tensor) {
    write_tensor(dir.join(name), t).unwrap();
}

#[test]
fn bundle_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let meta = save_bundle(dir.path(), "s", &bundle(2, 8, 8, 3)).unwrap();
    swap_tensor(dir.path(), "s_class_scores.tidt", &Tensor::new(vec![8, 9, 3], vec![0.1; 216]).unwrap());
    let err = load_bundle(&meta).unwrap_err();
    assert!(matches!(err, TidError::ShapeMismatch(_)), "{err}");
    assert!(err.to_string().contains("8x9x3"), "{err}");
}

#[test]
fn bundle_score_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let meta = save_bundle(dir.path(), "s", &bundle(1, 2, 2, 1)).unwrap();
    swap_tensor(dir.path(), "s_class_scores.tidt", &Tensor::new(vec![2, 2, 1], vec![0.1, 1.5, 0.2, 0.3]).unwrap());
    let err = load_bundle(&meta).unwrap_err();
    assert!(matches!(err, TidError::OutOfRange(_)), "{err}");
    assert!(err.to_string().contains("1.5"), "{err}");
}

#[test]
fn bundle_metadata_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("m.json");
    fs::write(&meta, r#"{"level_id": 0, "feature": "f.tidt", "class_scores": "c.tidt", "pred_boxes": "b.tidt", "extra": 1}"#).unwrap();
    let err = load_bundle(&meta).unwrap_err().to_string();
    assert!(err.contains("m.json"), "{err}");

    fs::write(&meta, r#"{"level_id": 0, "feature": "f.tidt", "class_scores": "c.tidt", "pred_boxes": "b.tidt"}"#).unwrap();
    let err = load_bundle(&meta).unwrap_err().to_string();
    assert!(err.contains("f.tidt"), "{err}");
}

#[test]
fn ground_truth_documents() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.json");
    fs::write(&path, r#"[{"box": [1, 2, 5, 6], "label": 3}, {"box": [0, 0, 2.5, 1], "label": 0}]"#).unwrap();
    let gt = load_ground_truth(&path).unwrap();
    assert_eq!(gt.labels(), &[3, 0]);
    assert_eq!(gt.boxes()[1].x2, 2.5);

    fs::write(&path, "[]").unwrap();
    assert!(load_ground_truth(&path).unwrap().is_empty());

    fs::write(&path, r#"[{"box": [5, 0, 1, 1], "label": 0}]"#).unwrap();
    let err = load_ground_truth(&path).unwrap_err().to_string();
    assert!(err.contains("gt.json"), "{err}");
}
