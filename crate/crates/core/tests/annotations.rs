use std::fs;

use occpose::data::{load_annotations, save_annotations, synth_generate, write_dataset, SynthConfig};
use occpose::Error;

fn write(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("annotations.json");
    fs::write(&path, text).unwrap();
    path
}

fn two_joint_file(keypoints: &str) -> String {
    let mut kp: Vec<String> = (0..12).map(|i| format!("{}, {}, 1", 10 + i, 12)).collect();
    kp[0] = keypoints.to_string();
    format!(
        r#"{{"images": [{{"id": 7, "file_name": "a.png", "width": 40, "height": 30}}],
            "annotations": [{{"id": 3, "image_id": 7, "bbox": [5, 5, 20, 20], "keypoints": [{}]}}]}}"#,
        kp.join(", ")
    )
}

#[test]
fn visibility_flags_map_to_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_annotations(&write(dir.path(), &two_joint_file("11, 13, 0"))).unwrap();
    let pose = &ds.records[0].instances[0].pose;
    assert!(pose.labeled[0] && !pose.visible[0]);
    assert_eq!(pose.coords[0], [11.0, 13.0]);
    assert!(pose.labeled[1] && pose.visible[1]);

    let ds = load_annotations(&write(dir.path(), &two_joint_file("0, 0, 2"))).unwrap();
    let pose = &ds.records[0].instances[0].pose;
    assert!(!pose.labeled[0] && !pose.visible[0]);
}

#[test]
fn malformed_keypoints_name_the_annotation() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["11, 13", "11, 13, 5", "11, 13, 0.5"] {
        let err = load_annotations(&write(dir.path(), &two_joint_file(bad))).unwrap_err();
        assert!(matches!(err, Error::Data { .. }), "{bad}: {err}");
        assert!(err.to_string().contains('3'), "{err}");
    }
    let err = load_annotations(&write(dir.path(), r#"{"images": [], "annotations": [], "extra": 1}"#)).unwrap_err();
    assert!(err.to_string().contains("extra"), "{err}");
}

#[test]
fn save_then_load_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&SynthConfig {
        num_images: 4,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let written = write_dataset(dir.path(), &ds).unwrap();
    let loaded = load_annotations(dir.path()).unwrap();
    // boxes are stored as x, y, width, height, so the first trip may move a
    // corner by an ulp; from then on the file is a fixed point
    for (a, b) in written.records.iter().zip(&loaded.records) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.pairs, b.pairs);
        for (p, q) in a.instances.iter().zip(&b.instances) {
            assert_eq!(p.id, q.id);
            assert_eq!((p.pose.labeled.clone(), p.pose.visible.clone()), (q.pose.labeled.clone(), q.pose.visible.clone()));
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
            assert!(close(p.bbox.x2, q.bbox.x2) && close(p.bbox.y2, q.bbox.y2) && (p.bbox.x1, p.bbox.y1) == (q.bbox.x1, q.bbox.y1));
            assert_eq!(p.pose.coords, q.pose.coords);
        }
    }
    let again = dir.path().join("copy.json");
    save_annotations(&again, &loaded).unwrap();
    assert_eq!(load_annotations(&again).unwrap(), loaded);
    // pixels survive the PNG round trip exactly (they are multiples of 1/255)
    for (a, b) in ds.records.iter().zip(&loaded.records) {
        assert_eq!(a.pixels(1).unwrap(), b.pixels(1).unwrap());
    }
}
