use c2fpl_core::features::{read_bundle, summarize_bundle, write_bundle, FeatureBundle};
use c2fpl_core::synth::{generate, SynthConfig};

#[test]
fn synthetic_shapes_survive_a_file_round_trip() {
    let config = SynthConfig {
        segment_counts: vec![4, 7, 2],
        d: 8,
        seed: 5,
        ..SynthConfig::default()
    };
    let (bundle, truth) = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("three.c2fb");
    write_bundle(&bundle, &path).unwrap();
    let back = read_bundle(&path).unwrap();

    assert_eq!(back.dim(), 8);
    let shapes: Vec<usize> = back.videos().iter().map(|v| v.num_segments()).collect();
    assert_eq!(shapes, vec![4, 7, 2]);
    for v in back.videos() {
        assert_eq!(v.features().len(), v.num_segments() * 8);
        assert_eq!(truth.frame_labels[v.id()].len(), v.num_frames());
    }
    assert_eq!(back, bundle);
}

#[test]
fn writing_twice_gives_identical_files() {
    let (bundle, _) = generate(&SynthConfig {
        n_videos: 5,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.c2fb");
    let b = dir.path().join("b.c2fb");
    write_bundle(&bundle, &a).unwrap();
    write_bundle(&bundle, &b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn empty_bundle_round_trips() {
    let empty = FeatureBundle::new(4, Vec::new(), "").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.c2fb");
    write_bundle(&empty, &path).unwrap();
    let back = read_bundle(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.dim(), 4);
    assert!(summarize_bundle(&back).is_err());
}

#[test]
fn truncated_file_is_rejected() {
    let (bundle, _) = generate(&SynthConfig {
        n_videos: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let bytes = bundle.to_bytes();
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            FeatureBundle::from_bytes(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }
}
