use std::path::Path;

use touchhand::frames::{preprocess, read_capv, write_capv, PAD_LEFT, PAD_TOP};

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden.capv");

#[test]
fn golden_file_decodes() {
    let seq = read_capv(Path::new(GOLDEN)).unwrap();
    assert_eq!((seq.cols, seq.rows, seq.fps), (71, 41, 15.0));
    let stamps: Vec<u64> = seq.frames.iter().map(|f| f.timestamp_ms).collect();
    assert_eq!(stamps, [0, 66, 133]);
    let f = &seq.frames[1];
    assert_eq!(f.get(0, 0), 0);
    assert_eq!(f.get(70, 40), 153);
    assert_eq!(f.get(35, 20), 178);
    assert_eq!(f.get(1, 0), 200);
    let n = preprocess(f).unwrap();
    assert_eq!(n.value(PAD_LEFT + 70, PAD_TOP + 40), 0.0);
    assert!((n.value(PAD_LEFT + 35, PAD_TOP + 20) - 178.0 / 255.0).abs() < 1e-12);
}

#[test]
fn rewrite_is_bit_exact() {
    let seq = read_capv(Path::new(GOLDEN)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.capv");
    write_capv(&out, &seq).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(GOLDEN).unwrap());
}
