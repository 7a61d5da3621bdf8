use std::path::Path;
use std::process::{Command, Output};

use clic_core::codec::synth::synthetic_image;
use clic_core::codec::{write_image, Weights};
use clic_core::transform::ArchConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clic"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn encode_decode_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    Weights::random(ArchConfig::toy(), 1)
        .unwrap()
        .save(&d.join("w"))
        .unwrap();
    let img = synthetic_image(40, 24, &mut ChaCha8Rng::seed_from_u64(2));
    write_image(&d.join("in.png"), &img).unwrap();

    let out = clic(&[
        "encode",
        s(&d.join("in.png")),
        "-o",
        s(&d.join("a.clic")),
        "-w",
        s(&d.join("w")),
        "-q",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("bpp"));

    let out = clic(&[
        "decode",
        s(&d.join("a.clic")),
        "-o",
        s(&d.join("out.ppm")),
        "-w",
        s(&d.join("w")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let back = clic_core::codec::read_image(&d.join("out.ppm")).unwrap();
    assert_eq!((back.width, back.height), (40, 24));

    let out = clic(&["stats", "-w", s(&d.join("w"))]);
    assert!(out.status.success());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    Weights::random(ArchConfig::toy(), 1)
        .unwrap()
        .save(&d.join("w"))
        .unwrap();
    std::fs::write(d.join("junk.clic"), b"CLIC\x01garbage").unwrap();

    let missing = clic(&[
        "encode",
        s(&d.join("none.png")),
        "-o",
        s(&d.join("x")),
        "-w",
        s(&d.join("w")),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let corrupt = clic(&[
        "decode",
        s(&d.join("junk.clic")),
        "-o",
        s(&d.join("y.ppm")),
        "-w",
        s(&d.join("w")),
    ]);
    assert_eq!(corrupt.status.code(), Some(3));

    assert_eq!(
        clic(&["encode", "a", "-o", "b", "-w", "c", "-q", "9"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(clic(&["--help"]).status.code(), Some(0));
    assert_eq!(
        clic(&["selftest", "--fault", "ls-solver"]).status.code(),
        Some(4)
    );
}
