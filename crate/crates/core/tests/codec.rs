use clic_core::codec::container::{FLAG_RAW_COEFFS, MAGIC};
use clic_core::codec::image_io::{decode_png, decode_ppm, encode_png, encode_ppm};
use clic_core::codec::synth::{noise_image, synthetic_image};
use clic_core::codec::{self, Coefficients, Container, EncodeOptions, RgbImage, Weights};
use clic_core::selftest::{self, Fault};
use clic_core::stats::model_stats;
use clic_core::transform::ArchConfig;
use clic_core::{ClicError, DecodeError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(seed: u64) -> Weights {
    Weights::random(ArchConfig::toy(), seed).unwrap()
}

fn image(w: usize, h: usize, seed: u64) -> RgbImage {
    synthetic_image(w, h, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn round16(v: u32) -> u32 {
    v.div_ceil(16) * 16
}

prop_compose! {
    fn arb_container()(
        quality in 1u8..=6,
        h in 1u32..5000,
        w in 1u32..5000,
        hash in any::<u64>(),
        step in (1.0f32 / 64.0)..64.0,
        m in 1u16..40,
        kind in 0..3u8,
        seed in any::<u64>(),
        z in proptest::collection::vec(any::<u8>(), 0..50),
        groups in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..30), 0..6),
    ) -> Container {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (candidates, coeffs) = match kind {
            0 => (0, Coefficients::None),
            1 => (2, Coefficients::Codes((0..m as usize * 2).map(|_| rand::Rng::gen_range(&mut rng, 0..16)).collect())),
            _ => (3, Coefficients::Raw((0..m as usize * 3).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect())),
        };
        Container {
            quality,
            orig_h: h,
            orig_w: w,
            padded_h: round16(h),
            padded_w: round16(w),
            arch_hash: hash,
            step,
            latent_channels: m,
            candidates,
            coeffs,
            z_stream: z,
            group_streams: groups,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn container_round_trips(c in arb_container()) {
        let bytes = c.to_bytes();
        prop_assert_eq!(&bytes[..4], &MAGIC);
        prop_assert_eq!(bytes[5] & FLAG_RAW_COEFFS != 0, matches!(c.coeffs, Coefficients::Raw(_)));
        prop_assert_eq!(Container::parse(&bytes).unwrap(), c.clone());
        let streams = c.z_stream.len() + c.group_streams.iter().map(Vec::len).sum::<usize>();
        prop_assert_eq!(c.overhead_bytes() + streams + c.coeffs.payload_bits().div_ceil(8), bytes.len());
    }

    #[test]
    fn container_rejects_any_truncation(c in arb_container(), cut in any::<prop::sample::Index>()) {
        let bytes = c.to_bytes();
        let n = cut.index(bytes.len());
        prop_assert!(Container::parse(&bytes[..n]).is_err());
    }
}

#[test]
fn coefficient_payload_is_four_bits_per_weight() {
    let w = toy(1);
    let cfg = &w.model.config;
    let (m, n) = (cfg.latent_channels, cfg.pqf_candidates);
    for (seed, size) in [(0, (32, 32)), (1, (48, 80))] {
        let img = image(size.0, size.1, seed);
        let enc = codec::encode(&w, &img, &EncodeOptions::default()).unwrap();
        let r = &enc.report;
        assert_eq!(r.coeff_count, m * n);
        assert_eq!(r.coeff_bits, m * n * 4);
        let c = Container::parse(&enc.bytes).unwrap();
        assert_eq!(c.coeffs.payload_bits(), m * n * 4);
        // per-pixel overhead is content independent
        let per_px = r.coeff_bits as f64 / r.pixels as f64;
        assert!((per_px - (m * n * 4) as f64 / (size.0 * size.1) as f64).abs() < 1e-12);
    }
}

#[test]
fn encode_is_deterministic_and_decode_bit_exact() {
    let w = toy(2);
    for (q, pqf, raw) in [(1, true, false), (3, false, false), (6, true, true)] {
        let opts = EncodeOptions {
            quality: q,
            pqf,
            raw_coeffs: raw,
        };
        let img = image(37, 29, q as u64);
        let a = codec::encode(&w, &img, &opts).unwrap();
        let b = codec::encode(&w, &img, &opts).unwrap();
        assert_eq!(a.bytes, b.bytes);
        let d = codec::decode(&w, &a.bytes).unwrap();
        assert_eq!(d.state, a.state);
        assert_eq!(d.image, a.reconstruction);
        assert_eq!((d.image.width, d.image.height), (37, 29));
        assert_eq!(d.container.quality, q);
        match (pqf, raw) {
            (false, _) => assert_eq!(d.container.coeffs, Coefficients::None),
            (true, true) => assert!(matches!(d.container.coeffs, Coefficients::Raw(_))),
            (true, false) => assert!(matches!(d.container.coeffs, Coefficients::Codes(_))),
        }
        assert_eq!(a.report.bytes, a.bytes.len());
        assert!(a.report.psnr.is_finite());
    }
}

#[test]
fn file_size_tracks_ideal_rate() {
    let w = toy(3);
    let img = image(64, 64, 9);
    let enc = codec::encode(&w, &img, &EncodeOptions::default()).unwrap();
    let c = Container::parse(&enc.bytes).unwrap();
    let ideal = enc.report.estimated_bpp * enc.report.pixels as f64 / 8.0;
    let streams = 1 + c.group_streams.len();
    let actual = (enc.bytes.len() - c.overhead_bytes()) as f64;
    // the coder works in 32-bit words and flushes up to three of them
    assert!(
        actual <= ideal * 1.01 + 12.0 * streams as f64 + 1.0,
        "{actual} vs {ideal}"
    );
    assert!(actual >= ideal * 0.99 - 1.0, "{actual} vs {ideal}");
}

#[test]
fn coarser_presets_spend_fewer_bits() {
    let w = toy(4);
    let img = image(64, 64, 4);
    let sizes: Vec<usize> = (1..=6)
        .map(|q| {
            let opts = EncodeOptions {
                quality: q,
                ..Default::default()
            };
            codec::encode(&w, &img, &opts).unwrap().bytes.len()
        })
        .collect();
    assert!(sizes[0] <= sizes[5], "{sizes:?}");
    assert!(codec::quality_step(1, 0.0067).unwrap() > codec::quality_step(6, 0.0067).unwrap());
    assert!(codec::quality_lambda(0).is_err());
    assert!(codec::quality_lambda(7).is_err());
}

#[test]
fn corrupt_streams_give_typed_errors() {
    let w = toy(5);
    let img = image(32, 32, 5);
    let bytes = codec::encode(&w, &img, &EncodeOptions::default())
        .unwrap()
        .bytes;
    for n in 0..bytes.len() {
        let e = codec::decode(&w, &bytes[..n]).unwrap_err();
        assert!(matches!(e, ClicError::Decode(_)), "{n}: {e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let mut b = bytes.clone();
        let i = rand::Rng::gen_range(&mut rng, 0..b.len());
        b[i] ^= 1 << rand::Rng::gen_range(&mut rng, 0..8);
        let e = codec::decode(&w, &b).unwrap_err();
        assert!(matches!(e, ClicError::Decode(_)), "{e}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        codec::decode(&w, &bad),
        Err(ClicError::Decode(DecodeError::BadMagic { .. }))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(
        codec::decode(&w, &extra),
        Err(ClicError::Decode(DecodeError::TrailingData { .. }))
    ));
}

#[test]
fn foreign_weights_are_rejected() {
    let w = toy(6);
    let img = image(16, 16, 6);
    let bytes = codec::encode(&w, &img, &EncodeOptions::default())
        .unwrap()
        .bytes;
    let mut other = ArchConfig::toy();
    other.pqf_hidden += 1;
    let foreign = Weights::random(other, 6).unwrap();
    assert!(matches!(
        codec::decode(&foreign, &bytes),
        Err(ClicError::Decode(DecodeError::ConfigMismatch { .. }))
    ));
}

#[test]
fn weights_round_trip() {
    let w = toy(7);
    let bytes = w.to_bytes();
    let back = Weights::from_bytes(&bytes).unwrap();
    assert_eq!(back.meta, w.meta);
    let names: Vec<_> = w
        .model
        .store
        .iter()
        .map(|(n, p)| (n.to_string(), p.values().to_vec()))
        .collect();
    let again: Vec<_> = back
        .model
        .store
        .iter()
        .map(|(n, p)| (n.to_string(), p.values().to_vec()))
        .collect();
    assert_eq!(names, again);
    // same weights, same stream
    let img = image(16, 32, 7);
    let opts = EncodeOptions::default();
    assert_eq!(
        codec::encode(&w, &img, &opts).unwrap().bytes,
        codec::encode(&back, &img, &opts).unwrap().bytes
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.clwt");
    w.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(
        Weights::from_bytes(&flipped),
        Err(ClicError::Weights(_))
    ));
    assert!(matches!(
        Weights::from_bytes(&bytes[..bytes.len() - 1]),
        Err(ClicError::Weights(_))
    ));
    assert!(matches!(
        Weights::load(&dir.path().join("missing")),
        Err(ClicError::Io(_))
    ));
}

#[test]
fn stats_scale_with_pixels() {
    for cfg in [ArchConfig::default(), ArchConfig::toy()] {
        let w = Weights::random(cfg.clone(), 0).unwrap();
        let a = model_stats(&cfg, &w.model.store, 256, 256);
        let b = model_stats(&cfg, &w.model.store, 512, 512);
        assert_eq!(a.params(), w.model.param_count());
        assert_eq!(a.params(), b.params());
        let ratio = b.macs() as f64 / a.macs() as f64;
        assert!((ratio - 4.0).abs() < 0.02, "{ratio}");
        // partial tiles are padded
        assert_eq!(model_stats(&cfg, &w.model.store, 250, 241).macs(), a.macs());
    }
}

#[test]
fn selftest_passes_and_detects_faults() {
    let clean = selftest::run(None);
    assert!(clean.iter().all(|r| r.passed), "{clean:?}");
    for fault in ["freq-table", "ls-solver"] {
        let f: Fault = fault.parse().unwrap();
        let results = selftest::run(Some(f));
        assert!(results.iter().any(|r| !r.passed), "{fault} went unnoticed");
    }
    assert!("nonsense".parse::<Fault>().is_err());
}

#[test]
fn image_formats_round_trip() {
    let img = noise_image(13, 7, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);

    let dir = tempfile::tempdir().unwrap();
    for name in ["a.ppm", "b.png"] {
        let p = dir.path().join(name);
        codec::write_image(&p, &img).unwrap();
        assert_eq!(codec::read_image(&p).unwrap(), img);
    }
    // comments and whitespace in the header
    let mut ppm = b"P6\n# made by hand\n2 1\n255\n".to_vec();
    ppm.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
    let small = decode_ppm(&ppm).unwrap();
    assert_eq!((small.width, small.height), (2, 1));
    assert_eq!(small.data, vec![1, 2, 3, 4, 5, 6]);
    assert!(matches!(
        decode_ppm(&ppm[..ppm.len() - 1]),
        Err(ClicError::Image(_))
    ));
    assert!(matches!(
        decode_ppm(b"P3\n1 1\n255\n0 0 0"),
        Err(ClicError::Image(_))
    ));
    assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    assert_eq!(codec::psnr(&img, &img).unwrap(), f64::INFINITY);
}
