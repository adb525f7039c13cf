use lmii_cli::image_io::*;
use lmii_cli::palette::Palette;
use lmii_cli::reflect_pad;
use lmii_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::new(w, h);
    rng.fill(img.data.as_mut_slice());
    img
}

#[test]
fn ppm_header_and_round_trip() {
    let img = random_image(16, 16, 1);
    let bytes = encode_ppm(&img);
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    let back = decode_ppm(&bytes).unwrap();
    assert_eq!((back.width, back.height), (16, 16));
    assert_eq!(back, img);
}

#[test]
fn ppm_header_comments_and_spacing() {
    let mut bytes = b"P6 # made by hand\n 2\t1 # size\n255\n".to_vec();
    bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
    let img = decode_ppm(&bytes).unwrap();
    assert_eq!(img.pixel(1, 0), [4, 5, 6]);
}

#[test]
fn ppm_errors_name_byte_offsets() {
    let mut bad = b"P6\n16 16\n2x5\n".to_vec();
    bad.extend(vec![0; 768]);
    match decode_ppm(&bad) {
        Err(Error::Format(m)) => assert!(
            m.contains("max-value") && m.contains("byte offset 9"),
            "{m}"
        ),
        other => panic!("{other:?}"),
    }
    let deep = b"P6\n1 1\n65535\n\0\0\0\0\0\0";
    match decode_ppm(deep) {
        Err(Error::Format(m)) => assert!(
            m.contains("unsupported bit depth") && m.contains("byte offset 7"),
            "{m}"
        ),
        other => panic!("{other:?}"),
    }
    let short = b"P6\n4 4\n255\n\0\0\0";
    assert!(matches!(decode_ppm(short), Err(Error::Format(_))));
    assert!(matches!(
        decode_ppm(b"P3\n1 1\n255\n0 0 0"),
        Err(Error::Format(_))
    ));
}

#[test]
fn png_round_trip_and_grayscale() {
    let img = random_image(13, 7, 2);
    assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);

    let mut gray = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut gray, 3, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()
            .unwrap()
            .write_image_data(&[0, 128, 255])
            .unwrap();
    }
    let img = decode_png(&gray).unwrap();
    assert_eq!(img.pixel(1, 0), [128, 128, 128]);

    let mut deep = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut deep, 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        enc.write_header()
            .unwrap()
            .write_image_data(&[0; 6])
            .unwrap();
    }
    match decode_png(&deep) {
        Err(Error::Format(m)) => assert!(m.contains("bit depth"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn files_pick_format_by_extension_and_signature() {
    let dir = tempfile::tempdir().unwrap();
    let img = random_image(5, 4, 3);
    for name in ["a.ppm", "b.png", "c.bin"] {
        let p = dir.path().join(name);
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }
    assert!(std::fs::read(dir.path().join("a.ppm"))
        .unwrap()
        .starts_with(b"P6"));
    std::fs::write(dir.path().join("junk"), b"hello").unwrap();
    assert!(matches!(
        read_image(&dir.path().join("junk")),
        Err(Error::Format(_))
    ));
}

#[test]
fn palette_is_injective_beyond_the_fixed_table() {
    let pal = Palette::new(300);
    let mut seen = std::collections::HashSet::new();
    for k in 0..300 {
        assert!(seen.insert(pal.color(k)));
        assert_eq!(pal.class_of(pal.color(k)), Some(k));
    }
    assert_eq!(Palette::new(19).color(0), [128, 64, 128]);
}

#[test]
fn reflect_padding_mirrors_edges() {
    let mut img = RgbImage::new(3, 1);
    for x in 0..3 {
        img.put(x, 0, [x as u8; 3]);
    }
    let p = reflect_pad(&img);
    assert_eq!((p.width, p.height), (8, 8));
    let row: Vec<u8> = (0..8).map(|x| p.pixel(x, 0)[0]).collect();
    assert_eq!(row, vec![0, 1, 2, 1, 0, 1, 2, 1]);
    assert!((0..8).all(|y| p.pixel(2, y) == [2; 3]));
}

proptest! {
    #[test]
    fn encodings_are_lossless(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let img = random_image(w, h, seed);
        prop_assert_eq!(&decode_ppm(&encode_ppm(&img)).unwrap(), &img);
        prop_assert_eq!(&decode_png(&encode_png(&img).unwrap()).unwrap(), &img);
    }

    #[test]
    fn colorized_labels_decode_back(k in 2usize..40, w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..w * h).map(|_| rng.gen_range(0..k as u32)).collect();
        let pal = Palette::new(k);
        let png = encode_png(&pal.colorize(&labels, w, h)).unwrap();
        prop_assert_eq!(pal.decode(&decode_png(&png).unwrap()), Some(labels));
    }
}
