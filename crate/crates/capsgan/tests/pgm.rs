use capsgan::pgm::{grid_extent, image_grid, write_image_grid, GrayImage, PgmError};
use capsgan::Error;
use capsgan_core::data::{denormalize, PIXELS};
use capsgan_core::Tensor;
use proptest::prelude::*;

fn samples(n: usize) -> Tensor {
    Tensor::from_fn([n, 1, 28, 28], |i| (((i * 31) % 255) as f32 / 127.5) - 1.0)
}

#[test]
fn eight_by_eight_grid_is_238_pixels() {
    assert_eq!(grid_extent(8), 8 * 28 + 7 * 2);
    let img = image_grid(&samples(64), 8, 8).unwrap();
    assert_eq!((img.width, img.height), (238, 238));
    assert!(img.encode().starts_with(b"P5\n238 238\n255\n"));
}

#[test]
fn endpoints_map_to_black_and_white() {
    let mut t = Tensor::full([2, 1, 28, 28], -1.0);
    t.data_mut()[PIXELS..].fill(1.0);
    let img = image_grid(&t, 1, 2).unwrap();
    assert!(img.tile(0, 0).iter().all(|&p| p == 0));
    assert!(img.tile(0, 1).iter().all(|&p| p == 255));
    // separator columns stay black
    assert!((0..28).all(|y| img.pixels[y * img.width + 28] == 0 && img.pixels[y * img.width + 29] == 0));
}

#[test]
fn written_file_reparses_every_tile() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.pgm");
    let s = samples(10);
    write_image_grid(&s, 3, 4, &path).unwrap();
    let img = GrayImage::parse(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (grid_extent(4), grid_extent(3)));
    for i in 0..12 {
        let tile = img.tile(i / 4, i % 4);
        if i < 10 {
            let expected: Vec<u8> = s.data()[i * PIXELS..(i + 1) * PIXELS].iter().map(|&x| denormalize(x)).collect();
            assert_eq!(tile, expected, "tile {i}");
        } else {
            assert!(tile.iter().all(|&p| p == 0), "empty cell {i}");
        }
    }
}

#[test]
fn too_many_samples_for_the_grid() {
    assert!(matches!(image_grid(&samples(5), 2, 2), Err(Error::Pgm(PgmError::GridTooSmall { samples: 5, .. }))));
}

#[test]
fn parser_rejects_malformed_files() {
    assert!(GrayImage::parse(b"P2\n1 1\n255\n\0").is_err());
    assert!(GrayImage::parse(b"P5\n2 2\n255\n\0").is_err());
    assert!(GrayImage::parse(b"P5\n1 1\n15\n\0").is_err());
    let ok = GrayImage::parse(b"P5\n# comment\n1 1\n255\n\x07").unwrap();
    assert_eq!(ok.pixels, vec![7]);
}

proptest! {
    #[test]
    fn encode_parse_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 13) as u8).collect();
        let img = GrayImage { width: w, height: h, pixels };
        prop_assert_eq!(GrayImage::parse(&img.encode()).unwrap(), img);
    }
}
