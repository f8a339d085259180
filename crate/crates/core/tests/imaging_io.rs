use a2r_core::imaging::{load_image, load_masks, Image};
use image::{GrayImage, Luma, Rgb, RgbImage, RgbaImage};

#[test]
fn png_and_ppm_load() {
    let dir = tempfile::tempdir().unwrap();

    let black = dir.path().join("black.png");
    RgbImage::new(2, 2).save(&black).unwrap();
    let img = load_image(&black).unwrap();
    assert_eq!((img.width(), img.height()), (2, 2));
    assert!(img.data().iter().all(|v| *v == 0.0));

    let white = dir.path().join("white.ppm");
    RgbImage::from_pixel(1, 1, Rgb([255, 255, 255]))
        .save(&white)
        .unwrap();
    assert_eq!(load_image(&white).unwrap().data(), &[1.0, 1.0, 1.0]);

    let odd = dir.path().join("odd.png");
    RgbImage::from_pixel(1, 1, Rgb([128, 64, 0]))
        .save(&odd)
        .unwrap();
    let v = load_image(&odd).unwrap();
    let want = [0.50196, 0.25098, 0.0];
    for (a, b) in v.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn non_rgb_and_missing_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("gray.png");
    GrayImage::new(3, 3).save(&gray).unwrap();
    assert!(load_image(&gray).is_err());
    let rgba = dir.path().join("rgba.png");
    RgbaImage::new(3, 3).save(&rgba).unwrap();
    assert!(load_image(&rgba).is_err());
    assert!(load_image(dir.path().join("nope.png")).is_err());
    let junk = dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    assert!(load_image(&junk).is_err());
}

#[test]
fn save_then_load_is_lossless_at_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<u8> = (0..5 * 4 * 3).map(|i| (i * 17 % 256) as u8).collect();
    let img = Image::from_rgb8(5, 4, &bytes).unwrap();
    let path = dir.path().join("x.png");
    img.save(&path).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);
}

fn write_mask(dir: &std::path::Path, name: &str, w: u32, h: u32, on: impl Fn(u32, u32) -> bool) {
    GrayImage::from_fn(w, h, |x, y| Luma([if on(x, y) { 255 } else { 0 }]))
        .save(dir.join(name))
        .unwrap();
}

#[test]
fn mask_directories() {
    let dir = tempfile::tempdir().unwrap();
    let empty = load_masks(dir.path(), (4, 4)).unwrap();
    assert!(empty.masks().is_empty());
    assert_eq!(empty.background().iter().filter(|b| **b).count(), 16);

    write_mask(dir.path(), "7.png", 4, 4, |_, _| true);
    let one = load_masks(dir.path(), (4, 4)).unwrap();
    assert_eq!(one.class_ids().collect::<Vec<_>>(), vec![7]);
    assert!(one.masks()[0].bitmap.iter().all(|b| *b));

    // Two half masks overlapping on a quarter of the raster.
    let dir = tempfile::tempdir().unwrap();
    write_mask(dir.path(), "1.png", 8, 8, |x, _| x < 4);
    write_mask(dir.path(), "2.png", 8, 8, |x, _| (2..6).contains(&x));
    let two = load_masks(dir.path(), (8, 8)).unwrap();
    let (a, b) = (&two.masks()[0].bitmap, &two.masks()[1].bitmap);
    assert_eq!(a.iter().filter(|x| **x).count(), 32);
    assert_eq!(b.iter().filter(|x| **x).count(), 32);
    assert_eq!(a.iter().zip(b).filter(|(x, y)| **x && **y).count(), 16);
    assert_eq!(two.background().iter().filter(|x| **x).count(), 16);

    assert!(load_masks(dir.path(), (4, 4)).is_err());

    let bad = tempfile::tempdir().unwrap();
    write_mask(bad.path(), "sky.png", 4, 4, |_, _| true);
    assert!(load_masks(bad.path(), (4, 4)).is_err());

    let dup = tempfile::tempdir().unwrap();
    write_mask(dup.path(), "3.png", 4, 4, |_, _| true);
    write_mask(dup.path(), "03.png", 4, 4, |_, _| true);
    assert!(load_masks(dup.path(), (4, 4)).is_err());
}
