use irispad::preprocess::{crop_and_mask, prepare_for_network, CropGeometry};
use irispad::{Image, IrisAnnotation};
use proptest::prelude::*;

fn frame() -> impl Strategy<Value = (Image, IrisAnnotation)> {
    (8usize..120, 8usize..120)
        .prop_flat_map(|(w, h)| {
            (
                Just((w, h)),
                prop::collection::vec(1u8..=255, w * h),
                0.0..=w as f64,
                0.0..=h as f64,
                0.5f64..80.0,
            )
        })
        .prop_map(|((w, h), px, cx, cy, r)| (Image::new(w, h, px).unwrap(), IrisAnnotation::new(cx, cy, r)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn nothing_survives_outside_the_disc((img, ann) in frame()) {
        let out = crop_and_mask(&img, &ann, 1.2).unwrap();
        let side = (2.4 * ann.radius).ceil() as usize;
        prop_assert_eq!((out.width(), out.height()), (side, side));
        let g = CropGeometry::new(&ann, 1.2).unwrap();
        let c = (side / 2) as f64;
        for y in 0..side {
            for x in 0..side {
                let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let (sx, sy) = (g.origin_x + x as i64, g.origin_y + y as i64);
                let in_frame = sx >= 0 && sy >= 0 && (sx as usize) < img.width() && (sy as usize) < img.height();
                if d > 1.2 * ann.radius || !in_frame {
                    prop_assert_eq!(out.get(x, y), 0);
                } else {
                    // source pixels are never zero, so kept pixels stay nonzero
                    prop_assert_eq!(out.get(x, y), img.get(sx as usize, sy as usize));
                }
            }
        }
    }

    #[test]
    fn network_input_has_requested_shape((img, ann) in frame(), k in 1usize..4) {
        let crop = crop_and_mask(&img, &ann, 1.2).unwrap();
        let t = prepare_for_network::<f32>(&crop, 32 * k).unwrap();
        prop_assert_eq!(t.tensor.dim(), (3, 32 * k, 32 * k));
        prop_assert!(t.tensor.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn side_is_ceiling_of_margin_diameter() {
    let img = Image::filled(640, 480, 9);
    for (r, side) in [(100.0, 240), (100.2, 241), (10.0, 24), (0.4, 1)] {
        let out = crop_and_mask(&img, &IrisAnnotation::new(320.0, 240.0, r), 1.2).unwrap();
        assert_eq!(out.width(), side, "radius {r}");
    }
}

#[test]
fn center_outside_frame_is_rejected() {
    let img = Image::filled(20, 20, 9);
    assert!(crop_and_mask(&img, &IrisAnnotation::new(25.0, 5.0, 4.0), 1.2).is_err());
}
