use kslab::container::{
    load_complex, load_image, load_kspace, load_mask, load_u8_volume, read_raw, save_complex, save_image, save_kspace,
    save_mask, save_u8_volume,
};
use kslab::rng::seeded;
use kslab::tensor::{ComplexSequence, Geometry, ImageSequence, KSpace, LineMask};
use ndarray::Array3;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trips(t in 1usize..4, h in 4usize..12, w in 4usize..12, seed in 0u64..10_000) {
        let dir = tempfile::tempdir().unwrap();
        let stem = |s: &str| dir.path().join(s);
        let mut rng = seeded(seed);
        let g = Geometry::new(t, h, w).unwrap();

        let img = ImageSequence::from_fn(g, |_| rng.random_range(-2.0..2.0)).unwrap();
        save_image(&stem("img"), &img).unwrap();
        let back = load_image(&stem("img")).unwrap();
        prop_assert_eq!(back.into_inner(), img.data().mapv(|v| v as f32 as f64));

        let c = Array3::from_shape_simple_fn(g.shape(), || {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let narrowed = c.mapv(|z| Complex64::new(z.re as f32 as f64, z.im as f32 as f64));
        save_complex(&stem("cplx"), &ComplexSequence::new(c.clone()).unwrap()).unwrap();
        prop_assert_eq!(load_complex(&stem("cplx")).unwrap().into_inner(), narrowed.clone());
        save_kspace(&stem("ks"), &KSpace::new(c).unwrap()).unwrap();
        prop_assert_eq!(load_kspace(&stem("ks")).unwrap().into_inner(), narrowed);

        let mask = LineMask::from_fn(t, h, |_, _| rng.random_bool(0.3));
        save_mask(&stem("mask"), &mask).unwrap();
        prop_assert_eq!(load_mask(&stem("mask")).unwrap(), mask);

        let labels = Array3::from_shape_simple_fn(g.shape(), || rng.random_range(0..4u8));
        save_u8_volume(&stem("labels"), &labels).unwrap();
        prop_assert_eq!(load_u8_volume(&stem("labels")).unwrap(), labels);

        let (header, payload) = read_raw(&stem("labels")).unwrap();
        prop_assert_eq!(header.shape, vec![t, h, w]);
        prop_assert_eq!(payload.len(), t * h * w);
    }
}
