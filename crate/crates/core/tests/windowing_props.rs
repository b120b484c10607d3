use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparseformer::tensor::Tensor;
use sparseformer::windowing::{
    aggregate, cyclic_shift, cyclic_unshift, inverse_aggregate, pad_to_windows, window_partition, window_reverse,
    WindowConfig,
};

fn padded(h: usize, w: usize, c: usize, m: usize, seed: u64) -> (Tensor, sparseformer::windowing::WindowGrid, WindowConfig) {
    let cfg = WindowConfig::new(m).unwrap();
    let z = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let (p, g) = pad_to_windows(&z, &cfg).unwrap();
    (p, g, cfg)
}

proptest! {
    #[test]
    fn partition_and_shift_are_bijections(h in 1usize..20, w in 1usize..20, c in 1usize..4, m in 1usize..6, seed: u64) {
        let (p, grid, _) = padded(h, w, c, m, seed);
        let back = window_reverse(&window_partition(&p, &grid).unwrap(), &grid).unwrap();
        prop_assert!(back.bitwise_eq(&p));
        let s = m / 2;
        prop_assert!(cyclic_unshift(&cyclic_shift(&p, s).unwrap(), s).unwrap().bitwise_eq(&p));
    }

    #[test]
    fn aggregation_identity_and_projection(h in 1usize..20, w in 1usize..20, c in 1usize..4, m in 1usize..6, seed: u64) {
        let (p, grid, cfg) = padded(h, w, c, m, seed);
        let zbar = aggregate(&p, &cfg, &grid).unwrap();
        let again = aggregate(&inverse_aggregate(&zbar, &cfg, &grid).unwrap(), &cfg, &grid).unwrap();
        prop_assert!(again.max_abs_diff(&zbar) < 1e-12);
        let proj = inverse_aggregate(&zbar, &cfg, &grid).unwrap();
        let twice = inverse_aggregate(&aggregate(&proj, &cfg, &grid).unwrap(), &cfg, &grid).unwrap();
        prop_assert!(twice.max_abs_diff(&proj) < 1e-12);
    }

    #[test]
    fn aggregate_ignores_order_within_windows(h in 1usize..16, w in 1usize..16, c in 1usize..4, m in 1usize..5, seed: u64) {
        let (p, grid, cfg) = padded(h, w, c, m, seed);
        let parts = window_partition(&p, &grid).unwrap();
        let t = m * m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let mut data = parts.data().to_vec();
        for win in 0..grid.num_windows() {
            let mut perm: Vec<usize> = (0..t).collect();
            perm.shuffle(&mut rng);
            let orig = &parts.data()[win * t * c..(win + 1) * t * c];
            for (dst, &src) in perm.iter().enumerate() {
                data[(win * t + dst) * c..(win * t + dst + 1) * c].copy_from_slice(&orig[src * c..(src + 1) * c]);
            }
        }
        let shuffled = window_reverse(&Tensor::new(parts.shape().to_vec(), data).unwrap(), &grid).unwrap();
        let a = aggregate(&p, &cfg, &grid).unwrap();
        let b = aggregate(&shuffled, &cfg, &grid).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
