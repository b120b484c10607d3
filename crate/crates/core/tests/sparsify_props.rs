use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseformer::attention::{init_block, local_block, BlockKind, BlockSpec};
use sparseformer::sparsify::{
    gumbel, gumbel_relax_var, score_windows, select_topk, ResidualTransform, ScoreNetParams, ScoreVector,
};
use sparseformer::tensor::{finite_diff_check, Activation, ParamSet, Tape, Tensor, Var};
use sparseformer::windowing::{pad_to_windows, window_partition, window_reverse, WindowConfig};

#[test]
fn gumbel_argmax_samples_the_softmax() {
    let logits = [0.3, -1.2, 1.5, 0.0, 0.7];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 100_000;
    let mut hits = [0usize; 5];
    for _ in 0..draws {
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (i, l) in logits.iter().enumerate() {
            let v = l + gumbel(rng.gen_range(f64::EPSILON..1.0));
            if v > best {
                (best, arg) = (v, i);
            }
        }
        hits[arg] += 1;
    }
    for (i, l) in logits.iter().enumerate() {
        let freq = hits[i] as f64 / draws as f64;
        assert!((freq - l.exp() / z).abs() < 0.01, "class {i}: {freq} vs {}", l.exp() / z);
    }
}

#[test]
fn gumbel_relaxation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Tensor::uniform(&[1, 9], -2.0, 2.0, &mut rng);
    let noise: Vec<f64> = (0..9).map(|_| rng.gen_range(0.01..0.99)).collect();
    let probe = Tensor::uniform(&[1, 9], -1.0, 1.0, &mut rng);
    for t in [0.5, 1.0, 5.0] {
        let f = coerce(|_, v| gumbel_relax_var(v, t, &noise).unwrap().dot_const(&probe).unwrap());
        let err = finite_diff_check(&f, &logits, 1e-5).unwrap();
        assert!(err < 1e-4, "T = {t}: {err}");
    }
}

fn coerce<F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>>(f: F) -> F {
    f
}

#[test]
fn ratio_one_selects_everything() {
    let s = ScoreVector(vec![0.1, 0.4, 0.2, 0.3]);
    let sel = select_topk(&s, 1.0).unwrap();
    assert_eq!(sel.kept, vec![0, 1, 2, 3]);
    assert!(sel.mask.iter().all(|&m| m));
}

proptest! {
    #[test]
    fn scores_are_permutation_equivariant(rows in 1usize..4, cols in 1usize..4, c in 1usize..4, seed: u64) {
        let m = 3;
        let cfg = WindowConfig::new(m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::uniform(&[rows * m, cols * m, c], -1.0, 1.0, &mut rng);
        let (z, grid) = pad_to_windows(&z, &cfg).unwrap();
        let params = ScoreNetParams::new(Tensor::uniform(&[m * m * c, 1], -1.0, 1.0, &mut rng), ResidualTransform::Identity).unwrap();
        let n = grid.num_windows();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let parts = window_partition(&z, &grid).unwrap();
        let per = m * m * c;
        let mut data = vec![0.0; parts.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            data[dst * per..(dst + 1) * per].copy_from_slice(&parts.data()[src * per..(src + 1) * per]);
        }
        let permuted = window_reverse(&Tensor::new(parts.shape().to_vec(), data).unwrap(), &grid).unwrap();
        let a = score_windows(&z, &cfg, &grid, &params).unwrap();
        let b = score_windows(&permuted, &cfg, &grid, &params).unwrap();
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert!((b.0[dst] - a.0[src]).abs() < 1e-14);
        }
    }

    #[test]
    fn local_block_changes_at_most_k_windows(h in 2usize..14, w in 2usize..14, ratio in 0.05f64..=1.0, seed: u64) {
        let (m, c) = (3, 4);
        let spec = BlockSpec { kind: BlockKind::Attention, heads: 2, window: m, act: Activation::Gelu };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_block(&mut ps, "l", c, 2 * c, &spec, true, &mut rng).unwrap();
        let z = Tensor::uniform(&[h, w, c], -1.0, 1.0, &mut rng);
        let grid = sparseformer::windowing::WindowGrid::new(h, w, m).unwrap();
        let s = ScoreVector((0..grid.num_windows()).map(|_| rng.gen::<f64>()).collect());
        let sel = select_topk(&s, ratio).unwrap();
        let out = local_block(&z, &sel, &ps, "l", &spec, false).unwrap();
        let changed = z.data().iter().zip(out.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        prop_assert!(changed <= sel.kept_count() * m * m * c);
    }
}
