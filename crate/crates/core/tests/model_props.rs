use clan_core::contrastive::{anchor_plan, loss_con, view_row, NegativeMode};
use clan_core::data::Episode;
use clan_core::nn::{forward_backbone, init_params, EncoderConfig, Mode, SeqBatch};
use clan_core::rng::{Stream, StreamKey};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = StreamKey::new(seed, Stream::Synthetic).rng();
    let mut z = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0f64));
    for mut row in z.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    z
}

fn padded(seed: u64, d: usize, raw: usize, len: usize) -> Episode {
    let mut rng = StreamKey::new(seed, Stream::Synthetic).rng();
    let mut values = Array2::zeros((d, len));
    for v in values.slice_mut(s![.., ..raw]).iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let mut e = Episode::new(seed, 0, values);
    e.raw_len = raw;
    e.mask = (0..len).map(|t| t < raw).collect();
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_con_ignores_batch_order(b in 2usize..5, k in 0usize..3, seed in any::<u64>(), shift in 1usize..4) {
        let z = unit_rows(2 * b * (k + 1), 6, seed);
        // episode i moves to slot (i + shift) % b
        let mut moved = z.clone();
        for i in 0..b {
            for j in 0..=k {
                for v in 0..2 {
                    moved.row_mut(view_row((i + shift) % b, j, v, k)).assign(&z.row(view_row(i, j, v, k)));
                }
            }
        }
        for mode in [NegativeMode::Matching, NegativeMode::AllIndex] {
            let plan = anchor_plan(b, k, mode);
            let a = loss_con(&z, &plan, 0.5).unwrap();
            let c = loss_con(&moved, &plan, 0.5).unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn closer_positive_pair_lowers_loss(b in 1usize..4, k in 0usize..3, c1 in 0.0f64..0.98, step in 0.01f64..0.5) {
        let c2 = (c1 + step).min(0.99);
        prop_assume!(c2 > c1);
        // a lone pair has no negatives and a constant zero loss
        prop_assume!(b * (k + 1) > 1);
        let n = 2 * b * (k + 1);
        // rows 0 and 1 form a pair sharing one extra axis; everything else is orthogonal
        let build = |c: f64| {
            let mut z = Array2::zeros((n, n + 1));
            for r in 0..n {
                z[[r, r]] = 1.0;
            }
            for r in [0, 1] {
                z[[r, r]] = (1.0 - c).sqrt();
                z[[r, n]] = c.sqrt();
            }
            z
        };
        let plan = anchor_plan(b, k, NegativeMode::Matching);
        let l1 = loss_con(&build(c1), &plan, 0.5).unwrap();
        let l2 = loss_con(&build(c2), &plan, 0.5).unwrap();
        prop_assert!(l2 < l1);
    }

    #[test]
    fn padding_does_not_reach_the_output(raw in 1usize..8, extra in 1usize..6, seed in any::<u64>()) {
        let mut cfg = EncoderConfig::tower(2, 8, 3);
        cfg.model_dim = 8;
        cfg.proj_dim = 4;
        cfg.ffn_dim = Some(16);
        let p = init_params::<f64>(&cfg, seed).unwrap();
        let short = padded(seed, 2, raw, 8);
        let mut long = short.clone();
        long.values = Array2::zeros((2, 8 + extra));
        long.values.slice_mut(s![.., ..8]).assign(&short.values);
        long.mask = (0..8 + extra).map(|t| t < raw).collect();
        let a = forward_backbone(&p, &SeqBatch::from_episodes([&short]).unwrap(), Mode::Eval).unwrap();
        let b = forward_backbone(&p, &SeqBatch::from_episodes([&long]).unwrap(), Mode::Eval).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn eval_forward_is_identical_across_threads() {
    let mut cfg = EncoderConfig::tower(3, 16, 3);
    cfg.model_dim = 16;
    let p = init_params::<f32>(&cfg, 5).unwrap();
    let eps: Vec<Episode> = (0..6).map(|i| padded(i, 3, 6 + i as usize, 16)).collect();
    let batch = SeqBatch::from_episodes(&eps).unwrap();
    let reference = forward_backbone(&p, &batch, Mode::Eval).unwrap();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..4).map(|_| scope.spawn(|| forward_backbone(&p, &batch, Mode::Eval).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}
