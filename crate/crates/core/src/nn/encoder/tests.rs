use ndarray::{array, Array1, Array2};

use super::*;
use crate::nn::params::{init_params, EncoderConfig};

fn episode(id: u64, values: Array2<f64>, l_max: usize) -> Episode {
    let mut e = Episode::new(id, 0, values);
    let raw = e.raw_len;
    let mut padded = Array2::zeros((e.channels(), l_max));
    padded.slice_mut(s![.., ..raw]).assign(&e.values);
    e.values = padded;
    e.mask = (0..l_max).map(|t| t < raw).collect();
    e
}

fn random_episode(id: u64, d: usize, raw: usize, l_max: usize) -> Episode {
    let mut rng = StreamKey::new(id, Stream::Synthetic).rng();
    let v = Array2::from_shape_simple_fn((d, raw), || rng.random_range(-1.0..1.0));
    episode(id, v, l_max)
}

fn tiny(d: usize, l: usize) -> EncoderConfig {
    let mut cfg = EncoderConfig::tower(d, l, 3);
    cfg.model_dim = 8;
    cfg.proj_dim = 6;
    cfg
}

#[test]
fn extra_padding_changes_nothing() {
    let cfg = tiny(2, 12);
    let p = init_params::<f64>(&cfg, 1).unwrap();
    let short = random_episode(4, 2, 5, 8);
    let mut long = short.clone();
    long.values = Array2::zeros((2, 12));
    long.values.slice_mut(s![.., ..8]).assign(&short.values);
    long.mask = (0..12).map(|t| t < 5).collect();
    let a = forward_backbone(&p, &SeqBatch::from_episodes([&short]).unwrap(), Mode::Eval).unwrap();
    let b = forward_backbone(&p, &SeqBatch::from_episodes([&long]).unwrap(), Mode::Eval).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn batch_rows_follow_input_order() {
    let cfg = tiny(2, 8);
    let p = init_params::<f64>(&cfg, 2).unwrap();
    let e: Vec<_> = (0..3).map(|i| random_episode(i, 2, 3 + i as usize, 8)).collect();
    let fwd = forward_backbone(&p, &SeqBatch::from_episodes(&e).unwrap(), Mode::Eval).unwrap();
    let rev = forward_backbone(&p, &SeqBatch::from_episodes(e.iter().rev()).unwrap(), Mode::Eval).unwrap();
    for i in 0..3 {
        assert_eq!(fwd.row(i), rev.row(2 - i));
    }
}

fn layer_norm_row(x: &Array1<f64>, eps: f64) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.mapv(|v| (v - mean) / (var + eps).sqrt())
}

#[test]
fn single_timestep_reduces_to_the_ffn_path() {
    // With one timestep the attention weight is 1, so with Wv = Wo = I the
    // attention block returns its layer-normed input unchanged.
    let mut cfg = tiny(3, 4);
    cfg.n_layers = 1;
    let mut p = init_params::<f64>(&cfg, 3).unwrap();
    let l = p.index.layers[0];
    p.tensors[l.wv] = Array2::eye(8);
    p.tensors[l.wo] = Array2::eye(8);
    let x = array![0.3, -1.1, 0.7];
    let e = episode(0, x.clone().insert_axis(Axis(1)), 4);
    let got = forward_backbone(&p, &SeqBatch::from_episodes([&e]).unwrap(), Mode::Eval).unwrap();

    let eps = 1e-5;
    let pe: Array1<f64> = (0..8).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
    let mut h = x.dot(&p.tensors[p.index.embed_w]) + pe;
    h = &h + &layer_norm_row(&h, eps);
    let b = layer_norm_row(&h, eps);
    let f = b.dot(&p.tensors[l.ff1_w]).mapv(|v| v.max(0.0));
    h = &h + &f.dot(&p.tensors[l.ff2_w]);
    let expect = layer_norm_row(&h, eps);
    for (a, b) in got.row(0).iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn all_padding_episode_is_rejected() {
    let mut e = random_episode(0, 2, 3, 8);
    e.raw_len = 0;
    assert!(matches!(
        SeqBatch::<f64>::from_episodes([&e]),
        Err(ClanError::Contract(_))
    ));
}

#[test]
fn running_stats_required_for_eval_projection() {
    let cfg = tiny(2, 8);
    let p = init_params::<f64>(&cfg, 4).unwrap();
    let f = Array2::ones((2, 8));
    assert!(matches!(
        forward_projection(&p, &f, NormMode::Running),
        Err(ClanError::Contract(_))
    ));
}

#[test]
fn identical_rows_leave_only_the_bias_path() {
    let cfg = tiny(2, 8);
    let mut p = init_params::<f64>(&cfg, 5).unwrap();
    let HeadIndex::Tower(t) = p.index.head else { unreachable!() };
    p.tensors[t.p2_b] = Array2::from_shape_fn((1, 6), |(_, j)| j as f64 - 2.5);
    let row = array![[0.5, -0.2, 0.1, 0.9, -1.0, 0.3, 0.0, 0.7]];
    let f = ndarray::concatenate(Axis(0), &[row.view(), row.view(), row.view()]).unwrap();
    let z = forward_projection(&p, &f, NormMode::Batch).unwrap();
    for r in z.rows() {
        assert_eq!(r, p.tensors[t.p2_b].row(0));
    }
}

#[test]
fn eval_projection_is_piecewise_affine() {
    let cfg = tiny(2, 8);
    let mut p = init_params::<f64>(&cfg, 6).unwrap();
    p.bn_running = Some(BatchNormState {
        mean: Array1::from_elem(6, 0.1),
        var: Array1::from_elem(6, 2.0),
    });
    let a = Array2::from_shape_fn((1, 8), |(_, j)| (j as f64 * 0.7).sin());
    let delta = Array2::from_shape_fn((1, 8), |(_, j)| 1e-4 * (j as f64 + 1.0));
    let b = &a + &delta;
    let mid = (&a + &b) * 0.5;
    let za = forward_projection(&p, &a, NormMode::Running).unwrap();
    let zb = forward_projection(&p, &b, NormMode::Running).unwrap();
    let zm = forward_projection(&p, &mid, NormMode::Running).unwrap();
    let avg = (&za + &zb) * 0.5;
    for (x, y) in zm.iter().zip(avg.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_classifier_gives_uniform_softmax() {
    let cfg = tiny(2, 8);
    let mut p = init_params::<f64>(&cfg, 7).unwrap();
    let HeadIndex::Tower(t) = p.index.head else { unreachable!() };
    p.tensors[t.cls_w].fill(0.0);
    let mut logits = forward_classifier(&p, &Array2::ones((2, 8))).unwrap();
    assert_eq!(logits.dim(), (2, 3));
    crate::nn::tape::softmax_rows(&mut logits);
    assert!(logits.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn attention_export_rows_are_distributions() {
    let cfg = tiny(2, 10);
    let p = init_params::<f64>(&cfg, 8).unwrap();
    let e = random_episode(1, 2, 6, 10);
    let maps = export_attention(&p, &e).unwrap();
    assert_eq!(maps.len(), 2);
    for m in &maps {
        assert_eq!(m.dim(), (6, 10));
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
            assert!(r.slice(s![6..]).iter().all(|v| *v == 0.0));
        }
    }
    assert_eq!(maps, export_attention(&p, &e).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attn.csv");
    write_attention_csv(&path, &maps).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 6 * 10);
}

fn disc_head(
    params: &ModelParams<f64>,
    labels: Vec<f64>,
) -> impl Fn(&mut Tape<f64>, &Bound, Var) -> Result<HeadOutput<f64>> + '_ {
    move |tape, p, f| {
        let l = discriminator(tape, params, p, f)?;
        let loss = tape.bce_logits(l, labels.clone())?;
        Ok(HeadOutput {
            loss,
            parts: vec![],
            moments: None,
        })
    }
}

#[test]
fn chunked_step_matches_single_tape() {
    let mut cfg = EncoderConfig::discriminator(2, 8);
    cfg.model_dim = 8;
    cfg.dropout_rate = 0.2;
    let p = init_params::<f64>(&cfg, 9).unwrap();
    let e: Vec<_> = (0..5).map(|i| random_episode(i, 2, 4 + i as usize % 3, 8)).collect();
    let batch = SeqBatch::from_episodes(&e).unwrap();
    let labels = vec![0.0, 1.0, 0.0, 1.0, 1.0];
    let mode = Mode::Train { seed: 3, step: 11 };
    let whole = train_step(&p, &batch, mode, usize::MAX, disc_head(&p, labels.clone())).unwrap();
    let split = train_step(&p, &batch, mode, 9, disc_head(&p, labels)).unwrap();
    assert!(batch.chunks(9).len() > 2);
    assert!((whole.loss - split.loss).abs() < 1e-12);
    for (a, b) in whole.grads.iter().zip(&split.grads) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn discriminator_gradient_matches_finite_differences() {
    let mut cfg = EncoderConfig::discriminator(2, 6);
    cfg.model_dim = 4;
    cfg.dropout_rate = 0.1;
    let p = init_params::<f64>(&cfg, 10).unwrap();
    let e: Vec<_> = (0..3).map(|i| random_episode(20 + i, 2, 3 + i as usize, 6)).collect();
    let batch = SeqBatch::from_episodes(&e).unwrap();
    let labels = vec![0.0, 1.0, 1.0];
    let mode = Mode::Train { seed: 1, step: 0 };
    let out = train_step(&p, &batch, mode, usize::MAX, disc_head(&p, labels.clone())).unwrap();
    let h = 1e-5;
    for (ti, t) in p.tensors.iter().enumerate() {
        for (pos, _) in t.indexed_iter() {
            let mut plus = p.clone();
            plus.tensors[ti][pos] += h;
            let mut minus = p.clone();
            minus.tensors[ti][pos] -= h;
            let lp = train_step(&plus, &batch, mode, usize::MAX, disc_head(&plus, labels.clone())).unwrap().loss;
            let lm = train_step(&minus, &batch, mode, usize::MAX, disc_head(&minus, labels.clone())).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.grads[ti][pos];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "{} {:?}: {an} vs {fd}", p.names[ti], pos);
        }
    }
}

#[test]
fn running_stats_follow_momentum() {
    let cfg = tiny(2, 8);
    let mut p = init_params::<f64>(&cfg, 11).unwrap();
    let m = BatchMoments {
        mean: Array1::from_elem(6, 2.0),
        var: Array1::from_elem(6, 3.0),
        n: 4,
    };
    update_running_stats(&mut p, &m);
    let run = p.bn_running.as_ref().unwrap();
    assert!((run.mean[0] - 0.2).abs() < 1e-15);
    assert!((run.var[0] - (0.9 + 0.1 * 3.0 * 4.0 / 3.0)).abs() < 1e-15);
}
