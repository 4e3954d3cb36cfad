use mvweak_core::Tensor;
use mvweak_model::gradcheck::random_input;
use mvweak_model::{ptb_fuse, BaseModel, DownstreamConfig, DownstreamModel, FuseOp, LatentMode, ModelConfig, ModelError, SequenceInput};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set(m: &mut BaseModel<f64>, name: &str, t: Tensor<f64>) {
    m.params.replace(name, t).unwrap();
}

fn zero(m: &mut BaseModel<f64>, name: &str) {
    let shape = m.params.by_name(name).unwrap().shape().to_vec();
    set(m, name, Tensor::zeros(&shape));
}

fn identity(d: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.set(&[i, i], 1.0);
    }
    t
}

/// `x W + b` with row-major `x` (`m x k`) and `W` (`k x n`).
fn affine(x: &[f64], m: usize, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for l in 0..k {
                acc += x[i * k + l] * w.data()[l * n + j];
            }
            y[i * n + j] = acc;
        }
    }
    y
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn encoder_width_at_full_size() {
    let cfg = ModelConfig::default();
    let m = BaseModel::<f32>::new(&cfg).unwrap();
    let input = random_input(&cfg, &mut rng(0)).cast::<f32>();
    let psi = m.encode_frames(&input).unwrap();
    assert_eq!(psi.shape(), &[4, 62, 256]);
}

#[test]
fn encoder_shape_on_32px_frames() {
    let cfg = ModelConfig {
        image_height: 32,
        image_width: 32,
        ..ModelConfig::scaled()
    };
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let psi = m.encode_frames(&random_input(&cfg, &mut rng(1))).unwrap();
    assert_eq!(psi.shape(), &[2, 8, 16]);
}

#[test]
fn encoder_weights_are_shared_across_views() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut input = random_input(&cfg, &mut rng(2));
    let half = input.frames.len() / 2;
    let first: Vec<f64> = input.frames.data()[..half].to_vec();
    input.frames.data_mut()[half..].copy_from_slice(&first);
    let check = |m: &BaseModel<f64>| {
        let psi = m.encode_frames(&input).unwrap();
        assert_eq!(psi.index_axis0(0), psi.index_axis0(1));
        psi
    };
    let before = check(&m);
    let w = m.params.by_name("encoder.conv0.w").unwrap().map(|v| v * 1.5);
    set(&mut m, "encoder.conv0.w", w);
    let after = check(&m);
    assert_ne!(before, after);
}

#[test]
fn wrong_image_size_names_the_encoder() {
    let cfg = ModelConfig::scaled();
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut input = random_input(&cfg, &mut rng(3));
    input.frames = Tensor::zeros(&[2, 8, 8, 8, 3]);
    match m.encode_frames(&input) {
        Err(ModelError::Shape { layer, .. }) => assert_eq!(layer, "encoder"),
        other => panic!("{other:?}"),
    }
}

fn zero_tables(m: &mut BaseModel<f64>) {
    for name in ["embed.frame", "embed.camera", "embed.sl0.w", "embed.sl1.w"] {
        zero(m, name);
    }
}

#[test]
fn embeddings_of_zeros_are_zero() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    zero_tables(&mut m);
    let input = SequenceInput {
        frames: Tensor::zeros(&[2, 8, 16, 16, 3]),
        pd: Tensor::zeros(&[2, 8]),
        sl: Tensor::zeros(&[2, 8, 4]),
    };
    let out = m.apply_embeddings(&Tensor::zeros(&[2, 8, 16]), &input).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn person_flag_broadcasts_to_every_channel() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    zero_tables(&mut m);
    let mut pd = Tensor::zeros(&[2, 8]);
    pd.set(&[1, 5], 1.0);
    let input = SequenceInput {
        frames: Tensor::zeros(&[2, 8, 16, 16, 3]),
        pd,
        sl: Tensor::zeros(&[2, 8, 4]),
    };
    let out = m.apply_embeddings(&Tensor::zeros(&[2, 8, 16]), &input).unwrap();
    for s in 0..2 {
        for t in 0..8 {
            let want = if (s, t) == (1, 5) { 1.0 } else { 0.0 };
            assert!((0..16).all(|j| out.at(&[s, t, j]) == want));
        }
    }
}

#[test]
fn embeddings_are_the_five_term_sum() {
    let cfg = ModelConfig::scaled();
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut r = rng(4);
    let input = random_input(&cfg, &mut r);
    let psi = randn(&[2, 8, 16], &mut r);
    let out = m.apply_embeddings(&psi, &input).unwrap();
    let frame = m.params.by_name("embed.frame").unwrap();
    let camera = m.params.by_name("embed.camera").unwrap();
    for s in 0..2 {
        let proj = m.params.by_name(&format!("embed.sl{s}.w")).unwrap();
        let sl = input.sl.index_axis0(s);
        let slp = affine(sl.data(), 8, proj, None);
        for t in 0..8 {
            for j in 0..16 {
                let want = psi.at(&[s, t, j]) + slp[t * 16 + j] + input.pd.at(&[s, t]) + frame.at(&[t, j]) + camera.at(&[s, j]);
                assert!((out.at(&[s, t, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn frame_table_is_shared_and_camera_rows_differ() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    zero(&mut m, "embed.sl0.w");
    zero(&mut m, "embed.sl1.w");
    zero(&mut m, "embed.camera");
    let input = random_input(&cfg, &mut rng(5));
    let input = SequenceInput {
        pd: Tensor::zeros(&[2, 8]),
        ..input
    };
    let out = m.apply_embeddings(&Tensor::zeros(&[2, 8, 16]), &input).unwrap();
    assert_eq!(out.index_axis0(0), out.index_axis0(1));
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let cam = m.params.by_name("embed.camera").unwrap();
    assert_ne!(cam.index_axis0(0), cam.index_axis0(1));
}

#[test]
fn sl_width_mismatch_is_an_error() {
    let cfg = ModelConfig::scaled();
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut input = random_input(&cfg, &mut rng(6));
    input.sl = Tensor::zeros(&[2, 8, 9]);
    match m.apply_embeddings(&Tensor::zeros(&[2, 8, 16]), &input) {
        Err(ModelError::Shape { layer, .. }) => assert_eq!(layer, "embedding.sl"),
        other => panic!("{other:?}"),
    }
}

/// Step-by-step attention block for one branch, with every weight read back
/// from the parameter set.
fn branch_oracle(m: &BaseModel<f64>, s: usize, x: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let p = |n: &str| m.params.by_name(&format!("branch{s}.{n}")).unwrap();
    let q = affine(x.data(), t, p("attn.query.w"), Some(p("attn.query.b")));
    let k = affine(x.data(), t, p("attn.key.w"), Some(p("attn.key.b")));
    let v = affine(x.data(), t, p("attn.value.w"), Some(p("attn.value.b")));
    let dh = d / heads;
    let mut z = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..dh {
                z[i * d + h * dh + c] = (0..t).map(|j| e[j] / sum * v[j * d + h * dh + c]).sum();
            }
        }
    }
    let att = affine(&z, t, p("attn.output.w"), Some(p("attn.output.b")));
    let plus: Vec<f64> = x.data().iter().zip(&att).map(|(a, b)| a + b).collect();
    let h0: Vec<f64> = affine(&plus, t, p("ff0.w"), Some(p("ff0.b"))).into_iter().map(|v| v.max(0.0)).collect();
    let h1 = affine(&h0, t, p("ff1.w"), Some(p("ff1.b")));
    plus.iter().zip(&h1).map(|(a, b)| a + b).collect()
}

#[test]
fn attention_matches_explicit_arithmetic() {
    let cfg = ModelConfig {
        num_frames: 3,
        d_model: 4,
        num_heads: 2,
        ff_widths: vec![6, 4],
        ..ModelConfig::scaled()
    };
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let x = randn(&[3, 4], &mut rng(7));
    for s in 0..2 {
        let got = m.transformer_branch(s, &x).unwrap();
        assert!(close(got.data(), &branch_oracle(&m, s, &x, 2), 1e-12));
    }
}

#[test]
fn single_token_attention_is_its_own_value() {
    let cfg = ModelConfig {
        num_frames: 1,
        ..ModelConfig::scaled()
    };
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let x = randn(&[1, 16], &mut rng(8));
    let got = m.transformer_branch(0, &x).unwrap();
    assert!(close(got.data(), &branch_oracle(&m, 0, &x, 4), 1e-12));
    // With one key the attention output is the value projection.
    let p = |n: &str| m.params.by_name(&format!("branch0.{n}")).unwrap();
    let v = affine(x.data(), 1, p("attn.value.w"), Some(p("attn.value.b")));
    let att = affine(&v, 1, p("attn.output.w"), Some(p("attn.output.b")));
    let plus: Vec<f64> = x.data().iter().zip(&att).map(|(a, b)| a + b).collect();
    let h0: Vec<f64> = affine(&plus, 1, p("ff0.w"), Some(p("ff0.b"))).into_iter().map(|v| v.max(0.0)).collect();
    let h1 = affine(&h0, 1, p("ff1.w"), Some(p("ff1.b")));
    let want: Vec<f64> = plus.iter().zip(&h1).map(|(a, b)| a + b).collect();
    assert!(close(got.data(), &want, 1e-12));
}

#[test]
fn zero_output_projections_pass_the_input_through() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    for n in ["attn.output.w", "attn.output.b", "ff1.w", "ff1.b"] {
        zero(&mut m, &format!("branch1.{n}"));
    }
    let x = randn(&[8, 16], &mut rng(9));
    assert_eq!(m.transformer_branch(1, &x).unwrap(), x);
}

#[test]
fn fusion_of_one_view_is_identity() {
    let x = randn(&[8, 16], &mut rng(10));
    for op in [FuseOp::Max, FuseOp::Sum, FuseOp::Mean] {
        assert_eq!(ptb_fuse(std::slice::from_ref(&x), op).unwrap(), x);
    }
}

#[test]
fn max_of_zeros_and_ones_is_ones() {
    let out = ptb_fuse(&[Tensor::<f64>::zeros(&[3, 2]), Tensor::full(&[3, 2], 1.0)], FuseOp::Max).unwrap();
    assert!(out.data().iter().all(|&v| v == 1.0));
}

#[test]
fn fusion_rejects_mismatched_views() {
    let r = ptb_fuse(&[Tensor::<f64>::zeros(&[3, 2]), Tensor::zeros(&[2, 3])], FuseOp::Sum);
    assert!(r.is_err());
}

fn stack_strategy() -> impl Strategy<Value = (Vec<Tensor<f64>>, Vec<usize>)> {
    (1usize..5, 1usize..5, 1usize..6, any::<u64>()).prop_map(|(s, t, d, seed)| {
        let mut r = rng(seed);
        let views: Vec<Tensor<f64>> = (0..s).map(|_| randn(&[t, d], &mut r)).collect();
        let mut perm: Vec<usize> = (0..s).collect();
        for i in (1..s).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        (views, perm)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn max_fusion_bounds_and_permutation((views, perm) in stack_strategy()) {
        let out = ptb_fuse(&views, FuseOp::Max).unwrap();
        for v in &views {
            prop_assert!(out.data().iter().zip(v.data()).all(|(o, x)| o >= x));
        }
        let permuted: Vec<Tensor<f64>> = perm.iter().map(|&i| views[i].clone()).collect();
        prop_assert_eq!(ptb_fuse(&permuted, FuseOp::Max).unwrap(), out);
    }

    #[test]
    fn sum_and_mean_match_reductions((views, perm) in stack_strategy()) {
        let n = views[0].len();
        let sum: Vec<f64> = (0..n).map(|i| views.iter().map(|v| v.data()[i]).sum()).collect();
        let mean: Vec<f64> = sum.iter().map(|v| v / views.len() as f64).collect();
        prop_assert!(close(ptb_fuse(&views, FuseOp::Sum).unwrap().data(), &sum, 1e-9));
        prop_assert!(close(ptb_fuse(&views, FuseOp::Mean).unwrap().data(), &mean, 1e-9));
        let permuted: Vec<Tensor<f64>> = perm.iter().map(|&i| views[i].clone()).collect();
        prop_assert!(close(ptb_fuse(&permuted, FuseOp::Sum).unwrap().data(), &sum, 1e-9));
        prop_assert!(close(ptb_fuse(&permuted, FuseOp::Mean).unwrap().data(), &mean, 1e-9));
    }
}

#[test]
fn identity_head_keeps_unit_rows() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    set(&mut m, "latent0.w", identity(16));
    set(&mut m, "latent1.w", identity(16));
    let mut x = randn(&[8, 16], &mut rng(11));
    for t in 0..8 {
        let n: f64 = (0..16).map(|j| x.at(&[t, j]).powi(2)).sum::<f64>().sqrt();
        for j in 0..16 {
            x.set(&[t, j], x.at(&[t, j]) / n);
        }
    }
    let rho = m.latent_heads(&[x.clone(), x.clone()]).unwrap();
    assert!(close(rho.index_axis0(0).data(), x.data(), 1e-12));
}

#[test]
fn latent_heads_are_map_then_normalize() {
    let cfg = ModelConfig::scaled();
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut r = rng(12);
    let phi = [randn(&[8, 16], &mut r), randn(&[8, 16], &mut r)];
    let rho = m.latent_heads(&phi).unwrap();
    assert_eq!(rho.shape(), &[2, 8, 16]);
    for s in 0..2 {
        let w = m.params.by_name(&format!("latent{s}.w")).unwrap();
        let b = m.params.by_name(&format!("latent{s}.b")).unwrap();
        let z = affine(phi[s].data(), 8, w, Some(b));
        for t in 0..8 {
            let n: f64 = z[t * 16..(t + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..16 {
                assert!((rho.at(&[s, t, j]) - z[t * 16 + j] / n).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_latent_mode_uses_the_view_mean() {
    let cfg = ModelConfig {
        latent_mode: LatentMode::Single,
        ..ModelConfig::scaled()
    };
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut r = rng(13);
    let phi = [randn(&[8, 16], &mut r), randn(&[8, 16], &mut r)];
    let rho = m.latent_heads(&phi).unwrap();
    assert_eq!(rho.shape(), &[1, 8, 16]);
    let mean = ptb_fuse(&phi, FuseOp::Mean).unwrap();
    let z = affine(mean.data(), 8, m.params.by_name("latent0.w").unwrap(), m.params.by_name("latent0.b"));
    for t in 0..8 {
        let n: f64 = z[t * 16..(t + 1) * 16].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((rho.at(&[0, t, 3]) - z[t * 16 + 3] / n).abs() < 1e-12);
    }
    assert!(m.params.by_name("latent1.w").is_none());
}

#[test]
fn constant_scores_give_constant_bag() {
    let cfg = ModelConfig::scaled();
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    zero(&mut m, "bag1.w");
    set(&mut m, "bag1.b", Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]).unwrap());
    let (scores, bag) = m.bag_head(&randn(&[8, 16], &mut rng(14))).unwrap();
    for c in 0..3 {
        assert!((bag.data()[c] - scores.at(&[0, c])).abs() <= 1e-15);
    }
}

#[test]
fn two_frame_bag_is_the_average() {
    // Two frames whose scores are sigmoid(logit(0.2)) and sigmoid(logit(0.8)).
    let cfg = ModelConfig {
        num_frames: 2,
        bag_classes: 1,
        bag_widths: vec![1, 1],
        ..ModelConfig::scaled()
    };
    let mut m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut w0 = Tensor::zeros(&[16, 1]);
    w0.set(&[0, 0], 1.0);
    set(&mut m, "bag0.w", w0);
    set(&mut m, "bag1.w", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut x = Tensor::zeros(&[2, 16]);
    x.set(&[0, 0], logit(0.2));
    x.set(&[1, 0], logit(0.8));
    // The hidden ReLU must pass both logits, so shift by a bias and undo it.
    set(&mut m, "bag0.b", Tensor::from_vec(&[1], vec![10.0]).unwrap());
    set(&mut m, "bag1.b", Tensor::from_vec(&[1], vec![-10.0]).unwrap());
    let (scores, bag) = m.bag_head(&x).unwrap();
    assert!((scores.at(&[0, 0]) - 0.2).abs() < 1e-12);
    assert!((scores.at(&[1, 0]) - 0.8).abs() < 1e-12);
    assert!((bag.data()[0] - 0.5).abs() < 1e-12);
}

#[test]
fn base_forward_shapes_norms_and_bag_mean() {
    let cfg = ModelConfig::scaled();
    let m = BaseModel::<f32>::new(&cfg).unwrap();
    let input = random_input(&cfg, &mut rng(15)).cast::<f32>();
    let out = m.forward(&input).unwrap();
    assert_eq!(out.rho.shape(), &[2, 8, 16]);
    assert_eq!(out.frame_scores.shape(), &[8, 3]);
    assert_eq!(out.bag_pred.shape(), &[3]);
    assert_eq!(out.phi_max.shape(), &[8, 16]);
    for row in out.rho.data().chunks(16) {
        let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() <= 1e-5);
    }
    for c in 0..3 {
        let mut s = 0.0f32;
        for t in 0..8 {
            s += out.frame_scores.at(&[t, c]);
        }
        assert_eq!(out.bag_pred.data()[c], s / 8.0);
    }
    assert_eq!(m.forward(&input).unwrap(), out);
    assert!(out.frame_scores.all_finite());
}

#[test]
fn batch_forward_matches_single_forward() {
    let cfg = ModelConfig::scaled();
    let m = BaseModel::<f64>::new(&cfg).unwrap();
    let mut r = rng(16);
    let inputs = vec![random_input(&cfg, &mut r), random_input(&cfg, &mut r)];
    let batch = m.forward_batch(&inputs).unwrap();
    for (i, inp) in inputs.iter().enumerate() {
        let one = m.forward(inp).unwrap();
        assert!(close(one.bag_pred.data(), batch[i].bag_pred.data(), 1e-12));
    }
}

#[test]
fn downstream_shapes_and_range() {
    for c_task in [1, 3] {
        let cfg = DownstreamConfig::scaled(c_task);
        let m = DownstreamModel::<f32>::new(&cfg).unwrap();
        let mut r = rng(17);
        let input = random_input(&cfg.model, &mut r).cast::<f32>();
        let rho = randn(&[2, 8, 16], &mut r).cast::<f32>();
        let scores = m.forward(&input, Some(&rho)).unwrap();
        assert_eq!(scores.shape(), &[8, c_task]);
        assert!(scores.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(m.head_input_width(), 32);
    }
}

#[test]
fn downstream_without_latents_ignores_them() {
    let cfg = DownstreamConfig {
        use_latents: false,
        ..DownstreamConfig::scaled(1)
    };
    let m = DownstreamModel::<f64>::new(&cfg).unwrap();
    assert_eq!(m.head_input_width(), 16);
    let mut r = rng(18);
    let input = random_input(&cfg.model, &mut r);
    let a = m.forward(&input, None).unwrap();
    let b = m.forward(&input, Some(&randn(&[2, 8, 16], &mut r))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_latents_are_an_error() {
    let cfg = DownstreamConfig::scaled(1);
    let m = DownstreamModel::<f64>::new(&cfg).unwrap();
    let input = random_input(&cfg.model, &mut rng(19));
    assert!(m.forward(&input, None).is_err());
}

#[test]
fn lem_means_views_then_projects() {
    let cfg = DownstreamConfig::scaled(1);
    let mut m = DownstreamModel::<f64>::new(&cfg).unwrap();
    m.params.replace("lem.w", identity(16)).unwrap();
    let mut rho = Tensor::zeros(&[2, 8, 16]);
    for t in 0..8 {
        rho.set(&[0, t, 0], 1.0);
        rho.set(&[1, t, 1], 1.0);
    }
    let out = m.lem(&rho).unwrap();
    for t in 0..8 {
        assert_eq!(out.at(&[t, 0]), 0.5);
        assert_eq!(out.at(&[t, 1]), 0.5);
        assert!((2..16).all(|j| out.at(&[t, j]) == 0.0));
    }
    let row = randn(&[1, 8, 16], &mut rng(20));
    let same = Tensor::stack(&[row.index_axis0(0), row.index_axis0(0)]).unwrap();
    assert!(close(m.lem(&same).unwrap().data(), row.index_axis0(0).data(), 1e-15));
    let r = randn(&[3, 8, 16], &mut rng(21));
    let mean = ptb_fuse(&[r.index_axis0(0), r.index_axis0(1), r.index_axis0(2)], FuseOp::Mean).unwrap();
    assert!(close(m.lem(&r).unwrap().data(), mean.data(), 1e-15));
}

#[test]
fn lem_is_view_permutation_invariant() {
    let cfg = DownstreamConfig::scaled(1);
    let m = DownstreamModel::<f64>::new(&cfg).unwrap();
    let r = randn(&[2, 8, 16], &mut rng(22));
    let swapped = Tensor::stack(&[r.index_axis0(1), r.index_axis0(0)]).unwrap();
    assert!(close(m.lem(&r).unwrap().data(), m.lem(&swapped).unwrap().data(), 1e-12));
}

#[test]
fn lem_rejects_wrong_shapes() {
    let cfg = DownstreamConfig::scaled(1);
    let m = DownstreamModel::<f64>::new(&cfg).unwrap();
    assert!(m.lem(&Tensor::zeros(&[2, 7, 16])).is_err());
}

#[test]
fn trunk_transfer_copies_matching_parameters() {
    let cfg = DownstreamConfig::scaled(1);
    let base = BaseModel::<f64>::new(&ModelConfig { init_seed: 9, ..cfg.model.clone() }).unwrap();
    let mut m = DownstreamModel::<f64>::new(&cfg).unwrap();
    let copied = m.transfer_trunk(&base.params).unwrap();
    assert!(copied > 0);
    assert_eq!(m.params.by_name("encoder.conv0.w"), base.params.by_name("encoder.conv0.w"));
    assert_eq!(m.params.by_name("branch1.ff0.w"), base.params.by_name("branch1.ff0.w"));
}
