use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, finite_diff_grad, max_rel_err};
use super::*;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
    }
}

#[test]
fn matmul_identity() {
    let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let out = i2.matmul(&i2).unwrap();
    assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn matmul_hand_case() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[1.0, 1.0], &[2, 1]);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_zero_case() {
    let z = Tensor::zeros(&[2, 3]);
    let o = Tensor::ones(&[3, 2]);
    let out = z.matmul(&o).unwrap();
    assert_eq!(out.data(), &[0.0; 4]);
}

#[test]
fn matmul_shape_mismatch_errors() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 2]);
    assert!(a.matmul(&b).is_err());
}

#[test]
fn softmax_uniform_row() {
    let x = t(&[0.0, 0.0, 0.0], &[1, 3]);
    let out = softmax_rows(&x).unwrap();
    assert_close(out.data(), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn softmax_closed_form() {
    let x = t(&[2f64.ln(), 0.0], &[1, 2]);
    let out = softmax_rows(&x).unwrap();
    assert_close(out.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-14);
}

#[test]
fn softmax_large_logit_no_overflow() {
    let x = t(&[1000.0, 0.0], &[1, 2]);
    let out = softmax_rows(&x).unwrap();
    assert!(out.is_finite());
    assert!((out.data()[0] - 1.0).abs() < 1e-12);
    assert!(out.data()[1].abs() < 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let x = t(&[f64::NAN, 0.0], &[1, 2]);
    assert!(softmax_rows(&x).is_err());
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = t(&data, &[3, 4]);
        let s = softmax_rows(&x).unwrap();
        for i in 0..3 {
            let row_sum: f64 = s.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() <= 1e-12, "row sum {row_sum}");
        }
        let c = rng.gen_range(-20.0..20.0);
        let shifted = x.add_scalar(c);
        let s2 = softmax_rows(&shifted).unwrap();
        assert_close(s.data(), s2.data(), 1e-9);
    }
}

#[test]
fn cosine_self_similarity() {
    let v = t(&[0.3, -0.8, 0.5], &[1, 3]);
    let out = cosine_sim(&v, &v).unwrap();
    assert!((out.item() - 1.0).abs() < 1e-9);
}

#[test]
fn cosine_orthogonal() {
    let a = t(&[1.0, 0.0], &[1, 2]);
    let b = t(&[0.0, 1.0], &[1, 2]);
    assert!(cosine_sim(&a, &b).unwrap().item().abs() < 1e-12);
}

#[test]
fn cosine_hand_case() {
    let a = t(&[1.0, 1.0], &[1, 2]);
    let b = t(&[1.0, 0.0], &[1, 2]);
    let out = cosine_sim(&a, &b).unwrap();
    assert!((out.item() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
}

#[test]
fn cosine_zero_vector_guarded() {
    let a = t(&[0.0, 0.0], &[1, 2]);
    let b = t(&[1.0, 0.0], &[1, 2]);
    let out = cosine_sim(&a, &b).unwrap();
    assert_eq!(out.item(), 0.0);
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let loss = x.sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_sum_of_squares() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    let loss = x.mul(&x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_detached_subgraph_gets_no_grad() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    let detached = x.mul(&x).unwrap().detach();
    let y = Tensor::leaf(vec![3.0, 4.0], &[2]).unwrap();
    let loss = detached.mul(&y).unwrap().sum();
    loss.backward().unwrap();
    assert!(x.grad().is_none());
    assert_eq!(y.grad().unwrap(), vec![1.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.scale(2.0);
    assert!(y.backward().is_err());
}

#[test]
fn finite_diff_of_sum_is_ones() {
    let x = t(&[0.2, -0.4, 0.9], &[3]);
    let g = finite_diff_grad(|x| Ok(x.sum()), &x, 1e-5).unwrap();
    assert_close(&g, &[1.0, 1.0, 1.0], 1e-9);
}

#[test]
fn finite_diff_of_square() {
    let x = t(&[3.0], &[1]);
    let g = finite_diff_grad(|x| x.mul(x).map(|y| y.sum()), &x, 1e-5).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-6);
}

#[test]
fn finite_diff_of_constant_is_zero() {
    let x = t(&[1.0, 2.0], &[2]);
    let g = finite_diff_grad(|_| Ok(Tensor::scalar(5.0)), &x, 1e-5).unwrap();
    assert_close(&g, &[0.0, 0.0], 1e-12);
}

#[derive(Clone, Copy)]
enum Domain {
    Sym,
    Pos,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match domain {
            Domain::Sym => rng.gen_range(-1.0..1.0),
            Domain::Pos => rng.gen_range(0.5..1.5),
        })
        .collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Scalarize an op output against a fixed random weighting so that every
/// output coordinate contributes a distinct adjoint.
fn weighted(out: Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(out.mul(w)?.sum())
}

/// Finite-difference sweep across the whole differentiable op set, 20 seeds.
#[test]
fn all_ops_match_finite_differences() {
    type OpCase = (
        &'static str,
        Vec<usize>,
        Domain,
        Box<dyn Fn(&Tensor) -> Result<Tensor>>,
    );
    // Fixed companions built once per seed from an independent RNG stream.
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let c34 = random_tensor(&mut rng, &[3, 4], Domain::Pos);
        let c43 = random_tensor(&mut rng, &[4, 3], Domain::Sym);
        let w43 = random_tensor(&mut rng, &[4, 3], Domain::Sym);
        let col = random_tensor(&mut rng, &[3, 1], Domain::Pos);
        let row = random_tensor(&mut rng, &[1, 4], Domain::Pos);
        let w34 = random_tensor(&mut rng, &[3, 4], Domain::Sym);
        let w33 = random_tensor(&mut rng, &[3, 3], Domain::Sym);
        let w31 = random_tensor(&mut rng, &[3, 1], Domain::Sym);
        let w24 = random_tensor(&mut rng, &[2, 4], Domain::Sym);
        let w32 = random_tensor(&mut rng, &[3, 2], Domain::Sym);
        let w64 = random_tensor(&mut rng, &[6, 4], Domain::Sym);
        let w38 = random_tensor(&mut rng, &[3, 8], Domain::Sym);
        let w44 = random_tensor(&mut rng, &[4, 4], Domain::Sym);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();

        let cases: Vec<OpCase> = vec![
            ("add", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(x.add(&c)?, &w))
            }),
            ("sub", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(c.sub(x)?, &w))
            }),
            ("mul_self", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.mul(x)?, &w))
            }),
            ("div_num", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(x.div(&c)?, &w))
            }),
            ("div_den", vec![3, 4], Domain::Pos, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(c.div(x)?, &w))
            }),
            ("minimum", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(x.minimum(&c)?, &w))
            }),
            ("maximum", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(x.maximum(&c)?, &w))
            }),
            ("neg", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.neg(), &w))
            }),
            ("exp", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.exp(), &w))
            }),
            ("log", vec![3, 4], Domain::Pos, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.log(), &w))
            }),
            ("tanh", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.tanh(), &w))
            }),
            ("sigmoid", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.sigmoid(), &w))
            }),
            ("log_sigmoid", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.log_sigmoid(), &w))
            }),
            ("pow_scalar", vec![3, 4], Domain::Pos, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.pow_scalar(2.5), &w))
            }),
            ("pow_cube", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.pow_scalar(3.0), &w))
            }),
            ("scale", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.scale(-1.7), &w))
            }),
            ("add_scalar", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.add_scalar(0.3), &w))
            }),
            ("matmul_lhs", vec![3, 4], Domain::Sym, {
                let (c, w) = (c43.clone(), w33.clone());
                Box::new(move |x| weighted(x.matmul(&c)?, &w))
            }),
            ("matmul_rhs", vec![4, 3], Domain::Sym, {
                let (c, w) = (c34.clone(), w33.clone());
                Box::new(move |x| weighted(c.matmul(x)?, &w))
            }),
            ("transpose", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(x.transpose()?, &w.transpose()?))
            }),
            ("sum", vec![3, 4], Domain::Sym, Box::new(|x| Ok(x.sum()))),
            ("mean", vec![3, 4], Domain::Sym, Box::new(|x| Ok(x.mean()))),
            ("sum_rows", vec![3, 4], Domain::Sym, {
                let w = w31.clone();
                Box::new(move |x| weighted(x.sum_rows()?, &w))
            }),
            ("add_colvec_mat", vec![3, 4], Domain::Sym, {
                let (v, w) = (col.clone(), w34.clone());
                Box::new(move |x| weighted(x.add_colvec(&v)?, &w))
            }),
            ("add_colvec_vec", vec![3, 1], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(c.add_colvec(x)?, &w))
            }),
            ("mul_colvec_mat", vec![3, 4], Domain::Sym, {
                let (v, w) = (col.clone(), w34.clone());
                Box::new(move |x| weighted(x.mul_colvec(&v)?, &w))
            }),
            ("mul_colvec_vec", vec![3, 1], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(c.mul_colvec(x)?, &w))
            }),
            ("add_rowvec_mat", vec![3, 4], Domain::Sym, {
                let (v, w) = (row.clone(), w34.clone());
                Box::new(move |x| weighted(x.add_rowvec(&v)?, &w))
            }),
            ("add_rowvec_vec", vec![1, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(c.add_rowvec(x)?, &w))
            }),
            ("mul_rowvec_mat", vec![3, 4], Domain::Sym, {
                let (v, w) = (row.clone(), w34.clone());
                Box::new(move |x| weighted(x.mul_rowvec(&v)?, &w))
            }),
            ("mul_rowvec_vec", vec![1, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w34.clone());
                Box::new(move |x| weighted(c.mul_rowvec(x)?, &w))
            }),
            ("concat_rows", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w64.clone());
                Box::new(move |x| weighted(Tensor::concat_rows(&[x.clone(), c.clone()])?, &w))
            }),
            ("concat_cols", vec![3, 4], Domain::Sym, {
                let (c, w) = (c34.clone(), w38.clone());
                Box::new(move |x| weighted(Tensor::concat_cols(&[x.clone(), c.clone()])?, &w))
            }),
            ("slice_rows", vec![3, 4], Domain::Sym, {
                let w = w24.clone();
                Box::new(move |x| weighted(x.slice_rows(1, 2)?, &w))
            }),
            ("slice_cols", vec![3, 4], Domain::Sym, {
                let w = w32.clone();
                Box::new(move |x| weighted(x.slice_cols(1, 2)?, &w))
            }),
            ("gather_rows", vec![3, 4], Domain::Sym, {
                let w = w44.clone();
                Box::new(move |x| weighted(x.gather_rows(&[0, 2, 1, 2])?, &w))
            }),
            ("masked_fill", vec![3, 4], Domain::Sym, {
                let (m, w) = (mask.clone(), w34.clone());
                Box::new(move |x| weighted(x.masked_fill(&m, 0.5)?, &w))
            }),
            ("reshape", vec![3, 4], Domain::Sym, {
                let w = w43.clone();
                Box::new(move |x| weighted(x.reshape(&[4, 3])?, &w))
            }),
            ("softmax_rows", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(softmax_rows(x)?, &w))
            }),
            ("log_softmax_rows", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(log_softmax_rows(x)?, &w))
            }),
            ("normalize_rows", vec![3, 4], Domain::Pos, {
                let w = w34.clone();
                Box::new(move |x| weighted(normalize_rows(x)?, &w))
            }),
            ("cosine_sim_matrix", vec![3, 4], Domain::Pos, {
                let (c, w) = (c34.clone(), w33.clone());
                Box::new(move |x| weighted(cosine_sim_matrix(x, &c)?, &w))
            }),
            ("gelu", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(gelu(x)?, &w))
            }),
            ("layer_norm_rows", vec![3, 4], Domain::Sym, {
                let w = w34.clone();
                Box::new(move |x| weighted(layer_norm_rows(x, 1e-5)?, &w))
            }),
        ];

        let mut input_rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape, domain, f) in &cases {
            let x = random_tensor(&mut input_rng, shape, *domain);
            let err = gradcheck::check(f, &x, 1e-5).unwrap();
            assert!(
                err <= 1e-4,
                "op {name} seed {seed}: max rel err {err:.3e} exceeds 1e-4"
            );
        }
    }
}

#[test]
fn grad_accumulates_when_tensor_reused() {
    // loss = sum(x * x) + sum(x): grad = 2x + 1
    let x = Tensor::leaf(vec![1.0, -2.0, 0.5], &[3]).unwrap();
    let loss = x.mul(&x).unwrap().sum().add(&x.sum()).unwrap();
    loss.backward().unwrap();
    assert_close(&x.grad().unwrap(), &[3.0, -3.0, 2.0], 1e-12);
}

#[test]
fn rel_err_guard_handles_zero_grads() {
    assert!(max_rel_err(&[0.0, 1e-12], &[0.0, 0.0]) < 1e-4);
}

#[test]
fn layer_norm_rows_centers_and_scales() {
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
    let out = layer_norm_rows(&x, 0.0).unwrap();
    let mean: f64 = out.data().iter().sum::<f64>() / 4.0;
    let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
}
