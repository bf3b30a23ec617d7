use super::*;
use crate::cp::{Curvature, CurvatureMask, SweepResult};
use crate::exact::exact_hessian;
use crate::graph::{evaluate, gradient};
use crate::testing::{central_gradient, random_batch, random_mlp, rel_l2};

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn parameter_layout() {
    let mlp = Mlp::zeros(&[256, 20, 20, 20, 10], Nonlinearity::Tanh).unwrap();
    assert_eq!(mlp.param_count(), 6190);
    assert_eq!(mlp.layer_offsets(), vec![0, 5140, 5560, 5980]);
    assert!(Mlp::zeros(&[3], Nonlinearity::Tanh).is_err());
    assert!(Mlp::zeros(&[3, 0, 1], Nonlinearity::Tanh).is_err());

    let params: Vec<f64> = (0..mlp.param_count()).map(|i| i as f64).collect();
    let mut m = mlp.clone();
    m.set_params(&params).unwrap();
    assert_eq!(m.params(), params);
    // Row-major: W_0[1, 0] follows the 257 entries of row 0.
    assert_eq!(m.weights()[0][(1, 0)], 257.0);
}

#[test]
fn zero_weights() {
    let mlp = Mlp::zeros(&[2, 2, 1], Nonlinearity::Tanh).unwrap();
    let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
    let t = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
    let (loss, grad, _) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
    assert!((loss - 0.5 * t.norm_squared() / 3.0).abs() < 1e-15);
    // tanh(0) = 0 kills every gradient except the output bias.
    let bias = mlp.param_count() - 1;
    for (i, g) in grad.iter().enumerate() {
        if i == bias {
            assert!((g - (-t.sum() / 3.0)).abs() < 1e-15);
        } else {
            assert_eq!(*g, 0.0, "entry {i}");
        }
    }
}

#[test]
fn batch_shape_errors() {
    let mlp = Mlp::zeros(&[2, 1], Nonlinearity::Tanh).unwrap();
    assert!(mlp_objective_and_gradient(&mlp, &DMatrix::zeros(3, 2), &DMatrix::zeros(1, 2)).is_err());
    assert!(mlp_objective_and_gradient(&mlp, &DMatrix::zeros(2, 2), &DMatrix::zeros(1, 3)).is_err());
    assert!(mlp_objective_and_gradient(&mlp, &DMatrix::zeros(2, 0), &DMatrix::zeros(1, 0)).is_err());
    let (_, _, tape) = mlp_objective_and_gradient(&mlp, &DMatrix::zeros(2, 2), &DMatrix::zeros(1, 2)).unwrap();
    let bad = MlpNoise {
        layers: vec![DMatrix::zeros(0, 2), DMatrix::zeros(1, 3)],
    };
    assert!(cp_diagonal_sample(&mlp, &tape, &bad).is_err());
}

#[test]
fn gradient_matches_graph_and_finite_differences() {
    let mut rng = draw_rng(1, 0);
    for hidden in Nonlinearity::ALL {
        for sizes in [vec![4, 3, 2], vec![6, 5, 4, 2]] {
            let (mlp, x, t) = random_mlp(&sizes, hidden, 3, &mut rng);
            let (loss, grad, _) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
            let g = mlp_as_graph(&mlp, &x, &t).unwrap();
            assert_eq!(g.graph.input_dim(), mlp.param_count());
            let tape = evaluate(&g.graph, &g.params).unwrap();
            let gs = gradient(&g.graph, &tape).unwrap();
            assert!((tape.value() - loss).abs() <= 1e-10 * loss.abs().max(1.0));
            assert!(rel_l2(&grad, gs.gradient()) <= 1e-10, "{hidden:?}");

            let f = |p: &[f64]| {
                let m = Mlp::from_params(&sizes, hidden, p).unwrap();
                mlp_objective_and_gradient(&m, &x, &t).unwrap().0
            };
            let fd = central_gradient(f, &mlp.params(), 1e-5);
            assert!(rel_l2(&grad, &fd) <= 1e-5, "{hidden:?}: {}", rel_l2(&grad, &fd));
        }
    }
}

#[test]
fn case_graphs_sum_to_batch_graph() {
    let mut rng = draw_rng(2, 0);
    let (mlp, x, t) = random_mlp(&[3, 2, 2], Nonlinearity::Softplus, 3, &mut rng);
    let whole = mlp_as_graph(&mlp, &x, &t).unwrap();
    let h = exact_hessian(&whole.graph, &whole.params).unwrap().into_matrix();
    let mut sum = DMatrix::zeros(h.nrows(), h.ncols());
    for g in mlp_case_graphs(&mlp, &x, &t).unwrap() {
        sum += exact_hessian(&g.graph, &g.params).unwrap().into_matrix();
    }
    assert!((sum - &h).norm() <= 1e-12 * h.norm());
}

#[test]
fn output_jacobian_matches_finite_differences() {
    let mut rng = draw_rng(3, 0);
    let (mlp, x, _) = random_mlp(&[3, 3, 2], Nonlinearity::Tanh, 2, &mut rng);
    let j = mlp.output_jacobian(&x).unwrap();
    for o in 0..j.nrows() {
        let f = |p: &[f64]| {
            let m = Mlp::from_params(mlp.sizes(), mlp.hidden(), p).unwrap();
            let z = m.outputs(&x).unwrap();
            z[(o % 2, o / 2)]
        };
        let fd = central_gradient(f, &mlp.params(), 1e-6);
        let row: Vec<f64> = j.row(o).iter().copied().collect();
        assert!(rel_l2(&row, &fd) <= 1e-7);
    }
}

#[test]
fn linear_net_single_output_is_exact_gauss_newton() {
    let mut rng = draw_rng(4, 0);
    let (mlp, x, t) = random_mlp(&[3, 4, 1], Nonlinearity::Identity, 5, &mut rng);
    let j = mlp.output_jacobian(&x).unwrap();
    let gn: Vec<f64> = (0..j.ncols()).map(|p| j.column(p).norm_squared() / 5.0).collect();
    for seed in 0..3 {
        let noise = MlpNoise::sample(mlp.sizes(), 5, NoiseDist::Rademacher, &mut draw_rng(seed, 0));
        let d = mlp_cp_diagonal(&mlp, &x, &t, &noise).unwrap();
        assert!(max_rel(&d.diag, &gn) <= 1e-12);
    }
}

#[test]
fn batched_sweeps_equal_the_generic_graph() {
    let mut rng = draw_rng(5, 0);
    for hidden in [Nonlinearity::Tanh, Nonlinearity::Softplus, Nonlinearity::Identity] {
        let (mlp, x, t) = random_mlp(&[4, 3, 3, 2], hidden, 3, &mut rng);
        let (_, _, tape) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
        let cases = mlp_case_graphs(&mlp, &x, &t).unwrap();
        for dist in [NoiseDist::Gaussian, NoiseDist::Rademacher] {
            let noise = MlpNoise::sample(mlp.sizes(), 3, dist, &mut rng);
            let mut s_graph = vec![0.0; mlp.param_count()];
            let mut tu_graph = vec![0.0; mlp.param_count()];
            for g in &cases {
                let curv = Curvature::new(&g.graph, &g.params, CurvatureMask::SkipBilinear).unwrap();
                let draw = g.noise_draw(&noise, hidden).unwrap();
                let s = curv.sweep_s(&draw).unwrap().diagonal();
                let tu = curv.sweep_tu(&draw).unwrap().diagonal();
                s_graph.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
                tu_graph.iter_mut().zip(&tu).for_each(|(a, v)| *a += v);
            }
            let s_mlp = cp_diagonal_sample(&mlp, &tape, &noise).unwrap();
            assert!(max_rel(&s_mlp, &s_graph) <= 1e-10, "{hidden:?} S");
            let tu_mlp = tu_diagonal_sample(&mlp, &tape, &noise).unwrap();
            assert!(max_rel(&tu_mlp, &tu_graph) <= 1e-10, "{hidden:?} TU");
        }
    }
}

#[test]
fn batch_is_average_of_single_cases() {
    let mut rng = draw_rng(6, 0);
    let (mlp, x, t) = random_mlp(&[3, 4, 2], Nonlinearity::Tanh, 4, &mut rng);
    let noise = MlpNoise::sample(mlp.sizes(), 4, NoiseDist::Gaussian, &mut rng);
    let whole = mlp_cp_diagonal(&mlp, &x, &t, &noise).unwrap().diag;
    let mut avg = vec![0.0; whole.len()];
    for b in 0..4 {
        let one = MlpNoise {
            layers: noise.layers.iter().map(|m| m.columns(b, 1).into_owned()).collect(),
        };
        let d = mlp_cp_diagonal(&mlp, &x.columns(b, 1).into_owned(), &t.columns(b, 1).into_owned(), &one)
            .unwrap()
            .diag;
        avg.iter_mut().zip(&d).for_each(|(a, v)| *a += v / 4.0);
    }
    for (a, b) in whole.iter().zip(&avg) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn basis_sweeps_give_the_exact_diagonal() {
    let mut rng = draw_rng(7, 0);
    for hidden in Nonlinearity::ALL {
        let (mlp, x, t) = random_mlp(&[4, 3, 2], hidden, 2, &mut rng);
        let (_, _, tape) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
        let g = mlp_as_graph(&mlp, &x, &t).unwrap();
        let exact = exact_hessian(&g.graph, &g.params).unwrap().diagonal();
        let basis = exact_diagonal_by_basis(&mlp, &tape).unwrap();
        assert!(rel_l2(&basis, &exact) <= 1e-10, "{hidden:?}");
        let hvp = crate::exact::hessian_diagonal(&g.graph, &g.params).unwrap();
        assert!(rel_l2(&hvp, &exact) <= 1e-10, "{hidden:?}");
    }
}

#[test]
fn becker_lecun_exact_for_width_one() {
    let mut rng = draw_rng(8, 0);
    for hidden in [Nonlinearity::Tanh, Nonlinearity::Logistic, Nonlinearity::Softplus] {
        let (mlp, x, t) = random_mlp(&[1, 1, 1, 1], hidden, 3, &mut rng);
        let g = mlp_as_graph(&mlp, &x, &t).unwrap();
        let exact = exact_hessian(&g.graph, &g.params).unwrap().diagonal();
        let bl = becker_lecun_diagonal(&mlp, &x, &t).unwrap();
        assert!(rel_l2(&bl.diag, &exact) <= 1e-8, "{hidden:?}");
    }
}

#[test]
fn becker_lecun_single_layer_is_gauss_newton() {
    let mut rng = draw_rng(9, 0);
    let (mlp, x, t) = random_mlp(&[4, 3], Nonlinearity::Tanh, 5, &mut rng);
    let j = mlp.output_jacobian(&x).unwrap();
    let gn: Vec<f64> = (0..j.ncols()).map(|p| j.column(p).norm_squared() / 5.0).collect();
    let bl = becker_lecun_diagonal(&mlp, &x, &t).unwrap();
    assert!(rel_l2(&bl.diag, &gn) <= 1e-12);
}

#[test]
fn becker_lecun_is_biased_in_general() {
    let mut rng = draw_rng(10, 0);
    let (mlp, x, t) = random_mlp(&[4, 3, 3, 2], Nonlinearity::Tanh, 2, &mut rng);
    let g = mlp_as_graph(&mlp, &x, &t).unwrap();
    let exact = exact_hessian(&g.graph, &g.params).unwrap().diagonal();
    let bl = becker_lecun_diagonal(&mlp, &x, &t).unwrap();
    assert!(rel_l2(&bl.diag, &exact) > 1e-3);
}

#[test]
fn becker_lecun_exact_with_one_hidden_layer() {
    // The output Hessian of the squared loss is diagonal, so with a single
    // hidden layer no off-diagonal curvature is ever dropped.
    let mut rng = draw_rng(10, 1);
    for hidden in Nonlinearity::ALL {
        let (mlp, x, t) = random_mlp(&[4, 3, 2], hidden, 2, &mut rng);
        let g = mlp_as_graph(&mlp, &x, &t).unwrap();
        let exact = exact_hessian(&g.graph, &g.params).unwrap().diagonal();
        let bl = becker_lecun_diagonal(&mlp, &x, &t).unwrap();
        assert!(rel_l2(&bl.diag, &exact) <= 1e-10, "{hidden:?}: {:e}", rel_l2(&bl.diag, &exact));
    }
}

#[test]
fn estimates_are_thread_count_independent() {
    let mut rng = draw_rng(11, 0);
    let (mlp, x, t) = random_mlp(&[5, 4, 3], Nonlinearity::Tanh, 6, &mut rng);
    let (_, _, tape) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mlp_diagonal_estimate(&mlp, &tape, SweepKind::S, NoiseDist::Rademacher, 40, 3).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn sgd_reduces_the_loss() {
    let mut rng = draw_rng(12, 0);
    let sizes = [5, 6, 3];
    let mut mlp = Mlp::random(&sizes, Nonlinearity::Tanh, 0.1, &mut rng).unwrap();
    let (x, t) = random_batch(&sizes, 40, &mut rng);
    let before = mlp_objective_and_gradient(&mlp, &x, &t).unwrap().0;
    let losses = train_sgd(&mut mlp, &x, &t, 30, 0.05, 8, &mut rng).unwrap();
    assert_eq!(losses.len(), 30);
    assert!(*losses.last().unwrap() < before);
}

#[test]
fn sweep_result_diagonal_uses_real_part() {
    let r = SweepResult::S {
        re: vec![1.0, 0.0],
        im: vec![0.0, 2.0],
    };
    assert_eq!(r.diagonal(), vec![1.0, -4.0]);
}

#[test]
fn case_hvp_matches_the_case_graph() {
    use crate::exact::hessian_vector_product;
    for g in [Nonlinearity::Tanh, Nonlinearity::Softplus, Nonlinearity::Square, Nonlinearity::Identity] {
        let mut rng = draw_rng(21, 0);
        let (mlp, x, t) = random_mlp(&[4, 3, 3, 2], g, 3, &mut rng);
        let (_, _, tape) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
        let graphs = mlp_case_graphs(&mlp, &x, &t).unwrap();
        let w = crate::testing::normal_vec(mlp.param_count(), &mut rng);
        for (b, cg) in graphs.iter().enumerate() {
            let want = hessian_vector_product(&cg.graph, &cg.params, &w).unwrap();
            let got = case_hvp(&mlp, &tape, b, &w).unwrap();
            assert!(rel_l2(&got, &want) < 1e-12, "{g:?} case {b}");
        }
    }
}

#[test]
fn simple_draw_is_sum_of_case_products() {
    let mut rng = draw_rng(22, 0);
    let (mlp, x, t) = random_mlp(&[3, 2, 2], Nonlinearity::Tanh, 2, &mut rng);
    let (_, _, tape) = mlp_objective_and_gradient(&mlp, &x, &t).unwrap();
    let got = mlp_diagonal_draw(&mlp, &tape, SweepKind::Simple, NoiseDist::Gaussian, 5, 3).unwrap();
    let mut want = vec![0.0; mlp.param_count()];
    for b in 0..2 {
        let mut w = vec![0.0; want.len()];
        NoiseDist::Gaussian.fill(&mut draw_rng(5, 3 * 2 + b as u64), &mut w);
        let hw = case_hvp(&mlp, &tape, b, &w).unwrap();
        for i in 0..want.len() {
            want[i] += hw[i] * w[i];
        }
    }
    assert_eq!(got, want);
    assert!(case_hvp(&mlp, &tape, 2, &want).is_err());
    assert!(case_hvp(&mlp, &tape, 0, &want[1..]).is_err());
}
