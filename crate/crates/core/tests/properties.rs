use std::sync::Arc;

use nalgebra::DMatrix;
use opdisc::discretize::{epsilon_error, functor_a_error_on, linearize, subspace_samples, weak_error_on};
use opdisc::galerkin_fem::{
    galerkin_path_matrix, isometry_defect, solve_semilinear, BoundaryCondition, ConvexNonlinearity, FemMesh,
    GalerkinKind,
};
use opdisc::invert::{block_fixed_point, InversionConfig, StartPoint};
use opdisc::layers::{make_layer, resnet_to_rno, CoordinateNetwork, Frame, GKind, LayerSpec, ResidualChain};
use opdisc::monotone::{coercivity_probe, pairwise_alpha_on, small_gain_certificate};
use opdisc::nogo_isotopy::{c_r, isotopy_matrix, tilde_c_r};
use opdisc::spectral_core::{project, sample_ball};
use opdisc::{
    jvp, BasisKind, BasisSpec, CoordinateActivation, FiniteRankOperator, LinearOperatorExpr, PointwiseActivation,
    Space, SpectralVector, Subspace,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vector(dim: usize) -> impl Strategy<Value = SpectralVector> {
    prop::collection::vec(-2.0f64..2.0, dim).prop_map(SpectralVector::new)
}

fn orthogonality_defect(m: &DMatrix<f64>) -> f64 {
    let id = DMatrix::<f64>::identity(m.ncols(), m.ncols());
    (m.transpose() * m - id).amax()
}

fn leaky_layer(space: Arc<Space>, lip_g: f64, seed: u64) -> opdisc::layers::NeuralOperatorLayer {
    let spec = LayerSpec {
        rank: 4,
        decay: 2.0,
        lip_g,
        g: GKind::Nemytskii { activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 } },
        support: Some(8),
        frame: Frame::Random,
    };
    make_layer(space, seed, &spec).unwrap()
}

fn chain(seed: u64, ambient: usize, n: usize, blocks: usize, lip: f64) -> ResidualChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ResidualChain::random(&mut rng, ambient, n, blocks, &[2 * n, 2 * n], CoordinateActivation::LeakyRelu { slope_neg: 0.1 }, lip, None)
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projections_nest_and_split_orthogonally(x in vector(12), a in 0usize..=12, b in 0usize..=12) {
        let (lo, hi) = (a.min(b), a.max(b));
        let p_lo = project(&x, &Subspace::prefix(lo));
        let p_hi = project(&x, &Subspace::prefix(hi));
        prop_assert_eq!(project(&p_hi, &Subspace::prefix(lo)), p_lo.clone());
        prop_assert_eq!(project(&p_lo, &Subspace::prefix(lo)), p_lo.clone());
        let mut rest = x.clone();
        rest.axpy(-1.0, &p_hi);
        prop_assert!((x.norm_sq() - p_hi.norm_sq() - rest.norm_sq()).abs() < 1e-12);
        prop_assert!(p_hi.dot(&rest).abs() < 1e-12);
    }

    #[test]
    fn reflection_is_an_isometric_involution(x in vector(9)) {
        let r = LinearOperatorExpr::reflection_e1(9);
        let once = r.apply(&x).unwrap();
        prop_assert!((once.norm() - x.norm()).abs() < 1e-12);
        prop_assert!(r.apply(&once).unwrap().distance(&x) < 1e-12);
    }

    #[test]
    fn finite_rank_norm_bounds_action(x in vector(16), seed in 0u64..1000) {
        let t = FiniteRankOperator::seeded(16, vec![1.5, 0.5, 0.25], 16, seed).unwrap();
        prop_assert!((t.norm() - 1.5).abs() < 1e-12);
        prop_assert!(t.apply(&x).unwrap().norm() <= 1.5 * x.norm() + 1e-12);
    }

    #[test]
    fn groupsort_is_nonexpansive(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6)) {
        let g = CoordinateActivation::Groupsort2;
        let (ga, gb) = (g.apply(&a), g.apply(&b));
        let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        prop_assert!(dist(&ga, &gb) <= dist(&a, &b) + 1e-12);
        let mut sorted = a.clone();
        sorted.sort_by(f64::total_cmp);
        let mut out = ga.clone();
        out.sort_by(f64::total_cmp);
        prop_assert_eq!(out, sorted);
    }

    #[test]
    fn recu_derivative_matches_difference_quotient(s in -2.0f64..2.0) {
        let p = PointwiseActivation::Recu;
        let h = 1e-6;
        let fd = (p.eval(s + h) - p.eval(s - h)) / (2.0 * h);
        prop_assert!((fd - p.deriv(s)).abs() < 1e-6);
    }

    #[test]
    fn jvp_is_linear_for_linear_maps(x in vector(8), v in vector(8), c in -2.0f64..2.0, seed in 0u64..100) {
        let t = FiniteRankOperator::seeded(8, vec![1.0, 0.5], 8, seed).unwrap();
        let jv = jvp(&t, &x, &v, 1e-6);
        let exact = t.apply(&v).unwrap();
        prop_assert!(jv.distance(&exact) < 1e-6 * (1.0 + v.norm()));
        let jcv = jvp(&t, &x, &v.scale(c), 1e-6);
        prop_assert!(jcv.distance(&jv.scale(c)) < 1e-6 * (1.0 + v.norm()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn residual_blocks_act_on_the_prefix_only(x in vector(10), seed in 0u64..1000) {
        let c = chain(seed, 10, 3, 2, 0.5);
        let y = c.eval(&x).unwrap();
        prop_assert_eq!(&y.coeffs()[3..], &x.coeffs()[3..]);
    }

    #[test]
    fn kernel_form_reproduces_the_chain(seed in 0u64..1000) {
        let space = Arc::new(Space::fourier(8));
        let c = chain(seed, 8, 3, 2, 0.6);
        let rno = resnet_to_rno(space, &c).unwrap();
        for x in sample_ball(8, 1.0, 4, 1.0, seed) {
            let via_kernels = rno.iter().try_fold(x.clone(), |acc, b| b.eval(&acc)).unwrap();
            prop_assert!(via_kernels.distance(&c.eval(&x).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn block_inverse_ignores_the_start(y in vector(8), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = CoordinateNetwork::random(&mut rng, 3, &[6, 6], CoordinateActivation::LeakyRelu { slope_neg: 0.1 }, 0.5, 0.1, None).unwrap();
        let cfg = |start| InversionConfig { tol: 1e-12, start, ..InversionConfig::default() };
        let (a, _) = block_fixed_point(&net, &y, &cfg(StartPoint::Target)).unwrap();
        let (b, _) = block_fixed_point(&net, &y, &cfg(StartPoint::Zero)).unwrap();
        prop_assert!(a.distance(&b) < 1e-10);
        let chain = ResidualChain::new(8, 3, vec![net]).unwrap();
        prop_assert!(chain.eval(&a).unwrap().distance(&y) < 1e-10);
    }

    #[test]
    fn certified_layers_are_monotone_on_samples(seed in 0u64..1000) {
        let space = Arc::new(Space::fourier(12));
        let layer = leaky_layer(space, 0.5, seed);
        let alpha = small_gain_certificate(&layer).unwrap().alpha().unwrap();
        let samples = sample_ball(12, 2.0, 24, 1.0, seed + 1);
        let sampled = pairwise_alpha_on(&layer, &samples, 2.0, seed).unwrap().alpha;
        prop_assert!(sampled >= alpha - 1e-9);
        prop_assert!(coercivity_probe(&layer, alpha, &[0.5, 1.0, 2.0], 16, seed) >= -1e-9);
    }

    #[test]
    fn discretization_is_exact_on_its_own_subspace(seed in 0u64..1000, d in 1usize..12) {
        let space = Arc::new(Space::fourier(12));
        let layer = leaky_layer(space, 0.5, seed);
        let v = Subspace::prefix(d);
        let samples = subspace_samples(12, &v, 1.0, 8, seed);
        let disc = linearize(&layer, v);
        prop_assert_eq!(epsilon_error(&disc, &v, &samples), 0.0);
        for y in &samples {
            prop_assert_eq!(project(y, &v), y.clone());
        }
    }

    #[test]
    fn functor_error_does_not_grow_with_the_subspace(seed in 0u64..1000) {
        let space = Arc::new(Space::fourier(16));
        let layer = leaky_layer(space, 0.5, seed);
        // Common samples keep the comparison monotone up to rounding.
        let samples = sample_ball(16, 1.0, 16, 1.0, seed);
        let errs: Vec<f64> = [2, 4, 8, 16].iter().map(|&d| functor_a_error_on(&layer, &Subspace::prefix(d), &samples)).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(errs[3] < 1e-12);
    }

    #[test]
    fn weak_error_vanishes_inside_the_subspace(seed in 0u64..1000, d in 1usize..8) {
        let space = Arc::new(Space::fourier(8));
        let layer = leaky_layer(space, 0.3, seed);
        let v = Subspace::prefix(d);
        let probes: Vec<SpectralVector> = (0..d).map(|k| SpectralVector::unit(8, k)).collect();
        let samples = subspace_samples(8, &v, 1.0, 6, seed);
        prop_assert!(weak_error_on(&layer, &v, &probes, &samples).unwrap() < 1e-12);
    }

    #[test]
    fn path_matrices_are_symmetric_and_continuous(s in 0.0f64..1.0, n in 2usize..7) {
        for (kind, basis) in [(GalerkinKind::A, BasisKind::Fourier), (GalerkinKind::B, BasisKind::FemHat)] {
            let m = galerkin_path_matrix(kind, s, n, basis).unwrap();
            prop_assert!((m.clone() - m.transpose()).amax() < 1e-12);
            let near = galerkin_path_matrix(kind, (s + 1e-6).min(1.0), n, basis).unwrap();
            prop_assert!((m - near).amax() < 1e-3);
        }
    }

    #[test]
    fn multiplication_by_the_path_sign_is_isometric(s in 0.0f64..1.0, coeffs in prop::collection::vec(-1.0f64..1.0, 5)) {
        prop_assert!(isometry_defect(s, &coeffs, BasisKind::Fourier) < 1e-10);
    }

    #[test]
    fn isotopy_paths_stay_orthogonal(t in 0.0f64..1.0) {
        prop_assert!(orthogonality_defect(&c_r(t, 6).unwrap()) < 1e-12);
        prop_assert!(orthogonality_defect(&tilde_c_r(t, 7).unwrap()) < 1e-12);
        prop_assert!(orthogonality_defect(&isotopy_matrix(t, 8).unwrap()) < 1e-12);
        let near = isotopy_matrix((t + 1e-6).min(1.0), 8).unwrap();
        prop_assert!((isotopy_matrix(t, 8).unwrap() - near).amax() < 1e-4);
    }

    #[test]
    fn newton_energy_never_increases(amp in -20.0f64..20.0, elements in 4usize..40) {
        let mesh = FemMesh::new(elements, BoundaryCondition::DirichletDirichlet).unwrap();
        let sol = solve_semilinear(|x| amp * (3.0 * x).sin(), &mesh, ConvexNonlinearity::Cubic, 1e-10).unwrap();
        prop_assert!(sol.energy_decreasing());
        prop_assert!(sol.residual <= 1e-10);
    }
}

#[test]
fn endpoint_determinants_of_the_fourier_path() {
    for n in 1..=6 {
        let at0 = galerkin_path_matrix(GalerkinKind::A, 0.0, n, BasisKind::Fourier).unwrap().determinant();
        let at1 = galerkin_path_matrix(GalerkinKind::A, 1.0, n, BasisKind::Fourier).unwrap().determinant();
        assert!((at0 - 1.0).abs() < 1e-10, "n={n}: {at0}");
        assert!((at1 - (-1f64).powi(n as i32)).abs() < 1e-10, "n={n}: {at1}");
    }
}

#[test]
fn basis_is_orthonormal() {
    for kind in [BasisKind::Fourier, BasisKind::AbstractOrthonormal] {
        let space = Space::new(BasisSpec { basis: kind, ambient_dim: 10, quadrature: None }).unwrap();
        let defect = (space.gram() - DMatrix::<f64>::identity(10, 10)).amax();
        assert!(defect < 1e-12, "{kind:?}: {defect}");
    }
}
