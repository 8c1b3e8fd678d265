use approx::assert_relative_eq;
use nalgebra::{DVector, Matrix3xX, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthpose_core::body::{KinematicTree, PoseParams, ShapeParams, Translation};
use synthpose_core::fit::{
    fit_sequence, fit_sequence_data, loss_2d, loss_3d, loss_smpl, objective, objective_gradient, smoothness_term,
    FitConfig, FitState, Schedule,
};
use synthpose_core::synth::{generate_scenario, synthesize_sequence, Catalogs, World};
use synthpose_core::{Error, Mat3, Vec3};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
}

// Four-joint chain with a side branch and two shape coefficients.
fn small_tree() -> KinematicTree {
    let rest = vec![
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(0.0, 0.4, 0.0),
        Vec3::new(0.3, 0.1, 0.0),
        Vec3::new(0.0, 0.3, 0.1),
    ];
    let blend = rest
        .iter()
        .map(|o| Matrix3xX::from_columns(&[o * 0.05, Vec3::new(0.01, -0.02, 0.03)]))
        .collect();
    let names = ["root", "mid", "side", "tip"].iter().map(|s| s.to_string()).collect();
    KinematicTree::new(&[0, 1, 1], rest, blend, names).unwrap()
}

fn posed(tree: &KinematicTree, theta: &[Vec3], beta: &[f64], t: Vec3) -> Vec<Vec3> {
    tree.forward_kinematics(&PoseParams(theta.to_vec()), &ShapeParams(DVector::from_column_slice(beta)), &Translation(t))
        .unwrap()
}

fn rotation_angle(a: &Vec3, b: &Vec3) -> f64 {
    let rel: Mat3 = synthpose_core::rotation::rodrigues(a).transpose() * synthpose_core::rotation::rodrigues(b);
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[test]
fn loss_3d_examples() {
    let a = vec![Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)];
    assert_eq!(loss_3d(&a, &a, &[true, true]).unwrap(), 0.0);
    let b = vec![Vec3::zeros(), Vec3::new(1.003, 2.004, 3.0)];
    assert_relative_eq!(loss_3d(&a, &b, &[true, true]).unwrap() * 1000.0, 5.0, epsilon = 1e-9);
    assert!(matches!(loss_3d(&a, &b, &[false, false]), Err(Error::EmptyMask)));
}

#[test]
fn loss_3d_matches_coordinate_sum() {
    let mut r = rng(1);
    for _ in 0..50 {
        let n = r.random_range(1..30);
        let p: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut r, 2.0)).collect();
        let q: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut r, 2.0)).collect();
        let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        m[0] = true;
        let mut s = 0.0;
        for i in 0..n {
            if m[i] {
                for c in 0..3 {
                    s += (p[i][c] - q[i][c]) * (p[i][c] - q[i][c]);
                }
            }
        }
        assert_relative_eq!(loss_3d(&p, &q, &m).unwrap(), s.sqrt(), epsilon = 1e-12);
    }
}

#[test]
fn loss_2d_examples_and_oracle() {
    let a = vec![Vector2::new(10.0, 20.0), Vector2::new(30.0, 40.0)];
    assert_eq!(loss_2d(&a, &a, &[true, true]).unwrap(), 0.0);
    let b = vec![Vector2::new(11.0, 20.0), Vector2::new(0.0, 0.0)];
    assert_eq!(loss_2d(&a, &b, &[true, false]).unwrap(), 1.0);
    let mut r = rng(2);
    for _ in 0..50 {
        let n = r.random_range(1..20);
        let p: Vec<Vector2<f64>> = (0..n).map(|_| Vector2::new(r.random_range(0.0..1920.0), r.random_range(0.0..1080.0))).collect();
        let q: Vec<Vector2<f64>> = (0..n).map(|_| Vector2::new(r.random_range(0.0..1920.0), r.random_range(0.0..1080.0))).collect();
        let m = vec![true; n];
        let s: f64 = (0..n).map(|i| (p[i].x - q[i].x).powi(2) + (p[i].y - q[i].y).powi(2)).sum();
        assert_relative_eq!(loss_2d(&p, &q, &m).unwrap(), s.sqrt(), epsilon = 1e-12, max_relative = 1e-12);
    }
}

#[test]
fn loss_smpl_examples_and_oracle() {
    let th = PoseParams::zeros(3);
    let b = ShapeParams::zeros(10);
    assert_eq!(loss_smpl(&th, &b, &th, &b).unwrap(), 0.0);
    let mut th2 = th.clone();
    th2.0[1].y = 0.3;
    let mut b2 = b.clone();
    b2.0[4] = 0.4;
    assert_relative_eq!(loss_smpl(&th, &b, &th2, &b2).unwrap(), 0.7, epsilon = 1e-12);

    let mut r = rng(3);
    for _ in 0..20 {
        let t1: Vec<f64> = (0..72).map(|_| r.random_range(-1.0..1.0)).collect();
        let t2: Vec<f64> = (0..72).map(|_| r.random_range(-1.0..1.0)).collect();
        let b1: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
        let b2: Vec<f64> = (0..10).map(|_| r.random_range(-2.0..2.0)).collect();
        let dt: f64 = t1.iter().zip(&t2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let db: f64 = b1.iter().zip(&b2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let got = loss_smpl(
            &PoseParams::from_flat(&t1).unwrap(),
            &ShapeParams::new(b1).unwrap(),
            &PoseParams::from_flat(&t2).unwrap(),
            &ShapeParams::new(b2).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(got, dt + db, epsilon = 1e-12);
    }
}

#[test]
fn smoothness_examples_and_trace_oracle() {
    let pose = PoseParams(vec![Vec3::new(0.1, 0.2, 0.3); 4]);
    assert_eq!(smoothness_term(&[pose.clone(), pose.clone(), pose.clone()]), 0.0);
    assert_eq!(smoothness_term(&[pose.clone()]), 0.0);

    let a = PoseParams(vec![Vec3::new(0.0, 0.0, 0.2)]);
    let b = PoseParams(vec![Vec3::new(0.0, 0.0, 0.2 + std::f64::consts::FRAC_PI_6)]);
    assert_relative_eq!(smoothness_term(&[a, b]), std::f64::consts::FRAC_PI_6.powi(2), epsilon = 1e-12);

    // Relative angles stay below ~2.1 rad where acos is well conditioned.
    let mut r = rng(4);
    for _ in 0..20 {
        let frames: Vec<PoseParams> = (0..5).map(|_| PoseParams((0..6).map(|_| rand_vec(&mut r, 0.6)).collect())).collect();
        let mut oracle = 0.0;
        for t in 1..frames.len() {
            for j in 0..6 {
                oracle += rotation_angle(&frames[t - 1].0[j], &frames[t].0[j]).powi(2);
            }
        }
        assert_relative_eq!(smoothness_term(&frames), oracle, epsilon = 1e-9);
    }
}

fn random_problem(tree: &KinematicTree, frames: usize, seed: u64) -> (Vec<Vec<Vec3>>, Vec<Vec<bool>>, FitState) {
    let mut r = rng(seed);
    let j = tree.joint_count();
    let targets = (0..frames).map(|_| (0..j).map(|_| rand_vec(&mut r, 1.0)).collect()).collect();
    let masks = (0..frames).map(|_| (0..j).map(|i| i < 4 || r.random_bool(0.8)).collect()).collect();
    let state = FitState {
        beta: DVector::from_fn(tree.shape_dim(), |_, _| r.random_range(-1.0..1.0)),
        theta: (0..frames).map(|_| (0..j).map(|_| rand_vec(&mut r, 1.0)).collect()).collect(),
        translation: (0..frames).map(|_| rand_vec(&mut r, 0.5)).collect(),
    };
    (targets, masks, state)
}

fn check_gradient(tree: &KinematicTree, frames: usize, seed: u64) {
    let config = FitConfig { lambda_smooth: 0.7, lambda_shape: 0.3, ..FitConfig::default() };
    let (targets, masks, state) = random_problem(tree, frames, seed);
    let g = objective_gradient(&state, &targets, &masks, tree, &config);
    let x = state.to_vector();
    let h = 1e-6;
    let scale = g.amax();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let sp = FitState::from_vector(&xp, tree.shape_dim(), frames, tree.joint_count());
        let sm = FitState::from_vector(&xm, tree.shape_dim(), frames, tree.joint_count());
        let fd = (objective(&sp, &targets, &masks, tree, &config) - objective(&sm, &targets, &masks, tree, &config)) / (2.0 * h);
        let err = (fd - g[i]).abs() / g[i].abs().max(1e-3 * scale);
        assert!(err < 1e-4, "component {i}: analytic {} vs fd {fd}", g[i]);
    }
}

#[test]
fn gradient_matches_finite_differences_small_tree() {
    let tree = small_tree();
    for seed in 0..5 {
        check_gradient(&tree, 3, seed);
    }
}

#[test]
fn gradient_matches_finite_differences_full_tree() {
    check_gradient(&KinematicTree::smpl_like(), 2, 11);
}

#[test]
fn shape_gradient_vanishes_without_data_and_prior() {
    let tree = KinematicTree::smpl_like();
    let config = FitConfig { lambda_data: 0.0, lambda_shape: 0.0, lambda_smooth: 1.0, ..FitConfig::default() };
    let (targets, masks, state) = random_problem(&tree, 3, 5);
    let g = objective_gradient(&state, &targets, &masks, &tree, &config);
    assert!(g.rows(0, tree.shape_dim()).iter().all(|v| *v == 0.0));
    assert!(g.amax() > 0.0);
}

#[test]
fn gradient_vanishes_at_noiseless_optimum() {
    let tree = KinematicTree::smpl_like();
    let mut r = rng(6);
    let theta: Vec<Vec3> = (0..24).map(|_| rand_vec(&mut r, 0.4)).collect();
    let translation: Vec<Vec3> = (0..4).map(|_| rand_vec(&mut r, 1.0)).collect();
    let targets: Vec<Vec<Vec3>> = translation.iter().map(|t| posed(&tree, &theta, &[0.0; 10], *t)).collect();
    let masks = vec![vec![true; 24]; 4];
    let state = FitState { beta: DVector::zeros(10), theta: vec![theta; 4], translation };
    let g = objective_gradient(&state, &targets, &masks, &tree, &FitConfig::default());
    assert!(g.norm() < 1e-6, "gradient norm {}", g.norm());
}

#[test]
fn rest_pose_single_frame_recovers_translation() {
    let tree = KinematicTree::smpl_like();
    let t = Vec3::new(0.4, -0.2, 3.0);
    let targets = vec![posed(&tree, &[Vec3::zeros(); 24], &[0.0; 10], t)];
    let fit = fit_sequence(&targets, &[vec![true; 24]], &tree, &FitConfig::default()).unwrap();
    assert!(fit.residual_rms[0] < 1e-4);
    assert!((fit.translation[0].0 - t).norm() < 1e-4);
    assert_eq!(fit.beta.0.len(), 10);
}

fn synthetic(seed: u64) -> synthpose_core::synth::SequenceData {
    let catalogs = Catalogs::standard(7);
    let world = World::standard();
    let spec = generate_scenario(&format!("seq_{seed}"), seed, &catalogs, "default").unwrap();
    synthesize_sequence(&spec, &world, &catalogs).unwrap()
}

#[test]
fn noiseless_sequence_fits_keypoints() {
    let tree = KinematicTree::smpl_like();
    for seed in [1, 2] {
        let seq = synthetic(seed);
        let fit = fit_sequence_data(&seq, &tree, &FitConfig::default()).unwrap();
        assert_eq!(fit.frames(), seq.len());
        let worst = fit.residual_rms.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 5e-3, "seed {seed}: worst frame RMS {worst}");
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
        let kp = fit.keypoints(&tree);
        for f in 0..seq.len() {
            let err = loss_3d(&kp[f], seq.native_joints(f), &vec![true; 24]).unwrap() / 24f64.sqrt();
            assert!(err < 5e-3);
        }
    }
}

#[test]
fn per_frame_schedule_keeps_zero_shape() {
    let tree = KinematicTree::smpl_like();
    let seq = synthetic(3);
    let config = FitConfig { schedule: Schedule::PerFrame, ..FitConfig::default() };
    let fit = fit_sequence_data(&seq, &tree, &config).unwrap();
    assert!(fit.beta.0.iter().all(|b| *b == 0.0));
    assert_eq!(fit.residual_rms.len(), seq.len());
}

#[test]
fn fit_is_bit_deterministic() {
    let tree = KinematicTree::smpl_like();
    let seq = synthetic(4);
    let a = fit_sequence_data(&seq, &tree, &FitConfig::default()).unwrap();
    let b = fit_sequence_data(&seq, &tree, &FitConfig::default()).unwrap();
    assert_eq!(a.beta, b.beta);
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.translation, b.translation);
    assert_eq!(a.history, b.history);
}

#[test]
fn translating_targets_shifts_translation() {
    let tree = KinematicTree::smpl_like();
    let seq = synthetic(5);
    let (targets, masks) = synthpose_core::fit::targets_from_sequence(&seq);
    let targets: Vec<_> = targets.into_iter().take(12).collect();
    let masks: Vec<_> = masks.into_iter().take(12).collect();
    let v = Vec3::new(1.5, -0.3, 2.0);
    let moved: Vec<Vec<Vec3>> = targets.iter().map(|f| f.iter().map(|p| p + v).collect()).collect();
    let config = FitConfig::default();
    let a = fit_sequence(&targets, &masks, &tree, &config).unwrap();
    let b = fit_sequence(&moved, &masks, &tree, &config).unwrap();
    for f in 0..targets.len() {
        assert!((b.translation[f].0 - a.translation[f].0 - v).norm() < 1e-6);
        for j in 0..24 {
            assert!(rotation_angle(&a.theta[f].0[j], &b.theta[f].0[j]) < 1e-5);
        }
    }
    assert!((&a.beta.0 - &b.beta.0).norm() < 1e-5);
}

// Shared-pose fit by plain Gauss-Newton with forward-difference Jacobians.
fn shared_pose_oracle(tree: &KinematicTree, targets: &[Vec<Vec3>], lambda_shape: f64) -> Vec<f64> {
    let j = tree.joint_count();
    let k = tree.shape_dim();
    let n = 3 * j + k + 3 * targets.len();
    let unpack = |x: &DVector<f64>| {
        let theta: Vec<Vec3> = (0..j).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect();
        let beta: Vec<f64> = (0..k).map(|i| x[3 * j + i]).collect();
        let ts: Vec<Vec3> = (0..targets.len()).map(|f| {
            let o = 3 * j + k + 3 * f;
            Vec3::new(x[o], x[o + 1], x[o + 2])
        }).collect();
        (theta, beta, ts)
    };
    let residual = |x: &DVector<f64>| {
        let (theta, beta, ts) = unpack(x);
        let mut r = Vec::new();
        for (f, target) in targets.iter().enumerate() {
            for (p, q) in posed(tree, &theta, &beta, ts[f]).iter().zip(target) {
                r.extend((p - q).iter());
            }
        }
        r.extend(beta.iter().map(|b| b * lambda_shape.sqrt()));
        DVector::from_vec(r)
    };
    let mut x = DVector::zeros(n);
    for (f, target) in targets.iter().enumerate() {
        let o = 3 * j + k + 3 * f;
        let t0 = target[0] - tree.rest_offsets()[0];
        x.rows_mut(o, 3).copy_from(&t0);
    }
    let mut mu = 1e-3;
    let mut cost = residual(&x).norm_squared();
    for _ in 0..500 {
        let r = residual(&x);
        let mut jac = nalgebra::DMatrix::zeros(r.len(), n);
        for c in 0..n {
            let mut xp = x.clone();
            xp[c] += 1e-7;
            jac.set_column(c, &((residual(&xp) - &r) / 1e-7));
        }
        let h = jac.tr_mul(&jac) + nalgebra::DMatrix::identity(n, n) * mu;
        let step = h.cholesky().unwrap().solve(&(-jac.tr_mul(&r)));
        let cand = &x + &step;
        let c2 = residual(&cand).norm_squared();
        if c2 < cost {
            let done = cost - c2 < 1e-16;
            x = cand;
            cost = c2;
            mu *= 0.3;
            if done {
                break;
            }
        } else {
            mu *= 10.0;
        }
    }
    let (theta, beta, ts) = unpack(&x);
    targets
        .iter()
        .enumerate()
        .map(|(f, target)| {
            let p = posed(tree, &theta, &beta, ts[f]);
            (p.iter().zip(target).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / j as f64).sqrt()
        })
        .collect()
}

#[test]
fn heavy_smoothing_matches_shared_pose_fit() {
    let tree = small_tree();
    let a = [Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, 0.2, 0.3), Vec3::new(0.0, 0.0, -0.4), Vec3::new(0.3, 0.1, 0.0)];
    let b = [Vec3::new(0.0, 0.1, 0.1), Vec3::new(0.2, 0.0, 0.1), Vec3::new(0.1, 0.0, 0.2), Vec3::new(-0.2, 0.0, 0.3)];
    let targets = vec![
        posed(&tree, &a, &[0.3, -0.5], Vec3::new(0.0, 0.0, 2.0)),
        posed(&tree, &b, &[0.3, -0.5], Vec3::new(0.2, 0.0, 2.1)),
    ];
    let masks = vec![vec![true; 4]; 2];
    let config = FitConfig { lambda_smooth: 1e6, max_iterations_joint: 400, tolerance: 1e-14, ..FitConfig::default() };
    let fit = fit_sequence(&targets, &masks, &tree, &config).unwrap();
    for jn in 0..4 {
        assert!(rotation_angle(&fit.theta[0].0[jn], &fit.theta[1].0[jn]) < 1e-3);
    }
    let oracle = shared_pose_oracle(&tree, &targets, config.lambda_shape);
    for f in 0..2 {
        assert!((fit.residual_rms[f] - oracle[f]).abs() < 1e-4, "frame {f}: {} vs {}", fit.residual_rms[f], oracle[f]);
    }
    assert!(oracle.iter().any(|r| *r > 1e-3));
}

#[test]
fn rejects_too_few_joints_and_non_finite_targets() {
    let tree = KinematicTree::smpl_like();
    let targets = vec![posed(&tree, &[Vec3::zeros(); 24], &[0.0; 10], Vec3::zeros())];
    let mut mask = vec![false; 24];
    mask[..3].fill(true);
    let err = fit_sequence(&targets, &[mask], &tree, &FitConfig::default()).unwrap_err();
    assert!(matches!(err, Error::TooFewJoints { frame: 0, found: 3, required: 4 }));

    let mut bad = targets.clone();
    bad[0][5].x = f64::NAN;
    assert!(matches!(fit_sequence(&bad, &[vec![true; 24]], &tree, &FitConfig::default()), Err(Error::NonFinite(_))));
    let mut mask = vec![true; 24];
    mask[5] = false;
    assert!(fit_sequence(&bad, &[mask], &tree, &FitConfig::default()).is_ok());

    let config = FitConfig { lambda_smooth: -1.0, ..FitConfig::default() };
    assert!(fit_sequence(&targets, &[vec![true; 24]], &tree, &config).is_err());
}
