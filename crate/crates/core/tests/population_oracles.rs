use ncssl_core::data::{make_params, DataParams, FeatureBasis};
use ncssl_core::population::audit::{random_state, run_audit, AuditConfig};
use ncssl_core::population::{gaussian_noise_moments, opt_value, overlaps, pop_head_grad, PopulationSnapshot};
use ncssl_core::rng::seeded;
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

fn params(d: usize, p: usize, p0: usize, seed: u64) -> DataParams {
    make_params(d, p, p0, 6.0, 2.5, 1.0, FeatureBasis::Random, &mut seeded(seed)).unwrap()
}

/// Direct noise draw: Gaussian with the module's per-direction std, with the
/// feature plane removed.
fn noise(params: &DataParams, rng: &mut impl Rng) -> Array1<f64> {
    let s = params.noise_std();
    let mut g = Array1::from_shape_fn(params.d, |_| s * rng.sample::<f64, _>(StandardNormal));
    for v in [&params.v1, &params.v2] {
        let c = g.dot(v);
        g.scaled_add(-c, v);
    }
    g
}

#[test]
fn noise_moments_match_direct_sampling() {
    let p = params(16, 8, 2, 11);
    let mut rng = seeded(12);
    let state = random_state(16, &mut rng);
    let nm = gaussian_noise_moments(state.w.view(), state.e.view(), &p).unwrap();
    let (e12, e21) = (state.e[[0, 1]], state.e[[1, 0]]);
    let n = 1_000_000;
    // g1^6, g2^6, g1^3 g2^3, g1^5 g2, g1^4 g2^2, g1^2 g2^4.
    let mut sums = [[0.0f64; 2]; 6];
    for _ in 0..n {
        let xi = noise(&p, &mut rng);
        let g1 = state.w.row(0).dot(&xi);
        let g2 = state.w.row(1).dot(&xi);
        let vals = [
            g1.powi(6),
            g2.powi(6),
            g1.powi(3) * g2.powi(3),
            g1.powi(5) * g2,
            g1.powi(4) * g2 * g2,
            g1 * g1 * g2.powi(4),
        ];
        for (acc, v) in sums.iter_mut().zip(vals) {
            acc[0] += v;
            acc[1] += v * v;
        }
    }
    let nf = n as f64;
    let exact = [
        nm.ecal[0],
        nm.ecal[1],
        nm.cross33,
        nm.law.moment(5, 1),
        nm.law.moment(4, 2),
        nm.law.moment(2, 4),
    ];
    for (k, (acc, want)) in sums.iter().zip(exact).enumerate() {
        let mean = acc[0] / nf;
        let se = ((acc[1] / nf - mean * mean) / nf).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "moment {k}: mc {mean} +- {se}, exact {want}");
    }
    let mix0 = nm.ecal[0] + 2.0 * e12 * nm.cross33 + e12 * e12 * nm.ecal[1];
    let mix1 = nm.ecal[1] + 2.0 * e21 * nm.cross33 + e21 * e21 * nm.ecal[0];
    assert!((nm.ecal_mix[0] - mix0).abs() < 1e-12 * mix0.abs().max(1.0));
    assert!((nm.ecal_mix[1] - mix1).abs() < 1e-12 * mix1.abs().max(1.0));
}

#[test]
fn population_loss_never_beats_opt() {
    for (pp, p0) in [(8, 2), (16, 4)] {
        let p = params(16, pp, p0, 1);
        let opt = opt_value(pp, p0).unwrap();
        let mut rng = seeded(2);
        for _ in 0..10_000 {
            let mut state = random_state(16, &mut rng);
            // Mix in feature-heavy rows so near-optimal states are covered.
            let t: f64 = rng.random_range(0.0..4.0);
            for j in 0..2 {
                let v = if rng.random_bool(0.5) { &p.v1 } else { &p.v2 };
                state.w.row_mut(j).scaled_add(t, v);
            }
            let snap = PopulationSnapshot::compute(state.w.view(), state.e.view(), &p).unwrap();
            assert!(snap.loss >= opt - 1e-9, "{} < {opt}", snap.loss);
            let ov = snap.overlaps;
            assert!(ov.r12 * ov.r12 <= ov.r1 * ov.r2 * (1.0 + 1e-12));
            assert!(ov.r12_bar.abs() <= 1.0);
            assert!(snap.u.iter().chain(&snap.q).chain(&snap.phi).all(|&x| x > 0.0));
        }
    }
}

#[test]
fn relabeling_neurons_permutes_the_snapshot() {
    let p = params(16, 8, 2, 5);
    let mut rng = seeded(6);
    for _ in 0..50 {
        let st = random_state(16, &mut rng);
        let mut w = Array2::zeros((2, 16));
        w.slice_mut(s![0, ..]).assign(&st.w.row(1));
        w.slice_mut(s![1, ..]).assign(&st.w.row(0));
        let mut e = Array2::eye(2);
        e[[0, 1]] = st.e[[1, 0]];
        e[[1, 0]] = st.e[[0, 1]];
        let a = PopulationSnapshot::compute(st.w.view(), st.e.view(), &p).unwrap();
        let b = PopulationSnapshot::compute(w.view(), e.view(), &p).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1e-300);
        assert!(close(a.loss, b.loss));
        for j in 0..2 {
            assert!(close(a.u[j], b.u[1 - j]));
            assert!(close(a.q[j], b.q[1 - j]));
            for l in 0..2 {
                assert!(close(a.lambda[j][l], b.lambda[1 - j][l]));
                assert!(close(a.gamma[j][l], b.gamma[1 - j][l]));
                assert!(close(a.upsilon[j][l], b.upsilon[1 - j][l]));
                assert!(close(a.sigma[j][l], b.sigma[1 - j][l]));
            }
        }
        let ha = pop_head_grad(&a);
        let hb = pop_head_grad(&b);
        assert!(close(ha.grad[0], hb.grad[1]) && close(ha.grad[1], hb.grad[0]));
        let oa = overlaps(st.w.view(), &p).unwrap();
        let ob = overlaps(w.view(), &p).unwrap();
        assert!(close(oa.r1, ob.r2) && close(oa.r12, ob.r12));
    }
}

#[test]
fn head_gradient_decomposition_on_random_states() {
    let p = params(16, 8, 2, 8);
    let mut rng = seeded(9);
    for _ in 0..100 {
        let mut st = random_state(16, &mut rng);
        let t: f64 = rng.random_range(0.0..3.0);
        st.w.row_mut(0).scaled_add(t, &p.v1);
        st.w.row_mut(1).scaled_add(t * rng.random_range(0.0..1.0), &p.v2);
        let snap = PopulationSnapshot::compute(st.w.view(), st.e.view(), &p).unwrap();
        let hg = pop_head_grad(&snap);
        for j in 0..2 {
            let scale = hg.grad[j].abs().max(hg.xi[j] * st.e.iter().fold(0.0f64, |a, &b| a.max(b.abs()))).max(1e-300);
            assert!((hg.grad[j] - hg.grad_decomposed[j]).abs() <= 1e-10 * scale.max(1.0));
        }
    }
}

#[test]
fn small_monte_carlo_audit_agrees() {
    let cfg = AuditConfig {
        states: 3,
        samples: 200_000,
        grad_batches: 10,
        grad_batch_size: 4000,
        loss_rel_tol: 0.03,
        seed: 21,
        ..AuditConfig::default()
    };
    let rep = run_audit(&cfg, true).unwrap();
    for s in &rep.states {
        assert!(s.loss_rel_err < 0.03, "{s:?}");
        assert!(s.u_z.iter().chain(&s.q_inv_sq_z).all(|&z| z < 4.0), "{s:?}");
        assert!(s.grad_z.iter().all(|&z| z < 4.0), "{s:?}");
    }
}
