use ospatialnet::autodiff::gradcheck::{sample_tensor, weighted_sum, GradCheck};
use ospatialnet::autodiff::Graph;
use ospatialnet::blocks::retention::DEFAULT_GAMMAS;
use ospatialnet::blocks::*;
use ospatialnet::params::{Bound, Init, ParamStore};
use ospatialnet::tensor::{Float, Tensor};
use ospatialnet::Error;
use proptest::prelude::*;

fn rand_t<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    sample_tensor(shape, seed, -1.0, 1.0).cast()
}

// ---------------------------------------------------------------- MSA

#[test]
fn msa_first_frame_returns_value() {
    let mut st = MsaState::<f64>::new(250, 2, 4).unwrap();
    let (q, k, v) = ([0.3, -1.0, 2.0, 0.5], [1.0, 0.2, -0.7, 0.1], [1.5, -2.0, 0.25, 4.0]);
    let mut o = [0.0; 4];
    msa_step(&q, &k, &v, &mut st, &mut o).unwrap();
    assert_eq!(o, v);
    assert_eq!(st.len(), 1);
}

#[test]
fn msa_equal_keys_average_values() {
    let mut st = MsaState::<f64>::new(10, 1, 2).unwrap();
    let key = [0.4, -0.3];
    let mut o = [0.0; 2];
    let values = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [-2.0, 4.0]];
    for v in &values {
        msa_step(&key, &key, v, &mut st, &mut o).unwrap();
    }
    let mean = [(1.0 + 3.0 + 0.5 - 2.0) / 4.0, (2.0 - 1.0 + 0.5 + 4.0) / 4.0];
    assert!((o[0] - mean[0]).abs() < 1e-12 && (o[1] - mean[1]).abs() < 1e-12);
}

#[test]
fn msa_hand_softmax_example() {
    // l = 2, unit scaling (d = 1): keys [0, ln 3] buffered, current key 0
    let mut st = MsaState::<f64>::new(2, 1, 1).unwrap();
    let mut o = [0.0];
    msa_step(&[0.0], &[0.0], &[1.0], &mut st, &mut o).unwrap();
    msa_step(&[0.0], &[3f64.ln()], &[2.0], &mut st, &mut o).unwrap();
    msa_step(&[1.0], &[0.0], &[3.0], &mut st, &mut o).unwrap();
    assert!((o[0] - 2.0).abs() < 1e-12, "{}", o[0]);
}

#[test]
fn msa_buffer_is_capped_and_evicts_oldest() {
    let mut st = MsaState::<f32>::new(3, 1, 1).unwrap();
    let mut o = [0.0];
    for i in 0..10 {
        msa_step(&[0.0], &[0.0], &[i as f32], &mut st, &mut o).unwrap();
        assert!(st.len() <= 3);
    }
    let held: Vec<f32> = (0..3).map(|i| st.value(i)[0]).collect();
    assert_eq!(held, vec![7.0, 8.0, 9.0]);
    assert_eq!(st.capacity_scalars(), 2 * 3);
}

#[test]
fn msa_dim_mismatch_is_contract_error() {
    let mut st = MsaState::<f32>::new(4, 2, 4).unwrap();
    let mut o = [0.0; 4];
    let r = msa_step(&[0.0; 3], &[0.0; 4], &[0.0; 4], &mut st, &mut o);
    assert!(matches!(r, Err(Error::Contract(_))));
    assert!(MsaState::<f32>::new(4, 3, 4).is_err());
}

// ---------------------------------------------------------- Retention

#[test]
fn retention_first_step_is_qk_times_v() {
    let mut st = RetState::<f64>::new(3, &[0.9]).unwrap();
    let (q, k, v) = ([1.0, 2.0, -1.0], [0.5, 0.5, 2.0], [3.0, -1.0, 0.25]);
    let mut o = [0.0; 3];
    retention_step(&q, &k, &v, &mut st, &mut o).unwrap();
    let qk = 0.5 + 1.0 - 2.0;
    for j in 0..3 {
        assert!((o[j] - qk * v[j]).abs() < 1e-12);
    }
}

#[test]
fn retention_zero_decay_is_memoryless() {
    let mut st = RetState::<f64>::new(2, &[0.0]).unwrap();
    let mut o = [0.0; 2];
    for t in 0..5 {
        let x = t as f64;
        let (q, k, v) = ([x, 1.0], [1.0, -x], [2.0 * x, 0.5]);
        retention_step(&q, &k, &v, &mut st, &mut o).unwrap();
        let qk = q[0] * k[0] + q[1] * k[1];
        assert!((o[0] - qk * v[0]).abs() < 1e-12 && (o[1] - qk * v[1]).abs() < 1e-12);
    }
}

#[test]
fn retention_scalar_two_step_example() {
    // d = 1 per head, two heads with the same decay so q = k = [1, 1]
    let mut st = RetState::<f64>::new(1, &[0.5, 0.5]).unwrap();
    let mut o = [0.0; 2];
    retention_step(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &mut st, &mut o).unwrap();
    assert_eq!(st.head(0), &[1.0]);
    assert_eq!(o, [1.0, 1.0]);
    retention_step(&[1.0, 1.0], &[1.0, 1.0], &[2.0, 2.0], &mut st, &mut o).unwrap();
    assert_eq!(st.head(0), &[2.5]);
    assert_eq!(o, [2.5, 2.5]);
}

#[test]
fn retention_decay_outside_unit_interval_is_config_error() {
    assert!(matches!(RetState::<f32>::new(4, &[1.5]), Err(Error::Config(_))));
    assert!(matches!(RetState::<f32>::new(4, &[-0.1]), Err(Error::Config(_))));
    let q = Tensor::<f32>::zeros(vec![3, 2]);
    assert!(matches!(retention_parallel(&q, &q, &q, 1.01), Err(Error::Config(_))));
}

#[test]
fn retention_state_is_d_by_d_per_head() {
    let mut st = RetState::<f32>::new(24, &DEFAULT_GAMMAS).unwrap();
    assert_eq!(st.state_len(), 4 * 24 * 24);
    let x = vec![0.1f32; 96];
    let mut o = vec![0.0f32; 96];
    for _ in 0..300 {
        retention_step(&x, &x, &x, &mut st, &mut o).unwrap();
    }
    assert_eq!(st.state_len(), 4 * 24 * 24);
}

/// Brute-force double sum, independent of both library routes.
fn double_sum(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, gamma: f64) -> Vec<f64> {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let mut o = vec![0.0; t * d];
    for ti in 0..t {
        for s in 0..=ti {
            let qk: f64 = (0..d).map(|i| q.data()[ti * d + i] * k.data()[s * d + i]).sum();
            let w = gamma.powi((ti - s) as i32) * qk;
            for j in 0..d {
                o[ti * d + j] += w * v.data()[s * d + j];
            }
        }
    }
    o
}

fn rel_err<T: Float>(a: &[T], b: &[T]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.to_f64().unwrap().abs()).fold(0.0, f64::max);
    num / den.max(1e-30)
}

fn recurrent_single_head<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, gamma: f64) -> Vec<T> {
    let (t, d) = (q.shape()[0], q.shape()[1]);
    let mut st = RetState::<T>::new(d, &[gamma]).unwrap();
    let mut out = vec![T::zero(); t * d];
    for ti in 0..t {
        let r = ti * d..(ti + 1) * d;
        retention_step(
            &q.data()[r.clone()],
            &k.data()[r.clone()],
            &v.data()[r.clone()],
            &mut st,
            &mut out[r],
        )
        .unwrap();
    }
    out
}

#[test]
fn retention_parallel_matches_recurrence_in_f32() {
    for &gamma in &[0.0, 0.5, 1.0 - 1.0 / 16.0, 1.0] {
        for &t in &[1usize, 2, 17, 128, 512] {
            let (q, k, v) = (
                rand_t::<f32>(&[t, 8], 1),
                rand_t::<f32>(&[t, 8], 2),
                rand_t::<f32>(&[t, 8], 3),
            );
            let par = retention_parallel(&q, &k, &v, gamma).unwrap();
            let rec = recurrent_single_head(&q, &k, &v, gamma);
            let e = rel_err(par.data(), &rec);
            assert!(e <= 1e-5, "gamma {} T {} rel err {}", gamma, t, e);
        }
    }
}

#[test]
fn retention_unit_decay_matches_double_sum() {
    let (q, k, v) = (
        rand_t::<f64>(&[60, 5], 4),
        rand_t::<f64>(&[60, 5], 5),
        rand_t::<f64>(&[60, 5], 6),
    );
    let oracle = double_sum(&q, &k, &v, 1.0);
    let par = retention_parallel(&q, &k, &v, 1.0).unwrap();
    assert!(rel_err(par.data(), &oracle) <= 1e-12);
    let rec = recurrent_single_head(&q, &k, &v, 1.0);
    assert!(rel_err(&rec, &oracle) <= 1e-12);
}

#[test]
fn retention_single_frame_is_qk_v() {
    let (q, k, v) = (
        rand_t::<f64>(&[1, 4], 7),
        rand_t::<f64>(&[1, 4], 8),
        rand_t::<f64>(&[1, 4], 9),
    );
    let o = retention_parallel(&q, &k, &v, 0.7).unwrap();
    let qk: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum();
    for j in 0..4 {
        assert!((o.data()[j] - qk * v.data()[j]).abs() < 1e-14);
    }
}

#[test]
fn retention_multihead_routes_agree() {
    let g = Graph::<f64>::inference();
    let shape = [3, 40, 12];
    let (q, k, v) = (
        g.constant(rand_t(&shape, 10)),
        g.constant(rand_t(&shape, 11)),
        g.constant(rand_t(&shape, 12)),
    );
    let gammas = [0.0, 0.5, 0.9375];
    let a = retention_recurrent(&q, &k, &v, &gammas).unwrap();
    let b = retention_parallel_var(&q, &k, &v, &gammas).unwrap();
    assert!(rel_err(a.data(), b.data()) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn retention_state_norm_decays_geometrically(gi in 0usize..4, t0 in 1usize..20, extra in 1usize..40, seed in 0u64..500) {
        let gamma = [0.0, 0.5, 1.0 - 1.0 / 16.0, 1.0][gi];
        let d = 3;
        let mut st = RetState::<f64>::new(d, &[gamma]).unwrap();
        let x = rand_t::<f64>(&[t0, 3 * d], seed);
        let mut o = vec![0.0; d];
        for t in 0..t0 {
            let r = &x.data()[t * 3 * d..(t + 1) * 3 * d];
            retention_step(&r[..d], &r[d..2 * d], &r[2 * d..], &mut st, &mut o).unwrap();
        }
        let n0 = st.norm(0);
        let zero = vec![0.0; d];
        for dt in 1..=extra {
            retention_step(&zero, &zero, &zero, &mut st, &mut o).unwrap();
            let want = gamma.powi(dt as i32) * n0;
            prop_assert!((st.norm(0) - want).abs() <= 1e-12 * n0.max(1e-300), "dt {} got {} want {}", dt, st.norm(0), want);
        }
    }
}

// ---------------------------------------------------------------- SSM

#[test]
fn ssm_scalar_zoh_example() {
    let mut st = SsmState::<f64>::new(1, 1, 1);
    let (a, b, c) = ([-1.0], [1.0], [1.0]);
    let delta = [2f64.ln()];
    let mut y = [0.0];
    ssm_step(&[1.0], &delta, &a, &b, &c, &mut st, &mut y).unwrap();
    assert!((st.state()[0] - 0.5).abs() <= 1e-12 && (y[0] - 0.5).abs() <= 1e-12);
    ssm_step(&[0.0], &delta, &a, &b, &c, &mut st, &mut y).unwrap();
    assert!((st.state()[0] - 0.25).abs() <= 1e-12 && (y[0] - 0.25).abs() <= 1e-12);
}

#[test]
fn ssm_small_step_limit() {
    let (ab, bb) = zoh(1e-12f64, -3.0);
    assert!((ab - 1.0).abs() < 1e-10 && bb.abs() < 1e-10);
    let mut st = SsmState::<f64>::new(1, 1, 1);
    let mut y = [0.0];
    ssm_step(&[1.0], &[1e-12], &[-1.0], &[1.0], &[1.0], &mut st, &mut y).unwrap();
    assert!(y[0].abs() < 1e-10);
}

#[test]
fn ssm_zero_a_is_an_integrator() {
    let mut st = SsmState::<f64>::new(1, 1, 1);
    let mut y = [0.0];
    let (delta, b) = (0.3, 2.0);
    let xs = [1.0, -0.5, 2.0, 0.25];
    let mut s = 0.0;
    for &x in &xs {
        ssm_step(&[x], &[delta], &[0.0], &[b], &[1.0], &mut st, &mut y).unwrap();
        s += delta * b * x;
        assert!((y[0] - s).abs() < 1e-14);
    }
}

#[test]
fn ssm_rejects_non_positive_step() {
    let mut st = SsmState::<f64>::new(2, 1, 1);
    let mut y = [0.0; 2];
    for bad in [0.0, -0.1, f64::NAN] {
        let r = ssm_step(&[1.0, 1.0], &[0.1, bad], &[-1.0, -1.0], &[1.0], &[1.0], &mut st, &mut y);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}

#[test]
fn ssm_zoh_matches_matrix_exponential_form() {
    // oracle: Ā = e^{ΔA}, B̄ = (ΔA)⁻¹(e^{ΔA} - 1) ΔB evaluated literally
    for &(delta, a) in &[(0.1f64, -1.0f64), (2.0, -0.25), (0.01, -16.0), (1.0, -1e-6)] {
        let (ab, u) = zoh(delta, a);
        let z = delta * a;
        assert!((ab - z.exp()).abs() < 1e-14);
        assert!((u - (z.exp() - 1.0) / z * delta).abs() < 1e-9 * delta);
    }
}

// ------------------------------------------------------ fused gradients

fn check(report: ospatialnet::autodiff::gradcheck::GradReport) {
    assert!(report.max_rel_err <= 1e-4, "{:?}", report.worst);
}

#[test]
fn gradcheck_retention_routes() {
    let shape = [2, 9, 6];
    let ins = vec![rand_t(&shape, 20), rand_t(&shape, 21), rand_t(&shape, 22)];
    let gammas = [0.5, 0.9375];
    check(
        GradCheck::default()
            .run(&ins, |v| {
                weighted_sum(&retention_recurrent(&v[0], &v[1], &v[2], &gammas)?, 1)
            })
            .unwrap(),
    );
    check(
        GradCheck::default()
            .run(&ins, |v| {
                weighted_sum(&retention_parallel_var(&v[0], &v[1], &v[2], &gammas)?, 1)
            })
            .unwrap(),
    );
}

#[test]
fn gradcheck_msa_window() {
    let shape = [2, 9, 4];
    let ins = vec![rand_t(&shape, 23), rand_t(&shape, 24), rand_t(&shape, 25)];
    for window in [0, 3, 20] {
        check(
            GradCheck::default()
                .run(&ins, |v| weighted_sum(&msa_window(&v[0], &v[1], &v[2], 2, window)?, 2))
                .unwrap(),
        );
    }
}

#[test]
fn gradcheck_selective_scan() {
    let (s, t, e, n) = (2, 7, 3, 4);
    let x = rand_t(&[s, t, e], 26);
    let delta = sample_tensor(&[s, t, e], 27, 0.05, 1.5);
    let a = sample_tensor(&[e, n], 28, -3.0, -0.01);
    let b = rand_t(&[s, t, n], 29);
    let c = rand_t(&[s, t, n], 30);
    let report = GradCheck {
        max_probes: 100,
        ..Default::default()
    }
    .run(&[x, delta, a, b, c], |v| {
        weighted_sum(&selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4])?, 3)
    })
    .unwrap();
    check(report);
}

// ------------------------------------------------------------- blocks

enum Kind {
    Msa(usize),
    Ret,
    Ffn,
    Mamba,
}

struct Harness<T: Float> {
    store: ParamStore<T>,
    kind: Kind,
    attn: Option<AttentionBlock>,
    ffn: Option<TConvFfn>,
    mamba: Option<MambaBlock>,
    h: usize,
}

impl<T: Float> Harness<T> {
    fn new(kind: Kind, h: usize) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 99);
        let (mut attn, mut ffn, mut mamba) = (None, None, None);
        match kind {
            Kind::Msa(w) => {
                attn = Some(AttentionBlock::new(&mut init, "b", h, 2, SeqKernel::Msa { window: w }, false).unwrap())
            }
            Kind::Ret => {
                attn = Some(
                    AttentionBlock::new(
                        &mut init,
                        "b",
                        h,
                        2,
                        SeqKernel::Retention {
                            gammas: vec![0.9, 0.99],
                        },
                        true,
                    )
                    .unwrap(),
                )
            }
            Kind::Ffn => ffn = Some(TConvFfn::new(&mut init, "b", h, 3, 5).unwrap()),
            Kind::Mamba => mamba = Some(MambaBlock::new(&mut init, "b", h, 4, 4).unwrap()),
        }
        Harness {
            store,
            kind,
            attn,
            ffn,
            mamba,
            h,
        }
    }

    fn offline(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = Graph::<T>::inference();
        let p = self.store.bind(&g, false);
        let xv = g.constant(x.clone());
        let y = match self.kind {
            Kind::Msa(_) | Kind::Ret => self.attn.as_ref().unwrap().forward(&p, &xv),
            Kind::Ffn => self.ffn.as_ref().unwrap().forward(&p, &xv),
            Kind::Mamba => self.mamba.as_ref().unwrap().forward(&p, &xv),
        };
        y.unwrap().value().clone()
    }

    /// x: [rows, T, H]; steps all rows one frame at a time.
    fn streamed(&self, x: &Tensor<T>) -> Tensor<T> {
        let (rows, t, h) = (x.shape()[0], x.shape()[1], self.h);
        let mut out = vec![T::zero(); x.numel()];
        let mut attn_st: Vec<AttnState<T>> = Vec::new();
        let mut tails: Vec<ConvTail<T>> = Vec::new();
        let mut ssm: Vec<SsmState<T>> = Vec::new();
        for _ in 0..rows {
            match self.kind {
                Kind::Msa(_) | Kind::Ret => attn_st.push(self.attn.as_ref().unwrap().new_state().unwrap()),
                Kind::Ffn => tails.push(self.ffn.as_ref().unwrap().new_state()),
                Kind::Mamba => ssm.push(self.mamba.as_ref().unwrap().new_state()),
            }
        }
        for ti in 0..t {
            let mut frame: Vec<T> = (0..rows)
                .flat_map(|r| x.data()[(r * t + ti) * h..(r * t + ti + 1) * h].to_vec())
                .collect();
            match self.kind {
                Kind::Msa(_) | Kind::Ret => self
                    .attn
                    .as_ref()
                    .unwrap()
                    .step(&self.store, &mut frame, &mut attn_st)
                    .unwrap(),
                Kind::Ffn => self
                    .ffn
                    .as_ref()
                    .unwrap()
                    .step(&self.store, &mut frame, &mut tails)
                    .unwrap(),
                Kind::Mamba => self
                    .mamba
                    .as_ref()
                    .unwrap()
                    .step(&self.store, &mut frame, &mut ssm)
                    .unwrap(),
            }
            for r in 0..rows {
                out[(r * t + ti) * h..(r * t + ti + 1) * h].copy_from_slice(&frame[r * h..(r + 1) * h]);
            }
            if let Kind::Msa(w) = self.kind {
                for s in &attn_st {
                    if let AttnState::Msa(m) = s {
                        assert!(m.len() <= w);
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).unwrap()
    }
}

fn kinds() -> Vec<Kind> {
    vec![Kind::Msa(5), Kind::Ret, Kind::Ffn, Kind::Mamba]
}

#[test]
fn blocks_stream_equals_offline() {
    for t in [1usize, 7, 250, 1000] {
        for kind in kinds() {
            let hx = Harness::<f32>::new(kind, 8);
            let x = rand_t::<f32>(&[3, t, 8], t as u64);
            let d = hx.offline(&x).max_abs_diff(&hx.streamed(&x)).unwrap();
            assert!(d <= 1e-4, "f32 T {} diff {}", t, d);
        }
        for kind in [Kind::Msa(250), Kind::Ret, Kind::Ffn, Kind::Mamba] {
            let hx = Harness::<f64>::new(kind, 8);
            let x = rand_t::<f64>(&[2, t, 8], t as u64 + 1);
            let d = hx.offline(&x).max_abs_diff(&hx.streamed(&x)).unwrap();
            assert!(d <= 1e-9, "f64 T {} diff {}", t, d);
        }
    }
}

#[test]
fn blocks_are_causal_bitwise() {
    for kind in kinds() {
        let hx = Harness::<f32>::new(kind, 8);
        let x = rand_t::<f32>(&[2, 40, 8], 5);
        let base = hx.offline(&x);
        for t in [0usize, 17, 30] {
            let mut y = x.clone();
            for r in 0..2 {
                for ti in t + 1..40 {
                    for j in 0..8 {
                        y.data_mut()[(r * 40 + ti) * 8 + j] += 3.0;
                    }
                }
            }
            let out = hx.offline(&y);
            for r in 0..2 {
                let pre = (r * 40) * 8..(r * 40 + t + 1) * 8;
                assert_eq!(&base.data()[pre.clone()], &out.data()[pre]);
            }
        }
    }
}

fn zero_param(store: &mut ParamStore<f64>, name: &str) {
    let shape = store.by_name(name).unwrap().shape().to_vec();
    store.set(name, Tensor::zeros(shape)).unwrap();
}

#[test]
fn zeroed_final_projection_gives_identity() {
    for (kind, names) in [
        (Kind::Ret, vec!["b.o.w", "b.o.b"]),
        (Kind::Msa(4), vec!["b.o.w", "b.o.b"]),
        (Kind::Ffn, vec!["b.down.w", "b.down.b"]),
        (Kind::Mamba, vec!["b.out_proj.w"]),
    ] {
        let mut hx = Harness::<f64>::new(kind, 8);
        for n in names {
            zero_param(&mut hx.store, n);
        }
        let x = rand_t::<f64>(&[2, 11, 8], 6);
        assert_eq!(hx.offline(&x), x);
    }
}

#[test]
fn mamba_zero_input_with_zero_projections_is_zero() {
    let mut hx = Harness::<f64>::new(Kind::Mamba, 8);
    for n in ["b.in_proj.w", "b.x_proj.w", "b.conv.b"] {
        zero_param(&mut hx.store, n);
    }
    let x = Tensor::<f64>::zeros(vec![2, 9, 8]);
    assert!(hx.offline(&x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn ssm_state_size_is_constant() {
    let hx = Harness::<f32>::new(Kind::Mamba, 8);
    let m = hx.mamba.as_ref().unwrap();
    let mut st = vec![m.new_state::<f32>()];
    let before = st[0].state_len();
    assert_eq!(before, 16 * 4 + 3 * 16);
    let mut frame = vec![0.5f32; 8];
    for _ in 0..500 {
        m.step(&hx.store, &mut frame, &mut st).unwrap();
    }
    assert_eq!(st[0].state_len(), before);
}

#[test]
fn step_rejects_mismatched_rows() {
    let hx = Harness::<f32>::new(Kind::Ret, 8);
    let a = hx.attn.as_ref().unwrap();
    let mut st = vec![a.new_state::<f32>().unwrap(); 2];
    let mut frame = vec![0.0f32; 8];
    assert!(matches!(
        a.step(&hx.store, &mut frame, &mut st),
        Err(Error::Contract(_))
    ));
}

#[test]
fn gradcheck_blocks() {
    for kind in kinds() {
        let hx = Harness::<f64>::new(kind, 4);
        let mut inputs = vec![rand_t::<f64>(&[2, 6, 4], 40)];
        inputs.extend(hx.store.iter().map(|(_, t)| t.clone()));
        let report = GradCheck {
            max_probes: 24,
            ..Default::default()
        }
        .run(&inputs, |v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = match hx.kind {
                Kind::Msa(_) | Kind::Ret => hx.attn.as_ref().unwrap().forward(&p, &v[0]),
                Kind::Ffn => hx.ffn.as_ref().unwrap().forward(&p, &v[0]),
                Kind::Mamba => hx.mamba.as_ref().unwrap().forward(&p, &v[0]),
            }?;
            weighted_sum(&y, 4)
        })
        .unwrap();
        check(report);
    }
}
