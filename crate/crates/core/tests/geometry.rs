use std::collections::BTreeMap;

use geo_repnet_core::dgpg::{
    self, decay_factor, depth_distance_matrix, generate_priors, geometry_mask, positional_encoding, positional_priors, DecayMask, DgpgConfig,
    DgpgParams, Distances, Formulation,
};
use geo_repnet_core::gema::{self, cross_gsa, ema_attention, gema_forward, rotary_transform, EmaParams, GemaConfig, GemaParams, GsaParams, MaskVars, PriorVars};
use geo_repnet_core::gradcheck::{check_gradients, GradCheckConfig};
use geo_repnet_core::{DType, Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t64(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn cfg(heads: usize, lambda0: f64, gamma: f64) -> DgpgConfig {
    DgpgConfig {
        num_heads: heads,
        lambda0,
        gamma,
        ..DgpgConfig::default()
    }
}

fn full(d: Distances) -> Tensor {
    match d {
        Distances::Full(t) => t,
        Distances::Axial { .. } => panic!("expected full distances"),
    }
}

// ---- decay and positional bases ----

#[test]
fn decay_factor_examples() {
    let c = cfg(8, 5.0, 3.0);
    assert!((decay_factor(0, &c).unwrap() - (-0.0317486)).abs() < 1e-7);
    assert_eq!(decay_factor(0, &c).unwrap(), (1.0 - 2f64.powi(-5)).ln());
    // exponent 8 at the last head: γ·7/8 = 3
    let c8 = cfg(8, 5.0, 3.0 * 8.0 / 7.0);
    assert!((decay_factor(7, &c8).unwrap() - (-0.0039139)).abs() < 1e-7);
    assert!(matches!(decay_factor(8, &c), Err(Error::Config(_))));
    let flat = cfg(6, 2.0, 0.0);
    let v0 = decay_factor(0, &flat).unwrap();
    for h in 1..6 {
        assert_eq!(decay_factor(h, &flat).unwrap(), v0);
    }
    assert!(matches!(decay_factor(0, &cfg(2, 0.0, 1.0)), Err(Error::Config(_))));
    assert!(matches!(decay_factor(0, &cfg(2, 1.0, -1.0)), Err(Error::Config(_))));
}

#[test]
fn positional_encoding_examples() {
    let (s, c) = positional_encoding(5, 3).unwrap();
    assert_eq!(s.shape(), &[5, 3]);
    for k in 0..3 {
        assert_eq!(s.get(&[0, k]), 0.0);
        assert_eq!(c.get(&[0, k]), 1.0);
    }
    assert!((s.get(&[1, 0]) - 0.841471).abs() < 1e-6);
    assert!((c.get(&[1, 0]) - 0.540302).abs() < 1e-6);
    for (a, b) in s.data().iter().zip(c.data()) {
        assert!((a * a + b * b - 1.0).abs() < 1e-12);
    }
    let omega = dgpg::frequencies(4);
    for (k, w) in omega.iter().enumerate() {
        assert!((w - 10000f64.powf(-(2.0 * k as f64) / 8.0)).abs() < 1e-15);
    }
}

// ---- distances and masks ----

#[test]
fn depth_distance_examples() {
    let constant = Tensor::full(&[3, 4], 0.6, DType::F64);
    assert_eq!(full(depth_distance_matrix(&constant, Formulation::Full2d).unwrap()).max_abs(), 0.0);
    let pair = t64(&[1, 2], vec![0.2, 0.5]);
    let d = full(depth_distance_matrix(&pair, Formulation::Full2d).unwrap());
    assert!((d.get(&[0, 1]) - 0.3).abs() < 1e-15 && d.get(&[1, 0]) == d.get(&[0, 1]));
    assert_eq!(d.get(&[0, 0]), 0.0);
    let bad = t64(&[1, 2], vec![0.2, 0.0]);
    assert!(matches!(depth_distance_matrix(&bad, Formulation::Full2d), Err(Error::Data(_))));
    let grid = t64(&[2, 2], vec![0.2, 0.4, 0.6, 1.0]);
    match depth_distance_matrix(&grid, Formulation::Axial1d).unwrap() {
        Distances::Axial { height, width } => {
            assert!((height.get(&[0, 1]) - 0.5).abs() < 1e-12);
            assert!((width.get(&[0, 1]) - 0.3).abs() < 1e-12);
        }
        Distances::Full(_) => panic!("axial requested"),
    }
}

#[test]
fn geometry_mask_examples() {
    let pos = full(dgpg::position_distance_matrix(2, 3, Formulation::Full2d).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let depth = random(&[2, 3], 0.1, 1.0, &mut rng);
    let dd = full(depth_distance_matrix(&depth, Formulation::Full2d).unwrap());
    let mut c = cfg(3, 2.0, 1.5);
    c.w2_raw = -800.0;
    let m = geometry_mask(&pos, &dd, &c).unwrap();
    let pos_only = geometry_mask(&pos, &Tensor::zeros(pos.shape(), DType::F64), &c).unwrap();
    assert_eq!(m, pos_only);
    for h in 0..3 {
        let decay = decay_factor(h, &c).unwrap();
        for i in 0..36 {
            assert_eq!(m.data()[h * 36 + i], c.w1() * decay * pos.data()[i]);
        }
    }
    let zero = Tensor::zeros(&[6, 6], DType::F64);
    assert_eq!(geometry_mask(&zero, &zero, &cfg(2, 5.0, 3.0)).unwrap().max_abs(), 0.0);
    assert!(matches!(geometry_mask(&pos, &Tensor::zeros(&[5, 5], DType::F64), &c), Err(Error::Dimension { .. })));

    // sweeping the depth gap of two pixels makes their entry strictly more negative
    let c = cfg(2, 3.0, 1.0);
    let pos = full(dgpg::position_distance_matrix(1, 2, Formulation::Full2d).unwrap());
    let mut last = 0.0;
    for step in 1..20 {
        let d = t64(&[1, 2], vec![0.05, 0.05 + step as f64 * 0.05]);
        let dd = full(depth_distance_matrix(&d, Formulation::Full2d).unwrap());
        let m = geometry_mask(&pos, &dd, &c).unwrap();
        let v = m.get(&[1, 0, 1]);
        assert!(v < last);
        last = v;
    }
}

#[test]
fn generate_priors_examples() {
    let c = cfg(4, 5.0, 3.0);
    let constant = Tensor::full(&[8, 8], 0.7, DType::F64);
    let p = generate_priors(&constant, 4, 4, &c).unwrap();
    assert_eq!(p, positional_priors(4, 4, &c).unwrap());
    assert_eq!(p.height_sin.shape(), &[4, 4]);
    assert_eq!(p.width_cos.shape(), &[4, 4]);
    match &p.decay_mask {
        DecayMask::Full(m) => assert_eq!(m.shape(), &[4, 16, 16]),
        DecayMask::Axial { .. } => panic!("full-2d requested"),
    }
    let p = generate_priors(&constant, 2, 4, &DgpgConfig { formulation: Formulation::Axial1d, ..c.clone() }).unwrap();
    match &p.decay_mask {
        DecayMask::Axial { height, width } => {
            assert_eq!(height.shape(), &[4, 2, 2]);
            assert_eq!(width.shape(), &[4, 4, 4]);
        }
        DecayMask::Full(_) => panic!("axial requested"),
    }

    // doubling w2 doubles the depth component
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let depth = random(&[6, 6], 0.1, 1.0, &mut rng);
    let mask = |c: &DgpgConfig| match generate_priors(&depth, 3, 3, c).unwrap().decay_mask {
        DecayMask::Full(m) => m,
        DecayMask::Axial { .. } => unreachable!(),
    };
    let base = c.clone();
    let doubled = DgpgConfig { w2_raw: softplus_inv(2.0 * base.w2()), ..base.clone() };
    let pos_part = match positional_priors(3, 3, &base).unwrap().decay_mask {
        DecayMask::Full(m) => m,
        DecayMask::Axial { .. } => unreachable!(),
    };
    let (m1, m2) = (mask(&base), mask(&doubled));
    for i in 0..m1.numel() {
        let d1 = m1.data()[i] - pos_part.data()[i];
        let d2 = m2.data()[i] - pos_part.data()[i];
        assert!((d2 - 2.0 * d1).abs() <= 1e-12 * (1.0 + d1.abs()), "{d1} {d2}");
    }
}

fn prior_strategy() -> impl Strategy<Value = (DgpgConfig, usize, usize, u64)> {
    (1usize..6, 0.05f64..8.0, 0.0f64..6.0, -4.0f64..4.0, -4.0f64..4.0, 1usize..5, any::<bool>(), 1usize..6, 1usize..6, any::<u64>()).prop_map(
        |(heads, lambda0, gamma, w1_raw, w2_raw, freq, axial, h1, w1, seed)| {
            let c = DgpgConfig {
                num_heads: heads,
                lambda0,
                gamma,
                w1_raw,
                w2_raw,
                freq_count: freq,
                formulation: if axial { Formulation::Axial1d } else { Formulation::Full2d },
            };
            (c, h1, w1, seed)
        },
    )
}

fn check_mask(m: &Tensor) -> std::result::Result<(), TestCaseError> {
    let (heads, n) = (m.shape()[0], m.shape()[1]);
    for h in 0..heads {
        for i in 0..n {
            prop_assert_eq!(m.get(&[h, i, i]), 0.0);
            for j in 0..n {
                prop_assert!(m.get(&[h, i, j]) <= 0.0);
                prop_assert_eq!(m.get(&[h, i, j]), m.get(&[h, j, i]));
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decay_is_negative_and_monotone(heads in 1usize..16, lambda0 in 1e-3f64..30.0, gamma in 0.0f64..20.0) {
        let c = cfg(heads, lambda0, gamma);
        let values: Vec<f64> = (0..heads).map(|h| decay_factor(h, &c).unwrap()).collect();
        for w in values.windows(2) {
            prop_assert!(w[0] <= w[1]);
            if gamma > 0.0 && w[0] < -1e-300 {
                prop_assert!(w[0] < w[1] || (w[1] - w[0]).abs() < 1e-300);
            }
        }
        prop_assert!(values.iter().all(|&v| v < 0.0));
        let flat = cfg(heads, lambda0, 0.0);
        let v0 = decay_factor(0, &flat).unwrap();
        prop_assert!((0..heads).all(|h| decay_factor(h, &flat).unwrap() == v0));
    }

    #[test]
    fn prior_invariants_hold((c, h1, w1, seed) in prior_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let depth = random(&[h, w], 0.01, 1.0, &mut rng);
        let p = generate_priors(&depth, h1, w1, &c).unwrap();
        for (s, co) in [(&p.height_sin, &p.height_cos), (&p.width_sin, &p.width_cos)] {
            for (a, b) in s.data().iter().zip(co.data()) {
                prop_assert!((a * a + b * b - 1.0).abs() <= 1e-6);
            }
        }
        match &p.decay_mask {
            DecayMask::Full(m) => check_mask(m)?,
            DecayMask::Axial { height, width } => {
                check_mask(height)?;
                check_mask(width)?;
            }
        }
    }

    #[test]
    fn swapping_pixels_permutes_depth_component(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        prop_assume!(n >= 2);
        let depth = random(&[h, w], 0.05, 1.0, &mut rng);
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let mut swapped = depth.clone();
        swapped.set(a, depth.data()[b]);
        swapped.set(b, depth.data()[a]);
        let c = cfg(3, 2.0, 1.0);
        let depth_part = |d: &Tensor| {
            let m = match generate_priors(d, h, w, &c).unwrap().decay_mask { DecayMask::Full(m) => m, DecayMask::Axial { .. } => unreachable!() };
            let p = match positional_priors(h, w, &c).unwrap().decay_mask { DecayMask::Full(m) => m, DecayMask::Axial { .. } => unreachable!() };
            m.data().iter().zip(p.data()).map(|(x, y)| x - y).collect::<Vec<f64>>()
        };
        let (orig, perm) = (depth_part(&depth), depth_part(&swapped));
        let swap = |i: usize| if i == a { b } else if i == b { a } else { i };
        for head in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    let x = perm[(head * n + i) * n + j];
                    let y = orig[(head * n + swap(i)) * n + swap(j)];
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn prior_parameters_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for formulation in [Formulation::Full2d, Formulation::Axial1d] {
        let c = DgpgConfig { num_heads: 3, formulation, ..DgpgConfig::default() };
        let params = DgpgParams::from_config(&c, DType::F64);
        let mut state = BTreeMap::new();
        state.insert("dgpg.lambda0".to_string(), t64(&[1], vec![1.3]));
        state.insert("dgpg.gamma".to_string(), params.gamma.clone());
        state.insert("dgpg.w1_raw".to_string(), params.w1_raw.clone());
        state.insert("dgpg.w2_raw".to_string(), t64(&[1], vec![-0.4]));
        let pos = full(dgpg::position_distance_matrix(3, 3, Formulation::Full2d).unwrap());
        let depth = random(&[3, 3], 0.1, 1.0, &mut rng);
        let dd = full(depth_distance_matrix(&depth, Formulation::Full2d).unwrap()).reshape(&[1, 9, 9]).unwrap();
        let weights = random(&[1, 3, 9, 9], -1.0, 1.0, &mut rng);
        let report = check_gradients(
            &state,
            |s| {
                let mut tape = Tape::new();
                let p = DgpgParams {
                    lambda0: s["dgpg.lambda0"].clone(),
                    gamma: s["dgpg.gamma"].clone(),
                    w1_raw: s["dgpg.w1_raw"].clone(),
                    w2_raw: s["dgpg.w2_raw"].clone(),
                };
                let vars = p.register(&mut tape, "dgpg")?;
                let m = vars.mask(&mut tape, 3, &pos, Some(&dd))?;
                let r = tape.constant(weights.clone());
                let prod = tape.mul(m, r)?;
                let loss = tape.sum(prod)?;
                Ok((tape, loss))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.entries.len(), 4);
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }
}

#[test]
fn tape_mask_matches_plain_mask() {
    let c = cfg(4, 2.5, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let depth = random(&[4, 4], 0.1, 1.0, &mut rng);
    let plain = match generate_priors(&depth, 4, 4, &c).unwrap().decay_mask {
        DecayMask::Full(m) => m,
        DecayMask::Axial { .. } => unreachable!(),
    };
    let pos = full(dgpg::position_distance_matrix(4, 4, Formulation::Full2d).unwrap());
    let dd = full(depth_distance_matrix(&depth, Formulation::Full2d).unwrap()).reshape(&[1, 16, 16]).unwrap();
    let mut tape = Tape::new();
    let vars = DgpgParams::from_config(&c, DType::F64).register(&mut tape, "dgpg").unwrap();
    let m = vars.mask(&mut tape, 4, &pos, Some(&dd)).unwrap();
    let taped = tape.value(m).reshape(&[4, 16, 16]).unwrap();
    assert!(taped.max_abs_diff(&plain) < 1e-14);
}

// ---- rotary ----

fn rotate_at(x: &[f64], pos: usize, table_len: usize) -> Vec<f64> {
    let d = x.len();
    let (s, c) = positional_encoding(table_len, d / 2).unwrap();
    let row = |t: &Tensor| t64(&[1, d / 2], t.data()[pos * d / 2..(pos + 1) * d / 2].to_vec());
    rotary_transform(&t64(&[1, d], x.to_vec()), &row(&s), &row(&c)).unwrap().into_data()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn rotary_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert_eq!(rotate_at(&x, 0, 4), x);
    let odd = t64(&[2, 3], vec![0.0; 6]);
    let tab = t64(&[2, 1], vec![0.0; 2]);
    assert!(matches!(rotary_transform(&odd, &tab, &tab), Err(Error::Config(_))));
    // pair (x0, x1) at angle θ = 1
    let (s, c) = positional_encoding(2, 1).unwrap();
    let r = rotary_transform(&t64(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]), &s, &c).unwrap();
    assert_eq!(&r.data()[..2], &[1.0, 0.0]);
    assert!((r.data()[2] - 1f64.cos()).abs() < 1e-15 && (r.data()[3] - 1f64.sin()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rotary_preserves_norm_and_relative_position(half in 1usize..5, i in 0usize..12, j in 0usize..12, seed in any::<u64>()) {
        prop_assume!(j >= i);
        let d = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let qi = rotate_at(&q, i, 12);
        prop_assert!((dot(&qi, &qi) - dot(&q, &q)).abs() <= 1e-9);
        let lhs = dot(&qi, &rotate_at(&k, j, 12));
        let rhs = dot(&q, &rotate_at(&k, j - i, 12));
        prop_assert!((lhs - rhs).abs() <= 1e-6);
    }
}

// ---- attention ----

struct AttnSetup {
    cfg: GemaConfig,
    gsa: GsaParams,
    dgpg: DgpgConfig,
}

fn setup(heads: usize, head_dim: usize, seed: u64) -> AttnSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = heads * head_dim;
    AttnSetup {
        cfg: GemaConfig { num_heads: heads, head_dim, ema_factor: 4, enable_gsa: true, enable_ema: false },
        gsa: GsaParams::init(c, &mut rng, DType::F64),
        dgpg: DgpgConfig { num_heads: heads, freq_count: head_dim / 2, ..DgpgConfig::default() },
    }
}

/// Runs attention with a precomputed prior; returns (output, logits, attention).
fn run_gsa(s: &AttnSetup, x: &Tensor, depth: &Tensor) -> (Tensor, Vec<Tensor>, Vec<Tensor>) {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let prior = generate_priors(depth, h, w, &s.dgpg).unwrap();
    let mut tape = Tape::new();
    let pv = PriorVars::from_prior(&mut tape, &prior).unwrap();
    let vars = s.gsa.register(&mut tape, "gsa").unwrap();
    let xv = tape.constant(x.clone());
    let trace = cross_gsa(&mut tape, xv, &pv, &vars, &s.cfg).unwrap();
    let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
    (tape.value(trace.output).clone(), grab(&trace.logits), grab(&trace.attention))
}

#[test]
fn zero_output_projection_is_pure_residual() {
    let mut s = setup(2, 4, 6);
    s.gsa.wo = Tensor::zeros(s.gsa.wo.shape(), DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 8, 3, 4], -1.0, 1.0, &mut rng);
    let depth = random(&[6, 8], 0.1, 1.0, &mut rng);
    for formulation in [Formulation::Full2d, Formulation::Axial1d] {
        s.dgpg.formulation = formulation;
        let (out, _, _) = run_gsa(&s, &x, &depth);
        assert_eq!(out, x);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut s = setup(2, 4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 8, 4, 3], -2.0, 2.0, &mut rng);
    let depth = random(&[8, 6], 0.1, 1.0, &mut rng);
    for formulation in [Formulation::Full2d, Formulation::Axial1d] {
        s.dgpg.formulation = formulation;
        let (_, _, attn) = run_gsa(&s, &x, &depth);
        for a in attn {
            let n = *a.shape().last().unwrap();
            for row in a.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

/// Direct evaluation of the attention logits for one sample on a 1×W grid.
fn brute_force_logits(s: &AttnSetup, x: &Tensor, mask: &Tensor) -> Vec<f64> {
    let (c, w) = (x.shape()[1], x.shape()[3]);
    let (heads, dk) = (s.cfg.num_heads, s.cfg.head_dim);
    let tokens: Vec<Vec<f64>> = (0..w).map(|t| (0..c).map(|ch| x.get(&[0, ch, 0, t])).collect()).collect();
    let layer_norm = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, a)| s.gsa.norm_scale.data()[i] * (a - m) / (var + 1e-5).sqrt() + s.gsa.norm_shift.data()[i])
            .collect::<Vec<f64>>()
    };
    let project = |wt: &Tensor, b: &Tensor, v: &[f64]| (0..c).map(|o| b.data()[o] + (0..c).map(|i| wt.get(&[o, i]) * v[i]).sum::<f64>()).collect::<Vec<f64>>();
    let omega = dgpg::frequencies(dk / 2);
    let rotate = |v: &[f64], pos: usize| {
        let mut out = v.to_vec();
        for k in 0..dk / 2 {
            let th = pos as f64 * omega[k];
            out[2 * k] = v[2 * k] * th.cos() - v[2 * k + 1] * th.sin();
            out[2 * k + 1] = v[2 * k] * th.sin() + v[2 * k + 1] * th.cos();
        }
        out
    };
    let normed: Vec<Vec<f64>> = tokens.iter().map(|t| layer_norm(t)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|n| project(&s.gsa.wq, &s.gsa.bq, n)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|n| project(&s.gsa.wk, &s.gsa.bk, n)).collect();
    let mut out = Vec::new();
    for h in 0..heads {
        for i in 0..w {
            for j in 0..w {
                let qh = &q[i][h * dk..(h + 1) * dk];
                let kh = &k[j][h * dk..(h + 1) * dk];
                // width angles follow the column, height angles are all zero on a single row
                let sx = dot(&rotate(qh, i), &rotate(kh, j));
                let sy = dot(qh, kh);
                out.push((sx + sy) / (dk as f64).sqrt() + mask.get(&[h, i, j]));
            }
        }
    }
    out
}

#[test]
fn logits_match_direct_evaluation_and_favour_near_tokens() {
    let mut s = setup(2, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    s.gsa.bq = random(&[8], -0.5, 0.5, &mut rng);
    s.gsa.norm_scale = random(&[8], 0.5, 1.5, &mut rng);
    let x = random(&[1, 8, 1, 4], -1.0, 1.0, &mut rng);
    let depth = random(&[1, 4], 0.1, 1.0, &mut rng);
    let mask = match generate_priors(&depth, 1, 4, &s.dgpg).unwrap().decay_mask {
        DecayMask::Full(m) => m,
        DecayMask::Axial { .. } => unreachable!(),
    };
    let (_, logits, _) = run_gsa(&s, &x, &depth);
    let reference = brute_force_logits(&s, &x, &mask);
    for (a, b) in logits[0].data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // with content-free queries and keys only the mask speaks
    s.gsa.wq = Tensor::zeros(&[8, 8], DType::F64);
    s.gsa.wk = Tensor::zeros(&[8, 8], DType::F64);
    s.gsa.bq = Tensor::zeros(&[8], DType::F64);
    let flat = Tensor::full(&[1, 4], 0.5, DType::F64);
    let (_, _, attn) = run_gsa(&s, &x, &flat);
    let a = &attn[0];
    for h in 0..2 {
        for i in 0..4usize {
            for j in 0..4usize {
                for k in 0..4usize {
                    if i.abs_diff(j) < i.abs_diff(k) {
                        assert!(a.get(&[0, h, i, j]) >= a.get(&[0, h, i, k]));
                    }
                }
            }
        }
    }
}

#[test]
fn logits_depend_only_on_offsets_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for formulation in [Formulation::Full2d, Formulation::Axial1d] {
        let mut s = setup(2, 4, 9);
        s.dgpg.formulation = formulation;
        s.dgpg.w1_raw = -800.0;
        s.dgpg.w2_raw = -800.0;
        s.gsa.bq = random(&[8], -0.5, 0.5, &mut rng);
        let channel: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (h, w) = (if formulation == Formulation::Full2d { 1 } else { 3 }, 6);
        let x = t64(&[1, 8, h, w], channel.iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect());
        let depth = Tensor::full(&[h, w], 0.4, DType::F64);
        let (_, logits, _) = run_gsa(&s, &x, &depth);
        let rows = &logits[0];
        let n = *rows.shape().last().unwrap();
        let planes = rows.numel() / (n * n);
        for p in 0..planes {
            let at = |i: usize, j: usize| rows.data()[(p * n + i) * n + j];
            for i in 0..n {
                for j in 0..n {
                    for shift in 1..n {
                        if i + shift < n && j + shift < n {
                            assert!((at(i, j) - at(i + shift, j + shift)).abs() <= 1e-6);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn larger_depth_gap_lowers_logit() {
    let s = setup(2, 4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[1, 8, 2, 3], -1.0, 1.0, &mut rng);
    let mut depth = random(&[2, 3], 0.3, 0.5, &mut rng);
    let (a, b) = (1usize, 4usize);
    let mut last: Option<Vec<f64>> = None;
    for step in 0..8 {
        depth.set(b, depth.data()[a] + 0.05 * step as f64);
        let (_, logits, _) = run_gsa(&s, &x, &depth);
        let l = &logits[0];
        let current: Vec<f64> = (0..2).map(|h| l.get(&[0, h, a, b])).collect();
        if let Some(prev) = &last {
            for h in 0..2 {
                assert!(current[h] < prev[h]);
            }
        }
        last = Some(current);
    }
}

// ---- gating ----

fn run_ema(p: &EmaParams, x: &Tensor, factor: usize) -> Tensor {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, "ema").unwrap();
    let xv = tape.constant(x.clone());
    let y = ema_attention(&mut tape, xv, &vars, factor).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_convolutions_halve_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = EmaParams::init(2, &mut rng, DType::F64);
    p.conv1_weight = Tensor::zeros(p.conv1_weight.shape(), DType::F64);
    p.conv3_weight = Tensor::zeros(p.conv3_weight.shape(), DType::F64);
    let x = random(&[2, 8, 3, 5], -3.0, 3.0, &mut rng);
    let y = run_ema(&p, &x, 4);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn constant_input_gives_spatially_constant_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = EmaParams::init(4, &mut rng, DType::F64);
    p.norm_shift = random(&[4], -1.0, 1.0, &mut rng);
    let per_channel: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = t64(&[1, 16, 4, 5], per_channel.iter().flat_map(|&v| std::iter::repeat_n(v, 20)).collect());
    let y = run_ema(&p, &x, 4);
    for plane in y.data().chunks(20) {
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
    }
    let err = {
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, "ema").unwrap();
        let xv = tape.constant(x.clone());
        ema_attention(&mut tape, xv, &vars, 5).unwrap_err()
    };
    assert!(matches!(err, Error::Config(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gating_never_grows_magnitudes(factor in prop::sample::select(vec![1usize, 2, 4]), gc in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EmaParams::init(gc, &mut rng, DType::F64);
        p.norm_scale = random(&[gc], -3.0, 3.0, &mut rng);
        p.norm_shift = random(&[gc], -3.0, 3.0, &mut rng);
        let x = random(&[2, gc * factor, h, w], -50.0, 50.0, &mut rng);
        let y = run_ema(&p, &x, factor);
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}

// ---- the composed block ----

fn prior_vars(tape: &mut Tape, c: &DgpgConfig, h: usize, w: usize) -> PriorVars {
    let prior = positional_priors(h, w, c).unwrap();
    PriorVars::from_prior(tape, &prior).unwrap()
}

#[test]
fn disabled_components_are_identity_and_factors_keep_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[2, 32, 3, 3], -1.0, 1.0, &mut rng);
    let off = GemaConfig { num_heads: 4, head_dim: 8, ema_factor: 4, enable_gsa: false, enable_ema: false };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = GemaParams { gsa: None, ema: None }.register(&mut tape, "gema").unwrap();
    let y = gema_forward(&mut tape, xv, None, &vars, &off).unwrap();
    assert_eq!(tape.value(y), &x);

    let dg = DgpgConfig { num_heads: 4, freq_count: 4, ..DgpgConfig::default() };
    for factor in gema::EMA_FACTORS {
        let cfg = GemaConfig { ema_factor: factor, enable_gsa: true, enable_ema: true, ..off.clone() };
        cfg.validate(32).unwrap();
        let params = GemaParams {
            gsa: Some(GsaParams::init(32, &mut rng, DType::F64)),
            ema: Some(EmaParams::init(32 / factor, &mut rng, DType::F64)),
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = params.register(&mut tape, "gema").unwrap();
        let pv = prior_vars(&mut tape, &dg, 3, 3);
        let y = gema_forward(&mut tape, xv, Some(&pv), &vars, &cfg).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());
    }
    let bad = GemaConfig { ema_factor: 6, ..off };
    assert!(matches!(bad.validate(32), Err(Error::Config(_))));
}

#[test]
fn attention_block_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for formulation in [Formulation::Full2d, Formulation::Axial1d] {
        let cfg = GemaConfig { num_heads: 2, head_dim: 4, ema_factor: 4, enable_gsa: true, enable_ema: true };
        let dg = DgpgConfig { num_heads: 2, freq_count: 2, lambda0: 1.0, formulation, ..DgpgConfig::default() };
        let mut gsa = GsaParams::init(8, &mut rng, DType::F64);
        gsa.bq = random(&[8], -0.3, 0.3, &mut rng);
        gsa.norm_shift = random(&[8], -0.3, 0.3, &mut rng);
        let mut ema = EmaParams::init(2, &mut rng, DType::F64);
        ema.norm_shift = random(&[2], -0.3, 0.3, &mut rng);
        let dp = DgpgParams::from_config(&dg, DType::F64);
        let x = random(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);
        let depth = random(&[4, 4], 0.1, 1.0, &mut rng);
        let weights = random(&[2, 8, 4, 4], -1.0, 1.0, &mut rng);

        let mut state: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, t) in gsa.tensors() {
            state.insert(format!("gema.gsa.{n}"), t.clone());
        }
        for (n, t) in ema.tensors() {
            state.insert(format!("gema.ema.{n}"), t.clone());
        }
        for (n, t) in [("lambda0", &dp.lambda0), ("gamma", &dp.gamma), ("w1_raw", &dp.w1_raw), ("w2_raw", &dp.w2_raw)] {
            state.insert(format!("dgpg.{n}"), t.clone());
        }
        state.insert("input".into(), x.clone());
        let depth_dist = depth_distance_matrix(&depth, formulation).unwrap();
        let pos = dgpg::position_distance_matrix(4, 4, formulation).unwrap();

        let report = check_gradients(
            &state,
            |s| {
                let mut tape = Tape::new();
                let mut g = gsa.clone();
                for (n, t) in g.tensors_mut() {
                    *t = s[&format!("gema.gsa.{n}")].clone();
                }
                let mut e = ema.clone();
                for (n, t) in e.tensors_mut() {
                    *t = s[&format!("gema.ema.{n}")].clone();
                }
                let d = DgpgParams {
                    lambda0: s["dgpg.lambda0"].clone(),
                    gamma: s["dgpg.gamma"].clone(),
                    w1_raw: s["dgpg.w1_raw"].clone(),
                    w2_raw: s["dgpg.w2_raw"].clone(),
                };
                let xv = tape.param("input", s["input"].clone())?;
                let vars = GemaParams { gsa: Some(g), ema: Some(e) }.register(&mut tape, "gema")?;
                let dv = d.register(&mut tape, "dgpg")?;
                let (hs, hc) = positional_encoding(4, 2)?;
                let mask = match (&pos, &depth_dist) {
                    (Distances::Full(p), Distances::Full(dd)) => MaskVars::Full(dv.mask(&mut tape, 2, p, Some(&dd.reshape(&[1, 16, 16])?))?),
                    (Distances::Axial { height: ph, width: pw }, Distances::Axial { height: dh, width: dw }) => {
                        let rows = dv.mask(&mut tape, 2, pw, Some(&dw.reshape(&[1, 4, 4])?))?;
                        let cols = dv.mask(&mut tape, 2, ph, Some(&dh.reshape(&[1, 4, 4])?))?;
                        MaskVars::Axial { rows: tape.reshape(rows, &[1, 2, 1, 4, 4])?, cols: tape.reshape(cols, &[1, 2, 1, 4, 4])? }
                    }
                    _ => unreachable!(),
                };
                let pv = PriorVars {
                    formulation,
                    resolution: (4, 4),
                    width_rot: gema::token_tables(&hs, &hc, 4, 4, true, formulation),
                    height_rot: gema::token_tables(&hs, &hc, 4, 4, false, formulation),
                    mask,
                };
                let y = gema_forward(&mut tape, xv, Some(&pv), &vars, &cfg)?;
                let r = tape.constant(weights.clone());
                let prod = tape.mul(y, r)?;
                let loss = tape.sum(prod)?;
                Ok((tape, loss))
            },
            &GradCheckConfig { samples_per_tensor: 6, ..GradCheckConfig::default() },
        )
        .unwrap();
        let groups = report.groups();
        assert_eq!(groups.len(), state.len(), "every tensor checked: {:?}", groups.keys());
        assert!(report.max_rel_error() <= 1e-4, "{formulation:?}: {:?}", report.worst());
    }
}
