mod common;

use common::*;
use fdd_diffcore::{grad_check, grad_check_with_floor, ComplexTensor, DiffError, Graph, Tensor};
use fdd_precoding::channels::{sample_rng, Fraction, TaskConfig};
use fdd_precoding::endtoend::{
    aggregate, bind_params, dsc_decoder_forward, encode_feedback, forward_task, init_pilot, input_proj, mhsa_sublayer,
    moe_ffn_sublayer, normalized_pilot, output_head, pilot_forward, power_normalize, predict_precoders,
    sample_pilot_noise, top_k_indices, trunk_forward, ArchConfig, Binding, Mode, ModelBundle, PilotNoise, Quantizer,
    TaskKind,
};
use fdd_precoding::objectives::task_loss;
use fdd_precoding::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> M {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn to_tensor(m: &M) -> Tensor<f64> {
    Tensor::from_rows(m).unwrap()
}

fn to_mat(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn layer_norm_rows(x: &M, gain: &[f64], bias: &[f64], eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// Multi-head attention within groups of `k` consecutive tokens.
fn mha_oracle(z: &M, wq: &M, wk: &M, wv: &M, wo: &M, heads: usize, k: usize) -> M {
    let d = z[0].len();
    let dh = d / heads;
    let (q, kk, v) = (mm(z, wq), mm(z, wk), mm(z, wv));
    let mut cat = vec![vec![0.0; d]; z.len()];
    for g0 in (0..z.len()).step_by(k) {
        for h in 0..heads {
            for i in 0..k {
                let scores: Vec<f64> = (0..k)
                    .map(|j| (0..dh).map(|c| q[g0 + i][h * dh + c] * kk[g0 + j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = ex.iter().sum();
                for c in 0..dh {
                    cat[g0 + i][h * dh + c] = (0..k).map(|j| ex[j] / tot * v[g0 + j][h * dh + c]).sum();
                }
            }
        }
    }
    mm(&cat, wo)
}

fn relu_ffn(x: &[f64], u1: &M, c1: &[f64], u2: &M, c2: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = (0..c1.len())
        .map(|j| (c1[j] + (0..x.len()).map(|i| x[i] * u1[i][j]).sum::<f64>()).max(0.0))
        .collect();
    (0..c2.len())
        .map(|j| c2[j] + (0..h.len()).map(|i| h[i] * u2[i][j]).sum::<f64>())
        .collect()
}

fn assert_close(a: &M, b: &M, tol: f64) {
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }
}

fn arch(d: usize, heads: usize, experts: usize, top_k: usize, d_ff: usize) -> ArchConfig {
    ArchConfig {
        d_model: d,
        heads,
        experts,
        top_k,
        blocks: 1,
        d_ff,
        enc_hidden: 8,
        enc_layers: 1,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

fn no_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn pilot_single_antenna_selection_observes_first_channel_entry() {
    let mut g = Graph::<f64>::new();
    let mut re = Tensor::zeros(3, 1);
    re.set(0, 0, 1.0);
    let b = bind_named(&mut g, &[("pilot.re", re), ("pilot.im", Tensor::zeros(3, 1))]);
    let x = normalized_pilot(&mut g, &b.scope(""), 1.0).unwrap();
    let h = ComplexTensor::new(
        Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap(),
        Tensor::from_rows(&[vec![0.25, 3.0, 1.0]]).unwrap(),
    )
    .unwrap();
    let hv = g.complex_leaf(h, false);
    let y = pilot_forward(&mut g, hv, x, None).unwrap();
    let y = g.complex_value(y);
    assert_eq!(y.get(0, 0), (0.5, 0.25));
}

#[test]
fn pilot_columns_carry_symbol_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &e_s in &[1.0, 2.5] {
        let raw = rand_mat(&mut rng, 6, 4);
        let raw_im = rand_mat(&mut rng, 6, 4);
        let mut g = Graph::<f64>::new();
        let b = bind_named(&mut g, &[("pilot.re", to_tensor(&raw)), ("pilot.im", to_tensor(&raw_im))]);
        let x = normalized_pilot(&mut g, &b.scope(""), e_s).unwrap();
        for e in column_energies(&g.complex_value(x)) {
            assert!((e - e_s).abs() < 1e-9);
        }

        let mut g = Graph::<f32>::new();
        let re = g.param(to_tensor(&raw).cast());
        let im = g.param(to_tensor(&raw_im).cast());
        let mut b = Binding::new();
        b.insert("pilot.re".into(), re);
        b.insert("pilot.im".into(), im);
        let x = normalized_pilot(&mut g, &b.scope(""), e_s).unwrap();
        for e in column_energies(&g.complex_value(x)) {
            assert!((e - e_s).abs() < 1e-5 * e_s);
        }
    }
    let (re, im) = init_pilot::<f64, _>(&mut rng, 8, 3, 1.0);
    for e in column_energies(&ComplexTensor::new(re, im).unwrap()) {
        assert!((e - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sampled_noise_has_requested_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z: ComplexTensor<f64> = sample_pilot_noise(&mut rng, 1000, 100, 0.1);
    let n = z.re.len() as f64;
    let power = z.frobenius_norm_sq() / n;
    assert!((0.098..=0.102).contains(&power), "{power}");
}

fn encoder_binding(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, input: usize, hidden: usize, bits: usize, zero_bias: bool) -> Binding {
    let b0 = if zero_bias { vec![vec![0.0; hidden]] } else { rand_mat(rng, 1, hidden) };
    let b1 = if zero_bias { vec![vec![0.0; bits]] } else { rand_mat(rng, 1, bits) };
    bind_named(
        g,
        &[
            ("enc.l0.w", to_tensor(&rand_mat(rng, input, hidden))),
            ("enc.l0.b", to_tensor(&b0)),
            ("enc.l1.w", to_tensor(&rand_mat(rng, hidden, bits))),
            ("enc.l1.b", to_tensor(&b1)),
        ],
    )
}

#[test]
fn feedback_bits_are_signs_and_shared_across_users() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let b = encoder_binding(&mut g, &mut rng, 4, 6, 5, false);
    let row = rand_mat(&mut rng, 1, 2);
    let row_im = rand_mat(&mut rng, 1, 2);
    let other = rand_mat(&mut rng, 1, 2);
    let re = vec![row[0].clone(), other[0].clone(), row[0].clone()];
    let im = vec![row_im[0].clone(), other[0].clone(), row_im[0].clone()];
    let y = g.complex_leaf(ComplexTensor::new(to_tensor(&re), to_tensor(&im)).unwrap(), false);
    let (_, q) = encode_feedback(&mut g, y, &b.scope(""), Quantizer::Sign).unwrap();
    let q = g.value(q).clone();
    assert!(q.data().iter().all(|&v| v == 1.0 || v == -1.0));
    assert_eq!(q.row(0), q.row(2));

    let mut g = Graph::<f64>::new();
    let b = encoder_binding(&mut g, &mut rng, 4, 6, 5, true);
    let y = g.complex_leaf(ComplexTensor::zeros(2, 2), false);
    let (pre, q) = encode_feedback(&mut g, y, &b.scope(""), Quantizer::Sign).unwrap();
    assert!(g.value(pre).data().iter().all(|&v| v == 0.0));
    assert!(g.value(q).data().iter().all(|&v| v == 1.0));
}

#[test]
fn aggregation_places_feedback_in_columns() {
    let q = vec![vec![1.0, -1.0, 1.0], vec![-1.0, -1.0, 1.0]];
    let a = aggregate(&q).unwrap();
    assert_eq!(to_mat(&a), vec![vec![1.0, -1.0], vec![-1.0, -1.0], vec![1.0, 1.0]]);
    let single = aggregate(&[vec![1.0, -1.0]]).unwrap();
    assert_eq!(single.shape(), (2, 1));
    let swapped = aggregate(&[q[1].clone(), q[0].clone()]).unwrap();
    for r in 0..3 {
        assert_eq!(swapped.get(r, 0), a.get(r, 1));
        assert_eq!(swapped.get(r, 1), a.get(r, 0));
    }
    assert!(matches!(aggregate::<f64>(&[]), Err(Error::Empty(_))));
    assert!(matches!(aggregate(&[vec![1.0], vec![1.0, 1.0]]), Err(Error::Dimension(_))));
}

#[test]
fn zero_input_projection_broadcasts_bias() {
    let mut g = Graph::<f64>::new();
    let bias = vec![vec![0.5, -2.0, 3.0]];
    let b = bind_named(&mut g, &[("head.in.w", Tensor::zeros(4, 3)), ("head.in.b", to_tensor(&bias))]);
    let mut rng = no_rng();
    let t = g.constant(to_tensor(&rand_mat(&mut rng, 5, 4)));
    let z = input_proj(&mut g, t, &b.scope("")).unwrap();
    for r in 0..5 {
        assert_eq!(g.value(z).row(r), &bias[0][..]);
    }
}

struct BlockWeights {
    wq: M,
    wk: M,
    wv: M,
    wo: M,
    gain: Vec<f64>,
    bias: Vec<f64>,
}

fn block_weights(rng: &mut ChaCha8Rng, d: usize) -> BlockWeights {
    BlockWeights {
        wq: rand_mat(rng, d, d),
        wk: rand_mat(rng, d, d),
        wv: rand_mat(rng, d, d),
        wo: rand_mat(rng, d, d),
        gain: rand_mat(rng, 1, d).remove(0),
        bias: rand_mat(rng, 1, d).remove(0),
    }
}

fn bind_attn(g: &mut Graph<f64>, w: &BlockWeights) -> Binding {
    bind_named(
        g,
        &[
            ("attn.wq", to_tensor(&w.wq)),
            ("attn.wk", to_tensor(&w.wk)),
            ("attn.wv", to_tensor(&w.wv)),
            ("attn.wo", to_tensor(&w.wo)),
            ("ln1.gain", Tensor::row_vector(w.gain.clone())),
            ("ln1.bias", Tensor::row_vector(w.bias.clone())),
        ],
    )
}

fn run_attn(w: &BlockWeights, z: &M, a: &ArchConfig, k: usize) -> M {
    let mut g = Graph::<f64>::new();
    let b = bind_attn(&mut g, w);
    let zv = g.constant(to_tensor(z));
    let out = mhsa_sublayer(&mut g, zv, &b.scope(""), a, k, Mode::Eval, &mut no_rng()).unwrap();
    to_mat(g.value(out))
}

#[test]
fn attention_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &(d, heads, k, m) in &[(2, 1, 2, 1), (4, 2, 3, 2), (6, 3, 2, 3)] {
        let w = block_weights(&mut rng, d);
        let z = rand_mat(&mut rng, k * m, d);
        let a = arch(d, heads, 1, 1, 4);
        let got = run_attn(&w, &z, &a, k);
        let mha = mha_oracle(&z, &w.wq, &w.wk, &w.wv, &w.wo, heads, k);
        let res: M = z.iter().zip(&mha).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
        let want = layer_norm_rows(&res, &w.gain, &w.bias, a.ln_eps);
        assert_close(&got, &want, 1e-6);
    }
}

#[test]
fn single_user_attention_is_the_value_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let d = 4;
    let w = block_weights(&mut rng, d);
    let z = rand_mat(&mut rng, 3, d);
    let got = run_attn(&w, &z, &arch(d, 2, 1, 1, 4), 1);
    let chain = mm(&mm(&z, &w.wv), &w.wo);
    let res: M = z.iter().zip(&chain).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect();
    assert_close(&got, &layer_norm_rows(&res, &w.gain, &w.bias, 1e-5), 1e-9);
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 4;
    let w = block_weights(&mut rng, d);
    let z = rand_mat(&mut rng, 3, d);
    let a = arch(d, 2, 1, 1, 4);
    let base = run_attn(&w, &z, &a, 3);
    let perm = [2, 0, 1];
    let zp: M = perm.iter().map(|&i| z[i].clone()).collect();
    let got = run_attn(&w, &zp, &a, 3);
    let want: M = perm.iter().map(|&i| base[i].clone()).collect();
    assert_close(&got, &want, 1e-12);
}

struct Experts {
    u1: Vec<M>,
    c1: Vec<Vec<f64>>,
    u2: Vec<M>,
    c2: Vec<Vec<f64>>,
}

fn experts(rng: &mut ChaCha8Rng, n: usize, d: usize, d_ff: usize) -> Experts {
    let mut e = Experts {
        u1: vec![],
        c1: vec![],
        u2: vec![],
        c2: vec![],
    };
    for _ in 0..n {
        e.u1.push(rand_mat(rng, d, d_ff));
        e.c1.push(rand_mat(rng, 1, d_ff).remove(0));
        e.u2.push(rand_mat(rng, d_ff, d));
        e.c2.push(rand_mat(rng, 1, d).remove(0));
    }
    e
}

fn moe_params(ex: &Experts, router_w: &M, router_b: &[f64], gain: &[f64], bias: &[f64]) -> Vec<(String, Tensor<f64>)> {
    let mut p = vec![
        ("router.w".to_string(), to_tensor(router_w)),
        ("router.b".to_string(), Tensor::row_vector(router_b.to_vec())),
        ("ln2.gain".to_string(), Tensor::row_vector(gain.to_vec())),
        ("ln2.bias".to_string(), Tensor::row_vector(bias.to_vec())),
    ];
    for e in 0..ex.u1.len() {
        p.push((format!("expert{e}.u1"), to_tensor(&ex.u1[e])));
        p.push((format!("expert{e}.c1"), Tensor::row_vector(ex.c1[e].clone())));
        p.push((format!("expert{e}.u2"), to_tensor(&ex.u2[e])));
        p.push((format!("expert{e}.c2"), Tensor::row_vector(ex.c2[e].clone())));
    }
    p
}

fn bind_owned(g: &mut Graph<f64>, p: &[(String, Tensor<f64>)]) -> Binding {
    let refs: Vec<(&str, Tensor<f64>)> = p.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    bind_named(g, &refs)
}

#[test]
fn top_k_breaks_ties_towards_lower_index() {
    assert_eq!(top_k_indices(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
    assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    assert_eq!(top_k_indices(&[0.0, 5.0, 5.0, 1.0], 1), vec![1]);
}

#[test]
fn router_gates_follow_masked_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (d, d_ff) = (3, 4);
    let ex = experts(&mut rng, 3, d, d_ff);
    let ones = vec![1.0; d];
    let zeros = vec![0.0; d];
    let p = moe_params(&ex, &vec![vec![0.0; 3]; d], &[3.0, 1.0, 2.0], &ones, &zeros);
    let mut g = Graph::<f64>::new();
    let b = bind_owned(&mut g, &p);
    let zbar = rand_mat(&mut rng, 2, d);
    let zv = g.constant(to_tensor(&zbar));
    let out = moe_ffn_sublayer(&mut g, zv, &b.scope(""), &arch(d, 1, 3, 2, d_ff), Mode::Eval, &mut no_rng()).unwrap();
    assert_eq!(out.selected, vec![vec![0, 2], vec![0, 2]]);
    assert_eq!(out.expert_load(3), vec![2, 0, 2]);
    let pi0 = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((pi0 - 0.7311).abs() < 1e-4);
    for r in 0..2 {
        let gates = g.value(out.gates).row(r).to_vec();
        assert!((gates[0] - pi0).abs() < 1e-12);
        assert_eq!(gates[1], 0.0);
        assert!((gates[2] - (1.0 - pi0)).abs() < 1e-12);
    }
    let want: M = zbar
        .iter()
        .map(|x| {
            let e0 = relu_ffn(x, &ex.u1[0], &ex.c1[0], &ex.u2[0], &ex.c2[0]);
            let e2 = relu_ffn(x, &ex.u1[2], &ex.c1[2], &ex.u2[2], &ex.c2[2]);
            (0..d).map(|j| x[j] + pi0 * e0[j] + (1.0 - pi0) * e2[j]).collect()
        })
        .collect();
    assert_close(&to_mat(g.value(out.out)), &layer_norm_rows(&want, &ones, &zeros, 1e-5), 1e-9);
}

#[test]
fn single_expert_is_a_plain_ffn() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (d, d_ff) = (4, 6);
    let ex = experts(&mut rng, 1, d, d_ff);
    let gain = rand_mat(&mut rng, 1, d).remove(0);
    let bias = rand_mat(&mut rng, 1, d).remove(0);
    let p = moe_params(&ex, &rand_mat(&mut rng, d, 1), &[0.3], &gain, &bias);
    let mut g = Graph::<f64>::new();
    let b = bind_owned(&mut g, &p);
    let zbar = rand_mat(&mut rng, 5, d);
    let zv = g.constant(to_tensor(&zbar));
    let out = moe_ffn_sublayer(&mut g, zv, &b.scope(""), &arch(d, 1, 1, 1, d_ff), Mode::Eval, &mut no_rng()).unwrap();
    let want: M = zbar
        .iter()
        .map(|x| {
            let f = relu_ffn(x, &ex.u1[0], &ex.c1[0], &ex.u2[0], &ex.c2[0]);
            x.iter().zip(&f).map(|(a, b)| a + b).collect()
        })
        .collect();
    assert_close(&to_mat(g.value(out.out)), &layer_norm_rows(&want, &gain, &bias, 1e-5), 1e-9);
}

#[test]
fn unselected_experts_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (d, d_ff) = (3, 4);
    let ex = experts(&mut rng, 3, d, d_ff);
    let p = moe_params(&ex, &vec![vec![0.0; 3]; d], &[0.5, 2.0, -1.0], &[1.0; 3], &[0.0; 3]);
    let zbar = to_tensor(&rand_mat(&mut rng, 4, d));
    let weights = to_tensor(&rand_mat(&mut rng, 4, d));
    let a = arch(d, 1, 3, 1, d_ff);
    let expert_params: Vec<usize> = (4..p.len()).collect();
    let leaves: Vec<Tensor<f64>> = expert_params.iter().map(|&i| p[i].1.clone()).collect();
    let report = grad_check(
        |g, vars| {
            let mut b = Binding::new();
            for (i, (name, t)) in p.iter().enumerate() {
                let v = match expert_params.iter().position(|&j| j == i) {
                    Some(pos) => vars[pos],
                    None => g.constant(t.clone()),
                };
                b.insert(name.clone(), v);
            }
            let z = g.constant(zbar.clone());
            let w = g.constant(weights.clone());
            let out = moe_ffn_sublayer(g, z, &b.scope(""), &a, Mode::Eval, &mut no_rng())
                .map_err(|e| DiffError::InvalidArgument { op: "moe", msg: e.to_string() })?;
            let prod = g.mul(out.out, w)?;
            g.sum_all(prod)
        },
        &leaves,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    // router bias sends every token to expert 1
    for (i, &pi) in expert_params.iter().enumerate() {
        let name = &p[pi].0;
        let norm = report.analytic[i].frobenius_norm_sq();
        if name.starts_with("expert1.") {
            assert!(norm > 0.0, "{name}");
        } else {
            assert_eq!(norm, 0.0, "{name}");
            assert_eq!(report.numeric[i].frobenius_norm_sq(), 0.0, "{name}");
        }
    }
}

#[test]
fn empty_trunk_is_identity() {
    let mut a = tiny_arch();
    a.blocks = 0;
    let mut g = Graph::<f64>::new();
    let b = Binding::new();
    let z = g.constant(to_tensor(&rand_mat(&mut no_rng(), 4, 8)));
    let (out, loads) = trunk_forward(&mut g, z, &b.scope("trunk/"), &a, 2, Mode::Eval, &mut no_rng()).unwrap();
    assert_eq!(out, z);
    assert!(loads.is_empty());
}

#[test]
fn output_head_layout() {
    let mut g = Graph::<f64>::new();
    let b = bind_named(&mut g, &[("head.out.w", Tensor::identity(4)), ("head.out.b", Tensor::zeros(1, 4))]);
    let z = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
    let v = output_head(&mut g, z, &b.scope("")).unwrap();
    let v = g.complex_value(v);
    assert_eq!(v.get(0, 0), (1.0, 3.0));
    assert_eq!(v.get(0, 1), (2.0, 4.0));
}

fn normalize(vt: ComplexTensor<f64>, k: usize, p: f64) -> Result<ComplexTensor<f64>, Error> {
    let mut g = Graph::<f64>::new();
    let v = g.complex_leaf(vt, false);
    let out = power_normalize(&mut g, v, k, p)?;
    Ok(g.complex_value(out))
}

#[test]
fn power_normalization_examples() {
    let unit = ComplexTensor::real(Tensor::row_vector(vec![1.0, 0.0]));
    assert_eq!(normalize(unit, 1, 4.0).unwrap().get(0, 0), (2.0, 0.0));
    let already = ComplexTensor::new(
        Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap(),
        Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
    )
    .unwrap();
    let out = normalize(already.clone(), 2, 4.0).unwrap();
    assert!(max_abs_diff(&out, &already) < 1e-15);
    assert!(matches!(normalize(ComplexTensor::zeros(2, 3), 2, 1.0), Err(Error::DegeneratePrecoder)));

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let vt = ComplexTensor::new(to_tensor(&rand_mat(&mut rng, 6, 4)), to_tensor(&rand_mat(&mut rng, 6, 4))).unwrap();
    for e in sample_energies(&normalize(vt, 3, 7.5).unwrap(), 3) {
        assert!((e - 7.5).abs() < 1e-12);
    }
}

#[test]
fn forward_shapes_and_power() {
    let b = tiny_bundle::<f32>(1);
    let cfg = tiny_task("t");
    let (_, h) = channels::<f32>(&cfg, 5, 2);
    let vt = predict_precoders(&b, "t", &h, PilotNoise::Off).unwrap();
    assert_eq!(vt.shape(), (10, 4));
    for e in sample_energies(&vt, 2) {
        assert!((e - 1.0).abs() < 1e-5);
    }
    let bad: ComplexTensor<f32> = ComplexTensor::zeros(10, 3);
    assert!(matches!(predict_precoders(&b, "t", &bad, PilotNoise::Off), Err(Error::Dimension(_))));
    let odd: ComplexTensor<f32> = ComplexTensor::zeros(3, 4);
    assert!(predict_precoders(&b, "t", &odd, PilotNoise::Off).is_err());
    assert!(matches!(predict_precoders(&b, "nope", &h, PilotNoise::Off), Err(Error::UnknownTask(_))));
}

#[test]
fn eval_forward_is_deterministic() {
    let b = tiny_bundle::<f32>(1);
    let (_, h) = channels::<f32>(&tiny_task("t"), 4, 3);
    let z = sample_pilot_noise(&mut ChaCha8Rng::seed_from_u64(9), 8, 2, 0.1);
    let a = predict_precoders(&b, "t", &h, PilotNoise::Given(&z)).unwrap();
    let c = predict_precoders(&b, "t", &h, PilotNoise::Given(&z)).unwrap();
    assert_eq!(a.re.data(), c.re.data());
    assert_eq!(a.im.data(), c.im.data());
}

fn equivariance_gap(bundle: &ModelBundle<f64>, cfg: &TaskConfig, seed: u64, perm: &[usize]) -> f64 {
    let k = cfg.n_users;
    let (_, h) = channels::<f64>(cfg, 3, seed);
    let len = bundle.task("t").unwrap().resolved().unwrap().pilot_len;
    let z = sample_pilot_noise(&mut ChaCha8Rng::seed_from_u64(seed), 3 * k, len, 0.05);
    let base = predict_precoders(bundle, "t", &h, PilotNoise::Given(&z)).unwrap();
    let hp = permute_users(&h, k, perm);
    let zp = permute_users(&z, k, perm);
    let got = predict_precoders(bundle, "t", &hp, PilotNoise::Given(&zp)).unwrap();
    max_abs_diff(&got, &permute_users(&base, k, perm))
}

#[test]
fn transformer_precoder_is_user_permutation_equivariant() {
    let mut a = tiny_arch();
    a.blocks = 2;
    a.top_k = 2;
    let cfg = TaskConfig::new("t", 4, 3, Fraction::new(1, 2).unwrap(), Fraction::ONE, 10.0);
    let b = bundle_with::<f64>(a, &[(cfg.clone(), TaskKind::Feedback)], 4);
    assert!(equivariance_gap(&b, &cfg, 1, &[2, 0, 1]) < 1e-12);
    let est = bundle_with::<f64>(tiny_arch(), &[(cfg.clone(), TaskKind::Estimation { est_hidden: vec![8] })], 4);
    assert!(equivariance_gap(&est, &cfg, 2, &[1, 2, 0]) < 1e-12);
}

#[test]
fn mlp_decoder_is_not_equivariant() {
    let cfg = tiny_task("t");
    let mut a = tiny_arch();
    a.blocks = 0;
    let b = bundle_with::<f64>(a, &[(cfg.clone(), TaskKind::Dsc { dec_hidden: vec![16] })], 6);
    let (_, h) = channels::<f64>(&cfg, 3, 1);
    assert_eq!(predict_precoders(&b, "t", &h, PilotNoise::Off).unwrap().shape(), (6, 4));
    assert!(equivariance_gap(&b, &cfg, 1, &[1, 0]) > 1e-3);
}

#[test]
fn zero_decoder_outputs_zero_precoders() {
    let mut g = Graph::<f64>::new();
    let b = bind_named(
        &mut g,
        &[
            ("dec.l0.w", Tensor::zeros(6, 5)),
            ("dec.l0.b", Tensor::zeros(1, 5)),
            ("dec.l1.w", Tensor::zeros(5, 8)),
            ("dec.l1.b", Tensor::zeros(1, 8)),
        ],
    );
    let q = g.constant(Tensor::full(4, 3, 1.0));
    let v = dsc_decoder_forward(&mut g, q, &b.scope(""), 2).unwrap();
    let v = g.complex_value(v);
    assert_eq!(v.shape(), (4, 2));
    assert!(v.frobenius_norm_sq() == 0.0);
    let q3 = g.constant(Tensor::full(3, 3, 1.0));
    assert!(dsc_decoder_forward(&mut g, q3, &b.scope(""), 2).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let bundle = tiny_bundle::<f64>(8);
    let cfg = tiny_task("t");
    let (_, h) = channels::<f64>(&cfg, 3, 5);
    let z = sample_pilot_noise(&mut ChaCha8Rng::seed_from_u64(2), 6, 2, 0.1);
    let named = bundle.named_params();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let leaves: Vec<Tensor<f64>> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let sigma2 = bundle.task("t").unwrap().resolved().unwrap().sigma2();
    // coordinates with |grad| below 1e-5 are compared absolutely
    let report = grad_check_with_floor(
        |g, vars| {
            let mut b = Binding::new();
            for (n, v) in names.iter().zip(vars) {
                b.insert(n.clone(), *v);
            }
            let map = |e: Error| DiffError::InvalidArgument { op: "forward", msg: e.to_string() };
            let hv = g.complex_leaf(h.clone(), false);
            let out = forward_task(g, &bundle, &b, "t", hv, PilotNoise::Given(&z), Mode::Eval, Quantizer::HardTanh, &mut no_rng())
                .map_err(map)?;
            task_loss(g, hv, out.vt, 2, sigma2).map_err(map)
        },
        &leaves,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{} at {:?} ({})", report.max_rel_error, report.worst, names[report.worst.0]);
}

#[test]
fn pilot_receives_gradient_through_sign_quantizer() {
    let bundle = tiny_bundle::<f64>(8);
    let (_, h) = channels::<f64>(&tiny_task("t"), 4, 5);
    let mut g = Graph::<f64>::new();
    let b = bind_params(&mut g, &bundle, &["t"], &|_| true).unwrap();
    let hv = g.complex_leaf(h, false);
    let sigma2 = bundle.task("t").unwrap().resolved().unwrap().sigma2();
    let mut rng = sample_rng(1, 1);
    let out = forward_task(&mut g, &bundle, &b, "t", hv, PilotNoise::Sample, Mode::Train, Quantizer::Sign, &mut rng).unwrap();
    let loss = task_loss(&mut g, hv, out.vt, 2, sigma2).unwrap();
    let grads = g.backward(loss).unwrap();
    let pilot = grads.get(b.var("task/t/pilot.re").unwrap()).unwrap();
    assert!(pilot.frobenius_norm_sq() > 0.0);
    let enc = grads.get(b.var("task/t/enc.l0.w").unwrap()).unwrap();
    assert!(enc.frobenius_norm_sq() > 0.0);
}

#[test]
fn pilot_rejects_zero_column() {
    let mut g = Graph::<f64>::new();
    let b = bind_named(&mut g, &[("pilot.re", Tensor::zeros(2, 2)), ("pilot.im", Tensor::zeros(2, 2))]);
    assert!(normalized_pilot(&mut g, &b.scope(""), 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permuted_users_permute_precoders(seed in 0u64..1000, rot in 1usize..3) {
        let cfg = TaskConfig::new("t", 4, 3, Fraction::new(1, 2).unwrap(), Fraction::ONE, 10.0);
        let b = bundle_with::<f64>(tiny_arch(), &[(cfg.clone(), TaskKind::Feedback)], seed);
        let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        prop_assert!(equivariance_gap(&b, &cfg, seed, &perm) < 1e-12);
    }

    #[test]
    fn normalized_power_is_exact(seed in 0u64..1000, k in 1usize..4, p in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vt = ComplexTensor::new(to_tensor(&rand_mat(&mut rng, 2 * k, 3)), to_tensor(&rand_mat(&mut rng, 2 * k, 3))).unwrap();
        for e in sample_energies(&normalize(vt, k, p).unwrap(), k) {
            prop_assert!((e - p).abs() < 1e-10 * p.max(1.0));
        }
    }
}
