use glied_core::attention::{
    attend_head, feed_forward, g_block, multi_head, post_process, AttentionMask, GBlockParams,
    MultiHeadParams, PostProcessParams, LAYER_NORM_EPS,
};
use glied_core::Graph;
use glied_tensor::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    let d = a.max_abs_diff(b).unwrap();
    assert!(d < tol, "max diff {d}:\n{a:?}\n{b:?}");
}

fn hand_instance(mask: Option<&AttentionMask>) -> (Tensor, Tensor) {
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let q = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let k = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
    let v = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let (out, w) = attend_head(&mut g, q, k, v, mask).unwrap();
    (g.value(out).clone(), g.value(w).clone())
}

#[test]
fn hand_computed_attention() {
    let (out, w) = hand_instance(None);
    close(
        &w,
        &t(&[
            &[0.4011120926797859, 0.1977758146404282, 0.4011120926797859],
            &[0.1977758146404282, 0.4011120926797859, 0.4011120926797859],
        ]),
        1e-12,
    );
    close(&out, &t(&[&[3.0, 4.0], &[3.4066725560787154, 4.406672556078716]]), 1e-12);
}

#[test]
fn hand_computed_masked_attention() {
    let mask = AttentionMask::from_rows(&[
        vec![true, false, false],
        vec![true, true, false],
    ])
    .unwrap();
    let (out, w) = hand_instance(Some(&mask));
    close(
        &w,
        &t(&[&[1.0, 0.0, 0.0], &[0.3302384506733431, 0.6697615493266569, 0.0]]),
        1e-12,
    );
    assert_eq!(w.get2(0, 1).unwrap(), 0.0);
    assert_eq!(w.get2(1, 2).unwrap(), 0.0);
    close(&out, &t(&[&[1.0, 2.0], &[2.3395230986533138, 3.3395230986533138]]), 1e-12);
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn columns(m: &Tensor, start: usize, len: usize) -> Tensor {
    let (r, _) = m.dims2().unwrap();
    let rows: Vec<Vec<f64>> = (0..r)
        .map(|i| m.row(i).unwrap()[start..start + len].to_vec())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.dims2().unwrap();
    let (_, m) = b.dims2().unwrap();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a.get2(i, l).unwrap() * b.get2(l, j).unwrap()).sum();
        }
    }
    Tensor::matrix(n, m, out).unwrap()
}

#[test]
fn two_heads_equal_manual_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let p = MultiHeadParams::register(&mut store, "h", 4, 2, &mut rng).unwrap();
    let (q, kv) = (random(3, 4, &mut rng), random(5, 4, &mut rng));
    let mask = AttentionMask::padding(&[5, 2, 4], 5).unwrap();
    let mut g = Graph::eval(&store);
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let fused = multi_head(&mut g, qv, kvv, kvv, &p, Some(&mask)).unwrap();
    let fused_out = g.value(fused.output).clone();
    let fused_w: Vec<Tensor> = fused.weights.iter().map(|&w| g.value(w).clone()).collect();

    let w = |id| store.get(id).clone();
    let (wq, wk, wv, wo) = (w(p.wq), w(p.wk), w(p.wv), w(p.wo));
    let mut heads = Vec::new();
    for h in 0..2 {
        let mut g = Graph::eval(&store);
        let qh = g.constant(matmul(&q, &columns(&wq, 2 * h, 2)));
        let kh = g.constant(matmul(&kv, &columns(&wk, 2 * h, 2)));
        let vh = g.constant(matmul(&kv, &columns(&wv, 2 * h, 2)));
        let (o, wts) = attend_head(&mut g, qh, kh, vh, Some(&mask)).unwrap();
        close(g.value(wts), &fused_w[h], 1e-14);
        heads.push(g.value(o).clone());
    }
    let cat: Vec<Vec<f64>> = (0..3)
        .map(|i| [heads[0].row(i).unwrap(), heads[1].row(i).unwrap()].concat())
        .collect();
    close(&fused_out, &matmul(&Tensor::from_rows(&cat).unwrap(), &wo), 1e-12);
}

#[test]
fn single_head_reduces_to_projected_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let p = MultiHeadParams::register(&mut store, "h", 3, 1, &mut rng).unwrap();
    let (q, k, v) = (random(2, 3, &mut rng), random(4, 3, &mut rng), random(4, 3, &mut rng));
    let mut g = Graph::eval(&store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = multi_head(&mut g, qv, kv, vv, &p, None).unwrap();
    assert_eq!(out.weights.len(), 1);
    let got = g.value(out.output).clone();

    let w = |id| store.get(id).clone();
    let mut g = Graph::eval(&store);
    let qp = g.constant(matmul(&q, &w(p.wq)));
    let kp = g.constant(matmul(&k, &w(p.wk)));
    let vp = g.constant(matmul(&v, &w(p.wv)));
    let (o, _) = attend_head(&mut g, qp, kp, vp, None).unwrap();
    close(&got, &matmul(g.value(o), &w(p.wo)), 1e-12);
}

fn layer_norm_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2().unwrap();
    let rows: Vec<Vec<f64>> = (0..r)
        .map(|i| {
            let row = x.row(i).unwrap();
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            row.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut s = a.clone();
    s.add_assign(b).unwrap();
    s
}

#[test]
fn post_process_is_two_residual_blocks_around_feed_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let p = PostProcessParams::register(&mut store, "post", 4, 6, &mut rng).unwrap();
    let (c, res) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
    let mut g = Graph::eval(&store);
    let (cv, rv) = (g.constant(c.clone()), g.constant(res.clone()));
    let out = post_process(&mut g, cv, rv, &p).unwrap();
    let f = feed_forward(&mut g, cv, &p.ff).unwrap();
    let f = g.value(f).clone();

    let w1 = store.get(p.ff.w1).clone();
    let w2 = store.get(p.ff.w2).clone();
    let hidden = matmul(&c, &w1).map(|v| v.max(0.0));
    close(&f, &matmul(&hidden, &w2), 1e-12);
    // Fresh G blocks have unit gain and zero bias.
    let inner = layer_norm_rows(&add(&c, &f));
    close(g.value(out), &layer_norm_rows(&add(&res, &inner)), 1e-12);
}

#[test]
fn g_block_drops_only_the_new_value() {
    let mut store = ParamStore::new();
    let p = GBlockParams::register(&mut store, "g", 6).unwrap();
    let r = t(&[&[0.5, -1.0, 2.0, 0.25, 1.5, -0.75]]);
    let zero = Tensor::zeros(&[1, 6]).unwrap();
    let expected = layer_norm_rows(&r);
    for seed in 0..8 {
        let mut g = Graph::train(&store, 0.5, seed);
        let (rv, zv) = (g.constant(r.clone()), g.constant(zero.clone()));
        let kept = g_block(&mut g, zv, rv, &p).unwrap();
        close(g.value(kept), &expected, 1e-12);
    }
    let differs = (0..8).any(|seed| {
        let mut g = Graph::train(&store, 0.5, seed);
        let (rv, zv) = (g.constant(r.clone()), g.constant(zero.clone()));
        let swapped = g_block(&mut g, rv, zv, &p).unwrap();
        g.value(swapped).max_abs_diff(&expected).unwrap() > 1e-6
    });
    assert!(differs, "dropout never touched the value input");
}

proptest! {
    #[test]
    fn masked_keys_do_not_influence_output(
        seed in 0u64..1000,
        visible in 1usize..5,
        noise in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MultiHeadParams::register(&mut store, "h", 4, 2, &mut rng).unwrap();
        let q = random(2, 4, &mut rng);
        let kv = random(5, 4, &mut rng);
        let mut perturbed = kv.clone();
        for i in visible..5 {
            for j in 0..4 {
                perturbed.data_mut()[i * 4 + j] += noise;
            }
        }
        let mask = AttentionMask::padding(&[visible, visible], 5).unwrap();
        let run = |keys: &Tensor| {
            let mut g = Graph::eval(&store);
            let (qv, kv) = (g.constant(q.clone()), g.constant(keys.clone()));
            let out = multi_head(&mut g, qv, kv, kv, &p, Some(&mask)).unwrap();
            let weights: Vec<Tensor> = out.weights.iter().map(|&w| g.value(w).clone()).collect();
            (g.value(out.output).clone(), weights)
        };
        let (a, wa) = run(&kv);
        let (b, _) = run(&perturbed);
        prop_assert_eq!(a.data(), b.data());
        for w in &wa {
            for i in 0..2 {
                let row = w.row(i).unwrap();
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row[visible..].iter().all(|&x| x == 0.0));
            }
        }
    }
}
