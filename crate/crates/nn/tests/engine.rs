use jmpe_nn::{conv, par, ConvGeom, Gradients, Graph, ParamId, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Net {
    params: ParamSet<f64>,
    ids: Vec<(ParamId, ParamId)>,
    geoms: Vec<ConvGeom>,
}

/// stem → k2s2 down → up → concat skip → 1×1 head → sigmoid
fn net(seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geoms = vec![
        ConvGeom::new(2, 4, 3, 1, 1),
        ConvGeom::new(4, 4, 2, 2, 0),
        ConvGeom::new(4, 4, 3, 1, 1),
        ConvGeom::new(8, 1, 1, 1, 0),
    ];
    let mut params = ParamSet::new();
    let mut ids = Vec::new();
    for (i, g) in geoms.iter().enumerate() {
        let (w, b) = params.add_conv(&format!("c{i}"), g, &mut rng);
        // non-zero biases so their gradients are exercised too
        for v in params.get_mut(b) {
            *v = rng.random_range(-0.1..0.1);
        }
        ids.push((w, b));
    }
    Net { params, ids, geoms }
}

fn forward<'p>(
    n: &'p Net,
    params: &'p ParamSet<f64>,
    x: &Tensor<f64>,
) -> (Graph<'p, f64>, jmpe_nn::Var, jmpe_nn::Var) {
    let mut g = Graph::new(params);
    let xi = g.input(x.clone());
    let c =
        |g: &mut Graph<'p, f64>, v, i: usize| g.conv(v, n.ids[i].0, Some(n.ids[i].1), n.geoms[i]);
    let s = c(&mut g, xi, 0);
    let s = g.leaky_relu(s, 0.1);
    let d = c(&mut g, s, 1);
    let d = g.relu(d);
    let u = g.upsample2(d);
    let u = c(&mut g, u, 2);
    let cat = g.concat(s, u);
    let h = c(&mut g, cat, 3);
    let out = g.sigmoid(h);
    (g, xi, out)
}

fn loss(n: &Net, params: &ParamSet<f64>, x: &Tensor<f64>, r: &[f64]) -> f64 {
    let (g, _, out) = forward(n, params, x);
    g.value(out).data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 3], ch: usize) -> Tensor<f64> {
    let n = dims.iter().product::<usize>() * ch;
    Tensor::from_vec(
        dims,
        ch,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

#[test]
fn gradients_match_central_differences() {
    let n = net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, [4, 4, 6], 2);
    let r: Vec<f64> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (g, xi, out) = forward(&n, &n.params, &x);
    let mut pg = Gradients::zeros_like(&n.params);
    let seed = Tensor::from_vec(g.value(out).dims, 1, r.clone());
    let ng = g.backward(out, seed, Some(&mut pg), true);
    let dx = ng.get(xi).unwrap().clone();
    drop(g);

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut p = n.params.clone();
    for &(w, b) in &n.ids {
        for id in [w, b] {
            let len = p.get(id).len();
            for k in (0..len).step_by(len.div_ceil(7)) {
                let v = p.get(id)[k];
                p.get_mut(id)[k] = v + h;
                let up = loss(&n, &p, &x, &r);
                p.get_mut(id)[k] = v - h;
                let dn = loss(&n, &p, &x, &r);
                p.get_mut(id)[k] = v;
                let fd = (up - dn) / (2.0 * h);
                worst = worst.max((fd - pg.get(id)[k]).abs() / fd.abs().max(1e-3));
            }
        }
    }
    for k in (0..x.len()).step_by(11) {
        let mut xp = x.clone();
        xp.data[k] += h;
        let up = loss(&n, &n.params, &xp, &r);
        xp.data[k] -= 2.0 * h;
        let dn = loss(&n, &n.params, &xp, &r);
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - dx.data[k]).abs() / fd.abs().max(1e-3));
    }
    assert!(worst < 1e-5, "worst relative gradient error {worst:e}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = ConvGeom::new(4, 8, 3, 1, 1);
    let data = (0..20 * 18 * 16 * 4)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let x = Tensor::from_vec([20, 18, 16], 4, data);
    let w: Vec<f32> = (0..g.weight_len())
        .map(|_| rng.random_range(-0.2f32..0.2))
        .collect();
    let run = |threads| {
        par::with_threads(threads, || {
            let y = conv::forward(&x, &w, None, &g);
            let (dw, _) = conv::backward_weight(&x, &y, &g, false);
            let dx = conv::backward_input(&y, &w, &g, x.dims);
            (y.data, dw, dx.data)
        })
    };
    assert_eq!(run(1), run(3));
}

/// Same-size 3³ convolution by direct summation.
fn naive_same3(x: &Tensor<f64>, w: &[f64], co: usize) -> Tensor<f64> {
    let [d, h, wd] = x.dims;
    let ci = x.channels;
    let mut out = Tensor::zeros(x.dims, co);
    for z in 0..d {
        for y in 0..h {
            for v in 0..wd {
                for t in 0..27 {
                    let (a, b, c) = (t / 9, t / 3 % 3, t % 3);
                    let (zz, yy, vv) = (z + a, y + b, v + c);
                    if zz < 1 || yy < 1 || vv < 1 || zz > d || yy > h || vv > wd {
                        continue;
                    }
                    let src = ((zz - 1) * h + yy - 1) * wd + vv - 1;
                    let dst = (z * h + y) * wd + v;
                    for i in 0..ci {
                        for o in 0..co {
                            out.data[dst * co + o] +=
                                x.data[src * ci + i] * w[(t * ci + i) * co + o];
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn narrow_f32_convs_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (ci, co) in [(1, 4), (4, 8), (8, 2), (16, 8), (8, 16)] {
        let g = ConvGeom::new(ci, co, 3, 1, 1);
        let x = random_tensor(&mut rng, [9, 7, 12], ci);
        let w: Vec<f64> = (0..g.weight_len())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let want = naive_same3(&x, &w, co);
        let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let got = conv::forward(&x.cast::<f32>(), &wf, None, &g);
        for (a, c) in got.data.iter().zip(&want.data) {
            assert!((*a as f64 - c).abs() < 1e-4, "{ci}->{co}: {a} vs {c}");
        }
        // <dy, conv(x)> = <conv^T(dy), x>
        let dy = random_tensor(&mut rng, want.dims, co);
        let dx = conv::backward_input(&dy.cast::<f32>(), &wf, &g, x.dims);
        let lhs: f64 = dy.data.iter().zip(&want.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx
            .data
            .iter()
            .zip(&x.data)
            .map(|(a, b)| *a as f64 * b)
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0),
            "{ci}->{co} adjoint: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn params_survive_save_and_load() {
    // storage is f32, so an f32 set comes back bit-for-bit
    let params = net(8).params.cast::<f32>();
    let dir = tempfile::tempdir().unwrap();
    params.save(dir.path(), "net").unwrap();
    let back = ParamSet::<f32>::load(dir.path(), "net").unwrap();
    assert_eq!(back.checksum(), params.checksum());
    assert_eq!(back, params);
}
