//! Linear-order attention against a materialized L×L oracle, and the
//! norm-preservation law of the focused map.

use lmii_core::engine::conv::conv2d_reference;
use lmii_core::engine::ops::focused_map;
use lmii_core::engine::Tensor;
use lmii_core::nn::{Ctx, Flam, Mode, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// φ(x) written directly from its definition, no rescaling.
fn phi(row: &[f64], p: f64) -> Vec<f64> {
    let r: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
    let rp: Vec<f64> = r.iter().map(|v| v.powf(p)).collect();
    let (a, b) = (norm(&r), norm(&rp));
    if b == 0.0 {
        return vec![0.0; row.len()];
    }
    rp.iter().map(|v| v * a / b).collect()
}

fn linear(x: &[f64], l: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; l * dout];
    for t in 0..l {
        for o in 0..dout {
            let mut acc = b.data()[o];
            for i in 0..din {
                acc += x[t * din + i] * w.data()[i * dout + o];
            }
            y[t * dout + o] = acc;
        }
    }
    y
}

struct Oracle {
    out: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

/// Single image: A = rownorm(φ(Q)φ(K)ᵀ), out = A·V + DWC(V).
fn quadratic(flam: &Flam, ps: &ParamStore<f64>, x: &[f64], h: usize, w: usize) -> Oracle {
    let l = h * w;
    let d = flam.dim;
    let p = |id| &ps.get(id).value;
    let q = linear(x, l, p(flam.q.weight), p(flam.q.bias));
    let k = linear(x, l, p(flam.k.weight), p(flam.k.bias));
    let v = linear(x, l, p(flam.v.weight), p(flam.v.bias));
    let dh = d / flam.heads;
    let mut out = vec![0.0; l * d];
    let mut rows = Vec::new();
    for head in 0..flam.heads {
        let slice = |m: &[f64], t: usize| m[t * d + head * dh..t * d + (head + 1) * dh].to_vec();
        let pq: Vec<_> = (0..l)
            .map(|t| phi(&slice(&q, t), flam.focus_power))
            .collect();
        let pk: Vec<_> = (0..l)
            .map(|t| phi(&slice(&k, t), flam.focus_power))
            .collect();
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| pq[i].iter().zip(&pk[j]).map(|(a, b)| a * b).sum())
                .collect();
            let z: f64 = s.iter().sum();
            let a: Vec<f64> = s
                .iter()
                .map(|v| if z == 0.0 { 0.0 } else { v / z })
                .collect();
            for c in 0..dh {
                out[i * d + head * dh + c] = (0..l).map(|j| a[j] * v[j * d + head * dh + c]).sum();
            }
            if z != 0.0 {
                rows.push(a);
            }
        }
    }
    let vmap = Tensor::from_fn(&[1, d, h, w], |i| {
        let (c, t) = (i / l, i % l);
        v[t * d + c]
    });
    let dv = conv2d_reference(
        &vmap,
        p(flam.dwc.weight),
        flam.dwc.bias.map(p),
        flam.dwc.opts,
    )
    .unwrap();
    for t in 0..l {
        for c in 0..d {
            out[t * d + c] += dv.data()[c * l + t];
        }
    }
    Oracle { out, rows }
}

#[test]
fn flam_matches_quadratic_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..30 {
        let heads = [1, 2, 4][case % 3];
        let dim = heads * rng.gen_range(1..=4) * 2;
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=(64 / h).min(8));
        let l = h * w;
        let power = [1.0, 2.0, 3.0, 4.5][rng.gen_range(0..4)];
        let mut ps = ParamStore::<f64>::new(case as u64);
        let flam = Flam::new(&mut ps, "flam", dim, heads, power, true).unwrap();
        // Nonzero biases exercise the full affine maps.
        for p in ps.params_mut() {
            if p.name.ends_with("bias") {
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let x: Vec<f64> = (0..l * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut cx = Ctx::new(&ps, Mode::Eval);
        let xv = cx.input(Tensor::new(&[1, l, dim], x.clone()).unwrap());
        let y = flam.forward(&mut cx, xv, h, w).unwrap();
        let got = cx.g.value(y).data().to_vec();

        let oracle = quadratic(&flam, &ps, &x, h, w);
        for (a, b) in got.iter().zip(&oracle.out) {
            let e = (a - b).abs();
            worst = worst.max(e);
            assert!(
                e <= 1e-6,
                "case {case} (L={l}, d={dim}, heads={heads}, p={power}): {a} vs {b}"
            );
        }
        for row in &oracle.rows {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
    eprintln!("max abs deviation {worst:.3e}");
}

#[test]
fn focused_map_preserves_row_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 16;
    let mut rows = Vec::with_capacity(1000 * d);
    for r in 0..1000 {
        for _ in 0..d {
            let v: f64 = match r % 10 {
                // all nonpositive: the zero-row guard
                0 => -rng.gen_range(0.0..2.0),
                1 => rng.gen_range(-1e-3..1e-3),
                2 => rng.gen_range(-50.0..50.0),
                _ => rng.gen_range(-2.0..2.0),
            };
            rows.push(v);
        }
    }
    let x = Tensor::new(&[1000, d], rows).unwrap();
    for p in [1.0, 2.0, 3.0, 7.5] {
        let y = focused_map(&x, p).unwrap();
        for (i, (xr, yr)) in x.data().chunks(d).zip(y.data().chunks(d)).enumerate() {
            let relu: Vec<f64> = xr.iter().map(|v| v.max(0.0)).collect();
            let (nx, ny) = (norm(&relu), norm(yr));
            assert!(
                (nx - ny).abs() <= 1e-6 * nx.max(1.0),
                "row {i}, p={p}: {nx} vs {ny}"
            );
            if relu.iter().all(|&v| v == 0.0) {
                assert!(yr.iter().all(|&v| v == 0.0), "row {i} should map to zero");
            }
            let oracle = phi(xr, p);
            for (a, b) in yr.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9 * nx.max(1.0));
            }
        }
    }
}
