//! Finite-difference gradient oracle.
//!
//! Every layer type has a plain f64 loop implementation here, written
//! without the tape or the GEMM kernels. The tape gradient of
//! `L = sum(r * layer(inputs))` is compared against central differences of
//! the same loss evaluated through the f64 reference.

#![allow(dead_code)]

use mdm_tensor::{Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so that near-zero gradients are
/// judged on absolute error instead of f32 round-off noise.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn ref_linear(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, i) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    let mut out = vec![0.0; n * o];
    for s in 0..n {
        for oo in 0..o {
            let mut acc = b.data[oo];
            for ii in 0..i {
                acc += x.data[s * i + ii] * w.data[oo * i + ii];
            }
            out[s * o + oo] = acc;
        }
    }
    Arr {
        shape: vec![n, o],
        data: out,
    }
}

pub fn ref_conv(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, k) = (w.shape[0], w.shape[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * k + ky) * k + kx;
                                acc += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    out[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Arr {
        shape: vec![n, cout, ho, wo],
        data: out,
    }
}

pub fn ref_film(x: &Arr, scale: &Arr, shift: &Arr) -> Arr {
    let hw = x.shape[2] * x.shape[3];
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * (1.0 + scale.data[i / hw]) + shift.data[i / hw])
        .collect();
    Arr {
        shape: x.shape.clone(),
        data,
    }
}

pub fn ref_upsample(x: &Arr) -> Arr {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![0.0; n * c * 4 * h * w];
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = x.data[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Arr {
        shape: vec![n, c, 2 * h, 2 * w],
        data: out,
    }
}

pub fn ref_concat(a: &Arr, b: &Arr) -> Arr {
    let n = a.shape[0];
    let (sa, sb) = (a.data.len() / n, b.data.len() / n);
    let mut out = Vec::new();
    for s in 0..n {
        out.extend_from_slice(&a.data[s * sa..(s + 1) * sa]);
        out.extend_from_slice(&b.data[s * sb..(s + 1) * sb]);
    }
    Arr {
        shape: vec![n, a.shape[1] + b.shape[1], a.shape[2], a.shape[3]],
        data: out,
    }
}

pub fn ref_expand(m: &Arr, c: usize) -> Arr {
    let (n, hw) = (m.shape[0], m.shape[2] * m.shape[3]);
    let mut out = Vec::new();
    for s in 0..n {
        for _ in 0..c {
            out.extend_from_slice(&m.data[s * hw..(s + 1) * hw]);
        }
    }
    Arr {
        shape: vec![n, c, m.shape[2], m.shape[3]],
        data: out,
    }
}

pub fn ref_mean_spatial(x: &Arr) -> Arr {
    let hw = x.shape[2] * x.shape[3];
    let data = x
        .data
        .chunks(hw)
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect();
    Arr {
        shape: vec![x.shape[0], x.shape[1]],
        data,
    }
}

pub fn ref_embed_mean(table: &Arr, ids: &[Vec<usize>]) -> Arr {
    let d = table.shape[1];
    let mut out = vec![0.0; ids.len() * d];
    for (s, seq) in ids.iter().enumerate() {
        for &id in seq {
            for j in 0..d {
                out[s * d + j] += table.data[id * d + j] / seq.len() as f64;
            }
        }
    }
    Arr {
        shape: vec![ids.len(), d],
        data: out,
    }
}

pub fn ref_map(x: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

pub fn ref_zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

pub fn ref_mse(a: &Arr, b: &Arr) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64
}

pub type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
pub type RefFn = Box<dyn Fn(&[Arr]) -> Arr>;

/// One layer under test.
pub struct LayerCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    /// Indices into `inputs` that receive gradients.
    pub trainable: Vec<usize>,
    /// Builds the op on the tape; returns the output var.
    pub tape_fn: TapeFn,
    /// f64 reference forward of the same op.
    pub ref_fn: RefFn,
}

/// Maximum relative error over `probes` random coordinates.
pub fn check_case(case: &LayerCase, probes: usize, rng: &mut Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if case.trainable.contains(&i) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = (case.tape_fn)(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let weights = Tensor::rand_uniform(&out_shape, -1.0, 1.0, rng);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let wts = Arr::from_tensor(&weights);
    let base: Vec<Arr> = case.inputs.iter().map(Arr::from_tensor).collect();
    let eval = |args: &[Arr]| -> f64 {
        let y = (case.ref_fn)(args);
        y.data.iter().zip(&wts.data).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let which = case.trainable[rng.below(case.trainable.len())];
        let elem = rng.below(base[which].data.len());
        let mut plus = base.clone();
        plus[which].data[elem] += FD_STEP;
        let mut minus = base.clone();
        minus[which].data[elem] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let analytic = grads.get(vars[which]).unwrap().data()[elem] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

fn rnd(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Every layer type used by the denoisers, plus a random two-layer network.
pub fn layer_cases(rng: &mut Rng) -> Vec<LayerCase> {
    let mut cases = Vec::new();

    cases.push(LayerCase {
        name: "linear",
        inputs: vec![rnd(&[3, 5], rng), rnd(&[4, 5], rng), rnd(&[4], rng)],
        trainable: vec![0, 1, 2],
        tape_fn: Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        ref_fn: Box::new(|a| ref_linear(&a[0], &a[1], &a[2])),
    });
    for (name, stride) in [("conv2d_stride1", 1usize), ("conv2d_stride2", 2)] {
        cases.push(LayerCase {
            name,
            inputs: vec![
                rnd(&[2, 3, 6, 6], rng),
                rnd(&[4, 3, 3, 3], rng),
                rnd(&[4], rng),
            ],
            trainable: vec![0, 1, 2],
            tape_fn: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap()),
            ref_fn: Box::new(move |a| ref_conv(&a[0], &a[1], &a[2], stride, 1)),
        });
    }
    cases.push(LayerCase {
        name: "film",
        inputs: vec![
            rnd(&[2, 3, 4, 4], rng),
            rnd(&[2, 3], rng),
            rnd(&[2, 3], rng),
        ],
        trainable: vec![0, 1, 2],
        tape_fn: Box::new(|t, v| t.film(v[0], v[1], v[2]).unwrap()),
        ref_fn: Box::new(|a| ref_film(&a[0], &a[1], &a[2])),
    });
    cases.push(LayerCase {
        name: "upsample2x",
        inputs: vec![rnd(&[2, 2, 3, 3], rng)],
        trainable: vec![0],
        tape_fn: Box::new(|t, v| t.upsample2x(v[0]).unwrap()),
        ref_fn: Box::new(|a| ref_upsample(&a[0])),
    });
    cases.push(LayerCase {
        name: "concat_channels",
        inputs: vec![rnd(&[2, 2, 3, 3], rng), rnd(&[2, 3, 3, 3], rng)],
        trainable: vec![0, 1],
        tape_fn: Box::new(|t, v| t.concat_channels(v[0], v[1]).unwrap()),
        ref_fn: Box::new(|a| ref_concat(&a[0], &a[1])),
    });
    cases.push(LayerCase {
        name: "expand_channels",
        inputs: vec![rnd(&[2, 1, 4, 4], rng)],
        trainable: vec![0],
        tape_fn: Box::new(|t, v| t.expand_channels(v[0], 3).unwrap()),
        ref_fn: Box::new(|a| ref_expand(&a[0], 3)),
    });
    cases.push(LayerCase {
        name: "mean_spatial",
        inputs: vec![rnd(&[2, 3, 4, 4], rng)],
        trainable: vec![0],
        tape_fn: Box::new(|t, v| t.mean_spatial(v[0]).unwrap()),
        ref_fn: Box::new(|a| ref_mean_spatial(&a[0])),
    });
    let ids = vec![vec![1, 3], vec![], vec![2, 2, 0]];
    let ids2 = ids.clone();
    cases.push(LayerCase {
        name: "embed_mean",
        inputs: vec![rnd(&[4, 5], rng)],
        trainable: vec![0],
        tape_fn: Box::new(move |t, v| t.embed_mean(v[0], ids.clone()).unwrap()),
        ref_fn: Box::new(move |a| ref_embed_mean(&a[0], &ids2)),
    });
    cases.push(LayerCase {
        name: "silu",
        inputs: vec![rnd(&[3, 7], rng)],
        trainable: vec![0],
        tape_fn: Box::new(|t, v| t.silu(v[0])),
        ref_fn: Box::new(|a| ref_map(&a[0], |x| x * sig(x))),
    });
    cases.push(LayerCase {
        name: "sigmoid",
        inputs: vec![rnd(&[3, 7], rng)],
        trainable: vec![0],
        tape_fn: Box::new(|t, v| t.sigmoid(v[0])),
        ref_fn: Box::new(|a| ref_map(&a[0], sig)),
    });
    cases.push(LayerCase {
        name: "elementwise_add_sub_mul",
        inputs: vec![rnd(&[2, 6], rng), rnd(&[2, 6], rng), rnd(&[2, 6], rng)],
        trainable: vec![0, 1, 2],
        tape_fn: Box::new(|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[2]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let m = t.mul_scalar(m, 0.5);
            t.add_scalar(m, 0.25)
        }),
        ref_fn: Box::new(|a| {
            let s = ref_zip(&a[0], &a[1], |x, y| x + y);
            let d = ref_zip(&s, &a[2], |x, y| x - y);
            let m = ref_zip(&d, &a[1], |x, y| x * y);
            ref_map(&m, |x| 0.5 * x + 0.25)
        }),
    });
    cases.push(LayerCase {
        name: "mse",
        inputs: vec![rnd(&[2, 5], rng), rnd(&[2, 5], rng)],
        trainable: vec![0, 1],
        tape_fn: Box::new(|t, v| t.mse(v[0], v[1]).unwrap()),
        ref_fn: Box::new(|a| Arr {
            shape: vec![1],
            data: vec![ref_mse(&a[0], &a[1])],
        }),
    });
    cases.push(LayerCase {
        name: "two_layer_network",
        inputs: vec![
            rnd(&[4, 6], rng),
            rnd(&[8, 6], rng).scale(0.4),
            rnd(&[8], rng),
            rnd(&[3, 8], rng).scale(0.35),
            rnd(&[3], rng),
            rnd(&[4, 3], rng),
        ],
        trainable: vec![1, 2, 3, 4],
        tape_fn: Box::new(|t, v| {
            let h = t.linear(v[0], v[1], Some(v[2])).unwrap();
            let h = t.silu(h);
            let y = t.linear(h, v[3], Some(v[4])).unwrap();
            t.mse(y, v[5]).unwrap()
        }),
        ref_fn: Box::new(|a| {
            let h = ref_map(&ref_linear(&a[0], &a[1], &a[2]), |x| x * sig(x));
            let y = ref_linear(&h, &a[3], &a[4]);
            Arr {
                shape: vec![1],
                data: vec![ref_mse(&y, &a[5])],
            }
        }),
    });
    cases
}
