//! Central finite-difference checks of tape gradients.
//!
//! Each case pairs a tape expression with a plain f64 re-implementation of
//! its forward pass. The loss is `sum(w * op(inputs))` with random `w`, so
//! a single backward pass exercises the whole vector-Jacobian product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikecast::autograd::{BnLayout, GradError, Tape, Tensor, Var};

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, GradError>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Instance {
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub reference: Reference,
}

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Instance,
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn inst(
    shapes: Vec<Vec<usize>>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, GradError> + 'static,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
) -> Instance {
    Instance {
        shapes,
        build: Box::new(build),
        reference: Box::new(reference),
    }
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = i % shape[d];
        i /= shape[d];
    }
    idx
}

fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k)
                .map(|p| a[i * k + p] * if trans_b { b[j * k + p] } else { b[p * n + j] })
                .sum();
        }
    }
    c
}

fn axis_reduce(x: &[f64], shape: &[usize], axis: usize, mean: bool) -> Vec<f64> {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let n = shape[axis];
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                out[o * inner + i] += x[(o * n + j) * inner + i];
            }
        }
    }
    if mean {
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    out
}

fn permute_ref(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st = strides(shape);
    (0..x.len())
        .map(|i| {
            let idx = unravel(i, &out_shape);
            x[idx.iter().zip(perm).map(|(&v, &p)| v * st[p]).sum::<usize>()]
        })
        .collect()
}

fn slice_ref(x: &[f64], shape: &[usize], axis: usize, start: usize, take: usize) -> Vec<f64> {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let n = shape[axis];
    let mut out = Vec::new();
    for o in 0..outer {
        out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + take) * inner]);
    }
    out
}

fn conv_ref(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, ci: usize, t: usize, co: usize, k: usize, d: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * co * t];
    for s in 0..n {
        for o in 0..co {
            for tt in 0..t {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for i in 0..ci {
                    for j in 0..k {
                        let back = (k - 1 - j) * d;
                        if tt >= back {
                            acc += w[(o * ci + i) * k + j] * x[(s * ci + i) * t + tt - back];
                        }
                    }
                }
                y[(s * co + o) * t + tt] = acc;
            }
        }
    }
    y
}

fn bn_ref(x: &[f64], g: &[f64], b: &[f64], l: BnLayout, stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let m = (l.outer * l.inner) as f64;
    let idx = |o: usize, c: usize, i: usize| (o * l.features + c) * l.inner + i;
    let mut y = vec![0.0; x.len()];
    for c in 0..l.features {
        let (mean, var) = match stats {
            Some((mu, v)) => (mu[c], v[c]),
            None => {
                let mut s = 0.0;
                for o in 0..l.outer {
                    for i in 0..l.inner {
                        s += x[idx(o, c, i)];
                    }
                }
                let mu = s / m;
                let mut q = 0.0;
                for o in 0..l.outer {
                    for i in 0..l.inner {
                        q += (x[idx(o, c, i)] - mu).powi(2);
                    }
                }
                (mu, q / m)
            }
        };
        for o in 0..l.outer {
            for i in 0..l.inner {
                let k = idx(o, c, i);
                y[k] = g[c] * (x[k] - mean) / (var + eps).sqrt() + b[c];
            }
        }
    }
    y
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            make: |r| {
                let s = vec![dim(r), dim(r)];
                inst(vec![s.clone(), s], |t, v| t.add(v[0], v[1]), |x| zip2(&x[0], &x[1], |a, b| a + b))
            },
        },
        OpCase {
            name: "sub",
            make: |r| {
                let s = vec![dim(r), dim(r)];
                inst(vec![s.clone(), s], |t, v| t.sub(v[0], v[1]), |x| zip2(&x[0], &x[1], |a, b| a - b))
            },
        },
        OpCase {
            name: "mul",
            make: |r| {
                let s = vec![dim(r), dim(r)];
                inst(vec![s.clone(), s], |t, v| t.mul(v[0], v[1]), |x| zip2(&x[0], &x[1], |a, b| a * b))
            },
        },
        OpCase {
            name: "square",
            make: |r| inst(vec![vec![dim(r) * 2]], |t, v| t.square(v[0]), |x| x[0].iter().map(|a| a * a).collect()),
        },
        OpCase {
            name: "scale",
            make: |r| {
                let c: f32 = r.random_range(-2.0..2.0);
                inst(vec![vec![dim(r), 3]], move |t, v| t.scale(v[0], c), move |x| {
                    x[0].iter().map(|a| a * c as f64).collect()
                })
            },
        },
        OpCase {
            name: "add_scalar",
            make: |r| {
                let c: f32 = r.random_range(-2.0..2.0);
                inst(vec![vec![dim(r)]], move |t, v| t.add_scalar(v[0], c), move |x| {
                    x[0].iter().map(|a| a + c as f64).collect()
                })
            },
        },
        OpCase {
            name: "one_minus",
            make: |r| inst(vec![vec![dim(r), 2]], |t, v| t.one_minus(v[0]), |x| x[0].iter().map(|a| 1.0 - a).collect()),
        },
        OpCase {
            name: "add_bias",
            make: |r| {
                let n = dim(r);
                inst(vec![vec![dim(r), dim(r), n], vec![n]], |t, v| t.add_bias(v[0], v[1]), move |x| {
                    x[0].iter().enumerate().map(|(i, a)| a + x[1][i % n]).collect()
                })
            },
        },
        OpCase {
            name: "matmul",
            make: |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                inst(vec![vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1]), move |x| {
                    matmul_ref(&x[0], &x[1], m, k, n, false)
                })
            },
        },
        OpCase {
            name: "bmm",
            make: |r| {
                let (g, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
                let tb = r.random_bool(0.5);
                let sb = if tb { vec![g, n, k] } else { vec![g, k, n] };
                inst(vec![vec![g, m, k], sb], move |t, v| t.bmm(v[0], v[1], tb), move |x| {
                    (0..g)
                        .flat_map(|gi| {
                            matmul_ref(&x[0][gi * m * k..(gi + 1) * m * k], &x[1][gi * k * n..(gi + 1) * k * n], m, k, n, tb)
                        })
                        .collect()
                })
            },
        },
        OpCase {
            name: "affine",
            make: |r| {
                let (rows, di, dout) = (dim(r), dim(r), dim(r));
                let bias = r.random_bool(0.5);
                let mut shapes = vec![vec![2, rows, di], vec![di, dout]];
                if bias {
                    shapes.push(vec![dout]);
                }
                inst(
                    shapes,
                    move |t, v| t.affine(v[0], v[1], v.get(2).copied()),
                    move |x| {
                        let mut y = matmul_ref(&x[0], &x[1], 2 * rows, di, dout, false);
                        if bias {
                            y.iter_mut().enumerate().for_each(|(i, a)| *a += x[2][i % dout]);
                        }
                        y
                    },
                )
            },
        },
        OpCase {
            name: "conv1d_causal",
            make: |r| {
                let (n, ci, co, k) = (dim(r), dim(r), dim(r), dim(r));
                let t = r.random_range(3..=9);
                let d = r.random_range(1..=3);
                let batched = r.random_bool(0.5);
                let bias = r.random_bool(0.5);
                let n = if batched { n } else { 1 };
                let xs = if batched { vec![n, ci, t] } else { vec![ci, t] };
                let mut shapes = vec![xs, vec![co, ci, k]];
                if bias {
                    shapes.push(vec![co]);
                }
                inst(
                    shapes,
                    move |tp, v| tp.conv1d_causal(v[0], v[1], v.get(2).copied(), d),
                    move |x| conv_ref(&x[0], &x[1], x.get(2).map(|b| b.as_slice()), n, ci, t, co, k, d),
                )
            },
        },
        OpCase {
            name: "batchnorm_train",
            make: |r| {
                let shape = vec![dim(r) + 1, dim(r) + 1, dim(r)];
                let axis = r.random_range(0..3);
                let layout = BnLayout::for_axis(&shape, axis).unwrap();
                let f = shape[axis];
                inst(
                    vec![shape, vec![f], vec![f]],
                    move |t, v| t.batchnorm_train(v[0], v[1], v[2], layout, 1e-5).map(|o| o.0),
                    move |x| bn_ref(&x[0], &x[1], &x[2], layout, None, 1e-5),
                )
            },
        },
        OpCase {
            name: "batchnorm_eval",
            make: |r| {
                let shape = vec![dim(r), dim(r), dim(r)];
                let layout = BnLayout::for_axis(&shape, 1).unwrap();
                let f = shape[1];
                let mean: Vec<f32> = (0..f).map(|_| r.random_range(-1.0..1.0)).collect();
                let var: Vec<f32> = (0..f).map(|_| r.random_range(0.2..2.0)).collect();
                let (m64, v64): (Vec<f64>, Vec<f64>) = (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
                inst(
                    vec![shape, vec![f], vec![f]],
                    move |t, v| t.batchnorm_eval(v[0], v[1], v[2], layout, &mean, &var, 1e-5),
                    move |x| bn_ref(&x[0], &x[1], &x[2], layout, Some((&m64, &v64)), 1e-5 as f32 as f64),
                )
            },
        },
        OpCase {
            name: "sum",
            make: |r| inst(vec![vec![dim(r), dim(r)]], |t, v| t.sum(v[0]), |x| vec![x[0].iter().sum()]),
        },
        OpCase {
            name: "mean",
            make: |r| {
                inst(vec![vec![dim(r), dim(r)]], |t, v| t.mean(v[0]), |x| {
                    vec![x[0].iter().sum::<f64>() / x[0].len() as f64]
                })
            },
        },
        OpCase {
            name: "sum_axis",
            make: |r| {
                let shape = vec![dim(r), dim(r), dim(r)];
                let axis = r.random_range(0..3);
                let s2 = shape.clone();
                inst(vec![shape], move |t, v| t.sum_axis(v[0], axis), move |x| axis_reduce(&x[0], &s2, axis, false))
            },
        },
        OpCase {
            name: "mean_axis",
            make: |r| {
                let shape = vec![dim(r), dim(r), dim(r)];
                let axis = r.random_range(0..3);
                let s2 = shape.clone();
                inst(vec![shape], move |t, v| t.mean_axis(v[0], axis), move |x| axis_reduce(&x[0], &s2, axis, true))
            },
        },
        OpCase {
            name: "reshape",
            make: |r| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                inst(vec![vec![a, b, c]], move |t, v| t.reshape(v[0], &[a * b, c]), |x| x[0].clone())
            },
        },
        OpCase {
            name: "permute",
            make: |r| {
                let shape = vec![dim(r), dim(r), dim(r)];
                let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
                let perm = perms[r.random_range(0..perms.len())];
                let s2 = shape.clone();
                inst(vec![shape], move |t, v| t.permute(v[0], &perm), move |x| permute_ref(&x[0], &s2, &perm))
            },
        },
        OpCase {
            name: "transpose",
            make: |r| {
                let shape = vec![dim(r), dim(r), dim(r)];
                let s2 = shape.clone();
                inst(vec![shape], |t, v| t.transpose(v[0]), move |x| permute_ref(&x[0], &s2, &[0, 2, 1]))
            },
        },
        OpCase {
            name: "concat",
            make: |r| {
                let (a, c) = (dim(r), dim(r));
                let (b1, b2) = (dim(r), dim(r));
                inst(vec![vec![a, b1, c], vec![a, b2, c]], |t, v| t.concat(v, 1), move |x| {
                    (0..a)
                        .flat_map(|o| {
                            let mut row = x[0][o * b1 * c..(o + 1) * b1 * c].to_vec();
                            row.extend_from_slice(&x[1][o * b2 * c..(o + 1) * b2 * c]);
                            row
                        })
                        .collect()
                })
            },
        },
        OpCase {
            name: "stack",
            make: |r| {
                let s = vec![dim(r), dim(r)];
                inst(vec![s.clone(), s.clone(), s], |t, v| t.stack(v), |x| x.concat())
            },
        },
        OpCase {
            name: "slice",
            make: |r| {
                let shape = vec![dim(r), dim(r) + 2, dim(r)];
                let start = r.random_range(0..shape[1] - 1);
                let take = r.random_range(1..=shape[1] - start);
                let s2 = shape.clone();
                inst(vec![shape], move |t, v| t.slice(v[0], 1, start, take), move |x| slice_ref(&x[0], &s2, 1, start, take))
            },
        },
        OpCase {
            name: "select",
            make: |r| {
                let shape = vec![dim(r), dim(r), dim(r)];
                let axis = r.random_range(0..3);
                let i = r.random_range(0..shape[axis]);
                let s2 = shape.clone();
                inst(vec![shape], move |t, v| t.select(v[0], axis, i), move |x| slice_ref(&x[0], &s2, axis, i, 1))
            },
        },
        OpCase {
            name: "lif_reset",
            make: |r| {
                let beta: f32 = r.random_range(0.1..1.0);
                let v_reset: f32 = r.random_range(-0.5..0.5);
                let s = vec![dim(r), dim(r)];
                inst(vec![s.clone(), s], move |t, v| t.lif_reset(v[0], v[1], beta, v_reset), move |x| {
                    zip2(&x[0], &x[1], |u, s| v_reset as f64 * s + (1.0 - s) * beta as f64 * u)
                })
            },
        },
    ]
}

#[derive(Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks one random instance; returns the first mismatching entry.
pub fn check(case: &OpCase, seed: u64) -> Result<(), Mismatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = (case.make)(&mut rng);
    let values: Vec<Vec<f32>> = inst
        .shapes
        .iter()
        .map(|s| (0..numel(s)).map(|_| rng.random_range(-2.0f32..=2.0)).collect())
        .collect();
    let x64: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|&a| a as f64).collect()).collect();
    let out_len = (inst.reference)(&x64).len();
    let w: Vec<f32> = (0..out_len).map(|_| rng.random_range(-1.0f32..=1.0)).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inst
        .shapes
        .iter()
        .zip(&values)
        .map(|(s, v)| tape.leaf(Tensor::new(s.clone(), v.clone()).unwrap(), true).unwrap())
        .collect();
    let y = (inst.build)(&mut tape, &vars).unwrap_or_else(|e| panic!("{}: {e}", case.name));
    assert_eq!(tape.value(y).len(), out_len, "{}: reference length", case.name);
    let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w.clone()).unwrap()).unwrap();
    let prod = tape.mul(y, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let w64: Vec<f64> = w.iter().map(|&a| a as f64).collect();
    let loss_at = |x: &[Vec<f64>]| -> f64 { (inst.reference)(x).iter().zip(&w64).map(|(a, b)| a * b).sum() };
    for (k, var) in vars.iter().enumerate() {
        let g = grads.get(*var).expect("gradient for every input");
        assert_eq!(g.len(), values[k].len(), "{}: gradient shape", case.name);
        for i in 0..g.len() {
            let mut xp = x64.clone();
            xp[k][i] += EPS;
            let mut xm = x64.clone();
            xm[k][i] -= EPS;
            let numeric = (loss_at(&xp) - loss_at(&xm)) / (2.0 * EPS);
            let analytic = g[i] as f64;
            let diff = (analytic - numeric).abs();
            if diff > ABS_TOL && diff > REL_TOL * analytic.abs().max(numeric.abs()) {
                return Err(Mismatch {
                    input: k,
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(())
}
