//! Reverse pass: walk the tape from a scalar root back to the leaves,
//! accumulating vector-Jacobian products.

use super::{
    bilinear, conv_dims, matmul_forward, reduce_forward, reduce_index_map, reflect_index, BinKind,
    Node, Op, PadMode, RedKind, UnKind,
};
use crate::error::{Error, Result};

/// Compute gradients for every node reachable from `root` that needs them.
/// Returns one slot per node; `None` where no gradient flowed.
pub(crate) fn run_backward(nodes: &[Node], root: usize) -> Result<Vec<Option<Vec<f64>>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[root] = Some(vec![1.0]);

    // Node ids are topologically ordered by construction (an op only refers
    // to earlier ids), so a reverse id sweep visits consumers before
    // producers.
    for id in (0..=root).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        if !nodes[id].needs_grad {
            continue;
        }

        {
            // Borrow-free helper: accumulate `delta` into input `j`'s slot.
            let add_to = |grads: &mut Vec<Option<Vec<f64>>>, j: usize, delta: Vec<f64>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta.iter()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };

            match &nodes[id].op {
                Op::Leaf { .. } => {}

                Op::Binary { kind, a, b } => {
                    let av = &nodes[*a].values;
                    let bv = &nodes[*b].values;
                    let (da, db) = binary_backward(*kind, av, bv, &g)?;
                    add_to(&mut grads, *a, fold_broadcast(da, av.len()));
                    add_to(&mut grads, *b, fold_broadcast(db, bv.len()));
                }

                Op::Unary { kind, a } => {
                    let av = &nodes[*a].values;
                    add_to(&mut grads, *a, unary_backward(*kind, av, &g)?);
                }

                Op::Clamp { a, lo, hi } => {
                    let av = &nodes[*a].values;
                    let da = av
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gi)| if v >= *lo && v <= *hi { gi } else { 0.0 })
                        .collect();
                    add_to(&mut grads, *a, da);
                }

                Op::Select { a, index } => {
                    let mut da = vec![0.0; nodes[*a].values.len()];
                    da[*index] = g[0];
                    add_to(&mut grads, *a, da);
                }

                Op::Reshape { a } => {
                    add_to(&mut grads, *a, g.clone());
                }

                Op::Upsample2x { a } => {
                    let [c, h, w] = match nodes[*a].shape.as_slice() {
                        [c, h, w] => [*c, *h, *w],
                        _ => unreachable!("validated at construction"),
                    };
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut da = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                da[ci * h * w + (y / 2) * w + x / 2] +=
                                    g[ci * oh * ow + y * ow + x];
                            }
                        }
                    }
                    add_to(&mut grads, *a, da);
                }

                Op::StackPair { a, b } => {
                    let n = nodes[*a].values.len();
                    let da = (0..n).map(|i| g[2 * i]).collect();
                    let db = (0..n).map(|i| g[2 * i + 1]).collect();
                    add_to(&mut grads, *a, da);
                    add_to(&mut grads, *b, db);
                }

                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    // dA = g · Bᵀ ; dB = Aᵀ · g
                    let bt = transpose(&nodes[*b].values, k, n);
                    let at = transpose(&nodes[*a].values, m, k);
                    add_to(&mut grads, *a, matmul_forward(&g, &bt, m, n, k));
                    add_to(&mut grads, *b, matmul_forward(&at, &g, k, m, n));
                }

                Op::Conv2d {
                    x,
                    k,
                    stride,
                    pad,
                    mode,
                } => {
                    let d = conv_dims(&nodes[*x].shape, &nodes[*k].shape, *stride, *pad)
                        .expect("validated at construction");
                    let (dx, dk) =
                        conv2d_backward(&nodes[*x].values, &nodes[*k].values, &d, *mode, &g);
                    add_to(&mut grads, *x, dx);
                    add_to(&mut grads, *k, dk);
                }

                Op::Reduce { kind, a, axes } => {
                    let shape = &nodes[*a].shape;
                    let av = &nodes[*a].values;
                    let map = reduce_index_map(shape, axes);
                    let count: usize = axes.iter().map(|&d| shape[d]).product();
                    let da: Vec<f64> = match kind {
                        RedKind::Sum => av.iter().enumerate().map(|(i, _)| g[map[i]]).collect(),
                        RedKind::Mean => {
                            let c = count as f64;
                            av.iter().enumerate().map(|(i, _)| g[map[i]] / c).collect()
                        }
                        RedKind::MaxSmooth { tau } => {
                            // d lse/d x_i = softmax_i = exp((x_i − out)/τ)
                            let out = reduce_forward(*kind, av, shape, axes);
                            av.iter()
                                .enumerate()
                                .map(|(i, &v)| g[map[i]] * ((v - out[map[i]]) / tau).exp())
                                .collect()
                        }
                    };
                    add_to(&mut grads, *a, da);
                }

                Op::GridSample { src, coords } => {
                    let (h, w) = (nodes[*src].shape[0], nodes[*src].shape[1]);
                    let cv = &nodes[*coords].values;
                    let sv = &nodes[*src].values;
                    let n = cv.len() / 2;
                    let mut dsrc = vec![0.0; sv.len()];
                    let mut dcoords = vec![0.0; cv.len()];
                    for i in 0..n {
                        let y = cv[2 * i];
                        let x = cv[2 * i + 1];
                        let gi = g[i];
                        let (_, dy, dx) = bilinear(sv, h, w, y, x);
                        dcoords[2 * i] = gi * dy;
                        dcoords[2 * i + 1] = gi * dx;
                        // Distribute onto the four (clamped) corner taps.
                        let y0f = y.floor();
                        let x0f = x.floor();
                        let fy = y - y0f;
                        let fx = x - x0f;
                        let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
                        let y0 = cl(y0f as isize, h);
                        let y1 = cl(y0f as isize + 1, h);
                        let x0 = cl(x0f as isize, w);
                        let x1 = cl(x0f as isize + 1, w);
                        dsrc[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                        dsrc[y0 * w + x1] += gi * (1.0 - fy) * fx;
                        dsrc[y1 * w + x0] += gi * fy * (1.0 - fx);
                        dsrc[y1 * w + x1] += gi * fy * fx;
                    }
                    add_to(&mut grads, *src, dsrc);
                    add_to(&mut grads, *coords, dcoords);
                }
            }
        }
        // Once a node is processed nothing downstream reads its slot again
        // (consumers come later in id order), so interior gradients can be
        // dropped immediately — halving peak memory on image-sized graphs.
        // Only differentiable leaves and the root keep theirs.
        let keep = id == root || matches!(nodes[id].op, Op::Leaf { differentiable: true });
        if keep {
            grads[id] = Some(g);
        }
    }
    Ok(grads)
}

/// If the forward broadcast a 1-element operand, fold the elementwise
/// gradient back down by summation.
fn fold_broadcast(grad: Vec<f64>, operand_len: usize) -> Vec<f64> {
    if operand_len == 1 && grad.len() != 1 {
        vec![grad.iter().sum()]
    } else {
        grad
    }
}

fn binary_backward(
    kind: BinKind,
    a: &[f64],
    b: &[f64],
    g: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.len().max(b.len());
    let get = |s: &[f64], i: usize| if s.len() == 1 { s[0] } else { s[i] };
    let mut da = vec![0.0; n];
    let mut db = vec![0.0; n];
    for i in 0..n {
        let (av, bv, gi) = (get(a, i), get(b, i), g[i]);
        match kind {
            BinKind::Add => {
                da[i] = gi;
                db[i] = gi;
            }
            BinKind::Sub => {
                da[i] = gi;
                db[i] = -gi;
            }
            BinKind::Mul => {
                da[i] = gi * bv;
                db[i] = gi * av;
            }
            BinKind::Div => {
                da[i] = gi / bv;
                db[i] = -gi * av / (bv * bv);
            }
            BinKind::Pow => {
                // d/da a^b = b·a^(b−1); d/db a^b = a^b·ln a.
                da[i] = gi * bv * av.powf(bv - 1.0);
                db[i] = if av > 0.0 {
                    gi * av.powf(bv) * av.ln()
                } else {
                    // a ≤ 0 with integer exponent: treat exponent as fixed.
                    0.0
                };
                if !da[i].is_finite() || !db[i].is_finite() {
                    return Err(Error::domain(
                        "pow",
                        format!("non-finite gradient at base {av}, exponent {bv}"),
                    ));
                }
            }
        }
    }
    Ok((da, db))
}

fn unary_backward(kind: UnKind, a: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if matches!(kind, UnKind::Sqrt) && a.iter().any(|&v| v == 0.0) {
        return Err(Error::domain(
            "sqrt",
            "gradient undefined at zero".to_string(),
        ));
    }
    Ok(a.iter()
        .zip(g.iter())
        .map(|(&v, &gi)| {
            gi * match kind {
                UnKind::Neg => -1.0,
                UnKind::Exp => v.exp(),
                UnKind::Log => 1.0 / v,
                UnKind::Sqrt => 0.5 / v.sqrt(),
                UnKind::Abs => {
                    if v >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                UnKind::Sigmoid => {
                    let s = super::sigmoid_scalar(v);
                    s * (1.0 - s)
                }
                UnKind::Tanh => {
                    let t = v.tanh();
                    1.0 - t * t
                }
                UnKind::Relu => {
                    if v > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnKind::Square => 2.0 * v,
                UnKind::Sin => v.cos(),
                UnKind::Cos => -v.sin(),
            }
        })
        .collect())
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    d: &super::ConvDims,
    mode: PadMode,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for f in 0..d.f {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let gi = g[f * d.oh * d.ow + oy * d.ow + ox];
                if gi == 0.0 {
                    continue;
                }
                for c in 0..d.c {
                    let xoff = c * d.h * d.w;
                    let koff = (f * d.c + c) * d.kh * d.kw;
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            let (src, inbounds) = match mode {
                                PadMode::Zero => {
                                    if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize
                                    {
                                        (0, false)
                                    } else {
                                        (iy as usize * d.w + ix as usize, true)
                                    }
                                }
                                PadMode::Reflect => (
                                    reflect_index(iy, d.h) * d.w + reflect_index(ix, d.w),
                                    true,
                                ),
                            };
                            if inbounds {
                                dk[koff + ky * d.kw + kx] += gi * x[xoff + src];
                                dx[xoff + src] += gi * k[koff + ky * d.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
