//! Reverse-mode pass: topological sort over the op graph, then per-op
//! adjoint accumulation into each input's grad buffer.

use std::collections::HashSet;

use super::{mat_mul_nt, mat_mul_tn, Op, Result, Tensor, TensorError};

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Min(a, b)
        | Op::Max(a, b)
        | Op::Matmul(a, b)
        | Op::AddColVec(a, b)
        | Op::MulColVec(a, b)
        | Op::AddRowVec(a, b)
        | Op::MulRowVec(a, b) => vec![a, b],
        Op::Neg(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::LogSigmoid(a)
        | Op::PowScalar(a, _)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::GatherRows(a, _)
        | Op::MaskedFill(a, _)
        | Op::Reshape(a) => vec![a],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().collect(),
    }
}

/// Post-order over the requires-grad subgraph reachable from `root`.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, children_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.inner.requires_grad || visited.contains(&t.inner.id) {
            continue;
        }
        visited.insert(t.inner.id);
        stack.push((t.clone(), true));
        if let Some(op) = &t.inner.op {
            for input in op_inputs(op) {
                if input.inner.requires_grad && !visited.contains(&input.inner.id) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

pub(super) fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.numel()));
    }
    if !loss.inner.requires_grad {
        return Ok(());
    }
    let order = topo_order(loss);
    loss.accumulate_grad(&[1.0]);
    for t in order.iter().rev() {
        let g = match t.grad_ref().clone() {
            Some(g) => g,
            None => continue,
        };
        if let Some(op) = &t.inner.op {
            propagate(op, &t.inner.data, &g);
        }
    }
    Ok(())
}

fn add_into(dst: &Tensor, contrib: Vec<f64>) {
    if dst.inner.requires_grad {
        dst.accumulate_grad(&contrib);
    }
}

fn propagate(op: &Op, out_data: &[f64], g: &[f64]) {
    match op {
        Op::Add(a, b) => {
            add_into(a, g.to_vec());
            add_into(b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(a, g.to_vec());
            add_into(b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            add_into(a, g.iter().zip(b.data()).map(|(gi, bi)| gi * bi).collect());
            add_into(b, g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect());
        }
        Op::Div(a, b) => {
            let ad = a.data();
            let bd = b.data();
            add_into(a, g.iter().zip(bd).map(|(gi, bi)| gi / bi).collect());
            add_into(
                b,
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| -gi * ad[i] / (bd[i] * bd[i]))
                    .collect(),
            );
        }
        Op::Min(a, b) => {
            let ad = a.data();
            let bd = b.data();
            add_into(
                a,
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| if ad[i] <= bd[i] { *gi } else { 0.0 })
                    .collect(),
            );
            add_into(
                b,
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| if bd[i] < ad[i] { *gi } else { 0.0 })
                    .collect(),
            );
        }
        Op::Max(a, b) => {
            let ad = a.data();
            let bd = b.data();
            add_into(
                a,
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| if ad[i] >= bd[i] { *gi } else { 0.0 })
                    .collect(),
            );
            add_into(
                b,
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| if bd[i] > ad[i] { *gi } else { 0.0 })
                    .collect(),
            );
        }
        Op::Neg(a) => add_into(a, g.iter().map(|v| -v).collect()),
        Op::Exp(a) => add_into(a, g.iter().zip(out_data).map(|(gi, oi)| gi * oi).collect()),
        Op::Log(a) => add_into(a, g.iter().zip(a.data()).map(|(gi, ai)| gi / ai).collect()),
        Op::Tanh(a) => add_into(
            a,
            g.iter()
                .zip(out_data)
                .map(|(gi, oi)| gi * (1.0 - oi * oi))
                .collect(),
        ),
        Op::Sigmoid(a) => add_into(
            a,
            g.iter()
                .zip(out_data)
                .map(|(gi, si)| gi * si * (1.0 - si))
                .collect(),
        ),
        Op::LogSigmoid(a) => {
            // d/dx ln(sigmoid(x)) = sigmoid(-x)
            add_into(
                a,
                g.iter()
                    .zip(a.data())
                    .map(|(gi, ai)| gi * super::stable_sigmoid(-ai))
                    .collect(),
            );
        }
        Op::PowScalar(a, e) => add_into(
            a,
            g.iter()
                .zip(a.data())
                .map(|(gi, ai)| gi * e * ai.powf(e - 1.0))
                .collect(),
        ),
        Op::Scale(a, c) => add_into(a, g.iter().map(|gi| gi * c).collect()),
        Op::AddScalar(a) => add_into(a, g.to_vec()),
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.inner.requires_grad {
                add_into(a, mat_mul_nt(g, b.data(), m, n, k));
            }
            if b.inner.requires_grad {
                add_into(b, mat_mul_tn(a.data(), g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            // g has shape [n, m]; scatter back transposed.
            let mut contrib = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    contrib[i * n + j] = g[j * m + i];
                }
            }
            add_into(a, contrib);
        }
        Op::Sum(a) => add_into(a, vec![g[0]; a.numel()]),
        Op::Mean(a) => {
            let n = a.numel().max(1) as f64;
            add_into(a, vec![g[0] / n; a.numel()]);
        }
        Op::SumRows(a) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut contrib = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    contrib[i * n + j] = g[i];
                }
            }
            add_into(a, contrib);
        }
        Op::AddColVec(a, v) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            add_into(a, g.to_vec());
            if v.inner.requires_grad {
                let mut contrib = vec![0.0; m];
                for i in 0..m {
                    contrib[i] = g[i * n..(i + 1) * n].iter().sum();
                }
                add_into(v, contrib);
            }
        }
        Op::MulColVec(a, v) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let vd = v.data();
            if a.inner.requires_grad {
                let mut contrib = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        contrib[i * n + j] = g[i * n + j] * vd[i];
                    }
                }
                add_into(a, contrib);
            }
            if v.inner.requires_grad {
                let ad = a.data();
                let mut contrib = vec![0.0; m];
                for i in 0..m {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * ad[i * n + j];
                    }
                    contrib[i] = s;
                }
                add_into(v, contrib);
            }
        }
        Op::AddRowVec(a, v) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            add_into(a, g.to_vec());
            if v.inner.requires_grad {
                let mut contrib = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        contrib[j] += g[i * n + j];
                    }
                }
                add_into(v, contrib);
            }
        }
        Op::MulRowVec(a, v) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let vd = v.data();
            if a.inner.requires_grad {
                let mut contrib = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        contrib[i * n + j] = g[i * n + j] * vd[j];
                    }
                }
                add_into(a, contrib);
            }
            if v.inner.requires_grad {
                let ad = a.data();
                let mut contrib = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        contrib[j] += g[i * n + j] * ad[i * n + j];
                    }
                }
                add_into(v, contrib);
            }
        }
        Op::ConcatRows(parts) => {
            let n = parts[0].shape()[1];
            let mut row = 0;
            for p in parts {
                let pm = p.shape()[0];
                add_into(p, g[row * n..(row + pm) * n].to_vec());
                row += pm;
            }
        }
        Op::ConcatCols(parts) => {
            let m = parts[0].shape()[0];
            let n: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut off = 0;
            for p in parts {
                let w = p.shape()[1];
                if p.inner.requires_grad {
                    let mut contrib = vec![0.0; m * w];
                    for i in 0..m {
                        contrib[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * n + off..i * n + off + w]);
                    }
                    add_into(p, contrib);
                }
                off += w;
            }
        }
        Op::SliceRows(a, start, len) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut contrib = vec![0.0; m * n];
            contrib[start * n..(start + len) * n].copy_from_slice(g);
            add_into(a, contrib);
        }
        Op::SliceCols(a, start, len) => {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            let mut contrib = vec![0.0; m * n];
            for i in 0..m {
                contrib[i * n + start..i * n + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            add_into(a, contrib);
        }
        Op::GatherRows(a, indices) => {
            let n = a.shape()[1];
            let mut contrib = vec![0.0; a.numel()];
            for (t, &ix) in indices.iter().enumerate() {
                for j in 0..n {
                    contrib[ix * n + j] += g[t * n + j];
                }
            }
            add_into(a, contrib);
        }
        Op::MaskedFill(a, mask) => {
            add_into(
                a,
                g.iter()
                    .zip(mask.iter())
                    .map(|(gi, m)| if *m { 0.0 } else { *gi })
                    .collect(),
            );
        }
        Op::Reshape(a) => add_into(a, g.to_vec()),
    }
}
