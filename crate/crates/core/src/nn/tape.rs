//! Reverse-mode tape over vector-valued nodes. Forward values are computed
//! eagerly as ops are recorded; `backward` walks the tape once and
//! accumulates parameter gradients into the [`ParamStore`].

use super::{NnError, ParamId, ParamStore};

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    ParamVec {
        pid: ParamId,
    },
    EmbedRow {
        pid: ParamId,
        row: usize,
    },
    MatVec {
        pid: ParamId,
        x: Var,
    },
    AddN {
        parts: Vec<Var>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    OneMinus {
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Softmax {
        x: Var,
    },
    Dot {
        a: Var,
        b: Var,
    },
    ScalarsToVec {
        parts: Vec<Var>,
    },
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    /// m(w) = p_vocab(w) + sum_{i: src[i]=w} p_copy[i]
    CopyScatter {
        p_vocab: Var,
        p_copy: Var,
        src: Vec<usize>,
    },
    NormalizeSum {
        x: Var,
    },
    /// Contiguous sub-range `[start, start+len)` of the input vector.
    Slice {
        x: Var,
        start: usize,
    },
    /// [-ln(max(p[target], PROB_FLOOR))]
    Nll {
        p: Var,
        target: usize,
    },
    /// Mean binary cross-entropy from logits against fixed targets.
    BceLogits {
        x: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param_vec(&mut self, ps: &ParamStore, pid: ParamId) -> Var {
        let p = ps.get(pid);
        debug_assert_eq!(p.cols, 1, "param_vec expects a column vector");
        self.push(p.data.clone(), Op::ParamVec { pid })
    }

    pub fn embed_row(&mut self, ps: &ParamStore, pid: ParamId, row: usize) -> Var {
        let p = ps.get(pid);
        let d = p.cols;
        let value = p.data[row * d..(row + 1) * d].to_vec();
        self.push(value, Op::EmbedRow { pid, row })
    }

    pub fn matvec(&mut self, ps: &ParamStore, pid: ParamId, x: Var) -> Var {
        let p = ps.get(pid);
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            p.cols,
            xv.len(),
            "matvec width mismatch for {}: {}x{} * {}",
            p.name,
            p.rows,
            p.cols,
            xv.len()
        );
        let mut y = vec![0.0; p.rows];
        for (r, out) in y.iter_mut().enumerate() {
            let row = &p.data[r * p.cols..(r + 1) * p.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(xv.iter()) {
                acc += w * v;
            }
            *out = acc;
        }
        self.push(y, Op::MatVec { pid, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        let len = self.nodes[parts[0].0].value.len();
        let mut y = vec![0.0; len];
        for p in parts {
            let v = &self.nodes[p.0].value;
            debug_assert_eq!(v.len(), len);
            for (yi, vi) in y.iter_mut().zip(v.iter()) {
                *yi += vi;
            }
        }
        self.push(
            y,
            Op::AddN {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(y, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(y, Op::Sigmoid { x })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(x, y)| x * y)
            .collect();
        self.push(y, Op::Mul { a, b })
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| 1.0 - v).collect();
        self.push(y, Op::OneMinus { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| c * v).collect();
        self.push(y, Op::Scale { x, c })
    }

    /// Log-sum-exp-stable softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let y: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        self.push(y, Op::Softmax { x })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "dot width mismatch");
        let y = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        self.push(vec![y], Op::Dot { a, b })
    }

    pub fn scalars_to_vec(&mut self, parts: &[Var]) -> Var {
        let y: Vec<f64> = parts.iter().map(|p| self.scalar(*p)).collect();
        self.push(
            y,
            Op::ScalarsToVec {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        let wv = self.nodes[weights.0].value.clone();
        assert_eq!(wv.len(), items.len(), "weighted_sum arity mismatch");
        let d = self.nodes[items[0].0].value.len();
        let mut y = vec![0.0; d];
        for (w, it) in wv.iter().zip(items.iter()) {
            for (yi, vi) in y.iter_mut().zip(self.nodes[it.0].value.iter()) {
                *yi += w * vi;
            }
        }
        self.push(
            y,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        )
    }

    /// Merged copy mass: vocab distribution plus copy mass scattered onto the
    /// source token ids. Not normalized; see [`Tape::normalize_sum`].
    pub fn copy_scatter(&mut self, p_vocab: Var, p_copy: Var, src: &[usize]) -> Var {
        let mut y = self.nodes[p_vocab.0].value.clone();
        let pc = &self.nodes[p_copy.0].value;
        assert_eq!(pc.len(), src.len(), "copy source arity mismatch");
        for (i, &w) in src.iter().enumerate() {
            y[w] += pc[i];
        }
        self.push(
            y,
            Op::CopyScatter {
                p_vocab,
                p_copy,
                src: src.to_vec(),
            },
        )
    }

    /// Contiguous sub-range `[start, end)` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.nodes[x.0].value[start..end].to_vec();
        self.push(y, Op::Slice { x, start })
    }

    pub fn normalize_sum(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sum: f64 = xv.iter().sum();
        let y: Vec<f64> = xv.iter().map(|v| v / sum).collect();
        self.push(y, Op::NormalizeSum { x })
    }

    /// Mean over coordinates of the stable form
    /// `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_logits(&mut self, x: Var, targets: &[f64]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), targets.len(), "bce target arity mismatch");
        let n = xv.len() as f64;
        let loss = xv
            .iter()
            .zip(targets.iter())
            .map(|(xi, yi)| xi.max(0.0) - xi * yi + (-xi.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(
            vec![loss],
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn nll(&mut self, p: Var, target: usize) -> Var {
        let pt = self.nodes[p.0].value[target].max(PROB_FLOOR);
        self.push(vec![-pt.ln()], Op::Nll { p, target })
    }

    /// Reverse pass from a scalar loss node. Parameter gradients accumulate
    /// into the store (they are not cleared here).
    pub fn backward(&self, loss: Var, ps: &mut ParamStore) -> Result<(), NnError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::WidthMismatch("loss must be scalar".into()));
        }
        if !lv[0].is_finite() {
            return Err(NnError::NonFiniteLoss);
        }
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(loss.0 + 1);
        for node in &self.nodes[..=loss.0] {
            grads.push(vec![0.0; node.value.len()]);
        }
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if grads[i].iter().all(|g| *g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Input => {}
                Op::ParamVec { pid } => {
                    let p = ps.get_mut(*pid);
                    for (pg, gi) in p.grad.iter_mut().zip(g.iter()) {
                        *pg += gi;
                    }
                }
                Op::EmbedRow { pid, row } => {
                    let p = ps.get_mut(*pid);
                    let d = p.cols;
                    for (c, gi) in g.iter().enumerate() {
                        p.grad[row * d + c] += gi;
                    }
                }
                Op::MatVec { pid, x } => {
                    let xv = self.nodes[x.0].value.clone();
                    {
                        let p = ps.get_mut(*pid);
                        for (r, gr) in g.iter().enumerate() {
                            if *gr == 0.0 {
                                continue;
                            }
                            let row = &mut p.grad[r * p.cols..(r + 1) * p.cols];
                            for (pg, xi) in row.iter_mut().zip(xv.iter()) {
                                *pg += gr * xi;
                            }
                        }
                    }
                    let p = ps.get(*pid);
                    let gx = &mut grads[x.0];
                    for (r, gr) in g.iter().enumerate() {
                        if *gr == 0.0 {
                            continue;
                        }
                        let row = &p.data[r * p.cols..(r + 1) * p.cols];
                        for (gxi, w) in gx.iter_mut().zip(row.iter()) {
                            *gxi += gr * w;
                        }
                    }
                }
                Op::AddN { parts } => {
                    for p in parts {
                        for (gp, gi) in grads[p.0].iter_mut().zip(g.iter()) {
                            *gp += gi;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for (gp, gi) in grads[p.0].iter_mut().zip(g[off..off + len].iter()) {
                            *gp += gi;
                        }
                        off += len;
                    }
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[i].value;
                    for ((gx, gi), yi) in grads[x.0].iter_mut().zip(g.iter()).zip(y.iter()) {
                        *gx += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    for ((gx, gi), yi) in grads[x.0].iter_mut().zip(g.iter()).zip(y.iter()) {
                        *gx += gi * yi * (1.0 - yi);
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for ((ga, gi), bi) in grads[a.0].iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *ga += gi * bi;
                    }
                    for ((gb, gi), ai) in grads[b.0].iter_mut().zip(g.iter()).zip(av.iter()) {
                        *gb += gi * ai;
                    }
                }
                Op::OneMinus { x } => {
                    for (gx, gi) in grads[x.0].iter_mut().zip(g.iter()) {
                        *gx -= gi;
                    }
                }
                Op::Scale { x, c } => {
                    for (gx, gi) in grads[x.0].iter_mut().zip(g.iter()) {
                        *gx += c * gi;
                    }
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[i].value;
                    let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    for ((gx, gi), yi) in grads[x.0].iter_mut().zip(g.iter()).zip(y.iter()) {
                        *gx += yi * (gi - dot);
                    }
                }
                Op::Dot { a, b } => {
                    let gi = g[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (ga, bi) in grads[a.0].iter_mut().zip(bv.iter()) {
                        *ga += gi * bi;
                    }
                    for (gb, ai) in grads[b.0].iter_mut().zip(av.iter()) {
                        *gb += gi * ai;
                    }
                }
                Op::ScalarsToVec { parts } => {
                    for (p, gi) in parts.iter().zip(g.iter()) {
                        grads[p.0][0] += gi;
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.nodes[weights.0].value.clone();
                    for (k, it) in items.iter().enumerate() {
                        let iv = self.nodes[it.0].value.clone();
                        // d/dw_k = g . item_k
                        grads[weights.0][k] +=
                            g.iter().zip(iv.iter()).map(|(gi, vi)| gi * vi).sum::<f64>();
                        for (gv, gi) in grads[it.0].iter_mut().zip(g.iter()) {
                            *gv += wv[k] * gi;
                        }
                    }
                }
                Op::CopyScatter {
                    p_vocab,
                    p_copy,
                    src,
                } => {
                    for (gv, gi) in grads[p_vocab.0].iter_mut().zip(g.iter()) {
                        *gv += gi;
                    }
                    for (idx, &w) in src.iter().enumerate() {
                        grads[p_copy.0][idx] += g[w];
                    }
                }
                Op::Slice { x, start } => {
                    for (j, gi) in g.iter().enumerate() {
                        grads[x.0][start + j] += gi;
                    }
                }
                Op::NormalizeSum { x } => {
                    let xv = &self.nodes[x.0].value;
                    let sum: f64 = xv.iter().sum();
                    let y = &self.nodes[i].value;
                    let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    for (gx, gi) in grads[x.0].iter_mut().zip(g.iter()) {
                        *gx += (gi - dot) / sum;
                    }
                }
                Op::Nll { p, target } => {
                    let pt = self.nodes[p.0].value[*target];
                    if pt > PROB_FLOOR {
                        grads[p.0][*target] += -g[0] / pt;
                    }
                }
                Op::BceLogits { x, targets } => {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.len() as f64;
                    for ((gx, xi), yi) in grads[x.0].iter_mut().zip(xv.iter()).zip(targets.iter()) {
                        let sig = 1.0 / (1.0 + (-xi).exp());
                        *gx += g[0] * (sig - yi) / n;
                    }
                }
            }
        }
        Ok(())
    }
}
