use super::{ArrayId, DiffArray, DiffError};
use crate::scalar::Scalar;

/// Row-normalization result: the normalized array plus the rows that were
/// all-zero and fell back to a uniform distribution.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub id: ArrayId,
    pub fallback_rows: Vec<u32>,
}

/// Pointwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Neg,
    Abs,
    /// 1 / (x + eps); the eps is carried by the op record.
    ReciprocalEps,
    Relu,
}

/// Axis reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Matmul {
        a: ArrayId,
        b: ArrayId,
        out: ArrayId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out = a · bᵀ with a: m×k, b: n×k.
    MatmulNT {
        a: ArrayId,
        b: ArrayId,
        out: ArrayId,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: ArrayId,
        w: ArrayId,
        b: ArrayId,
        out: ArrayId,
        n: usize,
        cin: usize,
        cout: usize,
    },
    SoftmaxRows {
        input: ArrayId,
        out: ArrayId,
        rows: usize,
        cols: usize,
    },
    Unary {
        kind: UnaryKind,
        eps: f64,
        input: ArrayId,
        out: ArrayId,
    },
    Binary {
        kind: BinaryKind,
        bc: Broadcast,
        a: ArrayId,
        b: ArrayId,
        out: ArrayId,
    },
    Scale {
        input: ArrayId,
        factor: f64,
        out: ArrayId,
    },
    Reduce {
        kind: ReduceKind,
        input: ArrayId,
        out: ArrayId,
        outer: usize,
        len: usize,
        inner: usize,
        /// First-maximum positions for max reduction (lowest index wins ties).
        argmax: Vec<u32>,
    },
    GatherRows {
        input: ArrayId,
        out: ArrayId,
        indices: Vec<u32>,
        cols: usize,
    },
    /// out[i] = Σ_j weights[i,j] · values[indices[i·k+j]]
    NeighborWeightedSum {
        values: ArrayId,
        weights: ArrayId,
        out: ArrayId,
        indices: Vec<u32>,
        n: usize,
        k: usize,
        c: usize,
    },
    NormalizeRows {
        input: ArrayId,
        out: ArrayId,
        rows: usize,
        cols: usize,
        fallback: Vec<u32>,
    },
    ConcatCols {
        a: ArrayId,
        b: ArrayId,
        out: ArrayId,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    SliceCols {
        input: ArrayId,
        out: ArrayId,
        rows: usize,
        cols: usize,
        start: usize,
        width: usize,
    },
    Reshape {
        input: ArrayId,
        out: ArrayId,
    },
    CrossEntropy {
        logits: ArrayId,
        out: ArrayId,
        labels: Vec<u32>,
        n: usize,
        classes: usize,
    },
}

/// Single-use record of one forward pass.
///
/// All arrays live in the tape's arena; operations return [`ArrayId`]
/// handles. After [`Tape::backward`] the operation record is cleared and
/// further operations fail with [`DiffError::Consumed`]; values and
/// gradients stay readable.
pub struct Tape<T: Scalar> {
    arrays: Vec<DiffArray<T>>,
    ops: Vec<Op>,
    consumed: bool,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            arrays: Vec::new(),
            ops: Vec::new(),
            consumed: false,
            flops: 0,
        }
    }

    // ── arena ────────────────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> ArrayId {
        let id = ArrayId(self.arrays.len());
        self.arrays.push(DiffArray::new(shape, values, requires_grad));
        id
    }

    fn ensure_active(&self) -> Result<(), DiffError> {
        if self.consumed {
            Err(DiffError::Consumed)
        } else {
            Ok(())
        }
    }

    /// Register a non-differentiable input array (data, constants).
    pub fn input(&mut self, values: Vec<T>, shape: &[usize]) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(DiffError::Invalid {
                op: "input",
                msg: format!("shape {shape:?} does not match {} values", values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values, false))
    }

    /// Register a learnable array. The values are snapshotted; later
    /// mutation of the source does not affect the tape.
    pub fn param(&mut self, values: &[T], shape: &[usize]) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(DiffError::Invalid {
                op: "param",
                msg: format!("shape {shape:?} does not match {} values", values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values.to_vec(), true))
    }

    pub fn array(&self, id: ArrayId) -> &DiffArray<T> {
        &self.arrays[id.0]
    }

    pub fn values(&self, id: ArrayId) -> &[T] {
        self.arrays[id.0].values()
    }

    pub fn shape(&self, id: ArrayId) -> &[usize] {
        self.arrays[id.0].shape()
    }

    pub fn grad(&self, id: ArrayId) -> Option<&[T]> {
        self.arrays[id.0].grad()
    }

    /// Gradient of `id`, zeros if the backward pass never reached it.
    pub fn grad_or_zeros(&self, id: ArrayId) -> Vec<T> {
        match self.arrays[id.0].grad() {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.arrays[id.0].numel()],
        }
    }

    /// Multiply-accumulate count of everything executed on this tape.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn rg(&self, ids: &[ArrayId]) -> bool {
        ids.iter().any(|id| self.arrays[id.0].requires_grad())
    }

    fn record(&mut self, op: Op, requires_grad: bool) {
        if requires_grad {
            self.ops.push(op);
        }
    }

    fn dim2(&self, op: &'static str, id: ArrayId) -> Result<(usize, usize), DiffError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(DiffError::Invalid {
                op,
                msg: format!("expected rank-2 array, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── primitive operations ─────────────────────────────────────────

    /// Matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (m, k) = self.dim2("matmul", a)?;
        let (k2, n) = self.dim2("matmul", b)?;
        if k != k2 {
            return Err(DiffError::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_add(self.values(a), self.values(b), m, k, n, &mut out);
        self.flops += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        let out = self.push(vec![m, n], out, rg);
        self.record(Op::Matmul { a, b, out, m, k, n }, rg);
        Ok(out)
    }

    /// a[m×k] · b[n×k]ᵀ — the QKᵀ pattern.
    pub fn matmul_nt(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (m, k) = self.dim2("matmul_nt", a)?;
        let (n, k2) = self.dim2("matmul_nt", b)?;
        if k != k2 {
            return Err(DiffError::Dimension {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bt = transpose(self.values(b), n, k);
        let mut out = vec![T::zero(); m * n];
        matmul_add(self.values(a), &bt, m, k, n, &mut out);
        self.flops += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        let out = self.push(vec![m, n], out, rg);
        self.record(Op::MatmulNT { a, b, out, m, k, n }, rg);
        Ok(out)
    }

    /// x[n×cin] · w[cin×cout] + b[cout] broadcast over rows.
    pub fn linear(&mut self, x: ArrayId, w: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (n, cin) = self.dim2("linear", x)?;
        let (cin2, cout) = self.dim2("linear", w)?;
        if cin != cin2 {
            return Err(DiffError::Dimension {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [cout] {
            return Err(DiffError::Dimension {
                op: "linear",
                lhs: vec![cout],
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * cout);
        for _ in 0..n {
            out.extend_from_slice(self.values(b));
        }
        matmul_add(self.values(x), self.values(w), n, cin, cout, &mut out);
        self.flops += (n * cin * cout + n * cout) as u64;
        let rg = self.rg(&[x, w, b]);
        let out = self.push(vec![n, cout], out, rg);
        self.record(
            Op::Linear {
                x,
                w,
                b,
                out,
                n,
                cin,
                cout,
            },
            rg,
        );
        Ok(out)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, input: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (rows, cols) = self.dim2("softmax_rows", input)?;
        if cols == 0 {
            return Err(DiffError::Invalid {
                op: "softmax_rows",
                msg: "rows must have at least one column".into(),
            });
        }
        let x = self.values(input);
        let mut out = vec![T::zero(); rows * cols];
        let mut exps = vec![0.0f64; cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for v in row {
                max = max.max(v.acc());
            }
            let mut sum = 0.0f64;
            for (e, v) in exps.iter_mut().zip(row.iter()) {
                *e = (v.acc() - max).exp();
                sum += *e;
            }
            for (o, e) in out[r * cols..(r + 1) * cols].iter_mut().zip(exps.iter()) {
                *o = T::from_acc(*e / sum);
            }
        }
        self.flops += (rows * cols * 3) as u64;
        let rg = self.rg(&[input]);
        let out = self.push(vec![rows, cols], out, rg);
        self.record(
            Op::SoftmaxRows {
                input,
                out,
                rows,
                cols,
            },
            rg,
        );
        Ok(out)
    }

    fn unary(&mut self, kind: UnaryKind, eps: f64, input: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let x = self.values(input);
        let out: Vec<T> = match kind {
            UnaryKind::Exp => x.iter().map(|v| v.exp()).collect(),
            UnaryKind::Neg => x.iter().map(|v| -*v).collect(),
            UnaryKind::Abs => x.iter().map(|v| v.abs()).collect(),
            UnaryKind::ReciprocalEps => x
                .iter()
                .map(|v| T::from_acc(1.0 / (v.acc() + eps)))
                .collect(),
            UnaryKind::Relu => x.iter().map(|v| v.max(T::zero())).collect(),
        };
        self.flops += out.len() as u64;
        let rg = self.rg(&[input]);
        let shape = self.shape(input).to_vec();
        let out = self.push(shape, out, rg);
        self.record(
            Op::Unary {
                kind,
                eps,
                input,
                out,
            },
            rg,
        );
        Ok(out)
    }

    pub fn exp(&mut self, input: ArrayId) -> Result<ArrayId, DiffError> {
        self.unary(UnaryKind::Exp, 0.0, input)
    }

    pub fn neg(&mut self, input: ArrayId) -> Result<ArrayId, DiffError> {
        self.unary(UnaryKind::Neg, 0.0, input)
    }

    pub fn abs(&mut self, input: ArrayId) -> Result<ArrayId, DiffError> {
        self.unary(UnaryKind::Abs, 0.0, input)
    }

    /// 1 / (x + eps) — the singular-distance guard.
    pub fn reciprocal_eps(&mut self, input: ArrayId, eps: f64) -> Result<ArrayId, DiffError> {
        self.unary(UnaryKind::ReciprocalEps, eps, input)
    }

    pub fn relu(&mut self, input: ArrayId) -> Result<ArrayId, DiffError> {
        self.unary(UnaryKind::Relu, 0.0, input)
    }

    fn binary(&mut self, kind: BinaryKind, a: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (na, nb) = (self.arrays[a.0].numel(), self.arrays[b.0].numel());
        let bc = if self.shape(a) == self.shape(b) {
            Broadcast::None
        } else if na == 1 {
            Broadcast::LeftScalar
        } else if nb == 1 {
            Broadcast::RightScalar
        } else {
            return Err(DiffError::Dimension {
                op: match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Mul => "mul",
                },
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        };
        let (xs, ys) = (self.values(a), self.values(b));
        let apply = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<T> = match bc {
            Broadcast::None => xs.iter().zip(ys.iter()).map(|(x, y)| apply(*x, *y)).collect(),
            Broadcast::LeftScalar => ys.iter().map(|y| apply(xs[0], *y)).collect(),
            Broadcast::RightScalar => xs.iter().map(|x| apply(*x, ys[0])).collect(),
        };
        self.flops += out.len() as u64;
        let shape = if na == 1 && bc == Broadcast::LeftScalar {
            self.shape(b).to_vec()
        } else {
            self.shape(a).to_vec()
        };
        let rg = self.rg(&[a, b]);
        let out = self.push(shape, out, rg);
        self.record(Op::Binary { kind, bc, a, b, out }, rg);
        Ok(out)
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    /// Hadamard product; one side may be a scalar.
    pub fn mul(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, input: ArrayId, factor: f64) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let out: Vec<T> = self
            .values(input)
            .iter()
            .map(|v| T::from_acc(v.acc() * factor))
            .collect();
        self.flops += out.len() as u64;
        let rg = self.rg(&[input]);
        let shape = self.shape(input).to_vec();
        let out = self.push(shape, out, rg);
        self.record(Op::Scale { input, factor, out }, rg);
        Ok(out)
    }

    /// Reduce along one axis; the axis disappears from the shape.
    /// Max routes its gradient to the first maximal element.
    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        input: ArrayId,
        axis: usize,
    ) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.values(input);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for j in 0..inner {
                        let mut acc = 0.0f64;
                        for i in 0..len {
                            acc += x[(o * len + i) * inner + j].acc();
                        }
                        if kind == ReduceKind::Mean {
                            acc /= len as f64;
                        }
                        out[o * inner + j] = T::from_acc(acc);
                    }
                }
            }
            ReduceKind::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let mut best = x[o * len * inner + j];
                        let mut best_i = 0u32;
                        for i in 1..len {
                            let v = x[(o * len + i) * inner + j];
                            if v > best {
                                best = v;
                                best_i = i as u32;
                            }
                        }
                        out[o * inner + j] = best;
                        argmax[o * inner + j] = best_i;
                    }
                }
            }
        }
        self.flops += (outer * len * inner) as u64;
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[input]);
        let out = self.push(out_shape, out, rg);
        self.record(
            Op::Reduce {
                kind,
                input,
                out,
                outer,
                len,
                inner,
                argmax,
            },
            rg,
        );
        Ok(out)
    }

    /// Select rows of a rank-2 array by index (repetition allowed).
    pub fn gather_rows(&mut self, input: ArrayId, indices: &[u32]) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (rows, cols) = self.dim2("gather_rows", input)?;
        for &i in indices {
            if i as usize >= rows {
                return Err(DiffError::RowIndex {
                    op: "gather_rows",
                    index: i as usize,
                    bound: rows,
                });
            }
        }
        let x = self.values(input);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&x[i as usize * cols..(i as usize + 1) * cols]);
        }
        self.flops += out.len() as u64;
        let rg = self.rg(&[input]);
        let out = self.push(vec![indices.len(), cols], out, rg);
        self.record(
            Op::GatherRows {
                input,
                out,
                indices: indices.to_vec(),
                cols,
            },
            rg,
        );
        Ok(out)
    }

    /// out[i] = Σ_j weights[i,j] · values[indices[i·k + j]] — the neighbor
    /// aggregation shared by the local block and decoder interpolation.
    pub fn neighbor_weighted_sum(
        &mut self,
        values: ArrayId,
        weights: ArrayId,
        indices: &[u32],
    ) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (src_rows, c) = self.dim2("neighbor_weighted_sum", values)?;
        let (n, k) = self.dim2("neighbor_weighted_sum", weights)?;
        if indices.len() != n * k {
            return Err(DiffError::Invalid {
                op: "neighbor_weighted_sum",
                msg: format!("expected {} indices, got {}", n * k, indices.len()),
            });
        }
        for &i in indices {
            if i as usize >= src_rows {
                return Err(DiffError::RowIndex {
                    op: "neighbor_weighted_sum",
                    index: i as usize,
                    bound: src_rows,
                });
            }
        }
        let v = self.values(values);
        let w = self.values(weights);
        let mut out = vec![T::zero(); n * c];
        let mut acc = vec![0.0f64; c];
        for i in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..k {
                let wij = w[i * k + j].acc();
                let row = &v[indices[i * k + j] as usize * c..][..c];
                for (a, x) in acc.iter_mut().zip(row.iter()) {
                    *a += wij * x.acc();
                }
            }
            for (o, a) in out[i * c..(i + 1) * c].iter_mut().zip(acc.iter()) {
                *o = T::from_acc(*a);
            }
        }
        self.flops += (n * k * c) as u64;
        let rg = self.rg(&[values, weights]);
        let out = self.push(vec![n, c], out, rg);
        self.record(
            Op::NeighborWeightedSum {
                values,
                weights,
                out,
                indices: indices.to_vec(),
                n,
                k,
                c,
            },
            rg,
        );
        Ok(out)
    }

    /// Divide each row by its sum. All-zero rows fall back to the uniform
    /// distribution 1/cols and are reported (they receive no gradient).
    pub fn normalize_rows(&mut self, input: ArrayId) -> Result<Normalized, DiffError> {
        self.ensure_active()?;
        let (rows, cols) = self.dim2("normalize_rows", input)?;
        let x = self.values(input);
        let mut out = vec![T::zero(); rows * cols];
        let mut fallback = Vec::new();
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut s = 0.0f64;
            for v in row {
                s += v.acc();
            }
            if s == 0.0 {
                fallback.push(r as u32);
                let u = T::from_acc(1.0 / cols as f64);
                out[r * cols..(r + 1) * cols].fill(u);
            } else {
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                    *o = T::from_acc(v.acc() / s);
                }
            }
        }
        self.flops += (rows * cols * 2) as u64;
        let rg = self.rg(&[input]);
        let out = self.push(vec![rows, cols], out, rg);
        self.record(
            Op::NormalizeRows {
                input,
                out,
                rows,
                cols,
                fallback: fallback.clone(),
            },
            rg,
        );
        Ok(Normalized {
            id: out,
            fallback_rows: fallback,
        })
    }

    /// Concatenate two rank-2 arrays along columns.
    pub fn concat_cols(&mut self, a: ArrayId, b: ArrayId) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (ra, ca) = self.dim2("concat_cols", a)?;
        let (rb, cb) = self.dim2("concat_cols", b)?;
        if ra != rb {
            return Err(DiffError::Dimension {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (xs, ys) = (self.values(a), self.values(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&xs[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&ys[r * cb..(r + 1) * cb]);
        }
        self.flops += out.len() as u64;
        let rg = self.rg(&[a, b]);
        let out = self.push(vec![ra, ca + cb], out, rg);
        self.record(
            Op::ConcatCols {
                a,
                b,
                out,
                rows: ra,
                ca,
                cb,
            },
            rg,
        );
        Ok(out)
    }

    /// Extract a contiguous column band — the per-head channel split.
    pub fn slice_cols(
        &mut self,
        input: ArrayId,
        start: usize,
        width: usize,
    ) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (rows, cols) = self.dim2("slice_cols", input)?;
        if start + width > cols || width == 0 {
            return Err(DiffError::Invalid {
                op: "slice_cols",
                msg: format!("band {start}..{} out of range for {cols} columns", start + width),
            });
        }
        let x = self.values(input);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
        }
        self.flops += out.len() as u64;
        let rg = self.rg(&[input]);
        let out = self.push(vec![rows, width], out, rg);
        self.record(
            Op::SliceCols {
                input,
                out,
                rows,
                cols,
                start,
                width,
            },
            rg,
        );
        Ok(out)
    }

    /// Reinterpret the shape; element count must match.
    pub fn reshape(&mut self, input: ArrayId, shape: &[usize]) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        if shape.iter().product::<usize>() != self.arrays[input.0].numel() {
            return Err(DiffError::Dimension {
                op: "reshape",
                lhs: self.shape(input).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.values(input).to_vec();
        let rg = self.rg(&[input]);
        let out = self.push(shape.to_vec(), values, rg);
        self.record(Op::Reshape { input, out }, rg);
        Ok(out)
    }

    /// Mean over rows of −log softmax(logits)[label], stabilized.
    pub fn cross_entropy(&mut self, logits: ArrayId, labels: &[u32]) -> Result<ArrayId, DiffError> {
        self.ensure_active()?;
        let (n, classes) = self.dim2("cross_entropy", logits)?;
        if labels.len() != n {
            return Err(DiffError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        for &l in labels {
            if l as usize >= classes {
                return Err(DiffError::Label { label: l, classes });
            }
        }
        let x = self.values(logits);
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let mut max = f64::NEG_INFINITY;
            for v in row {
                max = max.max(v.acc());
            }
            let mut sum = 0.0f64;
            for v in row {
                sum += (v.acc() - max).exp();
            }
            total += max + sum.ln() - row[label as usize].acc();
        }
        self.flops += (n * classes * 2) as u64;
        let loss = total / n as f64;
        let rg = self.rg(&[logits]);
        let out = self.push(vec![], vec![T::from_acc(loss)], rg);
        self.record(
            Op::CrossEntropy {
                logits,
                out,
                labels: labels.to_vec(),
                n,
                classes,
            },
            rg,
        );
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates gradients of every
    /// requires-grad ancestor, then clears the record; the tape accepts no
    /// further operations.
    pub fn backward(&mut self, root: ArrayId) -> Result<(), DiffError> {
        self.ensure_active()?;
        let arr = &self.arrays[root.0];
        if arr.numel() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: arr.shape().to_vec(),
            });
        }
        self.consumed = true;
        if arr.requires_grad() {
            self.arrays[root.0].grad_mut()[0] = T::one();
            let ops = std::mem::take(&mut self.ops);
            for op in ops.iter().rev() {
                self.backward_op(op);
            }
        } else {
            self.ops.clear();
        }
        Ok(())
    }

    fn take_out_grad(&self, out: ArrayId) -> Option<Vec<T>> {
        self.arrays[out.0].grad().map(|g| g.to_vec())
    }

    fn add_grad(&mut self, id: ArrayId, delta: &[T]) {
        if !self.arrays[id.0].requires_grad() {
            return;
        }
        let g = self.arrays[id.0].grad_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (a, d) in g.iter_mut().zip(delta.iter()) {
            *a += *d;
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let (m, k, n) = (*m, *k, *n);
                if self.arrays[a.0].requires_grad() {
                    // da = g · bᵀ
                    let bt = transpose(self.values(*b), k, n);
                    let mut da = vec![T::zero(); m * k];
                    matmul_add(&g, &bt, m, n, k, &mut da);
                    self.add_grad(*a, &da);
                }
                if self.arrays[b.0].requires_grad() {
                    // db = aᵀ · g
                    let at = transpose(self.values(*a), m, k);
                    let mut db = vec![T::zero(); k * n];
                    matmul_add(&at, &g, k, m, n, &mut db);
                    self.add_grad(*b, &db);
                }
            }
            Op::MatmulNT { a, b, out, m, k, n } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let (m, k, n) = (*m, *k, *n);
                if self.arrays[a.0].requires_grad() {
                    // da = g · b   (m×n · n×k)
                    let mut da = vec![T::zero(); m * k];
                    matmul_add(&g, self.values(*b), m, n, k, &mut da);
                    self.add_grad(*a, &da);
                }
                if self.arrays[b.0].requires_grad() {
                    // db = gᵀ · a  (n×m · m×k)
                    let gt = transpose(&g, m, n);
                    let mut db = vec![T::zero(); n * k];
                    matmul_add(&gt, self.values(*a), n, m, k, &mut db);
                    self.add_grad(*b, &db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                out,
                n,
                cin,
                cout,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let (n, cin, cout) = (*n, *cin, *cout);
                if self.arrays[x.0].requires_grad() {
                    let wt = transpose(self.values(*w), cin, cout);
                    let mut dx = vec![T::zero(); n * cin];
                    matmul_add(&g, &wt, n, cout, cin, &mut dx);
                    self.add_grad(*x, &dx);
                }
                if self.arrays[w.0].requires_grad() {
                    let xt = transpose(self.values(*x), n, cin);
                    let mut dw = vec![T::zero(); cin * cout];
                    matmul_add(&xt, &g, cin, n, cout, &mut dw);
                    self.add_grad(*w, &dw);
                }
                if self.arrays[b.0].requires_grad() {
                    let mut db = vec![T::zero(); cout];
                    for r in 0..n {
                        for (d, gv) in db.iter_mut().zip(g[r * cout..(r + 1) * cout].iter()) {
                            *d += *gv;
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::SoftmaxRows {
                input,
                out,
                rows,
                cols,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let y = self.values(*out).to_vec();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let mut dot = 0.0f64;
                    for c in 0..*cols {
                        dot += g[base + c].acc() * y[base + c].acc();
                    }
                    for c in 0..*cols {
                        dx[base + c] =
                            T::from_acc(y[base + c].acc() * (g[base + c].acc() - dot));
                    }
                }
                self.add_grad(*input, &dx);
            }
            Op::Unary {
                kind,
                eps,
                input,
                out,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let dx: Vec<T> = match kind {
                    UnaryKind::Exp => {
                        let y = self.values(*out);
                        g.iter().zip(y.iter()).map(|(gv, yv)| *gv * *yv).collect()
                    }
                    UnaryKind::Neg => g.iter().map(|gv| -*gv).collect(),
                    UnaryKind::Abs => {
                        let x = self.values(*input);
                        g.iter()
                            .zip(x.iter())
                            .map(|(gv, xv)| {
                                if *xv > T::zero() {
                                    *gv
                                } else if *xv < T::zero() {
                                    -*gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect()
                    }
                    UnaryKind::ReciprocalEps => {
                        let x = self.values(*input);
                        g.iter()
                            .zip(x.iter())
                            .map(|(gv, xv)| {
                                let d = xv.acc() + eps;
                                T::from_acc(-gv.acc() / (d * d))
                            })
                            .collect()
                    }
                    UnaryKind::Relu => {
                        let x = self.values(*input);
                        g.iter()
                            .zip(x.iter())
                            .map(|(gv, xv)| if *xv > T::zero() { *gv } else { T::zero() })
                            .collect()
                    }
                };
                self.add_grad(*input, &dx);
            }
            Op::Binary { kind, bc, a, b, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                match kind {
                    BinaryKind::Add => {
                        self.accumulate_broadcast(*a, &g, *bc == Broadcast::LeftScalar);
                        self.accumulate_broadcast(*b, &g, *bc == Broadcast::RightScalar);
                    }
                    BinaryKind::Mul => {
                        if self.arrays[a.0].requires_grad() {
                            let bv = self.values(*b);
                            let da: Vec<T> = match bc {
                                Broadcast::RightScalar => {
                                    g.iter().map(|gv| *gv * bv[0]).collect()
                                }
                                _ => g.iter().zip(bv.iter()).map(|(gv, y)| *gv * *y).collect(),
                            };
                            self.accumulate_broadcast(*a, &da, *bc == Broadcast::LeftScalar);
                        }
                        if self.arrays[b.0].requires_grad() {
                            let av = self.values(*a);
                            let db: Vec<T> = match bc {
                                Broadcast::LeftScalar => g.iter().map(|gv| *gv * av[0]).collect(),
                                _ => g.iter().zip(av.iter()).map(|(gv, x)| *gv * *x).collect(),
                            };
                            self.accumulate_broadcast(*b, &db, *bc == Broadcast::RightScalar);
                        }
                    }
                }
            }
            Op::Scale { input, factor, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let dx: Vec<T> = g.iter().map(|gv| T::from_acc(gv.acc() * factor)).collect();
                self.add_grad(*input, &dx);
            }
            Op::Reduce {
                kind,
                input,
                out,
                outer,
                len,
                inner,
                argmax,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let mut dx = vec![T::zero(); outer * len * inner];
                match kind {
                    ReduceKind::Sum => {
                        for o in 0..*outer {
                            for i in 0..*len {
                                for j in 0..*inner {
                                    dx[(o * len + i) * inner + j] = g[o * inner + j];
                                }
                            }
                        }
                    }
                    ReduceKind::Mean => {
                        let scale = 1.0 / *len as f64;
                        for o in 0..*outer {
                            for i in 0..*len {
                                for j in 0..*inner {
                                    dx[(o * len + i) * inner + j] =
                                        T::from_acc(g[o * inner + j].acc() * scale);
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        for o in 0..*outer {
                            for j in 0..*inner {
                                let i = argmax[o * inner + j] as usize;
                                dx[(o * len + i) * inner + j] = g[o * inner + j];
                            }
                        }
                    }
                }
                self.add_grad(*input, &dx);
            }
            Op::GatherRows {
                input,
                out,
                indices,
                cols,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let mut dx = vec![T::zero(); self.arrays[input.0].numel()];
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut dx[i as usize * cols..(i as usize + 1) * cols];
                    for (d, gv) in dst.iter_mut().zip(g[r * cols..(r + 1) * cols].iter()) {
                        *d += *gv;
                    }
                }
                self.add_grad(*input, &dx);
            }
            Op::NeighborWeightedSum {
                values,
                weights,
                out,
                indices,
                n,
                k,
                c,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let (n, k, c) = (*n, *k, *c);
                if self.arrays[values.0].requires_grad() {
                    let w = self.values(*weights).to_vec();
                    let mut dv = vec![T::zero(); self.arrays[values.0].numel()];
                    for i in 0..n {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..k {
                            let wij = w[i * k + j];
                            let dst =
                                &mut dv[indices[i * k + j] as usize * c..][..c];
                            for (d, gv) in dst.iter_mut().zip(grow.iter()) {
                                *d += wij * *gv;
                            }
                        }
                    }
                    self.add_grad(*values, &dv);
                }
                if self.arrays[weights.0].requires_grad() {
                    let v = self.values(*values).to_vec();
                    let mut dw = vec![T::zero(); n * k];
                    for i in 0..n {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..k {
                            let row = &v[indices[i * k + j] as usize * c..][..c];
                            let mut acc = 0.0f64;
                            for (gv, x) in grow.iter().zip(row.iter()) {
                                acc += gv.acc() * x.acc();
                            }
                            dw[i * k + j] = T::from_acc(acc);
                        }
                    }
                    self.add_grad(*weights, &dw);
                }
            }
            Op::NormalizeRows {
                input,
                out,
                rows,
                cols,
                fallback,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let x = self.values(*input).to_vec();
                let y = self.values(*out).to_vec();
                let mut dx = vec![T::zero(); rows * cols];
                let mut skip = fallback.iter().copied().peekable();
                for r in 0..*rows {
                    if skip.peek() == Some(&(r as u32)) {
                        skip.next();
                        continue; // uniform fallback row: constant output
                    }
                    let base = r * cols;
                    let mut s = 0.0f64;
                    for v in &x[base..base + cols] {
                        s += v.acc();
                    }
                    let mut dot = 0.0f64;
                    for c in 0..*cols {
                        dot += g[base + c].acc() * y[base + c].acc();
                    }
                    for c in 0..*cols {
                        dx[base + c] = T::from_acc((g[base + c].acc() - dot) / s);
                    }
                }
                self.add_grad(*input, &dx);
            }
            Op::ConcatCols {
                a,
                b,
                out,
                rows,
                ca,
                cb,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let w = ca + cb;
                if self.arrays[a.0].requires_grad() {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..*rows {
                        da.extend_from_slice(&g[r * w..r * w + ca]);
                    }
                    self.add_grad(*a, &da);
                }
                if self.arrays[b.0].requires_grad() {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..*rows {
                        db.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::SliceCols {
                input,
                out,
                rows,
                cols,
                start,
                width,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    dx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.add_grad(*input, &dx);
            }
            Op::Reshape { input, out } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                self.add_grad(*input, &g);
            }
            Op::CrossEntropy {
                logits,
                out,
                labels,
                n,
                classes,
            } => {
                let Some(g) = self.take_out_grad(*out) else { return };
                let scale = g[0].acc() / *n as f64;
                let x = self.values(*logits).to_vec();
                let mut dx = vec![T::zero(); n * classes];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &x[r * classes..(r + 1) * classes];
                    let mut max = f64::NEG_INFINITY;
                    for v in row {
                        max = max.max(v.acc());
                    }
                    let mut sum = 0.0f64;
                    for v in row {
                        sum += (v.acc() - max).exp();
                    }
                    for c in 0..*classes {
                        let p = (row[c].acc() - max).exp() / sum;
                        let ind = if c == label as usize { 1.0 } else { 0.0 };
                        dx[r * classes + c] = T::from_acc((p - ind) * scale);
                    }
                }
                self.add_grad(*logits, &dx);
            }
        }
    }

    /// Accumulate a gradient that may collapse onto a scalar operand.
    fn accumulate_broadcast(&mut self, id: ArrayId, g: &[T], is_scalar: bool) {
        if !self.arrays[id.0].requires_grad() {
            return;
        }
        if is_scalar {
            let mut acc = 0.0f64;
            for gv in g {
                acc += gv.acc();
            }
            self.add_grad(id, &[T::from_acc(acc)]);
        } else {
            self.add_grad(id, g);
        }
    }
}

// ── dense kernels ───────────────────────────────────────────────────

/// dst += a · b with a: m×k, b: k×n. Accumulates each output row in f64.
fn matmul_add<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, dst: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(dst.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for kk in 0..k {
            let aik = a[i * k + kk].acc();
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (x, bv) in acc.iter_mut().zip(brow.iter()) {
                *x += aik * bv.acc();
            }
        }
        let drow = &mut dst[i * n..(i + 1) * n];
        for (d, x) in drow.iter_mut().zip(acc.iter()) {
            *d += T::from_acc(*x);
        }
    }
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
