//! Forward operations and their backward rules.
//!
//! Matmul-family kernels are the hot path of every training loop; they are
//! written as accumulate-into-slice loops that the compiler vectorizes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T  (i.e. rows of g dotted with rows of b)
fn matmul_bt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row.iter()) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn matmul_at_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row.iter()) {
                *o += av * gv;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    /// Elementwise sum of same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(g.iter()) {
                        *o += gv;
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (o, gv) in gb.iter_mut().zip(g.iter()) {
                        *o += gv;
                    }
                });
            }),
        ))
    }

    /// Elementwise difference of same-shape tensors.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "sub",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(g.iter()) {
                        *o += gv;
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (o, gv) in gb.iter_mut().zip(g.iter()) {
                        *o -= gv;
                    }
                });
            }),
        ))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data: Vec<f64> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "mul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                {
                    let bd = pb.data();
                    pa.accumulate_grad(|ga| {
                        for ((o, gv), bv) in ga.iter_mut().zip(g.iter()).zip(bd.iter()) {
                            *o += gv * bv;
                        }
                    });
                }
                let ad = pa.data();
                pb.accumulate_grad(|gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g.iter()).zip(ad.iter()) {
                        *o += gv * av;
                    }
                });
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "scale",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(g.iter()) {
                        *o += c * gv;
                    }
                });
            }),
        )
    }

    /// Add a vector of length D to every row of a [..., D] tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let data: Vec<f64> = {
            let a = self.data();
            let b = bias.data();
            a.iter()
                .enumerate()
                .map(|(i, x)| x + b[i % d])
                .collect()
        };
        let (pa, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "add_bias",
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(g.iter()) {
                        *o += gv;
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
            }),
        ))
    }

    /// Matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || rhs.shape().len() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let mut data = vec![0.0; m * n];
        matmul_acc(&self.data(), &rhs.data(), m, k, n, &mut data);
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            "matmul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                {
                    let bd = pb.data();
                    pa.accumulate_grad(|ga| matmul_bt_acc(g, &bd, m, n, k, ga));
                }
                let ad = pa.data();
                pb.accumulate_grad(|gb| matmul_at_acc(&ad, g, m, k, n, gb));
            }),
        ))
    }

    /// Batched matrix product [l,m,k] x [l,k,n] -> [l,m,n].
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (l, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; l * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..l {
                matmul_acc(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            data,
            vec![l, m, n],
            "bmm",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                {
                    let bd = pb.data();
                    pa.accumulate_grad(|ga| {
                        for i in 0..l {
                            matmul_bt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    });
                }
                let ad = pa.data();
                pb.accumulate_grad(|gb| {
                    for i in 0..l {
                        matmul_at_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }),
        ))
    }

    /// Swap the last two axes of a rank >= 2 tensor.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last2",
                shape: s.to_vec(),
                len: self.numel(),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let l: usize = s[..s.len() - 2].iter().product();
        let mut out_shape = s.to_vec();
        let sl = out_shape.len();
        out_shape.swap(sl - 2, sl - 1);
        let transpose = move |src: &[f64], dst: &mut [f64]| {
            for b in 0..l {
                let so = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        dst[so + j * m + i] = src[so + i * n + j];
                    }
                }
            }
        };
        let mut data = vec![0.0; self.numel()];
        transpose(&self.data(), &mut data);
        let pa = self.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            "transpose_last2",
            vec![self.clone()],
            Box::new(move |g, _| {
                // transposing back swaps m and n
                let mut gt = vec![0.0; g.len()];
                for b in 0..l {
                    let so = b * m * n;
                    for i in 0..n {
                        for j in 0..m {
                            gt[so + j * n + i] = g[so + i * m + j];
                        }
                    }
                }
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(gt.iter()) {
                        *o += gv;
                    }
                });
            }),
        ))
    }

    /// View with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(g.iter()) {
                        *o += gv;
                    }
                });
            }),
        ))
    }

    /// [a,b,c,d] -> [a,c,b,d]; used to regroup attention heads.
    pub fn swap_dims12(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "swap_dims12",
                shape: s.to_vec(),
                len: self.numel(),
            });
        }
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let perm = move |src: &[f64], dst: &mut [f64], b_dim: usize, c_dim: usize| {
            // dst[i, k, j, :] = src[i, j, k, :]
            for i in 0..a {
                for j in 0..b_dim {
                    for k in 0..c_dim {
                        let so = ((i * b_dim + j) * c_dim + k) * d;
                        let po = ((i * c_dim + k) * b_dim + j) * d;
                        dst[po..po + d].copy_from_slice(&src[so..so + d]);
                    }
                }
            }
        };
        let mut data = vec![0.0; self.numel()];
        perm(&self.data(), &mut data, b, c);
        let pa = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![a, c, b, d],
            "swap_dims12",
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gt = vec![0.0; g.len()];
                perm(g, &mut gt, c, b); // inverse is the same swap
                pa.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(gt.iter()) {
                        *o += gv;
                    }
                });
            }),
        ))
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.tanh()).collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "tanh",
            vec![self.clone()],
            Box::new(move |g, out| {
                pa.accumulate_grad(|ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g.iter()).zip(out.iter()) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "gelu",
            vec![self.clone()],
            Box::new(move |g, _| {
                let xd = pa.to_vec();
                pa.accumulate_grad(|ga| {
                    for ((o, gv), &x) in ga.iter_mut().zip(g.iter()).zip(xd.iter()) {
                        let inner = C * (x + A * x * x * x);
                        let t = inner.tanh();
                        let sech2 = 1.0 - t * t;
                        let d_inner = C * (1.0 + 3.0 * A * x * x);
                        *o += gv * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner);
                    }
                });
            }),
        )
    }

    /// Layer normalization over the last axis, with learned gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let mut data = vec![0.0; self.numel()];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    data[r * d + j] = (row[j] - mean) * inv_std * gm[j] + bt[j];
                }
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _| {
                let xd = px.to_vec();
                let gm = pg.to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let g_row = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += g_row[j] * xhat[j];
                        dbeta[j] += g_row[j];
                        dxhat[j] = g_row[j] * gm[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv_std / df
                            * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                px.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(dx.iter()) {
                        *o += gv;
                    }
                });
                pg.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(dgamma.iter()) {
                        *o += gv;
                    }
                });
                pb.accumulate_grad(|ga| {
                    for (o, gv) in ga.iter_mut().zip(dbeta.iter()) {
                        *o += gv;
                    }
                });
            }),
        ))
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_impl(axis, None)
    }

    /// Softmax along `axis` after adding a constant bias (e.g. a large
    /// negative value on masked attention keys). `bias` has the same layout
    /// as the tensor.
    pub fn softmax_with_bias(&self, axis: usize, bias: &[f64]) -> Result<Tensor> {
        if bias.len() != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "softmax_with_bias",
                shape: self.shape().to_vec(),
                len: bias.len(),
            });
        }
        self.softmax_impl(axis, Some(bias))
    }

    fn softmax_impl(&self, axis: usize, bias: Option<&[f64]>) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: s.to_vec(),
            });
        }
        let axis_len = s[axis];
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = vec![0.0; self.numel()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| o * axis_len * inner + a * inner + i;
                    let val = |a: usize| {
                        x[at(a)] + bias.map_or(0.0, |bv| bv[at(a)])
                    };
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..axis_len {
                        max = max.max(val(a));
                    }
                    let mut sum = 0.0;
                    for a in 0..axis_len {
                        let e = (val(a) - max).exp();
                        data[at(a)] = e;
                        sum += e;
                    }
                    for a in 0..axis_len {
                        data[at(a)] /= sum;
                    }
                }
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            data,
            s.to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, out| {
                pa.accumulate_grad(|ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| o * axis_len * inner + a * inner + i;
                            let mut dot = 0.0;
                            for a in 0..axis_len {
                                dot += g[at(a)] * out[at(a)];
                            }
                            for a in 0..axis_len {
                                ga[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Inverted dropout: keep with probability 1 - rate, scale kept values by
    /// 1/(1 - rate). Identity when rate == 0.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
        if rate <= 0.0 {
            return self.clone();
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(x, m)| x * m)
            .collect();
        let pa = self.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            "dropout",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for ((o, gv), m) in ga.iter_mut().zip(g.iter()).zip(mask.iter()) {
                        *o += gv * m;
                    }
                });
            }),
        )
    }

    /// Gather rows of a [V, D] table by index: out[i, :] = table[ids[i], :].
    /// The gradient scatter-adds back into the table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: s.to_vec(),
                len: self.numel(),
            });
        }
        let (v, d) = (s[0], s[1]);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
        }
        let mut data = vec![0.0; ids.len() * d];
        {
            let t = self.data();
            for (i, &id) in ids.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let pa = self.clone();
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), d],
            "gather_rows",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * d..(i + 1) * d];
                        let dst = &mut ga[id * d..(id + 1) * d];
                        for (o, gv) in dst.iter_mut().zip(src.iter()) {
                            *o += gv;
                        }
                    }
                });
            }),
        ))
    }

    /// Pool a [B, N, D] tensor over the sequence axis, restricted to positions
    /// where `mask` (layout [B*N], 1.0 = keep) is set. `mean` divides by the
    /// per-row active count; otherwise positions are summed.
    ///
    /// Errors on a row with no active position.
    pub fn masked_pool_seq(&self, mask: &[f64], mean: bool) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "masked_pool_seq",
                shape: s.to_vec(),
                len: self.numel(),
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if mask.len() != b * n {
            return Err(TensorError::InvalidShape {
                op: "masked_pool_seq",
                shape: vec![b, n],
                len: mask.len(),
            });
        }
        let mut counts = vec![0.0; b];
        for r in 0..b {
            counts[r] = mask[r * n..(r + 1) * n].iter().sum();
            if counts[r] == 0.0 {
                return Err(TensorError::Invalid {
                    op: "masked_pool_seq",
                    msg: format!("row {r} has no active positions"),
                });
            }
        }
        let mut data = vec![0.0; b * d];
        {
            let x = self.data();
            for r in 0..b {
                let denom = if mean { counts[r] } else { 1.0 };
                for t in 0..n {
                    let m = mask[r * n + t];
                    if m == 0.0 {
                        continue;
                    }
                    let src = &x[(r * n + t) * d..(r * n + t + 1) * d];
                    let dst = &mut data[r * d..(r + 1) * d];
                    for (o, v) in dst.iter_mut().zip(src.iter()) {
                        *o += m * v / denom;
                    }
                }
            }
        }
        let pa = self.clone();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![b, d],
            "masked_pool_seq",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for r in 0..b {
                        let denom = if mean { counts[r] } else { 1.0 };
                        let g_row = &g[r * d..(r + 1) * d];
                        for t in 0..n {
                            let m = mask[r * n + t];
                            if m == 0.0 {
                                continue;
                            }
                            let dst = &mut ga[(r * n + t) * d..(r * n + t + 1) * d];
                            for (o, gv) in dst.iter_mut().zip(g_row.iter()) {
                                *o += m * gv / denom;
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Select one sequence position of a [B, N, D] tensor: out[b, :] = x[b, pos, :].
    pub fn select_seq_position(&self, pos: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TensorError::InvalidShape {
                op: "select_seq_position",
                shape: s.to_vec(),
                len: self.numel(),
            });
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        if pos >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "select_seq_position",
                index: pos,
                bound: n,
            });
        }
        let mut data = vec![0.0; b * d];
        {
            let x = self.data();
            for r in 0..b {
                data[r * d..(r + 1) * d]
                    .copy_from_slice(&x[(r * n + pos) * d..(r * n + pos + 1) * d]);
            }
        }
        let pa = self.clone();
        Ok(Tensor::from_op(
            data,
            vec![b, d],
            "select_seq_position",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for r in 0..b {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut ga[(r * n + pos) * d..(r * n + pos + 1) * d];
                        for (o, gv) in dst.iter_mut().zip(src.iter()) {
                            *o += gv;
                        }
                    }
                });
            }),
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::from_op(
            vec![s],
            vec![1],
            "sum_all",
            vec![self.clone()],
            Box::new(move |g, _| {
                let g0 = g[0];
                pa.accumulate_grad(|ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::from_op(
            vec![s / n],
            vec![1],
            "mean_all",
            vec![self.clone()],
            Box::new(move |g, _| {
                let g0 = g[0] / n;
                pa.accumulate_grad(|ga| {
                    for o in ga.iter_mut() {
                        *o += g0;
                    }
                });
            }),
        )
    }

    /// Weighted sum of a vector tensor with constant weights: sum_i w[i]*x[i].
    pub fn dot_const(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "dot_const",
                shape: self.shape().to_vec(),
                len: weights.len(),
            });
        }
        let s: f64 = self
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(x, w)| x * w)
            .sum();
        let pa = self.clone();
        let weights = weights.to_vec();
        Ok(Tensor::from_op(
            vec![s],
            vec![1],
            "dot_const",
            vec![self.clone()],
            Box::new(move |g, _| {
                let g0 = g[0];
                pa.accumulate_grad(|ga| {
                    for (o, w) in ga.iter_mut().zip(weights.iter()) {
                        *o += g0 * w;
                    }
                });
            }),
        ))
    }

    /// Mean squared error between same-shape tensors, as a scalar.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, other)?;
        let n = self.numel() as f64;
        let s: f64 = {
            let a = self.data();
            let b = other.data();
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![s / n],
            vec![1],
            "mse",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let g0 = g[0];
                let diffs: Vec<f64> = {
                    let a = pa.data();
                    let b = pb.data();
                    a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
                };
                pa.accumulate_grad(|ga| {
                    for (o, dv) in ga.iter_mut().zip(diffs.iter()) {
                        *o += g0 * 2.0 * dv / n;
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (o, dv) in gb.iter_mut().zip(diffs.iter()) {
                        *o -= g0 * 2.0 * dv / n;
                    }
                });
            }),
        ))
    }

    /// Per-sample mean squared error over the trailing dimensions of a
    /// [B, ...] pair, restricted to elements where `mask` is 1. Each sample's
    /// sum is divided by its active element count (rows with zero count give
    /// loss 0). Returns shape [B].
    pub fn masked_mse_rows(&self, other: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
        same_shape("masked_mse_rows", self, other)?;
        if let Some(m) = mask {
            if m.len() != self.numel() {
                return Err(TensorError::InvalidShape {
                    op: "masked_mse_rows",
                    shape: self.shape().to_vec(),
                    len: m.len(),
                });
            }
        }
        let b = self.shape()[0];
        let per = self.numel() / b;
        let mut counts = vec![0.0; b];
        match mask {
            Some(m) => {
                for r in 0..b {
                    counts[r] = m[r * per..(r + 1) * per].iter().sum();
                }
            }
            None => counts.iter_mut().for_each(|c| *c = per as f64),
        }
        let mut data = vec![0.0; b];
        {
            let a = self.data();
            let bd = other.data();
            for r in 0..b {
                if counts[r] == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for j in r * per..(r + 1) * per {
                    let w = mask.map_or(1.0, |m| m[j]);
                    let dv = a[j] - bd[j];
                    s += w * dv * dv;
                }
                data[r] = s / counts[r];
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        let mask = mask.map(|m| m.to_vec());
        Ok(Tensor::from_op(
            data,
            vec![b],
            "masked_mse_rows",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let diffs: Vec<f64> = {
                    let a = pa.data();
                    let bd = pb.data();
                    a.iter().zip(bd.iter()).map(|(x, y)| x - y).collect()
                };
                let term = |j: usize| {
                    let r = j / per;
                    if counts[r] == 0.0 {
                        return 0.0;
                    }
                    let w = mask.as_ref().map_or(1.0, |m| m[j]);
                    g[r] * 2.0 * w * diffs[j] / counts[r]
                };
                pa.accumulate_grad(|ga| {
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += term(j);
                    }
                });
                pb.accumulate_grad(|gb| {
                    for (j, o) in gb.iter_mut().enumerate() {
                        *o -= term(j);
                    }
                });
            }),
        ))
    }

    /// Per-sample cross-entropy of [B, C] logits against class indices:
    /// out[i] = -log softmax(logits[i])[targets[i]]. Returns shape [B].
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy_rows",
                shape: s.to_vec(),
                len: targets.len(),
            });
        }
        let (b, c) = (s[0], s[1]);
        for &t in targets {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: t,
                    bound: c,
                });
            }
        }
        let probs = row_softmax(&self.data(), b, c);
        let mut data = vec![0.0; b];
        {
            let x = self.data();
            for i in 0..b {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                data[i] = lse - row[targets[i]];
            }
        }
        let pa = self.clone();
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![b],
            "cross_entropy_rows",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for i in 0..b {
                        for j in 0..c {
                            let ind = if j == targets[i] { 1.0 } else { 0.0 };
                            ga[i * c + j] += g[i] * (probs[i * c + j] - ind);
                        }
                    }
                });
            }),
        ))
    }

    /// Per-sample soft cross-entropy of [B, C] logits against constant
    /// probability rows: out[i] = -sum_c p[i,c] * log softmax(logits[i])[c].
    /// Probability rows must sum to 1 within 1e-6. Returns shape [B].
    pub fn soft_cross_entropy_rows(&self, target_probs: &[f64]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || target_probs.len() != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "soft_cross_entropy_rows",
                shape: s.to_vec(),
                len: target_probs.len(),
            });
        }
        let (b, c) = (s[0], s[1]);
        for i in 0..b {
            let sum: f64 = target_probs[i * c..(i + 1) * c].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::Invalid {
                    op: "soft_cross_entropy_rows",
                    msg: format!("target probability row {i} sums to {sum}"),
                });
            }
        }
        let probs = row_softmax(&self.data(), b, c);
        let mut data = vec![0.0; b];
        {
            let x = self.data();
            for i in 0..b {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                let mut v = 0.0;
                for j in 0..c {
                    v -= target_probs[i * c + j] * (row[j] - lse);
                }
                data[i] = v;
            }
        }
        let pa = self.clone();
        let target_probs = target_probs.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![b],
            "soft_cross_entropy_rows",
            vec![self.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(|ga| {
                    for i in 0..b {
                        for j in 0..c {
                            ga[i * c + j] +=
                                g[i] * (probs[i * c + j] - target_probs[i * c + j]);
                        }
                    }
                });
            }),
        ))
    }

    /// Mean cross-entropy over a batch of [B, C] logits and class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        Ok(self.cross_entropy_rows(targets)?.mean_all())
    }

    /// Mean soft cross-entropy over a batch against probability rows.
    pub fn cross_entropy_soft(&self, target_probs: &[f64]) -> Result<Tensor> {
        Ok(self.soft_cross_entropy_rows(target_probs)?.mean_all())
    }
}

/// Row-wise softmax of a [B, C] buffer (plain data, no graph).
pub fn row_softmax(x: &[f64], b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    out
}
