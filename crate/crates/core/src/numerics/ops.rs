//! Eager tensor functions and the trainable MLP building block.

use rand::Rng;

use super::graph::{Activation, Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{PierError, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut g = Graph::standalone();
    let v = g.input(x);
    let out = g.softmax_rows(v);
    g.to_tensor(out)
}

/// `softmax(Q·Kᵀ/√D)·V` for a single `r × D` slab.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(PierError::dim("scaled_dot_attention", q.shape(), k.shape()));
    }
    if q.cols() == 0 || q.rows() == 0 {
        return Err(PierError::dim("scaled_dot_attention", q.shape(), &[1, 1]));
    }
    let mut g = Graph::standalone();
    let (qv, kv, vv) = (g.input(q), g.input(k), g.input(v));
    let out = g.block_attention(qv, kv, vv, q.rows())?;
    Ok(g.to_tensor(out))
}

/// Applies `(W, b, activation)` layers in order.
pub fn mlp_forward(x: &Tensor, layers: &[(Tensor, Tensor, Activation)]) -> Result<Tensor> {
    let mut g = Graph::standalone();
    let mut h = g.input(x);
    for (w, b, act) in layers {
        let wv = g.input(w);
        let bv = g.input(b);
        h = g.dense(h, wv, bv, *act)?;
    }
    Ok(g.to_tensor(h))
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Stack of dense layers whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Mlp {
    /// Hidden layers use `hidden_act`; the last layer uses `output_act`.
    /// Weights are Glorot-uniform, biases zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        sizes: &[usize],
        hidden_act: Activation,
        output_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut fan_in = input_dim;
        for (i, &fan_out) in sizes.iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            let weight = store.add(
                format!("{name}.{i}.weight"),
                Tensor::new(vec![fan_in, fan_out], w).expect("layer shape"),
            );
            let bias = store.add(format!("{name}.{i}.bias"), Tensor::zeros(&[1, fan_out]));
            let activation = if i + 1 == sizes.len() { output_act } else { hidden_act };
            layers.push(DenseLayer {
                weight,
                bias,
                activation,
            });
            fan_in = fan_out;
        }
        Self {
            layers,
            input_dim,
            output_dim: fan_in,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim {
            return Err(PierError::dim("mlp input", &[cols], &[self.input_dim]));
        }
        let mut h = x;
        for layer in &self.layers {
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            h = g.dense(h, w, b, layer.activation)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let sel = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        // same summation order, so exact
        assert_eq!(fast, slow);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::row_vector(&[0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        for x in [-50.0, 0.0, 3.3, 1e6] {
            assert_eq!(softmax_rows(&Tensor::row_vector(&[x])).data(), &[1.0]);
        }
        let s = softmax_rows(&Tensor::row_vector(&[1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn attention_single_row_returns_value() {
        let q = Tensor::row_vector(&[0.3, -1.0, 2.0]);
        let k = Tensor::row_vector(&[1.0, 0.5, 0.1]);
        let v = Tensor::row_vector(&[4.0, 5.0, 6.0]);
        assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn attention_zero_logits_average_values() {
        let z = Tensor::zeros(&[3, 2]);
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 9.0]]).unwrap();
        let out = scaled_dot_attention(&z, &z, &v).unwrap();
        for r in 0..3 {
            assert!((out.get2(r, 0) - 3.0).abs() < 1e-12);
            assert!((out.get2(r, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula() {
        let q = Tensor::from_rows(&[vec![0.2, -0.7], vec![1.1, 0.4]]).unwrap();
        let k = Tensor::from_rows(&[vec![-0.3, 0.9], vec![0.5, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.25, 3.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q.get2(i, 0) * k.get2(j, 0) + q.get2(i, 1) * k.get2(j, 1)) * scale)
                .collect();
            let z = s[0].exp() + s[1].exp();
            let (w0, w1) = (s[0].exp() / z, s[1].exp() / z);
            for c in 0..2 {
                let want = w0 * v.get2(0, c) + w1 * v.get2(1, c);
                assert!((out.get2(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(scaled_dot_attention(&a, &b, &a), Err(PierError::Dimension { .. })));
    }

    #[test]
    fn mlp_examples() {
        let x = Tensor::row_vector(&[0.5, -1.5]);
        let zero = mlp_forward(&x, &[(Tensor::zeros(&[2, 2]), Tensor::zeros(&[1, 2]), Activation::Relu)]).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        let ident = mlp_forward(&x, &[(Tensor::identity(2), Tensor::zeros(&[1, 2]), Activation::Identity)]).unwrap();
        assert_eq!(ident, x);
        // hand computed: h = relu([1,2]·[[1,-1],[2,1]] + [0,-0.5]) = relu([5, 0.5]) = [5, 0.5]
        // out = [5, 0.5]·[[1],[4]] + [1] = 8
        let layers = vec![
            (
                Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 1.0]]).unwrap(),
                Tensor::row_vector(&[0.0, -0.5]),
                Activation::Relu,
            ),
            (Tensor::from_rows(&[vec![1.0], vec![4.0]]).unwrap(), Tensor::row_vector(&[1.0]), Activation::Identity),
        ];
        let out = mlp_forward(&Tensor::row_vector(&[1.0, 2.0]), &layers).unwrap();
        assert_eq!(out.data(), &[8.0]);
        let bad = mlp_forward(&Tensor::row_vector(&[1.0, 2.0, 3.0]), &layers);
        assert!(matches!(bad, Err(PierError::Dimension { .. })));
    }
}
