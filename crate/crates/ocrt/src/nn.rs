//! Small trainable building blocks shared by the pipeline modules.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter list, in a stable order. Checkpoints, the optimizer
/// and EMA copies all key off these names.
pub type ParamList<S> = Vec<(String, Tensor<S>)>;

pub fn prefixed<S: Scalar>(prefix: &str, params: ParamList<S>) -> ParamList<S> {
    params
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Xavier/Glorot-scaled dense layer.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / (d_in + d_out) as f64).sqrt();
        let weight = Tensor::randn_param(&[d_in, d_out], scale, rng);
        let bias = bias.then(|| Tensor::param(vec![S::zero(); d_out], &[1, d_out]).unwrap());
        Linear { weight, bias }
    }

    /// Frozen layer: same init law, no gradients.
    pub fn frozen(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let l = Self::new(d_in, d_out, bias, rng);
        Linear {
            weight: l.weight.detach(),
            bias: l.bias.map(|b| b.detach()),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> ParamList<S> {
        let mut p = vec![("weight".to_string(), self.weight.clone())];
        if let Some(b) = &self.bias {
            p.push(("bias".to_string(), b.clone()));
        }
        p
    }
}

/// Row-wise layer normalization with learnable gain and shift.
pub struct LayerNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(vec![S::one(); dim], &[1, dim]).unwrap(),
            beta: Tensor::param(vec![S::zero(); dim], &[1, dim]).unwrap(),
            eps: S::from_f64(1e-8),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mu = x.mean_axis(1)?;
        let centered = x.sub(&mu)?;
        let var = centered.square()?.mean_axis(1)?;
        let std = var.add_scalar(self.eps)?.sqrt()?;
        centered.div(&std)?.mul(&self.gamma)?.add(&self.beta)
    }

    pub fn params(&self) -> ParamList<S> {
        vec![
            ("gamma".to_string(), self.gamma.clone()),
            ("beta".to_string(), self.beta.clone()),
        ]
    }
}

/// Gated recurrent cell over a set of row vectors.
///
/// h' = (1 - u) .* h + u .* tanh(x Wh + (r .* h) Uh + bh)
/// with update gate u and reset gate r; rows are independent, so the
/// cell is permutation-equivariant across rows.
pub struct GruCell<S: Scalar> {
    pub wu: Linear<S>,
    pub uu: Linear<S>,
    pub wr: Linear<S>,
    pub ur: Linear<S>,
    pub wh: Linear<S>,
    pub uh: Linear<S>,
}

impl<S: Scalar> GruCell<S> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            wu: Linear::new(dim, dim, true, rng),
            uu: Linear::new(dim, dim, false, rng),
            wr: Linear::new(dim, dim, true, rng),
            ur: Linear::new(dim, dim, false, rng),
            wh: Linear::new(dim, dim, true, rng),
            uh: Linear::new(dim, dim, false, rng),
        }
    }

    pub fn forward(&self, input: &Tensor<S>, hidden: &Tensor<S>) -> Result<Tensor<S>> {
        let u = self.wu.forward(input)?.add(&self.uu.forward(hidden)?)?.sigmoid()?;
        let r = self.wr.forward(input)?.add(&self.ur.forward(hidden)?)?.sigmoid()?;
        let cand = self
            .wh
            .forward(input)?
            .add(&self.uh.forward(&r.mul(hidden)?)?)?
            .tanh_t()?;
        let one_minus_u = u.neg()?.add_scalar(S::one())?;
        one_minus_u.mul(hidden)?.add(&u.mul(&cand)?)
    }

    pub fn params(&self) -> ParamList<S> {
        let mut p = ParamList::new();
        for (name, l) in [
            ("wu", &self.wu),
            ("uu", &self.uu),
            ("wr", &self.wr),
            ("ur", &self.ur),
            ("wh", &self.wh),
            ("uh", &self.uh),
        ] {
            p.extend(prefixed(name, l.params()));
        }
        p
    }
}

/// ReLU MLP.
pub struct Mlp<S: Scalar> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i != last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> ParamList<S> {
        let mut p = ParamList::new();
        for (i, l) in self.layers.iter().enumerate() {
            p.extend(prefixed(&format!("l{i}"), l.params()));
        }
        p
    }
}
