//! Iterative binding of feature maps to K object-centric slots.
//!
//! Attention is softmax over the slot axis per input location, followed
//! by per-slot renormalization over locations, so slot updates are
//! weighted means of the value vectors. Refinement feeds each update
//! through a gated recurrent cell whose weights are shared across
//! slots, keeping the whole map permutation-equivariant.

use rand::Rng;

use crate::error::{OcrtError, Result};
use crate::nn::{GruCell, LayerNorm, Linear, ParamList, prefixed};
use crate::rng;
use crate::Tensor;

/// Learnable Gaussian slot initialization shared across slots.
pub struct SlotBank {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub k: usize,
    pub d_o: usize,
}

impl SlotBank {
    pub fn new(k: usize, d_o: usize, rng: &mut impl Rng) -> Result<SlotBank> {
        if k < 1 {
            return Err(OcrtError::Contract("slot count must be at least 1".into()));
        }
        Ok(SlotBank {
            mu: Tensor::randn_param(&[1, d_o], 0.2, rng),
            log_sigma: Tensor::param(vec![(0.5f64).ln(); d_o], &[1, d_o])?,
            k,
            d_o,
        })
    }

    pub fn params(&self) -> ParamList<f64> {
        vec![
            ("mu".to_string(), self.mu.clone()),
            ("log_sigma".to_string(), self.log_sigma.clone()),
        ]
    }
}

/// o0_k = mu + sigma .* eps_k, eps_k iid standard normal per slot.
pub fn init_slots(bank: &SlotBank, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, "slots", 0);
    let eps = Tensor::randn(&[bank.k, bank.d_o], &mut r);
    let sigma = bank.log_sigma.exp()?;
    bank.mu.add(&sigma.mul(&eps)?)
}

pub struct BindingParams {
    pub norm_input: LayerNorm<f64>,
    pub norm_slots: LayerNorm<f64>,
    pub proj_q: Linear<f64>,
    pub proj_k: Linear<f64>,
    pub proj_v: Linear<f64>,
    pub gru: GruCell<f64>,
    pub iterations: usize,
    pub d_o: usize,
}

impl BindingParams {
    pub fn new(d_z: usize, d_o: usize, iterations: usize, rng: &mut impl Rng) -> Self {
        BindingParams {
            norm_input: LayerNorm::new(d_z),
            norm_slots: LayerNorm::new(d_o),
            proj_q: Linear::new(d_o, d_o, false, rng),
            proj_k: Linear::new(d_z, d_o, false, rng),
            proj_v: Linear::new(d_z, d_o, false, rng),
            gru: GruCell::new(d_o, rng),
            iterations,
            d_o,
        }
    }

    pub fn params(&self) -> ParamList<f64> {
        let mut p = ParamList::new();
        p.extend(prefixed("norm_input", self.norm_input.params()));
        p.extend(prefixed("norm_slots", self.norm_slots.params()));
        p.extend(prefixed("proj_q", self.proj_q.params()));
        p.extend(prefixed("proj_k", self.proj_k.params()));
        p.extend(prefixed("proj_v", self.proj_v.params()));
        p.extend(prefixed("gru", self.gru.params()));
        p
    }
}

/// One attention round. Returns the location-normalized attention
/// matrix A (N x K, columns on the simplex) and the slot updates
/// A^T v (K x D_o).
pub fn attention_step(
    slots: &Tensor,
    z: &Tensor,
    params: &BindingParams,
) -> Result<(Tensor, Tensor)> {
    let zn = params.norm_input.forward(z)?;
    let keys = params.proj_k.forward(&zn)?;
    let values = params.proj_v.forward(&zn)?;
    let queries = params.proj_q.forward(&params.norm_slots.forward(slots)?)?;
    let scale = 1.0 / (params.d_o as f64).sqrt();
    // M = k q^T / sqrt(D_o), N x K.
    let scores = keys.matmul(&queries.transpose()?)?.mul_scalar(scale)?;
    // Softmax over slots per location (rows on the simplex).
    let attn = scores.softmax(1)?;
    // Per-slot renormalization over locations (columns on the simplex).
    let col_sums = attn.sum_axis(0)?;
    let a = attn.div(&col_sums)?;
    let updates = a.transpose()?.matmul(&values)?;
    Ok((a, updates))
}

/// Row-softmax attention of the given slots over the feature map: each
/// location's distribution over slots, before the per-slot
/// renormalization that attention_step applies for the update.
pub fn attention_rows(slots: &Tensor, z: &Tensor, params: &BindingParams) -> Result<Tensor> {
    let zn = params.norm_input.forward(z)?;
    let keys = params.proj_k.forward(&zn)?;
    let queries = params.proj_q.forward(&params.norm_slots.forward(slots)?)?;
    let scale = 1.0 / (params.d_o as f64).sqrt();
    let scores = keys.matmul(&queries.transpose()?)?.mul_scalar(scale)?;
    scores.softmax(1)
}

/// T rounds of attention + gated update. Also returns the final
/// attention matrix for inspection.
pub fn refine_trace(
    slots0: &Tensor,
    z: &Tensor,
    params: &BindingParams,
) -> Result<(Tensor, Tensor)> {
    if params.iterations < 1 {
        return Err(OcrtError::Contract("refine requires at least one iteration".into()));
    }
    let mut slots = slots0.clone();
    let mut last_a = None;
    for t in 0..params.iterations {
        let step = attention_step(&slots, z, params)
            .and_then(|(a, updates)| Ok((a, params.gru.forward(&updates, &slots)?)));
        match step {
            Ok((a, next)) => {
                slots = next;
                last_a = Some(a);
            }
            Err(OcrtError::NonFinite { .. }) => {
                return Err(OcrtError::Divergence { iteration: t });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((slots, last_a.expect("iterations >= 1")))
}

pub fn refine(slots0: &Tensor, z: &Tensor, params: &BindingParams) -> Result<Tensor> {
    Ok(refine_trace(slots0, z, params)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_params(d_z: usize, d_o: usize, t: usize, seed: u64) -> BindingParams {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        BindingParams::new(d_z, d_o, t, &mut r)
    }

    #[test]
    fn sigma_to_zero_gives_mu() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let bank = SlotBank::new(3, 4, &mut r).unwrap();
        bank.log_sigma.set_data(vec![-700.0; 4]).unwrap();
        let slots = init_slots(&bank, 7).unwrap();
        let mu = bank.mu.to_vec();
        for row in slots.to_vec().chunks(4) {
            for (a, b) in row.iter().zip(&mu) {
                assert!((a - b).abs() < 1e-300);
            }
        }
    }

    #[test]
    fn init_deterministic_in_seed() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let bank = SlotBank::new(4, 8, &mut r).unwrap();
        let a = init_slots(&bank, 3).unwrap().to_vec();
        let b = init_slots(&bank, 3).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn init_sample_mean_near_mu() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let d = 4;
        let bank = SlotBank::new(1, d, &mut r).unwrap();
        let mu = bank.mu.to_vec();
        let sigma: Vec<f64> = bank.log_sigma.to_vec().iter().map(|v| v.exp()).collect();
        let draws = 100_000usize;
        let mut sums = vec![0.0; d];
        for s in 0..draws {
            let slots = init_slots(&bank, s as u64).unwrap().to_vec();
            for i in 0..d {
                sums[i] += slots[i];
            }
        }
        for i in 0..d {
            let mean = sums[i] / draws as f64;
            let bound = 3.0 * sigma[i] / (draws as f64).sqrt();
            assert!((mean - mu[i]).abs() < bound, "coord {i}: {mean} vs {}", mu[i]);
        }
    }

    #[test]
    fn identical_queries_give_uniform_attention() {
        let params = toy_params(5, 4, 1, 2);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[6, 5], &mut r);
        // All slots equal -> identical queries.
        let row = Tensor::randn(&[1, 4], &mut r);
        let slots = Tensor::ones(&[3, 1]).matmul(&row).unwrap();
        let (a, updates) = attention_step(&slots, &z, &params).unwrap();
        let ad = a.to_vec();
        // Columns equal each other; rows of attn were uniform 1/K.
        for loc in 0..6 {
            for k in 1..3 {
                assert!((ad[loc * 3] - ad[loc * 3 + k]).abs() < 1e-12);
            }
        }
        let ud = updates.to_vec();
        for k in 1..3 {
            for d in 0..4 {
                assert!((ud[d] - ud[k * 4 + d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_slot_update_is_value_mean() {
        let params = toy_params(5, 4, 1, 4);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[6, 5], &mut r);
        let slots = Tensor::randn(&[1, 4], &mut r);
        let (a, updates) = attention_step(&slots, &z, &params).unwrap();
        for v in a.to_vec() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
        let zn = params.norm_input.forward(&z).unwrap();
        let values = params.proj_v.forward(&zn).unwrap();
        let mean = values.mean_axis(0).unwrap().to_vec();
        for (u, m) in updates.to_vec().iter().zip(&mean) {
            assert!((u - m).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let params = toy_params(5, 3, 1, 6);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let z = Tensor::randn(&[6, 5], &mut r);
        let slots = Tensor::randn(&[3, 3], &mut r);
        let (a, updates) = attention_step(&slots, &z, &params).unwrap();

        // Oracle: explicit loops over the same projections.
        let zn = params.norm_input.forward(&z).unwrap();
        let keys = params.proj_k.forward(&zn).unwrap().to_vec();
        let values = params.proj_v.forward(&zn).unwrap().to_vec();
        let queries = params
            .proj_q
            .forward(&params.norm_slots.forward(&slots).unwrap())
            .unwrap()
            .to_vec();
        let (n, k, d) = (6, 3, 3);
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = vec![0.0; n * k];
        for i in 0..n {
            let mut row = vec![0.0; k];
            for j in 0..k {
                let mut s = 0.0;
                for t in 0..d {
                    s += keys[i * d + t] * queries[j * d + t];
                }
                row[j] = s * scale;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..k {
                attn[i * k + j] = exps[j] / denom;
            }
        }
        let mut exp_a = vec![0.0; n * k];
        for j in 0..k {
            let col: f64 = (0..n).map(|i| attn[i * k + j]).sum();
            for i in 0..n {
                exp_a[i * k + j] = attn[i * k + j] / col;
            }
        }
        for (x, y) in a.to_vec().iter().zip(&exp_a) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut exp_u = vec![0.0; k * d];
        for j in 0..k {
            for t in 0..d {
                for i in 0..n {
                    exp_u[j * d + t] += exp_a[i * k + j] * values[i * d + t];
                }
            }
        }
        for (x, y) in updates.to_vec().iter().zip(&exp_u) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_carry_gate_returns_initial_slots() {
        let params = toy_params(5, 4, 3, 8);
        params.gru.wu.bias.as_ref().unwrap().set_data(vec![-80.0; 4]).unwrap();
        params.gru.wu.weight.set_data(vec![0.0; 16]).unwrap();
        params.gru.uu.weight.set_data(vec![0.0; 16]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[6, 5], &mut r);
        let slots0 = Tensor::randn(&[2, 4], &mut r);
        let slots = refine(&slots0, &z, &params).unwrap();
        for (a, b) in slots.to_vec().iter().zip(slots0.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_iteration_equals_manual_composition() {
        let params = toy_params(5, 4, 1, 10);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(&[6, 5], &mut r);
        let slots0 = Tensor::randn(&[2, 4], &mut r);
        let refined = refine(&slots0, &z, &params).unwrap();
        let (_, updates) = attention_step(&slots0, &z, &params).unwrap();
        let manual = params.gru.forward(&updates, &slots0).unwrap();
        for (a, b) in refined.to_vec().iter().zip(manual.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn slot_permutation_equivariance() {
        let params = toy_params(5, 4, 3, 12);
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let z = Tensor::randn(&[6, 5], &mut r);
        let slots0 = Tensor::randn(&[3, 4], &mut r);
        let out = refine(&slots0, &z, &params).unwrap().to_vec();
        let perm = [2usize, 0, 1];
        let permuted0 = slots0.gather_rows(&perm).unwrap().detach();
        let out_p = refine(&permuted0, &z, &params).unwrap().to_vec();
        for (i, &src) in perm.iter().enumerate() {
            for d in 0..4 {
                assert!((out_p[i * 4 + d] - out[src * 4 + d]).abs() < 1e-10);
            }
        }
    }
}
