//! Concept graph: importance-proportional degree budgets, similarity-ranked
//! neighborhoods (regional/global), differentiable exp-similarity
//! aggregation layers with residuals, and projection to relation tokens.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{OcrtError, Result};
use crate::nn::{Linear, ParamList, prefixed};
use crate::rng;
use crate::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Regional,
    Global,
}

pub struct GraphParams {
    pub sim_proj: Linear<f64>,
    pub mixing: Tensor,
    pub out_proj: Linear<f64>,
    pub n_r: usize,
    pub d_r: usize,
}

impl GraphParams {
    pub fn new(k: usize, d_o: usize, d_r: usize, n_r: usize, rng: &mut impl Rng) -> Self {
        GraphParams {
            sim_proj: Linear::new(d_o, d_o, false, rng),
            mixing: Tensor::randn_param(&[n_r, k], 1.0, rng),
            out_proj: Linear::new(d_o, d_r, true, rng),
            n_r,
            d_r,
        }
    }

    pub fn params(&self) -> ParamList<f64> {
        let mut out = prefixed("graph.sim", self.sim_proj.params());
        out.push(("graph.mixing".to_string(), self.mixing.clone()));
        out.extend(prefixed("graph.out", self.out_proj.params()));
        out
    }
}

/// deg[k] = clamp(round(max_degree * ω̂[k] / max ω̂), 1, K-1) with
/// ω̂ = ω − min ω + 1e-6, so budgets track importance and every node
/// keeps at least one edge.
pub fn degree_budget(omega: &[f64], max_degree: usize) -> Result<Vec<usize>> {
    let k = omega.len();
    if k < 2 {
        return Err(OcrtError::Contract(format!("graph needs K >= 2 nodes, got {k}")));
    }
    if max_degree > k - 1 {
        return Err(OcrtError::Contract(format!(
            "max_degree {max_degree} exceeds K-1 = {}",
            k - 1
        )));
    }
    let min = omega.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = omega.iter().map(|w| w - min + 1e-6).collect();
    let max = shifted.iter().cloned().fold(0.0, f64::max);
    Ok(shifted
        .iter()
        .map(|w| {
            let d = (max_degree as f64 * w / max).round() as isize;
            d.clamp(1, (k - 1) as isize) as usize
        })
        .collect())
}

fn cosine_rows(z: &[f64], d: usize, a: usize, b: usize) -> f64 {
    let (ra, rb) = (&z[a * d..(a + 1) * d], &z[b * d..(b + 1) * d]);
    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Each node's neighbors are its top-deg[k] candidates by embedding
/// cosine similarity (lower index wins ties). Global mode considers all
/// other nodes; regional mode a seeded random ceil(K/2)-subset of them.
/// If a candidate set is smaller than the budget (routine in regional
/// mode at high max_degree) the degree is truncated silently.
pub fn build_neighborhoods(
    z: &Tensor,
    deg: &[usize],
    mode: Mode,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let (k, d) = (z.shape()[0], z.shape()[1]);
    if deg.len() != k {
        return Err(OcrtError::ShapeMismatch {
            op: "build_neighborhoods",
            lhs: vec![deg.len()],
            rhs: vec![k],
        });
    }
    let data = z.to_vec();
    let mut adjacency = Vec::with_capacity(k);
    for node in 0..k {
        let others: Vec<usize> = (0..k).filter(|&j| j != node).collect();
        let mut candidates = match mode {
            Mode::Global => others,
            Mode::Regional => {
                let want = k.div_ceil(2).min(others.len());
                let mut stream = rng::stream(seed, "regional", node as u64);
                let mut picked: Vec<usize> = sample(&mut stream, others.len(), want)
                    .iter()
                    .map(|i| others[i])
                    .collect();
                picked.sort_unstable();
                picked
            }
        };
        candidates.sort_by(|&a, &b| {
            let (sa, sb) = (
                cosine_rows(&data, d, node, a),
                cosine_rows(&data, d, node, b),
            );
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let budget = deg[node];
        candidates.truncate(budget.min(candidates.len()));
        adjacency.push(candidates);
    }
    Ok(adjacency)
}

/// Differentiable all-pairs cosine similarity of the projected node
/// embeddings.
fn projected_cosine(z: &Tensor, sim_proj: &Linear<f64>) -> Result<Tensor> {
    let p = sim_proj.forward(z)?;
    let norm = p.square()?.sum_axis(1)?.add_scalar(1e-24)?.sqrt()?;
    let unit = p.div(&norm)?;
    unit.matmul(&unit.transpose()?)
}

/// One aggregation layer: each node takes a convex combination of its
/// neighbors weighted by exp(cosine of projected embeddings), plus a
/// residual connection. The adjacency itself is treated as a constant.
pub fn rere_layer(z: &Tensor, adjacency: &[Vec<usize>], sim_proj: &Linear<f64>) -> Result<Tensor> {
    let k = z.shape()[0];
    if adjacency.len() != k {
        return Err(OcrtError::ShapeMismatch {
            op: "rere_layer",
            lhs: vec![adjacency.len()],
            rhs: vec![k],
        });
    }
    for (node, nbrs) in adjacency.iter().enumerate() {
        if nbrs.is_empty() {
            return Err(OcrtError::Contract(format!("node {node} has no neighbors")));
        }
    }
    let sims = projected_cosine(z, sim_proj)?;
    let mut mask = vec![0.0; k * k];
    for (node, nbrs) in adjacency.iter().enumerate() {
        for &j in nbrs {
            mask[node * k + j] = 1.0;
        }
    }
    let mask = Tensor::from_vec(mask, &[k, k])?;
    let weighted = sims.exp()?.mul(&mask)?;
    let weights = weighted.div(&weighted.sum_axis(1)?)?;
    z.add(&weights.matmul(z)?)
}

/// T_rel = softmax-normalized mixing rows over the K nodes, applied to
/// the final node embeddings, then projected to D_r.
pub fn to_relation_tokens(z_final: &Tensor, params: &GraphParams) -> Result<Tensor> {
    if params.mixing.shape()[1] != z_final.shape()[0] {
        return Err(OcrtError::ShapeMismatch {
            op: "to_relation_tokens",
            lhs: params.mixing.shape().to_vec(),
            rhs: z_final.shape().to_vec(),
        });
    }
    let rows = params.mixing.softmax(1)?;
    params.out_proj.forward(&rows.matmul(z_final)?)
}

/// Full relational pass: degree budgets from ω, `layers` aggregation
/// rounds (regional leading up to a final global layer), and the
/// relation-token projection.
pub fn relational_forward(
    slots: &Tensor,
    omega: &[f64],
    params: &GraphParams,
    layers: usize,
    max_degree: usize,
    seed: u64,
) -> Result<Tensor> {
    let deg = degree_budget(omega, max_degree)?;
    let mut z = slots.clone();
    for layer in 0..layers {
        let mode = if layer + 1 == layers { Mode::Global } else { Mode::Regional };
        let adjacency = build_neighborhoods(&z, &deg, mode, rng::derive(seed, "graph", layer as u64))?;
        z = rere_layer(&z, &adjacency, &params.sim_proj)?;
    }
    to_relation_tokens(&z, params)
}
