//! Masked reconstruction and query specialization objectives.

use crate::autograd::{self, Graph, Var};
use crate::config::LossConfig;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Smooth-L1 between two values: `0.5·d²` inside `|d| < β`, else `β·|d| − 0.5·β²`.
pub fn smooth_l1(x: f64, x_hat: f64, beta: f64) -> f64 {
    autograd::smooth_l1(x - x_hat, beta)
}

/// Element weights realizing `mean(masked) + α·mean(visible)` for a
/// `[B, C, S]` token mask expanded over `patch_size` samples.
fn element_weights(mask: &[bool], patch_size: usize, alpha: f64) -> Vec<f64> {
    let masked = mask.iter().filter(|&&m| m).count() * patch_size;
    let visible = mask.len() * patch_size - masked;
    let wm = if masked > 0 { 1.0 / masked as f64 } else { 0.0 };
    let wv = if visible > 0 { alpha / visible as f64 } else { 0.0 };
    mask.iter()
        .flat_map(|&m| std::iter::repeat_n(if m { wm } else { wv }, patch_size))
        .collect()
}

/// The two reconstruction terms as element means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconTerms {
    pub masked: f64,
    pub visible: f64,
}

impl ReconTerms {
    pub fn total(&self, alpha: f64) -> f64 {
        self.masked + alpha * self.visible
    }
}

/// `orig`, `recon` laid out `[B, C, S, P]` and `mask` `[B, C, S]`. An empty
/// set contributes a zero mean.
pub fn reconstruction_terms(orig: &[f64], recon: &[f64], mask: &[bool], beta: f64) -> Result<ReconTerms> {
    if orig.len() != recon.len() || mask.is_empty() || !orig.len().is_multiple_of(mask.len()) {
        return contract("reconstruction operands disagree in size");
    }
    let p = orig.len() / mask.len();
    let (mut sm, mut nm, mut sv, mut nv) = (0.0, 0usize, 0.0, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        let s: f64 = (i * p..(i + 1) * p).map(|j| smooth_l1(orig[j], recon[j], beta)).sum();
        if m {
            sm += s;
            nm += p;
        } else {
            sv += s;
            nv += p;
        }
    }
    let mean = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
    Ok(ReconTerms {
        masked: mean(sm, nm),
        visible: mean(sv, nv),
    })
}

/// `mean(masked) + α·mean(visible)`.
pub fn reconstruction_loss(orig: &[f64], recon: &[f64], mask: &[bool], cfg: &LossConfig) -> Result<f64> {
    Ok(reconstruction_terms(orig, recon, mask, cfg.beta)?.total(cfg.alpha))
}

/// Differentiable reconstruction loss of `recon[B, C, S, P]`.
pub fn reconstruction_loss_node(
    g: &mut Graph,
    recon: Var,
    target: &[f64],
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    let n = g.value(recon).len();
    if mask.is_empty() || !n.is_multiple_of(mask.len()) {
        return contract("mask does not tile the reconstruction");
    }
    let w = element_weights(mask, n / mask.len(), cfg.alpha);
    g.smooth_l1(recon, target, &w, cfg.beta)
}

/// `λ/(B'·Q·(Q−1)) · Σ_{i≠j} (A·Aᵀ)²_ij` for `affinity[B', Q, C]`; zero when
/// `Q = 1`.
pub fn specialization_loss(affinity: &Tensor, lambda: f64) -> Result<f64> {
    let s = affinity.shape();
    if s.len() != 3 {
        return contract(format!("affinity must be [B', Q, C], got {s:?}"));
    }
    let (n, q, c) = (s[0], s[1], s[2]);
    if q < 2 {
        return Ok(0.0);
    }
    let a = affinity.data();
    let mut sum = 0.0;
    for b in 0..n {
        let base = b * q * c;
        for i in 0..q {
            for j in 0..q {
                if i == j {
                    continue;
                }
                let dot: f64 = (0..c).map(|k| a[base + i * c + k] * a[base + j * c + k]).sum();
                sum += dot * dot;
            }
        }
    }
    Ok(lambda * sum / (n * q * (q - 1)) as f64)
}

/// Differentiable form of [`specialization_loss`].
pub fn specialization_loss_node(g: &mut Graph, affinity: Var, lambda: f64) -> Result<Var> {
    let s = g.shape(affinity).to_vec();
    if s.len() != 3 {
        return contract(format!("affinity must be [B', Q, C], got {s:?}"));
    }
    let (n, q) = (s[0], s[1]);
    if q < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let gram = g.bmm(affinity, affinity, true, crate::flops::FlopKind::Dense)?;
    let sq = g.mul(gram, gram)?;
    let off: Vec<f64> = (0..q * q).map(|i| if i / q == i % q { 0.0 } else { 1.0 }).collect();
    let off = g.constant(Tensor::new(vec![q, q], off)?);
    let sq = g.mul_broadcast(sq, off)?;
    let total = g.sum_all(sq);
    Ok(g.scale(total, lambda / (n * q * (q - 1)) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(2.0, 2.0, 1.0), 0.0);
        assert_eq!(smooth_l1(1.0, 0.0, 1.0), 0.5);
        assert_eq!(smooth_l1(0.0, 3.0, 1.0), 2.5);
    }

    #[test]
    fn all_masked_offset_three() {
        let orig = vec![0.5; 24];
        let recon: Vec<f64> = orig.iter().map(|v| v + 3.0).collect();
        let mask = vec![true; 6];
        let l = reconstruction_loss(&orig, &recon, &mask, &LossConfig::default()).unwrap();
        assert!((l - 2.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_rows_gram() {
        let a = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        assert!((specialization_loss(&a, 0.8).unwrap() - 0.2).abs() < 1e-15);
        let o = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(specialization_loss(&o, 0.8).unwrap(), 0.0);
    }

    #[test]
    fn node_matches_host() {
        let a = Tensor::new(
            vec![2, 3, 2],
            vec![0.1, 0.9, 0.4, 0.6, 0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 1.0, 0.0],
        )
        .unwrap();
        let mut g = Graph::default();
        let v = g.constant(a.clone());
        let l = specialization_loss_node(&mut g, v, 0.8).unwrap();
        assert!((g.value(l).item().unwrap() - specialization_loss(&a, 0.8).unwrap()).abs() < 1e-15);
    }
}
