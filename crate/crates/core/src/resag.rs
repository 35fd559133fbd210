//! Residual attention gates: a shared attention gate per concept plus one
//! low-rank delta per key/value projection, added residually to the
//! projection output. The gate reorganizes the embedding with a small
//! attention map and emits a per-token sigmoid that decides how much of the
//! low-rank change is transmitted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{LayerStack, ProjKind, ProjectionRef};
use crate::error::{Error, Result};
use crate::numkit::{self, softmax_columns, Embedding, Matrix, RngStream};

/// Gate parameters, shared across every layer of the attached stack.
#[derive(Clone, Debug)]
pub struct GateParams {
    /// s1 × d
    pub u1: Matrix,
    /// s1 × d
    pub u2: Matrix,
    /// d × 1
    pub v: Matrix,
}

impl GateParams {
    pub fn gate_rank(&self) -> usize {
        self.u1.rows()
    }

    pub fn dim(&self) -> usize {
        self.u1.cols()
    }
}

/// Low-rank residual factors for one projection: `ΔW = U4ᵀ U3` with
/// `U3: s2×d` and `U4: s2×d_out`.
///
/// The two factors share the rank but not the output dimension; key/value
/// projections map d to d_out, so U4 lives in the projection output space.
#[derive(Clone, Debug)]
pub struct LowRankDelta {
    pub u3: Matrix,
    pub u4: Matrix,
}

impl LowRankDelta {
    pub fn delta_rank(&self) -> usize {
        self.u3.rows()
    }
}

/// One concept's adapter: the shared gate plus one delta per (layer, key/value)
/// projection of the attached stack.
#[derive(Clone, Debug)]
pub struct ResAG {
    pub concept_id: String,
    pub gate: GateParams,
    pub deltas: BTreeMap<ProjectionRef, LowRankDelta>,
}

impl ResAG {
    /// Fresh adapter for a stack: `U1`, `U2`, `U3` are zero-mean Gaussian
    /// with std 1/√d, `U4` and `v` are zero, so the residual is exactly zero
    /// and the gate is neutral (0.5 everywhere) at the start of training.
    pub fn init(
        concept_id: &str,
        gate_rank: usize,
        delta_rank: usize,
        stack: &LayerStack,
        rng: &mut RngStream,
    ) -> Result<ResAG> {
        if gate_rank == 0 || delta_rank == 0 {
            return Err(Error::invalid_input("ResAG ranks must be at least 1"));
        }
        let (d, _, d2, _) = stack.dims();
        let std = 1.0 / (d as f64).sqrt();
        let gate = GateParams {
            u1: rng.normal_matrix(gate_rank, d, std),
            u2: rng.normal_matrix(gate_rank, d, std),
            v: Matrix::zeros(d, 1),
        };
        let mut deltas = BTreeMap::new();
        for proj in stack.projection_refs() {
            deltas.insert(
                proj,
                LowRankDelta {
                    u3: rng.normal_matrix(delta_rank, d, std),
                    u4: Matrix::zeros(delta_rank, d2),
                },
            );
        }
        Ok(ResAG {
            concept_id: concept_id.to_string(),
            gate,
            deltas,
        })
    }

    pub fn gate_rank(&self) -> usize {
        self.gate.gate_rank()
    }

    pub fn delta_rank(&self) -> usize {
        self.deltas
            .values()
            .next()
            .map(|d| d.delta_rank())
            .unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.gate.dim()
    }

    pub fn delta(&self, proj: &ProjectionRef) -> Result<&LowRankDelta> {
        self.deltas.get(proj).ok_or_else(|| {
            Error::invalid_input(format!("no delta for projection {}", proj.label()))
        })
    }

    /// Every projection of the stack must carry exactly one delta.
    pub fn validate_against(&self, stack: &LayerStack) -> Result<()> {
        let refs = stack.projection_refs();
        if refs.len() != self.deltas.len() {
            return Err(Error::InvalidState(format!(
                "adapter has {} deltas, stack has {} projections",
                self.deltas.len(),
                refs.len()
            )));
        }
        let (d, _, d2, _) = stack.dims();
        for proj in &refs {
            let delta = self.delta(proj)?;
            if delta.u3.cols() != d || delta.u4.cols() != d2 {
                return Err(Error::InvalidState(format!(
                    "delta for {} has shapes {} / {}, stack wants d={d}, d_out={d2}",
                    proj.label(),
                    delta.u3.shape_string(),
                    delta.u4.shape_string()
                )));
            }
        }
        if self.gate.dim() != d {
            return Err(Error::InvalidState("gate dimension mismatch".into()));
        }
        Ok(())
    }

    /// Flat name → value view of all trainable parameters, in a fixed order.
    pub fn params_to_map(&self) -> BTreeMap<String, Matrix> {
        let mut map = BTreeMap::new();
        map.insert("gate/u1".to_string(), self.gate.u1.clone());
        map.insert("gate/u2".to_string(), self.gate.u2.clone());
        map.insert("gate/v".to_string(), self.gate.v.clone());
        for (proj, delta) in &self.deltas {
            map.insert(format!("delta/{}/u3", proj.label()), delta.u3.clone());
            map.insert(format!("delta/{}/u4", proj.label()), delta.u4.clone());
        }
        map
    }

    pub fn set_params_from_map(&mut self, map: &BTreeMap<String, Matrix>) -> Result<()> {
        let fetch = |name: &str| -> Result<Matrix> {
            map.get(name)
                .cloned()
                .ok_or_else(|| Error::InvalidState(format!("parameter map is missing {name}")))
        };
        self.gate.u1 = fetch("gate/u1")?;
        self.gate.u2 = fetch("gate/u2")?;
        self.gate.v = fetch("gate/v")?;
        for (proj, delta) in self.deltas.iter_mut() {
            delta.u3 = fetch(&format!("delta/{}/u3", proj.label()))?;
            delta.u4 = fetch(&format!("delta/{}/u4", proj.label()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let projections: Vec<CheckpointProjection> = self
            .deltas
            .iter()
            .map(|(proj, delta)| CheckpointProjection {
                layer: proj.layer,
                kind: proj.kind,
                d_out: delta.u4.cols(),
            })
            .collect();
        let header = CheckpointHeader {
            format: "resag-checkpoint-v1".into(),
            concept_id: self.concept_id.clone(),
            gate_rank: self.gate_rank(),
            delta_rank: self.delta_rank(),
            d: self.dim(),
            projections,
        };
        let named = self.params_to_map();
        let mats: Vec<(&str, &Matrix)> = named.iter().map(|(n, m)| (n.as_str(), m)).collect();
        numkit::io::write_container(path, &header, &mats)
    }

    pub fn load(path: &Path) -> Result<ResAG> {
        let (header, mats): (CheckpointHeader, _) = numkit::io::read_container(path)?;
        if header.format != "resag-checkpoint-v1" {
            return Err(Error::Format(format!(
                "unexpected checkpoint format {}",
                header.format
            )));
        }
        let gate = GateParams {
            u1: numkit::io::take_matrix(&mats, "gate/u1")?,
            u2: numkit::io::take_matrix(&mats, "gate/u2")?,
            v: numkit::io::take_matrix(&mats, "gate/v")?,
        };
        let mut deltas = BTreeMap::new();
        for p in &header.projections {
            let proj = ProjectionRef {
                layer: p.layer,
                kind: p.kind,
                head: None,
            };
            deltas.insert(
                proj,
                LowRankDelta {
                    u3: numkit::io::take_matrix(&mats, &format!("delta/{}/u3", proj.label()))?,
                    u4: numkit::io::take_matrix(&mats, &format!("delta/{}/u4", proj.label()))?,
                },
            );
        }
        Ok(ResAG {
            concept_id: header.concept_id,
            gate,
            deltas,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointProjection {
    layer: usize,
    kind: ProjKind,
    d_out: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    concept_id: String,
    gate_rank: usize,
    delta_rank: usize,
    d: usize,
    projections: Vec<CheckpointProjection>,
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate forward pass: `A = softmax_col((U1 E)ᵀ (U2 E) / √m)` and
/// `g = logistic(vᵀ E A)` per token. Returns the attention map and the gate
/// values.
pub fn gate_forward(gate: &GateParams, e: &Embedding) -> Result<(Matrix, Vec<f64>)> {
    let d = gate.dim();
    if e.rows() != d || e.cols() == 0 {
        return Err(Error::shape("gate_forward", e.shape_string(), format!("{d}xm")));
    }
    let m = e.cols();
    let p1 = gate.u1.matmul(e); // s1 x m
    let p2 = gate.u2.matmul(e); // s1 x m
    let logits = p1.transpose().matmul(&p2).scale(1.0 / (m as f64).sqrt()); // m x m
    let a = softmax_columns(&logits)?;
    let scores = gate.v.transpose().matmul(e).matmul(&a); // 1 x m
    let g = scores.data().iter().map(|&x| logistic(x)).collect();
    Ok((a, g))
}

/// Residual for one projection: `U4ᵀ U3 E A diag(g)`.
pub fn resag_forward(r: &ResAG, proj: &ProjectionRef, e: &Embedding) -> Result<Matrix> {
    let delta = r.delta(proj)?;
    let (a, g) = gate_forward(&r.gate, e)?;
    residual_from_gate(delta, e, &a, &g)
}

fn residual_from_gate(
    delta: &LowRankDelta,
    e: &Embedding,
    a: &Matrix,
    g: &[f64],
) -> Result<Matrix> {
    let dw = delta.u4.transpose().matmul(&delta.u3); // d_out x d
    let mut out = dw.checked_matmul(e)?.checked_matmul(a)?; // d_out x m
    for i in 0..out.rows() {
        for (j, &gj) in g.iter().enumerate() {
            out.set(i, j, out.get(i, j) * gj);
        }
    }
    Ok(out)
}

/// Projection output with the residual added: `W E + R(E)`.
pub fn augmented_projection(
    w: &Matrix,
    r: &ResAG,
    proj: &ProjectionRef,
    e: &Embedding,
) -> Result<Matrix> {
    let base = w.checked_matmul(e)?;
    let residual = resag_forward(r, proj, e)?;
    if base.shape() != residual.shape() {
        return Err(Error::shape(
            "augmented_projection",
            base.shape_string(),
            residual.shape_string(),
        ));
    }
    Ok(base.add(&residual))
}

/// Merges several concepts' adapters at inference time: for each token the
/// residual column comes from the concept with the highest gate value there
/// (ties broken by lowest concept index). Selection is unconditional; a
/// near-closed winning gate simply contributes a near-zero column.
pub fn merged_forward(rs: &[ResAG], proj: &ProjectionRef, e: &Embedding) -> Result<Matrix> {
    if rs.is_empty() {
        return Err(Error::invalid_input("merged_forward: empty adapter list"));
    }
    let mut residuals = Vec::with_capacity(rs.len());
    let mut gates = Vec::with_capacity(rs.len());
    for r in rs {
        let delta = r.delta(proj)?;
        let (a, g) = gate_forward(&r.gate, e)?;
        residuals.push(residual_from_gate(delta, e, &a, &g)?);
        gates.push(g);
    }
    let shape = residuals[0].shape();
    for res in &residuals {
        if res.shape() != shape {
            return Err(Error::shape(
                "merged_forward",
                res.shape_string(),
                format!("{}x{}", shape.0, shape.1),
            ));
        }
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for j in 0..shape.1 {
        let mut best = 0usize;
        for (c, g) in gates.iter().enumerate() {
            if g[j] > gates[best][j] {
                best = c;
            }
        }
        for i in 0..shape.0 {
            out.set(i, j, residuals[best].get(i, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::StackConfig;

    fn test_stack(rng: &mut RngStream) -> LayerStack {
        let cfg = StackConfig {
            layers: 2,
            heads: 2,
            d: 8,
            d1: 6,
            d2: 8,
            m: 4,
            weight_scale: 1.0,
        };
        LayerStack::random(&cfg, rng).unwrap()
    }

    #[test]
    fn neutral_gate_when_v_is_zero() {
        let mut rng = RngStream::new(21, 0);
        let stack = test_stack(&mut rng);
        let r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        let e = rng.normal_matrix(8, 4, 1.0);
        let (_, g) = gate_forward(&r.gate, &e).unwrap();
        assert!(g.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn zero_u1_gives_uniform_attention() {
        let mut rng = RngStream::new(22, 0);
        let stack = test_stack(&mut rng);
        let mut r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        r.gate.u1 = Matrix::zeros(2, 8);
        let e = rng.normal_matrix(8, 4, 1.0);
        let (a, _) = gate_forward(&r.gate, &e).unwrap();
        for v in a.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_u3_gives_zero_residual() {
        let mut rng = RngStream::new(23, 0);
        let stack = test_stack(&mut rng);
        let mut r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        let proj = ProjectionRef::layer_key(0);
        r.deltas.get_mut(&proj).unwrap().u3 = Matrix::zeros(1, 8);
        // u4 is nonzero here to make sure u3 alone kills the residual
        r.deltas.get_mut(&proj).unwrap().u4 = rng.normal_matrix(1, 8, 1.0);
        let e = rng.normal_matrix(8, 4, 1.0);
        let out = resag_forward(&r, &proj, &e).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn strongly_negative_gate_closes_residual() {
        let mut rng = RngStream::new(24, 0);
        let stack = test_stack(&mut rng);
        let mut r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        let proj = ProjectionRef::layer_key(0);
        r.deltas.get_mut(&proj).unwrap().u4 = rng.normal_matrix(1, 8, 1.0);
        let e = rng.normal_matrix(8, 4, 1.0);

        // Open-gate magnitude for the same delta, with g forced to 1.
        let delta = r.delta(&proj).unwrap();
        let (a, _) = gate_forward(&r.gate, &e).unwrap();
        let open = residual_from_gate(delta, &e, &a, &[1.0; 4]).unwrap();

        // With v huge along -E's first column, vᵀE A is strongly negative
        // for this embedding and the gate saturates towards zero.
        let mut v = Matrix::zeros(8, 1);
        for i in 0..8 {
            v.set(i, 0, -1e4 * e.get(i, 0));
        }
        r.gate.v = v;
        let closed = resag_forward(&r, &proj, &e).unwrap();
        let (_, g) = gate_forward(&r.gate, &e).unwrap();
        if g.iter().all(|&x| x < 1e-8) {
            assert!(closed.two_norm() <= 1e-6 * open.two_norm().max(1e-300));
        } else {
            // The random direction did not close every token; still expect
            // strong suppression overall.
            assert!(closed.two_norm() < open.two_norm());
        }
    }

    #[test]
    fn zero_init_is_neutral_for_augmented_projection() {
        let mut rng = RngStream::new(25, 0);
        let stack = test_stack(&mut rng);
        let r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        let e = rng.normal_matrix(8, 4, 1.0);
        for proj in stack.projection_refs() {
            let w = stack.projection_matrix(&proj).unwrap();
            let plain = w.matmul(&e);
            let aug = augmented_projection(&w, &r, &proj, &e).unwrap();
            assert_eq!(plain.data(), aug.data());
        }
    }

    #[test]
    fn unknown_projection_is_an_error() {
        let mut rng = RngStream::new(26, 0);
        let stack = test_stack(&mut rng);
        let r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        let bad = ProjectionRef::layer_key(9);
        let e = rng.normal_matrix(8, 4, 1.0);
        assert!(resag_forward(&r, &bad, &e).is_err());
    }

    #[test]
    fn merged_with_single_concept_is_bit_exact() {
        let mut rng = RngStream::new(27, 0);
        let stack = test_stack(&mut rng);
        let mut r = ResAG::init("c", 2, 1, &stack, &mut rng).unwrap();
        for delta in r.deltas.values_mut() {
            delta.u4 = rng.normal_matrix(1, 8, 1.0);
        }
        r.gate.v = rng.normal_matrix(8, 1, 1.0);
        let e = rng.normal_matrix(8, 4, 1.0);
        let proj = ProjectionRef::layer_value(1);
        let single = resag_forward(&r, &proj, &e).unwrap();
        let merged = merged_forward(std::slice::from_ref(&r), &proj, &e).unwrap();
        for (a, b) in single.data().iter().zip(merged.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dominant_gate_wins_every_token() {
        let mut rng = RngStream::new(28, 0);
        let stack = test_stack(&mut rng);
        let mut r1 = ResAG::init("a", 2, 1, &stack, &mut rng).unwrap();
        let mut r2 = ResAG::init("b", 2, 1, &stack, &mut rng).unwrap();
        for delta in r1.deltas.values_mut() {
            delta.u4 = rng.normal_matrix(1, 8, 1.0);
        }
        for delta in r2.deltas.values_mut() {
            delta.u4 = rng.normal_matrix(1, 8, 1.0);
        }
        // r1's gate stays neutral at 0.5; force r2's gate below it everywhere.
        let e = rng.normal_matrix(8, 4, 1.0);
        let mut v = Matrix::zeros(8, 1);
        for i in 0..8 {
            v.set(i, 0, -10.0 * (e.get(i, 0) + e.get(i, 1) + e.get(i, 2) + e.get(i, 3)));
        }
        r2.gate.v = v;
        let proj = ProjectionRef::layer_key(0);
        let (_, g1) = gate_forward(&r1.gate, &e).unwrap();
        let (_, g2) = gate_forward(&r2.gate, &e).unwrap();
        if g1.iter().zip(&g2).all(|(a, b)| a > b) {
            let merged = merged_forward(&[r1.clone(), r2.clone()], &proj, &e).unwrap();
            let expect = resag_forward(&r1, &proj, &e).unwrap();
            assert_eq!(merged.data(), expect.data());
        }
    }

    #[test]
    fn empty_merge_list_is_an_error() {
        let mut rng = RngStream::new(29, 0);
        let stack = test_stack(&mut rng);
        let _ = stack;
        let e = rng.normal_matrix(8, 4, 1.0);
        let proj = ProjectionRef::layer_key(0);
        assert!(merged_forward(&[], &proj, &e).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_bits() {
        let mut rng = RngStream::new(30, 0);
        let stack = test_stack(&mut rng);
        let mut r = ResAG::init("round-trip", 3, 2, &stack, &mut rng).unwrap();
        for delta in r.deltas.values_mut() {
            delta.u4 = rng.normal_matrix(2, 8, 0.3);
        }
        r.gate.v = rng.normal_matrix(8, 1, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        r.save(&path).unwrap();
        let loaded = ResAG::load(&path).unwrap();
        assert_eq!(loaded.concept_id, "round-trip");
        let a = r.params_to_map();
        let b = loaded.params_to_map();
        assert_eq!(a.len(), b.len());
        for (name, m) in &a {
            let n = &b[name];
            for (x, y) in m.data().iter().zip(n.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        loaded.validate_against(&stack).unwrap();
    }
}
