//! Multi-head cross-attention layers and the output-perturbation bound
//! coefficients used to weight the anchoring loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, softmax_columns, spectral_norm, Embedding, Matrix, RngStream};

/// Tolerances for the cached spectral-norm computations.
const SPECTRAL_TOL: f64 = 1e-10;
const SPECTRAL_MAX_ITERS: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Key,
    Value,
}

impl std::fmt::Display for ProjKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjKind::Key => write!(f, "key"),
            ProjKind::Value => write!(f, "value"),
        }
    }
}

/// Address of one projection inside a layer stack. `head: None` refers to
/// the whole-layer (head-stacked) projection, which is where the adapters
/// attach; per-head addressing exists for the bound verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProjectionRef {
    pub layer: usize,
    pub kind: ProjKind,
    pub head: Option<usize>,
}

impl ProjectionRef {
    pub fn layer_key(layer: usize) -> Self {
        ProjectionRef {
            layer,
            kind: ProjKind::Key,
            head: None,
        }
    }

    pub fn layer_value(layer: usize) -> Self {
        ProjectionRef {
            layer,
            kind: ProjKind::Value,
            head: None,
        }
    }

    pub fn label(&self) -> String {
        match self.head {
            Some(h) => format!("{}/{}/head{}", self.layer, self.kind, h),
            None => format!("{}/{}", self.layer, self.kind),
        }
    }
}

/// Projections of one attention head.
#[derive(Clone, Debug)]
pub struct CAHead {
    /// (d2/H) × d1
    pub wq: Matrix,
    /// (d2/H) × d
    pub wk: Matrix,
    /// (d2/H) × d
    pub wv: Matrix,
    /// d1 × (d2/H)
    pub wo: Matrix,
}

/// One cross-attention layer: query/key/value/output projections per head,
/// with the dimensions recorded.
#[derive(Clone, Debug)]
pub struct CALayer {
    pub heads: Vec<CAHead>,
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub m: usize,
}

impl CALayer {
    pub fn validate(&self) -> Result<()> {
        let h = self.heads.len();
        if h == 0 {
            return Err(Error::invalid_input("CALayer: no heads"));
        }
        if self.d2 % h != 0 {
            return Err(Error::invalid_input(format!(
                "CALayer: d2={} not divisible by H={h}",
                self.d2
            )));
        }
        let dh = self.d2 / h;
        for (i, head) in self.heads.iter().enumerate() {
            let ok = head.wq.shape() == (dh, self.d1)
                && head.wk.shape() == (dh, self.d)
                && head.wv.shape() == (dh, self.d)
                && head.wo.shape() == (self.d1, dh);
            if !ok {
                return Err(Error::invalid_input(format!(
                    "CALayer: head {i} shapes inconsistent with (d={}, d1={}, d2={}, H={h})",
                    self.d, self.d1, self.d2
                )));
            }
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    fn stacked(&self, kind: ProjKind) -> Matrix {
        let dh = self.d2 / self.head_count();
        let mut out = Matrix::zeros(self.d2, self.d);
        for (h, head) in self.heads.iter().enumerate() {
            let w = match kind {
                ProjKind::Key => &head.wk,
                ProjKind::Value => &head.wv,
            };
            for i in 0..dh {
                for j in 0..self.d {
                    out.set(h * dh + i, j, w.get(i, j));
                }
            }
        }
        out
    }

    /// Whole-layer key projection (heads stacked along rows, d2 × d).
    pub fn key_matrix(&self) -> Matrix {
        self.stacked(ProjKind::Key)
    }

    /// Whole-layer value projection (heads stacked along rows, d2 × d).
    pub fn value_matrix(&self) -> Matrix {
        self.stacked(ProjKind::Value)
    }
}

/// Cross-attention forward pass for one query token:
/// `Σ_h Wo^h · (Wv^h E) · softmax((Wk^h E)ᵀ (Wq^h z) / √m)`.
pub fn ca_forward(layer: &CALayer, z: &Matrix, e: &Embedding) -> Result<Matrix> {
    layer.validate()?;
    if z.shape() != (layer.d1, 1) {
        return Err(Error::shape("ca_forward query", z.shape_string(), format!("{}x1", layer.d1)));
    }
    if e.rows() != layer.d || e.cols() == 0 {
        return Err(Error::shape(
            "ca_forward embedding",
            e.shape_string(),
            format!("{}xm", layer.d),
        ));
    }
    let m = e.cols();
    let scale = 1.0 / (m as f64).sqrt();
    let mut out = Matrix::zeros(layer.d1, 1);
    for head in &layer.heads {
        let q = head.wq.matmul(z); // (d2/H) x 1
        let keys = head.wk.matmul(e); // (d2/H) x m
        let logits = keys.transpose().matmul(&q).scale(scale); // m x 1
        let attn = softmax_columns(&logits)?;
        let values = head.wv.matmul(e); // (d2/H) x m
        let mixed = values.matmul(&attn); // (d2/H) x 1
        out = out.add(&head.wo.matmul(&mixed));
    }
    Ok(out)
}

/// Plain projection output `W · E`.
pub fn projection_forward(w: &Matrix, e: &Embedding) -> Result<Matrix> {
    w.checked_matmul(e)
}

/// Per-head coefficients of the output-perturbation bound.
///
/// `key_coef` weights key-projection changes and carries the softmax
/// Lipschitz factor `√(m−1)/m` (together with `1/√m` from the logit
/// scaling); `value_coef` weights value-projection changes and is the
/// Lipschitz constant of the output projection.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HeadCoefficients {
    pub key_coef: f64,
    pub value_coef: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCoefficients {
    pub heads: Vec<HeadCoefficients>,
    /// max over heads, used as the per-layer anchoring weight
    pub key_coef: f64,
    pub value_coef: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCoefficients {
    /// Max spectral norm of the embeddings seen.
    pub embedding_cap: f64,
    /// Max infinity-norm of the query tokens seen.
    pub query_cap: f64,
    pub layers: Vec<LayerCoefficients>,
}

impl BoundCoefficients {
    pub fn validate_for(&self, layer_count: usize) -> Result<()> {
        if self.layers.len() != layer_count {
            return Err(Error::InvalidState(format!(
                "bound coefficients cover {} layers, stack has {layer_count}",
                self.layers.len()
            )));
        }
        Ok(())
    }
}

/// Softmax Lipschitz factor combined with the `1/√m` logit scaling:
/// `√(m−1) / (m√m)`.
fn softmax_path_factor(m: usize) -> f64 {
    let mf = m as f64;
    ((mf - 1.0).sqrt()) / (mf * mf.sqrt())
}

/// Per-head bound coefficients for a single layer given the caps.
pub fn layer_coefficients(layer: &CALayer, embedding_cap: f64, query_cap: f64) -> Result<LayerCoefficients> {
    let factor = softmax_path_factor(layer.m) * embedding_cap * query_cap;
    let mut heads = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let l_ov = spectral_norm(&head.wo.matmul(&head.wv), SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?;
        let l_q = spectral_norm(&head.wq, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?;
        let l_o = spectral_norm(&head.wo, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?;
        heads.push(HeadCoefficients {
            key_coef: factor * l_ov * l_q,
            value_coef: l_o,
        });
    }
    let key_coef = heads.iter().fold(0.0f64, |a, h| a.max(h.key_coef));
    let value_coef = heads.iter().fold(0.0f64, |a, h| a.max(h.value_coef));
    Ok(LayerCoefficients {
        heads,
        key_coef,
        value_coef,
    })
}

/// Precomputes the perturbation-bound coefficients for a layer stack.
///
/// The embedding cap is the max spectral norm over the dataset, the query
/// cap the max infinity-norm over the query set. Both caps and all Lipschitz
/// constants are computed once; they are stable enough over training to be
/// cached.
pub fn compute_bound_coefficients(
    layers: &[CALayer],
    dataset: &[Embedding],
    queries: &[Matrix],
) -> Result<BoundCoefficients> {
    if dataset.is_empty() || queries.is_empty() {
        return Err(Error::invalid_input(
            "compute_bound_coefficients: empty dataset or query set",
        ));
    }
    let mut embedding_cap = 0.0f64;
    for e in dataset {
        embedding_cap = embedding_cap.max(spectral_norm(e, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?);
    }
    let mut query_cap = 0.0f64;
    for z in queries {
        query_cap = query_cap.max(z.max_abs());
    }
    let mut out = BoundCoefficients {
        embedding_cap,
        query_cap,
        layers: Vec::with_capacity(layers.len()),
    };
    for layer in layers {
        layer.validate()?;
        out.layers.push(layer_coefficients(layer, embedding_cap, query_cap)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
    pub m: usize,
    /// Multiplier on the 1/√fan_in weight std.
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
}

fn default_weight_scale() -> f64 {
    1.0
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::invalid_input("StackConfig: zero dimension"));
        }
        if self.m < 2 {
            return Err(Error::invalid_input("StackConfig: m must be at least 2"));
        }
        if self.d2 % self.heads != 0 {
            return Err(Error::invalid_input(format!(
                "StackConfig: d2={} not divisible by heads={}",
                self.d2, self.heads
            )));
        }
        Ok(())
    }
}

/// A stack of cross-attention layers sharing dimensions.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub layers: Vec<CALayer>,
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    format: String,
    heads: usize,
    d: usize,
    d1: usize,
    d2: usize,
    m: usize,
    layer_count: usize,
}

impl LayerStack {
    /// Seeded random stack; weight entries are N(0, scale²/fan_in).
    pub fn random(cfg: &StackConfig, rng: &mut RngStream) -> Result<LayerStack> {
        cfg.validate()?;
        let dh = cfg.d2 / cfg.heads;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut heads = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                heads.push(CAHead {
                    wq: rng.normal_matrix(dh, cfg.d1, cfg.weight_scale / (cfg.d1 as f64).sqrt()),
                    wk: rng.normal_matrix(dh, cfg.d, cfg.weight_scale / (cfg.d as f64).sqrt()),
                    wv: rng.normal_matrix(dh, cfg.d, cfg.weight_scale / (cfg.d as f64).sqrt()),
                    wo: rng.normal_matrix(cfg.d1, dh, cfg.weight_scale / (dh as f64).sqrt()),
                });
            }
            layers.push(CALayer {
                heads,
                d: cfg.d,
                d1: cfg.d1,
                d2: cfg.d2,
                m: cfg.m,
            });
        }
        Ok(LayerStack { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let l = &self.layers[0];
        (l.d, l.d1, l.d2, l.m)
    }

    /// Whole-layer key/value projection refs in a fixed order
    /// (layer ascending, key before value).
    pub fn projection_refs(&self) -> Vec<ProjectionRef> {
        let mut refs = Vec::with_capacity(2 * self.layers.len());
        for l in 0..self.layers.len() {
            refs.push(ProjectionRef::layer_key(l));
            refs.push(ProjectionRef::layer_value(l));
        }
        refs
    }

    pub fn projection_matrix(&self, proj: &ProjectionRef) -> Result<Matrix> {
        let layer = self
            .layers
            .get(proj.layer)
            .ok_or_else(|| Error::invalid_input(format!("no layer {}", proj.layer)))?;
        match proj.head {
            None => Ok(layer.stacked(proj.kind)),
            Some(h) => {
                let head = layer
                    .heads
                    .get(h)
                    .ok_or_else(|| Error::invalid_input(format!("no head {h}")))?;
                Ok(match proj.kind {
                    ProjKind::Key => head.wk.clone(),
                    ProjKind::Value => head.wv.clone(),
                })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (d, d1, d2, m) = self.dims();
        let header = StackHeader {
            format: "ca-stack-v1".into(),
            heads: self.layers[0].head_count(),
            d,
            d1,
            d2,
            m,
            layer_count: self.layers.len(),
        };
        let mut names = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                names.push((format!("layer{l}/head{h}/wq"), &head.wq));
                names.push((format!("layer{l}/head{h}/wk"), &head.wk));
                names.push((format!("layer{l}/head{h}/wv"), &head.wv));
                names.push((format!("layer{l}/head{h}/wo"), &head.wo));
            }
        }
        let mats: Vec<(&str, &Matrix)> = names.iter().map(|(n, m)| (n.as_str(), *m)).collect();
        numkit::io::write_container(path, &header, &mats)
    }

    pub fn load(path: &Path) -> Result<LayerStack> {
        let (header, mats): (StackHeader, _) = numkit::io::read_container(path)?;
        if header.format != "ca-stack-v1" {
            return Err(Error::Format(format!("unexpected stack format {}", header.format)));
        }
        let mut layers = Vec::with_capacity(header.layer_count);
        for l in 0..header.layer_count {
            let mut heads = Vec::with_capacity(header.heads);
            for h in 0..header.heads {
                heads.push(CAHead {
                    wq: numkit::io::take_matrix(&mats, &format!("layer{l}/head{h}/wq"))?,
                    wk: numkit::io::take_matrix(&mats, &format!("layer{l}/head{h}/wk"))?,
                    wv: numkit::io::take_matrix(&mats, &format!("layer{l}/head{h}/wv"))?,
                    wo: numkit::io::take_matrix(&mats, &format!("layer{l}/head{h}/wo"))?,
                });
            }
            let layer = CALayer {
                heads,
                d: header.d,
                d1: header.d1,
                d2: header.d2,
                m: header.m,
            };
            layer.validate()?;
            layers.push(layer);
        }
        Ok(LayerStack { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_layer(rng: &mut RngStream, heads: usize) -> CALayer {
        let cfg = StackConfig {
            layers: 1,
            heads,
            d: 8,
            d1: 6,
            d2: 8,
            m: 4,
            weight_scale: 1.0,
        };
        LayerStack::random(&cfg, rng).unwrap().layers.pop().unwrap()
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = RngStream::new(3, 0);
        let mut layer = small_layer(&mut rng, 1);
        layer.heads[0].wv = Matrix::zeros(8, 8);
        let z = rng.normal_matrix(6, 1, 1.0);
        let e = rng.normal_matrix(8, 4, 1.0);
        let out = ca_forward(&layer, &z, &e).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_softmax_is_one() {
        let mut rng = RngStream::new(4, 0);
        let layer = small_layer(&mut rng, 1);
        let z = rng.normal_matrix(6, 1, 1.0);
        let e = rng.normal_matrix(8, 1, 1.0);
        let out = ca_forward(&layer, &z, &e).unwrap();
        // With m = 1 the softmax weight is exactly 1.
        let direct = layer.heads[0]
            .wo
            .matmul(&layer.heads[0].wv.matmul(&e));
        for (a, b) in out.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let mut rng = RngStream::new(5, 0);
        let layer = small_layer(&mut rng, 2);
        let z = rng.normal_matrix(5, 1, 1.0); // wrong d1
        let e = rng.normal_matrix(8, 4, 1.0);
        assert!(ca_forward(&layer, &z, &e).is_err());
        let z = rng.normal_matrix(6, 1, 1.0);
        let e = rng.normal_matrix(7, 4, 1.0); // wrong d
        assert!(ca_forward(&layer, &z, &e).is_err());
    }

    #[test]
    fn projection_forward_identity_and_zero() {
        let e = RngStream::new(6, 0).normal_matrix(5, 3, 1.0);
        let out = projection_forward(&Matrix::identity(5), &e).unwrap();
        assert_eq!(out.data(), e.data());
        let out = projection_forward(&Matrix::zeros(4, 5), &e).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(projection_forward(&Matrix::zeros(4, 6), &e).is_err());
    }

    #[test]
    fn zero_weights_give_zero_coefficients() {
        let layer = CALayer {
            heads: vec![CAHead {
                wq: Matrix::zeros(8, 6),
                wk: Matrix::zeros(8, 8),
                wv: Matrix::zeros(8, 8),
                wo: Matrix::zeros(6, 8),
            }],
            d: 8,
            d1: 6,
            d2: 8,
            m: 4,
        };
        let dataset = vec![Matrix::identity(8).matmul(&Matrix::from_vec(8, 4, vec![1.0; 32]))];
        let queries = vec![Matrix::col_vec(&[1.0; 6])];
        let coefs = compute_bound_coefficients(&[layer], &dataset, &queries).unwrap();
        assert_eq!(coefs.layers[0].key_coef, 0.0);
        assert_eq!(coefs.layers[0].value_coef, 0.0);
    }

    #[test]
    fn identity_projections_match_plugin_formula() {
        // H=1, square identity projections, caps 1, m=4:
        // key coefficient = sqrt(3)/8, value coefficient = 1.
        let n = 6;
        let layer = CALayer {
            heads: vec![CAHead {
                wq: Matrix::identity(n),
                wk: Matrix::identity(n),
                wv: Matrix::identity(n),
                wo: Matrix::identity(n),
            }],
            d: n,
            d1: n,
            d2: n,
            m: 4,
        };
        let coefs = layer_coefficients(&layer, 1.0, 1.0).unwrap();
        assert!((coefs.key_coef - 3.0f64.sqrt() / 8.0).abs() < 1e-9);
        assert!((coefs.value_coef - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coefficients_require_nonempty_inputs() {
        let mut rng = RngStream::new(8, 0);
        let layer = small_layer(&mut rng, 1);
        let res = compute_bound_coefficients(&[layer], &[], &[]);
        assert!(matches!(res, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stack_round_trip() {
        let cfg = StackConfig {
            layers: 2,
            heads: 2,
            d: 8,
            d1: 6,
            d2: 8,
            m: 4,
            weight_scale: 1.0,
        };
        let mut rng = RngStream::new(11, 0);
        let stack = LayerStack::random(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stack.bin");
        stack.save(&path).unwrap();
        let loaded = LayerStack::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in stack.layers.iter().zip(&loaded.layers) {
            for (ha, hb) in a.heads.iter().zip(&b.heads) {
                assert_eq!(ha.wq.data(), hb.wq.data());
                assert_eq!(ha.wo.data(), hb.wo.data());
            }
        }
    }
}
