//! Patch graph construction and gated dual-attention message passing.
//!
//! Patches of one image form a fully connected graph (self-loops included).
//! Edge scores multiply two attentions: a concatenation-based score
//! `A1(p,q) = a^T [W h_p || W h_q]` and a sigmoid-gated dot-product score
//! `sigmoid((W h_p)^T (W h_q))`. Scores go through LeakyReLU and a row
//! softmax to become mixing coefficients, which linearly combine the
//! transformed neighbor features.
//!
//! The normalized-adjacency propagation over the same all-ones graph is kept
//! as a baseline: its coefficient matrix is `gcn_normalize(P)` (all entries
//! `1/P`), usable directly with [`message_pass`].

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Nonlinearity applied by a message-passing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

/// Which edge-score variant drives the attention coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Concatenation-based score only.
    A1,
    /// Dot-product score only.
    A2,
    /// Product of the concatenation score and the sigmoid-gated dot product.
    Combined,
    /// Each patch attends to itself alone (edge-removal ablation).
    SelfOnly,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::A1,
        AttentionMode::A2,
        AttentionMode::Combined,
        AttentionMode::SelfOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::A1 => "a1",
            AttentionMode::A2 => "a2",
            AttentionMode::Combined => "combined",
            AttentionMode::SelfOnly => "selfonly",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a1" => Ok(AttentionMode::A1),
            "a2" => Ok(AttentionMode::A2),
            "combined" => Ok(AttentionMode::Combined),
            "selfonly" | "self-only" => Ok(AttentionMode::SelfOnly),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One attention layer: transform `W` (d_out x d_in), attention vector `a`
/// (1 x 2*d_out), LeakyReLU slope, and the layer nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Mat,
    pub a: Mat,
    pub negative_slope: f64,
    pub activation: Activation,
}

impl LayerParams {
    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    fn check(&self) -> Result<()> {
        if self.a.rows() != 1 || self.a.cols() != 2 * self.d_out() {
            return Err(Error::dim(
                "layer",
                format!(
                    "attention vector has {} entries, expected {}",
                    self.a.len(),
                    2 * self.d_out()
                ),
            ));
        }
        if !self.w.is_finite() || !self.a.is_finite() || !self.negative_slope.is_finite() {
            return Err(Error::Config("layer parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Stack of attention layers with chained dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams {
    pub layers: Vec<LayerParams>,
}

impl GraphParams {
    pub fn new(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("graph needs at least one layer".into()));
        }
        for layer in &layers {
            layer.check()?;
        }
        for pair in layers.windows(2) {
            if pair[1].d_in() != pair[0].d_out() {
                return Err(Error::dim(
                    "graph",
                    format!(
                        "layer output dim {} does not chain into next input dim {}",
                        pair[0].d_out(),
                        pair[1].d_in()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Transformed features `G = H W^T`, shared by scores and messages.
pub(crate) fn transform(h: &Mat, layer: &LayerParams) -> Result<Mat> {
    layer.check()?;
    if h.cols() != layer.d_in() {
        return Err(Error::dim(
            "transform",
            format!("features have dim {}, layer expects {}", h.cols(), layer.d_in()),
        ));
    }
    Ok(h.matmul_nt(&layer.w))
}

/// Raw edge scores `E` (P x P) for the requested attention mode.
///
/// In `SelfOnly` mode off-diagonal entries are `-inf` markers and the
/// diagonal is zero, which one-hots each row after the softmax.
pub fn edge_scores(h: &Mat, layer: &LayerParams, mode: AttentionMode) -> Result<Mat> {
    let p = h.rows();
    if h.cols() != layer.d_in() {
        return Err(Error::dim(
            "edge_scores",
            format!("features have dim {}, layer expects {}", h.cols(), layer.d_in()),
        ));
    }
    if mode == AttentionMode::SelfOnly {
        layer.check()?;
        let mut e = Mat::filled(p, p, f64::NEG_INFINITY);
        for i in 0..p {
            e[(i, i)] = 0.0;
        }
        return Ok(e);
    }
    let g = transform(h, layer)?;
    let d_out = layer.d_out();
    let a = layer.a.data();
    let (a_self, a_neigh) = a.split_at(d_out);

    let mut e = Mat::zeros(p, p);
    match mode {
        AttentionMode::A1 => {
            let (u, v) = pair_terms(&g, a_self, a_neigh);
            for i in 0..p {
                for j in 0..p {
                    e[(i, j)] = u[i] + v[j];
                }
            }
        }
        AttentionMode::A2 => {
            e = g.matmul_nt(&g);
        }
        AttentionMode::Combined => {
            let (u, v) = pair_terms(&g, a_self, a_neigh);
            let dots = g.matmul_nt(&g);
            for i in 0..p {
                for j in 0..p {
                    e[(i, j)] = (u[i] + v[j]) * sigmoid(dots[(i, j)]);
                }
            }
        }
        AttentionMode::SelfOnly => unreachable!(),
    }
    Ok(e)
}

fn pair_terms(g: &Mat, a_self: &[f64], a_neigh: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dot = |row: &[f64], a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
    let u = (0..g.rows()).map(|i| dot(g.row(i), a_self)).collect();
    let v = (0..g.rows()).map(|i| dot(g.row(i), a_neigh)).collect();
    (u, v)
}

/// Row-stochastic coefficients: `softmax_q(LeakyReLU(E))` with max-shifted
/// exponentials. `-inf` markers come out as exactly zero.
pub fn attention_coeffs(e: &Mat, negative_slope: f64) -> Result<Mat> {
    if e.rows() != e.cols() {
        return Err(Error::dim(
            "attention_coeffs",
            format!("score matrix is {}x{}", e.rows(), e.cols()),
        ));
    }
    let p = e.rows();
    let mut alpha = Mat::zeros(p, p);
    let mut scores = vec![0.0f64; p];
    for i in 0..p {
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..p {
            let raw = e[(i, j)];
            let s = if raw == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                leaky_relu(raw, negative_slope)
            };
            scores[j] = s;
            row_max = row_max.max(s);
        }
        if row_max == f64::NEG_INFINITY {
            return Err(Error::AllMasked { row: i });
        }
        let mut sum = 0.0;
        for j in 0..p {
            let w = if scores[j] == f64::NEG_INFINITY {
                0.0
            } else {
                (scores[j] - row_max).exp()
            };
            alpha[(i, j)] = w;
            sum += w;
        }
        for j in 0..p {
            alpha[(i, j)] /= sum;
        }
    }
    Ok(alpha)
}

/// One propagation step: `out[p] = activation(sum_q alpha[p][q] * W h_q)`.
pub fn message_pass(h: &Mat, layer: &LayerParams, alpha: &Mat) -> Result<Mat> {
    message_pass_with(h, layer, alpha, layer.activation)
}

pub(crate) fn message_pass_with(
    h: &Mat,
    layer: &LayerParams,
    alpha: &Mat,
    activation: Activation,
) -> Result<Mat> {
    if alpha.rows() != h.rows() || alpha.cols() != h.rows() {
        return Err(Error::dim(
            "message_pass",
            format!(
                "coefficients are {}x{} for {} patches",
                alpha.rows(),
                alpha.cols(),
                h.rows()
            ),
        ));
    }
    let g = transform(h, layer)?;
    Ok(alpha.matmul(&g).map(|x| activation.apply(x)))
}

/// Full refinement pass over all layers. Hidden layers use their configured
/// activation; the last layer is forced to identity so signed statistics
/// survive into pooling.
pub fn gat_forward(h0: &Mat, params: &GraphParams, mode: AttentionMode) -> Result<Mat> {
    let last = params.layers.len() - 1;
    let mut h = h0.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let e = edge_scores(&h, layer, mode)?;
        let alpha = attention_coeffs(&e, layer.negative_slope)?;
        let act = if i == last {
            Activation::Identity
        } else {
            layer.activation
        };
        h = message_pass_with(&h, layer, &alpha, act)?;
    }
    Ok(h)
}

/// Coefficients of the symmetrically normalized all-ones adjacency with
/// self-loops: every entry is `1/P`.
pub fn gcn_normalize(p: usize) -> Mat {
    Mat::filled(p, p, 1.0 / p as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Mat, a: Vec<f64>) -> LayerParams {
        LayerParams {
            w,
            a: Mat::row_vec(&a),
            negative_slope: 0.2,
            activation: Activation::Identity,
        }
    }

    #[test]
    fn combined_zero_attention_vector_gives_zero_scores() {
        let h = Mat::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let l = layer(Mat::identity(2), vec![0.0; 4]);
        let e = edge_scores(&h, &l, AttentionMode::Combined).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn orthogonal_patches_gate_at_half() {
        // h_p ⟂ h_q  =>  sigma(0) = 0.5, so E[p][q] = 0.5 * A1(p,q)
        let h = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = layer(Mat::identity(2), vec![1.0, -0.5, 2.0, 0.25]);
        let combined = edge_scores(&h, &l, AttentionMode::Combined).unwrap();
        let a1 = edge_scores(&h, &l, AttentionMode::A1).unwrap();
        assert!((combined[(0, 1)] - 0.5 * a1[(0, 1)]).abs() < 1e-15);
        assert!((combined[(1, 0)] - 0.5 * a1[(1, 0)]).abs() < 1e-15);
    }

    #[test]
    fn scalar_example_matches_hand_evaluation() {
        // P=2, d=1, W=[1], a=[1,1], h=[1],[2]
        let h = Mat::from_rows(&[vec![1.0], vec![2.0]]);
        let l = layer(Mat::identity(1), vec![1.0, 1.0]);
        let a1 = edge_scores(&h, &l, AttentionMode::A1).unwrap();
        let a2 = edge_scores(&h, &l, AttentionMode::A2).unwrap();
        let combined = edge_scores(&h, &l, AttentionMode::Combined).unwrap();
        assert_eq!(a1[(0, 1)], 3.0);
        assert_eq!(a2[(0, 1)], 2.0);
        let expected = 3.0 / (1.0 + (-2.0f64).exp());
        assert!((combined[(0, 1)] - expected).abs() < 1e-14);
    }

    #[test]
    fn equal_scores_spread_uniformly() {
        let e = Mat::filled(4, 4, 1.7);
        let alpha = attention_coeffs(&e, 0.2).unwrap();
        for v in alpha.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ln2_row_gives_two_thirds() {
        let e = Mat::from_rows(&[vec![2.0f64.ln(), 0.0], vec![0.0, 0.0]]);
        let alpha = attention_coeffs(&e, 0.2).unwrap();
        assert!((alpha[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((alpha[(0, 1)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn self_only_rows_are_one_hot() {
        let h = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let l = layer(Mat::identity(2), vec![1.0; 4]);
        let e = edge_scores(&h, &l, AttentionMode::SelfOnly).unwrap();
        let alpha = attention_coeffs(&e, 0.2).unwrap();
        assert_eq!(alpha, Mat::identity(3));
    }

    #[test]
    fn all_masked_row_is_an_error() {
        let e = Mat::filled(2, 2, f64::NEG_INFINITY);
        assert!(matches!(
            attention_coeffs(&e, 0.2),
            Err(Error::AllMasked { row: 0 })
        ));
    }

    #[test]
    fn identity_coefficients_apply_transform_only() {
        let h = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = Mat::from_rows(&[vec![2.0, 0.0], vec![1.0, -1.0]]);
        let l = layer(w.clone(), vec![0.0; 4]);
        let out = message_pass(&h, &l, &Mat::identity(2)).unwrap();
        assert_eq!(out, h.matmul_nt(&w));
    }

    #[test]
    fn scalar_message_pass_with_relu() {
        let h = Mat::from_rows(&[vec![1.0], vec![3.0]]);
        let mut l = layer(Mat::from_vec(1, 1, vec![2.0]), vec![0.0, 0.0]);
        l.activation = Activation::Relu;
        let alpha = Mat::filled(2, 2, 0.5);
        let out = message_pass(&h, &l, &alpha).unwrap();
        assert_eq!(out.data(), &[4.0, 4.0]);
    }

    #[test]
    fn uniform_identity_layer_mixes_rows_uniformly() {
        let h = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let params = GraphParams::new(vec![layer(Mat::identity(2), vec![0.0; 4])]).unwrap();
        let out = gat_forward(&h, &params, AttentionMode::Combined).unwrap();
        for v in out.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn self_only_identity_returns_input() {
        let h = Mat::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]);
        let params = GraphParams::new(vec![layer(Mat::identity(2), vec![3.0; 4])]).unwrap();
        let out = gat_forward(&h, &params, AttentionMode::SelfOnly).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn self_only_isolates_patches_exactly() {
        let mut h = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.5]]);
        let w = Mat::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]);
        let params = GraphParams::new(vec![layer(w, vec![0.4, 1.0, -0.3, 2.0])]).unwrap();
        let before = gat_forward(&h, &params, AttentionMode::SelfOnly).unwrap();
        h[(2, 0)] = 99.0;
        h[(2, 1)] = -99.0;
        let after = gat_forward(&h, &params, AttentionMode::SelfOnly).unwrap();
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
    }

    #[test]
    fn gcn_normalize_small_cases() {
        assert_eq!(gcn_normalize(1), Mat::from_vec(1, 1, vec![1.0]));
        assert_eq!(gcn_normalize(2), Mat::filled(2, 2, 0.5));
        assert_eq!(gcn_normalize(4), Mat::filled(4, 4, 0.25));
    }

    #[test]
    fn dim_mismatch_reported() {
        let h = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let l = layer(Mat::identity(2), vec![0.0; 4]);
        assert!(matches!(
            edge_scores(&h, &l, AttentionMode::Combined),
            Err(Error::DimMismatch { .. })
        ));
    }
}
