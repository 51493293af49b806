//! Network building blocks: shared MLP, EdgeConv feature update, pooling and
//! the log-softmax head.
//!
//! The EdgeConv update follows the tensor pipeline
//! `[n×c] → gather [n×k×c] → edge features [n×k×2c] → MLP [n×k×a] → max [n×a]`,
//! materialising every intermediate so each stage can be timed and sized.

use crate::error::{Error, Result};
use crate::knn::{knn_graph_with, KnnGraph};
use crate::tensor::{gather_rows, matmul_fused, reduce_max_axis, ColumnAffine, Epilogue, Tensor, ThreadMode};

pub const DEFAULT_BN_EPS: f32 = 1e-5;
pub const DEFAULT_DROPOUT: f32 = 0.5;

/// Shape and per-layer flags of a shared MLP `{c_in, a_1, …, a_m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    channels: Vec<usize>,
    batchnorm: Vec<bool>,
    relu: Vec<bool>,
    /// Dropout between layers. Only the trainer uses it; inference treats it as identity.
    pub dropout: f32,
}

impl MlpSpec {
    /// Every layer gets the same batchnorm / ReLU flags.
    pub fn uniform(channels: &[usize], batchnorm: bool, relu: bool) -> Result<Self> {
        let layers = channels.len().saturating_sub(1);
        Self::with_flags(channels, vec![batchnorm; layers], vec![relu; layers], 0.0)
    }

    pub fn with_flags(channels: &[usize], batchnorm: Vec<bool>, relu: Vec<bool>, dropout: f32) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output width"));
        }
        if channels.contains(&0) {
            return Err(Error::config(format!("zero-width MLP layer in {channels:?}")));
        }
        let layers = channels.len() - 1;
        if batchnorm.len() != layers || relu.len() != layers {
            return Err(Error::config("MLP flag lists must have one entry per layer"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(MlpSpec {
            channels: channels.to_vec(),
            batchnorm,
            relu,
            dropout,
        })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn c_in(&self) -> usize {
        self.channels[0]
    }

    pub fn c_out(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn has_batchnorm(&self, layer: usize) -> bool {
        self.batchnorm[layer]
    }

    pub fn has_relu(&self, layer: usize) -> bool {
        self.relu[layer]
    }

    /// Same shape with batchnorm dropped from every layer, for use with folded params.
    pub fn without_batchnorm(&self) -> Self {
        MlpSpec {
            batchnorm: vec![false; self.num_layers()],
            ..self.clone()
        }
    }
}

/// Inference-mode batch normalisation with frozen running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(width: usize, eps: f32) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::full(&[width], 1.0),
            eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[c_out×c_in]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
}

impl Linear {
    pub fn c_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }

    /// Folds the batchnorm into weight and bias:
    /// `w' = w·s`, `b' = (b − mean)·s + beta` with `s = gamma / sqrt(var + eps)`.
    pub fn folded(&self) -> Linear {
        let Some(bn) = &self.bn else {
            return self.clone();
        };
        let (c_out, c_in) = (self.c_out(), self.c_in());
        let mut weight = self.weight.clone();
        let mut bias = self.bias.clone();
        for o in 0..c_out {
            let scale = bn.gamma.data()[o] as f64 / (bn.running_var.data()[o] as f64 + bn.eps as f64).sqrt();
            for w in &mut weight.data_mut()[o * c_in..(o + 1) * c_in] {
                *w = (*w as f64 * scale) as f32;
            }
            let b = self.bias.data()[o] as f64;
            bias.data_mut()[o] = ((b - bn.running_mean.data()[o] as f64) * scale + bn.beta.data()[o] as f64) as f32;
        }
        Linear { weight, bias, bn: None }
    }
}

/// Learnable parameters of one shared MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub layers: Vec<Linear>,
}

impl LayerParams {
    pub fn folded(&self) -> LayerParams {
        LayerParams {
            layers: self.layers.iter().map(Linear::folded).collect(),
        }
    }

    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::config(format!(
                "MLP has {} layers of parameters, spec wants {}",
                self.layers.len(),
                spec.num_layers()
            )));
        }
        for (l, lin) in self.layers.iter().enumerate() {
            let (c_in, c_out) = (spec.channels[l], spec.channels[l + 1]);
            if lin.weight.shape() != [c_out, c_in] {
                return Err(Error::config(format!(
                    "layer {l}: weight {:?}, expected [{c_out}, {c_in}]",
                    lin.weight.shape()
                )));
            }
            if lin.bias.shape() != [c_out] {
                return Err(Error::config(format!("layer {l}: bias {:?}, expected [{c_out}]", lin.bias.shape())));
            }
            match (&lin.bn, spec.batchnorm[l]) {
                (Some(bn), true) => {
                    for (name, t) in [
                        ("gamma", &bn.gamma),
                        ("beta", &bn.beta),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        if t.shape() != [c_out] {
                            return Err(Error::config(format!("layer {l}: bn {name} {:?}, expected [{c_out}]", t.shape())));
                        }
                    }
                    if bn.running_var.data().iter().any(|&v| !(v > 0.0)) {
                        return Err(Error::config(format!("layer {l}: running_var must be positive")));
                    }
                }
                (None, false) => {}
                (Some(_), false) => return Err(Error::config(format!("layer {l}: unexpected batchnorm parameters"))),
                (None, true) => return Err(Error::config(format!("layer {l}: missing batchnorm parameters"))),
            }
        }
        Ok(())
    }
}

/// Applies the shared MLP to every row of `x: [… × c_in]`.
pub fn mlp_forward(spec: &MlpSpec, params: &LayerParams, x: &Tensor) -> Result<Tensor> {
    mlp_forward_with(spec, params, x, ThreadMode::Single)
}

pub fn mlp_forward_with(spec: &MlpSpec, params: &LayerParams, x: &Tensor, mode: ThreadMode) -> Result<Tensor> {
    params.validate(spec)?;
    let last = *x.shape().last().unwrap();
    if last != spec.c_in() {
        return Err(Error::Shape {
            op: "mlp_forward",
            left: x.shape().to_vec(),
            right: vec![spec.c_in()],
        });
    }
    let rows = x.len() / last;
    let mut cur: Option<Vec<f32>> = None;
    for (l, lin) in params.layers.iter().enumerate() {
        let (c_in, c_out) = (lin.c_in(), lin.c_out());
        let wt = lin.weight.transpose()?;
        let denom: Option<Vec<f32>> = lin.bn.as_ref().map(|bn| {
            bn.running_var.data().iter().map(|&v| (v + bn.eps).sqrt()).collect()
        });
        let epi = Epilogue {
            bias: Some(lin.bias.data()),
            affine: lin.bn.as_ref().zip(denom.as_deref()).map(|(bn, denom)| ColumnAffine {
                shift: bn.running_mean.data(),
                denom,
                scale: bn.gamma.data(),
                offset: bn.beta.data(),
            }),
            relu: spec.relu[l],
        };
        let input = cur.as_deref().unwrap_or(x.data());
        let mut out = vec![0.0f32; rows * c_out];
        matmul_fused(input, wt.data(), c_in, c_out, &mut out, &epi, mode);
        cur = Some(out);
    }
    let cur = cur.expect("validated spec has at least one layer");
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = spec.c_out();
    Tensor::new(shape, cur)
}

fn check_graph(x: &Tensor, g: &KnnGraph) -> Result<(usize, usize)> {
    if x.rank() != 2 || x.dim(0) != g.n() {
        return Err(Error::Shape {
            op: "edge_features",
            left: x.shape().to_vec(),
            right: vec![g.n(), g.k()],
        });
    }
    Ok((x.dim(0), x.dim(1)))
}

/// `out[i][j] = x[i] ‖ (x[g[i][j]] − x[i])`, shape `[n×k×2c]`.
pub fn edge_features(x: &Tensor, g: &KnnGraph) -> Result<Tensor> {
    check_graph(x, g)?;
    let gathered = gather_rows(x, g.neighbors())?;
    edge_features_from_gathered(x, &gathered)
}

/// Edge features from an already gathered `[n×k×c]` neighbour tensor.
pub fn edge_features_from_gathered(x: &Tensor, gathered: &Tensor) -> Result<Tensor> {
    let (n, c) = (x.dim(0), x.dim(1));
    if gathered.rank() != 3 || gathered.dim(0) != n || gathered.dim(2) != c {
        return Err(Error::Shape {
            op: "edge_features",
            left: x.shape().to_vec(),
            right: gathered.shape().to_vec(),
        });
    }
    let k = gathered.dim(1);
    let mut out = Vec::with_capacity(n * k * 2 * c);
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..k {
            let xj = &gathered.data()[(i * k + j) * c..(i * k + j + 1) * c];
            out.extend_from_slice(xi);
            out.extend(xj.iter().zip(xi).map(|(a, b)| a - b));
        }
    }
    Tensor::new(vec![n, k, 2 * c], out)
}

/// EdgeConv update over a fixed graph: channel-wise max over each node's edges
/// of the shared MLP applied to its edge features.
pub fn edgeconv_update(x: &Tensor, g: &KnnGraph, spec: &MlpSpec, params: &LayerParams) -> Result<Tensor> {
    edgeconv_update_with(x, g, spec, params, ThreadMode::Single)
}

pub fn edgeconv_update_with(
    x: &Tensor,
    g: &KnnGraph,
    spec: &MlpSpec,
    params: &LayerParams,
    mode: ThreadMode,
) -> Result<Tensor> {
    check_graph(x, g)?;
    let gathered = gather_rows(x, g.neighbors())?;
    edgeconv_from_gathered(x, &gathered, spec, params, mode)
}

/// The update stage proper, starting from the gathered neighbour tensor.
pub fn edgeconv_from_gathered(
    x: &Tensor,
    gathered: &Tensor,
    spec: &MlpSpec,
    params: &LayerParams,
    mode: ThreadMode,
) -> Result<Tensor> {
    if spec.c_in() != 2 * x.dim(1) {
        return Err(Error::config(format!(
            "EdgeConv MLP takes {} inputs but edge features are {} wide",
            spec.c_in(),
            2 * x.dim(1)
        )));
    }
    let edges = edge_features_from_gathered(x, gathered)?;
    let messages = mlp_forward_with(spec, params, &edges, mode)?;
    reduce_max_axis(&messages, 1)
}

/// kNN graph over `x` followed by the EdgeConv update on that graph.
pub fn dynamic_edgeconv(x: &Tensor, k: usize, spec: &MlpSpec, params: &LayerParams) -> Result<(Tensor, KnnGraph)> {
    dynamic_edgeconv_with(x, k, spec, params, ThreadMode::Single)
}

pub fn dynamic_edgeconv_with(
    x: &Tensor,
    k: usize,
    spec: &MlpSpec,
    params: &LayerParams,
    mode: ThreadMode,
) -> Result<(Tensor, KnnGraph)> {
    let g = knn_graph_with(x, k, mode)?;
    let y = edgeconv_update_with(x, &g, spec, params, mode)?;
    Ok((y, g))
}

/// Per-point shared MLP with no graph and no aggregation.
pub fn pointnet_update(x: &Tensor, spec: &MlpSpec, params: &LayerParams) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: "pointnet_update",
            left: x.shape().to_vec(),
            right: vec![spec.c_in()],
        });
    }
    mlp_forward(spec, params, x)
}

/// `[n×c] → [c]`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: "global_max_pool",
            left: x.shape().to_vec(),
            right: vec![],
        });
    }
    reduce_max_axis(x, 0)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::Shape {
            op: "log_softmax",
            left: x.shape().to_vec(),
            right: vec![],
        });
    }
    let max = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = x.data().iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    Ok(Tensor::vector(x.data().iter().map(|&v| v - lse).collect()))
}

/// Inference-mode dropout.
pub fn dropout_inference(x: Tensor) -> Tensor {
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::{knn_graph, IndexMatrix};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    fn random_params(spec: &MlpSpec, rng: &mut Rng) -> LayerParams {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (i, o) = (spec.channels()[l], spec.channels()[l + 1]);
                let bound = 1.0 / (i as f32).sqrt();
                Linear {
                    weight: Tensor::from_fn(&[o, i], |_| rng.uniform(-bound, bound)),
                    bias: Tensor::from_fn(&[o], |_| rng.uniform(-bound, bound)),
                    bn: spec.has_batchnorm(l).then(|| BatchNorm {
                        gamma: Tensor::from_fn(&[o], |_| rng.uniform(0.5, 1.5)),
                        beta: Tensor::from_fn(&[o], |_| rng.uniform(-0.5, 0.5)),
                        running_mean: Tensor::from_fn(&[o], |_| rng.uniform(-0.5, 0.5)),
                        running_var: Tensor::from_fn(&[o], |_| rng.uniform(0.5, 1.5)),
                        eps: DEFAULT_BN_EPS,
                    }),
                }
            })
            .collect();
        LayerParams { layers }
    }

    fn single(w: &[f32], c_in: usize, relu: bool) -> (MlpSpec, LayerParams) {
        let c_out = w.len() / c_in;
        let spec = MlpSpec::uniform(&[c_in, c_out], false, relu).unwrap();
        let params = LayerParams {
            layers: vec![Linear {
                weight: Tensor::new(vec![c_out, c_in], w.to_vec()).unwrap(),
                bias: Tensor::zeros(&[c_out]),
                bn: None,
            }],
        };
        (spec, params)
    }

    #[test]
    fn unit_batchnorm_is_identity() {
        let mut rng = Rng::new(1);
        let spec = MlpSpec::uniform(&[4, 6], true, false).unwrap();
        let mut params = random_params(&spec, &mut rng);
        params.layers[0].bn = Some(BatchNorm::identity(6, 0.0));
        let x = random(&[5, 4], &mut rng);
        let with_bn = mlp_forward(&spec, &params, &x).unwrap();
        let plain_spec = spec.without_batchnorm();
        let mut plain = params.clone();
        plain.layers[0].bn = None;
        assert_eq!(with_bn, mlp_forward(&plain_spec, &plain, &x).unwrap());
    }

    // Scalar evaluation of linear → batchnorm → ReLU, one element at a time.
    #[test]
    fn mlp_matches_scalar_oracle_bitwise() {
        let mut rng = Rng::new(12);
        for &(c_in, c_out, relu) in &[(5, 3, true), (7, 37, false), (16, 64, true)] {
            let spec = MlpSpec::uniform(&[c_in, c_out], true, relu).unwrap();
            let params = random_params(&spec, &mut rng);
            let x = random(&[11, c_in], &mut rng);
            let y = mlp_forward(&spec, &params, &x).unwrap();
            let lin = &params.layers[0];
            let bn = lin.bn.as_ref().unwrap();
            for i in 0..11 {
                for o in 0..c_out {
                    let mut v = 0.0f32;
                    for c in 0..c_in {
                        v += x.data()[i * c_in + c] * lin.weight.data()[o * c_in + c];
                    }
                    v += lin.bias.data()[o];
                    v = (v - bn.running_mean.data()[o]) / (bn.running_var.data()[o] + bn.eps).sqrt()
                        * bn.gamma.data()[o]
                        + bn.beta.data()[o];
                    if relu {
                        v = v.max(0.0);
                    }
                    assert_eq!(y.data()[i * c_out + o].to_bits(), v.to_bits(), "row {i} col {o}");
                }
            }
        }
    }

    #[test]
    fn relu_clamps_hand_example() {
        let (spec, params) = single(&[1.0, 1.0], 2, true);
        let y = mlp_forward(&spec, &params, &Tensor::from_rows(&[[1.0, -3.0]])).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn mlp_broadcasts_leading_dims() {
        let mut rng = Rng::new(2);
        let spec = MlpSpec::uniform(&[3, 5, 2], true, true).unwrap();
        let params = random_params(&spec, &mut rng);
        let x = random(&[4, 6, 3], &mut rng);
        let y = mlp_forward(&spec, &params, &x).unwrap();
        assert_eq!(y.shape(), &[4, 6, 2]);
        let flat = mlp_forward(&spec, &params, &x.clone().reshape(&[24, 3]).unwrap()).unwrap();
        assert_eq!(y.data(), flat.data());
    }

    #[test]
    fn fold_matches_unfolded_on_random_params() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let spec = MlpSpec::uniform(&[6, 8, 4], true, true).unwrap();
            let params = random_params(&spec, &mut rng);
            let x = random(&[10, 6], &mut rng);
            let a = mlp_forward(&spec, &params, &x).unwrap();
            let b = mlp_forward(&spec.without_batchnorm(), &params.folded(), &x).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6, "{}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn mlp_shape_errors() {
        let mut rng = Rng::new(4);
        let spec = MlpSpec::uniform(&[3, 2], false, true).unwrap();
        let params = random_params(&spec, &mut rng);
        assert!(mlp_forward(&spec, &params, &Tensor::zeros(&[2, 4])).is_err());
        let other = MlpSpec::uniform(&[3, 5], false, true).unwrap();
        assert!(matches!(mlp_forward(&other, &params, &Tensor::zeros(&[2, 3])), Err(Error::Config(_))));
        let bn_spec = MlpSpec::uniform(&[3, 2], true, true).unwrap();
        assert!(mlp_forward(&bn_spec, &params, &Tensor::zeros(&[2, 3])).is_err());
        assert!(MlpSpec::uniform(&[3], true, true).is_err());
        assert!(MlpSpec::uniform(&[3, 0], true, true).is_err());
    }

    #[test]
    fn nonpositive_running_var_rejected() {
        let mut rng = Rng::new(5);
        let spec = MlpSpec::uniform(&[2, 2], true, true).unwrap();
        let mut params = random_params(&spec, &mut rng);
        params.layers[0].bn.as_mut().unwrap().running_var.data_mut()[1] = 0.0;
        assert!(params.validate(&spec).is_err());
    }

    #[test]
    fn edge_feature_literal() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [4.0, 6.0]]);
        let g = KnnGraph::new(IndexMatrix::from_rows(2, 1, vec![1, 0]).unwrap(), 2).unwrap();
        let e = edge_features(&x, &g).unwrap();
        assert_eq!(e.shape(), &[2, 1, 4]);
        assert_eq!(&e.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn edge_features_of_duplicates_are_zero_offsets() {
        let x = Tensor::from_rows(&[[0.5, -1.0], [0.5, -1.0], [2.0, 2.0]]);
        let g = knn_graph(&x, 1).unwrap();
        let e = edge_features(&x, &g).unwrap();
        assert_eq!(&e.data()[..4], &[0.5, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn edge_features_match_loop_oracle() {
        let mut rng = Rng::new(6);
        let (n, c, k) = (20, 5, 4);
        let x = random(&[n, c], &mut rng);
        let g = knn_graph(&x, k).unwrap();
        let e = edge_features(&x, &g).unwrap();
        assert_eq!(e.shape(), &[n, k, 2 * c]);
        for i in 0..n {
            for (j, &nb) in g.neighbors().row(i).iter().enumerate() {
                let base = (i * k + j) * 2 * c;
                for d in 0..c {
                    assert_eq!(e.data()[base + d], x.data()[i * c + d]);
                    assert_eq!(e.data()[base + c + d], x.data()[nb as usize * c + d] - x.data()[i * c + d]);
                }
            }
        }
    }

    #[test]
    fn edge_features_node_count_mismatch() {
        let g = knn_graph(&Tensor::from_rows(&[[0.0], [1.0], [3.0]]), 1).unwrap();
        assert!(edge_features(&Tensor::zeros(&[4, 1]), &g).is_err());
    }

    #[test]
    fn edgeconv_two_point_hand_example() {
        let x = Tensor::from_rows(&[[0.0], [1.0]]);
        let (spec, params) = single(&[1.0, 1.0], 2, true);
        let (y, g) = dynamic_edgeconv(&x, 1, &spec, &params).unwrap();
        assert_eq!(g.neighbors().as_slice(), &[1, 0]);
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn edgeconv_k1_is_single_message() {
        let mut rng = Rng::new(7);
        let x = random(&[12, 3], &mut rng);
        let spec = MlpSpec::uniform(&[6, 8], true, true).unwrap();
        let params = random_params(&spec, &mut rng);
        let g = knn_graph(&x, 1).unwrap();
        let y = edgeconv_update(&x, &g, &spec, &params).unwrap();
        let msgs = mlp_forward(&spec, &params, &edge_features(&x, &g).unwrap()).unwrap();
        assert_eq!(y.data(), msgs.data());
    }

    #[test]
    fn pipeline_shapes() {
        let mut rng = Rng::new(8);
        for &(n, k, c, a) in &[(10, 3, 3, 8), (33, 7, 5, 16), (64, 20, 4, 2)] {
            let x = random(&[n, c], &mut rng);
            let spec = MlpSpec::uniform(&[2 * c, a], true, true).unwrap();
            let params = random_params(&spec, &mut rng);
            let g = knn_graph(&x, k).unwrap();
            assert_eq!(gather_rows(&x, g.neighbors()).unwrap().shape(), &[n, k, c]);
            let e = edge_features(&x, &g).unwrap();
            assert_eq!(e.shape(), &[n, k, 2 * c]);
            assert_eq!(mlp_forward(&spec, &params, &e).unwrap().shape(), &[n, k, a]);
            assert_eq!(edgeconv_update(&x, &g, &spec, &params).unwrap().shape(), &[n, a]);
        }
    }

    #[test]
    fn edgeconv_rejects_wrong_mlp_width() {
        let x = Tensor::from_rows(&[[0.0], [1.0]]);
        let (spec, params) = single(&[1.0, 1.0, 1.0], 3, true);
        let g = knn_graph(&x, 1).unwrap();
        assert!(edgeconv_update(&x, &g, &spec, &params).is_err());
    }

    #[test]
    fn pointnet_identity_layer() {
        let mut rng = Rng::new(9);
        let x = random(&[7, 3], &mut rng);
        let (spec, params) = single(Tensor::identity(3).data(), 3, false);
        assert_eq!(pointnet_update(&x, &spec, &params).unwrap(), x);
    }

    #[test]
    fn pointnet_equals_edgeconv_ignoring_offsets() {
        let mut rng = Rng::new(10);
        let (n, c, a) = (15, 3, 6);
        let x = random(&[n, c], &mut rng);
        let pn_spec = MlpSpec::uniform(&[c, a], false, true).unwrap();
        let pn = random_params(&pn_spec, &mut rng);
        // Same weights on the x_i block, zeros on the x_j − x_i block.
        let w = Tensor::from_fn(&[a, 2 * c], |f| {
            let (o, i) = (f / (2 * c), f % (2 * c));
            if i < c { pn.layers[0].weight.data()[o * c + i] } else { 0.0 }
        });
        let ec_spec = MlpSpec::uniform(&[2 * c, a], false, true).unwrap();
        let ec = LayerParams {
            layers: vec![Linear { weight: w, bias: pn.layers[0].bias.clone(), bn: None }],
        };
        let g = knn_graph(&x, 1).unwrap();
        let want = pointnet_update(&x, &pn_spec, &pn).unwrap();
        assert_eq!(edgeconv_update(&x, &g, &ec_spec, &ec).unwrap(), want);
    }

    #[test]
    fn pointnet_matches_row_oracle() {
        let mut rng = Rng::new(11);
        let (n, c, a) = (9, 4, 5);
        let x = random(&[n, c], &mut rng);
        let spec = MlpSpec::uniform(&[c, a], false, true).unwrap();
        let p = random_params(&spec, &mut rng);
        let y = pointnet_update(&x, &spec, &p).unwrap();
        let (w, b) = (p.layers[0].weight.data(), p.layers[0].bias.data());
        for i in 0..n {
            for o in 0..a {
                let mut acc = 0.0f32;
                for d in 0..c {
                    acc += x.data()[i * c + d] * w[o * c + d];
                }
                assert_eq!(y.data()[i * a + o], (acc + b[o]).max(0.0));
            }
        }
    }

    #[test]
    fn global_pool_cases() {
        let one = Tensor::from_rows(&[[1.0, -2.0, 3.0]]);
        assert_eq!(global_max_pool(&one).unwrap().data(), one.data());
        let rep = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(global_max_pool(&rep).unwrap().data(), &[1.0, 2.0]);
        let mut rng = Rng::new(12);
        let x = random(&[30, 7], &mut rng);
        let p = global_max_pool(&x).unwrap();
        for c in 0..7 {
            let m = (0..30).map(|i| x.data()[i * 7 + c]).fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(p.data()[c], m);
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let y = log_softmax(&Tensor::zeros(&[4])).unwrap();
        for &v in y.data() {
            assert!((v + 4f32.ln()).abs() < 1e-7);
        }
    }

    #[test]
    fn log_softmax_huge_logits_stay_finite() {
        let y = log_softmax(&Tensor::vector(vec![1e30, 0.0, -1e30])).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.data()[0], 0.0);
    }

    proptest! {
        #[test]
        fn log_softmax_normalised_and_shift_invariant(seed in any::<u64>(), shift in -50.0f32..50.0) {
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(&[40], |_| rng.uniform(-10.0, 10.0));
            let y = log_softmax(&x).unwrap();
            let lse = y.data().iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() <= 1e-5);
            let shifted = Tensor::from_fn(&[40], |i| x.data()[i] + shift);
            prop_assert!(log_softmax(&shifted).unwrap().max_abs_diff(&y) <= 1e-5);
        }

        #[test]
        fn max_aggregation_is_monotone_in_neighbour_set(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (n, c, a) = (16, 3, 8);
            let x = random(&[n, c], &mut rng);
            let spec = MlpSpec::uniform(&[2 * c, a], true, true).unwrap();
            let params = random_params(&spec, &mut rng);
            let small = knn_graph(&x, 3).unwrap();
            let big = knn_graph(&x, 7).unwrap();
            let ys = edgeconv_update(&x, &small, &spec, &params).unwrap();
            let yb = edgeconv_update(&x, &big, &spec, &params).unwrap();
            for (s, b) in ys.data().iter().zip(yb.data()) {
                prop_assert!(b >= s);
            }
        }

        #[test]
        fn edgeconv_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (n, c, a, k) = (24, 3, 8, 5);
            let x = random(&[n, c], &mut rng);
            let spec = MlpSpec::uniform(&[2 * c, a], true, true).unwrap();
            let params = random_params(&spec, &mut rng);
            let perm = rng.permutation(n);
            let px = Tensor::from_fn(&[n, c], |f| x.data()[perm[f / c] * c + f % c]);
            let (y, _) = dynamic_edgeconv(&x, k, &spec, &params).unwrap();
            let (py, _) = dynamic_edgeconv(&px, k, &spec, &params).unwrap();
            for p in 0..n {
                prop_assert_eq!(py.row(p), y.row(perm[p]));
            }
        }
    }
}
