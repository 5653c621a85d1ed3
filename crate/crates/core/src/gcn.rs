//! Two-layer GCN: `softmax(Â · relu(Â·X·W0 + b0) · W1 + b1)`, trained with
//! full-batch gradient descent on masked cross-entropy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::MaskKind;
use crate::matrix::Matrix;
use crate::partition::ClientData;
use crate::rng::seeded;

/// Dimensions of a [`ModelParams`] buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamShape {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.feature_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.num_classes
            + self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offsets(&self) -> [usize; 4] {
        let w0 = 0;
        let b0 = w0 + self.feature_dim * self.hidden_dim;
        let w1 = b0 + self.hidden_dim;
        let b1 = w1 + self.hidden_dim * self.num_classes;
        [w0, b0, w1, b1]
    }
}

/// GCN weights stored flat as `W0 | b0 | W1 | b1`, matrices row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ParamShape,
    data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(shape: ParamShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_flat(shape: ParamShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> ParamShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn part(&self, idx: usize) -> &[f64] {
        let off = self.shape.offsets();
        let end = off.get(idx + 1).copied().unwrap_or(self.data.len());
        &self.data[off[idx]..end]
    }

    fn part_mut(&mut self, idx: usize) -> &mut [f64] {
        let off = self.shape.offsets();
        let end = off.get(idx + 1).copied().unwrap_or(self.data.len());
        &mut self.data[off[idx]..end]
    }

    pub fn w0(&self) -> &[f64] {
        self.part(0)
    }
    pub fn b0(&self) -> &[f64] {
        self.part(1)
    }
    pub fn w1(&self) -> &[f64] {
        self.part(2)
    }
    pub fn b1(&self) -> &[f64] {
        self.part(3)
    }
    pub fn w0_mut(&mut self) -> &mut [f64] {
        self.part_mut(0)
    }
    pub fn b0_mut(&mut self) -> &mut [f64] {
        self.part_mut(1)
    }
    pub fn w1_mut(&mut self) -> &mut [f64] {
        self.part_mut(2)
    }
    pub fn b1_mut(&mut self) -> &mut [f64] {
        self.part_mut(3)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[u32 feature_dim][u32 hidden_dim][u32 num_classes][f64 …]`, little-endian.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.data.len());
        self.write_blob(&mut out);
        out
    }

    pub fn write_blob(&self, out: &mut Vec<u8>) {
        for dim in [self.shape.feature_dim, self.shape.hidden_dim, self.shape.num_classes] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes a blob, returning the params and the number of bytes read.
    pub fn read_blob(bytes: &[u8]) -> Result<(Self, usize)> {
        let dim = |i: usize| -> Result<usize> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| Error::Contract("truncated parameter header".into()))
        };
        let shape = ParamShape {
            feature_dim: dim(0)?,
            hidden_dim: dim(1)?,
            num_classes: dim(2)?,
        };
        let end = 12 + 8 * shape.len();
        let body = bytes
            .get(12..end)
            .ok_or_else(|| Error::Contract("truncated parameter body".into()))?;
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self { shape, data }, end))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(feature_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> ModelParams {
    let shape = ParamShape {
        feature_dim,
        hidden_dim,
        num_classes,
    };
    let mut p = ModelParams::zeros(shape);
    let mut rng = seeded(seed);
    let a0 = (6.0 / (feature_dim + hidden_dim) as f64).sqrt();
    for w in p.w0_mut() {
        *w = rng.random_range(-a0..=a0);
    }
    let a1 = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
    for w in p.w1_mut() {
        *w = rng.random_range(-a1..=a1);
    }
    p
}

/// Row-stochastic `n × C` prediction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelMatrix(Matrix);

impl SoftLabelMatrix {
    /// Wraps a matrix whose rows are already probability distributions.
    pub fn new(values: Matrix) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) {
                return Err(Error::Contract(format!("row {r} is not a distribution")));
            }
        }
        Ok(Self(values))
    }

    pub(crate) fn new_unchecked(values: Matrix) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// Argmax per row, ties toward the lowest class id.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

struct Activations {
    pre_hidden: Matrix,
    hidden: Matrix,
    probs: Matrix,
}

fn check_shape(p: &ModelParams, cd: &ClientData) -> Result<()> {
    let s = p.shape();
    if s.feature_dim != cd.graph().feature_dim() || s.num_classes != cd.num_classes() {
        return Err(Error::Contract(format!(
            "model expects {} features / {} classes, data has {} / {}",
            s.feature_dim,
            s.num_classes,
            cd.graph().feature_dim(),
            cd.num_classes()
        )));
    }
    Ok(())
}

fn forward_pass(p: &ModelParams, cd: &ClientData) -> Activations {
    let s = p.shape();
    let mut pre_hidden = cd.propagated_features().matmul_slice(p.w0(), s.hidden_dim);
    pre_hidden.add_row_vector(p.b0());
    let mut hidden = pre_hidden.clone();
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let projected = hidden.matmul_slice(p.w1(), s.num_classes);
    let mut probs = cd.adjacency().spmm(&projected);
    probs.add_row_vector(p.b1());
    softmax_rows(&mut probs);
    Activations {
        pre_hidden,
        hidden,
        probs,
    }
}

/// Soft labels of every local node.
pub fn forward(p: &ModelParams, cd: &ClientData) -> Result<SoftLabelMatrix> {
    check_shape(p, cd)?;
    Ok(SoftLabelMatrix(forward_pass(p, cd).probs))
}

const LOG_FLOOR: f64 = 1e-12;

/// Mean cross-entropy over the train mask and its analytic gradient.
pub fn loss_and_grads(p: &ModelParams, cd: &ClientData) -> Result<(f64, Gradients)> {
    check_shape(p, cd)?;
    let train = &cd.masks().train;
    if train.is_empty() {
        return Err(Error::Training(format!(
            "client {} has an empty train mask",
            cd.client_id()
        )));
    }
    let s = p.shape();
    let act = forward_pass(p, cd);
    let labels = cd.graph().labels();
    let scale = 1.0 / train.len() as f64;

    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(cd.node_count(), s.num_classes);
    for &v in train {
        let y = labels[v];
        let py = act.probs[(v, y)];
        loss -= py.max(LOG_FLOOR).ln();
        if py < LOG_FLOOR {
            continue;
        }
        let row = d_logits.row_mut(v);
        row.copy_from_slice(act.probs.row(v));
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    loss *= scale;

    let mut grads = ModelParams::zeros(s);
    grads.b1_mut().copy_from_slice(&d_logits.column_sums());
    // Â is symmetric, so Âᵀ·dZ = Â·dZ.
    let d_projected = cd.adjacency().spmm(&d_logits);
    act.hidden.transpose_matmul_into(&d_projected, grads.w1_mut());
    let mut d_hidden = d_projected.matmul_transpose_slice(p.w1(), s.hidden_dim);
    for (g, &pre) in d_hidden.as_mut_slice().iter_mut().zip(act.pre_hidden.as_slice()) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    grads.b0_mut().copy_from_slice(&d_hidden.column_sums());
    cd.propagated_features()
        .transpose_matmul_into(&d_hidden, grads.w0_mut());
    Ok((loss, grads))
}

/// One full-batch gradient step.
pub fn train_epoch(p: &ModelParams, cd: &ClientData, lr: f64) -> Result<ModelParams> {
    let (_, grads) = loss_and_grads(p, cd)?;
    let mut next = p.clone();
    for (w, g) in next.as_mut_slice().iter_mut().zip(grads.as_slice()) {
        *w -= lr * g;
    }
    Ok(next)
}

/// Accuracy of argmax predictions on one mask.
pub fn evaluate(p: &ModelParams, cd: &ClientData, which: MaskKind) -> Result<f64> {
    let nodes = cd.masks().get(which);
    if nodes.is_empty() {
        return Err(Error::Evaluation(format!(
            "client {} has an empty {which:?} mask",
            cd.client_id()
        )));
    }
    let pred = forward(p, cd)?.argmax();
    let labels = cd.graph().labels();
    let correct = nodes.iter().filter(|&&v| pred[v] == labels[v]).count();
    Ok(correct as f64 / nodes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, NodeMasks};

    fn client(n: usize, f: usize, c: usize, edges: &[(usize, usize)], labels: Vec<usize>, seed: u64) -> ClientData {
        let mut rng = seeded(seed);
        let feats = (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Graph::new(edges.to_vec(), Matrix::from_vec(n, f, feats), labels, c).unwrap();
        let masks = NodeMasks {
            train: (0..n).collect(),
            val: vec![],
            test: vec![],
        };
        ClientData::whole(g, masks).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(5, 64, 3, 11);
        assert_eq!(a, init_params(5, 64, 3, 11));
        let bound0 = (6.0f64 / 69.0).sqrt();
        let bound1 = (6.0f64 / 67.0).sqrt();
        assert!(a.w0().iter().all(|w| w.abs() <= bound0));
        assert!(a.w1().iter().all(|w| w.abs() <= bound1));
        assert!(a.b0().iter().chain(a.b1()).all(|&b| b == 0.0));
    }

    #[test]
    fn zero_output_layer_is_uniform_with_loss_ln_c() {
        let cd = client(4, 3, 3, &[(0, 1), (1, 2), (2, 3)], vec![0, 1, 2, 0], 1);
        let mut p = init_params(3, 8, 3, 2);
        p.w1_mut().iter_mut().for_each(|w| *w = 0.0);
        let soft = forward(&p, &cd).unwrap();
        for r in 0..4 {
            for &v in soft.row(r) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let (loss, _) = loss_and_grads(&p, &cd).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_node_matches_hand_logits() {
        // One isolated node: Â = [1], f = 1, h = 1, C = 2.
        let g = Graph::new(vec![], Matrix::from_vec(1, 1, vec![2.0]), vec![0], 2).unwrap();
        let cd = ClientData::whole(g, NodeMasks { train: vec![0], ..Default::default() }).unwrap();
        let shape = ParamShape { feature_dim: 1, hidden_dim: 1, num_classes: 2 };
        let p = ModelParams::from_flat(shape, vec![1.5, -1.0, 2.0, -0.5, 0.25, 0.0]).unwrap();
        // hidden = relu(2·1.5 − 1) = 2; logits = [4 + 0.25, −1 + 0].
        let (l0, l1) = (4.25f64, -1.0f64);
        let expect0 = l0.exp() / (l0.exp() + l1.exp());
        let soft = forward(&p, &cd).unwrap();
        assert!((soft.row(0)[0] - expect0).abs() < 1e-15);
        assert!((soft.row(0)[1] - (1.0 - expect0)).abs() < 1e-15);
    }

    #[test]
    fn near_one_hot_has_near_zero_loss() {
        let g = Graph::new(vec![(0, 1)], Matrix::from_vec(2, 1, vec![1.0, 1.0]), vec![1, 1], 2).unwrap();
        let cd = ClientData::whole(g, NodeMasks { train: vec![0, 1], ..Default::default() }).unwrap();
        let shape = ParamShape { feature_dim: 1, hidden_dim: 1, num_classes: 2 };
        let p = ModelParams::from_flat(shape, vec![0.0, 0.0, 0.0, 0.0, 0.0, 30.0]).unwrap();
        let (loss, grads) = loss_and_grads(&p, &cd).unwrap();
        assert!(loss < 1e-6);
        assert!(grads.as_slice().iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn lr_zero_is_identity_and_empty_train_errors() {
        let cd = client(4, 2, 2, &[(0, 1), (2, 3)], vec![0, 1, 0, 1], 3);
        let p = init_params(2, 4, 2, 3);
        assert_eq!(train_epoch(&p, &cd, 0.0).unwrap(), p);
        let empty = cd.with_masks(NodeMasks::default()).unwrap();
        assert!(matches!(loss_and_grads(&p, &empty), Err(Error::Training(_))));
        assert!(matches!(evaluate(&p, &empty, MaskKind::Test), Err(Error::Evaluation(_))));
    }

    #[test]
    fn evaluate_counts_and_tie_break() {
        let g = Graph::new(vec![], Matrix::zeros(10, 1), vec![0; 10], 2).unwrap();
        let masks = NodeMasks { test: (0..10).collect(), ..Default::default() };
        let cd = ClientData::whole(g, masks).unwrap();
        // Uniform output, ties to class 0, all labels 0.
        let p = ModelParams::zeros(ParamShape { feature_dim: 1, hidden_dim: 2, num_classes: 2 });
        assert_eq!(evaluate(&p, &cd, MaskKind::Test).unwrap(), 1.0);

        let labels = vec![0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let g = Graph::new(vec![], Matrix::zeros(10, 1), labels, 2).unwrap();
        let cd = ClientData::whole(g, NodeMasks { test: (0..10).collect(), ..Default::default() }).unwrap();
        assert!((evaluate(&p, &cd, MaskKind::Test).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn blob_round_trip() {
        let p = init_params(3, 4, 2, 8);
        let blob = p.to_blob();
        let (q, used) = ModelParams::read_blob(&blob).unwrap();
        assert_eq!(used, blob.len());
        assert_eq!(q, p);
        assert!(ModelParams::read_blob(&blob[..blob.len() - 1]).is_err());
    }
}
