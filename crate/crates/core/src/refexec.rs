//! Plain-loop forward pass over an [`ArchGraph`], used to check that
//! morphisms preserve the network function.
//!
//! Tensors are stored height-major then width then channel. Convolution
//! kernels are indexed `((ky * k + kx) * cin + ci) * cout + co`; dense
//! matrices `i * outputs + o`. Dropout is the identity (inference mode).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{ArchGraph, LayerId, LayerKind, NodeId, TensorShape, Violation};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.elements() as usize],
        }
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape,
            data: (0..shape.elements() as usize).map(&mut f).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(shape: TensorShape, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn channels(&self) -> usize {
        self.shape.channels as usize
    }

    fn pixels(&self) -> usize {
        (self.shape.height * self.shape.width) as usize
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn zeros(k: usize, cin: usize, cout: usize) -> Self {
        ConvWeights {
            k,
            cin,
            cout,
            kernel: vec![0.0; k * k * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    pub fn index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.k + kx) * self.cin + ci) * self.cout + co
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights {
    pub inputs: usize,
    pub outputs: usize,
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseWeights {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseWeights {
            inputs,
            outputs,
            matrix: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn index(&self, i: usize, o: usize) -> usize {
        i * self.outputs + o
    }
}

/// `(x - mean) / sqrt(var) * scale + shift`, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormWeights {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormWeights {
    pub fn identity(channels: usize) -> Self {
        BatchNormWeights {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv(ConvWeights),
    Dense(DenseWeights),
    BatchNorm(BatchNormWeights),
}

pub type WeightSet = BTreeMap<LayerId, LayerWeights>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("no weights for layer {0}")]
    MissingWeights(LayerId),
    #[error("weights for layer {layer}: {reason}")]
    WeightShape { layer: LayerId, reason: String },
    #[error("input tensor has shape {got}, graph expects {expected}")]
    InputShape {
        expected: TensorShape,
        got: TensorShape,
    },
    #[error(transparent)]
    Invalid(#[from] Violation),
}

fn channels_of(g: &ArchGraph, node: NodeId) -> usize {
    g.shape(node).map_or(0, |s| s.channels as usize)
}

/// Gaussian weights (std 0.05), zero biases and identity batch norms.
pub fn random_weights<R: Rng + ?Sized>(g: &ArchGraph, rng: &mut R) -> WeightSet {
    let normal = Normal::new(0.0, 0.05).expect("valid normal");
    let mut out = WeightSet::new();
    for l in g.layers().values() {
        let cout = l.width as usize;
        let w = match l.kind {
            LayerKind::Conv { kernel_size, .. } => {
                let mut c = ConvWeights::zeros(kernel_size as usize, channels_of(g, l.inputs[0]), cout);
                c.kernel.iter_mut().for_each(|v| *v = normal.sample(rng));
                LayerWeights::Conv(c)
            }
            LayerKind::Dense { .. } => {
                let mut d = DenseWeights::zeros(channels_of(g, l.inputs[0]), cout);
                d.matrix.iter_mut().for_each(|v| *v = normal.sample(rng));
                LayerWeights::Dense(d)
            }
            LayerKind::BatchNorm => LayerWeights::BatchNorm(BatchNormWeights::identity(cout)),
            _ => continue,
        };
        out.insert(l.id, w);
    }
    out
}

/// Checks that `w` has exactly the weight tensors `g` needs, with matching sizes.
pub fn check_weights(g: &ArchGraph, w: &WeightSet) -> Result<(), ExecError> {
    for l in g.layers().values() {
        let cout = l.width as usize;
        let cin = l.inputs.first().map_or(0, |&n| channels_of(g, n));
        let bad = |reason: String| {
            Err(ExecError::WeightShape {
                layer: l.id,
                reason,
            })
        };
        match (l.kind, w.get(&l.id)) {
            (LayerKind::Conv { kernel_size, .. }, Some(LayerWeights::Conv(c))) => {
                let k = kernel_size as usize;
                if (c.k, c.cin, c.cout) != (k, cin, cout)
                    || c.kernel.len() != k * k * cin * cout
                    || c.bias.len() != cout
                {
                    return bad(format!(
                        "conv weights {}x{}x{}x{}, layer needs {k}x{k}x{cin}x{cout}",
                        c.k, c.k, c.cin, c.cout
                    ));
                }
            }
            (LayerKind::Dense { .. }, Some(LayerWeights::Dense(d))) => {
                if (d.inputs, d.outputs) != (cin, cout)
                    || d.matrix.len() != cin * cout
                    || d.bias.len() != cout
                {
                    return bad(format!(
                        "dense weights {}x{}, layer needs {cin}x{cout}",
                        d.inputs, d.outputs
                    ));
                }
            }
            (LayerKind::BatchNorm, Some(LayerWeights::BatchNorm(b))) => {
                let n = b.channels();
                if n != cout || b.shift.len() != n || b.mean.len() != n || b.var.len() != n {
                    return bad(format!("batch norm for {n} channels, layer has {cout}"));
                }
                if b.var.iter().any(|&v| v <= 0.0) {
                    return bad("non-positive variance".into());
                }
            }
            (LayerKind::Conv { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm, Some(_)) => {
                return bad(format!("wrong weight kind for {}", l.kind.name()));
            }
            (LayerKind::Conv { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm, None) => {
                return Err(ExecError::MissingWeights(l.id));
            }
            (_, Some(_)) => return bad(format!("{} layers take no weights", l.kind.name())),
            (_, None) => {}
        }
    }
    Ok(())
}

/// Runs `x` through the graph and returns the output node's tensor.
pub fn forward(g: &ArchGraph, w: &WeightSet, x: &Tensor) -> Result<Tensor, ExecError> {
    let mut values = forward_all(g, w, x)?;
    Ok(values
        .remove(&g.output_node())
        .expect("output node computed"))
}

/// Every node tensor of the forward pass.
pub fn forward_all(g: &ArchGraph, w: &WeightSet, x: &Tensor) -> Result<HashMap<NodeId, Tensor>, ExecError> {
    g.validate()?;
    check_weights(g, w)?;
    if x.shape != g.input_shape() {
        return Err(ExecError::InputShape {
            expected: g.input_shape(),
            got: x.shape,
        });
    }
    let mut values: HashMap<NodeId, Tensor> = HashMap::new();
    for id in g.topo_order()? {
        let l = &g.layers()[&id];
        let out_shape = g.shape(l.output).expect("valid graph");
        let input = |i: usize| &values[&l.inputs[i]];
        let y = match (l.kind, w.get(&id)) {
            (LayerKind::Input, _) => x.clone(),
            (LayerKind::Conv { .. }, Some(LayerWeights::Conv(c))) => conv(input(0), c),
            (LayerKind::Dense { .. }, Some(LayerWeights::Dense(d))) => dense(input(0), d),
            (LayerKind::BatchNorm, Some(LayerWeights::BatchNorm(b))) => batch_norm(input(0), b),
            (LayerKind::ReLU, _) => map(input(0), |v| v.max(0.0)),
            (LayerKind::Dropout { .. }, _) => input(0).clone(),
            (LayerKind::Pool { window, stride }, _) => {
                avg_pool(input(0), window as usize, stride as usize, out_shape)
            }
            (LayerKind::GlobalAvgPool, _) => global_avg_pool(input(0)),
            (LayerKind::Softmax, _) => softmax(input(0)),
            (LayerKind::Add, _) => {
                let (a, b) = (input(0), input(1));
                Tensor {
                    shape: a.shape,
                    data: a.data.iter().zip(&b.data).map(|(p, q)| p + q).collect(),
                }
            }
            (LayerKind::Concat, _) => concat(input(0), input(1)),
            _ => return Err(ExecError::MissingWeights(id)),
        };
        debug_assert_eq!(y.shape, out_shape);
        values.insert(l.output, y);
    }
    Ok(values)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn conv(x: &Tensor, c: &ConvWeights) -> Tensor {
    let (h, w) = (x.shape.height as usize, x.shape.width as usize);
    let pad = c.k / 2;
    let mut out = Tensor::zeros(x.shape.with_channels(c.cout as u32));
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c.cout;
            let acc = &mut out.data[o..o + c.cout];
            acc.copy_from_slice(&c.bias);
            for ky in 0..c.k {
                let Some(sy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..c.k {
                    let Some(sx) = (xx + kx).checked_sub(pad).filter(|&v| v < w) else {
                        continue;
                    };
                    let pixel = &x.data[(sy * w + sx) * c.cin..][..c.cin];
                    for (ci, &v) in pixel.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &c.kernel[c.index(ky, kx, ci, 0)..][..c.cout];
                        for (a, &k) in acc.iter_mut().zip(row) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    out
}

fn dense(x: &Tensor, d: &DenseWeights) -> Tensor {
    let mut out = d.bias.clone();
    for (i, &v) in x.data.iter().enumerate() {
        let row = &d.matrix[d.index(i, 0)..][..d.outputs];
        for (a, &m) in out.iter_mut().zip(row) {
            *a += v * m;
        }
    }
    Tensor {
        shape: TensorShape::flat(d.outputs as u32),
        data: out,
    }
}

fn batch_norm(x: &Tensor, b: &BatchNormWeights) -> Tensor {
    let c = x.channels();
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                (v - b.mean[ch]) / b.var[ch].sqrt() * b.scale[ch] + b.shift[ch]
            })
            .collect(),
    }
}

fn avg_pool(x: &Tensor, window: usize, stride: usize, out_shape: TensorShape) -> Tensor {
    let (w, c) = (x.shape.width as usize, x.channels());
    let (oh, ow) = (out_shape.height as usize, out_shape.width as usize);
    let mut out = Tensor::zeros(out_shape);
    let norm = 1.0 / (window * window) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out.data[(oy * ow + ox) * c..][..c];
            for dy in 0..window {
                for dx in 0..window {
                    let (sy, sx) = (oy * stride + dy, ox * stride + dx);
                    let pixel = &x.data[(sy * w + sx) * c..][..c];
                    for (a, &v) in acc.iter_mut().zip(pixel) {
                        *a += v;
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a *= norm);
        }
    }
    out
}

fn global_avg_pool(x: &Tensor) -> Tensor {
    let c = x.channels();
    let mut out = vec![0.0; c];
    for pixel in x.data.chunks(c) {
        for (a, &v) in out.iter_mut().zip(pixel) {
            *a += v;
        }
    }
    let n = x.pixels() as f64;
    out.iter_mut().for_each(|a| *a /= n);
    Tensor {
        shape: TensorShape::flat(c as u32),
        data: out,
    }
}

fn softmax(x: &Tensor) -> Tensor {
    let c = x.channels();
    let mut data = Vec::with_capacity(x.data.len());
    for pixel in x.data.chunks(c) {
        let m = pixel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = pixel.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    Tensor {
        shape: x.shape,
        data,
    }
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for (pa, pb) in a.data.chunks(ca).zip(b.data.chunks(cb)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Tensor {
        shape: a.shape.with_channels((ca + cb) as u32),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::random(TensorShape::new(4, 5, 2), &mut rng);
        let mut c = ConvWeights::zeros(3, 2, 3);
        c.kernel.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        c.bias = vec![0.1, -0.2, 0.3];
        let y = conv(&x, &c);
        for yy in 0..4i64 {
            for xx in 0..5i64 {
                for co in 0..3 {
                    let mut s = c.bias[co];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                            if !(0..4).contains(&sy) || !(0..5).contains(&sx) {
                                continue;
                            }
                            for ci in 0..2 {
                                let v = x.data[((sy * 5 + sx) * 2) as usize + ci];
                                s += v * c.kernel[c.index(ky as usize, kx as usize, ci, co)];
                            }
                        }
                    }
                    let got = y.data[((yy * 5 + xx) * 3) as usize + co];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_and_softmax() {
        let x = Tensor::from_fn(TensorShape::new(2, 2, 1), |i| i as f64);
        let p = avg_pool(&x, 2, 2, TensorShape::new(1, 1, 1));
        assert_eq!(p.data, vec![1.5]);
        assert_eq!(global_avg_pool(&x).data, vec![1.5]);
        let s = softmax(&Tensor::from_fn(TensorShape::flat(3), |i| i as f64));
        assert!((s.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.data[2] > s.data[1] && s.data[1] > s.data[0]);
    }

    #[test]
    fn forward_default_cnn_outputs_distribution() {
        let g = ArchGraph::default_cnn(TensorShape::new(8, 8, 3), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(&g, &mut rng);
        let x = Tensor::random(g.input_shape(), &mut rng);
        let y = forward(&g, &w, &x).unwrap();
        assert_eq!(y.shape, TensorShape::flat(4));
        assert!((y.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weight_checks() {
        let mut b = GraphBuilder::new(TensorShape::flat(3)).unwrap();
        b.push(LayerKind::Dense { units: 2 }).unwrap();
        b.push(LayerKind::Softmax).unwrap();
        let g = b.finish().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&g, &mut rng);
        assert_eq!(check_weights(&g, &w), Ok(()));
        let id = *w.keys().next().unwrap();
        let mut bad = w.clone();
        bad.insert(id, LayerWeights::Dense(DenseWeights::zeros(2, 2)));
        assert!(matches!(check_weights(&g, &bad), Err(ExecError::WeightShape { .. })));
        assert_eq!(check_weights(&g, &WeightSet::new()), Err(ExecError::MissingWeights(id)));
        let x = Tensor::zeros(TensorShape::flat(4));
        assert!(matches!(forward(&g, &w, &x), Err(ExecError::InputShape { .. })));
    }
}
