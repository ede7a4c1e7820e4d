use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DynfitError;
use crate::devmodel::KernelKind;
use crate::kernels::{BitWidth, QFormat};

/// Tensor shape as channels x height x width; flat vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self, DynfitError> {
        if data.len() != shape.len() {
            return Err(DynfitError::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape.h + i) * self.shape.w + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Layer description as it appears in model files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { outputs: usize, activation: Activation },
    Conv2d { filters: usize, kh: usize, kw: usize, activation: Activation },
    /// Per-channel `kh x kw` spatial filters followed by a pointwise mix.
    DwsConv2d { filters: usize, kh: usize, kw: usize, activation: Activation },
    AvgPool { size: usize },
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        !matches!(self, LayerSpec::AvgPool { .. })
    }

    pub fn kernel_kind(&self) -> Option<KernelKind> {
        match self {
            LayerSpec::Dense { .. } => Some(KernelKind::Matvec),
            LayerSpec::Conv2d { .. } => Some(KernelKind::Conv2d),
            LayerSpec::DwsConv2d { .. } => Some(KernelKind::Dwsconv2d),
            LayerSpec::AvgPool { .. } => None,
        }
    }

    fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. }
            | LayerSpec::Conv2d { activation, .. }
            | LayerSpec::DwsConv2d { activation, .. } => activation,
            LayerSpec::AvgPool { .. } => Activation::Identity,
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape, DynfitError> {
        let bad = |m: String| Err(DynfitError::ShapeMismatch(m));
        match *self {
            LayerSpec::Dense { outputs, .. } => {
                if outputs == 0 {
                    return bad("dense layer with zero outputs".into());
                }
                Ok(Shape::flat(outputs))
            }
            LayerSpec::Conv2d { filters, kh, kw, .. } | LayerSpec::DwsConv2d { filters, kh, kw, .. } => {
                if filters == 0 || kh == 0 || kw == 0 || kh > input.h || kw > input.w {
                    return bad(format!("{kh}x{kw} kernel does not fit a {}x{} input", input.h, input.w));
                }
                Ok(Shape::image(filters, input.h - kh + 1, input.w - kw + 1))
            }
            LayerSpec::AvgPool { size } => {
                if size == 0 || size > input.h || size > input.w {
                    return bad(format!("{size}x{size} pool does not fit a {}x{} input", input.h, input.w));
                }
                Ok(Shape::image(input.c, input.h / size, input.w / size))
            }
        }
    }
}

/// A layer with its parameters. Weight layouts:
/// dense `[o][i]`, conv `[o][c][a][b]`, dws depthwise `[c][a][b]` and pointwise `[o][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub weights: Vec<f64>,
    pub depthwise: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn new(spec: LayerSpec, in_shape: Shape) -> Result<Self, DynfitError> {
        let out_shape = spec.output_shape(in_shape)?;
        let (nw, nd, nb) = match spec {
            LayerSpec::Dense { outputs, .. } => (outputs * in_shape.len(), 0, outputs),
            LayerSpec::Conv2d { filters, kh, kw, .. } => (filters * in_shape.c * kh * kw, 0, filters),
            LayerSpec::DwsConv2d { filters, kh, kw, .. } => (filters * in_shape.c, in_shape.c * kh * kw, filters),
            LayerSpec::AvgPool { .. } => (0, 0, 0),
        };
        Ok(Self { spec, in_shape, out_shape, weights: vec![0.0; nw], depthwise: vec![0.0; nd], bias: vec![0.0; nb] })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.depthwise.len() + self.bias.len()
    }

    /// Number of output units (neurons or channels).
    pub fn units(&self) -> usize {
        self.out_shape.c
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation()
    }

    fn kernel_dims(&self) -> (usize, usize) {
        match self.spec {
            LayerSpec::Conv2d { kh, kw, .. } | LayerSpec::DwsConv2d { kh, kw, .. } => (kh, kw),
            LayerSpec::AvgPool { size } => (size, size),
            LayerSpec::Dense { .. } => (1, 1),
        }
    }

    /// Fan-in weight row of unit `o` (pointwise row for dws layers).
    pub fn row(&self, o: usize) -> &[f64] {
        let n = self.weights.len() / self.units().max(1);
        &self.weights[o * n..(o + 1) * n]
    }

    /// Pre-activation of dense unit `o`.
    pub fn dense_unit(&self, x: &[f64], o: usize) -> f64 {
        let mut z = self.bias[o];
        for (w, v) in self.row(o).iter().zip(x) {
            z += w * v;
        }
        z
    }

    /// Pre-activation of conv output `(o, i, j)`.
    pub fn conv_unit(&self, x: &Tensor, o: usize, i: usize, j: usize) -> f64 {
        let (kh, kw) = self.kernel_dims();
        let c_in = self.in_shape.c;
        let mut z = self.bias[o];
        for c in 0..c_in {
            let base = (o * c_in + c) * kh * kw;
            for a in 0..kh {
                for b in 0..kw {
                    z += self.weights[base + a * kw + b] * x.at(c, i + a, j + b);
                }
            }
        }
        z
    }

    /// Depthwise response of every input channel at output pixel `(i, j)`.
    pub fn dws_depthwise_pixel(&self, x: &Tensor, i: usize, j: usize) -> Vec<f64> {
        let (kh, kw) = self.kernel_dims();
        (0..self.in_shape.c)
            .map(|c| {
                let mut d = 0.0;
                for a in 0..kh {
                    for b in 0..kw {
                        d += self.depthwise[(c * kh + a) * kw + b] * x.at(c, i + a, j + b);
                    }
                }
                d
            })
            .collect()
    }

    /// Pre-activation of pointwise unit `o` given the depthwise pixel.
    pub fn dws_pointwise_unit(&self, d: &[f64], o: usize) -> f64 {
        let mut z = self.bias[o];
        for (w, v) in self.row(o).iter().zip(d) {
            z += w * v;
        }
        z
    }

    pub fn avg_pool(&self, x: &Tensor) -> Tensor {
        let s = self.kernel_dims().0;
        let out = self.out_shape;
        let mut y = Tensor::zeros(out);
        let inv = 1.0 / (s * s) as f64;
        for c in 0..out.c {
            for i in 0..out.h {
                for j in 0..out.w {
                    let mut acc = 0.0;
                    for a in 0..s {
                        for b in 0..s {
                            acc += x.at(c, i * s + a, j * s + b);
                        }
                    }
                    y.data[(c * out.h + i) * out.w + j] = acc * inv;
                }
            }
        }
        y
    }

    /// Pre-activations of the whole layer.
    fn pre_activation(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let out = self.out_shape;
        match self.spec {
            LayerSpec::Dense { .. } => ((0..out.c).map(|o| self.dense_unit(&x.data, o)).collect(), Vec::new()),
            LayerSpec::Conv2d { .. } => {
                let mut z = Vec::with_capacity(out.len());
                for o in 0..out.c {
                    for i in 0..out.h {
                        for j in 0..out.w {
                            z.push(self.conv_unit(x, o, i, j));
                        }
                    }
                }
                (z, Vec::new())
            }
            LayerSpec::DwsConv2d { .. } => {
                let plane = out.plane();
                let c_in = self.in_shape.c;
                let mut d = vec![0.0; c_in * plane];
                let mut z = vec![0.0; out.len()];
                for i in 0..out.h {
                    for j in 0..out.w {
                        let p = i * out.w + j;
                        let dp = self.dws_depthwise_pixel(x, i, j);
                        for (c, v) in dp.iter().enumerate() {
                            d[c * plane + p] = *v;
                        }
                        for o in 0..out.c {
                            z[o * plane + p] = self.dws_pointwise_unit(&dp, o);
                        }
                    }
                }
                (z, d)
            }
            LayerSpec::AvgPool { .. } => (self.avg_pool(x).data, Vec::new()),
        }
    }

    /// Activations of unit `o` at every output position.
    pub fn unit_outputs(&self, x: &Tensor, o: usize) -> Vec<f64> {
        let out = self.out_shape;
        let act = self.activation();
        match self.spec {
            LayerSpec::Dense { .. } => vec![act.apply(self.dense_unit(&x.data, o))],
            LayerSpec::Conv2d { .. } => {
                let mut v = Vec::with_capacity(out.plane());
                for i in 0..out.h {
                    for j in 0..out.w {
                        v.push(act.apply(self.conv_unit(x, o, i, j)));
                    }
                }
                v
            }
            LayerSpec::DwsConv2d { .. } => {
                let mut v = Vec::with_capacity(out.plane());
                for i in 0..out.h {
                    for j in 0..out.w {
                        v.push(act.apply(self.dws_pointwise_unit(&self.dws_depthwise_pixel(x, i, j), o)));
                    }
                }
                v
            }
            LayerSpec::AvgPool { .. } => {
                let plane = out.plane();
                self.avg_pool(x).data[o * plane..(o + 1) * plane].to_vec()
            }
        }
    }

    /// Loop nest executed for this layer when `active_out` of its units
    /// survive and `active_in` input channels are non-zero.
    pub fn loop_shape(&self, active_in: usize, active_out: usize) -> Option<LoopShape> {
        let kind = self.spec.kernel_kind()?;
        let out = self.out_shape;
        let (extent, inner) = match self.spec {
            LayerSpec::Dense { .. } => (active_out, active_out),
            LayerSpec::Conv2d { .. } => (active_out * out.plane(), out.w),
            LayerSpec::DwsConv2d { .. } => (if active_out == 0 { 0 } else { out.plane() }, out.w),
            LayerSpec::AvgPool { .. } => return None,
        };
        Some(LoopShape {
            kind,
            extent: extent as u64,
            inner_extent: inner.max(1) as u64,
            macs_per_iter: self.macs_per_iteration(active_in, active_out).max(1),
        })
    }

    /// MACs to produce one output unit's worth of work: a dense neuron, a
    /// conv output pixel, or a dws pixel across `active_out` channels.
    pub fn macs_per_iteration(&self, active_in: usize, active_out: usize) -> u64 {
        let (kh, kw) = self.kernel_dims();
        let plane_in = self.in_shape.plane();
        (match self.spec {
            LayerSpec::Dense { .. } => active_in * plane_in,
            LayerSpec::Conv2d { .. } => active_in * kh * kw,
            LayerSpec::DwsConv2d { .. } => active_in * kh * kw + active_out * active_in,
            LayerSpec::AvgPool { .. } => 0,
        }) as u64
    }
}

/// Iteration space of one layer's kernel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopShape {
    pub kind: KernelKind,
    pub extent: u64,
    pub inner_extent: u64,
    pub macs_per_iter: u64,
}

/// A group of parameters owned by one neuron (or one depthwise channel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronGroup {
    pub layer: usize,
    pub unit: usize,
    /// Flat indices of the fan-in weights.
    pub weights: Vec<usize>,
    pub bias: Option<usize>,
    /// Mask site and unit controlling this group's output, if any.
    pub site: Option<(usize, usize)>,
}

/// Per-site multipliers applied to unit outputs. Site 0 is the network
/// input; site `k` is the output of the `k`-th weighted layer (the output
/// layer has no site).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMask {
    pub sites: Vec<Vec<f64>>,
}

impl SiteMask {
    pub fn all_ones(net: &Network) -> Self {
        Self { sites: net.site_sizes().into_iter().map(|n| vec![1.0; n]).collect() }
    }

    pub fn from_binary(sites: &[Vec<bool>]) -> Self {
        Self { sites: sites.iter().map(|s| s.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `0.5 * sum (y - t)^2`
    Mse,
    /// Softmax cross-entropy on the raw outputs.
    #[default]
    CrossEntropy,
}

impl LossKind {
    pub fn loss_and_grad(self, y: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
        match self {
            LossKind::Mse => {
                let g: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
                (0.5 * g.iter().map(|d| d * d).sum::<f64>(), g)
            }
            LossKind::CrossEntropy => {
                let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let log_z = m + sum.ln();
                let loss = y.iter().zip(t).map(|(v, tt)| -tt * (v - log_z)).sum();
                (loss, exps.iter().zip(t).map(|(e, tt)| e / sum - tt).collect())
            }
        }
    }
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer, after the preceding mask site.
    pub inputs: Vec<Tensor>,
    z: Vec<Vec<f64>>,
    /// Unmasked activations of every layer.
    pub a: Vec<Vec<f64>>,
    depthwise: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Gradients of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Flat parameter gradient, same layout as [`Network::params`].
    pub params: Vec<f64>,
    /// Per site and unit, the batch mean of `sum_pos (dL/d out) * a` where
    /// `a` is the unit's unmasked activation.
    pub site_saliency: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(input: Shape, specs: &[LayerSpec]) -> Result<Self, DynfitError> {
        if input.is_empty() {
            return Err(DynfitError::ShapeMismatch("empty input shape".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input;
        for spec in specs {
            let layer = Layer::new(*spec, shape)?;
            shape = layer.out_shape;
            layers.push(layer);
        }
        match layers.last() {
            Some(l) if l.spec.is_weighted() => {}
            _ => return Err(DynfitError::ShapeMismatch("network must end with a weighted layer".into())),
        }
        Ok(Self { input, layers })
    }

    /// Uniform fan-in scaled initialization, deterministic in `seed`.
    pub fn initialized(input: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self, DynfitError> {
        let mut net = Self::new(input, specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let (kh, kw) = layer.kernel_dims();
            let fan_in = match layer.spec {
                LayerSpec::Dense { .. } => layer.in_shape.len(),
                LayerSpec::Conv2d { .. } => layer.in_shape.c * kh * kw,
                LayerSpec::DwsConv2d { .. } => layer.in_shape.c,
                LayerSpec::AvgPool { .. } => 1,
            };
            let bound = (3.0 / fan_in as f64).sqrt();
            layer.weights.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
            let dbound = (3.0 / (kh * kw) as f64).sqrt();
            layer.depthwise.iter_mut().for_each(|w| *w = rng.gen_range(-dbound..dbound));
        }
        Ok(net)
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().expect("validated non-empty").out_shape
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.depthwise);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), DynfitError> {
        if p.len() != self.param_count() {
            return Err(DynfitError::ShapeMismatch(format!("{} params for a {}-param network", p.len(), self.param_count())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for buf in [&mut l.weights, &mut l.depthwise, &mut l.bias] {
                let n = buf.len();
                buf.copy_from_slice(&p[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Indices of the weighted layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].spec.is_weighted()).collect()
    }

    /// Unit counts of every mask site.
    pub fn site_sizes(&self) -> Vec<usize> {
        let wl = self.weighted_layers();
        let mut sizes = vec![self.input.c];
        sizes.extend(wl[..wl.len() - 1].iter().map(|&i| self.layers[i].units()));
        sizes
    }

    /// Mask site fed by layer `li`'s output, if any.
    pub fn site_of_layer(&self, li: usize) -> Option<usize> {
        let wl = self.weighted_layers();
        let k = wl.iter().position(|&i| i == li)?;
        (k + 1 < wl.len()).then_some(k + 1)
    }

    /// Layer whose output feeds site `k >= 1`.
    pub fn layer_of_site(&self, k: usize) -> Option<usize> {
        let wl = self.weighted_layers();
        (k >= 1 && k < wl.len()).then(|| wl[k - 1])
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offs.push(off);
            off += l.param_count();
        }
        offs
    }

    /// Every parameter belongs to exactly one group.
    pub fn neuron_groups(&self) -> Vec<NeuronGroup> {
        let offs = self.param_offsets();
        let mut groups = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            if !l.spec.is_weighted() {
                continue;
            }
            let site = self.site_of_layer(li);
            let units = l.units();
            let row = l.weights.len() / units;
            let bias0 = offs[li] + l.weights.len() + l.depthwise.len();
            for o in 0..units {
                let start = offs[li] + o * row;
                groups.push(NeuronGroup {
                    layer: li,
                    unit: o,
                    weights: (start..start + row).collect(),
                    bias: Some(bias0 + o),
                    site: site.map(|s| (s, o)),
                });
            }
            if !l.depthwise.is_empty() {
                let (kh, kw) = l.kernel_dims();
                for c in 0..l.in_shape.c {
                    let start = offs[li] + l.weights.len() + c * kh * kw;
                    groups.push(NeuronGroup { layer: li, unit: units + c, weights: (start..start + kh * kw).collect(), bias: None, site: None });
                }
            }
        }
        groups
    }

    /// Copy with each group's weights passed through quantize/dequantize at
    /// its bit width; the per-group scale is the row's largest magnitude.
    pub fn fake_quantized(&self, q: &[BitWidth]) -> Result<Network, DynfitError> {
        let groups = self.neuron_groups();
        if q.len() != groups.len() {
            return Err(DynfitError::ShapeMismatch(format!("{} bit widths for {} neuron groups", q.len(), groups.len())));
        }
        let mut p = self.params();
        for (g, &bits) in groups.iter().zip(q) {
            let scale = g.weights.iter().map(|&i| p[i].abs()).fold(0.0, f64::max);
            if scale > 0.0 && scale.is_finite() {
                let f = QFormat { bits, scale };
                for &i in &g.weights {
                    p[i] = f.decode(f.encode(p[i]));
                }
            }
        }
        let mut out = self.clone();
        out.set_params(&p)?;
        Ok(out)
    }

    fn check_input(&self, x: &Tensor) -> Result<(), DynfitError> {
        if x.shape != self.input {
            return Err(DynfitError::ShapeMismatch(format!("input {:?}, network expects {:?}", x.shape, self.input)));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &SiteMask) -> Result<(), DynfitError> {
        let sizes = self.site_sizes();
        if mask.sites.len() != sizes.len() || mask.sites.iter().zip(&sizes).any(|(s, &n)| s.len() != n) {
            return Err(DynfitError::ShapeMismatch("mask does not match the network's sites".into()));
        }
        Ok(())
    }

    fn apply_site(t: &mut Tensor, m: &[f64]) {
        let plane = t.shape.plane();
        for (c, &k) in m.iter().enumerate() {
            if k != 1.0 {
                t.data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v *= k);
            }
        }
    }

    /// Forward pass with per-site output multipliers.
    pub fn forward_cached(&self, x: &Tensor, mask: &SiteMask) -> Result<ForwardCache, DynfitError> {
        self.check_input(x)?;
        self.check_mask(mask)?;
        let mut cur = x.clone();
        Self::apply_site(&mut cur, &mask.sites[0]);
        let mut cache = ForwardCache { inputs: Vec::new(), z: Vec::new(), a: Vec::new(), depthwise: Vec::new(), output: Vec::new() };
        for (li, layer) in self.layers.iter().enumerate() {
            let (z, d) = layer.pre_activation(&cur);
            let act = layer.activation();
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            let mut out = Tensor { shape: layer.out_shape, data: a.clone() };
            if let Some(s) = self.site_of_layer(li) {
                Self::apply_site(&mut out, &mask.sites[s]);
            }
            cache.inputs.push(std::mem::replace(&mut cur, out));
            cache.z.push(z);
            cache.a.push(a);
            cache.depthwise.push(d);
        }
        cache.output = cur.data;
        Ok(cache)
    }

    pub fn forward_masked(&self, x: &Tensor, mask: &SiteMask) -> Result<Vec<f64>, DynfitError> {
        Ok(self.forward_cached(x, mask)?.output)
    }

    pub fn forward_plain(&self, x: &Tensor) -> Result<Vec<f64>, DynfitError> {
        self.forward_masked(x, &SiteMask::all_ones(self))
    }

    /// Reverse-mode gradients of the batch-mean loss.
    pub fn gradients(&self, xs: &[Tensor], targets: &[Vec<f64>], mask: &SiteMask, loss: LossKind) -> Result<Gradients, DynfitError> {
        if xs.is_empty() || xs.len() != targets.len() {
            return Err(DynfitError::ShapeMismatch("batch must be non-empty with one target per input".into()));
        }
        let out_len = self.output_shape().len();
        let offs = self.param_offsets();
        let mut grads = vec![0.0; self.param_count()];
        let mut sal: Vec<Vec<f64>> = self.site_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(targets) {
            if t.len() != out_len {
                return Err(DynfitError::ShapeMismatch(format!("target of {} for {out_len} outputs", t.len())));
            }
            let cache = self.forward_cached(x, mask)?;
            let (l, g) = loss.loss_and_grad(&cache.output, t);
            total += l;
            self.backward_into(&cache, g, mask, &offs, &mut grads, &mut sal);
        }
        let inv = 1.0 / xs.len() as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        sal.iter_mut().flatten().for_each(|s| *s *= inv);
        Ok(Gradients { loss: total * inv, params: grads, site_saliency: sal })
    }

    fn backward_into(
        &self,
        cache: &ForwardCache,
        mut g_out: Vec<f64>,
        mask: &SiteMask,
        offs: &[usize],
        grads: &mut [f64],
        sal: &mut [Vec<f64>],
    ) {
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &cache.inputs[li];
            let out = layer.out_shape;
            let plane = out.plane();
            if let Some(s) = self.site_of_layer(li) {
                for (c, &m) in mask.sites[s].iter().enumerate() {
                    let r = c * plane..(c + 1) * plane;
                    sal[s][c] += g_out[r.clone()].iter().zip(&cache.a[li][r.clone()]).map(|(g, a)| g * a).sum::<f64>();
                    g_out[r].iter_mut().for_each(|g| *g *= m);
                }
            }
            let act = layer.activation();
            let gz: Vec<f64> = g_out
                .iter()
                .zip(&cache.z[li])
                .zip(&cache.a[li])
                .map(|((g, &z), &a)| g * act.derivative(z, a))
                .collect();
            let mut gx = vec![0.0; layer.in_shape.len()];
            let off = offs[li];
            let nw = layer.weights.len();
            let nd = layer.depthwise.len();
            let (kh, kw) = layer.kernel_dims();
            let c_in = layer.in_shape.c;
            match layer.spec {
                LayerSpec::Dense { .. } => {
                    let n_in = x.data.len();
                    for (o, &g) in gz.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * n_in..(o + 1) * n_in];
                        let gw = &mut grads[off + o * n_in..off + (o + 1) * n_in];
                        for i in 0..n_in {
                            gw[i] += g * x.data[i];
                            gx[i] += row[i] * g;
                        }
                        grads[off + nw + o] += g;
                    }
                }
                LayerSpec::Conv2d { .. } => {
                    for o in 0..out.c {
                        for i in 0..out.h {
                            for j in 0..out.w {
                                let g = gz[o * plane + i * out.w + j];
                                if g == 0.0 {
                                    continue;
                                }
                                grads[off + nw + o] += g;
                                for c in 0..c_in {
                                    let base = (o * c_in + c) * kh * kw;
                                    for a in 0..kh {
                                        for b in 0..kw {
                                            let xi = (c * x.shape.h + i + a) * x.shape.w + j + b;
                                            grads[off + base + a * kw + b] += g * x.data[xi];
                                            gx[xi] += layer.weights[base + a * kw + b] * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                LayerSpec::DwsConv2d { .. } => {
                    let d = &cache.depthwise[li];
                    let mut gd = vec![0.0; c_in * plane];
                    for o in 0..out.c {
                        for p in 0..plane {
                            let g = gz[o * plane + p];
                            if g == 0.0 {
                                continue;
                            }
                            grads[off + nw + nd + o] += g;
                            for c in 0..c_in {
                                grads[off + o * c_in + c] += g * d[c * plane + p];
                                gd[c * plane + p] += layer.weights[o * c_in + c] * g;
                            }
                        }
                    }
                    for c in 0..c_in {
                        for i in 0..out.h {
                            for j in 0..out.w {
                                let g = gd[c * plane + i * out.w + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for a in 0..kh {
                                    for b in 0..kw {
                                        let xi = (c * x.shape.h + i + a) * x.shape.w + j + b;
                                        let di = (c * kh + a) * kw + b;
                                        grads[off + nw + di] += g * x.data[xi];
                                        gx[xi] += layer.depthwise[di] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                LayerSpec::AvgPool { size } => {
                    let inv = 1.0 / (size * size) as f64;
                    for c in 0..out.c {
                        for i in 0..out.h {
                            for j in 0..out.w {
                                let g = gz[(c * out.h + i) * out.w + j] * inv;
                                for a in 0..size {
                                    for b in 0..size {
                                        gx[(c * x.shape.h + i * size + a) * x.shape.w + j * size + b] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            g_out = gx;
        }
        // Input site: saliency of the raw features.
        let x = &cache.inputs[0];
        let plane = x.shape.plane();
        for c in 0..x.shape.c {
            let r = c * plane..(c + 1) * plane;
            sal[0][c] += g_out[r.clone()].iter().zip(&x.data[r]).map(|(g, a)| g * a).sum::<f64>();
        }
    }

    pub fn loss(&self, xs: &[Tensor], targets: &[Vec<f64>], mask: &SiteMask, loss: LossKind) -> Result<f64, DynfitError> {
        if xs.is_empty() || xs.len() != targets.len() {
            return Err(DynfitError::ShapeMismatch("batch must be non-empty with one target per input".into()));
        }
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(targets) {
            total += loss.loss_and_grad(&self.forward_masked(x, mask)?, t).0;
        }
        Ok(total / xs.len() as f64)
    }
}

/// Index of the largest output (first on ties).
pub fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in y.iter().enumerate() {
        if *v > y[best] {
            best = i;
        }
    }
    best
}
