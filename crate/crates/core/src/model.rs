//! The fixed LeNet-style classifier.
//!
//! ```text
//! x [C×32×32]
//!   conv1 (12 maps, 5×5, stride 2, pad 2) → sigmoid   [12×16×16]
//!   conv2 (12 maps, 5×5, stride 2, pad 2) → sigmoid   [12×8×8]
//!   conv3 (12 maps, 5×5, stride 1, pad 2) → sigmoid   [12×8×8]
//!   flatten                                            [768]
//!   fc    (768 → num_classes)                          logits
//! ```
//!
//! Parameters are kept in the fixed order of [`PARAM_NAMES`]. Besides the
//! forward pass and first-order parameter gradients this module provides the
//! gradient of the gradient-matching loss with respect to the model input
//! (and the soft label), obtained by running reverse mode over the
//! first-order backward pass itself.

use crate::error::{Error, Result};
use crate::leakage::softmax_grad;
use crate::tensor::{
    channel_sums, conv2d, conv2d_input_grad, conv2d_kernel_grad, correlate, dot, log_sum_exp,
    sigmoid, softmax, Rng, Tensor,
};

pub const IMAGE_SIDE: usize = 32;
pub const CONV_MAPS: usize = 12;
pub const KERNEL: usize = 5;
pub const PAD: usize = 2;
pub const STRIDES: [usize; 3] = [2, 2, 1];
/// Length of the flattened conv3 output, the input of the fc layer.
pub const FEATURES: usize = CONV_MAPS * 8 * 8;

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc.w", "fc.b",
];
const FC_W: usize = 6;
const FC_B: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub image_side: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, num_classes: usize) -> Result<Self> {
        let arch = Architecture {
            in_channels,
            image_side: IMAGE_SIDE,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.image_side != IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image_side must be {IMAGE_SIDE}, got {}",
                self.image_side
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_side, self.image_side]
    }

    /// Shapes in [`PARAM_NAMES`] order.
    pub fn param_shapes(&self) -> [Vec<usize>; 8] {
        let k = KERNEL;
        [
            vec![CONV_MAPS, self.in_channels, k, k],
            vec![CONV_MAPS],
            vec![CONV_MAPS, CONV_MAPS, k, k],
            vec![CONV_MAPS],
            vec![CONV_MAPS, CONV_MAPS, k, k],
            vec![CONV_MAPS],
            vec![self.num_classes, FEATURES],
            vec![self.num_classes],
        ]
    }

    /// Spatial side of the input to conv layer `layer` (0-based).
    fn side_before(&self, layer: usize) -> usize {
        let mut side = self.image_side;
        for &s in &STRIDES[..layer] {
            side = (side + 2 * PAD - KERNEL) / s + 1;
        }
        side
    }
}

fn check_structure(arch: &Architecture, tensors: &[Tensor], what: &str) -> Result<()> {
    if tensors.len() != PARAM_NAMES.len() {
        return Err(Error::dim(format!(
            "{what} has {} tensors, expected {}",
            tensors.len(),
            PARAM_NAMES.len()
        )));
    }
    for ((name, shape), t) in PARAM_NAMES.iter().zip(arch.param_shapes()).zip(tensors) {
        if t.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "{what} entry {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Model {
    arch: Architecture,
    params: Vec<Tensor>,
}

/// Per-parameter gradients, mirroring [`Model`]'s parameter order and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    grads: Vec<Tensor>,
}

/// Activations retained from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    h1: Tensor,
    h2: Tensor,
    h3: Tensor,
    logits: Tensor,
}

impl ForwardTrace {
    /// Sigmoid outputs of the three conv layers.
    pub fn conv_activations(&self) -> [&Tensor; 3] {
        [&self.h1, &self.h2, &self.h3]
    }

    /// The flattened penultimate activation vector fed to the fc layer.
    pub fn hidden(&self) -> &[f64] {
        self.h3.data()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// The label side of a cross-entropy evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Label<'a> {
    /// One-hot class index.
    Hard(usize),
    /// Arbitrary non-negative weights over classes (need not sum to one).
    Soft(&'a Tensor),
}

/// Value and derivatives of the gradient-matching loss at one point.
#[derive(Clone, Debug)]
pub struct GradMatch {
    pub loss: f64,
    pub input_grad: Tensor,
    /// Only present for [`Label::Soft`].
    pub label_grad: Option<Tensor>,
}

/// Intermediates of the first-order backward pass that the second-order
/// pass differentiates through.
struct Backprop {
    g: Tensor,
    da: Tensor,
    dz3: Tensor,
    dh2: Tensor,
    dz2: Tensor,
    dh1: Tensor,
    dz1: Tensor,
    grads: GradSet,
}

/// `−log softmax(logits)_c` in the max-shifted form.
pub fn cross_entropy(logits: &Tensor, c: usize) -> Result<f64> {
    if c >= logits.len() {
        return Err(Error::Index {
            index: c,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits.data()) - logits.data()[c])
}

/// `−Σ_j p_j log softmax(logits)_j`.
pub fn soft_cross_entropy(logits: &Tensor, p: &Tensor) -> Result<f64> {
    if p.len() != logits.len() {
        return Err(Error::dim(format!(
            "soft label {:?} does not match logits {:?}",
            p.shape(),
            logits.shape()
        )));
    }
    let lse = log_sum_exp(logits.data());
    Ok(p.data()
        .iter()
        .zip(logits.data())
        .map(|(pj, yj)| pj * (lse - yj))
        .sum())
}

/// `out[i] = x[i] * y[i] * (1 - y[i])`, the sigmoid chain factor.
fn through_sigmoid(upstream: &Tensor, out: &Tensor) -> Tensor {
    upstream
        .zip_with(out, |u, o| u * o * (1.0 - o))
        .expect("activation shapes are fixed")
}

/// `out[i] += upstream[i] * dpre[i] * (1 - 2 h[i])`: the adjoint of `h` in
/// `dz = dh ⊙ h(1-h)`.
fn accumulate_sigmoid_curvature(acc: &mut Tensor, upstream: &Tensor, dpre: &Tensor, h: &Tensor) {
    let acc = acc.data_mut();
    for (i, a) in acc.iter_mut().enumerate() {
        let hv = h.data()[i];
        *a += upstream.data()[i] * dpre.data()[i] * (1.0 - 2.0 * hv);
    }
}

fn add_bias_planes(t: &mut Tensor, bias: &Tensor) {
    let plane = t.len() / bias.len();
    for (k, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[k];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

impl Model {
    /// Every parameter i.i.d. uniform on `[-0.5, 0.5)`, drawn in
    /// [`PARAM_NAMES`] order.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| rng.sample_uniform(s, -0.5, 0.5))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        check_structure(&arch, &params, "parameter list")?;
        Ok(Model { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let params = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Model::from_params(arch, params)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.params[i])
    }

    /// Copy of the model with one parameter tensor replaced.
    pub fn with_param(&self, name: &str, value: Tensor) -> Result<Model> {
        let idx = PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let mut params = self.params.clone();
        params[idx] = value;
        Model::from_params(self.arch, params)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.arch.input_shape() {
            return Err(Error::dim(format!(
                "input shape {:?}, model expects {:?}",
                x.shape(),
                self.arch.input_shape()
            )));
        }
        Ok(())
    }

    fn conv(&self, layer: usize) -> (&Tensor, &Tensor, usize) {
        (&self.params[2 * layer], &self.params[2 * layer + 1], STRIDES[layer])
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let (w1, b1, s1) = self.conv(0);
        let (w2, b2, s2) = self.conv(1);
        let (w3, b3, s3) = self.conv(2);
        let h1 = sigmoid(&conv2d(x, w1, b1, s1, PAD)?);
        let h2 = sigmoid(&conv2d(&h1, w2, b2, s2, PAD)?);
        let h3 = sigmoid(&conv2d(&h2, w3, b3, s3, PAD)?);
        let fc_w = &self.params[FC_W];
        let fc_b = &self.params[FC_B];
        let logits: Vec<f64> = (0..self.arch.num_classes)
            .map(|i| dot(fc_w.row(i), h3.data()) + fc_b.data()[i])
            .collect();
        Ok(ForwardTrace {
            h1,
            h2,
            h3,
            logits: Tensor::from_vec(logits),
        })
    }

    fn check_label(&self, label: Label<'_>) -> Result<()> {
        match label {
            Label::Hard(c) if c >= self.arch.num_classes => Err(Error::Index {
                index: c,
                len: self.arch.num_classes,
            }),
            Label::Soft(p) if p.len() != self.arch.num_classes => Err(Error::dim(format!(
                "soft label {:?} for {} classes",
                p.shape(),
                self.arch.num_classes
            ))),
            _ => Ok(()),
        }
    }

    /// Loss gradient with respect to the logits.
    fn logit_grad(&self, logits: &Tensor, label: Label<'_>) -> Result<Tensor> {
        match label {
            Label::Hard(c) => softmax_grad(logits, c),
            Label::Soft(p) => {
                let s = softmax(logits.data());
                let mass = p.sum();
                Ok(Tensor::from_vec(
                    s.iter().zip(p.data()).map(|(si, pi)| mass * si - pi).collect(),
                ))
            }
        }
    }

    pub fn loss(&self, x: &Tensor, label: Label<'_>) -> Result<f64> {
        self.check_label(label)?;
        let trace = self.forward(x)?;
        match label {
            Label::Hard(c) => cross_entropy(trace.logits(), c),
            Label::Soft(p) => soft_cross_entropy(trace.logits(), p),
        }
    }

    fn backprop(&self, x: &Tensor, trace: &ForwardTrace, g: Tensor) -> Result<Backprop> {
        let arch = &self.arch;
        let fc_w = &self.params[FC_W];
        let (w2, _, s2) = self.conv(1);
        let (w3, _, s3) = self.conv(2);
        let (_, _, s1) = self.conv(0);
        let k = (KERNEL, KERNEL);

        let mut fc_w_grad = Vec::with_capacity(arch.num_classes * FEATURES);
        for &gi in g.data() {
            fc_w_grad.extend(trace.hidden().iter().map(|a| gi * a));
        }
        let mut da = vec![0.0; FEATURES];
        for (i, &gi) in g.data().iter().enumerate() {
            for (d, w) in da.iter_mut().zip(fc_w.row(i)) {
                *d += gi * w;
            }
        }
        let da = Tensor::new(trace.h3.shape(), da)?;

        let dz3 = through_sigmoid(&da, &trace.h3);
        let gw3 = conv2d_kernel_grad(&trace.h2, &dz3, k, s3, PAD)?;
        let side2 = arch.side_before(2);
        let dh2 = conv2d_input_grad(w3, &dz3, (side2, side2), s3, PAD)?;

        let dz2 = through_sigmoid(&dh2, &trace.h2);
        let gw2 = conv2d_kernel_grad(&trace.h1, &dz2, k, s2, PAD)?;
        let side1 = arch.side_before(1);
        let dh1 = conv2d_input_grad(w2, &dz2, (side1, side1), s2, PAD)?;

        let dz1 = through_sigmoid(&dh1, &trace.h1);
        let gw1 = conv2d_kernel_grad(x, &dz1, k, s1, PAD)?;

        let grads = GradSet {
            grads: vec![
                gw1,
                channel_sums(&dz1),
                gw2,
                channel_sums(&dz2),
                gw3,
                channel_sums(&dz3),
                Tensor::new(&[arch.num_classes, FEATURES], fc_w_grad)?,
                g.clone(),
            ],
        };
        Ok(Backprop {
            g,
            da,
            dz3,
            dh2,
            dz2,
            dh1,
            dz1,
            grads,
        })
    }

    /// Exact cross-entropy gradient with respect to every parameter for the
    /// one-hot label `c`.
    pub fn backward(&self, x: &Tensor, c: usize) -> Result<GradSet> {
        self.gradients(x, Label::Hard(c))
    }

    pub fn gradients(&self, x: &Tensor, label: Label<'_>) -> Result<GradSet> {
        self.check_label(label)?;
        let trace = self.forward(x)?;
        let g = self.logit_grad(trace.logits(), label)?;
        Ok(self.backprop(x, &trace, g)?.grads)
    }

    /// Squared Frobenius distance, summed over parameters, between the
    /// gradients at `(x_dummy, c)` and `target`.
    pub fn grad_match_loss(&self, x_dummy: &Tensor, c: usize, target: &GradSet) -> Result<f64> {
        self.check_target(target)?;
        self.backward(x_dummy, c)?.sq_distance(target)
    }

    pub fn grad_match_input_grad(&self, x_dummy: &Tensor, c: usize, target: &GradSet) -> Result<Tensor> {
        Ok(self.grad_match(x_dummy, Label::Hard(c), target)?.input_grad)
    }

    /// Gradient of the soft-label matching loss with respect to the soft
    /// label vector.
    pub fn grad_match_label_grad(
        &self,
        x_dummy: &Tensor,
        soft_label: &Tensor,
        target: &GradSet,
    ) -> Result<Tensor> {
        Ok(self
            .grad_match(x_dummy, Label::Soft(soft_label), target)?
            .label_grad
            .expect("soft label yields a label gradient"))
    }

    fn check_target(&self, target: &GradSet) -> Result<()> {
        check_structure(&self.arch, &target.grads, "target gradient set")
    }

    /// Loss value together with its gradients with respect to the input and,
    /// for soft labels, the label.
    pub fn grad_match(&self, x: &Tensor, label: Label<'_>, target: &GradSet) -> Result<GradMatch> {
        self.check_label(label)?;
        self.check_target(target)?;
        let trace = self.forward(x)?;
        let g = self.logit_grad(trace.logits(), label)?;
        let bp = self.backprop(x, &trace, g)?;

        let mut loss = 0.0;
        let bars: Vec<Tensor> = bp
            .grads
            .grads
            .iter()
            .zip(&target.grads)
            .map(|(mine, theirs)| {
                let diff = mine.sub(theirs).expect("structure checked");
                loss += diff.sq_norm();
                diff.scale(2.0)
            })
            .collect();
        let [bw1, bb1, bw2, bb2, bw3, bb3, bfw, bfb] = &bars[..] else {
            unreachable!("eight parameter tensors")
        };

        let arch = &self.arch;
        let (w1, _, s1) = self.conv(0);
        let (w2, _, s2) = self.conv(1);
        let (w3, _, s3) = self.conv(2);
        let fc_w = &self.params[FC_W];
        let (side0, side1, side2) = (arch.side_before(0), arch.side_before(1), arch.side_before(2));
        let (h1, h2, h3) = (&trace.h1, &trace.h2, &trace.h3);

        // Reverse through the backward pass, last statement first.
        // conv1 weight/bias gradients: gw1 = K(x, dz1), gb1 = Σ dz1
        let mut dz1_bar = correlate(x, bw1, s1, PAD)?;
        add_bias_planes(&mut dz1_bar, bb1);
        let mut x_bar = conv2d_input_grad(bw1, &bp.dz1, (side0, side0), s1, PAD)?;

        // dz1 = dh1 ⊙ h1(1-h1)
        let dh1_bar = through_sigmoid(&dz1_bar, h1);
        let mut h1_bar = Tensor::zeros(h1.shape());
        accumulate_sigmoid_curvature(&mut h1_bar, &dz1_bar, &bp.dh1, h1);

        // dh1 = I(w2, dz2); gw2 = K(h1, dz2); gb2 = Σ dz2
        let mut dz2_bar = correlate(&dh1_bar, w2, s2, PAD)?;
        add_into(&mut dz2_bar, &correlate(h1, bw2, s2, PAD)?);
        add_bias_planes(&mut dz2_bar, bb2);
        add_into(&mut h1_bar, &conv2d_input_grad(bw2, &bp.dz2, (side1, side1), s2, PAD)?);

        // dz2 = dh2 ⊙ h2(1-h2)
        let dh2_bar = through_sigmoid(&dz2_bar, h2);
        let mut h2_bar = Tensor::zeros(h2.shape());
        accumulate_sigmoid_curvature(&mut h2_bar, &dz2_bar, &bp.dh2, h2);

        // dh2 = I(w3, dz3); gw3 = K(h2, dz3); gb3 = Σ dz3
        let mut dz3_bar = correlate(&dh2_bar, w3, s3, PAD)?;
        add_into(&mut dz3_bar, &correlate(h2, bw3, s3, PAD)?);
        add_bias_planes(&mut dz3_bar, bb3);
        add_into(&mut h2_bar, &conv2d_input_grad(bw3, &bp.dz3, (side2, side2), s3, PAD)?);

        // dz3 = da ⊙ h3(1-h3)
        let da_bar = through_sigmoid(&dz3_bar, h3);
        let mut h3_bar = Tensor::zeros(h3.shape());
        accumulate_sigmoid_curvature(&mut h3_bar, &dz3_bar, &bp.da, h3);

        // da = fc_wᵀ g; fc_w grad = g aᵀ; fc_b grad = g
        let a = h3.data();
        let mut g_bar = vec![0.0; arch.num_classes];
        {
            let h3_acc = h3_bar.data_mut();
            for (i, gb) in g_bar.iter_mut().enumerate() {
                let bfw_row = bfw.row(i);
                *gb = dot(fc_w.row(i), da_bar.data()) + dot(bfw_row, a) + bfb.data()[i];
                let gi = bp.g.data()[i];
                for (acc, b) in h3_acc.iter_mut().zip(bfw_row) {
                    *acc += b * gi;
                }
            }
        }

        // g = mass·softmax(y) − p
        let s = softmax(trace.logits().data());
        let s_dot_gbar = dot(&s, &g_bar);
        let (mass, label_grad) = match label {
            Label::Hard(_) => (1.0, None),
            Label::Soft(p) => (
                p.sum(),
                Some(Tensor::from_vec(g_bar.iter().map(|gb| s_dot_gbar - gb).collect())),
            ),
        };
        let y_bar: Vec<f64> = s
            .iter()
            .zip(&g_bar)
            .map(|(si, gb)| mass * si * (gb - s_dot_gbar))
            .collect();

        // Back through the forward pass: y = fc_w a + b, then the conv stack.
        {
            let h3_acc = h3_bar.data_mut();
            for (i, yb) in y_bar.iter().enumerate() {
                if *yb == 0.0 {
                    continue;
                }
                for (acc, w) in h3_acc.iter_mut().zip(fc_w.row(i)) {
                    *acc += yb * w;
                }
            }
        }
        let z3_bar = through_sigmoid(&h3_bar, h3);
        add_into(&mut h2_bar, &conv2d_input_grad(w3, &z3_bar, (side2, side2), s3, PAD)?);
        let z2_bar = through_sigmoid(&h2_bar, h2);
        add_into(&mut h1_bar, &conv2d_input_grad(w2, &z2_bar, (side1, side1), s2, PAD)?);
        let z1_bar = through_sigmoid(&h1_bar, h1);
        add_into(&mut x_bar, &conv2d_input_grad(w1, &z1_bar, (side0, side0), s1, PAD)?);

        Ok(GradMatch {
            loss,
            input_grad: x_bar,
            label_grad,
        })
    }
}

impl GradSet {
    /// Wraps tensors given in [`PARAM_NAMES`] order, checking them against
    /// the architecture.
    pub fn new(arch: &Architecture, grads: Vec<Tensor>) -> Result<Self> {
        check_structure(arch, &grads, "gradient set")?;
        Ok(GradSet { grads })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        GradSet {
            grads: arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.iter().copied().zip(&self.grads)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.grads[i])
    }

    /// Output-layer weight gradient, one row per class.
    pub fn fc_w(&self) -> &Tensor {
        &self.grads[FC_W]
    }

    pub fn fc_b(&self) -> &Tensor {
        &self.grads[FC_B]
    }

    pub fn scale(&self, factor: f64) -> GradSet {
        GradSet {
            grads: self.grads.iter().map(|t| t.scale(factor)).collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum()
    }

    pub fn sq_distance(&self, other: &GradSet) -> Result<f64> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::dim("gradient sets differ in length"));
        }
        self.grads
            .iter()
            .zip(&other.grads)
            .map(|(a, b)| a.sub(b).map(|d| d.sq_norm()))
            .sum()
    }
}
