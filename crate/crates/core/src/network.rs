//! Fully connected network under NTK parametrization.
//!
//! Every layer `l = 1..=L+1` maps its input through
//! `h = (sigma_w[l] / sqrt(d_in)) * g * W + sigma_b[l] * 1 * b`, with
//! `g` the previous layer's activations (the raw inputs for `l = 1`).
//! All weights and biases are iid standard normal a priori, so the
//! width dependence of the prior lives entirely in the scaling factors.
//!
//! The readout layer is linear, which lets us write the network output as
//! `Psi * theta_readout` with `Psi` the scaled last-hidden features, plus a
//! constant `sigma_b[L+1]` column when biases are enabled.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * INV_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
    Erf,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Erf => libm::erf(x),
        }
    }

    /// Derivative, with the subgradient convention `relu'(0) = 0`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_derivative(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp(),
        }
    }

    /// `(apply(x), derivative(x))`, sharing work where possible.
    #[inline]
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                let c = std_normal_cdf(x);
                (x * c, c + x * std_normal_pdf(x))
            }
            other => (other.apply(x), other.derivative(x)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Erf => "erf",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            "erf" => Ok(Activation::Erf),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture and prior scalings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    input_dim: usize,
    hidden_widths: Vec<usize>,
    output_dim: usize,
    activation: Activation,
    sigma_w: Vec<f64>,
    sigma_b: Vec<f64>,
    include_bias: bool,
}

impl NetworkConfig {
    /// `sigma_w` and `sigma_b` hold one (standard deviation) entry per layer,
    /// readout last.
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        sigma_w: Vec<f64>,
        sigma_b: Vec<f64>,
        include_bias: bool,
    ) -> Result<Self> {
        let layers = hidden_widths.len() + 1;
        if input_dim == 0 || output_dim == 0 || hidden_widths.contains(&0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        if hidden_widths.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if sigma_w.len() != layers || sigma_b.len() != layers {
            return Err(Error::Config(format!(
                "expected {layers} sigma_w/sigma_b entries, got {}/{}",
                sigma_w.len(),
                sigma_b.len()
            )));
        }
        if sigma_w.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma_w entries must be positive".into()));
        }
        if sigma_b.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma_b entries must be non-negative".into()));
        }
        Ok(Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation,
            sigma_w,
            sigma_b,
            include_bias,
        })
    }

    /// Hidden layers with `sigma_w^2 = 2`, `sigma_b^2 = 0.01`; readout with
    /// `sigma_w^2 = 1`, `sigma_b^2 = 0.01`; biases on.
    pub fn wide_default(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let depth = hidden_widths.len();
        let mut sigma_w = vec![2f64.sqrt(); depth];
        sigma_w.push(1.0);
        let sigma_b = vec![0.1; depth + 1];
        Self::new(
            input_dim,
            hidden_widths,
            output_dim,
            activation,
            sigma_w,
            sigma_b,
            true,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden_widths
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn sigma_w(&self) -> &[f64] {
        &self.sigma_w
    }

    pub fn sigma_b(&self) -> &[f64] {
        &self.sigma_b
    }

    pub fn include_bias(&self) -> bool {
        self.include_bias
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// `(fan_in, fan_out)` of layer `l` in `1..=L+1`.
    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        assert!(layer >= 1 && layer <= self.depth() + 1);
        let fan_in = if layer == 1 {
            self.input_dim
        } else {
            self.hidden_widths[layer - 2]
        };
        let fan_out = if layer == self.depth() + 1 {
            self.output_dim
        } else {
            self.hidden_widths[layer - 1]
        };
        (fan_in, fan_out)
    }

    /// Rows of the readout block viewed as a matrix: last width plus the
    /// bias row when biases are on.
    pub fn readout_dim(&self) -> usize {
        self.hidden_widths[self.depth() - 1] + usize::from(self.include_bias)
    }

    /// Scaling `sigma_w / sqrt(fan_in)` of layer `l`.
    pub fn weight_scale(&self, layer: usize) -> f64 {
        let (fan_in, _) = self.layer_dims(layer);
        self.sigma_w[layer - 1] / (fan_in as f64).sqrt()
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for layer in 1..=self.depth() + 1 {
            let (fan_in, fan_out) = self.layer_dims(layer);
            blocks.push(Block {
                layer,
                kind: BlockKind::Weight,
                offset,
                rows: fan_in,
                cols: fan_out,
            });
            offset += fan_in * fan_out;
            if self.include_bias {
                blocks.push(Block {
                    layer,
                    kind: BlockKind::Bias,
                    offset,
                    rows: 1,
                    cols: fan_out,
                });
                offset += fan_out;
            }
        }
        let readout_len = self.readout_dim() * self.output_dim;
        Layout {
            blocks,
            total: offset,
            inner_len: offset - readout_len,
            readout_rows: self.readout_dim(),
            readout_cols: self.output_dim,
        }
    }

    /// Short stable descriptor used in hashes and manifests.
    pub fn descriptor(&self) -> String {
        format!(
            "net:m={}:widths={:?}:k={}:act={}:sw={:?}:sb={:?}:bias={}",
            self.input_dim,
            self.hidden_widths,
            self.output_dim,
            self.activation.name(),
            self.sigma_w,
            self.sigma_b,
            self.include_bias
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Weight,
    Bias,
}

/// One contiguous row-major block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub layer: usize,
    pub kind: BlockKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Block map of the flat vector: layer 1 weights, layer 1 bias, ..., readout
/// weights, readout bias. The readout weights and bias are adjacent, so the
/// readout block reads as one row-major `readout_rows x k` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<Block>,
    total: usize,
    inner_len: usize,
    readout_rows: usize,
    readout_cols: usize,
}

impl Layout {
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Total parameter count `D`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Length of the inner (non-readout) prefix.
    pub fn inner_len(&self) -> usize {
        self.inner_len
    }

    pub fn readout_range(&self) -> std::ops::Range<usize> {
        self.inner_len..self.total
    }

    pub fn readout_shape(&self) -> (usize, usize) {
        (self.readout_rows, self.readout_cols)
    }

    pub fn block(&self, layer: usize, kind: BlockKind) -> Option<&Block> {
        self.blocks
            .iter()
            .find(|b| b.layer == layer && b.kind == kind)
    }
}

/// Flat parameter vector together with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights {
    values: Vec<f64>,
    layout: Layout,
}

impl FlatWeights {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { values, layout }
    }

    /// Standard normal prior draw.
    pub fn prior_draw<R: Rng + ?Sized>(layout: Layout, rng: &mut R) -> Self {
        let values = (0..layout.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { values, layout }
    }

    /// Packs per-layer `(weights, bias)` matrices, bias as a `1 x fan_out` row.
    pub fn from_matrices(
        config: &NetworkConfig,
        layers: &[(DMatrix<f64>, Option<DMatrix<f64>>)],
    ) -> Result<Self> {
        let layout = config.layout();
        if layers.len() != config.depth() + 1 {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                config.depth() + 1,
                layers.len()
            )));
        }
        let mut values = vec![0.0; layout.len()];
        for (i, (w, b)) in layers.iter().enumerate() {
            let layer = i + 1;
            let wb = layout.block(layer, BlockKind::Weight).expect("weight block");
            write_block(&mut values, wb, w)?;
            match (layout.block(layer, BlockKind::Bias), b) {
                (Some(bb), Some(b)) => write_block(&mut values, bb, b)?,
                (None, None) => {}
                _ => return Err(Error::Shape(format!("bias presence mismatch at layer {layer}"))),
            }
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn inner(&self) -> &[f64] {
        &self.values[..self.layout.inner_len()]
    }

    pub fn readout(&self) -> &[f64] {
        &self.values[self.layout.readout_range()]
    }

    pub fn readout_mut(&mut self) -> &mut [f64] {
        let r = self.layout.readout_range();
        &mut self.values[r]
    }

    /// Readout parameters as a `readout_dim x k` matrix.
    pub fn readout_matrix(&self) -> DMatrix<f64> {
        let (rows, cols) = self.layout.readout_shape();
        DMatrix::from_row_slice(rows, cols, self.readout())
    }

    pub fn set_readout_matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        let (rows, cols) = self.layout.readout_shape();
        if m.shape() != (rows, cols) {
            return Err(Error::Shape(format!(
                "readout matrix is {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        let out = self.readout_mut();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = m[(r, c)];
            }
        }
        Ok(())
    }

    pub fn block_matrix(&self, layer: usize, kind: BlockKind) -> Option<DMatrix<f64>> {
        let b = self.layout.block(layer, kind)?;
        Some(DMatrix::from_row_slice(b.rows, b.cols, &self.values[b.range()]))
    }
}

fn write_block(values: &mut [f64], block: &Block, m: &DMatrix<f64>) -> Result<()> {
    if m.shape() != (block.rows, block.cols) {
        return Err(Error::Shape(format!(
            "layer {} {:?} block is {:?}, expected {:?}",
            block.layer,
            block.kind,
            m.shape(),
            (block.rows, block.cols)
        )));
    }
    for r in 0..block.rows {
        for c in 0..block.cols {
            values[block.offset + r * block.cols + c] = m[(r, c)];
        }
    }
    Ok(())
}

/// Row-major slice to matrix.
fn rm(rows: usize, cols: usize, s: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, s)
}

/// Row-major flattening of a matrix into `out`.
fn flatten_into(m: &DMatrix<f64>, out: &mut [f64]) {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            out[r * cols + c] = m[(r, c)];
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Hidden pre-activations, `preactivations[l]` for hidden layer `l + 1`.
    pub preactivations: Vec<DMatrix<f64>>,
    /// Hidden activations, same indexing.
    pub postactivations: Vec<DMatrix<f64>>,
    /// Scaled readout features, `n x readout_dim`.
    pub psi: DMatrix<f64>,
    /// Network output `psi * theta_readout`, `n x k`.
    pub output: DMatrix<f64>,
}

fn check_inputs(config: &NetworkConfig, layout: &Layout, inputs: &DMatrix<f64>) -> Result<()> {
    if *layout != config.layout() {
        return Err(Error::Shape("weight layout does not match network config".into()));
    }
    if inputs.ncols() != config.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            config.input_dim()
        )));
    }
    Ok(())
}

/// Pre-activations and post-activations per hidden layer, then `Psi`.
pub type HiddenFeatures = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, DMatrix<f64>);

/// Hidden layers only: returns `(preactivations, postactivations, psi)`.
/// Reads only the inner prefix of `inner`, which therefore may be either
/// the full vector or just its inner part.
pub fn hidden_features(
    config: &NetworkConfig,
    layout: &Layout,
    inner: &[f64],
    inputs: &DMatrix<f64>,
) -> Result<HiddenFeatures> {
    let f = features(config, layout, inner, inputs, false)?;
    Ok((f.pre, f.post, f.psi))
}

pub(crate) struct Features {
    /// Empty when derivatives were requested instead.
    pub pre: Vec<DMatrix<f64>>,
    pub post: Vec<DMatrix<f64>>,
    /// Activation derivatives at the pre-activations, on request.
    pub derivatives: Vec<DMatrix<f64>>,
    pub psi: DMatrix<f64>,
}

pub(crate) fn features(
    config: &NetworkConfig,
    layout: &Layout,
    inner: &[f64],
    inputs: &DMatrix<f64>,
    with_derivatives: bool,
) -> Result<Features> {
    if inner.len() < layout.inner_len() {
        return Err(Error::Shape(format!(
            "inner weight vector has {} entries, expected {}",
            inner.len(),
            layout.inner_len()
        )));
    }
    if inner[..layout.inner_len()].iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite inner weight".into()));
    }
    let n = inputs.nrows();
    let act = config.activation();
    let mut pre = Vec::with_capacity(config.depth());
    let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(config.depth());
    let mut derivatives = Vec::new();
    for layer in 1..=config.depth() {
        let wb = layout.block(layer, BlockKind::Weight).expect("weight block");
        let w = rm(wb.rows, wb.cols, &inner[wb.range()]);
        let prev = if layer == 1 { inputs } else { &post[layer - 2] };
        let mut h = prev * &w;
        h *= config.weight_scale(layer);
        if let Some(bb) = layout.block(layer, BlockKind::Bias) {
            let sb = config.sigma_b()[layer - 1];
            let b = &inner[bb.range()];
            for (mut col, bc) in h.column_iter_mut().zip(b) {
                col.add_scalar_mut(sb * bc);
            }
        }
        if with_derivatives {
            let mut d = h.clone();
            for (x, dx) in h.iter_mut().zip(d.iter_mut()) {
                (*x, *dx) = act.apply_with_derivative(*x);
            }
            post.push(h);
            derivatives.push(d);
        } else {
            let g = h.map(|x| act.apply(x));
            pre.push(h);
            post.push(g);
        }
    }
    let last = post.last().expect("depth >= 1");
    let readout = config.depth() + 1;
    let scale = config.weight_scale(readout);
    let d = last.ncols();
    let mut psi = DMatrix::zeros(n, config.readout_dim());
    psi.columns_mut(0, d).copy_from(&(last * scale));
    if config.include_bias() {
        psi.column_mut(d).fill(config.sigma_b()[readout - 1]);
    }
    Ok(Features {
        pre,
        post,
        derivatives,
        psi,
    })
}

/// Full forward pass.
pub fn forward(
    config: &NetworkConfig,
    theta: &FlatWeights,
    inputs: &DMatrix<f64>,
) -> Result<ForwardTrace> {
    check_inputs(config, theta.layout(), inputs)?;
    if theta.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite weight".into()));
    }
    let (preactivations, postactivations, psi) =
        hidden_features(config, theta.layout(), theta.values(), inputs)?;
    let output = &psi * theta.readout_matrix();
    Ok(ForwardTrace {
        preactivations,
        postactivations,
        psi,
        output,
    })
}

/// Linearization of `Psi` with respect to the inner weights at a fixed
/// point, available both as a forward action and as its adjoint.
#[derive(Debug, Clone)]
pub struct PsiJacobian<'a> {
    config: &'a NetworkConfig,
    layout: Layout,
    inputs: &'a DMatrix<f64>,
    weights: Vec<DMatrix<f64>>,
    postactivations: Vec<DMatrix<f64>>,
    /// Activation derivatives at each hidden pre-activation.
    derivatives: Vec<DMatrix<f64>>,
}

/// Builds the `dW -> dPsi` map at `theta`.
pub fn psi_jacobian<'a>(
    config: &'a NetworkConfig,
    theta: &FlatWeights,
    inputs: &'a DMatrix<f64>,
) -> Result<PsiJacobian<'a>> {
    check_inputs(config, theta.layout(), inputs)?;
    PsiJacobian::at(config, theta.layout().clone(), theta.inner(), inputs)
}

impl<'a> PsiJacobian<'a> {
    /// `inner` may be the inner prefix only.
    pub fn at(
        config: &'a NetworkConfig,
        layout: Layout,
        inner: &[f64],
        inputs: &'a DMatrix<f64>,
    ) -> Result<Self> {
        let f = features(config, &layout, inner, inputs, true)?;
        Ok(Self::from_parts(config, layout, inner, inputs, f.post, f.derivatives))
    }

    pub(crate) fn from_parts(
        config: &'a NetworkConfig,
        layout: Layout,
        inner: &[f64],
        inputs: &'a DMatrix<f64>,
        postactivations: Vec<DMatrix<f64>>,
        derivatives: Vec<DMatrix<f64>>,
    ) -> Self {
        let weights = (1..=config.depth())
            .map(|l| {
                let b = layout.block(l, BlockKind::Weight).expect("weight block");
                rm(b.rows, b.cols, &inner[b.range()])
            })
            .collect();
        Self {
            config,
            layout,
            inputs,
            weights,
            postactivations,
            derivatives,
        }
    }

    /// Number of inner parameters the map acts on.
    pub fn input_len(&self) -> usize {
        self.layout.inner_len()
    }

    /// `dPsi` for an inner-weight perturbation `d_inner` (length `inner_len`).
    pub fn apply(&self, d_inner: &[f64]) -> Result<DMatrix<f64>> {
        if d_inner.len() != self.layout.inner_len() {
            return Err(Error::Shape(format!(
                "perturbation has {} entries, expected {}",
                d_inner.len(),
                self.layout.inner_len()
            )));
        }
        let cfg = self.config;
        let n = self.inputs.nrows();
        let mut d_post: Option<DMatrix<f64>> = None;
        for layer in 1..=cfg.depth() {
            let wb = self.layout.block(layer, BlockKind::Weight).expect("weight block");
            let dw = rm(wb.rows, wb.cols, &d_inner[wb.range()]);
            let prev = if layer == 1 {
                self.inputs
            } else {
                &self.postactivations[layer - 2]
            };
            let mut dh = prev * &dw;
            if let Some(dg) = &d_post {
                dh += dg * &self.weights[layer - 1];
            }
            dh *= cfg.weight_scale(layer);
            if let Some(bb) = self.layout.block(layer, BlockKind::Bias) {
                let sb = cfg.sigma_b()[layer - 1];
                let db = &d_inner[bb.range()];
                for (mut col, dc) in dh.column_iter_mut().zip(db) {
                    col.add_scalar_mut(sb * dc);
                }
            }
            dh.component_mul_assign(&self.derivatives[layer - 1]);
            d_post = Some(dh);
        }
        let dg = d_post.expect("depth >= 1");
        let mut dpsi = DMatrix::zeros(n, cfg.readout_dim());
        dpsi.columns_mut(0, dg.ncols())
            .copy_from(&(dg * cfg.weight_scale(cfg.depth() + 1)));
        Ok(dpsi)
    }

    /// Adjoint action: the inner-weight gradient of `<psi_bar, Psi>`.
    pub fn transpose_apply(&self, psi_bar: &DMatrix<f64>) -> Result<Vec<f64>> {
        let cfg = self.config;
        let n = self.inputs.nrows();
        if psi_bar.shape() != (n, cfg.readout_dim()) {
            return Err(Error::Shape(format!(
                "psi cotangent is {:?}, expected {:?}",
                psi_bar.shape(),
                (n, cfg.readout_dim())
            )));
        }
        let mut grad = vec![0.0; self.layout.inner_len()];
        let d_last = cfg.hidden_widths()[cfg.depth() - 1];
        let mut g_bar: DMatrix<f64> =
            psi_bar.columns(0, d_last).into_owned() * cfg.weight_scale(cfg.depth() + 1);
        for layer in (1..=cfg.depth()).rev() {
            let mut h_bar = g_bar;
            h_bar.component_mul_assign(&self.derivatives[layer - 1]);
            let scale = cfg.weight_scale(layer);
            let prev = if layer == 1 {
                self.inputs
            } else {
                &self.postactivations[layer - 2]
            };
            let w_bar = prev.tr_mul(&h_bar) * scale;
            let wb = self.layout.block(layer, BlockKind::Weight).expect("weight block");
            flatten_into(&w_bar, &mut grad[wb.range()]);
            if let Some(bb) = self.layout.block(layer, BlockKind::Bias) {
                let sb = cfg.sigma_b()[layer - 1];
                for c in 0..bb.cols {
                    grad[bb.offset + c] = sb * h_bar.column(c).sum();
                }
            }
            g_bar = if layer > 1 {
                (&h_bar * self.weights[layer - 1].transpose()) * scale
            } else {
                DMatrix::zeros(0, 0)
            };
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(act: Activation, width: usize, bias: bool) -> NetworkConfig {
        NetworkConfig::new(
            3,
            vec![width],
            2,
            act,
            vec![1.3, 0.9],
            vec![0.4, 0.2],
            bias,
        )
        .unwrap()
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        for &x in &[-3.2, -0.7, 0.1, 2.5, 7.0] {
            assert!((gelu(x) - gelu(-x) - x).abs() < 1e-14, "x = {x}");
        }
    }

    #[test]
    fn fused_derivative_agrees() {
        for act in [Activation::Gelu, Activation::Relu, Activation::Identity, Activation::Erf] {
            for &x in &[-2.5, -0.3, 0.0, 0.4, 3.0] {
                let (f, df) = act.apply_with_derivative(x);
                assert_eq!(f, act.apply(x));
                assert!((df - act.derivative(x)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layout_is_a_partition() {
        let cfg = NetworkConfig::wide_default(5, vec![7], 3, Activation::Gelu).unwrap();
        let layout = cfg.layout();
        assert_eq!(layout.len(), (5 + 1) * 7 + (7 + 1) * 3);
        let mut next = 0;
        for b in layout.blocks() {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, layout.len());
        assert_eq!(layout.readout_range().len(), 8 * 3);
        let deep =
            NetworkConfig::wide_default(4, vec![3, 5], 2, Activation::Erf).unwrap().layout();
        assert_eq!(deep.len(), 5 * 3 + 4 * 5 + 6 * 2);
    }

    #[test]
    fn matrices_round_trip_through_flat_layout() {
        let cfg = small_config(Activation::Gelu, 4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let layers: Vec<_> = (1..=2)
            .map(|l| {
                (
                    theta.block_matrix(l, BlockKind::Weight).unwrap(),
                    theta.block_matrix(l, BlockKind::Bias),
                )
            })
            .collect();
        let rebuilt = FlatWeights::from_matrices(&cfg, &layers).unwrap();
        assert_eq!(rebuilt, theta);
        let r = theta.readout_matrix();
        assert_eq!(r.shape(), (5, 2));
        assert_eq!(r[(4, 1)], theta.block_matrix(2, BlockKind::Bias).unwrap()[(0, 1)]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        for act in [Activation::Gelu, Activation::Relu, Activation::Identity, Activation::Erf] {
            let cfg = small_config(act, 4, true);
            let theta = FlatWeights::zeros(cfg.layout());
            let x = DMatrix::from_fn(5, 3, |i, j| (i as f64) - (j as f64) * 0.3);
            let trace = forward(&cfg, &theta, &x).unwrap();
            assert!(trace.output.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_scalar_network_is_identity() {
        let cfg = NetworkConfig::new(
            1,
            vec![1],
            1,
            Activation::Identity,
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            false,
        )
        .unwrap();
        let theta = FlatWeights::new(cfg.layout(), vec![1.0, 1.0]).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.5, -2.0, 3.25]);
        let out = forward(&cfg, &theta, &x).unwrap().output;
        assert_eq!(out, x);
    }

    #[test]
    fn forward_matches_explicit_loops() {
        let cfg = small_config(Activation::Gelu, 4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let x = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let trace = forward(&cfg, &theta, &x).unwrap();

        let v = theta.values();
        let (m, d, k) = (3, 4, 2);
        let w1 = |i: usize, j: usize| v[i * d + j];
        let b1 = |j: usize| v[m * d + j];
        let off2 = m * d + d;
        let w2 = |i: usize, c: usize| v[off2 + i * k + c];
        let b2 = |c: usize| v[off2 + d * k + c];
        for row in 0..6 {
            for c in 0..k {
                let mut out = 0.0;
                for j in 0..d {
                    let mut h = 0.0;
                    for i in 0..m {
                        h += x[(row, i)] * w1(i, j);
                    }
                    h = 1.3 / (m as f64).sqrt() * h + 0.4 * b1(j);
                    out += 0.9 / (d as f64).sqrt() * gelu(h) * w2(j, c);
                }
                out += 0.2 * b2(c);
                assert!((trace.output[(row, c)] - out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = small_config(Activation::Erf, 6, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let x = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64 * 0.1);
        assert_eq!(forward(&cfg, &theta, &x).unwrap(), forward(&cfg, &theta, &x).unwrap());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = small_config(Activation::Gelu, 4, true);
        let other = small_config(Activation::Gelu, 5, true);
        let theta = FlatWeights::zeros(other.layout());
        let x = DMatrix::zeros(2, 3);
        assert!(matches!(forward(&cfg, &theta, &x), Err(Error::Shape(_))));
        let mut theta = FlatWeights::zeros(cfg.layout());
        theta.values_mut()[0] = f64::NAN;
        assert!(matches!(forward(&cfg, &theta, &x), Err(Error::Numeric(_))));
    }

    #[test]
    fn jacobian_of_zero_is_zero() {
        let cfg = small_config(Activation::Gelu, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let x = DMatrix::from_fn(2, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.0));
        let jac = psi_jacobian(&cfg, &theta, &x).unwrap();
        let d = jac.apply(&vec![0.0; jac.input_len()]).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_jacobian_is_linear_map() {
        let cfg = NetworkConfig::new(
            3,
            vec![2],
            1,
            Activation::Identity,
            vec![1.7, 0.6],
            vec![0.0, 0.0],
            false,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let x = DMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.5);
        let jac = psi_jacobian(&cfg, &theta, &x).unwrap();
        let dw: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).cos()).collect();
        let got = jac.apply(&dw).unwrap();
        let expected = (&x * DMatrix::from_row_slice(3, 2, &dw)) * (0.6 / 2f64.sqrt() * 1.7 / 3f64.sqrt());
        assert!((got - expected).abs().max() < 1e-14);
    }

    fn fd_direction(cfg: &NetworkConfig, theta: &FlatWeights, x: &DMatrix<f64>, dir: &[f64], h: f64) -> DMatrix<f64> {
        let shifted = |s: f64| {
            let mut t = theta.clone();
            for (v, d) in t.values_mut().iter_mut().zip(dir) {
                *v += s * d;
            }
            forward(cfg, &t, x).unwrap().psi
        };
        (shifted(h) - shifted(-h)) / (2.0 * h)
    }

    #[test]
    fn gelu_jacobian_matches_finite_differences() {
        let cfg = small_config(Activation::Gelu, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let x = DMatrix::from_fn(2, 3, |i, j| ((i * 5 + j) as f64 * 0.71).cos());
        let jac = psi_jacobian(&cfg, &theta, &x).unwrap();
        let dir: Vec<f64> = (0..jac.input_len()).map(|i| ((i * 7 + 1) as f64).sin()).collect();
        let analytic = jac.apply(&dir).unwrap();
        let numeric = fd_direction(&cfg, &theta, &x, &dir, 1e-5);
        let rel = (&analytic - &numeric).norm() / analytic.norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn adjoint_matches_forward_action_deep() {
        let cfg = NetworkConfig::wide_default(3, vec![4, 3], 2, Activation::Gelu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
        let x = DMatrix::from_fn(5, 3, |i, j| ((i + j) as f64 * 0.4).sin());
        let jac = psi_jacobian(&cfg, &theta, &x).unwrap();
        let dir: Vec<f64> = (0..jac.input_len()).map(|i| ((i * 3) as f64 * 0.13).cos()).collect();
        let bar = DMatrix::from_fn(5, cfg.readout_dim(), |i, j| ((i * 2 + j) as f64).sin());
        let lhs = jac.apply(&dir).unwrap().dot(&bar);
        let g = jac.transpose_apply(&bar).unwrap();
        let rhs: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        let numeric = fd_direction(&cfg, &theta, &x, &dir, 1e-5);
        let analytic = jac.apply(&dir).unwrap();
        assert!((&analytic - &numeric).norm() / analytic.norm() < 1e-6);
    }

    #[test]
    fn prior_output_variance_is_width_independent() {
        // First hidden pre-activation h = (sigma_w / sqrt(m)) x W + sigma_b b.
        let x = DMatrix::from_row_slice(1, 4, &[0.3, -1.2, 0.8, 0.5]);
        let expected = 2.0 * x.norm_squared() / 4.0 + 0.01;
        for width in [8, 512] {
            let cfg = NetworkConfig::wide_default(4, vec![width], 1, Activation::Gelu).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(width as u64);
            let mut acc = 0.0;
            let mut count = 0.0;
            for _ in 0..1000 {
                let theta = FlatWeights::prior_draw(cfg.layout(), &mut rng);
                let t = forward(&cfg, &theta, &x).unwrap();
                acc += t.preactivations[0].norm_squared();
                count += width as f64;
            }
            let var = acc / count;
            assert!((var / expected - 1.0).abs() < 0.1, "width {width}: {var} vs {expected}");
        }
    }
}
