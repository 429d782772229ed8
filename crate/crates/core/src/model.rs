//! Dense point proposals and the compact two-head detector network.
//!
//! A shared two-stage convolutional trunk reads the intensity grid; two
//! head pairs (one per stage: matching and restoration) emit, for every
//! anchor of every feature cell, a 2-way classification logit pair
//! (background, foreground) and a 2-channel coordinate offset. Foreground
//! confidence is the softmax of the logit pair; offsets pass through
//! `stride * tanh(raw)` so a predicted point stays within one stride of its
//! anchor.
//!
//! Gradients are reverse-mode by hand, which keeps the finite-difference
//! oracle in the tests meaningful.
//!
//! # Parameter layout
//!
//! All parameters live in one flat `f64` vector, in this order (kernel size
//! is fixed at 3x3, padding 1):
//!
//! ```text
//! conv1 weights   c1 * 1  * 3 * 3    index ((oc*in_c + ic)*3 + ky)*3 + kx
//! conv1 bias      c1
//! conv2 weights   c2 * c1 * 3 * 3
//! conv2 bias      c2
//! matching cls    (2K * c2) weights, then 2K bias
//! matching reg    (2K * c2) weights, then 2K bias
//! restoration cls (2K * c2) weights, then 2K bias
//! restoration reg (2K * c2) weights, then 2K bias
//! ```
//!
//! Head channels for anchor `k` of a cell: cls `(2k, 2k+1)` = (background,
//! foreground) logits; reg `(2k, 2k+1)` = raw (x, y) offsets. Proposals are
//! ordered cell-major (row-major over cells), then anchor index within the
//! cell (row-major over the sub-grid), matching [`generate_proposals`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::io::{Read, Write};

use crate::geometry::{Point, Scene};
use crate::{Error, Result};

/// Which head pair of the shared trunk to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Proposal matching stage (first-stage point classifier).
    Pmn,
    /// Performance restoration stage (distillation classifier).
    Prn,
}

/// Fixed anchor locations: a sqrt(K) x sqrt(K) sub-grid of points centered
/// inside every stride x stride cell.
#[derive(Debug, Clone)]
pub struct ProposalGrid {
    stride: usize,
    anchors_per_cell: usize,
    cells_y: usize,
    cells_x: usize,
    anchors: Vec<Point>,
}

impl ProposalGrid {
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    /// Total number of proposals M.
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Point] {
        &self.anchors
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.cells_y, self.cells_x)
    }
}

fn integer_sqrt(k: usize) -> Option<usize> {
    let g = (k as f64).sqrt().round() as usize;
    (g * g == k).then_some(g)
}

/// Deterministic anchor list in row-major cell order, sub-grid order within
/// each cell.
pub fn generate_proposals(
    height: usize,
    width: usize,
    stride: usize,
    anchors_per_cell: usize,
) -> Result<ProposalGrid> {
    if stride == 0 || height == 0 || width == 0 {
        return Err(Error::config("grid dimensions and stride must be positive"));
    }
    if height % stride != 0 || width % stride != 0 {
        return Err(Error::config(format!(
            "stride {stride} must divide the {width}x{height} grid"
        )));
    }
    let g = integer_sqrt(anchors_per_cell).ok_or_else(|| {
        Error::config(format!("anchors_per_cell {anchors_per_cell} is not a perfect square"))
    })?;
    if g == 0 {
        return Err(Error::config("anchors_per_cell must be positive"));
    }
    let cells_y = height / stride;
    let cells_x = width / stride;
    let step = stride as f64 / g as f64;
    let mut anchors = Vec::with_capacity(cells_y * cells_x * anchors_per_cell);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let ox = (cx * stride) as f64;
            let oy = (cy * stride) as f64;
            for sy in 0..g {
                for sx in 0..g {
                    anchors.push(Point::new(
                        ox + (sx as f64 + 0.5) * step,
                        oy + (sy as f64 + 0.5) * step,
                    ));
                }
            }
        }
    }
    Ok(ProposalGrid {
        stride,
        anchors_per_cell,
        cells_y,
        cells_x,
        anchors,
    })
}

/// Architecture of the trunk and heads. The overall down-sampling rate is
/// `stage1_stride * stage2_stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub stage1_channels: usize,
    pub stage2_channels: usize,
    pub stage1_stride: usize,
    pub stage2_stride: usize,
    pub anchors_per_cell: usize,
}

impl ArchConfig {
    /// Desk-scale default: stride-4 trunk, 4 anchors per cell.
    pub fn for_scene(height: usize, width: usize) -> Self {
        ArchConfig {
            height,
            width,
            stage1_channels: 8,
            stage2_channels: 16,
            stage1_stride: 2,
            stage2_stride: 2,
            anchors_per_cell: 4,
        }
    }

    pub fn stride(&self) -> usize {
        self.stage1_stride * self.stage2_stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("input dimensions must be positive"));
        }
        if self.stage1_channels == 0 || self.stage2_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.stage1_stride == 0 || self.stage2_stride == 0 {
            return Err(Error::config("stage strides must be positive"));
        }
        if self.height % self.stage1_stride != 0 || self.width % self.stage1_stride != 0 {
            return Err(Error::config("stage 1 stride must divide the input dims"));
        }
        let (h1, w1) = (self.height / self.stage1_stride, self.width / self.stage1_stride);
        if h1 % self.stage2_stride != 0 || w1 % self.stage2_stride != 0 {
            return Err(Error::config("stage 2 stride must divide the stage 1 output dims"));
        }
        if integer_sqrt(self.anchors_per_cell).is_none() || self.anchors_per_cell == 0 {
            return Err(Error::config("anchors_per_cell must be a positive perfect square"));
        }
        Ok(())
    }

    /// Feature map dims (cells_y, cells_x).
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / self.stride(), self.width / self.stride())
    }

    /// Number of proposals M the heads emit.
    pub fn proposal_count(&self) -> usize {
        let (fy, fx) = self.feature_dims();
        fy * fx * self.anchors_per_cell
    }

    /// Proposal grid matching this architecture.
    pub fn proposal_grid(&self) -> Result<ProposalGrid> {
        generate_proposals(self.height, self.width, self.stride(), self.anchors_per_cell)
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Flat-vector offsets of every parameter block.
#[derive(Debug, Clone, Copy)]
struct Layout {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    // per head: cls_w, cls_b, reg_w, reg_b
    head: [[usize; 4]; 2],
    head_out: usize, // 2K
    total: usize,
}

impl Layout {
    fn new(arch: &ArchConfig) -> Self {
        let c1 = arch.stage1_channels;
        let c2 = arch.stage2_channels;
        let head_out = 2 * arch.anchors_per_cell;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let conv1_w = take(c1 * 9);
        let conv1_b = take(c1);
        let conv2_w = take(c2 * c1 * 9);
        let conv2_b = take(c2);
        let mut head = [[0usize; 4]; 2];
        for slots in head.iter_mut() {
            slots[0] = take(head_out * c2); // cls weights
            slots[1] = take(head_out); // cls bias
            slots[2] = take(head_out * c2); // reg weights
            slots[3] = take(head_out); // reg bias
        }
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            head,
            head_out,
            total: at,
        }
    }

    fn head_index(head: Head) -> usize {
        match head {
            Head::Pmn => 0,
            Head::Prn => 1,
        }
    }
}

/// All weights of the trunk and both head pairs, as one flat vector.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ArchConfig,
    values: Vec<f64>,
}

const PARAMS_MAGIC: &[u8; 4] = b"SCPM";
const PARAMS_VERSION: u32 = 1;

impl ModelParams {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(ModelParams {
            arch,
            values: vec![0.0; n],
        })
    }

    /// Seeded uniform init, `+-sqrt(6 / (fan_in + fan_out))` per layer.
    pub fn random(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = arch.stage1_channels;
        let c2 = arch.stage2_channels;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[range] {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
        };
        fill(layout.conv1_w..layout.conv1_w + c1 * 9, 9, c1 * 9);
        fill(layout.conv2_w..layout.conv2_w + c2 * c1 * 9, c1 * 9, c2 * 9);
        for slots in layout.head {
            fill(slots[0]..slots[0] + layout.head_out * c2, c2, layout.head_out);
            fill(slots[2]..slots[2] + layout.head_out * c2, c2, layout.head_out);
        }
        // biases stay zero
        Ok(ModelParams { arch, values })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Versioned flat binary file: magic, version, architecture, then the
    /// parameter vector in layout order (little-endian f64 bits).
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&PARAMS_VERSION.to_le_bytes())?;
        for field in [
            self.arch.height,
            self.arch.width,
            self.arch.stage1_channels,
            self.arch.stage2_channels,
            self.arch.stage1_stride,
            self.arch.stage2_stride,
            self.arch.anchors_per_cell,
        ] {
            w.write_all(&(field as u64).to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::parse(0, "bad magic in parameter file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != PARAMS_VERSION {
            return Err(Error::parse(0, format!("unsupported parameter file version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let arch = ArchConfig {
            height: read_u64(r)? as usize,
            width: read_u64(r)? as usize,
            stage1_channels: read_u64(r)? as usize,
            stage2_channels: read_u64(r)? as usize,
            stage1_stride: read_u64(r)? as usize,
            stage2_stride: read_u64(r)? as usize,
            anchors_per_cell: read_u64(r)? as usize,
        };
        arch.validate()?;
        let count = read_u64(r)? as usize;
        if count != arch.param_count() {
            return Err(Error::parse(
                0,
                format!("parameter count {count} does not match architecture"),
            ));
        }
        let mut values = Vec::with_capacity(count);
        let mut bits = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut bits)?;
            let v = f64::from_bits(u64::from_le_bytes(bits));
            if !v.is_finite() {
                return Err(Error::parse(0, "non-finite parameter value"));
            }
            values.push(v);
        }
        Ok(ModelParams { arch, values })
    }
}

/// Per-proposal outputs of one head.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Foreground probabilities, strictly inside (0, 1).
    pub confidences: Vec<f64>,
    /// Bounded (dx, dy) offsets, each within one stride of zero.
    pub offsets: Vec<(f64, f64)>,
    /// `points[j] = anchors[j] + offsets[j]`.
    pub points: Vec<Point>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }
}

/// Gradients of some scalar loss with respect to both heads' outputs.
/// Point gradients are with respect to the predicted coordinates, which
/// equals the gradient with respect to the offsets.
#[derive(Debug, Clone)]
pub struct OutputGrad {
    pub pmn_conf: Vec<f64>,
    pub pmn_point: Vec<(f64, f64)>,
    pub prn_conf: Vec<f64>,
    pub prn_point: Vec<(f64, f64)>,
}

impl OutputGrad {
    pub fn zeros(m: usize) -> Self {
        OutputGrad {
            pmn_conf: vec![0.0; m],
            pmn_point: vec![(0.0, 0.0); m],
            prn_conf: vec![0.0; m],
            prn_point: vec![(0.0, 0.0); m],
        }
    }
}

// confidences never quite reach 0 or 1 even for saturated logits
const CONF_GUARD: f64 = 1e-12;

fn check_compat(params: &ModelParams, scene: &Scene, grid: &ProposalGrid) -> Result<()> {
    let arch = &params.arch;
    if scene.height() != arch.height || scene.width() != arch.width {
        return Err(Error::dimension(format!(
            "scene is {}x{}, architecture expects {}x{}",
            scene.width(),
            scene.height(),
            arch.width,
            arch.height
        )));
    }
    if grid.stride() != arch.stride()
        || grid.anchors_per_cell() != arch.anchors_per_cell
        || grid.len() != arch.proposal_count()
    {
        return Err(Error::dimension("proposal grid does not match the architecture"));
    }
    Ok(())
}

/// 3x3 convolution, padding 1, the given stride; returns pre-activations.
fn conv_forward(
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
    stride: usize,
) -> Vec<f64> {
    let out_h = in_h / stride;
    let out_w = in_w / stride;
    let mut out = vec![0.0; out_c * out_h * out_w];
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    let w_base = (oc * in_c + ic) * 9;
                    let in_base = ic * in_h;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let row = (in_base + iy as usize) * in_w;
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            acc += weights[w_base + ky * 3 + kx] * input[row + ix as usize];
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

/// Accumulates weight/bias/input gradients for [`conv_forward`], given the
/// gradient with respect to the pre-activation outputs.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weights: &[f64],
    out_c: usize,
    stride: usize,
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let out_h = in_h / stride;
    let out_w = in_w / stride;
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = d_out[(oc * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                d_bias[oc] += g;
                for ic in 0..in_c {
                    let w_base = (oc * in_c + ic) * 9;
                    let in_base = ic * in_h;
                    for ky in 0..3usize {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let row = (in_base + iy as usize) * in_w;
                        for kx in 0..3usize {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let idx = row + ix as usize;
                            d_weights[w_base + ky * 3 + kx] += g * input[idx];
                            if let Some(d_in) = d_input.as_deref_mut() {
                                d_in[idx] += g * weights[w_base + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Post-activation trunk features, kept for the backward pass.
struct TrunkActivations {
    h1: Vec<f64>, // c1 x (h/st1) x (w/st1), tanh applied
    h2: Vec<f64>, // c2 x cells_y x cells_x, tanh applied
}

fn trunk_forward(params: &ModelParams, scene: &Scene) -> TrunkActivations {
    let arch = &params.arch;
    let layout = Layout::new(arch);
    let v = &params.values;
    let c1 = arch.stage1_channels;
    let c2 = arch.stage2_channels;
    let (h, w) = (arch.height, arch.width);

    let mut h1 = conv_forward(
        scene.intensity(),
        1,
        h,
        w,
        &v[layout.conv1_w..],
        &v[layout.conv1_b..],
        c1,
        arch.stage1_stride,
    );
    for x in &mut h1 {
        *x = x.tanh();
    }
    let (h1h, h1w) = (h / arch.stage1_stride, w / arch.stage1_stride);
    let mut h2 = conv_forward(
        &h1,
        c1,
        h1h,
        h1w,
        &v[layout.conv2_w..],
        &v[layout.conv2_b..],
        c2,
        arch.stage2_stride,
    );
    for x in &mut h2 {
        *x = x.tanh();
    }
    TrunkActivations { h1, h2 }
}

fn head_forward(
    params: &ModelParams,
    grid: &ProposalGrid,
    trunk: &TrunkActivations,
    head: Head,
) -> Prediction {
    let arch = &params.arch;
    let layout = Layout::new(arch);
    let slots = layout.head[Layout::head_index(head)];
    let v = &params.values;
    let c2 = arch.stage2_channels;
    let (fy, fx) = arch.feature_dims();
    let k = arch.anchors_per_cell;
    let stride = arch.stride() as f64;
    let m = grid.len();

    let mut confidences = Vec::with_capacity(m);
    let mut offsets = Vec::with_capacity(m);
    let mut points = Vec::with_capacity(m);

    let cls_w = &v[slots[0]..slots[0] + layout.head_out * c2];
    let cls_b = &v[slots[1]..slots[1] + layout.head_out];
    let reg_w = &v[slots[2]..slots[2] + layout.head_out * c2];
    let reg_b = &v[slots[3]..slots[3] + layout.head_out];

    let cell_area = fy * fx;
    for cy in 0..fy {
        for cx in 0..fx {
            let feat_at = |c: usize| trunk.h2[c * cell_area + cy * fx + cx];
            for anchor in 0..k {
                let j = (cy * fx + cx) * k + anchor;
                let (bg_ch, fg_ch) = (2 * anchor, 2 * anchor + 1);
                let mut bg = cls_b[bg_ch];
                let mut fg = cls_b[fg_ch];
                let mut rx = reg_b[bg_ch];
                let mut ry = reg_b[fg_ch];
                for c in 0..c2 {
                    let f = feat_at(c);
                    bg += cls_w[bg_ch * c2 + c] * f;
                    fg += cls_w[fg_ch * c2 + c] * f;
                    rx += reg_w[bg_ch * c2 + c] * f;
                    ry += reg_w[fg_ch * c2 + c] * f;
                }
                // softmax of two logits = sigmoid of their difference
                let conf = sigmoid(fg - bg).clamp(CONF_GUARD, 1.0 - CONF_GUARD);
                let dx = stride * rx.tanh();
                let dy = stride * ry.tanh();
                let a = grid.anchors()[j];
                confidences.push(conf);
                offsets.push((dx, dy));
                points.push(Point::new(a.x + dx, a.y + dy));
            }
        }
    }
    Prediction {
        confidences,
        offsets,
        points,
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Runs the shared trunk and one head. Deterministic.
pub fn forward(
    params: &ModelParams,
    scene: &Scene,
    grid: &ProposalGrid,
    head: Head,
) -> Result<Prediction> {
    check_compat(params, scene, grid)?;
    let trunk = trunk_forward(params, scene);
    Ok(head_forward(params, grid, &trunk, head))
}

/// Runs the trunk once and both heads over it.
pub fn forward_pair(
    params: &ModelParams,
    scene: &Scene,
    grid: &ProposalGrid,
) -> Result<(Prediction, Prediction)> {
    check_compat(params, scene, grid)?;
    let trunk = trunk_forward(params, scene);
    let pmn = head_forward(params, grid, &trunk, Head::Pmn);
    let prn = head_forward(params, grid, &trunk, Head::Prn);
    Ok((pmn, prn))
}

/// Exact reverse-mode gradient of the outputs composed with the supplied
/// output gradients; same length and layout as the parameter vector.
pub fn backward(
    params: &ModelParams,
    scene: &Scene,
    grid: &ProposalGrid,
    grads: &OutputGrad,
) -> Result<Vec<f64>> {
    check_compat(params, scene, grid)?;
    let m = grid.len();
    for (name, len) in [
        ("pmn_conf", grads.pmn_conf.len()),
        ("pmn_point", grads.pmn_point.len()),
        ("prn_conf", grads.prn_conf.len()),
        ("prn_point", grads.prn_point.len()),
    ] {
        if len != m {
            return Err(Error::dimension(format!(
                "output gradient {name} has length {len}, expected {m}"
            )));
        }
    }

    let arch = &params.arch;
    let layout = Layout::new(arch);
    let v = &params.values;
    let c1 = arch.stage1_channels;
    let c2 = arch.stage2_channels;
    let (fy, fx) = arch.feature_dims();
    let k = arch.anchors_per_cell;
    let stride = arch.stride() as f64;
    let cell_area = fy * fx;

    let trunk = trunk_forward(params, scene);
    let mut grad = vec![0.0; layout.total];
    let mut d_h2 = vec![0.0; trunk.h2.len()];

    for (hi, head) in [Head::Pmn, Head::Prn].into_iter().enumerate() {
        let slots = layout.head[hi];
        let cls_w = &v[slots[0]..slots[0] + layout.head_out * c2];
        let reg_w = &v[slots[2]..slots[2] + layout.head_out * c2];
        let (d_conf, d_point) = match head {
            Head::Pmn => (&grads.pmn_conf, &grads.pmn_point),
            Head::Prn => (&grads.prn_conf, &grads.prn_point),
        };

        // recompute per-proposal pre-activations to chain through the
        // sigmoid and tanh nonlinearities
        let cls_b = &v[slots[1]..slots[1] + layout.head_out];
        let reg_b = &v[slots[3]..slots[3] + layout.head_out];
        for cy in 0..fy {
            for cx in 0..fx {
                let cell = cy * fx + cx;
                for anchor in 0..k {
                    let j = (cy * fx + cx) * k + anchor;
                    let gc = d_conf[j];
                    let (gpx, gpy) = d_point[j];
                    if gc == 0.0 && gpx == 0.0 && gpy == 0.0 {
                        continue;
                    }
                    let (bg_ch, fg_ch) = (2 * anchor, 2 * anchor + 1);
                    let mut bg = cls_b[bg_ch];
                    let mut fg = cls_b[fg_ch];
                    let mut rx = reg_b[bg_ch];
                    let mut ry = reg_b[fg_ch];
                    for c in 0..c2 {
                        let f = trunk.h2[c * cell_area + cell];
                        bg += cls_w[bg_ch * c2 + c] * f;
                        fg += cls_w[fg_ch * c2 + c] * f;
                        rx += reg_w[bg_ch * c2 + c] * f;
                        ry += reg_w[fg_ch * c2 + c] * f;
                    }
                    let conf = sigmoid(fg - bg).clamp(CONF_GUARD, 1.0 - CONF_GUARD);
                    // d conf / d fg = conf (1 - conf); d conf / d bg is its negation
                    let d_diff = gc * conf * (1.0 - conf);
                    let tx = rx.tanh();
                    let ty = ry.tanh();
                    let d_rx = gpx * stride * (1.0 - tx * tx);
                    let d_ry = gpy * stride * (1.0 - ty * ty);

                    grad[slots[1] + fg_ch] += d_diff;
                    grad[slots[1] + bg_ch] -= d_diff;
                    grad[slots[3] + bg_ch] += d_rx;
                    grad[slots[3] + fg_ch] += d_ry;
                    for c in 0..c2 {
                        let f = trunk.h2[c * cell_area + cell];
                        grad[slots[0] + fg_ch * c2 + c] += d_diff * f;
                        grad[slots[0] + bg_ch * c2 + c] -= d_diff * f;
                        grad[slots[2] + bg_ch * c2 + c] += d_rx * f;
                        grad[slots[2] + fg_ch * c2 + c] += d_ry * f;
                        d_h2[c * cell_area + cell] += d_diff
                            * (cls_w[fg_ch * c2 + c] - cls_w[bg_ch * c2 + c])
                            + d_rx * reg_w[bg_ch * c2 + c]
                            + d_ry * reg_w[fg_ch * c2 + c];
                    }
                }
            }
        }
    }

    // tanh backward on stage 2, then conv2, then stage 1
    let mut d_pre2 = d_h2;
    for (g, h) in d_pre2.iter_mut().zip(&trunk.h2) {
        *g *= 1.0 - h * h;
    }
    let (h1h, h1w) = (arch.height / arch.stage1_stride, arch.width / arch.stage1_stride);
    let mut d_h1 = vec![0.0; trunk.h1.len()];
    {
        let (dw2, db2) = {
            let (a, b) = grad.split_at_mut(layout.conv2_b);
            (&mut a[layout.conv2_w..], &mut b[..c2])
        };
        conv_backward(
            &trunk.h1,
            c1,
            h1h,
            h1w,
            &v[layout.conv2_w..],
            c2,
            arch.stage2_stride,
            &d_pre2,
            dw2,
            db2,
            Some(&mut d_h1),
        );
    }
    let mut d_pre1 = d_h1;
    for (g, h) in d_pre1.iter_mut().zip(&trunk.h1) {
        *g *= 1.0 - h * h;
    }
    {
        let (dw1, db1) = {
            let (a, b) = grad.split_at_mut(layout.conv1_b);
            (&mut a[layout.conv1_w..], &mut b[..c1])
        };
        conv_backward(
            scene.intensity(),
            1,
            arch.height,
            arch.width,
            &v[layout.conv1_w..],
            c1,
            arch.stage1_stride,
            &d_pre1,
            dw1,
            db1,
            None,
        );
    }

    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_intensity, SynthConfig};

    fn tiny_scene(h: usize, w: usize, seed: u64) -> Scene {
        crate::synth::generate_scene(&SynthConfig {
            height: h,
            width: w,
            expected_count: 6.0,
            cluster_spread: 1.0,
            render_sigma: 1.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn proposal_counts() {
        assert_eq!(generate_proposals(8, 8, 4, 4).unwrap().len(), 16);
        // K = s^2 makes M equal the pixel count
        assert_eq!(generate_proposals(8, 8, 4, 16).unwrap().len(), 64);
    }

    #[test]
    fn proposal_rejects_bad_config() {
        assert!(generate_proposals(10, 8, 4, 4).is_err()); // 4 does not divide 10
        assert!(generate_proposals(8, 8, 4, 3).is_err()); // not a perfect square
    }

    #[test]
    fn single_anchor_sits_at_cell_center() {
        let grid = generate_proposals(8, 8, 4, 1).unwrap();
        let expected: Vec<Point> = (0..2)
            .flat_map(|cy| (0..2).map(move |cx| Point::new(cx as f64 * 4.0 + 2.0, cy as f64 * 4.0 + 2.0)))
            .collect();
        assert_eq!(grid.anchors(), expected.as_slice());
    }

    #[test]
    fn four_anchor_subgrid_coordinates() {
        let grid = generate_proposals(4, 4, 4, 4).unwrap();
        // one cell, 2x2 sub-grid with step 2: centers at 1 and 3
        let expected = vec![
            Point::new(1.0, 1.0),
            Point::new(3.0, 1.0),
            Point::new(1.0, 3.0),
            Point::new(3.0, 3.0),
        ];
        assert_eq!(grid.anchors(), expected.as_slice());
    }

    #[test]
    fn zero_params_give_half_confidence_and_zero_offsets() {
        let scene = tiny_scene(8, 8, 1);
        let arch = ArchConfig::for_scene(8, 8);
        let grid = arch.proposal_grid().unwrap();
        let params = ModelParams::zeros(arch).unwrap();
        let pred = forward(&params, &scene, &grid, Head::Pmn).unwrap();
        for (&c, &(dx, dy)) in pred.confidences.iter().zip(&pred.offsets) {
            assert_eq!(c, 0.5);
            assert_eq!((dx, dy), (0.0, 0.0));
        }
        assert_eq!(pred.points, grid.anchors());
    }

    #[test]
    fn forward_is_deterministic() {
        let scene = tiny_scene(8, 8, 2);
        let arch = ArchConfig::for_scene(8, 8);
        let grid = arch.proposal_grid().unwrap();
        let params = ModelParams::random(arch, 33).unwrap();
        let a = forward(&params, &scene, &grid, Head::Prn).unwrap();
        let b = forward(&params, &scene, &grid, Head::Prn).unwrap();
        assert_eq!(a.confidences, b.confidences);
        assert_eq!(a.offsets, b.offsets);
    }

    #[test]
    fn softmax_pair_sums_to_one_and_offsets_bounded() {
        let scene = tiny_scene(8, 8, 3);
        let arch = ArchConfig::for_scene(8, 8);
        let grid = arch.proposal_grid().unwrap();
        // exaggerate weights to push the activations hard
        let mut params = ModelParams::random(arch, 5).unwrap();
        for v in params.values_mut() {
            *v *= 40.0;
        }
        let stride = arch.stride() as f64;
        for head in [Head::Pmn, Head::Prn] {
            let pred = forward(&params, &scene, &grid, head).unwrap();
            for (&c, &(dx, dy)) in pred.confidences.iter().zip(&pred.offsets) {
                assert!(c > 0.0 && c < 1.0);
                assert!(dx.abs() <= stride && dy.abs() <= stride);
            }
        }
    }

    #[test]
    fn heads_differ_but_share_the_trunk() {
        let scene = tiny_scene(8, 8, 4);
        let arch = ArchConfig::for_scene(8, 8);
        let grid = arch.proposal_grid().unwrap();
        let params = ModelParams::random(arch, 6).unwrap();
        let (pmn, prn) = forward_pair(&params, &scene, &grid).unwrap();
        assert_ne!(pmn.confidences, prn.confidences);
        assert_eq!(pmn.confidences, forward(&params, &scene, &grid, Head::Pmn).unwrap().confidences);
        assert_eq!(prn.confidences, forward(&params, &scene, &grid, Head::Prn).unwrap().confidences);
    }

    #[test]
    fn zero_output_gradients_give_zero_parameter_gradient() {
        let scene = tiny_scene(8, 8, 7);
        let arch = ArchConfig::for_scene(8, 8);
        let grid = arch.proposal_grid().unwrap();
        let params = ModelParams::random(arch, 8).unwrap();
        let grads = OutputGrad::zeros(grid.len());
        let g = backward(&params, &scene, &grid, &grads).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_output_gradients() {
        let scene = tiny_scene(8, 8, 9);
        let arch = ArchConfig {
            stage1_channels: 3,
            stage2_channels: 4,
            ..ArchConfig::for_scene(8, 8)
        };
        let grid = arch.proposal_grid().unwrap();
        let params = ModelParams::random(arch, 10).unwrap();
        let m = grid.len();
        let mut rng_state = 123u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let mut a = OutputGrad::zeros(m);
        let mut b = OutputGrad::zeros(m);
        for j in 0..m {
            a.pmn_conf[j] = next();
            a.prn_point[j] = (next(), next());
            b.prn_conf[j] = next();
            b.pmn_point[j] = (next(), next());
        }
        let mut sum = OutputGrad::zeros(m);
        for j in 0..m {
            sum.pmn_conf[j] = a.pmn_conf[j] + b.pmn_conf[j];
            sum.prn_conf[j] = a.prn_conf[j] + b.prn_conf[j];
            sum.pmn_point[j] = (a.pmn_point[j].0 + b.pmn_point[j].0, a.pmn_point[j].1 + b.pmn_point[j].1);
            sum.prn_point[j] = (a.prn_point[j].0 + b.prn_point[j].0, a.prn_point[j].1 + b.prn_point[j].1);
        }
        let ga = backward(&params, &scene, &grid, &a).unwrap();
        let gb = backward(&params, &scene, &grid, &b).unwrap();
        let gs = backward(&params, &scene, &grid, &sum).unwrap();
        for i in 0..ga.len() {
            assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn params_save_load_round_trip() {
        let arch = ArchConfig::for_scene(8, 8);
        let params = ModelParams::random(arch, 77).unwrap();
        let mut buf = Vec::new();
        params.save(&mut buf).unwrap();
        let back = ModelParams::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.arch(), params.arch());
        assert_eq!(back.values(), params.values());
    }

    #[test]
    fn forward_rejects_mismatched_scene() {
        let pts = vec![Point::new(1.0, 1.0)];
        let scene = Scene::new(16, 8, render_intensity(&pts, 16, 8, 1.0), pts, 0).unwrap();
        let arch = ArchConfig::for_scene(8, 8);
        let grid = arch.proposal_grid().unwrap();
        let params = ModelParams::zeros(arch).unwrap();
        assert!(forward(&params, &scene, &grid, Head::Pmn).is_err());
    }
}
