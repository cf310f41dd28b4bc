//! Feed-forward networks over a fixed set of grid ops, with exact reverse-mode
//! gradients.
//!
//! A network is a list of ops in single-assignment form over numbered
//! buffers; buffer 0 is the input. Supported ops: 3×3 convolution (zero
//! padding, stride 1), per-channel bias add, ReLU, 2× average-pool
//! downsample, 2× nearest upsample, channel concat and a per-pixel linear
//! layer (1×1 convolution with bias).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Tensor;

pub const SUPPORTED_OPS: &[&str] = &[
    "conv3x3", "bias_add", "relu", "down2", "up2", "concat", "linear",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Conv3x3 {
        src: usize,
        dst: usize,
        cin: usize,
        cout: usize,
    },
    BiasAdd {
        src: usize,
        dst: usize,
        channels: usize,
    },
    Relu {
        src: usize,
        dst: usize,
    },
    Down2 {
        src: usize,
        dst: usize,
    },
    Up2 {
        src: usize,
        dst: usize,
    },
    Concat {
        srcs: Vec<usize>,
        dst: usize,
    },
    Linear {
        src: usize,
        dst: usize,
        cin: usize,
        cout: usize,
    },
}

impl Op {
    pub fn dst(&self) -> usize {
        match self {
            Op::Conv3x3 { dst, .. }
            | Op::BiasAdd { dst, .. }
            | Op::Relu { dst, .. }
            | Op::Down2 { dst, .. }
            | Op::Up2 { dst, .. }
            | Op::Concat { dst, .. }
            | Op::Linear { dst, .. } => *dst,
        }
    }

    pub fn srcs(&self) -> Vec<usize> {
        match self {
            Op::Conv3x3 { src, .. }
            | Op::BiasAdd { src, .. }
            | Op::Relu { src, .. }
            | Op::Down2 { src, .. }
            | Op::Up2 { src, .. }
            | Op::Linear { src, .. } => vec![*src],
            Op::Concat { srcs, .. } => srcs.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Op::Conv3x3 { cin, cout, .. } => cin * cout * 9,
            Op::BiasAdd { channels, .. } => *channels,
            Op::Linear { cin, cout, .. } => cin * cout + cout,
            _ => 0,
        }
    }
}

/// Buffer geometry inferred from the op list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BufInfo {
    channels: usize,
    /// Number of 2× downsamplings relative to the input.
    level: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub ops: Vec<Op>,
    pub outputs: Vec<usize>,
}

impl Architecture {
    pub fn new(input_channels: usize, ops: Vec<Op>, outputs: Vec<usize>) -> Result<Self> {
        let arch = Architecture {
            input_channels,
            ops,
            outputs,
        };
        arch.infer()?;
        Ok(arch)
    }

    /// Parses a JSON architecture descriptor, rejecting ops outside the
    /// supported set.
    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        if let Some(ops) = v.get("ops").and_then(|o| o.as_array()) {
            for op in ops {
                let name = op.get("op").and_then(|n| n.as_str()).unwrap_or("<missing>");
                if !SUPPORTED_OPS.contains(&name) {
                    return Err(Error::UnsupportedOp(name.to_string()));
                }
            }
        }
        let arch: Architecture = serde_json::from_value(v)?;
        arch.infer()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn num_buffers(&self) -> usize {
        self.ops.iter().map(|o| o.dst()).max().unwrap_or(0) + 1
    }

    pub fn param_count(&self) -> usize {
        self.ops.iter().map(Op::param_count).sum()
    }

    /// Offset of each op's parameters in the flat weight vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.ops
            .iter()
            .map(|o| {
                let at = off;
                off += o.param_count();
                at
            })
            .collect()
    }

    /// Deepest downsampling level reached by any buffer.
    pub fn max_level(&self) -> i32 {
        self.infer()
            .map(|b| b.iter().flatten().map(|i| i.level).max().unwrap_or(0))
            .unwrap_or(0)
    }

    pub fn output_channels(&self) -> Vec<usize> {
        let info = self.infer().expect("validated");
        self.outputs
            .iter()
            .map(|o| info[*o].expect("defined").channels)
            .collect()
    }

    fn infer(&self) -> Result<Vec<Option<BufInfo>>> {
        let n = self.num_buffers();
        let mut info: Vec<Option<BufInfo>> = vec![None; n];
        info[0] = Some(BufInfo {
            channels: self.input_channels,
            level: 0,
        });
        let get = |info: &[Option<BufInfo>], b: usize| -> Result<BufInfo> {
            info.get(b)
                .copied()
                .flatten()
                .ok_or_else(|| Error::InvalidSpec(format!("buffer {b} read before written")))
        };
        for op in &self.ops {
            let dst = op.dst();
            if dst == 0 || info[dst].is_some() {
                return Err(Error::InvalidSpec(format!("buffer {dst} written twice")));
            }
            let out = match op {
                Op::Conv3x3 { src, cin, cout, .. } | Op::Linear { src, cin, cout, .. } => {
                    let s = get(&info, *src)?;
                    if s.channels != *cin {
                        return Err(Error::InvalidSpec(format!(
                            "op reads {} channels from buffer {src}, declared {cin}",
                            s.channels
                        )));
                    }
                    BufInfo {
                        channels: *cout,
                        level: s.level,
                    }
                }
                Op::BiasAdd { src, channels, .. } => {
                    let s = get(&info, *src)?;
                    if s.channels != *channels {
                        return Err(Error::InvalidSpec(format!(
                            "bias over {channels} channels applied to {}",
                            s.channels
                        )));
                    }
                    s
                }
                Op::Relu { src, .. } => get(&info, *src)?,
                Op::Down2 { src, .. } => {
                    let s = get(&info, *src)?;
                    BufInfo {
                        level: s.level + 1,
                        ..s
                    }
                }
                Op::Up2 { src, .. } => {
                    let s = get(&info, *src)?;
                    BufInfo {
                        level: s.level - 1,
                        ..s
                    }
                }
                Op::Concat { srcs, .. } => {
                    if srcs.len() < 2 {
                        return Err(Error::InvalidSpec("concat needs two inputs".into()));
                    }
                    let parts = srcs
                        .iter()
                        .map(|s| get(&info, *s))
                        .collect::<Result<Vec<_>>>()?;
                    if parts.iter().any(|p| p.level != parts[0].level) {
                        return Err(Error::InvalidSpec("concat across resolutions".into()));
                    }
                    BufInfo {
                        channels: parts.iter().map(|p| p.channels).sum(),
                        level: parts[0].level,
                    }
                }
            };
            info[dst] = Some(out);
        }
        for o in &self.outputs {
            get(&info, *o)?;
        }
        if self.outputs.is_empty() {
            return Err(Error::InvalidSpec("network has no outputs".into()));
        }
        Ok(info)
    }

    /// Keeps the first `n_ops` ops and exposes `output` as the only output.
    /// The weights of the prefix are the prefix of the full weight vector.
    pub fn prefix(&self, n_ops: usize, output: usize) -> Result<Architecture> {
        Architecture::new(
            self.input_channels,
            self.ops[..n_ops].to_vec(),
            vec![output],
        )
    }

    /// Bounding box `(y0, y1, x0, x1)` (inclusive) of input cells that can
    /// influence output pixel `(y, x)` of output `output`, for an `h×w` input.
    pub fn receptive_field(
        &self,
        output: usize,
        h: usize,
        w: usize,
        y: usize,
        x: usize,
    ) -> Result<RfBox> {
        let info = self.infer()?;
        let dims = |b: usize| {
            let l = info[b].expect("defined").level;
            (h >> l.max(0), w >> l.max(0))
        };
        let mut boxes: Vec<Option<RfBox>> = vec![None; self.num_buffers()];
        let out_buf = self.outputs[output];
        boxes[out_buf] = Some(RfBox {
            y0: y,
            y1: y,
            x0: x,
            x1: x,
        });
        for op in self.ops.iter().rev() {
            let Some(b) = boxes[op.dst()] else { continue };
            for src in op.srcs() {
                let (sh, sw) = dims(src);
                let sb = match op {
                    Op::Conv3x3 { .. } => RfBox {
                        y0: b.y0.saturating_sub(1),
                        y1: (b.y1 + 1).min(sh - 1),
                        x0: b.x0.saturating_sub(1),
                        x1: (b.x1 + 1).min(sw - 1),
                    },
                    Op::Down2 { .. } => RfBox {
                        y0: 2 * b.y0,
                        y1: 2 * b.y1 + 1,
                        x0: 2 * b.x0,
                        x1: 2 * b.x1 + 1,
                    },
                    Op::Up2 { .. } => RfBox {
                        y0: b.y0 / 2,
                        y1: b.y1 / 2,
                        x0: b.x0 / 2,
                        x1: b.x1 / 2,
                    },
                    _ => b,
                };
                boxes[src] = Some(match boxes[src] {
                    Some(old) => old.union(sb),
                    None => sb,
                });
            }
        }
        boxes[0].ok_or_else(|| Error::InvalidSpec("output not connected to input".into()))
    }
}

/// Inclusive rectangle of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl RfBox {
    fn union(self, o: RfBox) -> RfBox {
        RfBox {
            y0: self.y0.min(o.y0),
            y1: self.y1.max(o.y1),
            x0: self.x0.min(o.x0),
            x1: self.x1.max(o.x1),
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    /// Largest Chebyshev distance from `(y, x)` to an edge cell of the box.
    pub fn radius_from(&self, y: usize, x: usize) -> usize {
        [
            y.abs_diff(self.y0),
            y.abs_diff(self.y1),
            x.abs_diff(self.x0),
            x.abs_diff(self.x1),
        ]
        .into_iter()
        .max()
        .unwrap()
    }
}

/// Architecture plus flat weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub weights: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        NetworkParams {
            arch,
            weights: vec![0.0; n],
        }
    }

    pub fn from_weights(arch: Architecture, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                expected: vec![arch.param_count()],
                got: vec![weights.len()],
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        Ok(NetworkParams { arch, weights })
    }

    /// He-normal convolution and linear weights, zero biases.
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut weights = Vec::with_capacity(arch.param_count());
        for op in &arch.ops {
            match op {
                Op::Conv3x3 { cin, cout, .. } => {
                    let std = (2.0 / (9 * cin) as f64).sqrt();
                    let d = Normal::new(0.0, std).unwrap();
                    weights.extend((0..cin * cout * 9).map(|_| d.sample(rng)));
                }
                Op::Linear { cin, cout, .. } => {
                    let std = (1.0 / *cin as f64).sqrt();
                    let d = Normal::new(0.0, std).unwrap();
                    weights.extend((0..cin * cout).map(|_| d.sample(rng)));
                    weights.extend(std::iter::repeat_n(0.0, *cout));
                }
                Op::BiasAdd { channels, .. } => {
                    weights.extend(std::iter::repeat_n(0.0, *channels));
                }
                _ => {}
            }
        }
        NetworkParams { arch, weights }
    }

    pub fn round_to_f32(&mut self) {
        for w in &mut self.weights {
            *w = *w as f32 as f64;
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.arch.input_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![self.arch.input_channels, x.height(), x.width()],
                got: x.shape().to_vec(),
            });
        }
        let m = 1usize << self.arch.max_level().max(0);
        if x.height() % m != 0 || x.width() % m != 0 {
            return Err(Error::InvalidInput(format!(
                "grid {}x{} not divisible by {m}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// Runs the network, keeping every intermediate buffer.
    pub fn forward(&self, x: &Tensor) -> Result<Tape> {
        self.check_input(x)?;
        let offsets = self.arch.param_offsets();
        let mut bufs: Vec<Tensor> = vec![Tensor::zeros(0, 0, 0); self.arch.num_buffers()];
        bufs[0] = x.clone();
        for (op, &off) in self.arch.ops.iter().zip(&offsets) {
            let p = &self.weights[off..off + op.param_count()];
            let out = match op {
                Op::Conv3x3 { src, cout, .. } => conv3x3(&bufs[*src], p, *cout),
                Op::BiasAdd { src, .. } => {
                    let mut t = bufs[*src].clone();
                    for (c, b) in p.iter().enumerate() {
                        t.channel_mut(c).iter_mut().for_each(|v| *v += b);
                    }
                    t
                }
                Op::Relu { src, .. } => {
                    let mut t = bufs[*src].clone();
                    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    t
                }
                Op::Down2 { src, .. } => down2(&bufs[*src]),
                Op::Up2 { src, .. } => up2(&bufs[*src]),
                Op::Concat { srcs, .. } => {
                    let parts: Vec<&Tensor> = srcs.iter().map(|s| &bufs[*s]).collect();
                    Tensor::concat(&parts)?
                }
                Op::Linear { src, cin, cout, .. } => linear(&bufs[*src], p, *cin, *cout),
            };
            bufs[op.dst()] = out;
        }
        Ok(Tape {
            bufs,
            outputs: self.arch.outputs.clone(),
        })
    }

    /// Output tensors only.
    pub fn run(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = self.forward(x)?;
        let Tape { mut bufs, outputs } = tape;
        Ok(outputs
            .iter()
            .map(|o| std::mem::replace(&mut bufs[*o], Tensor::zeros(0, 0, 0)))
            .collect())
    }

    /// Back-propagates `out_grads` (one per network output; `None` = zero)
    /// through a recorded forward pass. With `want_input == false` the
    /// returned input gradient is incomplete and must not be used.
    pub fn backward(
        &self,
        tape: &Tape,
        out_grads: Vec<Option<Tensor>>,
        want_params: bool,
        want_input: bool,
    ) -> Result<Gradients> {
        if out_grads.len() != self.arch.outputs.len() {
            return Err(Error::InvalidInput(format!(
                "{} output gradients for {} outputs",
                out_grads.len(),
                self.arch.outputs.len()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; tape.bufs.len()];
        for (o, g) in self.arch.outputs.iter().zip(out_grads) {
            if let Some(g) = g {
                if g.shape() != tape.bufs[*o].shape() {
                    return Err(Error::ShapeMismatch {
                        expected: tape.bufs[*o].shape().to_vec(),
                        got: g.shape().to_vec(),
                    });
                }
                accumulate(&mut grads[*o], g);
            }
        }
        let offsets = self.arch.param_offsets();
        let mut pgrad = if want_params {
            vec![0.0; self.weights.len()]
        } else {
            Vec::new()
        };
        for (op, &off) in self.arch.ops.iter().zip(&offsets).rev() {
            let Some(g) = grads[op.dst()].take() else { continue };
            let p = &self.weights[off..off + op.param_count()];
            match op {
                Op::Conv3x3 { src, cin, cout, .. } => {
                    let x = &tape.bufs[*src];
                    if want_params {
                        conv3x3_weight_grad(x, &g, *cout, &mut pgrad[off..off + cin * cout * 9]);
                    }
                    if *src != 0 || want_input {
                        let gx = conv3x3_input_grad(&g, p, *cin, *cout);
                        accumulate(&mut grads[*src], gx);
                    }
                }
                Op::BiasAdd { src, channels, .. } => {
                    if want_params {
                        for c in 0..*channels {
                            pgrad[off + c] += g.channel(c).iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads[*src], g);
                }
                Op::Relu { src, dst } => {
                    let mut g = g;
                    let y = &tape.bufs[*dst];
                    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                        if *yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[*src], g);
                }
                Op::Down2 { src, .. } => accumulate(&mut grads[*src], down2_grad(&g)),
                Op::Up2 { src, .. } => accumulate(&mut grads[*src], up2_grad(&g)),
                Op::Concat { srcs, .. } => {
                    let n = g.plane_len();
                    let mut c0 = 0;
                    for s in srcs {
                        let c = tape.bufs[*s].channels();
                        let part = Tensor::from_vec(
                            c,
                            g.height(),
                            g.width(),
                            g.data()[c0 * n..(c0 + c) * n].to_vec(),
                        )?;
                        accumulate(&mut grads[*s], part);
                        c0 += c;
                    }
                }
                Op::Linear { src, cin, cout, .. } => {
                    let x = &tape.bufs[*src];
                    if want_params {
                        linear_weight_grad(x, &g, *cin, *cout, &mut pgrad[off..off + op.param_count()]);
                    }
                    accumulate(&mut grads[*src], linear_input_grad(&g, p, *cin, *cout));
                }
            }
        }
        let input = grads[0].take().unwrap_or_else(|| {
            let s = tape.bufs[0].shape();
            Tensor::zeros(s[0], s[1], s[2])
        });
        Ok(Gradients {
            input,
            params: want_params.then_some(pgrad),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Intermediate buffers of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    bufs: Vec<Tensor>,
    outputs: Vec<usize>,
}

impl Tape {
    pub fn output(&self, i: usize) -> &Tensor {
        &self.bufs[self.outputs[i]]
    }

    pub fn outputs(&self) -> Vec<&Tensor> {
        self.outputs.iter().map(|o| &self.bufs[*o]).collect()
    }

    pub fn buffer(&self, b: usize) -> &Tensor {
        &self.bufs[b]
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Option<Vec<f64>>,
}

/// A differentiable scalar functional of the network outputs.
pub trait ScalarTarget {
    /// Value and gradient with respect to each output (`None` = zero).
    fn evaluate(&self, outputs: &[&Tensor]) -> Result<(f64, Vec<Option<Tensor>>)>;
}

/// Sum of one output channel over a set of pixels.
#[derive(Clone, Debug)]
pub struct ChannelSum {
    pub output: usize,
    pub channel: usize,
    pub pixels: Vec<usize>,
}

impl ScalarTarget for ChannelSum {
    fn evaluate(&self, outputs: &[&Tensor]) -> Result<(f64, Vec<Option<Tensor>>)> {
        let out = outputs
            .get(self.output)
            .ok_or_else(|| Error::InvalidInput(format!("no output {}", self.output)))?;
        if self.channel >= out.channels() {
            return Err(Error::InvalidInput(format!("no channel {}", self.channel)));
        }
        let [c, h, w] = out.shape();
        let plane = out.channel(self.channel);
        let mut g = Tensor::zeros(c, h, w);
        let mut value = 0.0;
        {
            let gp = g.channel_mut(self.channel);
            for &i in &self.pixels {
                value += plane[i];
                gp[i] += 1.0;
            }
        }
        let mut grads = vec![None; outputs.len()];
        grads[self.output] = Some(g);
        Ok((value, grads))
    }
}

/// A functional that ignores the outputs.
#[derive(Clone, Copy, Debug)]
pub struct ConstantTarget(pub f64);

impl ScalarTarget for ConstantTarget {
    fn evaluate(&self, outputs: &[&Tensor]) -> Result<(f64, Vec<Option<Tensor>>)> {
        Ok((self.0, vec![None; outputs.len()]))
    }
}

/// Value of `target(net(x))` and its exact gradient with respect to `x`.
pub fn forward_with_gradient(
    net: &NetworkParams,
    x: &Tensor,
    target: &dyn ScalarTarget,
) -> Result<(f64, Tensor)> {
    let tape = net.forward(x)?;
    let (value, grads) = target.evaluate(&tape.outputs())?;
    let g = net.backward(&tape, grads, false, true)?;
    Ok((value, g.input))
}

/// Value of `target(net(x))` only.
pub fn evaluate_target(net: &NetworkParams, x: &Tensor, target: &dyn ScalarTarget) -> Result<f64> {
    let outs = net.run(x)?;
    let refs: Vec<&Tensor> = outs.iter().collect();
    Ok(target.evaluate(&refs)?.0)
}

// ---------------------------------------------------------------------------
// kernels

#[inline]
fn shifted_range(len: usize, d: isize) -> (usize, usize) {
    // destination indices i with 0 <= i + d < len
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)) as usize;
    (lo, hi)
}

fn conv3x3(x: &Tensor, w: &[f64], cout: usize) -> Tensor {
    let [cin, h, wd] = x.shape();
    let n = h * wd;
    let mut out = Tensor::zeros(cout, h, wd);
    let od = out.data_mut();
    let xd = x.data();
    for co in 0..cout {
        let oplane = &mut od[co * n..(co + 1) * n];
        for ci in 0..cin {
            let iplane = &xd[ci * n..(ci + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = shifted_range(wd, dx);
                    for y in y0..y1 {
                        let ys = (y as isize + dy) as usize;
                        let orow = &mut oplane[y * wd + x0..y * wd + x1];
                        let xs0 = (x0 as isize + dx) as usize;
                        let irow = &iplane[ys * wd + xs0..ys * wd + xs0 + (x1 - x0)];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_input_grad(g: &Tensor, w: &[f64], cin: usize, cout: usize) -> Tensor {
    let [_, h, wd] = g.shape();
    let n = h * wd;
    let mut gx = Tensor::zeros(cin, h, wd);
    let gxd = gx.data_mut();
    let gd = g.data();
    for ci in 0..cin {
        let xplane = &mut gxd[ci * n..(ci + 1) * n];
        for co in 0..cout {
            let gplane = &gd[co * n..(co + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = w[((co * cin + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = shifted_range(wd, dx);
                    let xs0 = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let ys = (y as isize + dy) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let xrow = &mut xplane[ys * wd + xs0..ys * wd + xs0 + (x1 - x0)];
                        for (xv, gv) in xrow.iter_mut().zip(grow) {
                            *xv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv3x3_weight_grad(x: &Tensor, g: &Tensor, cout: usize, out: &mut [f64]) {
    let [cin, h, wd] = x.shape();
    let n = h * wd;
    let xd = x.data();
    let gd = g.data();
    for co in 0..cout {
        let gplane = &gd[co * n..(co + 1) * n];
        for ci in 0..cin {
            let iplane = &xd[ci * n..(ci + 1) * n];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = shifted_range(wd, dx);
                    let xs0 = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let ys = (y as isize + dy) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let irow = &iplane[ys * wd + xs0..ys * wd + xs0 + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[((co * cin + ci) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

fn linear(x: &Tensor, p: &[f64], cin: usize, cout: usize) -> Tensor {
    let [_, h, w] = x.shape();
    let n = h * w;
    let (wts, bias) = p.split_at(cin * cout);
    let mut out = Tensor::zeros(cout, h, w);
    let od = out.data_mut();
    let xd = x.data();
    for co in 0..cout {
        let oplane = &mut od[co * n..(co + 1) * n];
        oplane.fill(bias[co]);
        for ci in 0..cin {
            let wv = wts[co * cin + ci];
            for (o, i) in oplane.iter_mut().zip(&xd[ci * n..(ci + 1) * n]) {
                *o += wv * i;
            }
        }
    }
    out
}

fn linear_input_grad(g: &Tensor, p: &[f64], cin: usize, cout: usize) -> Tensor {
    let [_, h, w] = g.shape();
    let n = h * w;
    let mut gx = Tensor::zeros(cin, h, w);
    let gxd = gx.data_mut();
    let gd = g.data();
    for ci in 0..cin {
        let xplane = &mut gxd[ci * n..(ci + 1) * n];
        for co in 0..cout {
            let wv = p[co * cin + ci];
            for (xv, gv) in xplane.iter_mut().zip(&gd[co * n..(co + 1) * n]) {
                *xv += wv * gv;
            }
        }
    }
    gx
}

fn linear_weight_grad(x: &Tensor, g: &Tensor, cin: usize, cout: usize, out: &mut [f64]) {
    let n = x.plane_len();
    let xd = x.data();
    let gd = g.data();
    for co in 0..cout {
        let gplane = &gd[co * n..(co + 1) * n];
        for ci in 0..cin {
            out[co * cin + ci] += gplane
                .iter()
                .zip(&xd[ci * n..(ci + 1) * n])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        out[cin * cout + co] += gplane.iter().sum::<f64>();
    }
}

fn down2(x: &Tensor) -> Tensor {
    let [c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

fn down2_grad(g: &Tensor) -> Tensor {
    let [c, oh, ow] = g.shape();
    let (h, w) = (oh * 2, ow * 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = g.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * src[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    out
}

fn up2(x: &Tensor) -> Tensor {
    let [c, h, w] = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

fn up2_grad(g: &Tensor) -> Tensor {
    let [c, oh, ow] = g.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = g.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    out
}
