//! Fixed-shape multilayer perceptrons with exact reverse-mode gradients.
//!
//! Parameters live in a flat [`ParamVector`]. The layout is a pure function of
//! the [`LayerSpec`]: for each layer, an input-major weight block
//! (`w[i * out + j]` connects input `i` to output `j`) followed by the bias
//! block. Input-major storage lets both the forward pass and the parameter
//! gradient run as contiguous axpy loops.
//!
//! An optional affine-tanh squash maps the last layer's output into an open
//! interval `(lo, hi)`; the squashed value is clamped one ulp inside the
//! bounds so the interval stays open even when `tanh` saturates.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub(crate) use crate::kernel::{axpy, dot};
use crate::kernel::{gemm_nn_acc, gemm_tn_acc, gemv_acc, transpose};

pub const PARAM_FORMAT_VERSION: u32 = 1;
const PARAM_MAGIC: &str = "# ccac-params";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Format(format!("unknown activation `{other}`"))),
        }
    }
}

/// Affine-tanh output range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Squash {
    pub lo: f64,
    pub hi: f64,
}

impl Squash {
    #[inline]
    fn apply(self, z: f64) -> (f64, f64) {
        let t = z.tanh();
        let mid = 0.5 * (self.lo + self.hi);
        let half = 0.5 * (self.hi - self.lo);
        let y = (mid + half * t).clamp(self.lo.next_up(), self.hi.next_down());
        (y, half * (1.0 - t * t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// One activation per layer (hidden layers followed by the output layer).
    pub activations: Vec<Activation>,
    pub output_squash: Option<Squash>,
}

impl LayerSpec {
    /// ReLU hidden layers with a linear output layer.
    pub fn relu_mlp(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        let mut activations = vec![Activation::Relu; hidden_dims.len()];
        activations.push(Activation::Linear);
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activations,
            output_squash: None,
        }
    }

    pub fn with_squash(mut self, lo: f64, hi: f64) -> Self {
        self.output_squash = Some(Squash { lo, hi });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("all layer dims must be >= 1".into()));
        }
        if self.activations.len() != self.hidden_dims.len() + 1 {
            return Err(Error::InvalidSpec(format!(
                "expected {} activations, got {}",
                self.hidden_dims.len() + 1,
                self.activations.len()
            )));
        }
        if let Some(sq) = self.output_squash {
            if !(sq.lo < sq.hi) || !sq.lo.is_finite() || !sq.hi.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "squash range must satisfy lo < hi, got ({}, {})",
                    sq.lo, sq.hi
                )));
            }
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_dims.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.output_dim);
        d
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        axpy(alpha, other, &mut self.0);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Gradient of `upstream · output` with respect to parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub d_params: ParamVector,
    pub d_input: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    act: Activation,
}

/// Per-call activations retained for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Post-activation output of every layer.
    acts: Vec<Vec<f64>>,
    /// Derivative of the squash at the last call, per output unit.
    squash_slope: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Destination for a scaled parameter gradient.
pub struct GradSink<'a> {
    pub scale: f64,
    pub grad: &'a mut [f64],
}

/// Activations for a batch of inputs; every buffer is row-major.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    rows: usize,
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    squash_slope: Vec<f64>,
    output: Vec<f64>,
}

impl BatchCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// `rows x output_dim` outputs of the last forward pass.
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Per-layer transposed weights (`fan_out x fan_in`) used by the batched
/// reverse pass.
#[derive(Debug, Clone)]
pub struct Transposed {
    wt: Vec<Vec<f64>>,
}

/// Row-weighted gradient destination: receives `sum_r coefs[r] * grad_r`.
pub struct RowSink<'a> {
    pub coefs: &'a [f64],
    pub grad: &'a mut [f64],
}

/// Work buffers for [`Mlp::backward_batch`].
#[derive(Debug, Clone, Default)]
pub struct BatchScratch {
    deltas: Vec<Vec<f64>>,
    scaled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: LayerSpec,
    blocks: Vec<Block>,
    n_params: usize,
}

impl Mlp {
    pub fn new(spec: LayerSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.dims();
        let mut blocks = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            blocks.push(Block {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
                act: spec.activations[l],
            });
            off += fan_in * fan_out + fan_out;
        }
        Ok(Self {
            spec,
            blocks,
            n_params: off,
        })
    }

    /// Builds the network and draws weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    /// biases start at zero.
    pub fn init(spec: LayerSpec, seed: u64) -> Result<(Self, ParamVector)> {
        let net = Self::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(net.n_params);
        for blk in &net.blocks {
            let bound = 1.0 / (blk.fan_in as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("finite bound");
            for w in &mut params[blk.w..blk.b] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok((net, params))
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn new_cache(&self) -> ForwardCache {
        ForwardCache {
            input: vec![0.0; self.spec.input_dim],
            acts: self.blocks.iter().map(|b| vec![0.0; b.fan_out]).collect(),
            squash_slope: vec![0.0; self.spec.output_dim],
            output: vec![0.0; self.spec.output_dim],
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::Dimension {
                what: "params",
                expected: self.n_params,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                what: "input",
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut cache = self.new_cache();
        Ok(self.forward_cached(params, input, &mut cache).to_vec())
    }

    /// Single-output convenience used on hot paths; dimensions are debug-checked only.
    #[inline]
    pub fn eval_scalar(&self, params: &[f64], input: &[f64], cache: &mut ForwardCache) -> f64 {
        self.forward_cached(params, input, cache)[0]
    }

    pub fn forward_cached<'c>(
        &self,
        params: &[f64],
        input: &[f64],
        cache: &'c mut ForwardCache,
    ) -> &'c [f64] {
        debug_assert_eq!(params.len(), self.n_params);
        debug_assert_eq!(input.len(), self.spec.input_dim);
        cache.input.copy_from_slice(input);
        for (l, blk) in self.blocks.iter().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(l);
            let x: &[f64] = if l == 0 { &cache.input } else { &prev[l - 1] };
            let z = &mut rest[0];
            z.copy_from_slice(&params[blk.b..blk.b + blk.fan_out]);
            gemv_acc(x, &params[blk.w..blk.b], blk.fan_out, z);
            match blk.act {
                Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Linear => {}
            }
        }
        let last = cache.acts.last().expect("at least one layer");
        match self.spec.output_squash {
            Some(sq) => {
                for ((o, s), &z) in cache
                    .output
                    .iter_mut()
                    .zip(cache.squash_slope.iter_mut())
                    .zip(last.iter())
                {
                    let (y, dy) = sq.apply(z);
                    *o = y;
                    *s = dy;
                }
            }
            None => cache.output.copy_from_slice(last),
        }
        &cache.output
    }

    /// Reverse pass over the activations in `cache`.
    ///
    /// Writes `d(upstream · output)/d(input)` into `d_input` and accumulates
    /// `sink.scale * d(upstream · output)/d(params)` into every sink.
    pub fn backward_cached(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        upstream: &[f64],
        sinks: &mut [GradSink<'_>],
        d_input: &mut [f64],
    ) {
        debug_assert_eq!(upstream.len(), self.spec.output_dim);
        let n_layers = self.blocks.len();
        let mut delta: Vec<f64> = upstream.to_vec();
        if self.spec.output_squash.is_some() {
            delta
                .iter_mut()
                .zip(&cache.squash_slope)
                .for_each(|(d, s)| *d *= s);
        }
        for l in (0..n_layers).rev() {
            let blk = self.blocks[l];
            let out = &cache.acts[l];
            match blk.act {
                // Subgradient of ReLU at 0 is 0.
                Activation::Relu => delta
                    .iter_mut()
                    .zip(out)
                    .for_each(|(d, &y)| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    }),
                Activation::Tanh => delta
                    .iter_mut()
                    .zip(out)
                    .for_each(|(d, &y)| *d *= 1.0 - y * y),
                Activation::Linear => {}
            }
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
            for sink in sinks.iter_mut() {
                if sink.scale == 0.0 {
                    continue;
                }
                axpy(sink.scale, &delta, &mut sink.grad[blk.b..blk.b + blk.fan_out]);
                let gw = &mut sink.grad[blk.w..blk.b];
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        axpy(
                            sink.scale * xi,
                            &delta,
                            &mut gw[i * blk.fan_out..(i + 1) * blk.fan_out],
                        );
                    }
                }
            }
            let w = &params[blk.w..blk.b];
            let dst: Vec<f64> = (0..blk.fan_in)
                .map(|i| dot(&w[i * blk.fan_out..(i + 1) * blk.fan_out], &delta))
                .collect();
            if l == 0 {
                d_input.copy_from_slice(&dst);
            } else {
                delta = dst;
            }
        }
    }

    pub fn backward(&self, params: &[f64], input: &[f64], upstream: &[f64]) -> Result<GradResult> {
        self.check_params(params)?;
        self.check_input(input)?;
        if upstream.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                what: "upstream",
                expected: self.spec.output_dim,
                got: upstream.len(),
            });
        }
        let mut cache = self.new_cache();
        self.forward_cached(params, input, &mut cache);
        let mut d_params = ParamVector::zeros(self.n_params);
        let mut d_input = vec![0.0; self.spec.input_dim];
        self.backward_cached(
            params,
            &cache,
            upstream,
            &mut [GradSink {
                scale: 1.0,
                grad: &mut d_params,
            }],
            &mut d_input,
        );
        Ok(GradResult { d_params, d_input })
    }

    pub fn new_batch_cache(&self, rows: usize) -> BatchCache {
        BatchCache {
            rows,
            input: vec![0.0; rows * self.spec.input_dim],
            acts: self.blocks.iter().map(|b| vec![0.0; rows * b.fan_out]).collect(),
            squash_slope: vec![0.0; rows * self.spec.output_dim],
            output: vec![0.0; rows * self.spec.output_dim],
        }
    }

    /// Forward pass over `inputs.len() / input_dim` row-major inputs.
    pub fn forward_batch<'c>(&self, params: &[f64], inputs: &[f64], cache: &'c mut BatchCache) -> &'c [f64] {
        debug_assert_eq!(params.len(), self.n_params);
        debug_assert_eq!(inputs.len() % self.spec.input_dim, 0);
        let rows = inputs.len() / self.spec.input_dim;
        let out_dim = self.spec.output_dim;
        cache.rows = rows;
        cache.input.clear();
        cache.input.extend_from_slice(inputs);
        cache.acts.resize(self.blocks.len(), Vec::new());
        for (l, blk) in self.blocks.iter().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(l);
            let x: &[f64] = if l == 0 { &cache.input } else { &prev[l - 1] };
            let z = &mut rest[0];
            z.resize(rows * blk.fan_out, 0.0);
            let bias = &params[blk.b..blk.b + blk.fan_out];
            for row in z.chunks_exact_mut(blk.fan_out) {
                row.copy_from_slice(bias);
            }
            gemm_nn_acc(rows, x, blk.fan_in, &params[blk.w..blk.b], blk.fan_out, z);
            match blk.act {
                Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Linear => {}
            }
        }
        let last = cache.acts.last().expect("at least one layer");
        cache.output.resize(rows * out_dim, 0.0);
        cache.squash_slope.resize(rows * out_dim, 0.0);
        match self.spec.output_squash {
            Some(sq) => {
                for ((o, s), &z) in cache.output.iter_mut().zip(cache.squash_slope.iter_mut()).zip(last) {
                    let (y, dy) = sq.apply(z);
                    *o = y;
                    *s = dy;
                }
            }
            None => cache.output.copy_from_slice(last),
        }
        &cache.output
    }

    pub fn transposed(&self, params: &[f64]) -> Transposed {
        debug_assert_eq!(params.len(), self.n_params);
        Transposed {
            wt: self
                .blocks
                .iter()
                .map(|b| {
                    let mut t = vec![0.0; b.fan_in * b.fan_out];
                    transpose(&params[b.w..b.b], b.fan_in, b.fan_out, &mut t);
                    t
                })
                .collect(),
        }
    }

    /// Batched reverse pass of `sum_r upstream_r · output_r` over the rows of
    /// `cache`, with weights given transposed.
    ///
    /// Writes each row's input gradient into `d_input` (`rows x input_dim`)
    /// and adds `sum_r coefs[r] * d(upstream_r · output_r)/d(params)` into
    /// every sink.
    pub fn backward_batch(
        &self,
        wt: &Transposed,
        cache: &BatchCache,
        upstream: &[f64],
        sinks: &mut [RowSink<'_>],
        d_input: &mut [f64],
        scratch: &mut BatchScratch,
    ) {
        let rows = cache.rows;
        let n_layers = self.blocks.len();
        debug_assert_eq!(upstream.len(), rows * self.spec.output_dim);
        debug_assert_eq!(d_input.len(), rows * self.spec.input_dim);
        scratch.deltas.resize(n_layers, Vec::new());
        {
            let d = &mut scratch.deltas[n_layers - 1];
            d.clear();
            d.extend_from_slice(upstream);
            if self.spec.output_squash.is_some() {
                d.iter_mut().zip(&cache.squash_slope).for_each(|(d, s)| *d *= s);
            }
        }
        for l in (0..n_layers).rev() {
            let blk = self.blocks[l];
            let (fi, fo) = (blk.fan_in, blk.fan_out);
            let (lower, upper) = scratch.deltas.split_at_mut(l);
            let d = &mut upper[0];
            match blk.act {
                Activation::Relu => d.iter_mut().zip(&cache.acts[l]).for_each(|(d, &y)| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                }),
                Activation::Tanh => d
                    .iter_mut()
                    .zip(&cache.acts[l])
                    .for_each(|(d, &y)| *d *= 1.0 - y * y),
                Activation::Linear => {}
            }
            let x: &[f64] = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
            for sink in sinks.iter_mut() {
                debug_assert_eq!(sink.coefs.len(), rows);
                scratch.scaled.resize(rows * fo, 0.0);
                for ((dst, src), &c) in scratch
                    .scaled
                    .chunks_exact_mut(fo)
                    .zip(d.chunks_exact(fo))
                    .zip(sink.coefs)
                {
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o = c * v;
                    }
                }
                gemm_tn_acc(rows, x, fi, &scratch.scaled, fo, &mut sink.grad[blk.w..blk.b]);
                let gb = &mut sink.grad[blk.b..blk.b + fo];
                for row in scratch.scaled.chunks_exact(fo) {
                    axpy(1.0, row, gb);
                }
            }
            let dst: &mut [f64] = if l == 0 {
                &mut *d_input
            } else {
                let v = &mut lower[l - 1];
                v.resize(rows * fi, 0.0);
                v
            };
            dst.fill(0.0);
            gemm_nn_acc(rows, d, fo, &wt.wt[l], fi, dst);
        }
    }

    /// Smallest |pre-activation| over all ReLU units for this input.
    pub fn min_relu_margin(&self, params: &[f64], input: &[f64]) -> f64 {
        let mut x = input.to_vec();
        let mut margin = f64::INFINITY;
        for blk in &self.blocks {
            let mut z = params[blk.b..blk.b + blk.fan_out].to_vec();
            for (i, &xi) in x.iter().enumerate() {
                axpy(xi, &params[blk.w + i * blk.fan_out..blk.w + (i + 1) * blk.fan_out], &mut z);
            }
            match blk.act {
                Activation::Relu => {
                    margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Linear => {}
            }
            x = z;
        }
        margin
    }

    /// Writes the parameter file: a text header describing the layer layout followed
    /// by one value per line in shortest round-trip decimal.
    pub fn save_params(&self, params: &[f64], mut w: impl Write) -> Result<()> {
        self.check_params(params)?;
        let s = &self.spec;
        writeln!(w, "{PARAM_MAGIC} v{PARAM_FORMAT_VERSION}")?;
        writeln!(w, "input_dim {}", s.input_dim)?;
        writeln!(w, "hidden_dims {}", join(&s.hidden_dims))?;
        writeln!(w, "output_dim {}", s.output_dim)?;
        let acts: Vec<&str> = s.activations.iter().map(|a| a.name()).collect();
        writeln!(w, "activations {}", acts.join(" "))?;
        match s.output_squash {
            Some(sq) => writeln!(w, "squash {} {}", sq.lo, sq.hi)?,
            None => writeln!(w, "squash none")?,
        }
        writeln!(w, "count {}", params.len())?;
        for v in params {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn save_params_file(&self, params: &[f64], path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_params(params, f)
    }

    /// Parses a parameter file. When `expected` is given, the stored spec must match it.
    pub fn load_params(r: impl BufRead, expected: Option<&LayerSpec>) -> Result<(Self, ParamVector)> {
        let mut lines = r.lines();
        let mut next = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing `{key}` line")))??;
            Ok(line)
        };
        let header = next("header")?;
        let version = header
            .strip_prefix(PARAM_MAGIC)
            .map(str::trim)
            .and_then(|v| v.strip_prefix('v'))
            .ok_or_else(|| Error::Format("not a parameter file".into()))?;
        if version != PARAM_FORMAT_VERSION.to_string() {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Format(format!("expected `{key}`, found `{line}`")))
        };
        let input_dim = parse_num(&field(next("input_dim")?, "input_dim")?)?;
        let hidden_dims = field(next("hidden_dims")?, "hidden_dims")?
            .split_whitespace()
            .map(parse_num)
            .collect::<Result<Vec<usize>>>()?;
        let output_dim = parse_num(&field(next("output_dim")?, "output_dim")?)?;
        let activations = field(next("activations")?, "activations")?
            .split_whitespace()
            .map(Activation::from_str)
            .collect::<Result<Vec<_>>>()?;
        let squash_s = field(next("squash")?, "squash")?;
        let output_squash = if squash_s == "none" {
            None
        } else {
            let v: Vec<f64> = squash_s
                .split_whitespace()
                .map(parse_num)
                .collect::<Result<_>>()?;
            if v.len() != 2 {
                return Err(Error::Format(format!("bad squash `{squash_s}`")));
            }
            Some(Squash { lo: v[0], hi: v[1] })
        };
        let spec = LayerSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activations,
            output_squash,
        };
        if let Some(exp) = expected {
            if exp != &spec {
                return Err(Error::Format(format!(
                    "parameter file spec {spec:?} does not match expected {exp:?}"
                )));
            }
        }
        let count: usize = parse_num(&field(next("count")?, "count")?)?;
        let net = Mlp::new(spec)?;
        if count != net.param_count() {
            return Err(Error::Format(format!(
                "count {count} does not match layout size {}",
                net.param_count()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            values.push(parse_num::<f64>(line.trim())?);
        }
        if values.len() != count {
            return Err(Error::Format(format!(
                "expected {count} values, found {}",
                values.len()
            )));
        }
        Ok((net, ParamVector(values)))
    }

    pub fn load_params_file(path: &Path, expected: Option<&LayerSpec>) -> Result<(Self, ParamVector)> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::load_params(std::io::BufReader::new(f), expected)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden_dims {
            write!(f, "->{h}")?;
        }
        write!(f, "->{}", self.output_dim)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("cannot parse number `{s}`")))
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Worst disagreement, normalised by the largest gradient magnitude of the
    /// block (parameters or input) it belongs to.
    pub max_rel_error: f64,
    /// The point sits within the finite-difference stencil of a ReLU kink, so
    /// the comparison is not meaningful.
    pub excluded: bool,
}

/// Compares [`Mlp::backward`] with central differences of `sum(output)` over
/// every parameter and input coordinate.
pub fn fd_check(net: &Mlp, params: &[f64], input: &[f64], step: f64) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidSpec("finite-difference step must be > 0".into()));
    }
    let upstream = vec![1.0; net.output_dim()];
    let analytic = net.backward(params, input, &upstream)?;
    if net.min_relu_margin(params, input) <= 1e3 * step {
        return Ok(FdReport {
            max_rel_error: f64::NAN,
            excluded: true,
        });
    }
    let objective = |p: &[f64], x: &[f64]| -> f64 {
        net.forward(p, x).expect("dims checked").iter().sum()
    };
    let mut p = params.to_vec();
    let mut fd_params = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = objective(&p, input);
        p[i] = orig - step;
        let down = objective(&p, input);
        p[i] = orig;
        fd_params[i] = (up - down) / (2.0 * step);
    }
    let mut x = input.to_vec();
    let mut fd_input = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = objective(params, &x);
        x[i] = orig - step;
        let down = objective(params, &x);
        x[i] = orig;
        fd_input[i] = (up - down) / (2.0 * step);
    }
    let err = max_rel_error(&analytic.d_params, &fd_params)
        .max(max_rel_error(&analytic.d_input, &fd_input));
    Ok(FdReport {
        max_rel_error: err,
        excluded: false,
    })
}

/// `max_i |a_i - b_i| / max(‖a‖∞, ‖b‖∞)`; zero when both vectors vanish.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}
