//! Plain 3D U-Net: two conv-norm-lrelu units per stage, strided convs for downsampling,
//! transposed convs for upsampling, skip concatenation and a 1×1×1 logit head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv3d, ConvTranspose3d};
use super::norm::{leaky_relu_backward_inplace, leaky_relu_inplace, InstanceNorm, NormCache, LEAKY_SLOPE};
use super::{Act, ParamAllocator};
use crate::error::{Error, Result};
use crate::geometry::Shape3;
use crate::plan::Plan;

/// Smallest per-axis size of the bottleneck on a plan patch.
pub const MIN_BOTTLENECK_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub output_channels: usize,
    pub stage_widths: Vec<usize>,
    pub num_pool_per_axis: [usize; 3],
    pub patch_size: Shape3,
    pub kernel_size: usize,
    pub nonlinearity: String,
    pub leaky_slope: f32,
    pub normalization: String,
    pub final_activation: String,
    pub parameter_count: usize,
}

impl NetworkSpec {
    pub fn from_plan(plan: &Plan, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::Config("network needs at least one output channel".into()));
        }
        let pools = plan.num_pool_per_axis;
        for a in 0..3 {
            let factor = 1usize << pools[a];
            let p = plan.patch_size[a];
            if !p.is_multiple_of(factor) || p / factor < MIN_BOTTLENECK_SIZE {
                return Err(Error::Config(format!(
                    "patch {:?} does not fit {:?} poolings (axis {a}: {p} must be a multiple of {factor} and leave ≥ {MIN_BOTTLENECK_SIZE})",
                    plan.patch_size, pools
                )));
            }
        }
        if plan.base_channels == 0 || plan.base_channels > plan.max_channels {
            return Err(Error::Config(format!(
                "base_channels {} must be in 1..={}",
                plan.base_channels, plan.max_channels
            )));
        }
        let stages = pools.iter().copied().max().unwrap_or(0) + 1;
        let stage_widths = (0..stages).map(|s| (plan.base_channels << s).min(plan.max_channels)).collect();
        Ok(NetworkSpec {
            input_channels: 1,
            output_channels: class_count,
            stage_widths,
            num_pool_per_axis: pools,
            patch_size: plan.patch_size,
            kernel_size: 3,
            nonlinearity: "leaky_relu".into(),
            leaky_slope: LEAKY_SLOPE,
            normalization: "instance_norm".into(),
            final_activation: "sigmoid".into(),
            parameter_count: 0,
        })
    }

    pub fn stage_stride(&self, stage: usize) -> [usize; 3] {
        std::array::from_fn(|a| if stage > 0 && stage <= self.num_pool_per_axis[a] { 2 } else { 1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Unit {
    conv: Conv3d,
    norm: InstanceNorm,
    slope: f32,
}

#[derive(Debug)]
struct UnitCache {
    input: Act,
    norm: NormCache,
    output: Act,
}

impl Unit {
    fn new(
        alloc: &mut ParamAllocator,
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        slope: f32,
    ) -> Self {
        let k = 27 * cin;
        let weight = alloc.kaiming(k * cout, k, slope as f64, rng);
        let gamma = alloc.constant(cout, 1.0);
        let beta = alloc.constant(cout, 0.0);
        Unit {
            conv: Conv3d { cin, cout, kernel: [3; 3], stride, weight, bias: None },
            norm: InstanceNorm { channels: cout, gamma, beta },
            slope,
        }
    }

    fn forward(&self, params: &[f32], x: Act, tape: Option<&mut Vec<UnitCache>>) -> Act {
        let z = self.conv.forward(params, &x);
        let (mut y, norm) = self.norm.forward(params, &z);
        leaky_relu_inplace(&mut y, self.slope);
        if let Some(t) = tape {
            t.push(UnitCache { input: x, norm, output: y.clone() });
        }
        y
    }

    fn backward(
        &self,
        params: &[f32],
        cache: &UnitCache,
        mut dy: Act,
        grads: &mut [f32],
        need_dx: bool,
    ) -> Option<Act> {
        leaky_relu_backward_inplace(&mut dy, &cache.output, self.slope);
        let dz = self.norm.backward(params, &cache.norm, &dy, grads);
        self.conv.backward(params, &cache.input, &dz, grads, need_dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    up: ConvTranspose3d,
    units: [Unit; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub spec: NetworkSpec,
    encoder: Vec<[Unit; 2]>,
    /// `decoder[s]` produces the resolution of encoder stage `s`.
    decoder: Vec<DecoderStage>,
    head: Conv3d,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct Tape {
    encoder: Vec<UnitCache>,
    decoder: Vec<UnitCache>,
    up_inputs: Vec<Act>,
    head_input: Act,
}

/// Builds the network for `plan` and returns it with freshly initialised parameters.
pub fn build_network(plan: &Plan, class_count: usize, seed: u64) -> Result<(UNet, Vec<f32>)> {
    Ok(build_from_spec(NetworkSpec::from_plan(plan, class_count)?, seed))
}

/// Builds and initialises the layers described by `spec`; `parameter_count` is filled in.
pub fn build_from_spec(mut spec: NetworkSpec, seed: u64) -> (UNet, Vec<f32>) {
    let slope = spec.leaky_slope;
    let class_count = spec.output_channels;
    let mut rng = crate::rng::stream(seed, "network_init");
    let mut alloc = ParamAllocator::default();
    let widths = spec.stage_widths.clone();
    let mut encoder = Vec::with_capacity(widths.len());
    let mut cin = spec.input_channels;
    for (s, &w) in widths.iter().enumerate() {
        let first = Unit::new(&mut alloc, &mut rng, cin, w, spec.stage_stride(s), slope);
        let second = Unit::new(&mut alloc, &mut rng, w, w, [1; 3], slope);
        encoder.push([first, second]);
        cin = w;
    }
    let mut decoder = Vec::with_capacity(widths.len().saturating_sub(1));
    for s in 0..widths.len().saturating_sub(1) {
        let stride = spec.stage_stride(s + 1);
        let kvol: usize = stride.iter().product();
        let (deep, w) = (widths[s + 1], widths[s]);
        let weight = alloc.kaiming(deep * kvol * w, w * kvol, slope as f64, &mut rng);
        let up = ConvTranspose3d { cin: deep, cout: w, stride, weight };
        let units = [
            Unit::new(&mut alloc, &mut rng, 2 * w, w, [1; 3], slope),
            Unit::new(&mut alloc, &mut rng, w, w, [1; 3], slope),
        ];
        decoder.push(DecoderStage { up, units });
    }
    let c0 = widths[0];
    let weight = alloc.kaiming(c0 * class_count, c0, 1.0, &mut rng);
    let bias = Some(alloc.constant(class_count, 0.0));
    let head = Conv3d { cin: c0, cout: class_count, kernel: [1; 3], stride: [1; 3], weight, bias };
    spec.parameter_count = alloc.values.len();
    (UNet { spec, encoder, decoder, head }, alloc.values)
}

fn concat_channels(a: &Act, b: &Act) -> Act {
    debug_assert_eq!(a.shape, b.shape);
    let (ca, cb) = (a.channels, b.channels);
    let mut out = Act::zeros(a.shape, ca + cb);
    for ((o, x), y) in out.data.chunks_exact_mut(ca + cb).zip(a.data.chunks_exact(ca)).zip(b.data.chunks_exact(cb)) {
        o[..ca].copy_from_slice(x);
        o[ca..].copy_from_slice(y);
    }
    out
}

fn split_channels(x: &Act, ca: usize) -> (Act, Act) {
    let cb = x.channels - ca;
    let mut a = Act::zeros(x.shape, ca);
    let mut b = Act::zeros(x.shape, cb);
    for ((v, p), q) in x.data.chunks_exact(ca + cb).zip(a.data.chunks_exact_mut(ca)).zip(b.data.chunks_exact_mut(cb)) {
        p.copy_from_slice(&v[..ca]);
        q.copy_from_slice(&v[ca..]);
    }
    (a, b)
}

fn add_into(dst: &mut Act, src: &Act) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

impl UNet {
    pub fn parameter_count(&self) -> usize {
        self.spec.parameter_count
    }

    pub fn output_channels(&self) -> usize {
        self.spec.output_channels
    }

    /// Spatial sizes must be divisible by the total downsampling factor per axis.
    pub fn accepts_shape(&self, shape: Shape3) -> bool {
        (0..3).all(|a| shape[a].is_multiple_of(1usize << self.spec.num_pool_per_axis[a]))
    }

    /// Logits for a single-channel input.
    pub fn forward(&self, params: &[f32], x: &Act) -> Act {
        self.run(params, x.clone(), None)
    }

    pub fn forward_train(&self, params: &[f32], x: &Act) -> (Act, Tape) {
        let mut tape =
            Tape { encoder: Vec::new(), decoder: Vec::new(), up_inputs: Vec::new(), head_input: Act::zeros([0; 3], 0) };
        let out = self.run(params, x.clone(), Some(&mut tape));
        (out, tape)
    }

    fn run(&self, params: &[f32], x: Act, mut tape: Option<&mut Tape>) -> Act {
        assert!(
            self.accepts_shape(x.shape),
            "input shape {:?} not divisible for {:?} pools",
            x.shape,
            self.spec.num_pool_per_axis
        );
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for units in &self.encoder {
            for u in units {
                h = u.forward(params, h, tape.as_deref_mut().map(|t| &mut t.encoder));
            }
            skips.push(h.clone());
        }
        let mut h = skips.pop().expect("at least one stage");
        for s in (0..self.decoder.len()).rev() {
            let stage = &self.decoder[s];
            let up = stage.up.forward(params, &h);
            if let Some(t) = tape.as_deref_mut() {
                t.up_inputs.push(h);
            }
            let skip = skips.pop().expect("skip per decoder stage");
            h = concat_channels(&up, &skip);
            for u in &stage.units {
                h = u.forward(params, h, tape.as_deref_mut().map(|t| &mut t.decoder));
            }
        }
        let out = self.head.forward(params, &h);
        if let Some(t) = tape {
            t.head_input = h;
        }
        out
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂logits`.
    pub fn backward(&self, params: &[f32], tape: Tape, dlogits: &Act, grads: &mut [f32]) {
        let Tape { encoder: enc_cache, decoder: dec_cache, up_inputs, head_input } = tape;
        let mut d = self.head.backward(params, &head_input, dlogits, grads, true).expect("dx requested");
        drop(head_input);

        let n_stages = self.encoder.len();
        let mut skip_grads: Vec<Option<Act>> = (0..n_stages).map(|_| None).collect();
        // Decoder stages ran deepest first, so caches are consumed from the back.
        let mut dec_iter = dec_cache.into_iter().rev();
        let mut up_iter = up_inputs.into_iter().rev();
        for s in 0..self.decoder.len() {
            let stage = &self.decoder[s];
            let c1 = dec_iter.next().expect("decoder cache");
            let c0 = dec_iter.next().expect("decoder cache");
            d = stage.units[1].backward(params, &c1, d, grads, true).expect("dx");
            d = stage.units[0].backward(params, &c0, d, grads, true).expect("dx");
            let (dup, dskip) = split_channels(&d, stage.up.cout);
            skip_grads[s] = Some(dskip);
            let up_in = up_iter.next().expect("upsample input");
            d = stage.up.backward(params, &up_in, &dup, grads);
        }

        let mut enc_iter = enc_cache.into_iter().rev();
        for s in (0..n_stages).rev() {
            if let Some(g) = skip_grads[s].take() {
                if s + 1 < n_stages {
                    add_into(&mut d, &g);
                } else {
                    d = g;
                }
            }
            let c1 = enc_iter.next().expect("encoder cache");
            let c0 = enc_iter.next().expect("encoder cache");
            d = self.encoder[s][1].backward(params, &c1, d, grads, true).expect("dx");
            let first_layer = s == 0;
            if let Some(dx) = self.encoder[s][0].backward(params, &c0, d.clone(), grads, !first_layer) {
                d = dx;
            }
        }
    }
}
