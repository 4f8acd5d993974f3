//! Multi-image fusion network: every revisit is encoded jointly with a
//! shared reference frame, the encodings are merged by a weight-shared
//! pairwise fusion operator applied recursively, and the merged state is
//! decoded to the upsampled output.

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use srfuse_autograd::nn::{Conv2d, ConvTranspose2d, PRelu, ParamStore};
use srfuse_autograd::{Tape, Var};

/// How to pad the revisit list up to the next power of two before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisitPad {
    /// Repeat the final encoding in the list.
    RepeatLast,
    /// Repeat the encoding of the reference frame paired with itself.
    RepeatReference,
}

/// Fusion-network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighResNetConfig {
    /// Bands per revisit (the encoder sees twice this after concatenation).
    pub in_bands: usize,
    /// Channel width of the shared latent representation.
    pub hidden: usize,
    /// Residual blocks inside the encoder.
    pub enc_residual_blocks: usize,
    /// Integer upsampling factor (2 or 3).
    pub sr_factor: usize,
    /// Optional extra bicubic upscale (> 1) applied after decoding.
    pub fractional_upsample: Option<f64>,
    /// Padding rule for non-power-of-two revisit counts.
    pub revisit_pad: RevisitPad,
}

impl HighResNetConfig {
    pub fn new(in_bands: usize, sr_factor: usize) -> Result<Self> {
        let cfg = Self {
            in_bands,
            hidden: 64,
            enc_residual_blocks: 2,
            sr_factor,
            fractional_upsample: None,
            revisit_pad: RevisitPad::RepeatLast,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Narrow variant for budgeted experiments.
    pub fn reduced(in_bands: usize, sr_factor: usize, hidden: usize) -> Result<Self> {
        let mut cfg = Self::new(in_bands, sr_factor)?;
        cfg.hidden = hidden;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.hidden == 0 {
            return Err(Error::invalid("fusion config: in_bands and hidden must be >= 1"));
        }
        if !matches!(self.sr_factor, 2 | 3) {
            return Err(Error::invalid(format!(
                "fusion config: sr_factor {} not in {{2, 3}}",
                self.sr_factor
            )));
        }
        if let Some(f) = self.fractional_upsample {
            if !(f > 1.0) || !f.is_finite() {
                return Err(Error::invalid("fusion config: fractional_upsample must be > 1"));
            }
        }
        Ok(())
    }
}

/// Learnable-scalar counts of each distinct layer, plus the model total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterBreakdown {
    pub encoder_input_conv: usize,
    /// One encoder residual block (they are identical in size).
    pub encoder_residual_block: usize,
    pub encoder_output_conv: usize,
    pub fusion_residual_block: usize,
    pub fusion_projection_conv: usize,
    pub decoder_upsample_conv: usize,
    pub decoder_output_conv: usize,
    /// Shared-slope activations contribute one scalar each.
    pub activation_scalars: usize,
    pub total: usize,
}

const fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    k * k * c_in * c_out + c_out
}

/// Two convs with a shared-slope activation after each: `2·conv + 2`.
const fn residual_block_params(ch: usize) -> usize {
    2 * conv_params(ch, ch, 3) + 2
}

/// Closed-form count of learnable scalars for a configuration.
pub fn parameter_count(cfg: &HighResNetConfig) -> usize {
    parameter_breakdown(cfg).total
}

/// Per-layer closed-form parameter arithmetic.
pub fn parameter_breakdown(cfg: &HighResNetConfig) -> ParameterBreakdown {
    let c = cfg.in_bands;
    let h = cfg.hidden;
    let encoder_input_conv = conv_params(2 * c, h, 3);
    let encoder_residual_block = residual_block_params(h);
    let encoder_output_conv = conv_params(h, h, 3);
    let fusion_residual_block = residual_block_params(2 * h);
    let fusion_projection_conv = conv_params(2 * h, h, 3);
    let decoder_upsample_conv = conv_params(h, h, 3);
    let decoder_output_conv = conv_params(h, c, 1);
    // Stand-alone activations: one after the encoder input conv, one after
    // the fusion projection, one after the decoder upsample.
    let activation_scalars = 3;
    let total = encoder_input_conv
        + cfg.enc_residual_blocks * encoder_residual_block
        + encoder_output_conv
        + fusion_residual_block
        + fusion_projection_conv
        + decoder_upsample_conv
        + decoder_output_conv
        + activation_scalars;
    ParameterBreakdown {
        encoder_input_conv,
        encoder_residual_block,
        encoder_output_conv,
        fusion_residual_block,
        fusion_projection_conv,
        decoder_upsample_conv,
        decoder_output_conv,
        activation_scalars,
        total,
    }
}

/// Per-pixel median across revisits, skipping cloud-masked samples; pixels
/// masked in every revisit fall back to the unmasked median.  Even counts
/// take the mean of the two middle values.
pub fn reference_frame(
    lr_stack: &ArrayView4<'_, f64>,
    masks: &ArrayView3<'_, bool>,
) -> Result<Array3<f64>> {
    let (t, c, h, w) = lr_stack.dim();
    if t == 0 {
        return Err(Error::invalid("reference_frame: empty revisit stack"));
    }
    if masks.dim() != (t, h, w) {
        return Err(Error::shape(format!(
            "reference_frame: masks {:?} vs stack {:?}",
            masks.dim(),
            lr_stack.dim()
        )));
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    let mut clear: Vec<f64> = Vec::with_capacity(t);
    for i in 0..h {
        for j in 0..w {
            let any_clear = (0..t).any(|ti| !masks[[ti, i, j]]);
            for ci in 0..c {
                clear.clear();
                for ti in 0..t {
                    if !any_clear || !masks[[ti, i, j]] {
                        clear.push(lr_stack[[ti, ci, i, j]]);
                    }
                }
                out[[ci, i, j]] = median_inplace(&mut clear);
            }
        }
    }
    Ok(out)
}

fn median_inplace(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Residual block: two 3×3 convolutions, each followed by a shared-slope
/// activation, with an additive skip around the whole branch.  Zeroing the
/// branch weights makes the block an exact identity.
#[derive(Clone, Debug)]
pub(crate) struct ResidualBlock {
    conv1: Conv2d,
    act1: PRelu,
    conv2: Conv2d,
    act2: PRelu,
}

impl ResidualBlock {
    pub(crate) fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::init(store, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            act1: PRelu::init(store, &format!("{name}.act1")),
            conv2: Conv2d::init(store, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
            act2: PRelu::init(store, &format!("{name}.act2")),
        }
    }

    pub(crate) fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut y = self.conv1.forward(t, store, x);
        y = self.act1.forward(t, store, y);
        y = self.conv2.forward(t, store, y);
        y = self.act2.forward(t, store, y);
        t.add(x, y)
    }
}

/// The fusion super-resolver.
pub struct HighResNet {
    cfg: HighResNetConfig,
    enc_in: Conv2d,
    enc_act: PRelu,
    enc_blocks: Vec<ResidualBlock>,
    enc_out: Conv2d,
    fuse_block: ResidualBlock,
    fuse_proj: Conv2d,
    fuse_act: PRelu,
    dec_up: ConvTranspose2d,
    dec_act: PRelu,
    dec_out: Conv2d,
}

impl HighResNet {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &HighResNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.in_bands, cfg.hidden);
        let enc_in = Conv2d::init(store, rng, &format!("{prefix}.enc.conv_in"), 2 * c, h, 3, 1, 1);
        let enc_act = PRelu::init(store, &format!("{prefix}.enc.act_in"));
        let enc_blocks = (0..cfg.enc_residual_blocks)
            .map(|i| ResidualBlock::init(store, rng, &format!("{prefix}.enc.block{i}"), h))
            .collect();
        let enc_out = Conv2d::init(store, rng, &format!("{prefix}.enc.conv_out"), h, h, 3, 1, 1);
        let fuse_block = ResidualBlock::init(store, rng, &format!("{prefix}.fuse.block"), 2 * h);
        let fuse_proj = Conv2d::init(store, rng, &format!("{prefix}.fuse.proj"), 2 * h, h, 3, 1, 1);
        let fuse_act = PRelu::init(store, &format!("{prefix}.fuse.act"));
        // Transposed-conv geometry chosen so output = sr_factor · input:
        // s=2 → pad 1, output padding 1; s=3 → pad 0, output padding 0.
        let (pad, out_pad) = match cfg.sr_factor {
            2 => (1, 1),
            3 => (0, 0),
            _ => unreachable!("validated above"),
        };
        let dec_up = ConvTranspose2d::init(
            store,
            rng,
            &format!("{prefix}.dec.up"),
            h,
            h,
            3,
            cfg.sr_factor,
            pad,
            out_pad,
        );
        let dec_act = PRelu::init(store, &format!("{prefix}.dec.act"));
        let dec_out = Conv2d::init(store, rng, &format!("{prefix}.dec.conv_out"), h, c, 1, 1, 0);
        Ok(Self {
            cfg: cfg.clone(),
            enc_in,
            enc_act,
            enc_blocks,
            enc_out,
            fuse_block,
            fuse_proj,
            fuse_act,
            dec_up,
            dec_act,
            dec_out,
        })
    }

    pub fn config(&self) -> &HighResNetConfig {
        &self.cfg
    }

    /// Encode one batch of revisits `[N, C, h, w]` against the matching
    /// reference frames `[N, C, h, w]` into `[N, hidden, h, w]`.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, revisit: Var, reference: Var) -> Var {
        let mut x = t.concat_channels(&[revisit, reference]);
        x = self.enc_in.forward(t, store, x);
        x = self.enc_act.forward(t, store, x);
        for block in &self.enc_blocks {
            x = block.forward(t, store, x);
        }
        self.enc_out.forward(t, store, x)
    }

    /// Merge encodings pairwise until one remains; all pair applications
    /// share the same weights.  The list is first padded to the next power
    /// of two (at least 2): with `RepeatLast` the final encoding repeats;
    /// with `RepeatReference` the caller supplies `reference_encoding`.
    pub fn fuse(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        encodings: &[Var],
        reference_encoding: Option<Var>,
    ) -> Result<Var> {
        if encodings.is_empty() {
            return Err(Error::invalid("fuse: empty encoding list"));
        }
        let mut list = encodings.to_vec();
        let pad = match (self.cfg.revisit_pad, reference_encoding) {
            (RevisitPad::RepeatReference, Some(p)) => p,
            (RevisitPad::RepeatReference, None) => {
                return Err(Error::invalid(
                    "fuse: repeat_reference padding needs the reference encoding",
                ));
            }
            (RevisitPad::RepeatLast, _) => *list.last().unwrap(),
        };
        let target = list.len().max(2).next_power_of_two();
        while list.len() < target {
            list.push(pad);
        }
        while list.len() > 1 {
            let mut next = Vec::with_capacity(list.len() / 2);
            for pair in list.chunks(2) {
                next.push(self.fuse_pair(t, store, pair[0], pair[1]));
            }
            list = next;
        }
        Ok(list[0])
    }

    /// One shared-weight pair merge: residual block on the concatenated
    /// channels, projection back to `hidden`, activation.
    pub fn fuse_pair(&self, t: &mut Tape, store: &ParamStore, a: Var, b: Var) -> Var {
        let cat = t.concat_channels(&[a, b]);
        let r = self.fuse_block.forward(t, store, cat);
        let p = self.fuse_proj.forward(t, store, r);
        self.fuse_act.forward(t, store, p)
    }

    /// Decode the fused state `[N, hidden, h, w]` to `[N, C, s·h, s·w]`
    /// (times the optional fractional upscale).
    pub fn decode(&self, t: &mut Tape, store: &ParamStore, fused: Var) -> Var {
        let mut x = self.dec_up.forward(t, store, fused);
        x = self.dec_act.forward(t, store, x);
        x = self.dec_out.forward(t, store, x);
        if let Some(f) = self.cfg.fractional_upsample {
            let shape = t.shape(x).to_vec();
            let oh = ((shape[2] as f64) * f).round() as usize;
            let ow = ((shape[3] as f64) * f).round() as usize;
            x = t.bicubic_resize(x, oh, ow);
        }
        x
    }

    /// Full differentiable pass over a batch: `lr` is `[N, T, C, h, w]`
    /// flattened as a slice of per-sample stacks, `refs` the matching
    /// reference frames.  Returns the SR batch `[N, C, s·h, s·w]`.
    pub fn forward_batch(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        lr_stacks: &[ArrayView4<'_, f64>],
        refs: &[ArrayView3<'_, f64>],
    ) -> Result<Var> {
        if lr_stacks.is_empty() || lr_stacks.len() != refs.len() {
            return Err(Error::invalid("forward_batch: empty batch or ref count mismatch"));
        }
        let (revisits, c, h, w) = lr_stacks[0].dim();
        if revisits == 0 {
            return Err(Error::invalid("forward_batch: empty revisit stack"));
        }
        if c != self.cfg.in_bands {
            return Err(Error::invalid(format!(
                "forward_batch: expected {} bands, got {c}",
                self.cfg.in_bands
            )));
        }
        for (s, r) in lr_stacks.iter().zip(refs) {
            if s.dim() != (revisits, c, h, w) || r.dim() != (c, h, w) {
                return Err(Error::shape("forward_batch: inconsistent sample shapes"));
            }
        }
        let n = lr_stacks.len();
        let mut ref_batch = Array4::<f64>::zeros((n, c, h, w));
        for (bi, r) in refs.iter().enumerate() {
            ref_batch.index_axis_mut(Axis(0), bi).assign(r);
        }
        let ref_var = t.constant(ref_batch.into_dyn());

        let mut encodings = Vec::with_capacity(revisits);
        for ti in 0..revisits {
            let mut rev = Array4::<f64>::zeros((n, c, h, w));
            for (bi, s) in lr_stacks.iter().enumerate() {
                rev.index_axis_mut(Axis(0), bi).assign(&s.index_axis(Axis(0), ti));
            }
            let rv = t.constant(rev.into_dyn());
            encodings.push(self.encode(t, store, rv, ref_var));
        }
        let ref_encoding = match self.cfg.revisit_pad {
            RevisitPad::RepeatReference => Some(self.encode(t, store, ref_var, ref_var)),
            RevisitPad::RepeatLast => None,
        };
        let fused = self.fuse(t, store, &encodings, ref_encoding)?;
        Ok(self.decode(t, store, fused))
    }

    /// Inference on one scene stack `[T, C, h, w]` with its cloud masks.
    pub fn forward_scene(
        &self,
        store: &ParamStore,
        lr_stack: &ArrayView4<'_, f64>,
        masks: &ArrayView3<'_, bool>,
    ) -> Result<Array3<f64>> {
        let reference = reference_frame(lr_stack, masks)?;
        let mut t = Tape::new();
        let out = self.forward_batch(&mut t, store, &[lr_stack.view()], &[reference.view()])?;
        let v = t.value(out);
        Ok(v.index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap())
    }
}
