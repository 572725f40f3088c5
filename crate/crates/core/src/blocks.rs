//! Network building blocks: the pre-activation residual block, the grouped
//! multi-encoder, max-merge fusion and decoder stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Graph, InstanceNorm, ParamStore};

/// Number of input modalities, and so of encoder groups.
pub const MODALITIES: usize = 4;

/// `y = x + Conv(ReLU(IN(Conv(ReLU(IN(x))))))`, kernel 3, padding 1.
///
/// The first convolution has no bias: the instance norm right after it
/// removes any per-channel constant, so such a bias would never learn.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub norm1: InstanceNorm,
    pub conv1: Conv,
    pub norm2: InstanceNorm,
    pub conv2: Conv,
    pub projection: Option<Conv>,
    pub channels_in: usize,
    pub channels_out: usize,
    pub groups: usize,
}

impl ResidualBlock {
    /// `allow_projection` permits `channels_in != channels_out` via a 1x1x1
    /// convolution on the identity path.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        groups: usize,
        allow_projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if channels_in % groups != 0 || channels_out % groups != 0 {
            return Err(Error::Shape(format!(
                "{name}: channels {channels_in}->{channels_out} not divisible by {groups} groups"
            )));
        }
        let projection = if channels_in == channels_out {
            None
        } else if allow_projection {
            let spec = ConvSpec {
                groups,
                ..ConvSpec::pointwise()
            };
            Some(Conv::new(store, &format!("{name}.proj"), channels_in, channels_out, spec, false, rng))
        } else {
            return Err(Error::Shape(format!(
                "{name}: residual block maps {channels_in} to {channels_out} channels without a projection"
            )));
        };
        let norm1 = InstanceNorm::new(store, &format!("{name}.norm1"), channels_in);
        let conv1 = Conv::new(
            store,
            &format!("{name}.conv1"),
            channels_in,
            channels_out,
            ConvSpec::same3(groups),
            false,
            rng,
        );
        let norm2 = InstanceNorm::new(store, &format!("{name}.norm2"), channels_out);
        let conv2 = Conv::new(
            store,
            &format!("{name}.conv2"),
            channels_out,
            channels_out,
            ConvSpec::same3(groups),
            true,
            rng,
        );
        Ok(ResidualBlock {
            norm1,
            conv1,
            norm2,
            conv2,
            projection,
            channels_in,
            channels_out,
            groups,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.tape.relu(h);
        let h = self.conv1.forward(g, h);
        let h = self.norm2.forward(g, h);
        let h = g.tape.relu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.projection {
            Some(p) => p.forward(g, x),
            None => x,
        };
        g.tape.add(skip, h)
    }

    /// Closed-form scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        let (ci, co, gr) = (self.channels_in, self.channels_out, self.groups);
        let conv1 = 27 * ci * co / gr;
        let conv2 = 27 * co * co / gr + co;
        let norms = 2 * ci + 2 * co;
        let proj = if self.projection.is_some() { ci * co / gr } else { 0 };
        conv1 + conv2 + norms + proj
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub groups: usize,
    /// Number of downsamplings; the encoder has `levels + 1` resolutions.
    pub levels: usize,
    /// Filters per modality at level 0; doubled at every level.
    pub base_filters: usize,
}

impl EncoderSpec {
    /// Total (all groups) channel count at `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.groups * self.merged_channels(level)
    }

    /// Channel count after merging the groups at `level`.
    pub fn merged_channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let factor = 1usize << self.levels;
        for &n in &shape {
            if n % factor != 0 || n / factor < 2 {
                return Err(Error::Shape(format!(
                    "input {shape:?} must be divisible by {factor} (2^levels) with at least 2 voxels per axis left at the bottleneck"
                )));
            }
        }
        Ok(())
    }
}

/// Per-modality encoders as one grouped network: no operation mixes
/// channel blocks, so block `g` only ever sees modality `g`.
#[derive(Debug, Clone)]
pub struct MultiEncoder {
    pub spec: EncoderSpec,
    pub stem: Conv,
    pub down: Vec<Conv>,
    pub blocks: Vec<ResidualBlock>,
}

impl MultiEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: EncoderSpec,
        input: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        spec.check_input(input)?;
        let groups = spec.groups;
        let stem = Conv::new(
            store,
            &format!("{name}.stem"),
            groups,
            spec.channels(0),
            ConvSpec::same3(groups),
            true,
            rng,
        );
        let mut down = Vec::new();
        let mut blocks = Vec::new();
        for level in 0..=spec.levels {
            if level > 0 {
                down.push(Conv::new(
                    store,
                    &format!("{name}.level{level}.down"),
                    spec.channels(level - 1),
                    spec.channels(level),
                    ConvSpec::down2(groups),
                    true,
                    rng,
                ));
            }
            let c = spec.channels(level);
            blocks.push(ResidualBlock::new(
                store,
                &format!("{name}.level{level}.block"),
                c,
                c,
                groups,
                false,
                rng,
            )?);
        }
        Ok(MultiEncoder {
            spec,
            stem,
            down,
            blocks,
        })
    }

    /// Grouped feature maps, one per level, finest first.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let shape = g.tape.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != self.spec.groups {
            return Err(Error::Shape(format!(
                "encoder expects [batch, {}, x, y, z] input, got {shape:?}",
                self.spec.groups
            )));
        }
        self.spec.check_input([shape[2], shape[3], shape[4]])?;
        let mut h = self.stem.forward(g, x);
        let mut out = Vec::with_capacity(self.blocks.len());
        for (level, block) in self.blocks.iter().enumerate() {
            if level > 0 {
                h = self.down[level - 1].forward(g, h);
            }
            h = block.forward(g, h);
            out.push(h);
        }
        Ok(out)
    }
}

/// Element-wise max over the modality blocks followed by a 1x1x1 convolution.
#[derive(Debug, Clone)]
pub struct ModalityMerge {
    pub groups: usize,
    pub channels: usize,
    pub pointwise: Conv,
}

impl ModalityMerge {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        groups: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let pointwise = Conv::new(store, &format!("{name}.pointwise"), channels, channels, ConvSpec::pointwise(), true, rng);
        ModalityMerge {
            groups,
            channels,
            pointwise,
        }
    }

    /// Only the max stage, without the pointwise convolution.
    pub fn max<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.tape.shape(x)[1];
        if c != self.groups * self.channels {
            return Err(Error::Shape(format!(
                "merge expects {} blocks of {} channels, got {c} channels",
                self.groups, self.channels
            )));
        }
        Ok(g.tape.group_max(x, self.groups))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let m = self.max(g, x)?;
        Ok(self.pointwise.forward(g, m))
    }
}

/// `d_i = block(W_e e_i + W_d up(d_{i+1}) [+ W_y context])`.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: Conv,
    pub from_encoder: Conv,
    pub from_decoder: Conv,
    pub from_context: Option<Conv>,
    pub block: ResidualBlock,
}

impl DecoderStage {
    /// `channels` is the filter count at this level; the level below has twice as many.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        context_channels: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let up = Conv::transposed(store, &format!("{name}.up"), 2 * channels, channels, ConvSpec::down2(1), true, rng);
        let from_encoder = Conv::new(store, &format!("{name}.w_e"), channels, channels, ConvSpec::same3(1), true, rng);
        let from_decoder = Conv::new(store, &format!("{name}.w_d"), channels, channels, ConvSpec::same3(1), false, rng);
        let from_context = context_channels
            .map(|k| Conv::new(store, &format!("{name}.w_y"), k, channels, ConvSpec::same3(1), false, rng));
        let block = ResidualBlock::new(store, &format!("{name}.block"), channels, channels, 1, false, rng)?;
        Ok(DecoderStage {
            up,
            from_encoder,
            from_decoder,
            from_context,
            block,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        encoder: Var,
        below: Var,
        context: Option<Var>,
    ) -> Result<Var> {
        let up = self.up.forward(g, below);
        let (es, us) = (g.tape.shape(encoder).to_vec(), g.tape.shape(up).to_vec());
        if es[2..] != us[2..] {
            return Err(Error::Shape(format!(
                "decoder inputs disagree in scale: encoder {:?}, upsampled {:?}",
                &es[2..],
                &us[2..]
            )));
        }
        let a = self.from_encoder.forward(g, encoder);
        let b = self.from_decoder.forward(g, up);
        let mut s = g.tape.add(a, b);
        match (&self.from_context, context) {
            (Some(conv), Some(ctx)) => {
                let cs = g.tape.shape(ctx).to_vec();
                if cs[2..] != es[2..] {
                    return Err(Error::Shape(format!(
                        "context {:?} does not match decoder scale {:?}",
                        &cs[2..],
                        &es[2..]
                    )));
                }
                let c = conv.forward(g, ctx);
                s = g.tape.add(s, c);
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Shape("decoder stage expects a context input".into())),
            (None, Some(_)) => return Err(Error::Shape("decoder stage has no context path".into())),
        }
        Ok(self.block.forward(g, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random<T: Real>(shape: &[usize], seed: u64) -> ArrayD<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(n.sample(&mut rng)))
    }

    #[test]
    fn zero_weights_make_the_block_an_identity() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ResidualBlock::new(&mut store, "b", 3, 3, 1, false, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.contains("conv") {
                store.value_mut(id).fill(0.0);
            }
        }
        let x = random::<f32>(&[1, 3, 4, 3, 5], 1);
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(x.clone());
        let y = block.forward(&mut g, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn block_preserves_shape_down_to_one_voxel() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ResidualBlock::new(&mut store, "b", 2, 2, 1, false, &mut rng).unwrap();
        for shape in [[1, 1, 1], [2, 3, 1], [5, 4, 3]] {
            let x = random::<f32>(&[1, 2, shape[0], shape[1], shape[2]], 2);
            let mut g = Graph::new(&store);
            let xv = g.tape.constant(x);
            let y = block.forward(&mut g, xv);
            assert_eq!(&g.tape.shape(y)[2..], &shape);
        }
    }

    #[test]
    fn block_parameter_count_matches_store() {
        for (ci, co, gr, proj) in [(2, 2, 1, false), (8, 8, 4, false), (4, 8, 4, true), (3, 5, 1, true)] {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let block = ResidualBlock::new(&mut store, "b", ci, co, gr, proj, &mut rng).unwrap();
            assert_eq!(block.parameter_count(), store.element_count());
        }
    }

    #[test]
    fn channel_mismatch_needs_projection() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ResidualBlock::new(&mut store, "b", 2, 4, 1, false, &mut rng).is_err());
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let spec = EncoderSpec {
            groups: 4,
            levels: 2,
            base_filters: 1,
        };
        assert!(spec.check_input([8, 8, 8]).is_ok());
        assert!(spec.check_input([8, 6, 8]).is_err());
        assert!(spec.check_input([4, 4, 4]).is_err());
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiEncoder::new(&mut store, "e", spec, [10, 8, 8], &mut rng).is_err());
    }

    #[test]
    fn merge_rejects_unequal_blocks() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let merge = ModalityMerge::new(&mut store, "m", 4, 2, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(random::<f32>(&[1, 6, 2, 2, 2], 3));
        assert!(merge.forward(&mut g, x).is_err());
    }

    #[test]
    fn decoder_doubles_resolution() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = DecoderStage::new(&mut store, "d", 2, Some(3), &mut rng).unwrap();
        for below in [[1, 2, 3], [2, 2, 2], [3, 1, 2]] {
            let up = below.map(|v| v * 2);
            let mut g = Graph::new(&store);
            let e = g.tape.constant(random::<f32>(&[1, 2, up[0], up[1], up[2]], 4));
            let d = g.tape.constant(random::<f32>(&[1, 4, below[0], below[1], below[2]], 5));
            let c = g.tape.constant(random::<f32>(&[1, 3, up[0], up[1], up[2]], 6));
            let y = dec.forward(&mut g, e, d, Some(c)).unwrap();
            assert_eq!(&g.tape.shape(y)[2..], &up);
            let bad = g.tape.constant(random::<f32>(&[1, 3, 1, 1, 1], 7));
            assert!(dec.forward(&mut g, e, d, Some(bad)).is_err());
            assert!(dec.forward(&mut g, e, d, None).is_err());
        }
    }

    #[test]
    fn zero_context_matches_no_context() {
        let mut with = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec_with = DecoderStage::new(&mut with, "d", 2, Some(2), &mut rng).unwrap();
        let mut without = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec_without = DecoderStage::new(&mut without, "d", 2, None, &mut rng).unwrap();
        without.copy_matching(&with);
        let e = random::<f32>(&[1, 2, 4, 4, 2], 8);
        let d = random::<f32>(&[1, 4, 2, 2, 1], 9);
        let run = |store: &ParamStore<f32>, dec: &DecoderStage, ctx: bool| {
            let mut g = Graph::new(store);
            let ev = g.tape.constant(e.clone());
            let dv = g.tape.constant(d.clone());
            let c = ctx.then(|| g.tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4, 2]))));
            let y = dec.forward(&mut g, ev, dv, c).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&with, &dec_with, true), run(&without, &dec_without, false));
    }
}
