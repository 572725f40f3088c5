//! Three multi-encoder UNets at decreasing downsampling factors, each
//! handing a context feature map to the next finer stage.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Real, Var};
use crate::blocks::{DecoderStage, EncoderSpec, ModalityMerge, MultiEncoder, MODALITIES};
use crate::error::{Error, Result};
use crate::nn::{Conv, Graph, InstanceNorm, ParamStore};
use crate::volume::source_coordinate;

/// Classes predicted by every stage, in channel order.
pub const CLASS_LABELS: [u8; 4] = [0, 1, 2, 4];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    /// Downsampling factor of each stage's input, coarse to fine.
    pub scales: Vec<usize>,
    /// Filters per modality at the first encoder level (`N`).
    pub base_filters: usize,
    /// Downsamplings per stage.
    pub levels: usize,
    /// Channels of the context map handed to the next stage (`K`).
    pub context_filters: usize,
    pub classes: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig::full()
    }
}

impl CascadeConfig {
    pub fn full() -> Self {
        CascadeConfig {
            scales: vec![4, 2, 1],
            base_filters: 8,
            levels: 4,
            context_filters: 8,
            classes: CLASS_LABELS.len(),
        }
    }

    pub fn desk() -> Self {
        CascadeConfig {
            base_filters: 4,
            levels: 2,
            ..CascadeConfig::full()
        }
    }

    pub fn encoder(&self) -> EncoderSpec {
        EncoderSpec {
            groups: MODALITIES,
            levels: self.levels,
            base_filters: self.base_filters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("cascade needs at least one scale".into()));
        }
        for pair in self.scales.windows(2) {
            if pair[1] >= pair[0] || pair[0] % pair[1] != 0 {
                return Err(Error::Config(format!(
                    "scales {:?} must be strictly decreasing, each dividing its predecessor",
                    self.scales
                )));
            }
        }
        if self.scales.contains(&0) || self.base_filters == 0 || self.context_filters == 0 {
            return Err(Error::Config("scales, base_filters and context_filters must be positive".into()));
        }
        if self.classes != CLASS_LABELS.len() {
            return Err(Error::Config(format!(
                "classes must be {} (background and labels 1, 2, 4)",
                CLASS_LABELS.len()
            )));
        }
        Ok(())
    }

    /// Input shape of stage `stage` for a full-resolution `grid`.
    pub fn stage_shape(&self, stage: usize, grid: [usize; 3]) -> [usize; 3] {
        grid.map(|n| n / self.scales[stage])
    }

    pub fn check_grid(&self, grid: [usize; 3]) -> Result<()> {
        self.validate()?;
        let max = self.scales[0];
        for &n in &grid {
            if n % max != 0 {
                return Err(Error::Shape(format!(
                    "grid {grid:?} is not divisible by the largest scale {max}"
                )));
            }
        }
        for s in 0..self.scales.len() {
            self.encoder().check_input(self.stage_shape(s, grid)).map_err(|e| {
                Error::Shape(format!("stage {s} (scale {}): {e}", self.scales[s]))
            })?;
        }
        Ok(())
    }

    /// Closed-form scalar parameter count of one stage.
    pub fn stage_parameter_count(&self, with_context: bool) -> usize {
        let g = MODALITIES;
        let (n, levels, k, c) = (self.base_filters, self.levels, self.context_filters, self.classes);
        let enc = self.encoder();
        let block = |ch: usize, groups: usize| 27 * ch * ch / groups * 2 + ch + 4 * ch;
        let mut total = 27 * enc.channels(0) + enc.channels(0); // stem: 1 input channel per group
        for level in 0..=levels {
            let ch = enc.channels(level);
            if level > 0 {
                total += 8 * enc.channels(level - 1) * ch / g + ch;
            }
            total += block(ch, g);
            let f = enc.merged_channels(level);
            total += f * f + f;
        }
        for level in 0..levels {
            let f = n << level;
            total += 8 * 2 * f * f + f; // up
            total += 27 * f * f + f; // w_e
            total += 27 * f * f; // w_d
            if with_context && level == 0 {
                total += 27 * k * f;
            }
            total += block(f, 1);
        }
        total += 2 * n + 27 * n * k + 2 * k; // context, with its two norms
        total += k * c + c; // head
        total
    }
}

/// One multi-encoder UNet.
#[derive(Debug, Clone)]
pub struct StageNet {
    pub name: String,
    pub scale: usize,
    pub encoder: MultiEncoder,
    pub merges: Vec<ModalityMerge>,
    /// Indexed by level, finest first.
    pub decoders: Vec<DecoderStage>,
    pub pre_context: InstanceNorm,
    pub context: Conv,
    pub context_norm: InstanceNorm,
    pub head: Conv,
}

/// Graph handles of one stage's results.
#[derive(Debug, Clone)]
pub struct StageVars {
    /// Grouped encoder outputs per level, before merging.
    pub encoder: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
    pub context: Var,
}

impl StageNet {
    pub fn new<T: Real, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &CascadeConfig,
        scale: usize,
        input: [usize; 3],
        with_context: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("scale{scale}");
        let spec = config.encoder();
        let encoder = MultiEncoder::new(store, &format!("{name}.enc"), spec, input, rng)?;
        let merges = (0..=spec.levels)
            .map(|l| {
                ModalityMerge::new(store, &format!("{name}.merge{l}"), spec.groups, spec.merged_channels(l), rng)
            })
            .collect();
        let decoders = (0..spec.levels)
            .map(|l| {
                let context = (with_context && l == 0).then_some(config.context_filters);
                DecoderStage::new(store, &format!("{name}.dec{l}"), spec.merged_channels(l), context, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let pre_context = InstanceNorm::new(store, &format!("{name}.context.norm_in"), spec.merged_channels(0));
        let context = Conv::new(
            store,
            &format!("{name}.context"),
            spec.merged_channels(0),
            config.context_filters,
            ConvSpec::same3(1),
            false,
            rng,
        );
        let context_norm = InstanceNorm::new(store, &format!("{name}.context.norm_out"), config.context_filters);
        let head = Conv::new(
            store,
            &format!("{name}.head"),
            config.context_filters,
            config.classes,
            ConvSpec::pointwise(),
            true,
            rng,
        );
        Ok(StageNet {
            name,
            scale,
            encoder,
            merges,
            decoders,
            pre_context,
            context,
            context_norm,
            head,
        })
    }

    pub fn has_context_input(&self) -> bool {
        self.decoders.first().is_some_and(|d| d.from_context.is_some())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, context: Option<Var>) -> Result<StageVars> {
        let encoder = self.encoder.forward(g, x)?;
        let merged = encoder
            .iter()
            .zip(&self.merges)
            .map(|(&e, m)| m.forward(g, e))
            .collect::<Result<Vec<_>>>()?;
        let mut d = *merged.last().expect("at least one level");
        for level in (0..self.decoders.len()).rev() {
            let ctx = if level == 0 { context } else { None };
            d = self.decoders[level].forward(g, merged[level], d, ctx)?;
        }
        // pre-activation on both sides keeps the head's input normalised
        let d = self.pre_context.forward(g, d);
        let d = g.tape.relu(d);
        let c = self.context.forward(g, d);
        let c = self.context_norm.forward(g, c);
        let context = g.tape.relu(c);
        let logits = self.head.forward(g, context);
        let probs = g.tape.softmax(logits);
        Ok(StageVars {
            encoder,
            logits,
            probs,
            context,
        })
    }
}

/// Materialised result of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs<T> {
    /// `[batch, classes, x, y, z]`, a distribution over classes at every voxel.
    pub probs: ArrayD<T>,
    /// `[batch, K, x, y, z]`, the map handed to the next stage.
    pub context: ArrayD<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Stages whose exported context is replaced by zeros before it reaches the next stage.
    pub zero_context: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CascadeModel<T> {
    pub config: CascadeConfig,
    pub grid: [usize; 3],
    pub store: ParamStore<T>,
    pub stages: Vec<StageNet>,
}

impl<T: Real> CascadeModel<T> {
    pub fn new(config: &CascadeConfig, grid: [usize; 3], seed: u64) -> Result<Self> {
        config.check_grid(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stages = config
            .scales
            .iter()
            .enumerate()
            .map(|(s, &scale)| {
                StageNet::new(&mut store, config, scale, config.stage_shape(s, grid), s > 0, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CascadeModel {
            config: config.clone(),
            grid,
            store,
            stages,
        })
    }

    /// A single-stage model equal to stage `stage` without its context
    /// input, sharing every other parameter value with `self`.
    pub fn standalone(&self, stage: usize) -> Result<CascadeModel<T>> {
        let scale = self.config.scales[stage];
        let config = CascadeConfig {
            scales: vec![scale],
            ..self.config.clone()
        };
        let mut model = CascadeModel::new(&config, self.grid, 0)?;
        model.store.copy_matching(&self.store);
        Ok(model)
    }

    pub fn stage_inputs(&self, input: &ArrayD<T>) -> Result<Vec<ArrayD<T>>> {
        let shape = input.shape();
        if shape.len() != 5 || shape[1] != MODALITIES {
            return Err(Error::Shape(format!(
                "cascade expects [batch, {MODALITIES}, x, y, z] input, got {shape:?}"
            )));
        }
        if shape[2..] != self.grid {
            return Err(Error::Shape(format!(
                "cascade built for grid {:?}, got {:?}",
                self.grid,
                &shape[2..]
            )));
        }
        Ok((0..self.stages.len())
            .map(|s| resample_linear(input, self.config.stage_shape(s, self.grid)))
            .collect())
    }

    /// Builds every stage into `g`, coarse to fine.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        input: &ArrayD<T>,
        options: &ForwardOptions,
    ) -> Result<Vec<StageVars>> {
        let inputs = self.stage_inputs(input)?;
        let mut out: Vec<StageVars> = Vec::with_capacity(self.stages.len());
        for (s, (stage, x)) in self.stages.iter().zip(inputs).enumerate() {
            let xv = g.tape.constant(x);
            let context = if s == 0 {
                None
            } else {
                let prev = out[s - 1].context;
                let ratio = self.config.scales[s - 1] / self.config.scales[s];
                let prev = if options.zero_context.contains(&(s - 1)) {
                    let zeros = ArrayD::zeros(g.tape.value(prev).raw_dim());
                    g.tape.constant(zeros)
                } else {
                    prev
                };
                Some(g.tape.upsample(prev, ratio))
            };
            out.push(stage.forward(g, xv, context)?);
        }
        Ok(out)
    }

    pub fn forward(&self, input: &ArrayD<T>, options: &ForwardOptions) -> Result<Vec<StageOutputs<T>>> {
        let mut g = Graph::new(&self.store);
        let vars = self.forward_graph(&mut g, input, options)?;
        Ok(vars
            .iter()
            .map(|v| StageOutputs {
                probs: g.value(v.probs).clone(),
                context: g.value(v.context).clone(),
            })
            .collect())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.element_count()
    }

    /// Names of the parameters on context paths (`W_y`).
    pub fn context_path_params(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.contains(".w_y."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}

/// Corner-aligned separable linear resampling of the spatial axes of a
/// `[batch, channel, x, y, z]` tensor.
pub fn resample_linear<T: Real>(input: &ArrayD<T>, target: [usize; 3]) -> ArrayD<T> {
    let mut current = input.as_standard_layout().into_owned();
    for axis in 0..3 {
        let n_in = current.shape()[axis + 2];
        let n_out = target[axis];
        if n_in == n_out {
            continue;
        }
        let mut shape = current.shape().to_vec();
        shape[axis + 2] = n_out;
        let mut next = ArrayD::<T>::zeros(IxDyn(&shape));
        let outer: usize = shape[..axis + 2].iter().product();
        let inner: usize = shape[axis + 3..].iter().product();
        let src = current.as_slice().unwrap();
        let dst = next.as_slice_mut().unwrap();
        for o in 0..outer {
            for i in 0..n_out {
                let c = source_coordinate(i, n_in, n_out);
                let lo = (c.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                let w = T::of(c - lo as f64);
                let a = &src[(o * n_in + lo) * inner..][..inner];
                let b = &src[(o * n_in + hi) * inner..][..inner];
                let out = &mut dst[(o * n_out + i) * inner..][..inner];
                for j in 0..inner {
                    out[j] = if w == T::zero() { a[j] } else { a[j] + w * (b[j] - a[j]) };
                }
            }
        }
        current = next;
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{resample, Interpolation};
    use ndarray::Array3;

    #[test]
    fn config_validation() {
        assert!(CascadeConfig::desk().validate().is_ok());
        let bad = CascadeConfig {
            scales: vec![2, 4, 1],
            ..CascadeConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = CascadeConfig {
            scales: vec![3, 2, 1],
            ..CascadeConfig::desk()
        };
        assert!(bad.validate().is_err());
        assert!(CascadeConfig::desk().check_grid([32, 32, 32]).is_ok());
        assert!(CascadeConfig::desk().check_grid([32, 32, 24]).is_err());
        assert!(CascadeConfig::desk().check_grid([16, 16, 16]).is_err());
    }

    #[test]
    fn parameter_count_formula_matches_store() {
        for config in [
            CascadeConfig::desk(),
            CascadeConfig {
                base_filters: 2,
                levels: 1,
                context_filters: 3,
                scales: vec![2, 1],
                ..CascadeConfig::desk()
            },
        ] {
            let grid = [16 * config.scales[0]; 3];
            let model = CascadeModel::<f32>::new(&config, grid, 1).unwrap();
            let expected: usize = (0..config.scales.len())
                .map(|s| config.stage_parameter_count(s > 0))
                .sum();
            assert_eq!(model.parameter_count(), expected);
            for (s, stage) in model.stages.iter().enumerate() {
                assert_eq!(
                    model.store.element_count_with_prefix(&format!("{}.", stage.name)),
                    config.stage_parameter_count(s > 0)
                );
            }
        }
    }

    #[test]
    fn generic_resample_matches_volume_resample() {
        let v = Array3::from_shape_fn((6, 5, 4), |(a, b, c)| (a * 7 + b * 3 + c) as f32 * 0.5);
        let expected = resample(v.view(), [3, 4, 2], Interpolation::Linear).unwrap();
        let x = v.clone().into_dyn().into_shape_with_order(IxDyn(&[1, 1, 6, 5, 4])).unwrap();
        let y = resample_linear(&x, [3, 4, 2]);
        for ((i, j, k), e) in expected.indexed_iter() {
            assert!((y[[0, 0, i, j, k]] - e).abs() < 1e-5);
        }
    }

    #[test]
    fn whole_cascade_gradient_matches_finite_differences() {
        use crate::loss::{dice_loss_var, DiceVariant, LossSpace};
        use rand::RngExt;
        let config = CascadeConfig {
            scales: vec![2, 1],
            base_filters: 1,
            levels: 1,
            context_filters: 2,
            ..CascadeConfig::desk()
        };
        let grid = [8; 3];
        let mut model = CascadeModel::<f64>::new(&config, grid, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = ArrayD::from_shape_fn(IxDyn(&[1, 4, 8, 8, 8]), |_| rng.random_range(-1.0..1.0));
        let targets: Vec<ArrayD<f64>> = (0..2)
            .map(|s| {
                let n = config.stage_shape(s, grid);
                let labels = Array3::from_shape_fn(n, |_| rng.random_range(0..4usize));
                ArrayD::from_shape_fn(IxDyn(&[1, 4, n[0], n[1], n[2]]), |i| (labels[[i[2], i[3], i[4]]] == i[1]) as u8 as f64)
            })
            .collect();
        let loss = |m: &CascadeModel<f64>| -> (f64, Vec<Option<ArrayD<f64>>>) {
            let mut g = Graph::new(&m.store);
            let stages = m.forward_graph(&mut g, &input, &ForwardOptions::default()).unwrap();
            let mut total = None;
            for (s, v) in stages.iter().enumerate() {
                let l = dice_loss_var(&mut g, v.probs, &targets[s], DiceVariant::Standard, LossSpace::Classes).unwrap();
                total = Some(match total {
                    Some(t) => g.tape.add(t, l),
                    None => l,
                });
            }
            let total = total.unwrap();
            (g.value(total)[0], g.param_gradients(total))
        };
        let (_, grads) = loss(&model);
        let ids: Vec<crate::nn::ParamId> = model.store.ids().collect();
        let mut worst = 0.0f64;
        for (k, id) in ids.iter().enumerate() {
            let name = model.store.get(*id).name.clone();
            let grad = grads[k].as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
            let n = grad.len();
            for j in [0, n / 2, n - 1] {
                let h = 1e-5;
                let orig = model.store.value_mut(*id).as_slice_mut().unwrap()[j];
                model.store.value_mut(*id).as_slice_mut().unwrap()[j] = orig + h;
                let up = loss(&model).0;
                model.store.value_mut(*id).as_slice_mut().unwrap()[j] = orig - h;
                let down = loss(&model).0;
                model.store.value_mut(*id).as_slice_mut().unwrap()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grad.as_slice().unwrap()[j];
                let err = (fd - an).abs() / (1e-4 + fd.abs().max(an.abs()));
                assert!(err < 1e-3, "{name}[{j}]: analytic {an} vs numeric {fd}");
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-3);
    }
}
