//! Autoregressive channel-grouped entropy model.
//!
//! A latent with `G·K` channels is split into `G` groups of `K` channels. Each spatial
//! position of group `g` is predicted from every position of groups `< g`, from
//! raster-earlier positions of group `g` itself, and from an optional side
//! representation held in an extra *conditional* group that every coded element
//! may see in full. The constraint is enforced by masking the convolution kernels
//! of a stack of residual blocks; the network emits a Gaussian mean and scale per
//! latent element.
//!
//! Channel order at every layer is `[group 0 | group 1 | … | group G−1 | conditional]`,
//! with each group's span multiplied by the layer's width factor.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, LEAKY_SLOPE};
use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::gaussian::{self, SIGMA_MIN};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Array4, Shape4};

/// Channel grouping of a coded latent and its optional conditional group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    group_size: usize,
    channel_multiple: usize,
    num_groups: usize,
    conditional_channels: usize,
}

impl GroupLayout {
    pub fn new(latent_channels: usize, group_size: usize, channel_multiple: usize, conditional_channels: usize) -> Result<Self> {
        if group_size == 0 || channel_multiple == 0 {
            return Err(Error::Layout("group size and channel multiple must be positive".into()));
        }
        if latent_channels == 0 || latent_channels % group_size != 0 {
            return Err(Error::Layout(format!(
                "{latent_channels} latent channels do not split into groups of {group_size}"
            )));
        }
        if group_size % channel_multiple != 0 || conditional_channels % channel_multiple != 0 {
            return Err(Error::Layout(format!(
                "group size {group_size} and conditional width {conditional_channels} must be multiples of {channel_multiple}"
            )));
        }
        Ok(GroupLayout {
            group_size,
            channel_multiple,
            num_groups: latent_channels / group_size,
            conditional_channels,
        })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn channel_multiple(&self) -> usize {
        self.channel_multiple
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn latent_channels(&self) -> usize {
        self.num_groups * self.group_size
    }

    pub fn has_conditional_group(&self) -> bool {
        self.conditional_channels > 0
    }

    pub fn conditional_channels(&self) -> usize {
        self.conditional_channels
    }

    /// Channel plan of a layer whose group spans are `factor` times the base widths.
    pub fn scaled(&self, factor: usize) -> LayerChannels {
        LayerChannels {
            per_group: self.group_size * factor,
            conditional: self.conditional_channels * factor,
        }
    }

    fn check(&self, lc: LayerChannels) -> Result<()> {
        if lc.per_group == 0 || lc.per_group % self.channel_multiple != 0 || lc.conditional % self.channel_multiple != 0 {
            return Err(Error::Layout(format!(
                "layer spans {lc:?} are not positive multiples of M = {}",
                self.channel_multiple
            )));
        }
        if lc.per_group % self.group_size != 0 {
            return Err(Error::Layout(format!(
                "group span {} is not an integer multiple of K = {}",
                lc.per_group, self.group_size
            )));
        }
        if self.conditional_channels > 0 && lc.conditional > 0 && lc.conditional % self.conditional_channels != 0 {
            return Err(Error::Layout(format!(
                "conditional span {} does not rescale {} channels by an integer",
                lc.conditional, self.conditional_channels
            )));
        }
        Ok(())
    }

    pub fn total(&self, lc: LayerChannels) -> usize {
        self.num_groups * lc.per_group + lc.conditional
    }

    /// Group owning channel `ch` of a layer with plan `lc`.
    pub fn slot(&self, lc: LayerChannels, ch: usize) -> Slot {
        let coded = self.num_groups * lc.per_group;
        if ch < coded {
            Slot::Coded(ch / lc.per_group)
        } else {
            Slot::Conditional
        }
    }
}

/// Per-group channel spans of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerChannels {
    pub per_group: usize,
    pub conditional: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Coded(usize),
    Conditional,
}

/// Binary mask (`[out, in, k, k]`) for one masked convolution.
///
/// A coded output in group `g` sees every tap of groups `< g` and of the conditional
/// group, raster-earlier taps of group `g` (plus the centre tap when `first_layer` is
/// false), and nothing of later groups. Conditional outputs see only the conditional group.
pub fn build_group_mask(
    layout: &GroupLayout,
    kernel_size: usize,
    input: LayerChannels,
    output: LayerChannels,
    first_layer: bool,
) -> Result<Vec<f32>> {
    if kernel_size % 2 == 0 {
        return Err(Error::Layout(format!("kernel size {kernel_size} must be odd")));
    }
    layout.check(input)?;
    if output.per_group == 0 || output.per_group % layout.channel_multiple != 0 || output.conditional % layout.channel_multiple != 0 {
        return Err(Error::Layout(format!("output spans {output:?} are not multiples of M")));
    }
    if output.conditional > 0 && input.conditional == 0 {
        return Err(Error::Layout("conditional outputs need conditional inputs".into()));
    }
    let (cin, cout) = (layout.total(input), layout.total(output));
    let taps = kernel_size * kernel_size;
    let centre = taps / 2;
    let mut mask = vec![0.0f32; cout * cin * taps];
    for o in 0..cout {
        let os = layout.slot(output, o);
        for i in 0..cin {
            let is = layout.slot(input, i);
            let row = &mut mask[(o * cin + i) * taps..][..taps];
            match (os, is) {
                (Slot::Conditional, Slot::Conditional) | (Slot::Coded(_), Slot::Conditional) => row.fill(1.0),
                (Slot::Conditional, Slot::Coded(_)) => {}
                (Slot::Coded(go), Slot::Coded(gi)) if gi < go => row.fill(1.0),
                (Slot::Coded(go), Slot::Coded(gi)) if gi == go => {
                    // raster-earlier taps precede the centre in row-major kernel order
                    row[..centre].fill(1.0);
                    if !first_layer {
                        row[centre] = 1.0;
                    }
                }
                _ => {}
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyNetConfig {
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub expansion_factor: usize,
    pub group_size: usize,
    pub channel_multiple: usize,
}

impl Default for EntropyNetConfig {
    fn default() -> Self {
        EntropyNetConfig {
            num_blocks: 5,
            kernel_size: 3,
            expansion_factor: 2,
            group_size: 16,
            channel_multiple: 1,
        }
    }
}

impl EntropyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Contract(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if self.num_blocks == 0 || self.expansion_factor == 0 {
            return Err(Error::Contract("num_blocks and expansion_factor must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-element Gaussian means `W` and scales `Σ` (each `Σ ≥ σ_min`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub means: Array4,
    pub scales: Array4,
}

#[derive(Clone, Debug)]
struct MaskedConv {
    kernel: ParamId,
    bias: ParamId,
    geometry: ConvGeometry,
    mask: Arc<[f32]>,
}

impl MaskedConv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        layout: &GroupLayout,
        kernel_size: usize,
        input: LayerChannels,
        output: LayerChannels,
        first_layer: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mask = build_group_mask(layout, kernel_size, input, output, first_layer)?;
        let geometry = ConvGeometry::new(layout.total(output), layout.total(input), kernel_size, 1, kernel_size / 2);
        let kernel = store.add_kernel(format!("{name}.weight"), geometry.kernel_shape(), rng)?;
        store
            .value_mut(kernel)
            .data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(w, m)| *w *= m);
        let bias = store.add_vector(format!("{name}.bias"), geometry.out_channels, 0.0)?;
        Ok(MaskedConv {
            kernel,
            bias,
            geometry,
            mask: mask.into(),
        })
    }

    fn graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        g.conv(x, k, Some(b), self.geometry, Some(self.mask.clone()))
    }

    fn eval(&self, store: &ParamStore, x: &Array4) -> Result<Array4> {
        conv::conv2d_forward(
            x,
            &self.geometry,
            store.value(self.kernel).data(),
            Some(store.value(self.bias).data()),
            Some(&self.mask),
        )
    }
}

#[derive(Clone, Debug)]
struct Block {
    widen: MaskedConv,
    transform: MaskedConv,
    narrow: MaskedConv,
    /// Per-channel skip gains; absent on the first block, whose input is the raw latent.
    skip_gain: Option<ParamId>,
}

/// The masked-convolution entropy network. Parameters live in a [`ParamStore`]
/// under a name prefix; this struct holds their ids and the fixed masks.
#[derive(Clone, Debug)]
pub struct EntropyNet {
    layout: GroupLayout,
    config: EntropyNetConfig,
    blocks: Vec<Block>,
    head: MaskedConv,
}

#[inline]
fn leaky(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        v * LEAKY_SLOPE
    }
}

#[inline]
fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl EntropyNet {
    /// Register all parameters under `prefix` and return the network.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        latent_channels: usize,
        conditional_channels: usize,
        config: EntropyNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let layout = GroupLayout::new(latent_channels, config.group_size, config.channel_multiple, conditional_channels)?;
        let base = layout.scaled(1);
        let wide = layout.scaled(config.expansion_factor);
        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let first = b == 0;
            let name = format!("{prefix}.block{b}");
            let widen = MaskedConv::new(store, &format!("{name}.widen"), &layout, k, base, wide, first, rng)?;
            let transform = MaskedConv::new(store, &format!("{name}.transform"), &layout, k, wide, wide, false, rng)?;
            let narrow = MaskedConv::new(store, &format!("{name}.narrow"), &layout, k, wide, base, false, rng)?;
            let skip_gain = if first {
                None
            } else {
                Some(store.add_vector(format!("{name}.skip_gain"), layout.total(base), 1.0)?)
            };
            blocks.push(Block {
                widen,
                transform,
                narrow,
                skip_gain,
            });
        }
        let head_out = LayerChannels {
            per_group: 2 * layout.group_size(),
            conditional: 0,
        };
        let head = MaskedConv::new(store, &format!("{prefix}.head"), &layout, 1, base, head_out, false, rng)?;
        Ok(EntropyNet {
            layout,
            config,
            blocks,
            head,
        })
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn config(&self) -> &EntropyNetConfig {
        &self.config
    }

    fn check_inputs(&self, latent: Shape4, cond: Option<Shape4>) -> Result<()> {
        if latent.c != self.layout.latent_channels() {
            return Err(Error::dim(
                "predict_params",
                format!("latent {latent} has {} channels, layout expects {}", latent.c, self.layout.latent_channels()),
            ));
        }
        match (cond, self.layout.has_conditional_group()) {
            (Some(c), true) => {
                if (c.n, c.h, c.w) != (latent.n, latent.h, latent.w) || c.c != self.layout.conditional_channels() {
                    return Err(Error::dim(
                        "predict_params",
                        format!("conditional {c} is not co-located with latent {latent}"),
                    ));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Contract("network has no conditional group".into())),
            (None, true) => return Err(Error::Contract("network requires a conditional input".into())),
        }
        Ok(())
    }

    /// Teacher-forced prediction inside a training graph.
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        latent: NodeId,
        cond: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        self.check_inputs(g.value(latent).shape(), cond.map(|c| g.value(c).shape()))?;
        let mut h = match cond {
            Some(c) => g.concat(&[latent, c])?,
            None => latent,
        };
        for block in &self.blocks {
            let mut t = block.widen.graph(g, store, h)?;
            t = g.leaky_relu(t);
            t = block.transform.graph(g, store, t)?;
            t = g.leaky_relu(t);
            t = block.narrow.graph(g, store, t)?;
            h = match block.skip_gain {
                Some(gain) => {
                    let gv = g.param(store, gain);
                    let skip = g.channel_gain(h, gv)?;
                    g.add(t, skip)?
                }
                None => t,
            };
        }
        let out = self.head.graph(g, store, h)?;
        let k = self.layout.group_size();
        let mut means = Vec::with_capacity(self.layout.num_groups());
        let mut raws = Vec::with_capacity(self.layout.num_groups());
        for grp in 0..self.layout.num_groups() {
            means.push(g.slice_channels(out, grp * 2 * k, k)?);
            raws.push(g.slice_channels(out, grp * 2 * k + k, k)?);
        }
        let means = if means.len() == 1 { means[0] } else { g.concat(&means)? };
        let raw = if raws.len() == 1 { raws[0] } else { g.concat(&raws)? };
        let sp = g.softplus(raw);
        let scales = g.clamp_min(sp, SIGMA_MIN);
        Ok((means, scales))
    }

    /// Features entering the head, channel order `[groups… | conditional]`.
    /// The conditional slice depends on the conditional input alone.
    pub fn trunk(&self, store: &ParamStore, latent: &Array4, cond: Option<&Array4>) -> Result<Array4> {
        self.check_inputs(latent.shape(), cond.map(|c| c.shape()))?;
        let mut h = match cond {
            Some(c) => concat_channels(latent, c),
            None => latent.clone(),
        };
        for block in &self.blocks {
            let mut t = block.widen.eval(store, &h)?;
            t.data_mut().iter_mut().for_each(|v| *v = leaky(*v));
            t = block.transform.eval(store, &t)?;
            t.data_mut().iter_mut().for_each(|v| *v = leaky(*v));
            t = block.narrow.eval(store, &t)?;
            if let Some(gain) = block.skip_gain {
                let gv = store.value(gain).data();
                let s = h.shape();
                let plane = s.plane();
                for (i, (tv, hv)) in t.data_mut().iter_mut().zip(h.data()).enumerate() {
                    *tv += hv * gv[(i / plane) % s.c];
                }
            }
            h = t;
        }
        Ok(h)
    }

    /// Inference without recording a graph. Bit-identical to [`EntropyNet::predict_graph`].
    pub fn predict(&self, store: &ParamStore, latent: &Array4, cond: Option<&Array4>) -> Result<GaussianParams> {
        let h = self.trunk(store, latent, cond)?;
        let out = self.head.eval(store, &h)?;
        let s = latent.shape();
        let k = self.layout.group_size();
        let mut means = Array4::zeros(s);
        let mut scales = Array4::zeros(s);
        let plane = s.plane();
        for b in 0..s.n {
            for c in 0..s.c {
                let (grp, j) = (c / k, c % k);
                let src_m = &out.data()[((b * out.shape().c) + grp * 2 * k + j) * plane..][..plane];
                let src_s = &out.data()[((b * out.shape().c) + grp * 2 * k + k + j) * plane..][..plane];
                let dst = (b * s.c + c) * plane;
                means.data_mut()[dst..dst + plane].copy_from_slice(src_m);
                for (d, &r) in scales.data_mut()[dst..dst + plane].iter_mut().zip(src_s) {
                    *d = softplus(r).max(SIGMA_MIN);
                }
            }
        }
        Ok(GaussianParams { means, scales })
    }

    /// Bind to a parameter store for use as a coding model.
    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundEntropyNet<'a> {
        BoundEntropyNet { net: self, store }
    }
}

fn concat_channels(a: &Array4, b: &Array4) -> Array4 {
    let (sa, sb) = (a.shape(), b.shape());
    let shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.item()..(n + 1) * sa.item()]);
        data.extend_from_slice(&b.data()[n * sb.item()..(n + 1) * sb.item()]);
    }
    Array4::from_vec(shape, data).expect("sizes add up")
}

/// Anything that can predict Gaussian parameters for a latent in group/raster order.
pub trait ContextModel {
    fn layout(&self) -> &GroupLayout;
    fn predict(&self, latent: &Array4, cond: Option<&Array4>) -> Result<GaussianParams>;
}

#[derive(Clone, Copy)]
pub struct BoundEntropyNet<'a> {
    net: &'a EntropyNet,
    store: &'a ParamStore,
}

impl ContextModel for BoundEntropyNet<'_> {
    fn layout(&self) -> &GroupLayout {
        &self.net.layout
    }

    fn predict(&self, latent: &Array4, cond: Option<&Array4>) -> Result<GaussianParams> {
        self.net.predict(self.store, latent, cond)
    }
}

/// Training-time quantization proxy: `y + u`, `u ~ U(−½, ½)` i.i.d.
pub fn add_uniform_noise(latent: &Array4, rng: &mut impl Rng) -> Array4 {
    latent.map(|v| v + rng.gen_range(-0.5f32..0.5))
}

/// The noise tensor alone, for use as a graph input.
pub fn uniform_noise(shape: Shape4, rng: &mut impl Rng) -> Array4 {
    Array4::from_fn(shape, |_, _, _, _| rng.gen_range(-0.5f32..0.5))
}

/// Total estimated codelength (bits) of `latent` under `params`.
pub fn estimate_bits(latent: &Array4, params: &GaussianParams) -> Result<f64> {
    if latent.shape() != params.means.shape() || latent.shape() != params.scales.shape() {
        return Err(Error::dim(
            "estimate_bits",
            format!("latent {} vs params {}", latent.shape(), params.means.shape()),
        ));
    }
    Ok(latent
        .data()
        .iter()
        .zip(params.means.data())
        .zip(params.scales.data())
        .map(|((&y, &w), &s)| gaussian::bits(y as f64 - w as f64, s as f64))
        .sum())
}
