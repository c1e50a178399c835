//! Base task codec and the three enhancement codecs built on it.
//!
//! * base: `Y_b = f_b(X)`, task logits `g_b(Ŷ_b)`, auxiliary reconstruction `ĥ_r(Ŷ_b)`
//! * conditional: `Y_c = f_e(X)` coded under the entropy model with `Y_t = h_c(Ŷ_b)`
//!   in its conditional group, `X̂ = g_e(Ŷ_c)`
//! * residual: `X_p = h_r(Ŷ_b)`, `Y_r = f_e(X − X_p)`, `X̂ = g_e(Ŷ_r) + X_p`
//! * standalone: `Y_e = f_e(X)`, `X̂ = g_e(Ŷ_e)`, no side information
//!
//! Training graphs use `Y + U(−½, ½)` in place of `Ŷ`; coding and evaluation use
//! `Ŷ = Q + W` from the sequential quantizer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::bitstream::{Bitstream, Layer, LayerKind};
use crate::conv::ConvGeometry;
use crate::entropy_model::{uniform_noise, EntropyNet, EntropyNetConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::range_coder::{decode_latent, encode_latent, CodedLatent};
use crate::tensor::{Array4, Shape4};

pub const ANALYSIS_WIDTHS: [usize; 3] = [24, 48, 192];
pub const SYNTHESIS_WIDTHS: [usize; 3] = [192, 48, 24];
/// Spatial down-scaling from image to latent.
pub const LATENT_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Conditional,
    Residual,
    Standalone,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Conditional, Mode::Residual, Mode::Standalone];

    pub fn layer_kind(self) -> LayerKind {
        match self {
            Mode::Conditional => LayerKind::Conditional,
            Mode::Residual => LayerKind::Residual,
            Mode::Standalone => LayerKind::Standalone,
        }
    }

    pub fn name(self) -> &'static str {
        self.layer_kind().name()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(Mode::Conditional),
            "residual" => Ok(Mode::Residual),
            "standalone" => Ok(Mode::Standalone),
            other => Err(Error::Contract(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub base_channels: usize,
    pub enh_channels: usize,
    pub image_channels: usize,
    pub palette: usize,
    pub lambda_b: f64,
    pub lambda_e: f64,
    pub lambda_r: f64,
    pub beta: f64,
    pub entropy: EntropyNetConfig,
    /// Residual blocks in `h_c`; the first half keep the base width.
    pub hc_blocks: usize,
    pub hc_expansion: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            base_channels: 32,
            enh_channels: 256,
            image_channels: 3,
            palette: 8,
            lambda_b: 0.01,
            lambda_e: 0.01,
            lambda_r: 0.01,
            beta: 0.1,
            entropy: EntropyNetConfig::default(),
            hc_blocks: 4,
            hc_expansion: 2,
        }
    }
}

impl PipelineConfig {
    /// Reduced enhancement width and entropy depth for quick CPU runs.
    pub fn tiny() -> Self {
        PipelineConfig {
            enh_channels: 64,
            entropy: EntropyNetConfig {
                num_blocks: 2,
                ..EntropyNetConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_b", self.lambda_b),
            ("lambda_e", self.lambda_e),
            ("lambda_r", self.lambda_r),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Contract(format!("{name} = {v} must be a finite non-negative weight")));
            }
        }
        if self.base_channels == 0 || self.enh_channels == 0 || self.image_channels == 0 || self.palette < 2 {
            return Err(Error::Contract("channel counts must be positive and palette ≥ 2".into()));
        }
        if self.hc_blocks < 2 || self.hc_expansion == 0 {
            return Err(Error::Contract("h_c needs at least 2 blocks and a positive expansion".into()));
        }
        self.entropy.validate()
    }

    /// Rate weight of an enhancement mode.
    pub fn rate_weight(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Residual => self.lambda_r,
            Mode::Conditional | Mode::Standalone => self.lambda_e,
        }
    }

    pub fn set_rate_weight(&mut self, mode: Mode, lambda: f64) {
        match mode {
            Mode::Residual => self.lambda_r = lambda,
            Mode::Conditional | Mode::Standalone => self.lambda_e = lambda,
        }
    }
}

/// Loss terms of one forward pass. `total = distortion + λ·rate_bpp + auxiliary`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub distortion: f64,
    pub rate_bits: f64,
    pub rate_bpp: f64,
    /// Already multiplied by β.
    pub auxiliary: f64,
    pub total: f64,
}

fn check_image(x: Shape4, channels: usize) -> Result<()> {
    if x.c != channels || x.h == 0 || x.w == 0 || x.h % LATENT_STRIDE != 0 || x.w % LATENT_STRIDE != 0 {
        return Err(Error::dim(
            "pipeline input",
            format!("image {x} must have {channels} channels and sides that are positive multiples of {LATENT_STRIDE}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    geometry: ConvGeometry,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, name: &str, geometry: ConvGeometry, rng: &mut impl Rng) -> Result<Self> {
        Ok(ConvLayer {
            kernel: store.add_kernel(format!("{name}.weight"), geometry.kernel_shape(), rng)?,
            bias: store.add_vector(format!("{name}.bias"), geometry.out_channels, 0.0)?,
            geometry,
        })
    }

    /// Zero kernel and bias, so the layer starts as the zero map.
    fn zeros(store: &mut ParamStore, name: &str, geometry: ConvGeometry) -> Result<Self> {
        Ok(ConvLayer {
            kernel: store.add(format!("{name}.weight"), Array4::zeros(geometry.kernel_shape()))?,
            bias: store.add_vector(format!("{name}.bias"), geometry.out_channels, 0.0)?,
            geometry,
        })
    }

    fn graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId, transposed: bool) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        if transposed {
            g.transposed_conv(x, k, Some(b), self.geometry, None)
        } else {
            g.conv(x, k, Some(b), self.geometry, None)
        }
    }
}

/// Four stride-2 stages: strided convolutions (analysis) or transposed convolutions (synthesis).
#[derive(Clone, Debug)]
pub struct Transform {
    layers: Vec<ConvLayer>,
    transposed: bool,
}

impl Transform {
    pub fn analysis(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = input;
        for (i, cout) in ANALYSIS_WIDTHS.into_iter().chain([output]).enumerate() {
            layers.push(ConvLayer::new(store, &format!("{prefix}.{i}"), ConvGeometry::new(cout, cin, 5, 2, 2), rng)?);
            cin = cout;
        }
        Ok(Transform {
            layers,
            transposed: false,
        })
    }

    pub fn synthesis(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = input;
        for (i, cout) in SYNTHESIS_WIDTHS.into_iter().chain([output]).enumerate() {
            layers.push(ConvLayer::new(store, &format!("{prefix}.{i}"), ConvGeometry::new(cout, cin, 4, 2, 1), rng)?);
            cin = cout;
        }
        Ok(Transform {
            layers,
            transposed: true,
        })
    }

    pub fn graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.graph(g, store, h, self.transposed)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h);
            }
        }
        Ok(h)
    }

    pub fn eval(&self, store: &ParamStore, x: &Array4) -> Result<Array4> {
        let mut g = Graph::new();
        let i = g.input(x.clone());
        let o = self.graph(&mut g, store, i)?;
        Ok(g.value(o).clone())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    widen: ConvLayer,
    transform: ConvLayer,
    narrow: ConvLayer,
    projection: Option<ConvLayer>,
}

/// `h_c`: residual blocks of three 3×3 convolutions (widen, transform, narrow).
/// The first half keep the base width, the second half move to the enhancement width.
/// Each `narrow` layer and the width projection start at zero, so every block starts
/// as its skip path. When the widths differ, a fresh `h_c` therefore outputs `Y_t ≡ 0`
/// and the conditional model starts out unconditioned.
#[derive(Clone, Debug)]
pub struct ConditioningNet {
    blocks: Vec<ResBlock>,
}

impl ConditioningNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        num_blocks: usize,
        expansion: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(num_blocks);
        let mut cin = input;
        for b in 0..num_blocks {
            let cout = if b < num_blocks / 2 { input } else { output };
            let wide = cout * expansion;
            let name = format!("{prefix}.{b}");
            let conv3 = |o, i| ConvGeometry::new(o, i, 3, 1, 1);
            let widen = ConvLayer::new(store, &format!("{name}.widen"), conv3(wide, cin), rng)?;
            let transform = ConvLayer::new(store, &format!("{name}.transform"), conv3(wide, wide), rng)?;
            let narrow = ConvLayer::zeros(store, &format!("{name}.narrow"), conv3(cout, wide))?;
            let projection = if cin != cout {
                Some(ConvLayer::zeros(store, &format!("{name}.projection"), ConvGeometry::new(cout, cin, 1, 1, 0))?)
            } else {
                None
            };
            blocks.push(ResBlock {
                widen,
                transform,
                narrow,
                projection,
            });
            cin = cout;
        }
        Ok(ConditioningNet { blocks })
    }

    pub fn graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for block in &self.blocks {
            let mut t = block.widen.graph(g, store, h, false)?;
            t = g.leaky_relu(t);
            t = block.transform.graph(g, store, t, false)?;
            t = g.leaky_relu(t);
            t = block.narrow.graph(g, store, t, false)?;
            let skip = match &block.projection {
                Some(p) => p.graph(g, store, h, false)?,
                None => h,
            };
            h = g.add(t, skip)?;
        }
        Ok(h)
    }

    pub fn eval(&self, store: &ParamStore, x: &Array4) -> Result<Array4> {
        let mut g = Graph::new();
        let i = g.input(x.clone());
        let o = self.graph(&mut g, store, i)?;
        Ok(g.value(o).clone())
    }
}

/// Per-pixel toy task classes: luma half (2) × hue quadrant (4).
pub fn palette_targets(x: &Array4) -> Result<Vec<u8>> {
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::dim("palette_targets", format!("need RGB input, got {s}")));
    }
    let mut out = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let (r, g, b) = (x.get(n, 0, y, xx), x.get(n, 1, y, xx), x.get(n, 2, y, xx));
                let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                let hue = (3f32.sqrt() * (g - b)).atan2(2.0 * r - g - b);
                let hue = if hue < 0.0 { hue + std::f32::consts::TAU } else { hue };
                let quadrant = ((hue / std::f32::consts::FRAC_PI_2) as u8).min(3);
                out.push(u8::from(luma >= 0.5) * 4 + quadrant);
            }
        }
    }
    Ok(out)
}

fn noise_for(g: &Graph, y: NodeId, rng: Option<&mut ChaCha8Rng>) -> Option<Array4> {
    rng.map(|r| uniform_noise(g.value(y).shape(), r))
}

fn rate_bpp(bits: f64, image: Shape4) -> f64 {
    bits / (image.n * image.plane()) as f64
}

/// Base task codec: analysis, entropy model, task head and auxiliary reconstruction.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub store: ParamStore,
    pub config: PipelineConfig,
    analysis: Transform,
    task_head: Transform,
    aux: Transform,
    entropy: EntropyNet,
}

#[derive(Clone, Copy, Debug)]
pub struct BaseForward {
    pub latent: NodeId,
    pub logits: NodeId,
    pub aux_reconstruction: NodeId,
    pub loss: NodeId,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct BaseEval {
    pub coded: CodedLatent,
    pub logits: Array4,
    pub aux_reconstruction: Array4,
    pub report: LossReport,
}

impl BaseModel {
    pub fn new(config: &PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let analysis = Transform::analysis(&mut store, "f", c.image_channels, c.base_channels, &mut rng)?;
        let task_head = Transform::synthesis(&mut store, "g_task", c.base_channels, c.palette, &mut rng)?;
        let aux = Transform::synthesis(&mut store, "aux", c.base_channels, c.image_channels, &mut rng)?;
        let entropy = EntropyNet::new(&mut store, "em", c.base_channels, 0, c.entropy, &mut rng)?;
        Ok(BaseModel {
            store,
            config: config.clone(),
            analysis,
            task_head,
            aux,
            entropy,
        })
    }

    pub fn entropy(&self) -> &EntropyNet {
        &self.entropy
    }

    /// Training-graph forward; `rng` supplies the quantization noise (`None` leaves `Y_b` unperturbed).
    pub fn forward(&self, g: &mut Graph, x: NodeId, targets: &Arc<[u8]>, rng: Option<&mut ChaCha8Rng>) -> Result<BaseForward> {
        let xs = g.value(x).shape();
        check_image(xs, self.config.image_channels)?;
        let s = &self.store;
        let y = self.analysis.graph(g, s, x)?;
        let y_tilde = match noise_for(g, y, rng) {
            Some(n) => {
                let n = g.input(n);
                g.add(y, n)?
            }
            None => y,
        };
        let (mean, scale) = self.entropy.predict_graph(g, s, y_tilde, None)?;
        let bits = g.gaussian_bits(y_tilde, mean, scale)?;
        let logits = self.task_head.graph(g, s, y_tilde)?;
        let aux = self.aux.graph(g, s, y_tilde)?;
        let ce = g.cross_entropy(logits, targets.clone())?;
        let aux_err = g.rmse(aux, x)?;
        let pixels = (xs.n * xs.plane()) as f64;
        let rate = g.scale(bits, (self.config.lambda_b / pixels) as f32);
        let aux_term = g.scale(aux_err, self.config.beta as f32);
        let partial = g.add(ce, rate)?;
        let loss = g.add(partial, aux_term)?;
        let distortion = g.scalar(ce) as f64;
        let rate_bits = g.scalar(bits) as f64;
        let auxiliary = self.config.beta * g.scalar(aux_err) as f64;
        let bpp = rate_bpp(rate_bits, xs);
        Ok(BaseForward {
            latent: y,
            logits,
            aux_reconstruction: aux,
            loss,
            report: LossReport {
                distortion,
                rate_bits,
                rate_bpp: bpp,
                auxiliary,
                total: distortion + self.config.lambda_b * bpp + auxiliary,
            },
        })
    }

    pub fn analyze(&self, x: &Array4) -> Result<Array4> {
        check_image(x.shape(), self.config.image_channels)?;
        self.analysis.eval(&self.store, x)
    }

    /// Quantize and code the base latent of a single image.
    pub fn code(&self, x: &Array4) -> Result<CodedLatent> {
        let y = self.analyze(x)?;
        encode_latent(&self.entropy.bind(&self.store), &y, None)
    }

    pub fn task_logits(&self, base_hat: &Array4) -> Result<Array4> {
        self.task_head.eval(&self.store, base_hat)
    }

    /// Loss terms on the quantized latent (rate is the coder's estimate at `Ŷ_b`).
    pub fn evaluate(&self, x: &Array4, targets: &Arc<[u8]>) -> Result<BaseEval> {
        let coded = self.code(x)?;
        let y_hat = &coded.reconstruction;
        let params = self.entropy.predict(&self.store, y_hat, None)?;
        let rate_bits = crate::entropy_model::estimate_bits(y_hat, &params)?;
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let yi = g.input(y_hat.clone());
        let logits = self.task_head.graph(&mut g, &self.store, yi)?;
        let aux = self.aux.graph(&mut g, &self.store, yi)?;
        let ce = g.cross_entropy(logits, targets.clone())?;
        let aux_err = g.rmse(aux, xi)?;
        let distortion = g.scalar(ce) as f64;
        let auxiliary = self.config.beta * g.scalar(aux_err) as f64;
        let bpp = rate_bpp(rate_bits, x.shape());
        Ok(BaseEval {
            logits: g.value(logits).clone(),
            aux_reconstruction: g.value(aux).clone(),
            report: LossReport {
                distortion,
                rate_bits,
                rate_bpp: bpp,
                auxiliary,
                total: distortion + self.config.lambda_b * bpp + auxiliary,
            },
            coded,
        })
    }
}

/// Enhancement codec for one of the three modes.
#[derive(Clone, Debug)]
pub struct EnhancementModel {
    pub store: ParamStore,
    pub config: PipelineConfig,
    mode: Mode,
    analysis: Transform,
    synthesis: Transform,
    entropy: EntropyNet,
    conditioning: Option<ConditioningNet>,
    predictor: Option<Transform>,
}

#[derive(Clone, Copy, Debug)]
pub struct EnhForward {
    pub latent: NodeId,
    /// `Y_t` (conditional mode).
    pub side_latent: Option<NodeId>,
    /// `X_p` (residual mode).
    pub prediction: Option<NodeId>,
    /// `X_r` (residual mode).
    pub residual: Option<NodeId>,
    pub reconstruction: NodeId,
    pub loss: NodeId,
    pub report: LossReport,
}

/// Decoder-side information derived from `Ŷ_b`.
#[derive(Clone, Debug, Default)]
pub struct SideInfo {
    pub side_latent: Option<Array4>,
    pub prediction: Option<Array4>,
}

#[derive(Clone, Debug)]
pub struct EnhEval {
    pub coded: CodedLatent,
    pub reconstruction: Array4,
    pub report: LossReport,
}

impl EnhancementModel {
    pub fn new(config: &PipelineConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let analysis = Transform::analysis(&mut store, "f", c.image_channels, c.enh_channels, &mut rng)?;
        let synthesis = Transform::synthesis(&mut store, "g", c.enh_channels, c.image_channels, &mut rng)?;
        let cond = if mode == Mode::Conditional { c.enh_channels } else { 0 };
        let entropy = EntropyNet::new(&mut store, "em", c.enh_channels, cond, c.entropy, &mut rng)?;
        let conditioning = match mode {
            Mode::Conditional => Some(ConditioningNet::new(
                &mut store,
                "h_c",
                c.base_channels,
                c.enh_channels,
                c.hc_blocks,
                c.hc_expansion,
                &mut rng,
            )?),
            _ => None,
        };
        let predictor = match mode {
            Mode::Residual => Some(Transform::synthesis(&mut store, "h_r", c.base_channels, c.image_channels, &mut rng)?),
            _ => None,
        };
        Ok(EnhancementModel {
            store,
            config: config.clone(),
            mode,
            analysis,
            synthesis,
            entropy,
            conditioning,
            predictor,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn entropy(&self) -> &EntropyNet {
        &self.entropy
    }

    fn check_base(&self, x: Shape4, base: Shape4) -> Result<()> {
        if base.n != x.n || base.c != self.config.base_channels || base.h * LATENT_STRIDE != x.h || base.w * LATENT_STRIDE != x.w {
            return Err(Error::dim("enhancement", format!("base latent {base} does not belong to image {x}")));
        }
        Ok(())
    }

    /// Training-graph forward. `base_latent` is detached before use; standalone mode ignores it.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        base_latent: Option<NodeId>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EnhForward> {
        let xs = g.value(x).shape();
        check_image(xs, self.config.image_channels)?;
        let s = &self.store;
        let base = match (self.mode, base_latent) {
            (Mode::Standalone, _) => None,
            (_, Some(b)) => {
                self.check_base(xs, g.value(b).shape())?;
                Some(g.detach(b))
            }
            (mode, None) => return Err(Error::Contract(format!("{mode} mode needs the base latent"))),
        };
        let (mut side_latent, mut prediction, mut residual) = (None, None, None);
        let coded_input = match (&self.predictor, base) {
            (Some(h_r), Some(b)) => {
                let xp = h_r.graph(g, s, b)?;
                let xr = g.sub(x, xp)?;
                prediction = Some(xp);
                residual = Some(xr);
                xr
            }
            _ => x,
        };
        let y = self.analysis.graph(g, s, coded_input)?;
        let y_tilde = match noise_for(g, y, rng) {
            Some(n) => {
                let n = g.input(n);
                g.add(y, n)?
            }
            None => y,
        };
        if let (Some(h_c), Some(b)) = (&self.conditioning, base) {
            side_latent = Some(h_c.graph(g, s, b)?);
        }
        let (mean, scale) = self.entropy.predict_graph(g, s, y_tilde, side_latent)?;
        let bits = g.gaussian_bits(y_tilde, mean, scale)?;
        let mut x_hat = self.synthesis.graph(g, s, y_tilde)?;
        if let Some(xp) = prediction {
            x_hat = g.add(x_hat, xp)?;
        }
        let dist = g.rmse(x_hat, x)?;
        let lambda = self.config.rate_weight(self.mode);
        let pixels = (xs.n * xs.plane()) as f64;
        let rate = g.scale(bits, (lambda / pixels) as f32);
        let loss = g.add(dist, rate)?;
        let distortion = g.scalar(dist) as f64;
        let rate_bits = g.scalar(bits) as f64;
        let bpp = rate_bpp(rate_bits, xs);
        Ok(EnhForward {
            latent: y,
            side_latent,
            prediction,
            residual,
            reconstruction: x_hat,
            loss,
            report: LossReport {
                distortion,
                rate_bits,
                rate_bpp: bpp,
                auxiliary: 0.0,
                total: distortion + lambda * bpp,
            },
        })
    }

    /// `Y_t` and/or `X_p` from a decoded base latent.
    pub fn side_info(&self, base_hat: Option<&Array4>) -> Result<SideInfo> {
        let need = |b: Option<&Array4>| -> Result<Array4> {
            b.cloned()
                .ok_or_else(|| Error::Contract(format!("{} mode needs the base latent", self.mode)))
        };
        Ok(SideInfo {
            side_latent: match &self.conditioning {
                Some(h_c) => Some(h_c.eval(&self.store, &need(base_hat)?)?),
                None => None,
            },
            prediction: match &self.predictor {
                Some(h_r) => Some(h_r.eval(&self.store, &need(base_hat)?)?),
                None => None,
            },
        })
    }

    /// Latent to be coded: `f_e(X)` or `f_e(X − X_p)`.
    pub fn analyze(&self, x: &Array4, side: &SideInfo) -> Result<Array4> {
        check_image(x.shape(), self.config.image_channels)?;
        match &side.prediction {
            Some(xp) => {
                let xr = Array4::from_vec(x.shape(), x.data().iter().zip(xp.data()).map(|(a, b)| a - b).collect())?;
                self.analysis.eval(&self.store, &xr)
            }
            None => self.analysis.eval(&self.store, x),
        }
    }

    pub fn reconstruct(&self, latent_hat: &Array4, side: &SideInfo) -> Result<Array4> {
        let mut out = self.synthesis.eval(&self.store, latent_hat)?;
        if let Some(xp) = &side.prediction {
            out.data_mut().iter_mut().zip(xp.data()).for_each(|(o, p)| *o += p);
        }
        Ok(out)
    }

    pub fn code(&self, x: &Array4, side: &SideInfo) -> Result<CodedLatent> {
        let y = self.analyze(x, side)?;
        encode_latent(&self.entropy.bind(&self.store), &y, side.side_latent.as_ref())
    }

    pub fn decode(&self, payload: &[u8], shape: Shape4, side: &SideInfo) -> Result<Array4> {
        let (_, y_hat) = decode_latent(&self.entropy.bind(&self.store), payload, shape, side.side_latent.as_ref())?;
        Ok(y_hat)
    }

    /// Loss terms on the quantized latent for a single image and its decoded base latent.
    pub fn evaluate(&self, x: &Array4, base_hat: Option<&Array4>) -> Result<EnhEval> {
        if let Some(b) = base_hat {
            self.check_base(x.shape(), b.shape())?;
        }
        let side = self.side_info(base_hat)?;
        let coded = self.code(x, &side)?;
        let params = self.entropy.predict(&self.store, &coded.reconstruction, side.side_latent.as_ref())?;
        let rate_bits = crate::entropy_model::estimate_bits(&coded.reconstruction, &params)?;
        let reconstruction = self.reconstruct(&coded.reconstruction, &side)?;
        let distortion = rmse(&reconstruction, x);
        let lambda = self.config.rate_weight(self.mode);
        let bpp = rate_bpp(rate_bits, x.shape());
        Ok(EnhEval {
            coded,
            reconstruction,
            report: LossReport {
                distortion,
                rate_bits,
                rate_bpp: bpp,
                auxiliary: 0.0,
                total: distortion + lambda * bpp,
            },
        })
    }
}

/// Root-mean-square difference, accumulated in double precision.
pub fn rmse(a: &Array4, b: &Array4) -> f64 {
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    (sq / a.len().max(1) as f64).sqrt()
}

fn latent_layer(kind: LayerKind, latent: Shape4, payload: Vec<u8>) -> Result<Layer> {
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::Contract(format!("latent size {v} exceeds 16 bits")));
    Ok(Layer {
        kind,
        channels: dim(latent.c)?,
        height: dim(latent.h)?,
        width: dim(latent.w)?,
        payload,
    })
}

#[derive(Clone, Debug)]
pub struct ScalableEncoding {
    pub stream: Bitstream,
    pub base: CodedLatent,
    pub enhancement: Option<CodedLatent>,
    pub logits: Array4,
    pub reconstruction: Option<Array4>,
}

#[derive(Clone, Debug)]
pub struct ScalableDecoding {
    pub base_latent: Array4,
    pub logits: Array4,
    pub reconstruction: Option<Array4>,
}

/// Code one image: the base layer, then optionally one enhancement layer.
pub fn encode_scalable(x: &Array4, base: &BaseModel, enh: Option<&EnhancementModel>) -> Result<ScalableEncoding> {
    if x.shape().n != 1 {
        return Err(Error::dim("encode_scalable", format!("expected one image, got {}", x.shape())));
    }
    let base_coded = base.code(x)?;
    let logits = base.task_logits(&base_coded.reconstruction)?;
    let mut layers = vec![latent_layer(LayerKind::Base, base_coded.symbols.shape, base_coded.payload.clone())?];
    let (mut enhancement, mut reconstruction) = (None, None);
    if let Some(e) = enh {
        let side = e.side_info(Some(&base_coded.reconstruction))?;
        let coded = e.code(x, &side)?;
        reconstruction = Some(e.reconstruct(&coded.reconstruction, &side)?);
        layers.push(latent_layer(e.mode().layer_kind(), coded.symbols.shape, coded.payload.clone())?);
        enhancement = Some(coded);
    }
    Ok(ScalableEncoding {
        stream: Bitstream { layers },
        base: base_coded,
        enhancement,
        logits,
        reconstruction,
    })
}

fn layer_shape(l: &Layer) -> Shape4 {
    Shape4::new(1, l.channels as usize, l.height as usize, l.width as usize)
}

/// Decode the base layer and, when both the stream and `enh` provide one, the enhancement layer.
pub fn decode_scalable(stream: &Bitstream, base: &BaseModel, enh: Option<&EnhancementModel>) -> Result<ScalableDecoding> {
    let first = stream
        .layers
        .first()
        .ok_or_else(|| Error::Format("stream holds no layers".into()))?;
    if first.kind != LayerKind::Base {
        return Err(Error::Format(format!("first layer is {}, expected base", first.kind.name())));
    }
    if first.channels as usize != base.config.base_channels {
        return Err(Error::Format(format!(
            "base layer has {} channels, model expects {}",
            first.channels, base.config.base_channels
        )));
    }
    if stream.layers.len() > 2 {
        return Err(Error::Format(format!("{} layers; at most two are supported", stream.layers.len())));
    }
    let (_, base_latent) = decode_latent(&base.entropy.bind(&base.store), &first.payload, layer_shape(first), None)?;
    let logits = base.task_logits(&base_latent)?;
    let mut reconstruction = None;
    if let (Some(layer), Some(e)) = (stream.layers.get(1), enh) {
        if layer.kind != e.mode().layer_kind() {
            return Err(Error::Format(format!(
                "stream carries a {} layer but the model is {}",
                layer.kind.name(),
                e.mode()
            )));
        }
        if layer.channels as usize != e.config.enh_channels || (layer.height, layer.width) != (first.height, first.width) {
            return Err(Error::Format("enhancement layer dimensions do not match the model".into()));
        }
        let side = e.side_info(Some(&base_latent))?;
        let y_hat = e.decode(&layer.payload, layer_shape(layer), &side)?;
        reconstruction = Some(e.reconstruct(&y_hat, &side)?);
    }
    Ok(ScalableDecoding {
        base_latent,
        logits,
        reconstruction,
    })
}
