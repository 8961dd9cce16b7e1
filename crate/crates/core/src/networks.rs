//! The four adversarial architectures as forward graphs over [`Ctx`].
//!
//! Capsule tensors are laid out `[batch x count x dim]`; the architecture
//! tables print the same cells as `dim x count`.

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::capsule::{caps_to_feature_map, mask_by_norm, primary_caps, CapsuleLayer, DEFAULT_ROUTING_ITERS};
use crate::error::{Error, Result};
use crate::nn::{dropout, Bound, BatchNorm, Conv2d, ConvTranspose2d, Ctx, Dense, Init, ParamId, ParamSet};

pub const IMAGE_SIZE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchitectureId {
    Dcgan,
    CapsGan1,
    CapsGan2,
    CapsGan3,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] =
        [ArchitectureId::Dcgan, ArchitectureId::CapsGan1, ArchitectureId::CapsGan2, ArchitectureId::CapsGan3];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureId::Dcgan => "dcgan",
            ArchitectureId::CapsGan1 => "capsgan1",
            ArchitectureId::CapsGan2 => "capsgan2",
            ArchitectureId::CapsGan3 => "capsgan3",
        }
    }

    pub fn default_latent(self) -> usize {
        match self {
            ArchitectureId::CapsGan3 => 128,
            _ => 100,
        }
    }

    pub fn capsule_discriminator(self) -> bool {
        self != ArchitectureId::Dcgan
    }

    /// Whether the generator consumes masked DigitCaps from real images.
    pub fn needs_digitcaps(self) -> bool {
        self == ArchitectureId::CapsGan2
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchitectureId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown architecture {s:?}")))
    }
}

/// Layer widths: the published sizes, or a tiny variant for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Full,
    Small,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Small => "small",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "small" => Ok(Scale::Small),
            _ => Err(Error::Usage(format!("unknown scale {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: ArchitectureId,
    pub scale: Scale,
    pub routing_iters: usize,
    pub latent: usize,
    pub image_size: usize,
}

impl ModelConfig {
    pub fn new(arch: ArchitectureId) -> Self {
        ModelConfig {
            arch,
            scale: Scale::Full,
            routing_iters: DEFAULT_ROUTING_ITERS,
            latent: arch.default_latent(),
            image_size: IMAGE_SIZE,
        }
    }

    pub fn small(arch: ArchitectureId) -> Self {
        let latent = if arch == ArchitectureId::CapsGan3 { SMALL_GEN3.latent() } else { 6 };
        ModelConfig { scale: Scale::Small, latent, ..Self::new(arch) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size != IMAGE_SIZE {
            return Err(Error::Usage(format!(
                "only {IMAGE_SIZE}x{IMAGE_SIZE} images are supported, got {}",
                self.image_size
            )));
        }
        if self.routing_iters == 0 {
            return Err(Error::Usage("routing iterations must be positive".into()));
        }
        if self.latent == 0 {
            return Err(Error::Usage("latent length must be positive".into()));
        }
        if self.arch == ArchitectureId::CapsGan3 {
            let fixed = self.gen3().latent();
            if self.latent != fixed {
                return Err(Error::Usage(format!("capsgan3 latent length is fixed at {fixed}, got {}", self.latent)));
            }
        }
        Ok(())
    }

    fn caps_disc(&self) -> CapsDiscConfig {
        match self.scale {
            Scale::Full => FULL_CAPS_DISC,
            Scale::Small => SMALL_CAPS_DISC,
        }
    }

    fn gen3(&self) -> Gen3Config {
        match self.scale {
            Scale::Full => FULL_GEN3,
            Scale::Small => SMALL_GEN3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct CapsDiscConfig {
    conv_channels: usize,
    conv_kernel: usize,
    primary_types: usize,
    primary_dim: usize,
    primary_kernel: usize,
    primary_stride: usize,
    out_caps: usize,
    out_dim: usize,
}

const FULL_CAPS_DISC: CapsDiscConfig = CapsDiscConfig {
    conv_channels: 256,
    conv_kernel: 9,
    primary_types: 32,
    primary_dim: 8,
    primary_kernel: 9,
    primary_stride: 2,
    out_caps: 10,
    out_dim: 16,
};

const SMALL_CAPS_DISC: CapsDiscConfig = CapsDiscConfig {
    conv_channels: 4,
    conv_kernel: 9,
    primary_types: 2,
    primary_dim: 4,
    primary_kernel: 9,
    primary_stride: 11,
    out_caps: 3,
    out_dim: 4,
};

const FULL_DCGAN_DISC: [usize; 4] = [32, 64, 128, 256];
const SMALL_DCGAN_DISC: [usize; 4] = [2, 3, 4, 5];
pub const DROPOUT_RATE: f32 = 0.3;

/// Dense → `base x 7 x 7` → two upsampling deconvs → 3x3 conv.
#[derive(Clone, Copy, Debug)]
struct TailConfig {
    base: usize,
    deconv: [usize; 2],
}

const FULL_TAIL: TailConfig = TailConfig { base: 128, deconv: [128, 64] };
const SMALL_TAIL: TailConfig = TailConfig { base: 3, deconv: [3, 2] };

#[derive(Clone, Copy, Debug)]
struct Gen3Config {
    latent_caps: usize,
    latent_dim: usize,
    types: usize,
    type_dim: usize,
    grid: usize,
    deconv: [usize; 3],
}

impl Gen3Config {
    fn latent(&self) -> usize {
        self.latent_caps * self.latent_dim
    }

    fn out_caps(&self) -> usize {
        self.types * self.grid * self.grid
    }
}

const FULL_GEN3: Gen3Config =
    Gen3Config { latent_caps: 16, latent_dim: 8, types: 32, type_dim: 8, grid: 6, deconv: [256, 128, 64] };
const SMALL_GEN3: Gen3Config =
    Gen3Config { latent_caps: 4, latent_dim: 2, types: 2, type_dim: 4, grid: 6, deconv: [3, 3, 2] };

/// Routed output magnitudes targeted by the capsule weight init.
const DISC_ROUTED_NORM: f32 = 1.0;
const GEN_ROUTED_NORM: f32 = 0.1;

/// Std of `W` such that uniform first-iteration routing of inputs with norm
/// `input_norm` yields outputs `s_j` with norm about `target`:
/// `|s| ~ std * |u| * sqrt(in_caps * out_dim) / out_caps`.
pub fn routing_init_std(in_caps: usize, out_caps: usize, out_dim: usize, input_norm: f32, target: f32) -> f32 {
    target * out_caps as f32 / (input_norm * libm::sqrtf((in_caps * out_dim) as f32))
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Output of one discriminator pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `[batch x 1]` probabilities that the input is real.
    pub score: Var,
    /// `[batch x out_caps x out_dim]` class capsules, capsule discriminators only.
    pub digitcaps: Option<Var>,
    /// `[batch x out_dim]` largest-norm capsule, capsule discriminators only.
    pub masked: Option<Var>,
}

#[derive(Clone, Debug)]
struct CapsuleDisc {
    conv: Conv2d,
    primary: Conv2d,
    primary_dim: usize,
    digit: CapsuleLayer,
    head: Dense,
}

impl CapsuleDisc {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, c: CapsDiscConfig, iters: usize) -> Result<Self> {
        let conv = Conv2d::new(ps, rng, "d.conv", 1, c.conv_channels, c.conv_kernel, 1, 0, Init::He);
        let pch = c.primary_types * c.primary_dim;
        // Unit-variance features in, capsule norms near one out: the range
        // where squash still responds to magnitude. He init lands around 3.5,
        // where the discriminator only sees capsule directions.
        let fan_in = c.conv_channels * c.primary_kernel * c.primary_kernel;
        let primary_std = 1.0 / libm::sqrtf((fan_in * c.primary_dim) as f32);
        let primary = Conv2d::new(
            ps,
            rng,
            "d.primary",
            c.conv_channels,
            pch,
            c.primary_kernel,
            c.primary_stride,
            0,
            Init::Normal(primary_std),
        );
        let side = conv_out(conv_out(IMAGE_SIZE, c.conv_kernel, 1, 0), c.primary_kernel, c.primary_stride, 0);
        let in_caps = c.primary_types * side * side;
        // Squash maps the unit pre-activation norm to 0.5.
        let std = routing_init_std(in_caps, c.out_caps, c.out_dim, 0.5, DISC_ROUTED_NORM);
        let digit = CapsuleLayer::new(ps, rng, "d.digitcaps", in_caps, c.out_caps, c.primary_dim, c.out_dim, iters, std)?;
        // Squashed capsules have norm below one, so a 0.02-scale head would pin
        // the score near 0.5 for thousands of Adam steps. Scale it for a
        // unit-variance logit at the initial routed norm.
        let n2 = DISC_ROUTED_NORM * DISC_ROUTED_NORM;
        let head = Dense::new(ps, rng, "d.dense", c.out_dim, 1, Init::Normal((1.0 + n2) / n2));
        Ok(CapsuleDisc { conv, primary, primary_dim: c.primary_dim, digit, head })
    }

    fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<DiscOutput> {
        let h = self.conv.forward(ctx, x)?;
        let h = ctx.tape.activate(h, Activation::leaky());
        ctx.record("conv", h);
        let f = self.primary.forward(ctx, h)?;
        ctx.record("primary", f);
        let caps = primary_caps(ctx.tape, f, self.primary_dim)?;
        ctx.record("primary_caps", caps);
        let digit = self.digit.forward(ctx, caps)?;
        ctx.record("digitcaps", digit);
        let masked = mask_by_norm(ctx.tape, digit)?;
        ctx.record("mask", masked);
        let logit = self.head.forward(ctx, masked)?;
        let score = ctx.tape.activate(logit, Activation::Sigmoid);
        ctx.record("dense", score);
        Ok(DiscOutput { score, digitcaps: Some(digit), masked: Some(masked) })
    }
}

#[derive(Clone, Debug)]
struct DcganDisc {
    convs: [Conv2d; 4],
    norms: [BatchNorm; 3],
    flat: usize,
    dense: Dense,
}

impl DcganDisc {
    /// (kernel, stride, pad) per block: 28 → 14 → 8 → 4 → 4.
    const GEOMETRY: [(usize, usize, usize); 4] = [(4, 2, 1), (4, 2, 2), (4, 2, 1), (3, 1, 1)];

    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, widths: [usize; 4]) -> Self {
        let mut inc = 1;
        let mut side = IMAGE_SIZE;
        let convs = core::array::from_fn(|i| {
            let (k, s, p) = Self::GEOMETRY[i];
            let c = Conv2d::new(ps, rng, &format!("d.conv{}", i + 1), inc, widths[i], k, s, p, Init::DCGAN);
            inc = widths[i];
            side = conv_out(side, k, s, p);
            c
        });
        let norms = core::array::from_fn(|i| BatchNorm::new(ps, &format!("d.bn{}", i + 2), widths[i + 1]));
        let flat = widths[3] * side * side;
        let dense = Dense::new(ps, rng, "d.dense", flat, 1, Init::DCGAN);
        DcganDisc { convs, norms, flat, dense }
    }

    fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<DiscOutput> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(ctx, h)?;
            if i > 0 {
                h = self.norms[i - 1].forward(ctx, h)?;
            }
            h = ctx.tape.activate(h, Activation::leaky());
            ctx.record("conv", h);
            h = dropout(ctx, h, DROPOUT_RATE)?;
            ctx.record("dropout", h);
        }
        let batch = ctx.tape.shape(h)[0];
        let flat = ctx.tape.reshape(h, [batch, self.flat])?;
        let logit = self.dense.forward(ctx, flat)?;
        let score = ctx.tape.activate(logit, Activation::Sigmoid);
        ctx.record("dense", score);
        Ok(DiscOutput { score, digitcaps: None, masked: None })
    }
}

#[derive(Clone, Debug)]
enum DiscKind {
    Capsule(CapsuleDisc),
    Dcgan(DcganDisc),
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamSet,
    kind: DiscKind,
}

impl Discriminator {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn uses_capsules(&self) -> bool {
        matches!(self.kind, DiscKind::Capsule(_))
    }

    /// Scores `[batch x 1 x 28 x 28]` images; `ctx` must be bound to `self.params`.
    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, image: Var) -> Result<DiscOutput> {
        check_image(ctx.tape, image)?;
        match &self.kind {
            DiscKind::Capsule(d) => d.forward(ctx, image),
            DiscKind::Dcgan(d) => d.forward(ctx, image),
        }
    }
}

fn check_image(tape: &Tape<'_>, image: Var) -> Result<()> {
    let s = tape.shape(image);
    if s.rank() != 4 || s[1..] != [1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::dim("discriminator", format!("expected [batch x 1 x 28 x 28], got {s}")));
    }
    Ok(())
}

/// Shared upsampling tail: dense → reshape → deconv, BN, ReLU twice → conv, tanh.
#[derive(Clone, Debug)]
struct ConvTail {
    dense: Dense,
    base: usize,
    deconvs: [ConvTranspose2d; 2],
    norms: [BatchNorm; 2],
    out: Conv2d,
}

impl ConvTail {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, inputs: usize, c: TailConfig) -> Self {
        let dense = Dense::new(ps, rng, "g.dense", inputs, c.base * 49, Init::DCGAN);
        let chans = [c.base, c.deconv[0], c.deconv[1]];
        let deconvs = core::array::from_fn(|i| {
            ConvTranspose2d::new(ps, rng, &format!("g.deconv{}", i + 1), chans[i], chans[i + 1], 4, 2, 1, Init::DCGAN)
        });
        let norms = core::array::from_fn(|i| BatchNorm::new(ps, &format!("g.bn{}", i + 1), chans[i + 1]));
        let out = Conv2d::new(ps, rng, "g.conv_out", c.deconv[1], 1, 3, 1, 1, Init::DCGAN);
        ConvTail { dense, base: c.base, deconvs, norms, out }
    }

    fn forward(&self, ctx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let h = self.dense.forward(ctx, x)?;
        ctx.record("dense", h);
        let batch = ctx.tape.shape(h)[0];
        let mut h = ctx.tape.reshape(h, [batch, self.base, 7, 7])?;
        ctx.record("reshape", h);
        for (deconv, bn) in self.deconvs.iter().zip(&self.norms) {
            h = deconv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.activate(h, Activation::Relu);
            ctx.record("deconv", h);
        }
        let h = self.out.forward(ctx, h)?;
        let img = ctx.tape.activate(h, Activation::Tanh);
        ctx.record("conv", img);
        Ok(img)
    }
}

#[derive(Clone, Debug)]
struct DigitCapsGen {
    caps_dim: usize,
    multiply_bn: BatchNorm,
    weight: ParamId,
    weight_bn: BatchNorm,
    tail: ConvTail,
}

impl DigitCapsGen {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, caps_dim: usize, latent: usize, tail: TailConfig) -> Self {
        let multiply_bn = BatchNorm::new(ps, "g.multiply_bn", caps_dim);
        let weight = ps.add("g.weight", crate::nn::init_normal(rng, [caps_dim], 0.02));
        let weight_bn = BatchNorm::new(ps, "g.weight_bn", latent);
        let tail = ConvTail::new(ps, rng, latent, tail);
        DigitCapsGen { caps_dim, multiply_bn, weight, weight_bn, tail }
    }

    fn forward(&self, ctx: &mut Ctx<'_, '_>, z: Var, caps: Var) -> Result<Var> {
        let (sz, sc) = (ctx.tape.shape(z), ctx.tape.shape(caps));
        if sc.rank() != 2 || sc[1] != self.caps_dim || sc[0] != sz[0] {
            return Err(Error::dim("capsgen2", format!("digitcaps {sc} for latent {sz}")));
        }
        let h = ctx.tape.outer(caps, z)?;
        let h = self.multiply_bn.forward(ctx, h)?;
        let h = ctx.tape.activate(h, Activation::leaky());
        ctx.record("multiply", h);
        let w = ctx.var(self.weight);
        let h = ctx.tape.channel_contract(h, w)?;
        let h = self.weight_bn.forward(ctx, h)?;
        let h = ctx.tape.activate(h, Activation::leaky());
        ctx.record("weight", h);
        self.tail.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
struct RoutingGen {
    cfg: Gen3Config,
    routing: CapsuleLayer,
    deconvs: [ConvTranspose2d; 4],
    norms: [BatchNorm; 3],
}

impl RoutingGen {
    /// (kernel, stride) per deconv: 6 → 16 → 20 → 24 → 28, no padding.
    const GEOMETRY: [(usize, usize); 4] = [(6, 2), (5, 1), (5, 1), (5, 1)];

    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, c: Gen3Config, iters: usize) -> Result<Self> {
        let out_caps = c.out_caps();
        let input_norm = libm::sqrtf(c.latent_dim as f32);
        let std = routing_init_std(c.latent_caps, out_caps, c.type_dim, input_norm, GEN_ROUTED_NORM);
        let routing =
            CapsuleLayer::new(ps, rng, "g.routing", c.latent_caps, out_caps, c.latent_dim, c.type_dim, iters, std)?;
        let chans = [c.types * c.type_dim, c.deconv[0], c.deconv[1], c.deconv[2], 1];
        let deconvs = core::array::from_fn(|i| {
            let (k, s) = Self::GEOMETRY[i];
            ConvTranspose2d::new(ps, rng, &format!("g.deconv{}", i + 1), chans[i], chans[i + 1], k, s, 0, Init::DCGAN)
        });
        let norms = core::array::from_fn(|i| BatchNorm::new(ps, &format!("g.bn{}", i + 1), chans[i + 1]));
        Ok(RoutingGen { cfg: c, routing, deconvs, norms })
    }

    fn forward(&self, ctx: &mut Ctx<'_, '_>, z: Var) -> Result<Var> {
        let batch = ctx.tape.shape(z)[0];
        let caps = ctx.tape.reshape(z, [batch, self.cfg.latent_caps, self.cfg.latent_dim])?;
        ctx.record("reshape", caps);
        let routed = self.routing.forward(ctx, caps)?;
        ctx.record("digitcaps", routed);
        let mut h = caps_to_feature_map(ctx.tape, routed, self.cfg.grid, self.cfg.grid)?;
        ctx.record("reshape", h);
        for (i, deconv) in self.deconvs.iter().enumerate() {
            h = deconv.forward(ctx, h)?;
            h = match self.norms.get(i) {
                Some(bn) => {
                    let h = bn.forward(ctx, h)?;
                    ctx.tape.activate(h, Activation::Relu)
                }
                None => ctx.tape.activate(h, Activation::Tanh),
            };
            ctx.record("deconv", h);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
enum GenKind {
    Dcgan(ConvTail),
    DigitCaps(DigitCapsGen),
    Routing(RoutingGen),
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ParamSet,
    latent: usize,
    kind: GenKind,
}

impl Generator {
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn latent_len(&self) -> usize {
        self.latent
    }

    pub fn needs_digitcaps(&self) -> bool {
        matches!(self.kind, GenKind::DigitCaps(_))
    }

    /// Maps `z[batch x latent]` (plus masked DigitCaps for the capsule-fed
    /// generator) to `[batch x 1 x 28 x 28]` images in `[-1, 1]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, '_>, z: Var, digitcaps: Option<Var>) -> Result<Var> {
        let s = ctx.tape.shape(z);
        if s.rank() != 2 || s[1] != self.latent {
            return Err(Error::dim("generator", format!("expected [batch x {}], got {s}", self.latent)));
        }
        match (&self.kind, digitcaps) {
            (GenKind::Dcgan(t), _) => t.forward(ctx, z),
            (GenKind::DigitCaps(g), Some(d)) => g.forward(ctx, z, d),
            (GenKind::DigitCaps(_), None) => {
                Err(Error::Usage("this generator needs DigitCaps from real images".into()))
            }
            (GenKind::Routing(g), _) => g.forward(ctx, z),
        }
    }
}

/// A discriminator/generator pair with disjoint parameter sets.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub disc: Discriminator,
    pub gen: Generator,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = config.scale == Scale::Small;
        let mut dps = ParamSet::new();
        let dkind = if config.arch.capsule_discriminator() {
            DiscKind::Capsule(CapsuleDisc::new(&mut dps, &mut rng, config.caps_disc(), config.routing_iters)?)
        } else {
            DiscKind::Dcgan(DcganDisc::new(&mut dps, &mut rng, if small { SMALL_DCGAN_DISC } else { FULL_DCGAN_DISC }))
        };
        let tail = if small { SMALL_TAIL } else { FULL_TAIL };
        let mut gps = ParamSet::new();
        let gkind = match config.arch {
            ArchitectureId::Dcgan | ArchitectureId::CapsGan1 => {
                GenKind::Dcgan(ConvTail::new(&mut gps, &mut rng, config.latent, tail))
            }
            ArchitectureId::CapsGan2 => GenKind::DigitCaps(DigitCapsGen::new(
                &mut gps,
                &mut rng,
                config.caps_disc().out_dim,
                config.latent,
                tail,
            )),
            ArchitectureId::CapsGan3 => {
                GenKind::Routing(RoutingGen::new(&mut gps, &mut rng, config.gen3(), config.routing_iters)?)
            }
        };
        Ok(Model {
            disc: Discriminator { params: dps, kind: dkind },
            gen: Generator { params: gps, latent: config.latent, kind: gkind },
            config,
        })
    }

    pub fn arch(&self) -> ArchitectureId {
        self.config.arch
    }

    /// Length of the masked DigitCaps vector fed to the generator, if any.
    pub fn caps_dim(&self) -> Option<usize> {
        self.config.arch.capsule_discriminator().then(|| self.config.caps_disc().out_dim)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} ({}): D {} params, G {} params",
            self.config.arch,
            self.config.scale.as_str(),
            self.disc.params.num_scalars(),
            self.gen.params.num_scalars()
        )
    }
}
