//! The SSH network: a three-stage micro-backbone (strides 4, 8, 16), the
//! stride-8 fusion block, and three detection modules at strides 8, 16, 32.
//!
//! A detection module concatenates a plain 3×3 branch (X channels) with the
//! context module (X channels) and feeds the concatenation to 1×1 class and
//! regression heads. The context module starts with one shared 3×3 conv of
//! width X/2; branch A adds one more 3×3 conv, branch B two more, giving 5×5
//! and 7×7 receptive fields.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{self as anchor_gen, AnchorConfig, AnchorSet, ModuleId};
use crate::error::{Error, Result};
use crate::tensornet::{self as tn, weights, ConvParams, Tensor};

/// Spatial dims of a forward input must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel widths of the stride-4, stride-8 and stride-16 stages.
    pub widths: [usize; 3],
    /// Width of the two 1×1 reductions and the 3×3 conv of the fusion block.
    pub fusion_width: usize,
    /// Context channels X per module.
    pub context_channels: [usize; 3],
    pub use_fusion: bool,
    /// Single detection module on stride 16 carrying every scale.
    pub only_m2: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            fusion_width: 32,
            context_channels: [128, 256, 256],
            use_fusion: true,
            only_m2: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w < 8) || self.fusion_width < 8 {
            return Err(Error::config(format!(
                "backbone widths must be >= 8, got {:?} / fusion {}",
                self.widths, self.fusion_width
            )));
        }
        if self.context_channels.iter().any(|&x| x < 2 || x % 2 != 0) {
            return Err(Error::config(format!(
                "context channels must be even and >= 2, got {:?}",
                self.context_channels
            )));
        }
        Ok(())
    }

    /// Modules present in a graph built from this config.
    pub fn modules(&self) -> Vec<ModuleId> {
        if self.only_m2 {
            vec![ModuleId::M2]
        } else {
            ModuleId::ALL.to_vec()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionModuleOutput {
    pub module: ModuleId,
    pub stride: u32,
    /// `(n, 2K, h, w)`; channel `2k` is background, `2k + 1` face.
    pub cls: Tensor,
    /// `(n, 4K, h, w)`; channels `4k..4k+4` are `(tx, ty, tw, th)`.
    pub reg: Tensor,
}

impl DetectionModuleOutput {
    pub fn num_scales(&self) -> usize {
        self.cls.shape()[1] / 2
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.cls.shape()[3], self.cls.shape()[2])
    }
}

/// Gradient of the training objective with respect to one module's maps.
#[derive(Debug, Clone)]
pub struct ModuleOutputGrad {
    pub module: ModuleId,
    pub cls: Tensor,
    pub reg: Tensor,
}

// ---------------------------------------------------------------------------
// Layers

/// Convolution followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
struct ConvRelu(ConvParams);

impl ConvRelu {
    fn new(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(Self(ConvParams::new(c_in, c_out, k)?))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tn::relu(&tn::conv2d(x, &self.0)?))
    }

    fn backward(&mut self, x: &Tensor, y: &Tensor, gy: &Tensor, need_gx: bool) -> Result<Option<Tensor>> {
        let g = tn::relu_backward(y, gy)?;
        tn::conv2d_backward(x, &mut self.0, &g, need_gx)
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => *acc = tn::add(acc, &g)?,
    }
    Ok(())
}

/// Shared 3×3 conv then branch A (one more 3×3) and branch B (two more).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModule {
    shared: ConvRelu,
    a: ConvRelu,
    b1: ConvRelu,
    b2: ConvRelu,
}

#[derive(Debug, Clone)]
pub struct ContextCache {
    shared: Tensor,
    a: Tensor,
    b1: Tensor,
    b2: Tensor,
}

impl ContextCache {
    /// Branch A output (5×5 receptive field).
    pub fn branch_a(&self) -> &Tensor {
        &self.a
    }

    /// Branch B output (7×7 receptive field).
    pub fn branch_b(&self) -> &Tensor {
        &self.b2
    }
}

impl ContextModule {
    /// Context module with `x` output channels (`x / 2` per branch).
    pub fn new(c_in: usize, x: usize) -> Result<Self> {
        if x < 2 || !x.is_multiple_of(2) {
            return Err(Error::config(format!("context channels must be even and >= 2, got {x}")));
        }
        let h = x / 2;
        Ok(Self {
            shared: ConvRelu::new(c_in, h, 3)?,
            a: ConvRelu::new(h, h, 3)?,
            b1: ConvRelu::new(h, h, 3)?,
            b2: ConvRelu::new(h, h, 3)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.a.0.c_out() + self.b2.0.c_out()
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.num_params()).sum()
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ContextCache> {
        let shared = self.shared.forward(x)?;
        let a = self.a.forward(&shared)?;
        let b1 = self.b1.forward(&shared)?;
        let b2 = self.b2.forward(&b1)?;
        Ok(ContextCache { shared, a, b1, b2 })
    }

    /// `concat(A, B)` along channels.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.forward_cached(x)?;
        tn::concat_channels(&[&c.a, &c.b2])
    }

    fn backward(
        &mut self,
        x: &Tensor,
        c: &ContextCache,
        ga: &Tensor,
        gb: &Tensor,
    ) -> Result<Tensor> {
        let gb1 = self.b2.backward(&c.b1, &c.b2, gb, true)?.expect("input grad");
        let mut gs = self.b1.backward(&c.shared, &c.b1, &gb1, true)?;
        add_into(&mut gs, self.a.backward(&c.shared, &c.a, ga, true)?.expect("input grad"))?;
        Ok(self
            .shared
            .backward(x, &c.shared, &gs.expect("set above"), true)?
            .expect("input grad"))
    }

    /// Convolutions by local name: `shared`, `a`, `b1`, `b2`.
    pub fn convs(&self) -> [(&'static str, &ConvParams); 4] {
        [
            ("shared", &self.shared.0),
            ("a", &self.a.0),
            ("b1", &self.b1.0),
            ("b2", &self.b2.0),
        ]
    }

    pub fn convs_mut(&mut self) -> [(&'static str, &mut ConvParams); 4] {
        [
            ("shared", &mut self.shared.0),
            ("a", &mut self.a.0),
            ("b1", &mut self.b1.0),
            ("b2", &mut self.b2.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionModule {
    pub module: ModuleId,
    pub stride: u32,
    plain: ConvRelu,
    context: ContextModule,
    cls: ConvParams,
    reg: ConvParams,
}

#[derive(Debug, Clone)]
struct ModuleCache {
    plain: Tensor,
    context: ContextCache,
    concat: Tensor,
}

impl DetectionModule {
    pub fn new(module: ModuleId, stride: u32, c_in: usize, x: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config(format!("{module} needs at least one anchor scale")));
        }
        Ok(Self {
            module,
            stride,
            plain: ConvRelu::new(c_in, x, 3)?,
            context: ContextModule::new(c_in, x)?,
            cls: ConvParams::new(2 * x, 2 * k, 1)?,
            reg: ConvParams::new(2 * x, 4 * k, 1)?,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.cls.c_out() / 2
    }

    pub fn context(&self) -> &ContextModule {
        &self.context
    }

    pub fn in_channels(&self) -> usize {
        self.plain.0.c_in()
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.num_params()).sum()
    }

    fn forward(&self, x: &Tensor) -> Result<(DetectionModuleOutput, ModuleCache)> {
        let plain = self.plain.forward(x)?;
        let context = self.context.forward_cached(x)?;
        let concat = tn::concat_channels(&[&plain, &context.a, &context.b2])?;
        let out = DetectionModuleOutput {
            module: self.module,
            stride: self.stride,
            cls: tn::conv2d(&concat, &self.cls)?,
            reg: tn::conv2d(&concat, &self.reg)?,
        };
        Ok((out, ModuleCache { plain, context, concat }))
    }

    fn backward(&mut self, x: &Tensor, c: &ModuleCache, g: &ModuleOutputGrad) -> Result<Tensor> {
        let gc = tn::conv2d_backward(&c.concat, &mut self.cls, &g.cls, true)?.expect("input grad");
        let gr = tn::conv2d_backward(&c.concat, &mut self.reg, &g.reg, true)?.expect("input grad");
        let gcat = tn::add(&gc, &gr)?;
        let widths = [
            c.plain.shape()[1],
            c.context.a.shape()[1],
            c.context.b2.shape()[1],
        ];
        let parts = tn::concat_channels_backward(&gcat, &widths)?;
        let gx_ctx = self.context.backward(x, &c.context, &parts[1], &parts[2])?;
        let gx_plain = self.plain.backward(x, &c.plain, &parts[0], true)?.expect("input grad");
        tn::add(&gx_ctx, &gx_plain)
    }

    fn convs(&self) -> Vec<(String, &ConvParams)> {
        let mut v = vec![("context.plain".to_string(), &self.plain.0)];
        v.extend(self.context.convs().into_iter().map(|(n, c)| (format!("context.{n}"), c)));
        v.push(("cls".into(), &self.cls));
        v.push(("reg".into(), &self.reg));
        v
    }

    fn convs_mut(&mut self) -> Vec<(String, &mut ConvParams)> {
        let mut v = vec![("context.plain".to_string(), &mut self.plain.0)];
        v.extend(
            self.context
                .convs_mut()
                .into_iter()
                .map(|(n, c)| (format!("context.{n}"), c)),
        );
        v.push(("cls".into(), &mut self.cls));
        v.push(("reg".into(), &mut self.reg));
        v
    }
}

/// Parameters of a 3×3 convolution with 512 outputs, the proposal-network
/// layer the detection module is measured against.
pub fn proposal_conv_params(c_in: usize) -> usize {
    c_in * 512 * 9 + 512
}

// ---------------------------------------------------------------------------
// Network

#[derive(Debug, Clone, PartialEq)]
struct Backbone {
    c1_1: ConvRelu,
    c1_2: ConvRelu,
    c1_3: ConvRelu,
    c2_1: ConvRelu,
    c3_1: ConvRelu,
}

#[derive(Debug, Clone, PartialEq)]
struct Fusion {
    reduce_s8: ConvRelu,
    reduce_s16: ConvRelu,
    conv: ConvRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SshNet {
    config: BackboneConfig,
    backbone: Backbone,
    fusion: Option<Fusion>,
    modules: Vec<DetectionModule>,
}

/// Forward intermediates needed by [`SshNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    a1: Tensor,
    p1: Tensor,
    a2: Tensor,
    p2: Tensor,
    s4: Tensor,
    p3: Tensor,
    s8: Tensor,
    p4: Tensor,
    s16: Tensor,
    fusion: Option<FusionCache>,
    s32: Option<Tensor>,
    modules: Vec<(ModuleId, ModuleCache)>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    r8: Tensor,
    r16: Tensor,
    sum: Tensor,
    out: Tensor,
}

impl SshNet {
    /// Builds the graph with seeded initialization: heads from N(0, 0.01²),
    /// every other conv from N(0, 2 / fan_in), all biases zero.
    pub fn build(config: &BackboneConfig, anchors: &AnchorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        anchors.validate()?;
        let [w0, w1, w2] = config.widths;
        let backbone = Backbone {
            c1_1: ConvRelu::new(3, w0, 3)?,
            c1_2: ConvRelu::new(w0, w0, 3)?,
            c1_3: ConvRelu::new(w0, w0, 3)?,
            c2_1: ConvRelu::new(w0, w1, 3)?,
            c3_1: ConvRelu::new(w1, w2, 3)?,
        };
        let f = config.fusion_width;
        let fusion = (config.use_fusion && !config.only_m2)
            .then(|| -> Result<Fusion> {
                Ok(Fusion {
                    reduce_s8: ConvRelu::new(w1, f, 1)?,
                    reduce_s16: ConvRelu::new(w2, f, 1)?,
                    conv: ConvRelu::new(f, f, 3)?,
                })
            })
            .transpose()?;
        let mut modules = Vec::new();
        for m in config.modules() {
            let c_in = match m {
                ModuleId::M1 if fusion.is_some() => f,
                ModuleId::M1 => w1,
                _ => w2,
            };
            let k = if config.only_m2 {
                anchors.union_scales().len()
            } else {
                anchors.module_scales(m).len()
            };
            let x = config.context_channels[m.index()];
            modules.push(DetectionModule::new(m, anchors.stride(m), c_in, x, k)?);
        }
        let mut net = Self {
            config: config.clone(),
            backbone,
            fusion,
            modules,
        };
        net.initialize(seed);
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn modules(&self) -> impl Iterator<Item = &DetectionModule> {
        self.modules.iter()
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        self.modules.iter().map(|m| m.module).collect()
    }

    pub fn detection_module(&self, id: ModuleId) -> Option<&DetectionModule> {
        self.modules.iter().find(|m| m.module == id)
    }

    /// Anchor grid matching `module`'s heads; the single M2 head of an
    /// `only_m2` graph carries the union of all scale sets.
    pub fn anchor_set(
        &self,
        anchors: &AnchorConfig,
        module: ModuleId,
        feature_w: usize,
        feature_h: usize,
    ) -> Result<AnchorSet> {
        let set = if self.config.only_m2 {
            anchor_gen::generate_with_scales(
                module,
                anchors.stride(module),
                &anchors.union_scales(),
                anchors.base_size,
                feature_w,
                feature_h,
            )?
        } else {
            anchor_gen::generate(anchors, module, feature_w, feature_h)?
        };
        match self.detection_module(module) {
            Some(m) if m.num_scales() == set.num_scales() => Ok(set),
            Some(m) => Err(Error::contract(format!(
                "{module} head has {} scales, anchor config gives {}",
                m.num_scales(),
                set.num_scales()
            ))),
            None => Err(Error::contract(format!("graph has no {module}"))),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, c)| c.num_params()).sum()
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, p) in self.params_mut() {
            let is_head = name.ends_with(".cls") || name.ends_with(".reg");
            let (_, c_in, kh, kw) = p.weight.dims4().expect("conv weight is 4-d");
            let std = if is_head {
                0.01
            } else {
                (2.0 / (c_in * kh * kw) as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in p.weight.data_mut() {
                *w = normal.sample(&mut rng) as f32;
            }
            p.bias.data_mut().fill(0.0);
        }
    }

    /// Every conv, in a fixed order, with its dotted name prefix.
    pub fn params(&self) -> Vec<(String, &ConvParams)> {
        let b = &self.backbone;
        let mut v: Vec<(String, &ConvParams)> = vec![
            ("backbone.conv1_1".into(), &b.c1_1.0),
            ("backbone.conv1_2".into(), &b.c1_2.0),
            ("backbone.conv1_3".into(), &b.c1_3.0),
            ("backbone.conv2_1".into(), &b.c2_1.0),
            ("backbone.conv3_1".into(), &b.c3_1.0),
        ];
        if let Some(f) = &self.fusion {
            v.push(("fusion.reduce_s8".into(), &f.reduce_s8.0));
            v.push(("fusion.reduce_s16".into(), &f.reduce_s16.0));
            v.push(("fusion.conv".into(), &f.conv.0));
        }
        for m in &self.modules {
            v.extend(m.convs().into_iter().map(|(n, c)| (format!("{}.{n}", m.module), c)));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut ConvParams)> {
        let b = &mut self.backbone;
        let mut v: Vec<(String, &mut ConvParams)> = vec![
            ("backbone.conv1_1".into(), &mut b.c1_1.0),
            ("backbone.conv1_2".into(), &mut b.c1_2.0),
            ("backbone.conv1_3".into(), &mut b.c1_3.0),
            ("backbone.conv2_1".into(), &mut b.c2_1.0),
            ("backbone.conv3_1".into(), &mut b.c3_1.0),
        ];
        if let Some(f) = &mut self.fusion {
            v.push(("fusion.reduce_s8".into(), &mut f.reduce_s8.0));
            v.push(("fusion.reduce_s16".into(), &mut f.reduce_s16.0));
            v.push(("fusion.conv".into(), &mut f.conv.0));
        }
        for m in &mut self.modules {
            let id = m.module;
            v.extend(m.convs_mut().into_iter().map(|(n, c)| (format!("{id}.{n}"), c)));
        }
        v
    }

    /// Freezes or unfreezes the stride-4 stage.
    pub fn set_stage1_trainable(&mut self, yes: bool) {
        for c in [&mut self.backbone.c1_1, &mut self.backbone.c1_2, &mut self.backbone.c1_3] {
            c.0.set_trainable(yes);
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Runs every module present in the graph.
    pub fn forward(&self, image: &Tensor) -> Result<(Vec<DetectionModuleOutput>, ForwardCache)> {
        self.forward_modules(image, &self.module_ids())
    }

    /// Runs the backbone and the requested modules only. Modules missing
    /// from the graph are skipped.
    pub fn forward_modules(
        &self,
        image: &Tensor,
        active: &[ModuleId],
    ) -> Result<(Vec<DetectionModuleOutput>, ForwardCache)> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::contract(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::contract(format!(
                "input {w}x{h} is not a positive multiple of {INPUT_MULTIPLE}; pad it first"
            )));
        }
        if !image.all_finite() {
            return Err(Error::contract("input contains non-finite values"));
        }
        let b = &self.backbone;
        let a1 = b.c1_1.forward(image)?;
        let p1 = tn::maxpool2x2(&a1)?;
        let a2 = b.c1_2.forward(&p1)?;
        let p2 = tn::maxpool2x2(&a2)?;
        let s4 = b.c1_3.forward(&p2)?;
        let p3 = tn::maxpool2x2(&s4)?;
        let s8 = b.c2_1.forward(&p3)?;
        let p4 = tn::maxpool2x2(&s8)?;
        let s16 = b.c3_1.forward(&p4)?;

        let wants = |m: ModuleId| active.contains(&m);
        let has_m1 = wants(ModuleId::M1) && self.detection_module(ModuleId::M1).is_some();
        let fusion = match (&self.fusion, has_m1) {
            (Some(f), true) => {
                let r8 = f.reduce_s8.forward(&s8)?;
                let r16 = f.reduce_s16.forward(&s16)?;
                let sum = tn::add(&r8, &tn::upsample_bilinear_2x(&r16)?)?;
                let out = f.conv.forward(&sum)?;
                Some(FusionCache { r8, r16, sum, out })
            }
            _ => None,
        };
        let has_m3 = wants(ModuleId::M3) && self.detection_module(ModuleId::M3).is_some();
        let s32 = has_m3.then(|| tn::maxpool2x2(&s16)).transpose()?;

        let mut outputs = Vec::new();
        let mut caches = Vec::new();
        for m in self.modules.iter().filter(|m| wants(m.module)) {
            let input = match m.module {
                ModuleId::M1 => fusion.as_ref().map_or(&s8, |f| &f.out),
                ModuleId::M2 => &s16,
                ModuleId::M3 => s32.as_ref().expect("computed for active M3"),
            };
            let (out, cache) = m.forward(input)?;
            outputs.push(out);
            caches.push((m.module, cache));
        }
        let cache = ForwardCache {
            input: image.clone(),
            a1,
            p1,
            a2,
            p2,
            s4,
            p3,
            s8,
            p4,
            s16,
            fusion,
            s32,
            modules: caches,
        };
        Ok((outputs, cache))
    }

    /// Accumulates parameter gradients for the given output gradients.
    /// Modules without an entry in `grads` contribute nothing.
    pub fn backward(&mut self, cache: &ForwardCache, grads: &[ModuleOutputGrad]) -> Result<()> {
        let mut g8: Option<Tensor> = None;
        let mut g16: Option<Tensor> = None;
        let mut g32: Option<Tensor> = None;
        let mut g_fused: Option<Tensor> = None;
        for g in grads {
            let (_, mc) = cache
                .modules
                .iter()
                .find(|(m, _)| *m == g.module)
                .ok_or_else(|| Error::contract(format!("{} was not run in this forward pass", g.module)))?;
            let module = self
                .modules
                .iter_mut()
                .find(|m| m.module == g.module)
                .expect("cached modules exist in the graph");
            let (input, slot) = match g.module {
                ModuleId::M1 => match &cache.fusion {
                    Some(f) => (&f.out, &mut g_fused),
                    None => (&cache.s8, &mut g8),
                },
                ModuleId::M2 => (&cache.s16, &mut g16),
                ModuleId::M3 => (cache.s32.as_ref().expect("M3 ran"), &mut g32),
            };
            let gx = module.backward(input, mc, g)?;
            add_into(slot, gx)?;
        }
        if let Some(g) = g32 {
            add_into(&mut g16, tn::maxpool2x2_backward(&cache.s16, &g)?)?;
        }
        if let (Some(g), Some(fc)) = (g_fused, &cache.fusion) {
            let f = self.fusion.as_mut().expect("fusion cache implies fusion block");
            let gsum = f.conv.backward(&fc.sum, &fc.out, &g, true)?.expect("input grad");
            let (g_r8, g_up) = tn::add_backward(&gsum);
            let g_r16 = tn::upsample_bilinear_2x_backward(&g_up, fc.r16.shape())?;
            add_into(&mut g8, f.reduce_s8.backward(&cache.s8, &fc.r8, &g_r8, true)?.expect("input grad"))?;
            add_into(
                &mut g16,
                f.reduce_s16.backward(&cache.s16, &fc.r16, &g_r16, true)?.expect("input grad"),
            )?;
        }
        let b = &mut self.backbone;
        if let Some(g) = g16 {
            let gp4 = b.c3_1.backward(&cache.p4, &cache.s16, &g, true)?.expect("input grad");
            add_into(&mut g8, tn::maxpool2x2_backward(&cache.s8, &gp4)?)?;
        }
        let Some(g) = g8 else { return Ok(()) };
        let stage1_trainable = b.c1_1.0.weight.requires_grad()
            || b.c1_2.0.weight.requires_grad()
            || b.c1_3.0.weight.requires_grad();
        let gp3 = b.c2_1.backward(&cache.p3, &cache.s8, &g, stage1_trainable)?;
        let Some(gp3) = gp3 else { return Ok(()) };
        let gs4 = tn::maxpool2x2_backward(&cache.s4, &gp3)?;
        let gp2 = b.c1_3.backward(&cache.p2, &cache.s4, &gs4, true)?.expect("input grad");
        let ga2 = tn::maxpool2x2_backward(&cache.a2, &gp2)?;
        let gp1 = b.c1_2.backward(&cache.p1, &cache.a2, &ga2, true)?.expect("input grad");
        let ga1 = tn::maxpool2x2_backward(&cache.a1, &gp1)?;
        b.c1_1.backward(&cache.input, &cache.a1, &ga1, false)?;
        Ok(())
    }

    /// Named tensors in SSHW1 order: `<prefix>.weight`, `<prefix>.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.params()
            .into_iter()
            .flat_map(|(n, p)| [(format!("{n}.weight"), &p.weight), (format!("{n}.bias"), &p.bias)])
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        weights::encode(&self.named_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::save(path, &self.named_tensors())
    }

    /// Replaces every parameter from a decoded container. Names and shapes
    /// must match the graph exactly.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        for (name, p) in self.params_mut() {
            for (suffix, slot) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
                let key = format!("{name}.{suffix}");
                let t = by_name
                    .remove(&key)
                    .ok_or_else(|| Error::format(format!("weights lack tensor `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(format!(
                        "tensor `{key}` has shape {:?}, graph expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                let trainable = slot.requires_grad();
                *slot = t.with_requires_grad(trainable);
            }
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::format(format!("weights contain unknown tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.load_tensors(weights::load(path)?)
    }
}
