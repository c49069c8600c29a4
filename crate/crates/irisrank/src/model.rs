//! The residual attention classifier.
//!
//! Layout: a 3x3 stem conv and 3x3/2 max pool, then three stages of
//! [residual block -> attention module] at widths 64/128/256, three residual
//! blocks at width 512, global average pooling and a single sigmoid output.
//! Residual blocks are pre-activation bottlenecks (norm -> rectifier -> conv)
//! with a 1x1 projection shortcut; each attention module composes a trunk of
//! residual units with an encoder-decoder soft mask as
//! `f' = (1 + M(f)) o T(f)`, the mask squashed per position and channel.
//!
//! The default configuration reproduces the stage ladder
//! 96x96x16 -> 48x48x16 -> 48x48x64 -> 24x24x128 -> 12x12x256 -> 6x6x512 -> 1.

use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    self, gemm, pool, BatchNorm2d, BnCache, Buffer, Conv2d, Dense, MaxPool2d, Param, Visit,
};

/// Architecture hyperparameters. The defaults build the tabulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RanConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Stem width followed by the four stage output widths.
    pub stage_widths: [usize; 5],
    /// Attention modules stacked per stage.
    pub attention_modules_per_stage: usize,
    /// Residual units inside each attention trunk.
    pub trunk_residual_units: usize,
    pub seed: u64,
}

impl Default for RanConfig {
    fn default() -> Self {
        Self {
            input_height: 96,
            input_width: 96,
            input_channels: 3,
            stage_widths: [16, 64, 128, 256, 512],
            attention_modules_per_stage: 1,
            trunk_residual_units: 2,
            seed: 0,
        }
    }
}

impl RanConfig {
    /// Canonical flat text rendering, the input of [`RanConfig::digest`].
    pub fn canonical_string(&self, compose_mode: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "input={}x{}x{};widths={:?};attn_per_stage={};trunk_units={};compose_mode={}",
            self.input_height,
            self.input_width,
            self.input_channels,
            self.stage_widths,
            self.attention_modules_per_stage,
            self.trunk_residual_units,
            compose_mode,
        );
        s
    }

    /// Hex digest binding a checkpoint to its architecture and input
    /// composition mode, so evaluation cannot silently mismatch training.
    pub fn digest(&self, compose_mode: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string(compose_mode).as_bytes());
        let out = hasher.finalize();
        out.iter().fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    /// Walks the stage ladder with the layers' own floor arithmetic,
    /// returning `(stage name, (h, w, c))` rows or an error naming the first
    /// stage whose spatial size does not work out.
    pub fn expected_ladder(&self) -> Result<Vec<(String, (usize, usize, usize))>> {
        for (i, &w) in self.stage_widths.iter().enumerate() {
            if w == 0 || (i > 0 && w % 4 != 0) {
                return Err(Error::InvalidConfig(format!(
                    "stage width {w} at position {i} must be a positive multiple of 4"
                )));
            }
        }
        if self.attention_modules_per_stage == 0 || self.trunk_residual_units == 0 {
            return Err(Error::InvalidConfig(
                "attention_modules_per_stage and trunk_residual_units must be >= 1".into(),
            ));
        }
        // 3x3 window, stride 2, pad 1 (shared by the stem pool and every
        // downsampling block)
        let halve = |v: usize| (v + 2 - 3) / 2 + 1;
        let mut rows = Vec::new();
        let (mut h, mut w) = (self.input_height, self.input_width);
        if h < 3 || w < 3 {
            return Err(Error::InvalidConfig(format!(
                "conv1 input {h}x{w} is smaller than its 3x3 kernel"
            )));
        }
        rows.push(("conv1".to_string(), (h, w, self.stage_widths[0])));
        h = halve(h);
        w = halve(w);
        rows.push(("max pooling".to_string(), (h, w, self.stage_widths[0])));
        for stage in 1..=3 {
            if stage > 1 {
                h = halve(h);
                w = halve(w);
            }
            let c = self.stage_widths[stage];
            rows.push((format!("stage {stage} residual block"), (h, w, c)));
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {stage} attention module input {h}x{w} not divisible by 4"
                )));
            }
            rows.push((format!("stage {stage} attention module"), (h, w, c)));
        }
        h = halve(h);
        w = halve(w);
        rows.push(("stage 4 residual block".to_string(), (h, w, self.stage_widths[4])));
        rows.push(("average pooling".to_string(), (1, 1, self.stage_widths[4])));
        rows.push(("fc sigmoid".to_string(), (1, 1, 1)));
        Ok(rows)
    }
}

/// Forces the soft-mask output to a constant, for verifying the attention
/// composition identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOverride {
    None,
    Zero,
    One,
}

/// One soft-mask output captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub stage: usize,
    pub module: usize,
    /// Mask values in (0,1), NHWC, one map per sample.
    pub mask: Rc<Array4<f32>>,
}

// ---------------------------------------------------------------------------
// residual block
// ---------------------------------------------------------------------------

/// Pre-activation bottleneck with projection shortcut.
///
/// Main path: bn-relu -> 1x1 reduce -> bn-relu -> 3x3 (stride 2 when
/// downsampling) -> bn-relu -> 1x1 expand. The shortcut is a 1x1 projection
/// of the pre-activated input, striding with the main path.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    bn0: BatchNorm2d,
    conv_reduce: Conv2d,
    bn1: BatchNorm2d,
    conv_mid: Conv2d,
    bn2: BatchNorm2d,
    conv_expand: Conv2d,
    conv_proj: Conv2d,
}

pub struct ResidualBlockCache {
    x: Rc<Array4<f32>>,
    h: Array4<f32>,
    a: Array4<f32>,
    b: Array4<f32>,
    m: Array4<f32>,
    c2: Array4<f32>,
    cols_mid: Option<ndarray::Array2<f32>>,
    cols_proj: Option<ndarray::Array2<f32>>,
    bn0: BnCache,
    bn1: BnCache,
    bn2: BnCache,
}

impl ResidualBlock {
    pub fn new(name: &str, cin: usize, cout: usize, downsample: bool, rng: &mut ChaCha8Rng) -> Self {
        let mid = cout / 4;
        let stride = if downsample { 2 } else { 1 };
        Self {
            bn0: BatchNorm2d::new(&format!("{name}.bn0"), cin),
            conv_reduce: Conv2d::new(&format!("{name}.reduce"), 1, 1, 1, 0, cin, mid, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), mid),
            conv_mid: Conv2d::new(&format!("{name}.mid"), 3, 3, stride, 1, mid, mid, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), mid),
            conv_expand: Conv2d::new(&format!("{name}.expand"), 1, 1, 1, 0, mid, cout, rng),
            conv_proj: Conv2d::new(&format!("{name}.proj"), 1, 1, stride, 0, cin, cout, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv_reduce.cin
    }

    pub fn out_channels(&self) -> usize {
        self.conv_expand.cout
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, _, _, c) = x.dim();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                context: "residual block".into(),
                expected: format!("{} channels", self.in_channels()),
                actual: format!("{c} channels"),
            });
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Rc<Array4<f32>>) -> Result<(Array4<f32>, ResidualBlockCache)> {
        self.check_input(x)?;
        let (h, bn0) = self.bn0.forward_train_relu(x);
        let a = self.conv_reduce.forward(&h);
        let (b, bn1) = self.bn1.forward_train_relu(&a);
        let (m, cols_mid) = self.conv_mid.forward_cached(&b);
        let (c2, bn2) = self.bn2.forward_train_relu(&m);
        // shortcut first, then the expand conv accumulates on top of it
        let (mut y, cols_proj) = self.conv_proj.forward_cached(&h);
        self.conv_expand.forward_into(&c2, &mut y, 1.0);
        Ok((
            y,
            ResidualBlockCache {
                x: Rc::clone(x),
                h,
                a,
                b,
                m,
                c2,
                cols_mid,
                cols_proj,
                bn0,
                bn1,
                bn2,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_input(x)?;
        let h = self.bn0.forward_eval_relu(x);
        let b = self.bn1.forward_eval_relu(&self.conv_reduce.forward(&h));
        let c2 = self.bn2.forward_eval_relu(&self.conv_mid.forward(&b));
        let mut y = self.conv_proj.forward(&h);
        self.conv_expand.forward_into(&c2, &mut y, 1.0);
        Ok(y)
    }

    pub fn backward(&mut self, cache: ResidualBlockCache, dy: &Array4<f32>) -> Array4<f32> {
        let ResidualBlockCache {
            x,
            h,
            a,
            b,
            m,
            c2,
            cols_mid,
            cols_proj,
            bn0,
            bn1,
            bn2,
        } = cache;
        let dc2 = self.conv_expand.backward(&c2, dy);
        let dm = self.bn2.backward_relu(&m, &bn2, &dc2, &c2);
        drop(dc2);
        drop(c2);
        drop(m);
        let db = self.conv_mid.backward_cached(&b, &cols_mid, &dm);
        drop(dm);
        drop(cols_mid);
        let da = self.bn1.backward_relu(&a, &bn1, &db, &b);
        drop(db);
        drop(b);
        drop(a);
        let mut dh = self.conv_reduce.backward(&h, &da);
        drop(da);
        let dh_proj = self.conv_proj.backward_cached(&h, &cols_proj, dy);
        drop(cols_proj);
        dh.zip_mut_with(&dh_proj, |v, &s| *v += s);
        drop(dh_proj);
        let dx = self.bn0.backward_relu(&x, &bn0, &dh, &h);
        drop(h);
        dx
    }
}

impl Visit for ResidualBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn0.visit_params(f);
        self.conv_reduce.visit_params(f);
        self.bn1.visit_params(f);
        self.conv_mid.visit_params(f);
        self.bn2.visit_params(f);
        self.conv_expand.visit_params(f);
        self.conv_proj.visit_params(f);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.bn0.visit_buffers(f);
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
}

// ---------------------------------------------------------------------------
// attention module
// ---------------------------------------------------------------------------

/// Encoder-decoder soft mask: two max-pool halvings with residual units,
/// mirrored nearest-neighbor upsamplings joined by one skip connection, two
/// 1x1 convolutions and a sigmoid.
#[derive(Debug, Clone)]
struct MaskBranch {
    pool: MaxPool2d,
    rb_down1: ResidualBlock,
    rb_down2: ResidualBlock,
    rb_skip: ResidualBlock,
    rb_up: ResidualBlock,
    bn_a: BatchNorm2d,
    conv_a: Conv2d,
    bn_b: BatchNorm2d,
    conv_b: Conv2d,
}

struct MaskBranchCache {
    p1_arg: Vec<u32>,
    p1_dims: (usize, usize, usize, usize),
    e1: Rc<Array4<f32>>,
    p2_arg: Vec<u32>,
    p2_dims: (usize, usize, usize, usize),
    rb_d1: ResidualBlockCache,
    rb_d2: ResidualBlockCache,
    rb_skip: ResidualBlockCache,
    rb_up: ResidualBlockCache,
    u2: Rc<Array4<f32>>,
    ra: Array4<f32>,
    a_out: Rc<Array4<f32>>,
    rb_act: Array4<f32>,
    mask: Rc<Array4<f32>>,
    bn_a: BnCache,
    bn_b: BnCache,
}

impl MaskBranch {
    fn new(name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            pool: MaxPool2d { k: 2, stride: 2, pad: 0 },
            rb_down1: ResidualBlock::new(&format!("{name}.down1"), c, c, false, rng),
            rb_down2: ResidualBlock::new(&format!("{name}.down2"), c, c, false, rng),
            rb_skip: ResidualBlock::new(&format!("{name}.skip"), c, c, false, rng),
            rb_up: ResidualBlock::new(&format!("{name}.up"), c, c, false, rng),
            bn_a: BatchNorm2d::new(&format!("{name}.bn_a"), c),
            conv_a: Conv2d::new(&format!("{name}.conv_a"), 1, 1, 1, 0, c, c, rng),
            bn_b: BatchNorm2d::new(&format!("{name}.bn_b"), c),
            conv_b: Conv2d::new(&format!("{name}.conv_b"), 1, 1, 1, 0, c, c, rng),
        }
    }

    fn forward_train(&mut self, x: &Rc<Array4<f32>>) -> Result<(Rc<Array4<f32>>, MaskBranchCache)> {
        let (p1, p1_arg) = self.pool.forward(x);
        let p1 = Rc::new(p1);
        let (e1, rb_d1) = self.rb_down1.forward_train(&p1)?;
        let e1 = Rc::new(e1);
        let (p2, p2_arg) = self.pool.forward(&e1);
        let p2 = Rc::new(p2);
        let (e2, rb_d2) = self.rb_down2.forward_train(&p2)?;
        let u1 = pool::upsample2x(&e2);
        drop(e2);
        let (sk, rb_skip) = self.rb_skip.forward_train(&e1)?;
        let mut d1 = u1;
        d1.zip_mut_with(&sk, |v, &s| *v += s);
        drop(sk);
        let d1 = Rc::new(d1);
        let (d2, rb_up) = self.rb_up.forward_train(&d1)?;
        let u2 = Rc::new(pool::upsample2x(&d2));
        drop(d2);
        let (ra, bn_a) = self.bn_a.forward_train_relu(&u2);
        let a_out = Rc::new(self.conv_a.forward(&ra));
        let (rb_act, bn_b) = self.bn_b.forward_train_relu(&a_out);
        let b_out = self.conv_b.forward(&rb_act);
        let mask = Rc::new(nn::sigmoid(&b_out));
        Ok((
            Rc::clone(&mask),
            MaskBranchCache {
                p1_arg,
                p1_dims: x.dim(),
                e1,
                p2_arg,
                p2_dims: p1.dim(),
                rb_d1,
                rb_d2,
                rb_skip,
                rb_up,
                u2,
                ra,
                a_out,
                rb_act,
                mask,
                bn_a,
                bn_b,
            },
        ))
    }

    fn forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let (p1, _) = self.pool.forward(x);
        let e1 = self.rb_down1.forward_eval(&p1)?;
        let (p2, _) = self.pool.forward(&e1);
        let e2 = self.rb_down2.forward_eval(&p2)?;
        let mut d1 = pool::upsample2x(&e2);
        d1.zip_mut_with(&self.rb_skip.forward_eval(&e1)?, |v, &s| *v += s);
        let d2 = self.rb_up.forward_eval(&d1)?;
        let u2 = pool::upsample2x(&d2);
        let ra = self.bn_a.forward_eval_relu(&u2);
        let a_out = self.conv_a.forward(&ra);
        let rb_act = self.bn_b.forward_eval_relu(&a_out);
        Ok(nn::sigmoid(&self.conv_b.forward(&rb_act)))
    }

    fn backward(&mut self, cache: MaskBranchCache, dmask: &Array4<f32>) -> Array4<f32> {
        let MaskBranchCache {
            p1_arg,
            p1_dims,
            e1,
            p2_arg,
            p2_dims,
            rb_d1,
            rb_d2,
            rb_skip,
            rb_up,
            u2,
            ra,
            a_out,
            rb_act,
            mask,
            bn_a,
            bn_b,
        } = cache;
        let db_out = nn::sigmoid_backward(dmask, &mask);
        drop(mask);
        let drb_act = self.conv_b.backward(&rb_act, &db_out);
        drop(db_out);
        let da_out = self.bn_b.backward_relu(&a_out, &bn_b, &drb_act, &rb_act);
        drop(drb_act);
        drop(rb_act);
        let dra = self.conv_a.backward(&ra, &da_out);
        drop(da_out);
        let du2 = self.bn_a.backward_relu(&u2, &bn_a, &dra, &ra);
        drop(dra);
        drop(ra);
        drop(u2);
        let dd2 = pool::upsample2x_backward(&du2);
        let dd1 = self.rb_up.backward(rb_up, &dd2);
        // d1 = upsample(e2) + skip(e1): gradient splits to both branches
        let de2 = pool::upsample2x_backward(&dd1);
        let de1_skip = self.rb_skip.backward(rb_skip, &dd1);
        let dp2 = self.rb_down2.backward(rb_d2, &de2);
        let mut de1 = self.pool.backward(p2_dims, &p2_arg, &dp2);
        de1.zip_mut_with(&de1_skip, |v, &s| *v += s);
        drop(e1);
        let dp1 = self.rb_down1.backward(rb_d1, &de1);
        self.pool.backward(p1_dims, &p1_arg, &dp1)
    }
}

impl Visit for MaskBranch {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.rb_down1.visit_params(f);
        self.rb_down2.visit_params(f);
        self.rb_skip.visit_params(f);
        self.rb_up.visit_params(f);
        self.bn_a.visit_params(f);
        self.conv_a.visit_params(f);
        self.bn_b.visit_params(f);
        self.conv_b.visit_params(f);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.rb_down1.visit_buffers(f);
        self.rb_down2.visit_buffers(f);
        self.rb_skip.visit_buffers(f);
        self.rb_up.visit_buffers(f);
        self.bn_a.visit_buffers(f);
        self.bn_b.visit_buffers(f);
    }
}

/// Trunk and soft mask composed as `f' = (1 + M(f)) o T(f)`.
#[derive(Debug, Clone)]
pub struct AttentionModule {
    trunk: Vec<ResidualBlock>,
    mask: MaskBranch,
}

pub struct AttentionModuleCache {
    trunk: Vec<ResidualBlockCache>,
    mask: Option<MaskBranchCache>,
    t_out: Rc<Array4<f32>>,
    m_out: Rc<Array4<f32>>,
}

impl AttentionModule {
    pub fn new(name: &str, c: usize, trunk_units: usize, rng: &mut ChaCha8Rng) -> Self {
        let trunk = (0..trunk_units)
            .map(|i| ResidualBlock::new(&format!("{name}.trunk{i}"), c, c, false, rng))
            .collect();
        Self {
            trunk,
            mask: MaskBranch::new(&format!("{name}.mask"), c, rng),
        }
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, h, w, _) = x.dim();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch {
                context: "attention module".into(),
                expected: "spatial size divisible by 4".into(),
                actual: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    /// Trunk branch alone, inference mode.
    pub fn trunk_forward_eval(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let mut t = x.clone();
        for rb in &self.trunk {
            t = rb.forward_eval(&t)?;
        }
        Ok(t)
    }

    pub fn forward_train(
        &mut self,
        x: &Rc<Array4<f32>>,
        over: MaskOverride,
    ) -> Result<(Array4<f32>, AttentionModuleCache)> {
        self.check_input(x)?;
        let mut trunk_caches = Vec::with_capacity(self.trunk.len());
        let mut t = Rc::clone(x);
        for rb in &mut self.trunk {
            let (next, cache) = rb.forward_train(&t)?;
            trunk_caches.push(cache);
            t = Rc::new(next);
        }
        let (m_out, mask_cache) = match over {
            MaskOverride::None => {
                let (m, c) = self.mask.forward_train(x)?;
                (m, Some(c))
            }
            MaskOverride::Zero => (Rc::new(Array4::zeros(t.dim())), None),
            MaskOverride::One => (Rc::new(Array4::ones(t.dim())), None),
        };
        let mut y = nn::combine_attention(&t, &m_out);
        let _ = &mut y;
        Ok((
            y,
            AttentionModuleCache {
                trunk: trunk_caches,
                mask: mask_cache,
                t_out: t,
                m_out,
            },
        ))
    }

    /// Inference-mode attention: returns the attended map and the mask.
    pub fn forward_eval(
        &self,
        x: &Array4<f32>,
        over: MaskOverride,
    ) -> Result<(Array4<f32>, Array4<f32>)> {
        self.check_input(x)?;
        let t = self.trunk_forward_eval(x)?;
        let m = match over {
            MaskOverride::None => self.mask.forward_eval(x)?,
            MaskOverride::Zero => Array4::zeros(t.dim()),
            MaskOverride::One => Array4::ones(t.dim()),
        };
        let y = nn::combine_attention(&t, &m);
        Ok((y, m))
    }

    pub fn backward(&mut self, cache: AttentionModuleCache, dy: &Array4<f32>) -> Array4<f32> {
        let AttentionModuleCache {
            trunk,
            mask,
            t_out,
            m_out,
        } = cache;
        // y = (1 + m) o t
        let dt = nn::scaled_product(dy, &m_out, 1.0);
        drop(m_out);
        let mut dx_mask = None;
        if let Some(mask_cache) = mask {
            let dm = nn::scaled_product(dy, &t_out, 0.0);
            dx_mask = Some(self.mask.backward(mask_cache, &dm));
        }
        drop(t_out);
        let mut grad = dt;
        for (rb, cache) in self.trunk.iter_mut().zip(trunk.into_iter()).rev() {
            grad = rb.backward(cache, &grad);
        }
        if let Some(dxm) = dx_mask {
            grad.zip_mut_with(&dxm, |v, &s| *v += s);
        }
        grad
    }
}

impl Visit for AttentionModule {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for rb in &mut self.trunk {
            rb.visit_params(f);
        }
        self.mask.visit_params(f);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for rb in &mut self.trunk {
            rb.visit_buffers(f);
        }
        self.mask.visit_buffers(f);
    }
}

// ---------------------------------------------------------------------------
// the full network
// ---------------------------------------------------------------------------

struct Stage {
    block: ResidualBlock,
    attention: Vec<AttentionModule>,
}

pub struct RanModel {
    pub cfg: RanConfig,
    conv1: Conv2d,
    pool1: MaxPool2d,
    stages: Vec<Stage>,
    stage4: Vec<ResidualBlock>,
    bn_final: BatchNorm2d,
    fc: Dense,
}

/// Everything the backward pass needs from one training forward.
pub struct ModelCache {
    x: Rc<Array4<f32>>,
    conv1_cols: Option<ndarray::Array2<f32>>,
    c1: Rc<Array4<f32>>,
    pool_arg: Vec<u32>,
    stage_caches: Vec<(ResidualBlockCache, Vec<AttentionModuleCache>)>,
    stage4_caches: Vec<ResidualBlockCache>,
    s4_out: Array4<f32>,
    f_act: Array4<f32>,
    bn_final: BnCache,
    pooled: Array2<f32>,
    final_hw: (usize, usize),
}

/// Output of one forward pass.
pub struct Forward {
    /// Sigmoid scores, one per sample, computed in f64 from the f32 logits.
    pub scores: Vec<f64>,
    pub logits: Vec<f32>,
    pub attention: Vec<AttentionRecord>,
    pub cache: Option<ModelCache>,
}

impl RanModel {
    /// Deterministically initializes a model from the configuration seed.
    pub fn build(cfg: &RanConfig) -> Result<Self> {
        cfg.expected_ladder()?; // validates sizes, names offending stage
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.stage_widths;
        let conv1 = Conv2d::new("conv1", 3, 3, 1, 1, cfg.input_channels, w[0], &mut rng);
        let pool1 = MaxPool2d { k: 3, stride: 2, pad: 1 };
        let mut stages = Vec::new();
        for stage in 1..=3 {
            let cin = if stage == 1 { w[0] } else { w[stage - 1] };
            let block = ResidualBlock::new(
                &format!("stage{stage}.block"),
                cin,
                w[stage],
                stage > 1,
                &mut rng,
            );
            let attention = (0..cfg.attention_modules_per_stage)
                .map(|mi| {
                    AttentionModule::new(
                        &format!("stage{stage}.attn{mi}"),
                        w[stage],
                        cfg.trunk_residual_units,
                        &mut rng,
                    )
                })
                .collect();
            stages.push(Stage { block, attention });
        }
        let mut stage4 = Vec::new();
        for i in 0..3 {
            let cin = if i == 0 { w[3] } else { w[4] };
            stage4.push(ResidualBlock::new(
                &format!("stage4.block{i}"),
                cin,
                w[4],
                i == 0,
                &mut rng,
            ));
        }
        let bn_final = BatchNorm2d::new("head.bn", w[4]);
        let fc = Dense::new("head.fc", w[4], 1, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            conv1,
            pool1,
            stages,
            stage4,
            bn_final,
            fc,
        })
    }

    pub fn num_params(&mut self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |p| count += p.len());
        count
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, h, w, c) = x.dim();
        let want = (self.cfg.input_height, self.cfg.input_width, self.cfg.input_channels);
        if (h, w, c) != want {
            return Err(Error::ShapeMismatch {
                context: "model input".into(),
                expected: format!("{}x{}x{}", want.0, want.1, want.2),
                actual: format!("{h}x{w}x{c}"),
            });
        }
        Ok(())
    }

    /// Training-mode forward with gradient bookkeeping.
    pub fn forward_train(&mut self, x: Array4<f32>) -> Result<Forward> {
        self.forward_train_with(x, MaskOverride::None)
    }

    pub fn forward_train_with(&mut self, x: Array4<f32>, over: MaskOverride) -> Result<Forward> {
        self.check_input(&x)?;
        let x = Rc::new(x);
        let (c1, conv1_cols) = self.conv1.forward_cached(&x);
        let c1 = Rc::new(c1);
        let (p1, pool_arg) = self.pool1.forward(&c1);
        let mut s = Rc::new(p1);
        let mut stage_caches = Vec::new();
        let mut attention = Vec::new();
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let (b_out, b_cache) = stage.block.forward_train(&s)?;
            s = Rc::new(b_out);
            let mut am_caches = Vec::new();
            for (mi, am) in stage.attention.iter_mut().enumerate() {
                let (a_out, a_cache) = am.forward_train(&s, over)?;
                attention.push(AttentionRecord {
                    stage: si + 1,
                    module: mi,
                    mask: Rc::clone(&a_cache.m_out),
                });
                am_caches.push(a_cache);
                s = Rc::new(a_out);
            }
            stage_caches.push((b_cache, am_caches));
        }
        let mut stage4_caches = Vec::new();
        for rb in &mut self.stage4 {
            let (next, cache) = rb.forward_train(&s)?;
            stage4_caches.push(cache);
            s = Rc::new(next);
        }
        let s4_out = Rc::try_unwrap(s).unwrap_or_else(|rc| (*rc).clone());
        let (f_act, bn_final) = self.bn_final.forward_train_relu(&s4_out);
        let (_, fh, fw, _) = f_act.dim();
        let pooled = pool::global_avg_pool(&f_act);
        let z = self.fc.forward(&pooled);
        let logits: Vec<f32> = z.as_slice().unwrap().to_vec();
        let scores = logits
            .iter()
            .map(|&l| 1.0 / (1.0 + (-(l as f64)).exp()))
            .collect();
        Ok(Forward {
            scores,
            logits,
            attention,
            cache: Some(ModelCache {
                x,
                conv1_cols,
                c1,
                pool_arg,
                stage_caches,
                stage4_caches,
                s4_out,
                f_act,
                bn_final,
                pooled,
                final_hw: (fh, fw),
            }),
        })
    }

    /// Inference-mode forward; no gradient state, usable through `&self`.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<Forward> {
        self.forward_eval_with(x, MaskOverride::None)
    }

    pub fn forward_eval_with(&self, x: &Array4<f32>, over: MaskOverride) -> Result<Forward> {
        self.check_input(x)?;
        let c1 = self.conv1.forward(x);
        let (mut s, _) = self.pool1.forward(&c1);
        let mut attention = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            s = stage.block.forward_eval(&s)?;
            for (mi, am) in stage.attention.iter().enumerate() {
                let (next, mask) = am.forward_eval(&s, over)?;
                attention.push(AttentionRecord {
                    stage: si + 1,
                    module: mi,
                    mask: Rc::new(mask),
                });
                s = next;
            }
        }
        for rb in &self.stage4 {
            s = rb.forward_eval(&s)?;
        }
        let f_act = self.bn_final.forward_eval_relu(&s);
        let pooled = pool::global_avg_pool(&f_act);
        let z = self.fc.forward(&pooled);
        let logits: Vec<f32> = z.as_slice().unwrap().to_vec();
        let scores = logits
            .iter()
            .map(|&l| 1.0 / (1.0 + (-(l as f64)).exp()))
            .collect();
        Ok(Forward {
            scores,
            logits,
            attention,
            cache: None,
        })
    }

    /// Propagates per-sample logit gradients back through the network,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, cache: ModelCache, dlogits: &[f32]) {
        let ModelCache {
            x,
            conv1_cols,
            c1,
            pool_arg,
            stage_caches,
            stage4_caches,
            s4_out,
            f_act,
            bn_final,
            pooled,
            final_hw,
        } = cache;
        let b = dlogits.len();
        let dz = Array2::from_shape_vec((b, 1), dlogits.to_vec()).expect("logit grads");
        let dpooled = self.fc.backward(&pooled, &dz);
        let df = pool::global_avg_pool_backward(&dpooled, final_hw.0, final_hw.1);
        let mut grad = self.bn_final.backward_relu(&s4_out, &bn_final, &df, &f_act);
        drop(df);
        drop(f_act);
        drop(s4_out);
        for (rb, cache) in self.stage4.iter_mut().zip(stage4_caches.into_iter()).rev() {
            grad = rb.backward(cache, &grad);
        }
        for (stage, (b_cache, am_caches)) in self
            .stages
            .iter_mut()
            .zip(stage_caches.into_iter())
            .rev()
        {
            for (am, a_cache) in stage.attention.iter_mut().zip(am_caches.into_iter()).rev() {
                grad = am.backward(a_cache, &grad);
            }
            grad = stage.block.backward(b_cache, &grad);
        }
        let dc1 = self.pool1.backward(c1.dim(), &pool_arg, &grad);
        drop(grad);
        drop(c1);
        if let Some(cols) = conv1_cols {
            let m = cols.dim().0;
            let k = cols.dim().1;
            nn::gemm::sgemm_tn(
                k,
                m,
                self.conv1.cout,
                cols.as_slice().unwrap(),
                dc1.as_slice().unwrap(),
                1.0,
                &mut self.conv1.weight.grad,
            );
        } else {
            self.conv1.backward_weights_only(&x, &dc1);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Actual stage output shapes for a probe input, for conformance checks.
    pub fn trace_shapes(&self, x: &Array4<f32>) -> Result<Vec<(String, (usize, usize, usize))>> {
        self.check_input(x)?;
        let mut rows = Vec::new();
        let dim3 = |t: &Array4<f32>| {
            let (_, h, w, c) = t.dim();
            (h, w, c)
        };
        let c1 = self.conv1.forward(x);
        rows.push(("conv1".to_string(), dim3(&c1)));
        let (mut s, _) = self.pool1.forward(&c1);
        rows.push(("max pooling".to_string(), dim3(&s)));
        for (si, stage) in self.stages.iter().enumerate() {
            s = stage.block.forward_eval(&s)?;
            rows.push((format!("stage {} residual block", si + 1), dim3(&s)));
            for am in &stage.attention {
                let (next, _) = am.forward_eval(&s, MaskOverride::None)?;
                s = next;
            }
            rows.push((format!("stage {} attention module", si + 1), dim3(&s)));
        }
        for rb in &self.stage4 {
            s = rb.forward_eval(&s)?;
        }
        rows.push(("stage 4 residual block".to_string(), dim3(&s)));
        let f_act = self.bn_final.forward_eval_relu(&s);
        let pooled = pool::global_avg_pool(&f_act);
        rows.push(("average pooling".to_string(), (1, 1, pooled.dim().1)));
        rows.push(("fc sigmoid".to_string(), (1, 1, 1)));
        Ok(rows)
    }

    /// Direct access to an attention module, for composition-identity tests.
    pub fn attention_module(&self, stage: usize, module: usize) -> &AttentionModule {
        &self.stages[stage - 1].attention[module]
    }
}

impl Visit for RanModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        for stage in &mut self.stages {
            stage.block.visit_params(f);
            for am in &mut stage.attention {
                am.visit_params(f);
            }
        }
        for rb in &mut self.stage4 {
            rb.visit_params(f);
        }
        self.bn_final.visit_params(f);
        self.fc.visit_params(f);
    }
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        for stage in &mut self.stages {
            stage.block.visit_buffers(f);
            for am in &mut stage.attention {
                am.visit_buffers(f);
            }
        }
        for rb in &mut self.stage4 {
            rb.visit_buffers(f);
        }
        self.bn_final.visit_buffers(f);
    }
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"IRISRNK1";

/// Text sidecar stored next to the parameter blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_digest: String,
    pub created_at: String,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        format!(
            "epoch={}\nseed={}\nconfig_digest={}\ncreated_at={}\n",
            self.epoch, self.seed, self.config_digest, self.created_at
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut epoch = None;
        let mut seed = None;
        let mut digest = None;
        let mut created = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            match k {
                "epoch" => epoch = v.parse().ok(),
                "seed" => seed = v.parse().ok(),
                "config_digest" => digest = Some(v.to_string()),
                "created_at" => created = Some(v.to_string()),
                _ => {}
            }
        }
        Ok(Self {
            epoch: epoch.ok_or_else(|| Error::CorruptCheckpoint("missing epoch".into()))?,
            seed: seed.ok_or_else(|| Error::CorruptCheckpoint("missing seed".into()))?,
            config_digest: digest
                .ok_or_else(|| Error::CorruptCheckpoint("missing config_digest".into()))?,
            created_at: created.unwrap_or_default(),
        })
    }
}

pub fn meta_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".meta");
    std::path::PathBuf::from(p)
}

/// Writes the parameter blob and its metadata sidecar.
pub fn save_checkpoint(
    model: &mut RanModel,
    path: &Path,
    compose_mode: &str,
    meta: &CheckpointMeta,
) -> Result<()> {
    debug_assert_eq!(meta.config_digest, model.cfg.digest(compose_mode));
    let mut blob: Vec<u8> = Vec::new();
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    let mut entries: Vec<(String, Vec<f32>)> = Vec::new();
    model.visit_params(&mut |p| entries.push((p.name.clone(), p.value.clone())));
    model.visit_buffers(&mut |b| entries.push((b.name.clone(), b.value.clone())));
    blob.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, values) in &entries {
        let name_bytes = name.as_bytes();
        blob.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        blob.extend_from_slice(name_bytes);
        blob.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, blob)?;
    std::fs::write(meta_path(path), meta.to_text())?;
    Ok(())
}

/// Rebuilds a model from `cfg` and loads checkpoint parameters into it,
/// verifying the configuration digest first.
pub fn load_checkpoint(
    path: &Path,
    cfg: &RanConfig,
    compose_mode: &str,
) -> Result<(RanModel, CheckpointMeta)> {
    let meta_text = std::fs::read_to_string(meta_path(path))?;
    let meta = CheckpointMeta::from_text(&meta_text)?;
    let current = cfg.digest(compose_mode);
    if meta.config_digest != current {
        return Err(Error::DigestMismatch {
            checkpoint: meta.config_digest,
            current,
        });
    }
    let blob = std::fs::read(path)?;
    if blob.len() < 12 || &blob[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let mut offset = 8;
    let read_u16 = |blob: &[u8], o: &mut usize| -> Result<u16> {
        let v = u16::from_le_bytes(
            blob.get(*o..*o + 2)
                .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?
                .try_into()
                .unwrap(),
        );
        *o += 2;
        Ok(v)
    };
    let read_u32 = |blob: &[u8], o: &mut usize| -> Result<u32> {
        let v = u32::from_le_bytes(
            blob.get(*o..*o + 4)
                .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?
                .try_into()
                .unwrap(),
        );
        *o += 4;
        Ok(v)
    };
    let count = read_u32(&blob, &mut offset)? as usize;
    let mut entries: Vec<(String, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&blob, &mut offset)? as usize;
        let name = String::from_utf8(
            blob.get(offset..offset + name_len)
                .ok_or_else(|| Error::CorruptCheckpoint("truncated name".into()))?
                .to_vec(),
        )
        .map_err(|_| Error::CorruptCheckpoint("non-utf8 name".into()))?;
        offset += name_len;
        let len = read_u32(&blob, &mut offset)? as usize;
        let bytes = blob
            .get(offset..offset + 4 * len)
            .ok_or_else(|| Error::CorruptCheckpoint("truncated values".into()))?;
        offset += 4 * len;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, values));
    }

    let mut model = RanModel::build(cfg)?;
    let mut idx = 0usize;
    let mut apply = |name: &str, value: &mut Vec<f32>| -> Result<()> {
        let (got_name, got_values) = entries
            .get(idx)
            .ok_or_else(|| Error::CorruptCheckpoint("missing entries".into()))?;
        if got_name != name || got_values.len() != value.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "entry {idx}: expected {name}[{}], found {got_name}[{}]",
                value.len(),
                got_values.len()
            )));
        }
        value.copy_from_slice(got_values);
        idx += 1;
        Ok(())
    };
    let mut status = Ok(());
    model.visit_params(&mut |p| {
        if status.is_ok() {
            status = apply(&p.name, &mut p.value);
        }
    });
    model.visit_buffers(&mut |b| {
        if status.is_ok() {
            status = apply(&b.name, &mut b.value);
        }
    });
    status?;
    if idx != entries.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing entries",
            entries.len() - idx
        )));
    }
    // keep GEMM thread config untouched; loading is pure I/O
    let _ = gemm::threads();
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> RanConfig {
        RanConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            stage_widths: [4, 8, 16, 32, 64],
            attention_modules_per_stage: 1,
            trunk_residual_units: 2,
            seed,
        }
    }

    fn probe(cfg: &RanConfig, seed: u64) -> Array4<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(
            (2, cfg.input_height, cfg.input_width, cfg.input_channels),
            |_| rng.random_range(0.0f32..1.0),
        )
    }

    #[test]
    fn default_ladder_matches_table() {
        let cfg = RanConfig::default();
        let ladder = cfg.expected_ladder().unwrap();
        let want = [
            ("conv1", (96, 96, 16)),
            ("max pooling", (48, 48, 16)),
            ("stage 1 residual block", (48, 48, 64)),
            ("stage 1 attention module", (48, 48, 64)),
            ("stage 2 residual block", (24, 24, 128)),
            ("stage 2 attention module", (24, 24, 128)),
            ("stage 3 residual block", (12, 12, 256)),
            ("stage 3 attention module", (12, 12, 256)),
            ("stage 4 residual block", (6, 6, 512)),
            ("average pooling", (1, 1, 512)),
            ("fc sigmoid", (1, 1, 1)),
        ];
        assert_eq!(ladder.len(), want.len());
        for ((got_name, got_shape), (want_name, want_shape)) in ladder.iter().zip(&want) {
            assert_eq!(got_name, want_name);
            assert_eq!(got_shape, want_shape, "{want_name}");
        }
    }

    #[test]
    fn invalid_spatial_size_names_stage() {
        let cfg = RanConfig {
            input_height: 40, // 40 -> 20 -> attention at 20 (ok) -> 10 -> 10%4 != 0
            input_width: 40,
            ..RanConfig::default()
        };
        let err = cfg.expected_ladder().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage 2 attention"), "got: {msg}");
    }

    #[test]
    fn equal_seeds_build_identical_parameters() {
        let cfg = tiny_cfg(9);
        let mut m1 = RanModel::build(&cfg).unwrap();
        let mut m2 = RanModel::build(&cfg).unwrap();
        let mut v1 = Vec::new();
        m1.visit_params(&mut |p| v1.extend_from_slice(&p.value));
        let mut v2 = Vec::new();
        m2.visit_params(&mut |p| v2.extend_from_slice(&p.value));
        assert_eq!(v1.len(), v2.len());
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut m3 = RanModel::build(&RanConfig { seed: 10, ..cfg }).unwrap();
        let mut v3 = Vec::new();
        m3.visit_params(&mut |p| v3.extend_from_slice(&p.value));
        assert!(v1.iter().zip(&v3).any(|(a, b)| a.to_bits() != b.to_bits()));
    }

    #[test]
    fn residual_block_shapes_and_zero_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // table row: 48x48x16 in, widths (16,16,64), no downsample -> 48x48x64
        let mut rb = ResidualBlock::new("rb", 16, 64, false, &mut rng);
        let x = Rc::new(Array4::<f32>::from_elem((1, 48, 48, 16), 0.3));
        let (y, _) = rb.forward_train(&x).unwrap();
        assert_eq!(y.dim(), (1, 48, 48, 64));

        // table row: 12x12x256 in, downsample -> 6x6x512
        let mut rb2 = ResidualBlock::new("rb2", 256, 512, true, &mut rng);
        let x2 = Rc::new(Array4::<f32>::from_elem((1, 12, 12, 256), 0.1));
        let (y2, _) = rb2.forward_train(&x2).unwrap();
        assert_eq!(y2.dim(), (1, 6, 6, 512));

        // zero residual path -> output equals projected shortcut
        let mut rb3 = ResidualBlock::new("rb3", 8, 16, false, &mut rng);
        rb3.conv_expand.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let x3 = probe(
            &RanConfig {
                input_height: 8,
                input_width: 8,
                input_channels: 8,
                ..tiny_cfg(0)
            },
            7,
        );
        let x3 = Rc::new(x3);
        let (y3, cache) = rb3.forward_train(&x3).unwrap();
        let shortcut = rb3.conv_proj.forward(&cache.h);
        assert_eq!(y3, shortcut);

        // channel mismatch is an error
        let bad = Rc::new(Array4::<f32>::zeros((1, 8, 8, 5)));
        assert!(rb3.forward_train(&bad).is_err());
    }

    #[test]
    fn attention_composition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let am = AttentionModule::new("am", 8, 2, &mut rng);
        let x = probe(
            &RanConfig {
                input_height: 8,
                input_width: 8,
                input_channels: 8,
                ..tiny_cfg(0)
            },
            8,
        );

        // forced zero mask: f' == T(f) bit-exactly
        let (y_zero, _) = am.forward_eval(&x, MaskOverride::Zero).unwrap();
        let trunk = am.trunk_forward_eval(&x).unwrap();
        assert_eq!(y_zero, trunk);

        // forced unit mask: f' == 2 T(f)
        let (y_one, _) = am.forward_eval(&x, MaskOverride::One).unwrap();
        let doubled = trunk.mapv(|v| 2.0 * v);
        for (a, b) in y_one.iter().zip(doubled.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }

        // default forward: same shape, mask strictly inside (0,1)
        let (y, mask) = am.forward_eval(&x, MaskOverride::None).unwrap();
        assert_eq!(y.dim(), x.dim());
        for &m in mask.iter() {
            assert!(m > 0.0 && m < 1.0, "mask value {m}");
        }

        // spatial size not divisible by four is rejected
        let bad = Array4::<f32>::zeros((1, 6, 6, 8));
        assert!(am.forward_eval(&bad, MaskOverride::None).is_err());
    }

    #[test]
    fn forward_scores_in_open_interval_and_deterministic() {
        let cfg = tiny_cfg(11);
        let mut model = RanModel::build(&cfg).unwrap();
        let x = probe(&cfg, 12);
        let out = model.forward_train(x.clone()).unwrap();
        assert_eq!(out.scores.len(), 2);
        for &s in &out.scores {
            assert!(s > 0.0 && s < 1.0);
        }
        assert_eq!(out.attention.len(), 3);
        // identical inputs give identical scores
        let mut two_same = Array4::<f32>::zeros((2, 32, 32, 3));
        two_same
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&x.index_axis(ndarray::Axis(0), 0));
        two_same
            .index_axis_mut(ndarray::Axis(0), 1)
            .assign(&x.index_axis(ndarray::Axis(0), 0));
        let eval = model.forward_eval(&two_same).unwrap();
        assert_eq!(eval.scores[0], eval.scores[1]);

        // wrong input shape names expected vs actual
        let bad = Array4::<f32>::zeros((1, 16, 32, 3));
        let err = match model.forward_eval(&bad) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected shape error"),
        };
        assert!(err.contains("32x32x3") && err.contains("16x32x3"), "{err}");
    }

    #[test]
    fn trace_matches_expected_ladder_tiny() {
        let cfg = tiny_cfg(13);
        let model = RanModel::build(&cfg).unwrap();
        let x = probe(&cfg, 14);
        let trace = model.trace_shapes(&x).unwrap();
        let ladder = cfg.expected_ladder().unwrap();
        assert_eq!(trace, ladder);
    }

    #[test]
    fn residual_block_backward_matches_fd() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut rb = ResidualBlock::new("rb", 8, 16, true, &mut rng);
        let x = Rc::new(Array4::from_shape_fn((2, 8, 8, 8), |_| {
            rng.random_range(-1.0f32..1.0)
        }));
        let wfix = Array4::from_shape_fn((2, 4, 4, 16), |_| rng.random_range(-1.0f32..1.0));
        let loss = |rb: &mut ResidualBlock, x: &Rc<Array4<f32>>| -> f64 {
            let (y, _) = rb.forward_train(x).unwrap();
            y.iter().zip(wfix.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let (y, cache) = rb.forward_train(&x).unwrap();
        let _ = y;
        rb.visit_params(&mut |p| p.zero_grad());
        let dx = rb.backward(cache, &wfix);

        // input gradient
        let h = 1e-3f32;
        for &(bi, iy, ix, ci) in &[(0usize, 0usize, 0usize, 0usize), (1, 3, 5, 2), (0, 7, 7, 7)] {
            let mut xp = (*x).clone();
            xp[(bi, iy, ix, ci)] += h;
            let mut xm = (*x).clone();
            xm[(bi, iy, ix, ci)] -= h;
            let fd = (loss(&mut rb, &Rc::new(xp)) - loss(&mut rb, &Rc::new(xm))) / (2.0 * h as f64);
            let an = dx[(bi, iy, ix, ci)] as f64;
            if an.abs().max(fd.abs()) < 0.02 {
                continue; // below what f32 finite differences can resolve
            }
            let denom = an.abs().max(fd.abs());
            assert!(
                (an - fd).abs() / denom < 0.05,
                "block dx[{bi},{iy},{ix},{ci}]: analytic {an} vs fd {fd}"
            );
        }
        // a few parameter gradients across the block
        let mut names = Vec::new();
        rb.visit_params(&mut |p| names.push(p.name.clone()));
        for name in names {
            let idx = 1usize;
            let mut an = None;
            rb.visit_params(&mut |p| {
                if p.name == name && p.len() > idx {
                    an = Some(p.grad[idx] as f64);
                }
            });
            let Some(an) = an else { continue };
            let bump = |rb: &mut ResidualBlock, d: f32| {
                rb.visit_params(&mut |p| {
                    if p.name == name && p.len() > idx {
                        p.value[idx] += d;
                    }
                });
            };
            bump(&mut rb, h);
            let lp = loss(&mut rb, &x);
            bump(&mut rb, -2.0 * h);
            let lm = loss(&mut rb, &x);
            bump(&mut rb, h);
            let fd = (lp - lm) / (2.0 * h as f64);
            if an.abs().max(fd.abs()) < 0.02 {
                continue;
            }
            let denom = an.abs().max(fd.abs());
            assert!(
                (an - fd).abs() / denom < 0.05,
                "block param {name}[{idx}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn attention_module_backward_matches_fd() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let mut am = AttentionModule::new("am", 8, 2, &mut rng);
        let x = Rc::new(Array4::from_shape_fn((2, 8, 8, 8), |_| {
            rng.random_range(-1.0f32..1.0)
        }));
        let wfix = Array4::from_shape_fn((2, 8, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let loss = |am: &mut AttentionModule, x: &Rc<Array4<f32>>| -> f64 {
            let (y, _) = am.forward_train(x, MaskOverride::None).unwrap();
            y.iter().zip(wfix.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let (_, cache) = am.forward_train(&x, MaskOverride::None).unwrap();
        am.visit_params(&mut |p| p.zero_grad());
        let dx = am.backward(cache, &wfix);

        let h = 1e-3f32;
        for &(bi, iy, ix, ci) in &[(0usize, 0usize, 0usize, 0usize), (1, 3, 5, 2), (0, 7, 7, 7)] {
            let mut xp = (*x).clone();
            xp[(bi, iy, ix, ci)] += h;
            let mut xm = (*x).clone();
            xm[(bi, iy, ix, ci)] -= h;
            let fd = (loss(&mut am, &Rc::new(xp)) - loss(&mut am, &Rc::new(xm))) / (2.0 * h as f64);
            let an = dx[(bi, iy, ix, ci)] as f64;
            if an.abs().max(fd.abs()) < 0.02 {
                continue;
            }
            let denom = an.abs().max(fd.abs());
            assert!(
                (an - fd).abs() / denom < 0.05,
                "attention dx[{bi},{iy},{ix},{ci}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn stem_backward_matches_fd() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut conv = Conv2d::new("c", 3, 3, 1, 1, 3, 4, &mut rng);
        let pool = MaxPool2d { k: 3, stride: 2, pad: 1 };
        let x = Array4::from_shape_fn((2, 16, 16, 3), |_| rng.random_range(-1.0f32..1.0));
        let wfix = Array4::from_shape_fn((2, 8, 8, 4), |_| rng.random_range(-1.0f32..1.0));
        let loss = |conv: &Conv2d, x: &Array4<f32>| -> f64 {
            let c1 = conv.forward(x);
            let (p, _) = pool.forward(&c1);
            p.iter().zip(wfix.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let c1 = conv.forward(&x);
        let (_, arg) = pool.forward(&c1);
        conv.weight.zero_grad();
        let dc1 = pool.backward(c1.dim(), &arg, &wfix);
        let _ = conv.backward(&x, &dc1);
        let h = 1e-3f32;
        for wi in [0usize, 3, 11, 50] {
            let orig = conv.weight.value[wi];
            conv.weight.value[wi] = orig + h;
            let lp = loss(&conv, &x);
            conv.weight.value[wi] = orig - h;
            let lm = loss(&conv, &x);
            conv.weight.value[wi] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = conv.weight.grad[wi] as f64;
            if an.abs().max(fd.abs()) < 0.02 {
                continue;
            }
            let denom = an.abs().max(fd.abs());
            assert!(
                (an - fd).abs() / denom < 0.05,
                "stem w[{wi}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn backward_reaches_every_parameter() {
        // wiring check: after one backward, no parameter is left without
        // gradient signal
        let cfg = tiny_cfg(15);
        let mut model = RanModel::build(&cfg).unwrap();
        let x = probe(&cfg, 16);
        let out = model.forward_train(x).unwrap();
        model.zero_grads();
        model.backward(out.cache.unwrap(), &[1.0, -0.5]);
        let mut dead = Vec::new();
        model.visit_params(&mut |p| {
            if p.grad.iter().all(|&g| g == 0.0) {
                dead.push(p.name.clone());
            }
        });
        assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
    }

    #[test]
    fn tiny_model_overfits_a_small_batch() {
        // functional gradient check: plain SGD on four fixed samples must
        // drive the logit-side objective down by a wide margin
        use rand::Rng;
        let cfg = RanConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            stage_widths: [4, 8, 8, 8, 8],
            attention_modules_per_stage: 1,
            trunk_residual_units: 1,
            seed: 21,
        };
        let mut model = RanModel::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Array4::from_shape_fn((4, 32, 32, 3), |_| rng.random_range(0.0f32..1.0));
        let y = [1.0f32, 0.0, 1.0, 0.0];
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..120 {
            let out = model.forward_train(x.clone()).unwrap();
            // mean squared error on scores, gradient through the sigmoid
            let mut dlogits = vec![0.0f32; 4];
            let mut loss = 0.0f64;
            for i in 0..4 {
                let s = out.scores[i];
                let err = s - y[i] as f64;
                loss += err * err / 4.0;
                dlogits[i] = (2.0 * err * s * (1.0 - s) / 4.0) as f32;
            }
            first.get_or_insert(loss);
            last = loss;
            model.zero_grads();
            model.backward(out.cache.unwrap(), &dlogits);
            model.visit_params(&mut |p| {
                for (v, g) in p.value.iter_mut().zip(&p.grad) {
                    *v -= 0.05 * g;
                }
            });
        }
        let first = first.unwrap();
        assert!(
            last < first * 0.25,
            "optimization barely moved: {first} -> {last}"
        );
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(17);
        let mut model = RanModel::build(&cfg).unwrap();
        let x = probe(&cfg, 18);
        // push running stats away from init so buffers matter
        let _ = model.forward_train(x.clone()).unwrap();
        let before = model.forward_eval(&x).unwrap().scores;
        let meta = CheckpointMeta {
            epoch: 5,
            seed: cfg.seed,
            config_digest: cfg.digest("side_by_side"),
            created_at: "test".into(),
        };
        save_checkpoint(&mut model, &path, "side_by_side", &meta).unwrap();
        let (loaded, got_meta) = load_checkpoint(&path, &cfg, "side_by_side").unwrap();
        assert_eq!(got_meta.epoch, 5);
        let after = loaded.forward_eval(&x).unwrap().scores;
        assert_eq!(before, after, "bit-exact forward after roundtrip");

        // edited configuration must fail the digest check
        let other = RanConfig {
            trunk_residual_units: 1,
            ..cfg.clone()
        };
        assert!(matches!(
            load_checkpoint(&path, &other, "side_by_side"),
            Err(Error::DigestMismatch { .. })
        ));
        // and so must a different compose mode
        assert!(load_checkpoint(&path, &cfg, "channel_stack").is_err());
    }

    #[test]
    fn param_count_is_stable() {
        let mut model = RanModel::build(&tiny_cfg(1)).unwrap();
        let count = model.num_params();
        assert_eq!(count, RanModel::build(&tiny_cfg(2)).unwrap().num_params());
        assert!(count > 0);
    }
}
