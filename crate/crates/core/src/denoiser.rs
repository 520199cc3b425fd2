//! Conditional noise predictor `ε_θ(x_t, t, c_s, c_t)` with a learned null
//! scribble embedding, trained with condition dropout on the ε-prediction
//! mean squared error.
//!
//! The network is a small convolutional encoder–decoder. Every level adds a
//! projection of the timestep embedding; the class-set vector is projected
//! into the same embedding space before the shared time MLP. Scribble
//! channels are concatenated with the noisy image at the input.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::nn::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_bias_grad, clip_grad_norm, concat_channels, init_normal,
    silu, silu_backward, split_channels, upsample2, upsample2_backward, Act, Conv2d, ConvCache, LrSchedule,
    Optimizer, OptimizerConfig, ParamLayout, Real,
};
use crate::rng::{fill_normal, keyed_rng, LabRng};
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::shapesworld::{Condition, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub cond_channels: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of the first level; level `l` uses `base_width · 2^l`.
    pub base_width: usize,
    /// Number of resolution levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Number of diffusion timesteps the network is trained for.
    pub timesteps: usize,
    pub null_init_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            cond_channels: 3,
            num_classes: 4,
            height: 32,
            width: 32,
            base_width: 16,
            depth: 3,
            time_embed_dim: 32,
            timesteps: 200,
            null_init_std: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("denoiser: {m}")));
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.base_width == 0 || self.image_channels == 0 || self.cond_channels == 0 {
            return bad("widths and channel counts must be positive");
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be even and >= 2");
        }
        let div = 1usize << (self.depth - 1);
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) || self.height < div {
            return bad("spatial size must be divisible by 2^(depth-1)");
        }
        if self.timesteps == 0 {
            return bad("timesteps must be >= 1");
        }
        if self.depth > 6 {
            return bad("depth above 6 is not supported");
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Layer table; all weights live in one flat vector described by `layout`.
#[derive(Debug, Clone, PartialEq)]
struct Net {
    layout: ParamLayout,
    class_proj: Conv2d,
    time_mlp: Conv2d,
    enc_in: Vec<Conv2d>,
    enc_temb: Vec<Conv2d>,
    enc_mid: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    dec_temb: Vec<Conv2d>,
    out: Conv2d,
    null: std::ops::Range<usize>,
}

impl Net {
    fn build(cfg: &DenoiserConfig) -> Net {
        let mut layout = ParamLayout::default();
        let e = cfg.time_embed_dim;
        let class_proj = Conv2d::new(&mut layout, "class_proj", cfg.num_classes, e, 1, 1);
        let time_mlp = Conv2d::new(&mut layout, "time_mlp", e, e, 1, 1);
        let mut enc_in = Vec::new();
        let mut enc_temb = Vec::new();
        let mut enc_mid = Vec::new();
        for l in 0..cfg.depth {
            let cin = if l == 0 {
                cfg.image_channels + cfg.cond_channels
            } else {
                cfg.width_at(l - 1)
            };
            let c = cfg.width_at(l);
            enc_in.push(Conv2d::new(&mut layout, &format!("enc{l}.conv1"), cin, c, 3, 1));
            enc_temb.push(Conv2d::new(&mut layout, &format!("enc{l}.temb"), e, c, 1, 1));
            enc_mid.push(Conv2d::new(&mut layout, &format!("enc{l}.conv2"), c, c, 3, 1));
        }
        // dec[l] for l = 0..depth-1 upsamples level l+1 into level l.
        let mut dec = Vec::new();
        let mut dec_temb = Vec::new();
        for l in 0..cfg.depth.saturating_sub(1) {
            let c = cfg.width_at(l);
            dec.push(Conv2d::new(&mut layout, &format!("dec{l}.conv"), cfg.width_at(l + 1) + c, c, 3, 1));
            dec_temb.push(Conv2d::new(&mut layout, &format!("dec{l}.temb"), e, c, 1, 1));
        }
        let out = Conv2d::new(&mut layout, "out", cfg.width_at(0), cfg.image_channels, 3, 1);
        let null = layout.push("null_embedding", &[cfg.cond_channels, cfg.height, cfg.width]);
        Net {
            layout,
            class_proj,
            time_mlp,
            enc_in,
            enc_temb,
            enc_mid,
            dec,
            dec_temb,
            out,
            null,
        }
    }
}

/// Conditioning for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum CondInput<'a> {
    /// Scribble channels and class set.
    Full(&'a Condition),
    /// Null scribble embedding, class set retained.
    NullScribble(&'a [f64]),
    /// Null scribble embedding and an all-zero class set.
    Null,
}

struct Batch<T> {
    x: Act<T>,
    cond: Act<T>,
    class: Act<T>,
    temb_sin: Act<T>,
    /// Items whose scribble channels are the null embedding.
    nulled: Vec<bool>,
}

struct Caches<T> {
    class_proj: ConvCache<T>,
    time_pre: Act<T>,
    time_mlp: ConvCache<T>,
    temb: Act<T>,
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
    out: ConvCache<T>,
}

struct EncCache<T> {
    conv1: ConvCache<T>,
    temb: ConvCache<T>,
    pre1: Act<T>,
    conv2: ConvCache<T>,
    pre2: Act<T>,
}

struct DecCache<T> {
    conv: ConvCache<T>,
    temb: ConvCache<T>,
    pre: Act<T>,
    skip_channels: usize,
}

fn sinusoidal<T: Real>(ts: &[usize], dim: usize) -> Act<T> {
    let half = dim / 2;
    let mut a = Act::zeros(dim, ts.len(), 1, 1);
    for (b, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            a.data[i * ts.len() + b] = T::of(arg.sin());
            a.data[(i + half) * ts.len() + b] = T::of(arg.cos());
        }
    }
    a
}

impl Net {
    fn forward<T: Real>(&self, p: &[T], inp: &Batch<T>) -> (Act<T>, Caches<T>) {
        let depth = self.enc_in.len();
        let (cproj, class_proj) = self.class_proj.forward(p, &inp.class);
        let mut h0 = cproj;
        h0.add_assign(&inp.temb_sin);
        let (time_pre, time_mlp) = self.time_mlp.forward(p, &h0);
        let temb = silu(&time_pre);

        let mut cur = concat_channels(&inp.x, &inp.cond);
        let mut skips: Vec<Act<T>> = Vec::with_capacity(depth);
        let mut enc = Vec::with_capacity(depth);
        for l in 0..depth {
            if l > 0 {
                cur = avg_pool2(&cur);
            }
            let (mut a, conv1) = self.enc_in[l].forward(p, &cur);
            let (te, temb_c) = self.enc_temb[l].forward(p, &temb);
            add_channel_bias(&mut a, &te);
            let s1 = silu(&a);
            let (b, conv2) = self.enc_mid[l].forward(p, &s1);
            let s2 = silu(&b);
            enc.push(EncCache {
                conv1,
                temb: temb_c,
                pre1: a,
                conv2,
                pre2: b,
            });
            cur = s2.clone();
            skips.push(s2);
        }
        let mut dec: Vec<Option<DecCache<T>>> = (0..depth.saturating_sub(1)).map(|_| None).collect();
        for l in (0..depth.saturating_sub(1)).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &skips[l]);
            let (mut d, conv) = self.dec[l].forward(p, &cat);
            let (te, temb_c) = self.dec_temb[l].forward(p, &temb);
            add_channel_bias(&mut d, &te);
            cur = silu(&d);
            dec[l] = Some(DecCache {
                conv,
                temb: temb_c,
                pre: d,
                skip_channels: up.c,
            });
        }
        let (out, out_cache) = self.out.forward(p, &cur);
        (
            out,
            Caches {
                class_proj,
                time_pre,
                time_mlp,
                temb,
                enc,
                dec: dec.into_iter().map(|d| d.expect("decoder level cached")).collect(),
                out: out_cache,
            },
        )
    }

    /// Backpropagates `dout` and accumulates into `g`, including the null
    /// embedding gradient of nulled items.
    fn backward<T: Real>(&self, p: &[T], g: &mut [T], inp: &Batch<T>, c: &Caches<T>, dout: &Act<T>) {
        let depth = self.enc_in.len();
        let mut dtemb = Act::zeros(c.temb.c, c.temb.b, 1, 1);
        let dcur = self.out.backward(p, g, &c.out, dout, true).expect("dx");
        let mut dskips: Vec<Option<Act<T>>> = (0..depth).map(|_| None).collect();
        let mut dcur = dcur;
        for l in 0..depth.saturating_sub(1) {
            let dc = &c.dec[l];
            let dd = silu_backward(&dc.pre, &dcur);
            let dte = channel_bias_grad(&dd);
            let dt = self.dec_temb[l].backward(p, g, &dc.temb, &dte, true).expect("dx");
            dtemb.add_assign(&dt);
            let dcat = self.dec[l].backward(p, g, &dc.conv, &dd, true).expect("dx");
            let (dup, dskip) = split_channels(&dcat, dc.skip_channels);
            add_into(&mut dskips[l], dskip);
            dcur = upsample2_backward(&dup);
        }
        // `dcur` now holds the gradient w.r.t. the deepest encoder output.
        add_into(&mut dskips[depth - 1], dcur);
        let mut dinput = None;
        for l in (0..depth).rev() {
            let ec = &c.enc[l];
            let ds2 = dskips[l].take().expect("encoder gradient");
            let db = silu_backward(&ec.pre2, &ds2);
            let ds1 = self.enc_mid[l].backward(p, g, &ec.conv2, &db, true).expect("dx");
            let da = silu_backward(&ec.pre1, &ds1);
            let dte = channel_bias_grad(&da);
            let dt = self.enc_temb[l].backward(p, g, &ec.temb, &dte, true).expect("dx");
            dtemb.add_assign(&dt);
            let need_dx = l > 0 || inp.nulled.iter().any(|&n| n);
            let dx = self.enc_in[l].backward(p, g, &ec.conv1, &da, need_dx);
            if l > 0 {
                add_into(&mut dskips[l - 1], avg_pool2_backward(&dx.expect("dx")));
            } else {
                dinput = dx;
            }
        }
        if let Some(dinp) = dinput {
            let (_, dcond) = split_channels(&dinp, inp.x.c);
            let hw = dcond.h * dcond.w;
            let gnull = &mut g[self.null.clone()];
            for (b, _) in inp.nulled.iter().enumerate().filter(|(_, &n)| n) {
                for ch in 0..dcond.c {
                    let src = &dcond.data[(ch * dcond.b + b) * hw..(ch * dcond.b + b + 1) * hw];
                    for (acc, &v) in gnull[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                        *acc = *acc + v;
                    }
                }
            }
        }
        let dpre = silu_backward(&c.time_pre, &dtemb);
        let dh0 = self.time_mlp.backward(p, g, &c.time_mlp, &dpre, true).expect("dx");
        self.class_proj.backward(p, g, &c.class_proj, &dh0, false);
    }
}

fn add_into<T: Real>(slot: &mut Option<Act<T>>, v: Act<T>) {
    match slot {
        Some(a) => a.add_assign(&v),
        None => *slot = Some(v),
    }
}

/// A trained (or freshly initialised) noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    net: Net,
    params: Vec<f32>,
}

/// One training example: clean image and its condition.
pub type TrainItem<'a> = (&'a ImageGrid, &'a Condition);

/// Instrumentation returned by [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub dropped: usize,
    pub items: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
    pub dropout_rate: f64,
    /// Also zero the class-set vector of dropped items.
    pub drop_class_set: bool,
    pub grad_clip: Option<f64>,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 0.1,
            lr_schedule: LrSchedule::Linear { end_factor: 0.0 },
            optimizer: OptimizerConfig::Sgd { momentum: 0.9 },
            dropout_rate: 0.1,
            drop_class_set: false,
            grad_clip: Some(1.0),
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_denoiser(config: &DenoiserConfig, seed: u64) -> Result<Denoiser> {
    config.validate()?;
    let net = Net::build(config);
    let mut params = vec![0.0f32; net.layout.total()];
    let mut rng = keyed_rng(seed, "denoiser-init", &[]);
    net.class_proj.init(&mut params, &mut rng, 1.0);
    net.time_mlp.init(&mut params, &mut rng, 1.0);
    for l in 0..config.depth {
        net.enc_in[l].init(&mut params, &mut rng, 1.0);
        net.enc_temb[l].init(&mut params, &mut rng, 0.5);
        net.enc_mid[l].init(&mut params, &mut rng, 1.0);
    }
    for l in 0..net.dec.len() {
        net.dec[l].init(&mut params, &mut rng, 1.0);
        net.dec_temb[l].init(&mut params, &mut rng, 0.5);
    }
    net.out.init(&mut params, &mut rng, 0.1);
    init_normal(&mut rng, &mut params[net.null.clone()], config.null_init_std);
    Ok(Denoiser {
        config: config.clone(),
        net,
        params,
    })
}

impl Denoiser {
    /// Rebuilds a denoiser from stored parameters.
    pub fn from_params(config: DenoiserConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let net = Net::build(&config);
        if params.len() != net.layout.total() {
            return Err(Error::shape(net.layout.total(), params.len()));
        }
        Ok(Self { config, net, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.net.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn null_embedding(&self) -> &[f32] {
        &self.params[self.net.null.clone()]
    }

    pub fn null_range(&self) -> std::ops::Range<usize> {
        self.net.null.clone()
    }

    fn check_image(&self, x: &ImageGrid) -> Result<()> {
        let want = (self.config.image_channels, self.config.height, self.config.width);
        if x.shape() != want {
            return Err(Error::shape(want, x.shape()));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.config.timesteps,
            });
        }
        Ok(())
    }

    fn check_cond(&self, cond: &CondInput<'_>) -> Result<()> {
        let want = (self.config.cond_channels, self.config.height, self.config.width);
        let classes = match cond {
            CondInput::Full(c) => {
                if c.scribble_channels.shape() != want {
                    return Err(Error::shape(want, c.scribble_channels.shape()));
                }
                c.class_set_vector.len()
            }
            CondInput::NullScribble(v) => v.len(),
            CondInput::Null => self.config.num_classes,
        };
        if classes != self.config.num_classes {
            return Err(Error::shape(self.config.num_classes, classes));
        }
        Ok(())
    }

    fn assemble<T: Real>(&self, p: &[T], xs: &[&ImageGrid], ts: &[usize], conds: &[CondInput<'_>]) -> Batch<T> {
        let cfg = &self.config;
        let (h, w) = (cfg.height, cfg.width);
        let hw = h * w;
        let b = xs.len();
        let mut x = Act::zeros(cfg.image_channels, b, h, w);
        let mut cond = Act::zeros(cfg.cond_channels, b, h, w);
        let mut class = Act::zeros(cfg.num_classes, b, 1, 1);
        let mut nulled = vec![false; b];
        let null = &p[self.net.null.clone()];
        for (i, img) in xs.iter().enumerate() {
            for c in 0..cfg.image_channels {
                let dst = &mut x.data[(c * b + i) * hw..(c * b + i + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(&img.data()[c * hw..(c + 1) * hw]) {
                    *d = T::of(s);
                }
            }
            let (scribble, class_vec): (Option<&ImageGrid>, Option<&[f64]>) = match conds[i] {
                CondInput::Full(c) => (Some(&c.scribble_channels), Some(&c.class_set_vector)),
                CondInput::NullScribble(v) => (None, Some(v)),
                CondInput::Null => (None, None),
            };
            nulled[i] = scribble.is_none();
            for c in 0..cfg.cond_channels {
                let dst = &mut cond.data[(c * b + i) * hw..(c * b + i + 1) * hw];
                match scribble {
                    Some(s) => {
                        for (d, &v) in dst.iter_mut().zip(&s.data()[c * hw..(c + 1) * hw]) {
                            *d = T::of(v);
                        }
                    }
                    None => dst.copy_from_slice(&null[c * hw..(c + 1) * hw]),
                }
            }
            if let Some(v) = class_vec {
                for (k, &bit) in v.iter().enumerate() {
                    class.data[k * b + i] = T::of(bit);
                }
            }
        }
        Batch {
            x,
            cond,
            class,
            temb_sin: sinusoidal(ts, cfg.time_embed_dim),
            nulled,
        }
    }

    fn split_output(&self, out: &Act<f32>) -> Vec<ImageGrid> {
        let cfg = &self.config;
        let hw = cfg.height * cfg.width;
        (0..out.b)
            .map(|i| {
                let mut data = Vec::with_capacity(cfg.image_channels * hw);
                for c in 0..cfg.image_channels {
                    data.extend(
                        out.data[(c * out.b + i) * hw..(c * out.b + i + 1) * hw]
                            .iter()
                            .map(|&v| v as f64),
                    );
                }
                ImageGrid::from_vec(cfg.image_channels, cfg.height, cfg.width, data).expect("output shape")
            })
            .collect()
    }

    /// Batched noise prediction. Each output column depends only on its own
    /// input, so results do not depend on how items are batched.
    pub fn predict_noise_batch(&self, xs: &[&ImageGrid], ts: &[usize], conds: &[CondInput<'_>]) -> Result<Vec<ImageGrid>> {
        if xs.len() != ts.len() || xs.len() != conds.len() {
            return Err(Error::InvalidArgument("batch components differ in length".into()));
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        for ((x, &t), c) in xs.iter().zip(ts).zip(conds) {
            self.check_image(x)?;
            self.check_t(t)?;
            self.check_cond(c)?;
        }
        let batch = self.assemble::<f32>(&self.params, xs, ts, conds);
        let (out, _) = self.net.forward(&self.params, &batch);
        Ok(self.split_output(&out))
    }

    pub fn predict_noise(&self, x_t: &ImageGrid, t: usize, cond: CondInput<'_>) -> Result<ImageGrid> {
        Ok(self.predict_noise_batch(&[x_t], &[t], &[cond])?.remove(0))
    }

    /// Loss and flat gradient for fully specified noisy inputs, in precision `T`.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &[T],
        xs: &[&ImageGrid],
        ts: &[usize],
        conds: &[CondInput<'_>],
        targets: &[&ImageGrid],
    ) -> Result<(f64, Vec<T>)> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        for ((x, &t), (c, e)) in xs.iter().zip(ts).zip(conds.iter().zip(targets)) {
            self.check_image(x)?;
            self.check_image(e)?;
            self.check_t(t)?;
            self.check_cond(c)?;
        }
        let batch = self.assemble::<T>(params, xs, ts, conds);
        let (out, caches) = self.net.forward(params, &batch);
        let cfg = &self.config;
        let hw = cfg.height * cfg.width;
        let b = xs.len();
        let m = (out.data.len()) as f64;
        let mut dout = Act::zeros(out.c, out.b, out.h, out.w);
        let mut loss = 0.0;
        for (i, e) in targets.iter().enumerate() {
            for c in 0..cfg.image_channels {
                let base = (c * b + i) * hw;
                for (j, &tv) in e.data()[c * hw..(c + 1) * hw].iter().enumerate() {
                    let diff = out.data[base + j].f64() - tv;
                    loss += diff * diff;
                    dout.data[base + j] = T::of(2.0 * diff / m);
                }
            }
        }
        let mut grads = vec![T::zero(); params.len()];
        self.net.backward(params, &mut grads, &batch, &caches, &dout);
        Ok((loss / m, grads))
    }
}

/// Per-item draws of one training step.
struct Draw {
    t: usize,
    eps: ImageGrid,
    dropped: bool,
}

fn draw_items(
    d: &Denoiser,
    n: usize,
    timesteps: usize,
    dropout_rate: f64,
    rng: &mut LabRng,
) -> Vec<Draw> {
    let cfg = d.config();
    (0..n)
        .map(|_| {
            let dropped = rng.random::<f64>() < dropout_rate;
            let t = rng.random_range(1..=timesteps);
            let mut eps = ImageGrid::zeros(cfg.image_channels, cfg.height, cfg.width);
            fill_normal(rng, eps.data_mut());
            Draw { t, eps, dropped }
        })
        .collect()
}

/// One optimizer step on the ε-prediction loss. Returns the step statistics;
/// a non-finite loss aborts with a diagnostics report.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    d: &mut Denoiser,
    opt: &mut Optimizer,
    batch: &[TrainItem<'_>],
    s: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    lr: f64,
    rng: &mut LabRng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout_rate) {
        return Err(Error::InvalidArgument(format!("dropout_rate {} outside [0, 1)", cfg.dropout_rate)));
    }
    if s.timesteps() != d.config.timesteps {
        return Err(Error::InvalidArgument(format!(
            "schedule has T={} but denoiser was built for T={}",
            s.timesteps(),
            d.config.timesteps
        )));
    }
    let draws = draw_items(d, batch.len(), s.timesteps(), cfg.dropout_rate, rng);
    let noisy: Vec<ImageGrid> = batch
        .iter()
        .zip(&draws)
        .map(|((x0, _), dr)| forward_diffuse(s, x0, dr.t, &dr.eps))
        .collect::<Result<_>>()?;
    let conds: Vec<CondInput<'_>> = batch
        .iter()
        .zip(&draws)
        .map(|((_, c), dr)| match (dr.dropped, cfg.drop_class_set) {
            (false, _) => CondInput::Full(c),
            (true, false) => CondInput::NullScribble(&c.class_set_vector),
            (true, true) => CondInput::Null,
        })
        .collect();
    let xs: Vec<&ImageGrid> = noisy.iter().collect();
    let ts: Vec<usize> = draws.iter().map(|dr| dr.t).collect();
    let targets: Vec<&ImageGrid> = draws.iter().map(|dr| &dr.eps).collect();
    let (loss, mut grads) = d.loss_and_grad::<f32>(&d.params, &xs, &ts, &conds, &targets)?;
    let grad_norm = match cfg.grad_clip {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt(),
    };
    if !loss.is_finite() || !grad_norm.is_finite() {
        let pnorm = d.params.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        return Err(Error::NonFiniteLoss {
            step: 0,
            report: format!("loss={loss} grad_norm={grad_norm} param_norm={pnorm} lr={lr} batch={}", batch.len()),
        });
    }
    opt.step(&mut d.params, &grads, lr);
    if d.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            report: format!("parameters became non-finite after update (loss={loss}, lr={lr})"),
        });
    }
    Ok(StepStats {
        loss,
        dropped: draws.iter().filter(|dr| dr.dropped).count(),
        items: batch.len(),
        grad_norm,
    })
}

/// Result of [`train`]: the per-epoch mean loss and dropout instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_curve: Vec<f64>,
    pub dropped: usize,
    pub items: usize,
}

/// Epoch loop over `dataset` with per-epoch shuffling; deterministic in `seed`.
pub fn train(
    d: Denoiser,
    dataset: &Dataset,
    s: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    seed: u64,
) -> Result<(Denoiser, TrainReport)> {
    cfg.validate()?;
    let mut d = d;
    let mut report = TrainReport {
        loss_curve: Vec::with_capacity(cfg.epochs),
        dropped: 0,
        items: 0,
    };
    if cfg.epochs == 0 || dataset.is_empty() {
        return Ok((d, report));
    }
    let n = dataset.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), d.num_params());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(seed, "denoiser-epoch", &[epoch as u64]));
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainItem<'_>> = chunk
                .iter()
                .map(|&i| (&dataset.items[i].scene.image, &dataset.items[i].condition))
                .collect();
            let lr = cfg.lr_schedule.lr_at(cfg.lr, step, total);
            let mut rng = keyed_rng(seed, "denoiser-step", &[epoch as u64, bi as u64]);
            let stats = train_step(&mut d, &mut opt, &batch, s, cfg, lr, &mut rng).map_err(|e| match e {
                Error::NonFiniteLoss { report, .. } => Error::NonFiniteLoss {
                    step,
                    report: format!("epoch {epoch}: {report}"),
                },
                other => other,
            })?;
            sum += stats.loss * chunk.len() as f64;
            report.dropped += stats.dropped;
            report.items += stats.items;
            step += 1;
        }
        report.loss_curve.push(sum / n as f64);
    }
    Ok((d, report))
}
