//! Scribble-supervised per-pixel classifier.
//!
//! A stack of dilated 3×3 convolutions at full resolution followed by a 1×1
//! classifier, trained with cross-entropy over labeled pixels only.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{compose_epoch, AugmentationScheme, EpochDataset, SyntheticBank};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelGrid};
use crate::metrics::miou;
use crate::nn::{clip_grad_norm, silu, silu_backward, Act, Conv2d, ConvCache, LrSchedule, Optimizer, OptimizerConfig, ParamLayout, Real};
use crate::rng::keyed_rng;
use crate::shapesworld::{Dataset, ScribbleMap, UNLABELED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentorConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
    /// Dilation of each 3×3 layer; a 1×1 classifier follows.
    pub dilations: Vec<usize>,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 4,
            width: 32,
            dilations: vec![1, 1, 2, 4, 8],
        }
    }
}

impl SegmentorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::InvalidConfig("segmentor needs at least one layer with dilation >= 1".into()));
        }
        if self.width == 0 || self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig("segmentor widths must be positive and num_classes >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentor {
    config: SegmentorConfig,
    layout: ParamLayout,
    layers: Vec<Conv2d>,
    head: Conv2d,
    params: Vec<f32>,
}

fn build(cfg: &SegmentorConfig) -> (ParamLayout, Vec<Conv2d>, Conv2d) {
    let mut layout = ParamLayout::default();
    let mut layers = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        layers.push(Conv2d::new(&mut layout, &format!("conv{i}"), cin, cfg.width, 3, d));
        cin = cfg.width;
    }
    let head = Conv2d::new(&mut layout, "head", cin, cfg.num_classes, 1, 1);
    (layout, layers, head)
}

pub fn init_segmentor(cfg: &SegmentorConfig, seed: u64) -> Result<Segmentor> {
    cfg.validate()?;
    let (layout, layers, head) = build(cfg);
    let mut params = vec![0.0f32; layout.total()];
    let mut rng = keyed_rng(seed, "segmentor-init", &[]);
    for l in &layers {
        l.init(&mut params, &mut rng, 1.0);
    }
    head.init(&mut params, &mut rng, 0.1);
    Ok(Segmentor {
        config: cfg.clone(),
        layout,
        layers,
        head,
        params,
    })
}

struct Caches<T> {
    convs: Vec<ConvCache<T>>,
    pres: Vec<Act<T>>,
    head: ConvCache<T>,
}

impl Segmentor {
    pub fn from_params(config: SegmentorConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let (layout, layers, head) = build(&config);
        if params.len() != layout.total() {
            return Err(Error::shape(layout.total(), params.len()));
        }
        Ok(Self {
            config,
            layout,
            layers,
            head,
            params,
        })
    }

    pub fn config(&self) -> &SegmentorConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward<T: Real>(&self, p: &[T], x: &Act<T>) -> (Act<T>, Caches<T>) {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = None;
        for l in &self.layers {
            let (pre, cache) = l.forward(p, cur.as_ref().unwrap_or(x));
            cur = Some(silu(&pre));
            convs.push(cache);
            pres.push(pre);
        }
        let (out, head) = self.head.forward(p, cur.as_ref().expect("at least one layer"));
        (out, Caches { convs, pres, head })
    }

    fn backward<T: Real>(&self, p: &[T], g: &mut [T], c: &Caches<T>, dout: &Act<T>) {
        let mut d = self.head.backward(p, g, &c.head, dout, true).expect("dx");
        for i in (0..self.layers.len()).rev() {
            let dpre = silu_backward(&c.pres[i], &d);
            match self.layers[i].backward(p, g, &c.convs[i], &dpre, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    fn stack<T: Real>(&self, images: &[&ImageGrid]) -> Result<Act<T>> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (c, h, w) = first.shape();
        if c != self.config.in_channels {
            return Err(Error::shape((self.config.in_channels, h, w), first.shape()));
        }
        let b = images.len();
        let hw = h * w;
        let mut x = Act::zeros(c, b, h, w);
        for (i, img) in images.iter().enumerate() {
            if img.shape() != (c, h, w) {
                return Err(Error::shape((c, h, w), img.shape()));
            }
            for ch in 0..c {
                for (dst, &v) in x.data[(ch * b + i) * hw..(ch * b + i + 1) * hw]
                    .iter_mut()
                    .zip(&img.data()[ch * hw..(ch + 1) * hw])
                {
                    *dst = T::of(v);
                }
            }
        }
        Ok(x)
    }

    /// Per-pixel class logits for a batch of images.
    pub fn predict_batch(&self, images: &[&ImageGrid]) -> Result<Vec<ImageGrid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.stack::<f32>(images)?;
        let (out, _) = self.forward(&self.params, &x);
        Ok(unstack(&out))
    }

    pub fn predict(&self, image: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Argmax class maps, computed in batches of 64.
    pub fn predict_labels(&self, images: &[&ImageGrid]) -> Result<Vec<LabelGrid>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(self.predict_batch(chunk)?.iter().map(argmax));
        }
        Ok(out)
    }

    /// Mean loss over the batch and its gradient in precision `T`.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &[T],
        images: &[&ImageGrid],
        labels: &[&ScribbleMap],
        pairwise: Option<Pairwise>,
    ) -> Result<(f64, Vec<T>)> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        if images.len() != labels.len() {
            return Err(Error::shape(images.len(), labels.len()));
        }
        let x = self.stack::<T>(images)?;
        let (out, caches) = self.forward(params, &x);
        let logits: Vec<Vec<f64>> = unstack_raw(&out);
        let (h, w) = (out.h, out.w);
        let mut total_labeled = 0usize;
        for sm in labels {
            if sm.labels.shape() != (h, w) {
                return Err(Error::shape((h, w), sm.labels.shape()));
            }
            total_labeled += sm.labeled_count();
        }
        if total_labeled == 0 {
            return Err(Error::InvalidArgument("batch has no labeled pixels".into()));
        }
        let mut loss = 0.0;
        let mut dout = Act::zeros(out.c, out.b, h, w);
        let hw = h * w;
        let cls = out.c;
        for (b, (lg, sm)) in logits.iter().zip(labels).enumerate() {
            let probs = softmax_planes(lg, cls, hw);
            let mut dz = vec![0.0; cls * hw];
            loss += ce_accumulate(lg, &probs, &sm.labels, cls, hw, 1.0 / total_labeled as f64, &mut dz);
            if let Some(pw) = pairwise {
                let scale = pw.weight / (images.len() as f64);
                loss += pairwise_accumulate(&probs, images[b], cls, h, w, pw.sigma, scale, &mut dz);
            }
            for k in 0..cls {
                for j in 0..hw {
                    dout.data[(k * out.b + b) * hw + j] = T::of(dz[k * hw + j]);
                }
            }
        }
        let mut grads = vec![T::zero(); params.len()];
        self.backward(params, &mut grads, &caches, &dout);
        Ok((loss, grads))
    }
}

fn unstack_raw<T: Real>(a: &Act<T>) -> Vec<Vec<f64>> {
    let hw = a.h * a.w;
    (0..a.b)
        .map(|i| {
            let mut v = Vec::with_capacity(a.c * hw);
            for c in 0..a.c {
                v.extend(a.data[(c * a.b + i) * hw..(c * a.b + i + 1) * hw].iter().map(|x| x.f64()));
            }
            v
        })
        .collect()
}

fn unstack(a: &Act<f32>) -> Vec<ImageGrid> {
    unstack_raw(a)
        .into_iter()
        .map(|v| ImageGrid::from_vec(a.c, a.h, a.w, v).expect("logit shape"))
        .collect()
}

/// Class map from `C×H×W` logits; ties go to the lower class id.
pub fn argmax(logits: &ImageGrid) -> LabelGrid {
    let (c, h, w) = logits.shape();
    let hw = h * w;
    let d = logits.data();
    let data = (0..hw)
        .map(|j| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + j] > d[best * hw + j] {
                    best = k;
                }
            }
            best as i16
        })
        .collect();
    LabelGrid::from_vec(h, w, data).expect("label shape")
}

fn softmax_planes(lg: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut p = vec![0.0; c * hw];
    for j in 0..hw {
        let m = (0..c).map(|k| lg[k * hw + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (lg[k * hw + j] - m).exp();
            p[k * hw + j] = e;
            z += e;
        }
        for k in 0..c {
            p[k * hw + j] /= z;
        }
    }
    p
}

/// Adds `scale · Σ −log p_y` over labeled pixels to the loss and its logit
/// gradient to `dz`.
fn ce_accumulate(lg: &[f64], probs: &[f64], labels: &LabelGrid, c: usize, hw: usize, scale: f64, dz: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for (j, &y) in labels.data().iter().enumerate() {
        if y == UNLABELED {
            continue;
        }
        let y = y as usize;
        let m = (0..c).map(|k| lg[k * hw + j]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|k| (lg[k * hw + j] - m).exp()).sum::<f64>().ln();
        loss += scale * (lse - lg[y * hw + j]);
        for k in 0..c {
            dz[k * hw + j] += scale * (probs[k * hw + j] - if k == y { 1.0 } else { 0.0 });
        }
    }
    loss
}

/// Optional smoothness term: for each 4-neighbour pair,
/// `exp(−‖I_i−I_j‖²/2σ²)·(1 − p_i·p_j)`, averaged over pairs and scaled by
/// `weight`. A lightweight colour-affinity regulariser, not a dense CRF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pairwise {
    pub weight: f64,
    pub sigma: f64,
}

#[allow(clippy::too_many_arguments)]
fn pairwise_accumulate(probs: &[f64], img: &ImageGrid, c: usize, h: usize, w: usize, sigma: f64, scale: f64, dz: &mut [f64]) -> f64 {
    let hw = h * w;
    let ch = img.channels();
    let pairs = (h * (w - 1) + (h - 1) * w).max(1) as f64;
    let s = scale / pairs;
    let mut dp = vec![0.0; c * hw];
    let mut loss = 0.0;
    let mut visit = |a: usize, b: usize| {
        let d2: f64 = (0..ch).map(|k| (img.data()[k * hw + a] - img.data()[k * hw + b]).powi(2)).sum();
        let wt = (-d2 / (2.0 * sigma * sigma)).exp();
        let dot: f64 = (0..c).map(|k| probs[k * hw + a] * probs[k * hw + b]).sum();
        loss += s * wt * (1.0 - dot);
        for k in 0..c {
            dp[k * hw + a] -= s * wt * probs[k * hw + b];
            dp[k * hw + b] -= s * wt * probs[k * hw + a];
        }
    };
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            if x + 1 < w {
                visit(a, a + 1);
            }
            if y + 1 < h {
                visit(a, a + w);
            }
        }
    }
    for j in 0..hw {
        let inner: f64 = (0..c).map(|k| dp[k * hw + j] * probs[k * hw + j]).sum();
        for k in 0..c {
            dz[k * hw + j] += probs[k * hw + j] * (dp[k * hw + j] - inner);
        }
    }
    loss
}

/// Mean cross-entropy of `logits` over the labeled pixels of `sm`.
pub fn partial_ce_loss(logits: &ImageGrid, sm: &ScribbleMap) -> Result<f64> {
    let (c, h, w) = logits.shape();
    if sm.labels.shape() != (h, w) {
        return Err(Error::shape((h, w), sm.labels.shape()));
    }
    let n = sm.labeled_count();
    if n == 0 {
        return Err(Error::InvalidArgument("scribble map has no labeled pixels".into()));
    }
    if let Some(&bad) = sm.labels.data().iter().find(|&&y| y != UNLABELED && (y < 0 || y as usize >= c)) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {c})")));
    }
    let hw = h * w;
    let probs = softmax_planes(logits.data(), c, hw);
    let mut dz = vec![0.0; c * hw];
    Ok(ce_accumulate(logits.data(), &probs, &sm.labels, c, hw, 1.0 / n as f64, &mut dz))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerConfig,
    pub grad_clip: Option<f64>,
    pub pairwise: Option<Pairwise>,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
            lr_schedule: LrSchedule::Poly { power: 0.9 },
            optimizer: OptimizerConfig::Sgd { momentum: 0.9 },
            grad_clip: Some(5.0),
            pairwise: None,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    /// CSV with header `epoch,train_loss,val_miou`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_miou\n");
        for r in &self.rows {
            let v = r.val_miou.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, v));
        }
        s
    }
}

/// Validation data and how often to score it.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub dataset: &'a Dataset,
    /// Score every `every` epochs and after the last one.
    pub every: usize,
}

/// Mean IoU of `seg` on the full masks of `val`.
pub fn evaluate_miou(seg: &Segmentor, val: &Dataset) -> Result<f64> {
    let images: Vec<&ImageGrid> = val.items.iter().map(|it| &it.scene.image).collect();
    let preds = seg.predict_labels(&images)?;
    let truth: Vec<&LabelGrid> = val.items.iter().map(|it| &it.scene.full_mask).collect();
    miou(&preds.iter().collect::<Vec<_>>(), &truth, seg.config.num_classes)
}

/// Trains on composed epochs of real and synthetic data. Deterministic in `seed`.
pub fn train_segmentor(
    seg: Segmentor,
    dataset: &Dataset,
    bank: Option<&SyntheticBank>,
    scheme: &AugmentationScheme,
    cfg: &SegTrainConfig,
    seed: u64,
    val: Option<Validation<'_>>,
) -> Result<(Segmentor, History)> {
    scheme.validate(bank)?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("batch_size and lr must be positive".into()));
    }
    let mut seg = seg;
    let mut history = History::default();
    if cfg.epochs == 0 || dataset.is_empty() {
        return Ok((seg, history));
    }
    let epochs: Vec<EpochDataset> = (1..=cfg.epochs)
        .map(|e| compose_epoch(dataset, bank, scheme, e, seed))
        .collect::<Result<_>>()?;
    let total: usize = epochs.iter().map(|e| e.len().div_ceil(cfg.batch_size)).sum();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), seg.num_params());
    let mut step = 0;
    for (ei, mut ep) in epochs.into_iter().enumerate() {
        let epoch = ei + 1;
        ep.items.shuffle(&mut keyed_rng(seed, "segmentor-epoch", &[epoch as u64]));
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in ep.items.chunks(cfg.batch_size) {
            let images: Vec<&ImageGrid> = chunk
                .iter()
                .map(|it| EpochDataset::image(it, dataset, bank))
                .collect::<Result<_>>()?;
            let labels: Vec<&ScribbleMap> = chunk.iter().map(|it| &dataset.items[it.image_id].scribbles).collect();
            let lr = cfg.lr_schedule.lr_at(cfg.lr, step, total);
            let (loss, mut grads) = seg.loss_and_grad::<f32>(&seg.params, &images, &labels, cfg.pairwise)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    report: format!("segmentor epoch {epoch}: loss={loss} lr={lr}"),
                });
            }
            opt.step(&mut seg.params, &grads, lr);
            sum += loss * chunk.len() as f64;
            count += chunk.len();
            step += 1;
        }
        let val_miou = match val {
            Some(v) if epoch % v.every.max(1) == 0 || epoch == cfg.epochs => Some(evaluate_miou(&seg, v.dataset)?),
            _ => None,
        };
        history.rows.push(HistoryRow {
            epoch,
            train_loss: sum / count as f64,
            val_miou,
        });
    }
    Ok((seg, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::fill_normal;
    use crate::shapesworld::{build_dataset, WorldConfig};
    use proptest::prelude::*;

    fn micro() -> SegmentorConfig {
        SegmentorConfig {
            in_channels: 3,
            num_classes: 4,
            width: 4,
            dilations: vec![1, 2],
        }
    }

    fn tiny_world() -> WorldConfig {
        WorldConfig {
            height: 8,
            width: 8,
            min_visible_fraction: 0.05,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn default_network_size() {
        let s = init_segmentor(&SegmentorConfig::default(), 1).unwrap();
        assert!(s.num_params() > 20_000, "{}", s.num_params());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = ImageGrid::zeros(4, 4, 4);
        let mut labels = LabelGrid::filled(4, 4, UNLABELED);
        labels.set(0, 0, 2);
        labels.set(3, 1, 0);
        let sm = ScribbleMap::from_labels(labels);
        let l = partial_ce_loss(&logits, &sm).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut labels = LabelGrid::filled(2, 2, UNLABELED);
        labels.set(0, 1, 3);
        let sm = ScribbleMap::from_labels(labels);
        let mut logits = ImageGrid::filled(4, 2, 2, -1e3);
        logits.set(3, 0, 1, 1e3);
        assert_eq!(partial_ce_loss(&logits, &sm).unwrap(), 0.0);
        let empty = ScribbleMap::from_labels(LabelGrid::filled(2, 2, UNLABELED));
        assert!(partial_ce_loss(&logits, &empty).is_err());
    }

    proptest! {
        #[test]
        fn unlabeled_pixels_do_not_affect_loss(seed in 0u64..1000, bump in -50.0f64..50.0) {
            let mut rng = keyed_rng(seed, "mask", &[]);
            let mut logits = ImageGrid::zeros(4, 6, 6);
            fill_normal(&mut rng, logits.data_mut());
            let mut labels = LabelGrid::filled(6, 6, UNLABELED);
            for j in (0..36).step_by(5) {
                labels.data_mut()[j] = (j % 4) as i16;
            }
            let sm = ScribbleMap::from_labels(labels.clone());
            let before = partial_ce_loss(&logits, &sm).unwrap();
            for (j, &y) in labels.data().iter().enumerate() {
                if y == UNLABELED {
                    for k in 0..4 {
                        logits.data_mut()[k * 36 + j] += bump * (k as f64 + 1.0);
                    }
                }
            }
            prop_assert_eq!(before.to_bits(), partial_ce_loss(&logits, &sm).unwrap().to_bits());
        }
    }

    fn grad_check(pairwise: Option<Pairwise>) {
        let seg = init_segmentor(&micro(), 2).unwrap();
        let ds = build_dataset(2, &tiny_world(), 4).unwrap();
        let images: Vec<&ImageGrid> = ds.items.iter().map(|i| &i.scene.image).collect();
        let labels: Vec<&ScribbleMap> = ds.items.iter().map(|i| &i.scribbles).collect();
        let mut p: Vec<f64> = seg.params().iter().map(|&v| v as f64).collect();
        let (_, g) = seg.loss_and_grad::<f64>(&p, &images, &labels, pairwise).unwrap();
        let mut rng = keyed_rng(3, "seg-gc", &[]);
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(32) {
            let h = 1e-4;
            let o = p[i];
            p[i] = o + h;
            let lp = seg.loss_and_grad::<f64>(&p, &images, &labels, pairwise).unwrap().0;
            p[i] = o - h;
            let lm = seg.loss_and_grad::<f64>(&p, &images, &labels, pairwise).unwrap().0;
            p[i] = o;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err <= 1e-3, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn partial_ce_gradient_matches_finite_differences() {
        grad_check(None);
    }

    #[test]
    fn pairwise_gradient_matches_finite_differences() {
        grad_check(Some(Pairwise { weight: 2.0, sigma: 0.5 }));
    }

    #[test]
    fn prediction_contract() {
        let seg = init_segmentor(&micro(), 5).unwrap();
        let x = ImageGrid::filled(3, 8, 8, 0.2);
        let a = seg.predict(&x).unwrap();
        assert_eq!(a.shape(), (4, 8, 8));
        assert_eq!(a, seg.predict(&x).unwrap());
        assert!(argmax(&a).data().iter().all(|&v| (0..4).contains(&v)));
        assert!(seg.predict(&ImageGrid::zeros(1, 8, 8)).is_err());
    }

    #[test]
    fn untrained_network_has_no_dead_class() {
        let seg = init_segmentor(&SegmentorConfig::default(), 1).unwrap();
        let ds = build_dataset(64, &WorldConfig::default(), 9).unwrap();
        let images: Vec<&ImageGrid> = ds.items.iter().map(|i| &i.scene.image).collect();
        let mut counts = [0usize; 4];
        for m in seg.predict_labels(&images).unwrap() {
            for &v in m.data() {
                counts[v as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let ds = build_dataset(16, &tiny_world(), 1).unwrap();
        let cfg = SegTrainConfig {
            epochs: 3,
            batch_size: 4,
            ..SegTrainConfig::default()
        };
        let run = || train_segmentor(init_segmentor(&micro(), 1).unwrap(), &ds, None, &AugmentationScheme::None, &cfg, 5, None).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
        assert_eq!(ha.rows.len(), 3);
        let zero = SegTrainConfig { epochs: 0, ..cfg };
        let init = init_segmentor(&micro(), 1).unwrap();
        let (c, hc) = train_segmentor(init.clone(), &ds, None, &AugmentationScheme::None, &zero, 5, None).unwrap();
        assert_eq!(c, init);
        assert!(hc.rows.is_empty());
        assert!(ha.to_csv().starts_with("epoch,train_loss,val_miou\n1,"));
    }
}
