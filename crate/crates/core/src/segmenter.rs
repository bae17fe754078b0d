//! The assembled segmenter: encoders with fusion and optional CAM, an FPN
//! pixel decoder, the mask grounding branch and the training step.

use std::sync::Arc;

use magnet_autograd::{AdamW, CosineSchedule, GradStore, Graph, ParamStore, Scalar, SparseMap, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cam::{build_stages, Cam, CamConfig, CamStage, SpatialCache};
use crate::datagen::{Sample, CLS, PAD};
use crate::encoders::{EncoderConfig, Encoders, FeatureMap, StageHook, StagePair, TextBatch, STAGES};
use crate::error::{config_err, input_err, Result};
use crate::losses::{
    bce_loss, cal_p2p, cal_p2t, dice_loss_batched, total_loss, LossBundle, LossComponents, LossConfig, PixelPartition,
};
use crate::maskgrounding::{
    grounding_loss, region_average_map, GroundingConfig, GroundingInputs, MaskGrounding, MaskInput, MaskedBatch,
};
use crate::nn::{ConvBlock, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub cam_enabled: bool,
    pub cam: CamConfig,
    pub grounding_enabled: bool,
    pub grounding: GroundingConfig,
    pub decoder_channels: usize,
    pub decoder_blocks: usize,
    pub losses: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            encoder: EncoderConfig::default(),
            cam_enabled: true,
            cam: CamConfig::default(),
            grounding_enabled: true,
            grounding: GroundingConfig::default(),
            decoder_channels: 32,
            decoder_blocks: 2,
            losses: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Plain encoder-decoder: no CAM, no grounding, no alignment loss.
    pub fn baseline() -> Self {
        let mut c = Self::default();
        c.cam_enabled = false;
        c.grounding_enabled = false;
        c.losses.cal = crate::losses::CalTerms::Off;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder.stage_sizes(self.image_size)?;
        if self.cam_enabled {
            self.cam.validate()?;
        }
        if self.grounding_enabled {
            self.grounding.validate()?;
        }
        self.losses.validate()?;
        if self.decoder_channels == 0 {
            return config_err("decoder channels must be positive");
        }
        Ok(())
    }

    /// Side of the decoder feature map.
    pub fn decoder_size(&self) -> usize {
        self.image_size / self.encoder.patch
    }
}

/// Top-down FPN: 1x1 laterals into a common width, 2x bilinear upsampling
/// with summation, conv blocks at the finest level, and a 1-channel head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub laterals: Vec<Linear>,
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
    pub channels: usize,
}

impl Decoder {
    fn new(dims: &[usize], channels: usize, blocks: usize, mlp_ratio: usize) -> Self {
        Self {
            laterals: dims
                .iter()
                .enumerate()
                .map(|(i, &c)| Linear::new(format!("decoder.lateral{}", i + 1), c, channels))
                .collect(),
            blocks: (0..blocks)
                .map(|b| ConvBlock::new(&format!("decoder.block{b}"), channels, mlp_ratio))
                .collect(),
            head: Linear::new("decoder.head", channels, 1),
            channels,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for l in &self.laterals {
            l.init(store, seed);
        }
        for b in &self.blocks {
            b.init(store, seed);
        }
        self.head.init(store, seed);
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        stages: &[StagePair],
        cache: &mut SpatialCache<T>,
    ) -> Result<FeatureMap> {
        let mut acc: Option<FeatureMap> = None;
        for (pair, lat) in stages.iter().zip(&self.laterals).rev() {
            let p = pair.p;
            let mut y = lat.forward(g, p.var)?;
            if let Some(prev) = acc {
                let up = g.spatial(prev.var, cache.upsample(prev.h, prev.w, p.h, p.w), p.batch)?;
                y = g.add(y, up)?;
            }
            acc = Some(FeatureMap {
                var: y,
                c: self.channels,
                ..p
            });
        }
        let Some(mut f) = acc else {
            return input_err("decoder needs at least one stage");
        };
        for b in &self.blocks {
            f = f.with_var(b.forward(g, f.var, f.batch, f.h, f.w)?);
        }
        Ok(f)
    }
}

/// One training or evaluation batch in tensor form.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    pub batch: usize,
    pub images: Tensor<T>,
    pub text: TextBatch,
    /// `(batch * size * size) x 1` binary targets.
    pub gt: Tensor<T>,
    pub masks: Vec<Vec<u8>>,
    pub masked: Option<Vec<MaskedBatch>>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample], masked: Option<Vec<MaskedBatch>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return input_err("empty batch");
        };
        let size = first.size;
        if samples.iter().any(|s| s.size != size) {
            return input_err("samples in a batch must share one image size");
        }
        if let Some(m) = &masked {
            if m.len() != samples.len() {
                return input_err(format!("{} masked expressions for {} samples", m.len(), samples.len()));
            }
        }
        let n = size * size;
        let inv = T::from_f64_lossy(1.0 / 255.0);
        let mut images = Vec::with_capacity(samples.len() * n * 3);
        let mut gt = Vec::with_capacity(samples.len() * n);
        for s in samples {
            images.extend(s.pixels.iter().map(|&v| T::from_u8(v).unwrap() * inv));
            gt.extend(s.mask.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
        }
        let tokens: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
        Ok(Self {
            size,
            batch: samples.len(),
            images: Tensor::new(samples.len() * n, 3, images)?,
            text: TextBatch::new(&tokens)?,
            gt: Tensor::new(samples.len() * n, 1, gt)?,
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
            masked,
        })
    }

    /// Ground truth sampled at the centre of each `factor x factor` block.
    pub fn downsampled_mask(&self, sample: usize, factor: usize) -> Vec<bool> {
        let s = self.size / factor;
        let m = &self.masks[sample];
        let off = factor / 2;
        (0..s * s)
            .map(|i| m[((i / s) * factor + off) * self.size + (i % s) * factor + off] != 0)
            .collect()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `(batch * size * size) x 1` mask logits.
    pub logits: Var,
    /// Final pixel-decoder feature.
    pub decoder: FeatureMap,
    pub stages: Vec<StagePair>,
    /// Grounding logits and their target ids.
    pub grounding: Option<(Var, Vec<usize>)>,
}

/// Scalar loss handles on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bce: Var,
    pub dice: Var,
    pub cal: Option<Var>,
    pub grounding: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct MagNet {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub cam: Option<Vec<CamStage>>,
    pub grounding: Option<MaskGrounding>,
    pub decoder: Decoder,
    pub cal_proj: Option<Linear>,
}

impl MagNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let sizes = enc.stage_sizes(config.image_size)?;
        let encoders = Encoders::new(enc.clone())?;
        let cam = if config.cam_enabled {
            Some(build_stages(&config.cam, enc.lang_width, &enc.image_dims, &sizes)?)
        } else {
            None
        };
        let grounding = if config.grounding_enabled {
            Some(MaskGrounding::new(
                config.grounding.clone(),
                enc.lang_width,
                enc.image_dims[STAGES - 1],
                sizes[STAGES - 1] * sizes[STAGES - 1],
                enc.vocab_size,
            )?)
        } else {
            None
        };
        let decoder = Decoder::new(&enc.image_dims, config.decoder_channels, config.decoder_blocks, enc.mlp_ratio);
        let cal_proj = config
            .losses
            .cal
            .p2t()
            .then(|| Linear::new("losses.cal_text_proj", enc.lang_width, config.decoder_channels));
        Ok(Self {
            config,
            encoders,
            cam,
            grounding,
            decoder,
            cal_proj,
        })
    }

    /// Every parameter is drawn from its own named stream, so enabling a
    /// module never changes the initial values of the others.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.encoders.init(&mut store, seed);
        if let Some(stages) = &self.cam {
            for s in stages {
                s.init(&mut store, seed);
            }
        }
        if let Some(mg) = &self.grounding {
            mg.init(&mut store, seed);
        }
        self.decoder.init(&mut store, seed);
        if let Some(p) = &self.cal_proj {
            p.init(&mut store, seed);
        }
        store
    }

    /// Runs encoders (calling `hook` if given, else CAM when enabled), the
    /// decoder and, when the batch carries masked expressions and grounding
    /// is enabled, the masked-token predictor.
    pub fn forward_with_hook<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch<T>,
        hook: Option<&mut dyn StageHook<T>>,
    ) -> Result<ModelOutput> {
        let size = batch.size;
        if size != self.config.image_size {
            return input_err(format!("model built for {} px images, got {size}", self.config.image_size));
        }
        let image = self.encoders.image_input(g, batch.images.clone(), batch.batch, size, size)?;
        let mut cam = self.cam.as_deref().map(Cam::new);
        let stages = match (hook, cam.as_mut()) {
            (Some(h), _) => self.encoders.forward(g, image, &batch.text, Some(h))?,
            (None, Some(c)) => self.encoders.forward(g, image, &batch.text, Some(c as &mut dyn StageHook<T>))?,
            (None, None) => self.encoders.forward(g, image, &batch.text, None)?,
        };
        let mut cache = cam.map(|c| c.cache).unwrap_or_default();
        let decoder = self.decoder.forward(g, &stages, &mut cache)?;
        let small = self.decoder.head.forward(g, decoder.var)?;
        let up = cache.upsample(decoder.h, decoder.w, size, size);
        let logits = g.spatial(small, up, batch.batch)?;
        let grounding = match (&self.grounding, &batch.masked) {
            (Some(mg), Some(masked)) => Some(self.ground(g, mg, batch, masked, &stages[STAGES - 1].p)?),
            _ => None,
        };
        Ok(ModelOutput {
            logits,
            decoder,
            stages,
            grounding,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &Batch<T>) -> Result<ModelOutput> {
        self.forward_with_hook(g, batch, None)
    }

    fn ground<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        mg: &MaskGrounding,
        batch: &Batch<T>,
        masked: &[MaskedBatch],
        last: &FeatureMap,
    ) -> Result<(Var, Vec<usize>)> {
        let seqs: Vec<Vec<usize>> = masked.iter().map(|m| m.tokens.clone()).collect();
        let text = TextBatch::new(&seqs)?;
        let o = self.encoders.language_only(g, &text)?;
        let region_average: Option<Arc<SparseMap<T>>> = if mg.config.mask_input == MaskInput::Average {
            let masks: Vec<&[u8]> = batch.masks.iter().map(|m| m.as_slice()).collect();
            Some(Arc::new(region_average_map(&masks, batch.size, last.h, last.w)?))
        } else {
            None
        };
        let inputs = GroundingInputs {
            image: Some(last),
            batches: masked,
            region_average,
        };
        mg.predict_masked(g, o, &text, &inputs)
    }

    /// Builds every enabled loss on the graph and their weighted total.
    pub fn losses<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &ModelOutput, batch: &Batch<T>) -> Result<LossVars> {
        let lc = &self.config.losses;
        let bce = bce_loss(g, out.logits, &batch.gt)?;
        let probs = g.sigmoid(out.logits);
        let dice = dice_loss_batched(g, probs, &batch.gt, batch.batch)?;
        let cal = if lc.cal == crate::losses::CalTerms::Off {
            None
        } else {
            Some(self.cal(g, out, batch)?)
        };
        let grounding = match &out.grounding {
            Some((logits, targets)) => Some(grounding_loss(g, *logits, targets)?),
            None => None,
        };
        let w = lc.weights;
        let mut total = g.scale(bce, T::from_f64_lossy(w.bce));
        let d = g.scale(dice, T::from_f64_lossy(w.dice));
        total = g.add(total, d)?;
        if let Some(c) = cal {
            let c = g.scale(c, T::from_f64_lossy(w.cal));
            total = g.add(total, c)?;
        }
        if let Some(gl) = grounding {
            let gl = g.scale(gl, T::from_f64_lossy(w.grounding));
            total = g.add(total, gl)?;
        }
        Ok(LossVars {
            bce,
            dice,
            cal,
            grounding,
            total,
        })
    }

    fn cal<T: Scalar>(&self, g: &mut Graph<'_, T>, out: &ModelOutput, batch: &Batch<T>) -> Result<Var> {
        let lc = &self.config.losses;
        let f = out.decoder;
        let n = f.pixels();
        let factor = batch.size / f.h;
        let words = out.stages[STAGES - 1].o;
        let mut terms = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let fg = batch.downsampled_mask(b, factor);
            let feats = g.slice_rows(f.var, b * n, n)?;
            let part = PixelPartition::new(g, feats, &fg)?;
            let mut term = None;
            if lc.cal.p2p() {
                term = Some(cal_p2p(g, &part, lc.tau1, lc.cal_form)?);
            }
            if let Some(proj) = self.cal_proj.as_ref().filter(|_| lc.cal.p2t()) {
                let seq = batch.text.sequence(b);
                let rows: Vec<usize> = (0..seq.len())
                    .filter(|&i| seq[i] != PAD && seq[i] != CLS)
                    .map(|i| b * batch.text.len + i)
                    .collect();
                let w = g.gather_rows(words, &rows)?;
                let t = cal_p2t(g, &part, w, proj, lc.tau2, lc.cal_form)?;
                term = Some(match term {
                    Some(p) => g.add(p, t)?,
                    None => t,
                });
            }
            if let Some(t) = term {
                terms.push(t);
            }
        }
        let all = g.concat_rows(&terms)?;
        Ok(g.mean_all(all))
    }

    /// Reads the loss values off the graph and checks them.
    pub fn bundle<T: Scalar>(&self, g: &Graph<'_, T>, l: &LossVars) -> Result<LossBundle> {
        let v = |x: Var| g.value(x).item().to_f64_lossy();
        total_loss(
            LossComponents {
                bce: v(l.bce),
                dice: v(l.dice),
                cal: l.cal.map_or(0.0, v),
                grounding: l.grounding.map_or(0.0, v),
            },
            self.config.losses.weights,
        )
    }

    /// Mask logits per sample (row-major `size x size`).
    pub fn predict_logits<T: Scalar>(&self, params: &ParamStore<T>, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
        let batch = Batch::from_samples(samples, None)?;
        let mut g = Graph::with_params(params);
        let out = self.forward(&mut g, &batch)?;
        let n = batch.size * batch.size;
        let vals = g.value(out.logits);
        Ok((0..batch.batch)
            .map(|b| vals.data()[b * n..(b + 1) * n].iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    }

    /// Pooled features for the alignment probe: the mean of the non-PAD
    /// final-stage language rows and the mean of the decoder feature map.
    pub fn pooled_features<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        samples: &[&Sample],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let batch = Batch::from_samples(samples, None)?;
        let mut g = Graph::with_params(params);
        let out = self.forward(&mut g, &batch)?;
        let o = g.value(out.stages[STAGES - 1].o);
        let p = g.value(out.decoder.var);
        let len = batch.text.len;
        let n = out.decoder.pixels();
        let mut lang = Vec::with_capacity(batch.batch);
        let mut img = Vec::with_capacity(batch.batch);
        for b in 0..batch.batch {
            let seq = batch.text.sequence(b);
            let rows: Vec<usize> = (0..len).filter(|&i| seq[i] != PAD).collect();
            lang.push(mean_rows(o, rows.iter().map(|&i| b * len + i)));
            img.push(mean_rows(p, (0..n).map(|i| b * n + i)));
        }
        Ok((lang, img))
    }
}

fn mean_rows<T: Scalar>(t: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; t.cols()];
    let mut count = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += v.to_f64_lossy();
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: 1.0,
        }
    }
}

/// Parameters plus optimizer state.
pub struct Trainer<T> {
    pub model: MagNet,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub schedule: CosineSchedule,
    pub grad_clip: f64,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: MagNet, params: ParamStore<T>, optim: &OptimConfig, total_steps: usize) -> Self {
        Self {
            model,
            params,
            optimizer: AdamW::new(optim.weight_decay),
            schedule: CosineSchedule {
                base_lr: optim.lr,
                warmup_steps: optim.warmup_steps,
                total_steps,
            },
            grad_clip: optim.grad_clip,
            step: 0,
        }
    }

    /// Forward, loss and gradients without updating anything.
    pub fn gradients(&self, batch: &Batch<T>) -> Result<(LossBundle, GradStore<T>)> {
        let mut g = Graph::with_params(&self.params);
        let out = self.model.forward(&mut g, batch)?;
        let l = self.model.losses(&mut g, &out, batch)?;
        let bundle = self.model.bundle(&g, &l)?;
        let grads = g.param_grads(l.total)?;
        Ok((bundle, grads))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<LossBundle> {
        let (bundle, mut grads) = self.gradients(batch)?;
        if self.grad_clip > 0.0 {
            let norm = grads.norm_with_prefix("");
            if !norm.is_finite() {
                return Err(crate::error::MagnetError::NonFinite {
                    component: "gradient".into(),
                    value: norm,
                });
            }
            if norm > self.grad_clip {
                grads.scale(T::from_f64_lossy(self.grad_clip / norm));
            }
        }
        let lr = self.schedule.lr(self.step);
        self.optimizer.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(bundle)
    }
}
