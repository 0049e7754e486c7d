//! The two-step simultaneous training loop: four generators updated against
//! the combined objective in one backward pass, then the discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagecore::RasterImage;
use crate::objectives::{self, GanLossForm, LossReport, LossTerms, LossWeights};

use super::nn::{Discriminator, GeneratorKind, GeneratorSpec, UNet};
use super::synth::{make_synthetic_batch, Sample};
use super::tensor::{
    abs_diff, add, add_scalar, bce_with_clamp, broadcast_channels, ln, mul, mul_scalar, sqrt, sub,
    sum_all, tv_abs_mean, Shape, Tensor,
};
use super::Adam;

/// Training hyperparameters. The defaults pin the published recipe at toy
/// scale: lr 2e-4, betas (0.5, 0.999), batch 6, seed 100, 32x32 tiles.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub image_size: usize,
    /// Number of synthetic tuples in the fixed training set.
    pub dataset_size: usize,
    pub gan_form: GanLossForm,
    pub depth: usize,
    pub base_width: usize,
    pub patch: usize,
    pub disc_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 6,
            steps: 200,
            seed: 100,
            weights: LossWeights::default(),
            image_size: 32,
            dataset_size: 16,
            gan_form: GanLossForm::NonSaturating,
            depth: 3,
            base_width: 16,
            patch: 4,
            disc_dim: 32,
        }
    }
}

/// The four generators and the discriminator.
pub struct Nets {
    pub g_d: UNet,
    pub g_s: UNet,
    pub g_t: UNet,
    pub g_j: UNet,
    pub disc: Discriminator,
}

impl Nets {
    /// Deterministic build: each net draws from its own seed stream.
    pub fn build(cfg: &TrainConfig) -> Self {
        let spec = |kind| GeneratorSpec {
            kind,
            depth: cfg.depth,
            base_width: cfg.base_width,
        };
        Self {
            g_d: UNet::build(spec(GeneratorKind::Diffuse), cfg.seed.wrapping_add(1)),
            g_s: UNet::build(spec(GeneratorKind::Specular), cfg.seed.wrapping_add(2)),
            g_t: UNet::build(spec(GeneratorKind::Transmission), cfg.seed.wrapping_add(3)),
            g_j: UNet::build(spec(GeneratorKind::Radiance), cfg.seed.wrapping_add(4)),
            disc: Discriminator::build(cfg.patch, cfg.disc_dim, cfg.seed.wrapping_add(5)),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.g_d.named_params();
        out.extend(self.g_s.named_params());
        out.extend(self.g_t.named_params());
        out.extend(self.g_j.named_params());
        out.extend(self.disc.named_params());
        out
    }
}

/// Per-step losses: the generator-side report plus the discriminator loss.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub report: LossReport,
    pub disc_loss: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Nets,
    pub data: Vec<Sample>,
    opt_gd: Adam,
    opt_gs: Adam,
    opt_gt: Adam,
    opt_gj: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    pub steps_done: usize,
}

/// Constant tensors for one batch.
struct Batch {
    x: Tensor,
    diffuse_t: Tensor,
    specular_t: Tensor,
    t_t: Tensor,
    j_t: Tensor,
    n_t: Tensor,
    mask1: Tensor,
    mask3: Tensor,
    veiling: Tensor,
    water_px: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        if cfg.batch == 0 || cfg.dataset_size == 0 {
            return Err(Error::InvalidArgument(
                "batch and dataset size must be positive".into(),
            ));
        }
        cfg.weights.validate()?;
        let data = make_synthetic_batch(cfg.seed, cfg.dataset_size, cfg.image_size)?;
        let nets = Nets::build(&cfg);
        let adam = |params| Adam::new(params, cfg.lr, cfg.beta1, cfg.beta2);
        let opt_gd = adam(nets.g_d.params());
        let opt_gs = adam(nets.g_s.params());
        let opt_gt = adam(nets.g_t.params());
        let opt_gj = adam(nets.g_j.params());
        let opt_d = adam(nets.disc.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(11));
        Ok(Self {
            cfg,
            nets,
            data,
            opt_gd,
            opt_gs,
            opt_gt,
            opt_gj,
            opt_d,
            rng,
            steps_done: 0,
        })
    }

    /// One simultaneous step: forward all four generators, assemble the total
    /// objective, update the generators together, then update the
    /// discriminator on (real, detached fake) pairs.
    pub fn step(&mut self) -> Result<StepOutput> {
        let indices: Vec<usize> = (0..self.cfg.batch)
            .map(|_| self.rng.gen_range(0..self.data.len()))
            .collect();
        let samples: Vec<&Sample> = indices.iter().map(|&i| &self.data[i]).collect();
        let batch = self.assemble(&samples);

        self.zero_all_grads();
        let fwd = self.forward_generators(&batch);
        let (terms, total) = self.generator_objective(&batch, &fwd)?;
        total.backward();
        for (name, net) in [
            ("g_d", &self.nets.g_d),
            ("g_s", &self.nets.g_s),
            ("g_t", &self.nets.g_t),
            ("g_j", &self.nets.g_j),
        ] {
            if net.params().iter().any(|p| !p.grad_is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{name} parameters")));
            }
        }
        self.opt_gd.step();
        self.opt_gs.step();
        self.opt_gt.step();
        self.opt_gj.step();

        // Discriminator phase on fresh gradients and a detached candidate.
        self.zero_all_grads();
        let d_real = self.nets.disc.forward(&batch.x, &batch.j_t);
        let d_fake = self.nets.disc.forward(&batch.x, &fwd.yj.detach());
        let disc_loss = add(
            &bce_with_clamp(&d_real, true, objectives::PROB_EPS),
            &bce_with_clamp(&d_fake, false, objectives::PROB_EPS),
        );
        disc_loss.backward();
        if self.nets.disc.params().iter().any(|p| !p.grad_is_finite()) {
            return Err(Error::NonFiniteGradient("discriminator parameters".into()));
        }
        self.opt_d.step();

        self.steps_done += 1;
        Ok(StepOutput {
            report: objectives::total_objective(terms, &self.cfg.weights)?,
            disc_loss: disc_loss.value(),
        })
    }

    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(usize, &StepOutput)) -> Result<()> {
        for _ in 0..steps {
            let out = self.step()?;
            on_step(self.steps_done, &out);
        }
        Ok(())
    }

    /// Builds the weighted generator objective over the first `batch` tuples
    /// without touching any training state. The returned scalar node spans
    /// the whole four-generator graph (plus the discriminator through the
    /// adversarial term), so calling `backward()` on it exposes every
    /// parameter gradient for inspection.
    pub fn objective_graph(&self) -> Result<Tensor> {
        let samples: Vec<&Sample> = self.data.iter().take(self.cfg.batch).collect();
        let batch = self.assemble(&samples);
        let fwd = self.forward_generators(&batch);
        let (_, total) = self.generator_objective(&batch, &fwd)?;
        Ok(total)
    }

    /// Forward pass over the four generators; no optimizer state touched.
    fn forward_generators(&self, batch: &Batch) -> GeneratorForward {
        let yd = self.nets.g_d.forward(&batch.x);
        let ys = self.nets.g_s.forward(&batch.x);
        let yr = add(&yd, &broadcast_channels(&ys, 3));
        let yj = self.nets.g_j.forward(&yr);
        let yt = self.nets.g_t.forward(&batch.x);
        // Resynthesis via the formation model in the generated domain.
        let yt3 = broadcast_channels(&yt, 3);
        let one_minus_t = add_scalar(&mul_scalar(&yt3, -1.0), 1.0);
        let nhat = add(&mul(&yj, &yt3), &mul(&batch.veiling, &one_minus_t));
        GeneratorForward {
            yd,
            ys,
            yr,
            yj,
            yt,
            nhat,
        }
    }

    /// All loss terms and the weighted total as a graph node.
    fn generator_objective(
        &self,
        batch: &Batch,
        fwd: &GeneratorForward,
    ) -> Result<(LossTerms, Tensor)> {
        let w = &self.cfg.weights;
        let l_gd = masked_l1(&fwd.yd, &batch.diffuse_t, &batch.mask3, batch.water_px * 3.0);
        let l_gs = masked_l1(&fwd.ys, &batch.specular_t, &batch.mask1, batch.water_px);

        let diff = mul(&sub(&batch.x, &fwd.yr), &batch.mask3);
        let l_r = sqrt(&sum_all(&mul(&diff, &diff)));

        let l_gj = masked_l1(&fwd.yj, &batch.j_t, &batch.mask3, batch.water_px * 3.0);

        let t_l1 = masked_l1(&fwd.yt, &batch.t_t, &batch.mask1, batch.water_px);
        let l_t = add(&ln(&add_scalar(&t_l1, 0.5)), &tv_abs_mean(&sub(&fwd.yt, &batch.t_t)));

        let l_n = masked_l1(&fwd.nhat, &batch.n_t, &batch.mask3, batch.water_px * 3.0);

        let d_fake = self.nets.disc.forward(&batch.x, &fwd.yj);
        let l_adv = match self.cfg.gan_form {
            GanLossForm::NonSaturating => bce_with_clamp(&d_fake, true, objectives::PROB_EPS),
            // Literal min-max term: log(1 - D(fake)) == -bce(fake as 0).
            GanLossForm::Saturating => mul_scalar(&bce_with_clamp(&d_fake, false, objectives::PROB_EPS), -1.0),
        };

        let terms = LossTerms {
            l_gd: l_gd.value(),
            l_gs: l_gs.value(),
            l_r: l_r.value(),
            l_gj: l_gj.value(),
            l_t: l_t.value(),
            l_n: l_n.value(),
            l_adv: l_adv.value(),
        };
        for (name, v) in [
            ("l_gd", terms.l_gd),
            ("l_gs", terms.l_gs),
            ("l_r", terms.l_r),
            ("l_gj", terms.l_gj),
            ("l_t", terms.l_t),
            ("l_n", terms.l_n),
            ("l_adv", terms.l_adv),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss term {name}")));
            }
        }

        let mut total = l_adv;
        total = add(&total, &mul_scalar(&add(&l_gs, &l_gd), w.gamma));
        total = add(&total, &mul_scalar(&l_r, w.sigma));
        total = add(&total, &mul_scalar(&l_gj, w.iota));
        total = add(&total, &mul_scalar(&l_t, w.tau));
        total = add(&total, &mul_scalar(&l_n, w.nu));
        Ok((terms, total))
    }

    fn zero_all_grads(&self) {
        self.opt_gd.zero_grad();
        self.opt_gs.zero_grad();
        self.opt_gt.zero_grad();
        self.opt_gj.zero_grad();
        self.opt_d.zero_grad();
    }

    fn assemble(&self, samples: &[&Sample]) -> Batch {
        let s = self.cfg.image_size;
        let x = stack_rasters(samples.iter().map(|s| &s.x));
        let diffuse_t = stack_rasters(samples.iter().map(|s| &s.diffuse));
        let specular_t = stack_rasters(samples.iter().map(|s| &s.specular));
        let t_t = stack_rasters(samples.iter().map(|s| &s.t_map));
        let j_t = stack_rasters(samples.iter().map(|s| &s.j));
        let n_t = stack_rasters(samples.iter().map(|s| &s.n_real));

        let b = samples.len();
        let mut m1 = Vec::with_capacity(b * s * s);
        let mut water_px = 0usize;
        for sample in samples {
            water_px += sample.mask.water_count();
            m1.extend(sample.mask.bits().iter().map(|&v| v as f64));
        }
        let mask1 = Tensor::leaf(Shape([b, 1, s, s]), m1);
        let mask3 = broadcast_channels(&mask1, 3).detach();

        let mut veil = Vec::with_capacity(b * 3 * s * s);
        for sample in samples {
            for &vc in &sample.veiling {
                veil.extend(std::iter::repeat_n(vc, s * s));
            }
        }
        let veiling = Tensor::leaf(Shape([b, 3, s, s]), veil);

        Batch {
            x,
            diffuse_t,
            specular_t,
            t_t,
            j_t,
            n_t,
            mask1,
            mask3,
            veiling,
            water_px: (water_px.max(1)) as f64,
        }
    }

    /// Renders `x | y_r | y_t | y_j | n_hat` for the first dataset tuple,
    /// 1-channel maps shown as grayscale. Pure forward pass.
    pub fn render_sample_grid(&self) -> RasterImage {
        let samples = [&self.data[0]];
        let batch = self.assemble(&samples);
        let fwd = self.forward_generators(&batch);
        let panels = [
            tensor_slice_to_raster(&batch.x, 0),
            tensor_slice_to_raster(&fwd.yr, 0),
            tensor_slice_to_raster(&fwd.yt, 0),
            tensor_slice_to_raster(&fwd.yj, 0),
            tensor_slice_to_raster(&fwd.nhat, 0),
        ];
        let s = self.cfg.image_size;
        let gap = 2;
        let total_w = panels.len() * s + (panels.len() - 1) * gap;
        RasterImage::from_fn(s, total_w, 3, |y, x, c| {
            let panel = x / (s + gap);
            let px = x % (s + gap);
            if px >= s {
                return 1.0;
            }
            let img = &panels[panel.min(panels.len() - 1)];
            if img.channels() == 1 {
                img.get(y, px, 0)
            } else {
                img.get(y, px, c)
            }
        })
    }

    /// Masked L1 between a generator prediction and its target on the first
    /// dataset tuple; used to watch the dewatering head during training.
    pub fn dewatered_l1(&self) -> Result<f64> {
        let samples = [&self.data[0]];
        let batch = self.assemble(&samples);
        let fwd = self.forward_generators(&batch);
        let pred = tensor_slice_to_raster(&fwd.yj, 0);
        objectives::loss_dewatered(&self.data[0].j, &pred, &self.data[0].mask)
    }
}

struct GeneratorForward {
    yd: Tensor,
    ys: Tensor,
    yr: Tensor,
    yj: Tensor,
    yt: Tensor,
    nhat: Tensor,
}

/// Masked L1 mean: `sum(|pred - target| * mask) / denom`.
fn masked_l1(pred: &Tensor, target: &Tensor, mask: &Tensor, denom: f64) -> Tensor {
    mul_scalar(&sum_all(&mul(&abs_diff(pred, target), mask)), 1.0 / denom)
}

/// Stacks interleaved rasters into a planar (B,C,H,W) constant tensor.
fn stack_rasters<'a>(items: impl Iterator<Item = &'a RasterImage>) -> Tensor {
    let items: Vec<&RasterImage> = items.collect();
    let (h, w, c) = (items[0].height(), items[0].width(), items[0].channels());
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for img in &items {
        debug_assert!(img.height() == h && img.width() == w && img.channels() == c);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(y, x, ci));
                }
            }
        }
    }
    Tensor::leaf(Shape([items.len(), c, h, w]), data)
}

/// Extracts batch item `b` of a (B,C,H,W) tensor as a raster, clamped to
/// [0,1] for rendering.
pub fn tensor_slice_to_raster(t: &Tensor, b: usize) -> RasterImage {
    let Shape([_, c, h, w]) = t.shape();
    let data = t.data();
    RasterImage::from_fn(h, w, c, |y, x, ci| {
        data[((b * c + ci) * h + y) * w + x].clamp(0.0, 1.0)
    })
}
