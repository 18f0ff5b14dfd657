//! Forward diffusion process, conditioning, training loss with
//! classifier-free-guidance masking, and the deterministic guided sampler.

use crate::data::ViewPair;
use crate::error::{Error, Result};
use crate::geometry::build_feature_volume;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Linear beta schedule with precomputed `alpha = 1 - beta` and the
/// cumulative products `alpha_bar`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize, beta_start: f32, beta_end: f32) -> Result<NoiseSchedule> {
        if t_steps == 0 {
            return Err(Error::invalid("schedule: T must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "schedule: need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let mut betas = Vec::with_capacity(t_steps);
        if t_steps == 1 {
            betas.push(beta_start);
        } else {
            let step = (beta_end as f64 - beta_start as f64) / (t_steps - 1) as f64;
            for i in 0..t_steps {
                betas.push((beta_start as f64 + step * i as f64) as f32);
            }
            betas[t_steps - 1] = beta_end;
        }
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a as f64;
            alpha_bars.push(prod as f32);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `alpha_bar_t` with the convention `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

// ---------------------------------------------------------------------------
// Direction / condition
// ---------------------------------------------------------------------------

/// Binary translation direction indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Cc2Mlo,
    Mlo2Cc,
}

impl Direction {
    pub fn flag(self) -> u8 {
        match self {
            Direction::Cc2Mlo => 0,
            Direction::Mlo2Cc => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "cc2mlo" => Ok(Direction::Cc2Mlo),
            "mlo2cc" => Ok(Direction::Mlo2Cc),
            other => Err(Error::invalid(format!(
                "direction must be cc2mlo or mlo2cc, got '{other}'"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Cc2Mlo => "cc2mlo",
            Direction::Mlo2Cc => "mlo2cc",
        }
    }
}

/// Conditioning state per batch item: a direction, or the learned null row
/// used by the unconditional branch of classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Dir(Direction),
    Null,
}

impl Condition {
    /// Row in the learned direction-embedding table (2 directions + null).
    pub fn embedding_row(self) -> usize {
        match self {
            Condition::Dir(Direction::Cc2Mlo) => 0,
            Condition::Dir(Direction::Mlo2Cc) => 1,
            Condition::Null => 2,
        }
    }
}

/// Sinusoidal timestep features: `dim/2` sines then `dim/2` cosines over
/// geometrically spaced frequencies. At `t = 0` the sine half is all zeros
/// and the cosine half all ones.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (10_000f64).powf(-exponent);
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

// ---------------------------------------------------------------------------
// Forward process
// ---------------------------------------------------------------------------

/// `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`. `t` ranges over
/// `0..=T`; `t = 0` returns `z0` unchanged.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if t > sched.len() {
        return Err(Error::invalid(format!(
            "q_sample: t={t} out of range 0..={}",
            sched.len()
        )));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if t == 0 {
        return Ok(z0.scale(1.0));
    }
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    let b = (1.0 - ab).sqrt();
    z0.scale(a).add(&eps.scale(b))
}

/// Classifier-free guidance combination:
/// `eps_uncond + s (eps_cond - eps_uncond)`. The endpoints `s = 1` and
/// `s = 0` return the corresponding branch exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f32) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        });
    }
    if scale == 1.0 {
        return Ok(eps_cond.scale(1.0));
    }
    if scale == 0.0 {
        return Ok(eps_uncond.scale(1.0));
    }
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(scale))
}

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

/// A conditional noise predictor. Implemented by the UNet; test oracles
/// implement it directly.
pub trait NoisePredictor {
    /// `z_t:[b,1,h,w]`, per-item timesteps (1-based) and conditions,
    /// `z_ref:[b,1,h,w]` clean reference latents (zeroed where masked), and
    /// the raw back-projected volume `[b,2,h,h,w]` (None disables the 3D
    /// pathway).
    fn predict(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        conds: &[Condition],
        z_ref: &Tensor,
        raw_volume: Option<&Tensor>,
    ) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug)]
pub struct ConditioningOptions {
    /// Build the 3D feature volume (IM3D pathway).
    pub use_volume: bool,
    /// Build the volume from the reference half only.
    pub reference_only: bool,
}

impl Default for ConditioningOptions {
    fn default() -> Self {
        ConditioningOptions {
            use_volume: true,
            reference_only: false,
        }
    }
}

/// Assemble the raw feature volume for one item from its two noisy latents,
/// ordered by view (CC half first). `reference_only` zeroes the target half.
pub fn build_volume_views(
    direction: Direction,
    noisy_target: &Tensor,
    noised_ref: &Tensor,
    reference_only: bool,
) -> Result<Tensor> {
    let (cc, mlo) = match direction {
        Direction::Cc2Mlo => (noised_ref, noisy_target),
        Direction::Mlo2Cc => (noisy_target, noised_ref),
    };
    let vol = build_feature_volume(cc, mlo)?;
    if !reference_only {
        return Ok(vol);
    }
    // zero the half that came from the target view
    let [c2, d, h, w] = vol.shape() else {
        unreachable!("build_feature_volume returns rank 4");
    };
    let half = c2 / 2 * d * h * w;
    let mut data = vol.to_vec();
    let target_is_mlo = direction == Direction::Cc2Mlo;
    if target_is_mlo {
        data[half..].fill(0.0);
    } else {
        data[..half].fill(0.0);
    }
    Tensor::from_vec(&[*c2, *d, *h, *w], data)
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

/// Per-item draws for one training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchDraw {
    pub direction: Direction,
    pub t: usize,
    pub masked: bool,
}

/// Draw direction, timestep, and CFG mask per item. Draws are keyed on the
/// item id, so the loss is invariant to batch order.
pub fn draw_batch(ids: &[u64], t_max: usize, mask_prob: f32, base: u64) -> Vec<BatchDraw> {
    ids.iter()
        .map(|id| {
            let mut rng = Rng::new(base ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let direction = if rng.chance(0.5) {
                Direction::Cc2Mlo
            } else {
                Direction::Mlo2Cc
            };
            let t = 1 + rng.below(t_max);
            let masked = rng.chance(mask_prob);
            BatchDraw {
                direction,
                t,
                masked,
            }
        })
        .collect()
}

/// Noise-prediction training loss over a batch of view pairs. Per item:
/// draw a direction (assigning reference/target roles), a uniform timestep,
/// and fresh Gaussian noise; with probability `mask_prob` replace the
/// condition (reference latent -> zeros, direction -> null row). Returns the
/// scalar mean-squared-error tensor, ready for `backward`.
pub fn training_loss<M: NoisePredictor>(
    model: &M,
    batch: &[ViewPair],
    sched: &NoiseSchedule,
    mask_prob: f32,
    opts: ConditioningOptions,
    rng: &mut Rng,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::invalid("training_loss: empty batch"));
    }
    let [h, w] = batch[0].cc.shape() else {
        return Err(Error::invalid("training_loss: images must be [h,w]"));
    };
    let (h, w) = (*h, *w);
    let bsz = batch.len();
    let base = rng.next_u64();
    let ids: Vec<u64> = batch.iter().map(|p| p.id).collect();
    let draws = draw_batch(&ids, sched.len(), mask_prob, base);

    let mut z_t = Vec::with_capacity(bsz * h * w);
    let mut eps_all = Vec::with_capacity(bsz * h * w);
    let mut z_ref_all = Vec::with_capacity(bsz * h * w);
    let mut vols: Vec<f32> = Vec::new();
    let mut ts = Vec::with_capacity(bsz);
    let mut conds = Vec::with_capacity(bsz);

    for (pair, draw) in batch.iter().zip(&draws) {
        let mut item_rng = Rng::new(base ^ pair.id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA5A5);
        let (x_ref, x_tar) = match draw.direction {
            Direction::Cc2Mlo => (&pair.cc, &pair.mlo),
            Direction::Mlo2Cc => (&pair.mlo, &pair.cc),
        };
        let eps = item_rng.normal_vec(h * w);
        let eps_ref = item_rng.normal_vec(h * w);

        let ab = sched.alpha_bar(draw.t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let tar = x_tar.data();
        let mut zt_item = vec![0.0f32; h * w];
        for i in 0..h * w {
            zt_item[i] = a * tar[i] + b * eps[i];
        }

        // masked items drop the condition entirely
        let ref_clean: Vec<f32> = if draw.masked {
            vec![0.0; h * w]
        } else {
            x_ref.to_vec()
        };

        if opts.use_volume {
            // the volume sees the reference noised to the synchronized t
            let refd = ref_clean.as_slice();
            let mut ref_noised = vec![0.0f32; h * w];
            if draw.masked {
                // condition removed: the reference half stays zero
            } else {
                for i in 0..h * w {
                    ref_noised[i] = a * refd[i] + b * eps_ref[i];
                }
            }
            let tar_t = Tensor::from_vec(&[h, w], zt_item.clone())?;
            let ref_t = Tensor::from_vec(&[h, w], ref_noised)?;
            let vol = build_volume_views(draw.direction, &tar_t, &ref_t, opts.reference_only)?;
            vols.extend_from_slice(vol.data());
        }

        z_t.extend_from_slice(&zt_item);
        eps_all.extend_from_slice(&eps);
        z_ref_all.extend_from_slice(&ref_clean);
        ts.push(draw.t);
        conds.push(if draw.masked {
            Condition::Null
        } else {
            Condition::Dir(draw.direction)
        });
    }

    let z_t = Tensor::from_vec(&[bsz, 1, h, w], z_t)?;
    let eps_target = Tensor::from_vec(&[bsz, 1, h, w], eps_all)?;
    let z_ref = Tensor::from_vec(&[bsz, 1, h, w], z_ref_all)?;
    let volume = if opts.use_volume {
        Some(Tensor::from_vec(&[bsz, 2, h, h, w], vols)?)
    } else {
        None
    };
    let pred = model.predict(&z_t, &ts, &conds, &z_ref, volume.as_ref())?;
    pred.mse(&eps_target)
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
    pub conditioning: ConditioningOptions,
    /// Skip the unconditional branch entirely (diagnostic; equivalent to
    /// guidance = 1 up to float identity).
    pub conditional_only: bool,
}

impl SampleOptions {
    pub fn new(steps: usize, guidance: f32, seed: u64) -> Self {
        SampleOptions {
            steps,
            guidance,
            seed,
            conditioning: ConditioningOptions::default(),
            conditional_only: false,
        }
    }
}

/// Evenly spaced decreasing timesteps for `steps <= T`.
pub fn sample_timesteps(t_total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|i| i * t_total / steps).collect()
}

/// Deterministic reverse process (evenly spaced non-Markovian updates).
/// Translates `x_ref` into the target view of `direction`. The target latent
/// starts from seeded unit Gaussian noise; at each selected timestep the
/// reference latent is noised to the synchronized t (one noise realization
/// drawn up front), the feature volume is rebuilt from the noised reference
/// and the current noisy target, and the noise estimate is the CFG
/// combination of the conditional and unconditional branches.
pub fn sample<M: NoisePredictor>(
    model: &M,
    x_ref: &Tensor,
    direction: Direction,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<Tensor> {
    let [h, w] = x_ref.shape() else {
        return Err(Error::invalid("sample: x_ref must be [h,w]"));
    };
    let (h, w) = (*h, *w);
    let t_total = sched.len();
    if opts.steps == 0 || opts.steps > t_total {
        return Err(Error::invalid(format!(
            "sample: steps {} out of range 1..={t_total}",
            opts.steps
        )));
    }
    no_grad(|| {
        let mut rng = Rng::new(opts.seed);
        let mut z = rng.normal_vec(h * w);
        let eps_ref = Tensor::from_vec(&[h, w], rng.normal_vec(h * w))?;
        let zeros_ref = Tensor::zeros(&[1, 1, h, w]);
        let zeros_img = Tensor::zeros(&[h, w]);

        let ts = sample_timesteps(t_total, opts.steps);
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            let z_t = Tensor::from_vec(&[1, 1, h, w], z.clone())?;
            let z_img = Tensor::from_vec(&[h, w], z.clone())?;

            let ref_noised = q_sample(x_ref, t, &eps_ref, sched)?;
            let cond_vol = if opts.conditioning.use_volume {
                Some(build_volume_views(
                    direction,
                    &z_img,
                    &ref_noised,
                    opts.conditioning.reference_only,
                )?)
            } else {
                None
            };
            let cond_vol5 = match &cond_vol {
                Some(v) => Some(v.reshape(&[1, 2, h, h, w])?),
                None => None,
            };
            let ref4 = x_ref.reshape(&[1, 1, h, w])?;
            let eps_c = model.predict(
                &z_t,
                &[t],
                &[Condition::Dir(direction)],
                &ref4,
                cond_vol5.as_ref(),
            )?;

            let eps_hat = if opts.conditional_only {
                eps_c
            } else {
                let uncond_vol5 = if opts.conditioning.use_volume {
                    let v = build_volume_views(
                        direction,
                        &z_img,
                        &zeros_img,
                        opts.conditioning.reference_only,
                    )?;
                    Some(v.reshape(&[1, 2, h, h, w])?)
                } else {
                    None
                };
                let eps_u = model.predict(
                    &z_t,
                    &[t],
                    &[Condition::Null],
                    &zeros_ref,
                    uncond_vol5.as_ref(),
                )?;
                cfg_combine(&eps_c, &eps_u, opts.guidance)?
            };

            // deterministic non-Markovian reverse update
            let ab_t = sched.alpha_bar(t) as f64;
            let ab_p = sched.alpha_bar(t_prev) as f64;
            let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
            let (sa_p, sb_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
            let e = eps_hat.data();
            for i in 0..h * w {
                let x0 = (z[i] as f64 - sb_t * e[i] as f64) / sa_t;
                z[i] = (sa_p * x0 + sb_p * e[i] as f64) as f32;
            }
        }

        // identity decoder back to image space, clamped to the image range
        let img: Vec<f32> = z.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Tensor::from_vec(&[h, w], img)
    })
}
