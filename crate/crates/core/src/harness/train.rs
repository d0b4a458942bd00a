use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{strong_view, synth_dataset, synth_samples, weak_view, Dataset};
use super::predictor::{ema_update, ToyPredictor};
use crate::dte::{ThresholdSchedule, Thresholds};
use crate::error::{CadError, Result};
use crate::grid::GridSpec;
use crate::llcr::{displace_views, Displacement, DisplacementRecord, PlacementRule, Region, DEFAULT_K_TOP};
use crate::losses::{
    argmax_labels, cps_gradient, cps_loss, loss_gradient, mt_loss, total_loss, LossComponents, LossKind, LossReport,
    OneHotLabels,
};
use crate::metrics::dsc;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// Everything one displacement iteration needs besides the models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig<T> {
    pub grid_spec: GridSpec,
    pub schedule: ThresholdSchedule<T>,
    pub ema_decay: T,
    pub kl_mode: bool,
    pub k_top: usize,
    pub seed: u64,
}

impl<T: Scalar> IterationConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay >= T::zero() && self.ema_decay <= T::one()) {
            return Err(CadError::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.kl_mode && self.k_top == 0 {
            return Err(CadError::Config("k_top must be at least 1 in KL mode".into()));
        }
        Ok(())
    }
}

/// Output of [`cad_step`].
#[derive(Debug, Clone)]
pub struct CadStep<T> {
    pub x_prime_w: Tensor<T>,
    pub x_prime_s: Tensor<T>,
    pub weak_to_strong: DisplacementRecord<T>,
    pub strong_to_weak: DisplacementRecord<T>,
    pub report: LossReport<T>,
    pub thresholds: Thresholds<T>,
    logits_w: Tensor<T>,
    logits_s: Tensor<T>,
    logits_prime_w: Tensor<T>,
    logits_prime_s: Tensor<T>,
    mt_target: OneHotLabels<T>,
}

impl<T: Scalar> CadStep<T> {
    pub fn records(&self) -> [&DisplacementRecord<T>; 2] {
        [&self.weak_to_strong, &self.strong_to_weak]
    }

    /// Weight gradients of `L_1` for the first student and `L_2` for the
    /// second. Pseudo-label targets are constants.
    pub fn student_gradients(
        &self,
        x_w: &Tensor<T>,
        x_s: &Tensor<T>,
        f1: &ToyPredictor<T>,
        f2: &ToyPredictor<T>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let mut g1 = vec![T::zero(); f1.weights().len()];
        let mut g2 = vec![T::zero(); f2.weights().len()];

        let mut on_w = loss_gradient(LossKind::Mt, &self.logits_w, &self.mt_target)?;
        add_into(&mut on_w, &cps_gradient(&self.logits_w, &self.logits_s)?);
        f1.accumulate_gradient(x_w, &on_w, &mut g1)?;
        f1.accumulate_gradient(
            &self.x_prime_w,
            &cps_gradient(&self.logits_prime_w, &self.logits_prime_s)?,
            &mut g1,
        )?;

        let mut on_s = loss_gradient(LossKind::Mt, &self.logits_s, &self.mt_target)?;
        add_into(&mut on_s, &cps_gradient(&self.logits_s, &self.logits_w)?);
        f2.accumulate_gradient(x_s, &on_s, &mut g2)?;
        f2.accumulate_gradient(
            &self.x_prime_s,
            &cps_gradient(&self.logits_prime_s, &self.logits_prime_w)?,
            &mut g2,
        )?;
        Ok((g1, g2))
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    let data: Vec<T> = acc.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
    *acc = Tensor::from_parts_unchecked(acc.shape().to_vec(), data);
}

/// One full displacement iteration on a weak/strong pair.
///
/// Confidence grids come from the first student on the weak view and the
/// second on the strong view. The strong view's low region is filled from
/// the weak view and vice versa; both replacements read the original views.
/// Mean-teacher terms use `labels` when given, otherwise the teacher's argmax
/// on the weak view.
#[allow(clippy::too_many_arguments)]
pub fn cad_step<T: Scalar>(
    x_w: &Tensor<T>,
    x_s: &Tensor<T>,
    f1: &ToyPredictor<T>,
    f2: &ToyPredictor<T>,
    teacher: &ToyPredictor<T>,
    labels: Option<&LabelMap>,
    cfg: &IterationConfig<T>,
    t: u64,
) -> Result<CadStep<T>> {
    x_w.ensure_same_shape(x_s)?;
    let (h, w) = x_w.hw()?;
    cfg.grid_spec.check_spatial(h, w)?;
    cfg.validate()?;

    let logits_w = f1.forward(x_w)?;
    let logits_s = f2.forward(x_s)?;
    let thresholds = cfg.schedule.thresholds_at(t);
    let rule = if cfg.kl_mode {
        PlacementRule::KlTop(cfg.k_top)
    } else {
        PlacementRule::MostConfident
    };
    let Displacement {
        x_prime_w,
        x_prime_s,
        weak_to_strong,
        strong_to_weak,
    } = displace_views(x_w, x_s, &logits_w, &logits_s, cfg.grid_spec, thresholds, rule, t)?;

    let logits_prime_w = f1.forward(&x_prime_w)?;
    let logits_prime_s = f2.forward(&x_prime_s)?;

    let mt_target = match labels {
        Some(l) => {
            if (l.height(), l.width()) != (h, w) || l.num_classes() != f1.num_classes() {
                return Err(CadError::ShapeMismatch {
                    expected: vec![f1.num_classes(), h, w],
                    actual: vec![l.num_classes(), l.height(), l.width()],
                });
            }
            OneHotLabels::from_label_map(l)
        }
        None => OneHotLabels::from_argmax(&teacher.forward(x_w)?)?,
    };

    let components = LossComponents {
        mt1: mt_loss(&logits_w, &mt_target)?,
        mt2: mt_loss(&logits_s, &mt_target)?,
        cps1: cps_loss(&logits_w, &logits_s)?,
        cps2: cps_loss(&logits_s, &logits_w)?,
        cad1: cps_loss(&logits_prime_w, &logits_prime_s)?,
        cad2: cps_loss(&logits_prime_s, &logits_prime_w)?,
    };
    let report = total_loss(components)?;

    Ok(CadStep {
        x_prime_w,
        x_prime_s,
        weak_to_strong,
        strong_to_weak,
        report,
        thresholds,
        logits_w,
        logits_s,
        logits_prime_w,
        logits_prime_s,
        mt_target,
    })
}

/// Settings for the synthetic training demo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub image_size: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub heldout: usize,
    pub grid: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub init_scale: f64,
    /// Ramp time constant; `iterations / 5` when unset.
    pub beta: Option<f64>,
    pub kl_mode: bool,
    pub k_top: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            iterations: 300,
            image_size: 64,
            labeled: 2,
            unlabeled: 16,
            heldout: 4,
            grid: 16,
            learning_rate: 2.0,
            ema_decay: 0.99,
            init_scale: 0.5,
            beta: None,
            kl_mode: false,
            k_top: DEFAULT_K_TOP,
        }
    }
}

impl TrainConfig {
    pub fn schedule<T: Scalar>(&self) -> Result<ThresholdSchedule<T>> {
        match self.beta {
            Some(b) => ThresholdSchedule::with_beta(T::of(b)),
            None => ThresholdSchedule::for_iterations(self.iterations as u64),
        }
    }

    pub fn iteration_config<T: Scalar>(&self) -> Result<IterationConfig<T>> {
        Ok(IterationConfig {
            grid_spec: GridSpec::square(self.grid, self.image_size, self.image_size)?,
            schedule: self.schedule()?,
            ema_decay: T::of(self.ema_decay),
            kl_mode: self.kl_mode,
            k_top: self.k_top,
            seed: self.seed,
        })
    }
}

/// Mean foreground DSC on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutDsc {
    pub teacher: f64,
    pub student1: f64,
    pub student2: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub t: u64,
    pub c_threshold: f64,
    pub r_threshold: usize,
    pub losses: LossReport<f64>,
    pub supervised_mt1: f64,
    pub supervised_mt2: f64,
    pub region_sizes: [usize; 2],
    pub records: Vec<DisplacementRecord<f64>>,
    /// Held-out foreground DSC of the models used in this iteration.
    pub heldout_dsc: HeldoutDsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: TrainConfig,
    pub iterations: Vec<IterationLog>,
    /// Held-out DSC after the last update.
    pub final_dsc: HeldoutDsc,
    pub teacher: ToyPredictor<f64>,
}

impl TrainingLog {
    /// Line-delimited JSON: one record per iteration, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(it).expect("log serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "config": self.config,
                "final_dsc": self.final_dsc,
                "teacher_weights": self.teacher.weights(),
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// Mean `l_total` over the first and last `window` iterations.
    pub fn loss_window_means(&self, window: usize) -> (f64, f64) {
        let n = self.iterations.len();
        let window = window.clamp(1, n.max(1));
        let mean = |s: &[IterationLog]| s.iter().map(|i| i.losses.l_total).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.iterations[..window]), mean(&self.iterations[n - window..]))
    }
}

fn mean_dsc(model: &ToyPredictor<f64>, heldout: &[(Tensor<f64>, LabelMap)]) -> Result<f64> {
    if heldout.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (image, truth) in heldout {
        let pred = argmax_labels(&model.forward(image)?)?;
        sum += dsc(&pred, truth, 1)?;
    }
    Ok(sum / heldout.len() as f64)
}

fn heldout_dsc(
    teacher: &ToyPredictor<f64>,
    f1: &ToyPredictor<f64>,
    f2: &ToyPredictor<f64>,
    heldout: &[(Tensor<f64>, LabelMap)],
) -> Result<HeldoutDsc> {
    Ok(HeldoutDsc {
        teacher: mean_dsc(teacher, heldout)?,
        student1: mean_dsc(f1, heldout)?,
        student2: mean_dsc(f2, heldout)?,
    })
}

fn check_finite(t: usize, what: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(CadError::Diverged {
            iteration: t,
            detail: format!("{what} = {v}"),
        });
    }
    Ok(())
}

/// Seeds for the three models and the augmentation stream.
const INIT_STREAM_F1: u64 = 1;
const INIT_STREAM_F2: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

/// Dual-student mean-teacher training with displacement on `dataset`.
///
/// Each iteration takes one labeled and one unlabeled sample in turn. The
/// labeled sample adds supervised dice + CE terms for both students, the
/// unlabeled sample goes through [`cad_step`] with teacher pseudo-labels.
/// Students then take a gradient step and the teacher follows by EMA.
pub fn train(dataset: &Dataset<f64>, heldout: &[(Tensor<f64>, LabelMap)], cfg: &TrainConfig) -> Result<TrainingLog> {
    if dataset.labeled.is_empty() {
        return Err(CadError::Config("training needs at least one labeled sample".into()));
    }
    if cfg.iterations == 0 {
        return Err(CadError::Config("iterations must be at least 1".into()));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(CadError::Config(format!("invalid learning rate {}", cfg.learning_rate)));
    }
    let icfg = cfg.iteration_config::<f64>()?;
    icfg.validate()?;

    let num_classes = dataset.labeled[0].1.num_classes();
    let mut f1 = ToyPredictor::random(
        num_classes,
        cfg.init_scale,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM_F1 << 32),
    )?;
    let mut f2 = ToyPredictor::random(
        num_classes,
        cfg.init_scale,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM_F2 << 32),
    )?;
    let mut teacher = ema_update(&f1, &f1, &f2, 0.0)?;

    // Strong views are drawn once per sample so a run depends only on the seed.
    let mut aug = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_STREAM << 32);
    let labeled_views: Vec<(Tensor<f64>, Tensor<f64>)> = dataset
        .labeled
        .iter()
        .map(|(x, _)| (weak_view(x), strong_view(x, &mut aug)))
        .collect();
    let unlabeled_views: Vec<(Tensor<f64>, Tensor<f64>)> = dataset
        .unlabeled
        .iter()
        .map(|x| (weak_view(x), strong_view(x, &mut aug)))
        .collect();

    let mut log = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let dsc_now = heldout_dsc(&teacher, &f1, &f2, heldout)?;

        let li = t % labeled_views.len();
        let (xl_w, xl_s) = &labeled_views[li];
        let truth = OneHotLabels::from_label_map(&dataset.labeled[li].1);
        let zl_w = f1.forward(xl_w)?;
        let zl_s = f2.forward(xl_s)?;
        let sup1 = mt_loss(&zl_w, &truth)?;
        let sup2 = mt_loss(&zl_s, &truth)?;

        let mut g1 = vec![0.0; f1.weights().len()];
        let mut g2 = vec![0.0; f2.weights().len()];
        f1.accumulate_gradient(xl_w, &loss_gradient(LossKind::Mt, &zl_w, &truth)?, &mut g1)?;
        f2.accumulate_gradient(xl_s, &loss_gradient(LossKind::Mt, &zl_s, &truth)?, &mut g2)?;

        // Without unlabeled data the labeled pair goes through displacement
        // with its ground truth instead.
        let step = if unlabeled_views.is_empty() {
            let (x_w, x_s) = &labeled_views[li];
            let s = cad_step(
                x_w,
                x_s,
                &f1,
                &f2,
                &teacher,
                Some(&dataset.labeled[li].1),
                &icfg,
                t as u64,
            )?;
            (s, x_w, x_s)
        } else {
            let (x_w, x_s) = &unlabeled_views[t % unlabeled_views.len()];
            let s = cad_step(x_w, x_s, &f1, &f2, &teacher, None, &icfg, t as u64)?;
            (s, x_w, x_s)
        };
        let (step, x_w, x_s) = step;
        let (u1, u2) = step.student_gradients(x_w, x_s, &f1, &f2)?;
        for (g, u) in g1.iter_mut().zip(&u1) {
            *g += u;
        }
        for (g, u) in g2.iter_mut().zip(&u2) {
            *g += u;
        }

        let mut losses = step.report;
        losses.l_mt1 += sup1;
        losses.l_mt2 += sup2;
        let losses = total_loss(LossComponents {
            mt1: losses.l_mt1,
            mt2: losses.l_mt2,
            cps1: losses.l_cps1,
            cps2: losses.l_cps2,
            cad1: losses.l_cad1,
            cad2: losses.l_cad2,
        })
        .map_err(|e| CadError::Diverged {
            iteration: t,
            detail: e.to_string(),
        })?;
        check_finite(t, "l_total", losses.l_total)?;
        for (i, g) in g1.iter().chain(&g2).enumerate() {
            check_finite(t, &format!("gradient[{i}]"), *g)?;
        }

        log::debug!("t={t} l_total={:.6} dsc={:.4}", losses.l_total, dsc_now.teacher);
        log.push(IterationLog {
            t: t as u64,
            c_threshold: step.thresholds.c_threshold,
            r_threshold: step.thresholds.r_threshold,
            losses,
            supervised_mt1: sup1,
            supervised_mt2: sup2,
            region_sizes: [step.weak_to_strong.region.len(), step.strong_to_weak.region.len()],
            records: vec![step.weak_to_strong.clone(), step.strong_to_weak.clone()],
            heldout_dsc: dsc_now,
        });

        f1.descend(&g1, cfg.learning_rate);
        f2.descend(&g2, cfg.learning_rate);
        for (i, w) in f1.weights().iter().chain(f2.weights()).enumerate() {
            check_finite(t, &format!("weight[{i}]"), *w)?;
        }
        teacher = ema_update(&teacher, &f1, &f2, cfg.ema_decay)?;
    }

    let final_dsc = heldout_dsc(&teacher, &f1, &f2, heldout)?;
    Ok(TrainingLog {
        config: *cfg,
        iterations: log,
        final_dsc,
        teacher,
    })
}

/// Offset separating the held-out seed from the training seed.
const HELDOUT_SEED_OFFSET: u64 = 0x5eed;

/// Synthesizes the training and held-out splits for `cfg` and trains.
pub fn run_demo(cfg: &TrainConfig) -> Result<TrainingLog> {
    let dataset = synth_dataset::<f64>(cfg.seed, cfg.labeled, cfg.unlabeled, cfg.image_size, cfg.image_size)?;
    let heldout: Vec<_> = synth_samples::<f64>(
        cfg.seed.wrapping_add(HELDOUT_SEED_OFFSET),
        cfg.heldout,
        cfg.image_size,
        cfg.image_size,
    )?
    .into_iter()
    .map(|s| (s.image, s.label))
    .collect();
    log::info!(
        "demo: seed={} iterations={} labeled={} unlabeled={}",
        cfg.seed,
        cfg.iterations,
        cfg.labeled,
        cfg.unlabeled
    );
    train(&dataset, &heldout, cfg)
}

/// Whether every pixel outside both regions' footprints is unchanged.
pub fn outside_footprint_unchanged<T: Scalar>(
    original: &Tensor<T>,
    displaced: &Tensor<T>,
    region: &Region,
    spec: GridSpec,
) -> bool {
    let mask = crate::llcr::region_pixel_mask(region, spec);
    original
        .data()
        .iter()
        .zip(displaced.data())
        .zip(&mask)
        .all(|((a, b), &m)| m || a.as_f64().to_bits() == b.as_f64().to_bits())
}
