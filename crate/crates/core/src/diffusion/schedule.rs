//! Forward-process noise schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Descriptor sufficient to rebuild a schedule (stored in checkpoints).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_train: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

/// Linear beta schedule with precomputed cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Build a linear schedule; betas strictly increase from `beta_min` to
/// `beta_max` over `t_train` steps.
pub fn make_schedule(t_train: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(Error::Contract("schedule: t_train must be >= 1".into()));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Contract(format!(
            "schedule: need 0 < beta_min < beta_max < 1, got {beta_min} / {beta_max}"
        )));
    }
    let denom = (t_train.max(2) - 1) as f64;
    let betas: Vec<f64> = (0..t_train)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / denom)
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_train);
    let mut prod = 1.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec { t_train, beta_min, beta_max },
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        make_schedule(spec.t_train, spec.beta_min, spec.beta_max)
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn t_train(&self) -> usize {
        self.spec.t_train
    }

    /// Beta at 1-indexed timestep `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of (1 - beta) up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.spec.t_train {
            return Err(Error::Contract(format!(
                "timestep {t} outside [1, {}]",
                self.spec.t_train
            )));
        }
        Ok(())
    }

    /// Forward diffusion draw: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps.
    pub fn q_sample(&self, x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "q_sample: x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let ab = self.alpha_bar(t);
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| sa * x + sb * e)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }
}
