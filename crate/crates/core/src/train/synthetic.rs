//! Synthetic walkers with a known future distribution.
//!
//! Every walker moves at constant velocity through its observed steps. Its
//! future is the straight-line extrapolation plus a random walk whose
//! per-step increments are isotropic with deviation `σ_true(k)`, so step `t`
//! is distributed as `N(x_last + t·v·dt, s_t² I)` with `s_t² = Σ_{k≤t} σ_true(k)²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{RawAnnotation, TrackletWindow, DEFAULT_FRAME_STRIDE, WINDOW_LEN};
use crate::{Error, Result, Vec2, DT, OBS_LEN, PRED_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Noise-free straight walkers; the schedule is ignored.
    ConstantVelocity,
    HeteroscedasticNoise,
}

/// Per-step increment deviation `σ_true(k)`, `k = 1..=PRED_LEN`, in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// `σ(k) = base + slope·(k − 1)`.
    Linear {
        base: f64,
        slope: f64,
    },
    Table(Vec<f64>),
}

impl NoiseSchedule {
    pub fn sigma(&self, k: usize) -> f64 {
        match self {
            NoiseSchedule::Linear { base, slope } => base + slope * (k as f64 - 1.0),
            NoiseSchedule::Table(v) => v[k - 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let NoiseSchedule::Table(v) = self {
            if v.len() != PRED_LEN {
                return Err(Error::invalid(format!(
                    "noise table needs {PRED_LEN} entries, got {}",
                    v.len()
                )));
            }
        }
        for k in 1..=PRED_LEN {
            let s = self.sigma(k);
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("noise deviation at step {k} is {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: CorpusKind,
    pub schedule: NoiseSchedule,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn effective_sigma(&self, k: usize) -> f64 {
        match self.kind {
            CorpusKind::ConstantVelocity => 0.0,
            CorpusKind::HeteroscedasticNoise => self.schedule.sigma(k),
        }
    }
}

/// `s_t² = Σ_{k≤t} σ(k)²`.
pub fn accumulated_variance(schedule: &NoiseSchedule, t: usize) -> f64 {
    (1..=t).map(|k| schedule.sigma(k).powi(2)).sum()
}

/// Full 20-step tracks of the corpus.
fn tracks(spec: &SyntheticSpec) -> Result<Vec<[Vec2; WINDOW_LEN]>> {
    spec.schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let start = Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let speed: f64 = rng.random_range(0.8..1.6);
        let v = Vec2::new(heading.cos(), heading.sin()) * speed;
        let mut track = [Vec2::ZERO; WINDOW_LEN];
        for (t, p) in track.iter_mut().enumerate().take(OBS_LEN) {
            *p = start + v * (t as f64 * DT);
        }
        let last = track[OBS_LEN - 1];
        let mut walk = Vec2::ZERO;
        for k in 1..=PRED_LEN {
            let s = spec.effective_sigma(k);
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            walk += Vec2::new(ex, ey) * s;
            track[OBS_LEN - 1 + k] = last + v * (k as f64 * DT) + walk;
        }
        out.push(track);
    }
    Ok(out)
}

/// Windows of isolated walkers (no neighbors), one per walker.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Vec<TrackletWindow>> {
    tracks(spec)?
        .into_iter()
        .enumerate()
        .map(|(i, tr)| {
            let obs: [Vec2; OBS_LEN] = std::array::from_fn(|t| tr[t]);
            let fut: [Vec2; PRED_LEN] = std::array::from_fn(|t| tr[OBS_LEN + t]);
            TrackletWindow::new(i as i64, 0, obs, fut, Vec::new(), DT)
        })
        .collect()
}

/// The same corpus as annotation rows. Walkers occupy disjoint frame
/// ranges, so windows built from the rows have no neighbors.
pub fn synthetic_scene(spec: &SyntheticSpec) -> Result<Vec<RawAnnotation>> {
    let block = DEFAULT_FRAME_STRIDE * (WINDOW_LEN as i64 + 5);
    Ok(tracks(spec)?
        .into_iter()
        .enumerate()
        .flat_map(|(i, tr)| {
            tr.into_iter().enumerate().map(move |(t, pos)| RawAnnotation {
                frame: i as i64 * block + t as i64 * DEFAULT_FRAME_STRIDE,
                ped_id: i as i64 + 1,
                pos,
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_windows;

    fn spec(kind: CorpusKind, count: usize) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            schedule: NoiseSchedule::Linear { base: 0.1, slope: 0.05 },
            count,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_futures_are_exact_extrapolations() {
        for w in make_synthetic(&spec(CorpusKind::ConstantVelocity, 20)).unwrap() {
            let v = (w.obs()[7] - w.obs()[6]) * (1.0 / DT);
            for (k, p) in w.fut().iter().enumerate() {
                let expect = w.last_obs() + v * ((k + 1) as f64 * DT);
                assert!((*p - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulated_variance_sums_squares() {
        let s = NoiseSchedule::Linear { base: 0.1, slope: 0.05 };
        assert!((accumulated_variance(&s, 3) - (0.01 + 0.0225 + 0.04)).abs() < 1e-15);
        assert_eq!(accumulated_variance(&s, 0), 0.0);
    }

    #[test]
    fn empirical_covariance_matches_closed_form() {
        let sp = spec(CorpusKind::HeteroscedasticNoise, 10_000);
        let ws = make_synthetic(&sp).unwrap();
        let n = ws.len() as f64;
        for t in [1, 6, 12] {
            let errs: Vec<Vec2> = ws
                .iter()
                .map(|w| {
                    let v = (w.obs()[7] - w.obs()[6]) * (1.0 / DT);
                    w.fut()[t - 1] - (w.last_obs() + v * (t as f64 * DT))
                })
                .collect();
            let cxx = errs.iter().map(|e| e.x * e.x).sum::<f64>() / n;
            let cyy = errs.iter().map(|e| e.y * e.y).sum::<f64>() / n;
            let cxy = errs.iter().map(|e| e.x * e.y).sum::<f64>() / n;
            let truth = accumulated_variance(&sp.schedule, t);
            assert!((cxx / truth - 1.0).abs() < 0.03, "t={t} cxx {cxx} vs {truth}");
            assert!((cyy / truth - 1.0).abs() < 0.03, "t={t} cyy {cyy} vs {truth}");
            assert!(cxy.abs() / truth < 0.03);
        }
    }

    #[test]
    fn scene_rows_rebuild_the_same_windows() {
        let sp = spec(CorpusKind::HeteroscedasticNoise, 5);
        let rows = synthetic_scene(&sp).unwrap();
        let built = build_windows(&rows, DT, DEFAULT_FRAME_STRIDE).unwrap();
        let direct = make_synthetic(&sp).unwrap();
        assert_eq!(built.len(), 5);
        for (b, d) in built.iter().zip(&direct) {
            assert!(b.neighbors().is_empty());
            assert_eq!(b.obs(), d.obs());
            assert_eq!(b.fut(), d.fut());
        }
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::Table(vec![0.1; 3]).validate().is_err());
        assert!(NoiseSchedule::Linear { base: -0.1, slope: 0.0 }.validate().is_err());
    }
}
