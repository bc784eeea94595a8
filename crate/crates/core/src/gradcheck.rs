//! Central finite-difference checks for every analytic loss gradient.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{bbox_loss, distill_l1, entity_ce, predicate_focal, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckParams {
    pub h: f64,
    pub points: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub focal_gamma: f64,
    pub focal_balance: f64,
}

impl Default for GradCheckParams {
    fn default() -> Self {
        Self {
            h: 1e-3,
            points: 100,
            tolerance: 1e-4,
            seed: 0,
            focal_gamma: 2.0,
            focal_balance: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub max_rel_err: f64,
    pub points_tested: usize,
    /// Points drawn too close to a kink and redrawn.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub losses: BTreeMap<String, LossCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.losses.values().all(|c| c.passed)
    }
}

/// `||a - f|| / max(||a||, ||f||, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, f)| a - f).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn run(
    params: &GradCheckParams,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Option<(Vec<f64>, Vec<f64>, Box<dyn Fn(&[f64]) -> f64>)>,
    salt: u64,
) -> LossCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ salt);
    let mut max_rel_err: f64 = 0.0;
    let (mut tested, mut skipped) = (0, 0);
    while tested < params.points {
        let Some((x, grad, f)) = draw(&mut rng) else {
            skipped += 1;
            continue;
        };
        let numeric = numeric_gradient(&*f, &x, params.h);
        max_rel_err = max_rel_err.max(relative_error(&grad, &numeric));
        tested += 1;
    }
    LossCheck {
        max_rel_err,
        points_tested: tested,
        skipped,
        passed: max_rel_err <= params.tolerance,
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0.0..10.0);
    let y1 = rng.random_range(0.0..10.0);
    let w = rng.random_range(0.5..6.0);
    let h = rng.random_range(0.5..6.0);
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

/// Smallest distance from `b` to a point where the box loss is not smooth.
fn bbox_kink_distance(b: &BBox, gt: &BBox) -> f64 {
    let (bc, gc) = (b.coords(), gt.coords());
    let mut d = f64::INFINITY;
    for i in 0..4 {
        d = d.min((bc[i] - gc[i]).abs());
    }
    // overlap appears or vanishes
    d = d.min((b.x2 - gt.x1).abs()).min((gt.x2 - b.x1).abs());
    d = d.min((b.y2 - gt.y1).abs()).min((gt.y2 - b.y1).abs());
    d
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
}

pub fn check_bbox(params: &GradCheckParams) -> LossCheck {
    let margin = 2.0 * params.h;
    run(
        params,
        |rng| {
            let gt = random_box(rng);
            let b = random_box(rng);
            if bbox_kink_distance(&b, &gt) < margin {
                return None;
            }
            let grad = bbox_loss(&b, &gt).grad.to_vec();
            let f = move |x: &[f64]| bbox_loss(&BBox { x1: x[0], y1: x[1], x2: x[2], y2: x[3] }, &gt).value;
            Some((b.coords().to_vec(), grad, Box::new(f)))
        },
        0xb0,
    )
}

pub fn check_entity_ce(params: &GradCheckParams) -> LossCheck {
    run(
        params,
        |rng| {
            let n = rng.random_range(2..=20);
            let z = random_logits(rng, n);
            let t = rng.random_range(0..n);
            let grad = entity_ce(&z, t).ok()?.grad;
            let f = move |x: &[f64]| entity_ce(x, t).map(|l| l.value).unwrap_or(f64::NAN);
            Some((z, grad, Box::new(f)))
        },
        0xce,
    )
}

pub fn check_focal(params: &GradCheckParams) -> LossCheck {
    let (gamma, balance) = (params.focal_gamma, params.focal_balance);
    run(
        params,
        |rng| {
            let n = rng.random_range(2..=20);
            let z = random_logits(rng, n);
            let t = rng.random_range(0..n);
            let grad = predicate_focal(&z, t, gamma, balance).ok()?.grad;
            let f = move |x: &[f64]| {
                predicate_focal(x, t, gamma, balance).map(|l| l.value).unwrap_or(f64::NAN)
            };
            Some((z, grad, Box::new(f)))
        },
        0xf0,
    )
}

pub fn check_distill(params: &GradCheckParams) -> LossCheck {
    let margin = 2.0 * params.h;
    run(
        params,
        |rng| {
            let n = rng.random_range(1..=64);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            if r.iter().zip(&v).any(|(a, b)| (a - b).abs() < margin) {
                return None;
            }
            let grad = distill_l1(&r, &v).ok()?.grad;
            let f = move |x: &[f64]| distill_l1(x, &v).map(|l| l.value).unwrap_or(f64::NAN);
            Some((r, grad, Box::new(f)))
        },
        0xd1,
    )
}

/// Runs all four checks.
pub fn run_all(params: &GradCheckParams) -> GradCheckReport {
    let mut losses = BTreeMap::new();
    losses.insert("bbox".to_string(), check_bbox(params));
    losses.insert("entity_ce".to_string(), check_entity_ce(params));
    losses.insert("predicate_focal".to_string(), check_focal(params));
    losses.insert("distill_l1".to_string(), check_distill(params));
    GradCheckReport {
        h: params.h,
        tolerance: params.tolerance,
        losses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-3);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_zero_vectors() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_suite_passes() {
        let report = run_all(&GradCheckParams::default());
        for (name, c) in &report.losses {
            assert!(c.passed, "{name}: {}", c.max_rel_err);
            assert_eq!(c.points_tested, 100);
        }
    }

    #[test]
    fn focal_gradient_for_other_gammas() {
        for gamma in [0.0, 0.5, 1.0, 3.0] {
            let p = GradCheckParams { focal_gamma: gamma, focal_balance: 0.7, points: 30, ..Default::default() };
            assert!(check_focal(&p).passed, "gamma {gamma}");
        }
    }
}
