//! Sequential random search over the regularization strengths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::prior::LossWeights;
use crate::seg::VariantKind;

/// Names of the λ fields a variant uses.
pub fn active_lambdas(v: VariantKind) -> &'static [&'static str] {
    match v {
        VariantKind::Baseline => &[],
        VariantKind::Shape => &["lambda_s"],
        VariantKind::Topo => &["lambda_t"],
        VariantKind::ShapeTopo => &["lambda_s", "lambda_t"],
        VariantKind::Jmpe => &["lambda"],
    }
}

fn set(w: &mut LossWeights, name: &str, v: f64) {
    match name {
        "lambda" => w.lambda = v,
        "lambda_s" => w.lambda_s = v,
        "lambda_t" => w.lambda_t = v,
        _ => unreachable!("unknown weight {name}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub lambdas: Vec<(String, f64)>,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: LossWeights,
    pub best_trial: usize,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,lambdas,objective\n");
        for t in &self.trials {
            let l: Vec<String> = t.lambdas.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s += &format!("{},{},{}\n", t.index, l.join(";"), t.objective);
        }
        s
    }
}

/// Log-uniform random search (sampler: independent log-uniform draws per
/// active λ). `objective` is maximised; the first best trial wins ties.
pub fn search_lambda(
    variant: VariantKind,
    base: LossWeights,
    trials: usize,
    range: [f64; 2],
    seed: u64,
    mut objective: impl FnMut(&LossWeights) -> Result<f64>,
) -> Result<SearchResult> {
    if trials == 0 {
        return Err(invalid!("search needs at least one trial"));
    }
    let (lo, hi) = (range[0].ln(), range[1].ln());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(trials);
    let mut best: Option<(f64, usize, LossWeights)> = None;
    for index in 0..trials {
        let mut w = base;
        let mut lambdas = Vec::new();
        for &name in active_lambdas(variant) {
            let v = if hi > lo {
                rng.random_range(lo..hi).exp()
            } else {
                range[0]
            };
            set(&mut w, name, v);
            lambdas.push((name.to_string(), v));
        }
        let obj = objective(&w)?;
        if best.as_ref().is_none_or(|(b, _, _)| obj > *b) {
            best = Some((obj, index, w));
        }
        log.push(Trial {
            index,
            lambdas,
            objective: obj,
        });
    }
    let (_, best_trial, best) = best.expect("trials >= 1");
    Ok(SearchResult {
        best,
        best_trial,
        trials: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_trial_returns_its_lambda() {
        let r = search_lambda(
            VariantKind::Jmpe,
            LossWeights::default(),
            1,
            [0.1, 100.0],
            3,
            |_| Ok(0.5),
        )
        .unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best.lambda, r.trials[0].lambdas[0].1);
        assert!((0.1..=100.0).contains(&r.best.lambda));
    }

    #[test]
    fn log_has_one_row_per_trial() {
        let r = search_lambda(
            VariantKind::ShapeTopo,
            LossWeights::default(),
            7,
            [0.1, 100.0],
            1,
            |w| Ok(-w.lambda_s),
        )
        .unwrap();
        assert_eq!(r.trials.len(), 7);
        assert!(r.trials.iter().all(|t| t.lambdas.len() == 2));
        assert_eq!(r.to_csv().lines().count(), 8);
    }

    #[test]
    fn concentrates_near_synthetic_optimum() {
        let r = search_lambda(
            VariantKind::Jmpe,
            LossWeights::default(),
            20,
            [0.1, 100.0],
            0,
            |w| Ok(-(w.lambda - 10.0).abs()),
        )
        .unwrap();
        assert!(
            (5.0..=20.0).contains(&r.best.lambda),
            "best λ {}",
            r.best.lambda
        );
    }

    #[test]
    fn samples_are_log_uniform() {
        let mut below_one = 0;
        let r = search_lambda(
            VariantKind::Shape,
            LossWeights::default(),
            3000,
            [0.1, 100.0],
            5,
            |_| Ok(0.0),
        )
        .unwrap();
        for t in &r.trials {
            let v = t.lambdas[0].1;
            assert!((0.1..100.0).contains(&v));
            if v < 1.0 {
                below_one += 1;
            }
        }
        // log-uniform: P(λ < 1) = 1/3
        let frac = below_one as f64 / 3000.0;
        assert!((frac - 1.0 / 3.0).abs() < 0.03, "{frac}");
    }
}
