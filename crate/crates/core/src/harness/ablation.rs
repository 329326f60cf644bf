//! Cross-validated five-variant comparison.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{error, info};
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SHUFFLE_OFFSET};
use super::folds::{make_folds, FoldSplit};
use super::search::{search_lambda, SearchResult};
use crate::error::{invalid, Error, Result};
use crate::metrics::{avd, cldsc, dsc, jacc, SurfaceDistances};
use crate::phantom::{Case, Manifest};
use crate::prior::{
    train_prior_on, Head, LossWeights, PriorCodec, PriorNetSpec, PriorSample, PriorTrainConfig,
};
use crate::seg::{train_segmenter, write_run, SegTrainConfig, VariantKind, VariantSpec};
use crate::volume::{binarize, BinaryMask};

/// Reported columns, in table order.
pub const TABLE_METRICS: [&str; 6] = ["DSC", "Jacc", "clDSC", "HD", "AVD", "ASSD"];

/// The six table metrics for one case. AVD is the relative volume
/// difference. HD and ASSD are NaN when the prediction is empty.
pub fn case_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<[f64; 6]> {
    let (hd, assd) = if pred.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let sd = SurfaceDistances::compute(pred, gt)?;
        (sd.hausdorff(), sd.assd())
    };
    Ok([
        dsc(pred, gt)?,
        jacc(pred, gt)?,
        cldsc(pred, gt)?,
        hd,
        avd(pred, gt)?.1,
        assd,
    ])
}

/// Mean of the finite entries per column; NaN when a column has none.
fn column_means(rows: &[[f64; 6]]) -> [f64; 6] {
    std::array::from_fn(|j| {
        let v: Vec<f64> = rows
            .iter()
            .map(|r| r[j])
            .filter(|x| x.is_finite())
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellStatus {
    Ok { metrics: [f64; 6] },
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: VariantKind,
    pub weights: LossWeights,
    pub cells: Vec<CellStatus>,
}

impl VariantRow {
    fn fold_values(&self) -> Vec<[f64; 6]> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                CellStatus::Ok { metrics } => Some(*metrics),
                CellStatus::Failed { .. } => None,
            })
            .collect()
    }

    /// Mean and sample standard deviation across folds per metric.
    pub fn summary(&self) -> [(f64, f64); 6] {
        let vals = self.fold_values();
        std::array::from_fn(|j| {
            let v: Vec<f64> = vals.iter().map(|r| r[j]).collect();
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return (f64::NAN, f64::NAN);
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
    }

    pub fn failed(&self) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c, CellStatus::Failed { .. }))
    }

    fn lambda_text(&self) -> String {
        let w = &self.weights;
        match self.variant {
            VariantKind::Baseline => "-".into(),
            VariantKind::Shape => format!("lambda_s={:.2}", w.lambda_s),
            VariantKind::Topo => format!("lambda_t={:.2}", w.lambda_t),
            VariantKind::ShapeTopo => {
                format!("lambda_s={:.2} lambda_t={:.2}", w.lambda_s, w.lambda_t)
            }
            VariantKind::Jmpe => format!("lambda={:.2}", w.lambda),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub folds: usize,
    pub rows: Vec<VariantRow>,
}

impl AblationReport {
    /// True when every cell ran and every summary entry is finite.
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| {
            !r.failed()
                && r.summary()
                    .iter()
                    .all(|(m, s)| m.is_finite() && s.is_finite())
        })
    }

    pub fn row(&self, v: VariantKind) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,lambdas,status");
        for m in TABLE_METRICS {
            let _ = write!(s, ",{m}_mean,{m}_std");
        }
        s.push('\n');
        for r in &self.rows {
            let status = if r.failed() { "failed" } else { "ok" };
            let _ = write!(s, "{},{},{status}", r.variant, r.lambda_text());
            for (m, sd) in r.summary() {
                let _ = write!(s, ",{m},{sd}");
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text table; overlap scores in percent, AVD relative.
    pub fn to_table(&self) -> String {
        let head = [
            "DSC (%)",
            "Jacc (%)",
            "clDSC (%)",
            "HD (mm)",
            "AVD (rel)",
            "ASSD (mm)",
        ];
        let mut s = format!("{:<20} {:<28}", "Model", "Weights");
        for h in head {
            let _ = write!(s, " {h:>16}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<20} {:<28}", r.variant.label(), r.lambda_text());
            for (j, (m, sd)) in r.summary().into_iter().enumerate() {
                let cell = if r.failed() {
                    "FAILED".to_string()
                } else if !m.is_finite() {
                    "n/a".to_string()
                } else if j < 3 {
                    format!("{:.2}±{:.2}", 100.0 * m, 100.0 * sd)
                } else {
                    format!("{m:.2}±{sd:.2}")
                };
                let _ = write!(s, " {cell:>16}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "mean ± sample std over {} folds", self.folds);
        s
    }
}

type CodecCache = HashMap<Vec<Head>, std::result::Result<PriorCodec, String>>;

fn codec_name(heads: &[Head]) -> &'static str {
    match heads {
        [Head::Shape] => "shape",
        [Head::Topo] => "topo",
        _ => "jmpe",
    }
}

/// Loaded cases, their fold split and the per-fold codec cache.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    cases: Vec<Case>,
    index: HashMap<String, usize>,
    split: FoldSplit,
    codecs: Vec<CodecCache>,
}

impl Experiment {
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let cases = Manifest::load(&cfg.manifest)?.load_cases()?;
        let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
        let split = make_folds(&ids, cfg.folds, cfg.seed + SHUFFLE_OFFSET)?;
        for (i, f) in split.folds.iter().enumerate() {
            if !f.is_leak_free() {
                return Err(invalid!("fold {i} leaks test cases into training"));
            }
        }
        let index = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let codecs = vec![HashMap::new(); split.folds.len()];
        Ok(Self {
            cfg,
            cases,
            index,
            split,
            codecs,
        })
    }

    pub fn split(&self) -> &FoldSplit {
        &self.split
    }

    fn pick(&self, ids: &[String]) -> Result<Vec<&Case>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .map(|&i| &self.cases[i])
                    .ok_or_else(|| invalid!("unknown case id {id}"))
            })
            .collect()
    }

    /// Trains (or reuses) the codecs a variant needs on one fold's
    /// development cases; fresh codecs are saved under `dir`.
    pub fn codecs(
        &mut self,
        fold: usize,
        variant: VariantKind,
        dir: &Path,
    ) -> Result<Vec<PriorCodec>> {
        let mut out = Vec::new();
        for h in variant.codec_heads() {
            if !self.codecs[fold].contains_key(&h) {
                let trained = self.train_codec(fold, &h, dir).map_err(|e| e.to_string());
                self.codecs[fold].insert(h.clone(), trained);
            }
            match &self.codecs[fold][&h] {
                Ok(c) => out.push(c.clone()),
                Err(e) => return Err(invalid!("codec {} failed: {e}", codec_name(&h))),
            }
        }
        Ok(out)
    }

    fn train_codec(&self, fold: usize, heads: &[Head], dir: &Path) -> Result<PriorCodec> {
        let samples = self
            .pick(&self.split.folds[fold].development())?
            .iter()
            .map(|c| PriorSample::from_mask(&c.mask))
            .collect::<Result<Vec<_>>>()?;
        let spec = PriorNetSpec {
            heads: heads.to_vec(),
            ..self.cfg.prior.spec.clone()
        };
        let tcfg = PriorTrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.prior.train.clone()
        };
        let (codec, log) = train_prior_on(&samples, &spec, &tcfg)?;
        let cdir = dir.join(format!("codec_{}", codec_name(heads)));
        codec.save(&cdir)?;
        let p = cdir.join("train_log.csv");
        std::fs::write(&p, log.to_csv()).map_err(Error::io(&p))?;
        info!("fold {fold}: trained {} codec", codec_name(heads));
        Ok(codec)
    }

    fn seg_config(&self) -> SegTrainConfig {
        SegTrainConfig {
            seed: self.cfg.seed,
            threshold: self.cfg.threshold,
            ..self.cfg.seg.clone()
        }
    }

    /// Trains one variant on one fold and evaluates it on the fold's test
    /// cases. Returns the per-metric mean over test cases.
    pub fn run_cell(
        &mut self,
        variant: VariantKind,
        weights: LossWeights,
        fold: usize,
        out_dir: &Path,
    ) -> Result<[f64; 6]> {
        let fold_dir = out_dir.join(format!("fold{fold}"));
        let codecs = self.codecs(fold, variant, &fold_dir)?;
        let spec = VariantSpec::new(variant, codecs, weights)?;
        let f = &self.split.folds[fold];
        let (train, val, test) = (
            self.pick(&f.train)?,
            self.pick(&f.val)?,
            self.pick(&f.test)?,
        );
        let (net, log) = train_segmenter(&spec, &train, &val, &self.seg_config())?;
        let run_dir = fold_dir.join(variant.name().replace('+', "_"));
        write_run(&run_dir, &net, &log, &self.cfg.to_toml()?)?;
        let mut rows = Vec::new();
        let mut csv = String::from("case,DSC,Jacc,clDSC,HD,AVD,ASSD\n");
        for c in test {
            let pred = binarize(&net.segment(&c.image)?, self.cfg.threshold)?;
            let m = case_metrics(&pred, &c.mask)?;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                c.id, m[0], m[1], m[2], m[3], m[4], m[5]
            );
            rows.push(m);
        }
        let p = run_dir.join("test_metrics.csv");
        std::fs::write(&p, csv).map_err(Error::io(&p))?;
        info!("{variant} fold {fold} done in {}", run_dir.display());
        Ok(column_means(&rows))
    }

    /// Random λ search for one variant; the objective is the mean best
    /// validation DSC over folds.
    pub fn search(&mut self, variant: VariantKind, out_dir: &Path) -> Result<SearchResult> {
        let mut scfg = self.seg_config();
        if let Some(e) = self.cfg.search.epochs {
            scfg.epochs = e;
        }
        let mut codecs = Vec::new();
        for fi in 0..self.split.folds.len() {
            codecs.push(self.codecs(fi, variant, &out_dir.join(format!("fold{fi}")))?);
        }
        let base = self.cfg.weights_for(variant);
        let (trials, range, seed) = (
            self.cfg.search.trials,
            self.cfg.search.lambda_range,
            self.cfg.seed,
        );
        let this = &*self;
        let result = search_lambda(variant, base, trials, range, seed, |w| {
            let mut total = 0.0;
            for (f, cs) in this.split.folds.iter().zip(&codecs) {
                let spec = VariantSpec::new(variant, cs.clone(), *w)?;
                let (train, val) = (this.pick(&f.train)?, this.pick(&f.val)?);
                let (_, log) = train_segmenter(&spec, &train, &val, &scfg)?;
                total += log.best_val_dsc.unwrap_or(0.0);
            }
            Ok(total / this.split.folds.len() as f64)
        })?;
        std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
        let p = out_dir.join(format!("search_{}.csv", variant.name().replace('+', "_")));
        std::fs::write(&p, result.to_csv()).map_err(Error::io(&p))?;
        Ok(result)
    }
}

/// Runs every (variant, fold) cell and writes the report into `out_dir`.
/// Failed cells are recorded, not propagated.
pub fn run_ablation(cfg: &ExperimentConfig, out_dir: &Path) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let echo = out_dir.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()?).map_err(Error::io(&echo))?;
    let mut exp = Experiment::open(cfg.clone())?;
    let p = out_dir.join("folds.json");
    std::fs::write(&p, serde_json::to_string_pretty(exp.split())?).map_err(Error::io(&p))?;

    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let mut weights = cfg.weights_for(variant);
        if cfg.search.trials > 0 && variant != VariantKind::Baseline {
            match exp.search(variant, out_dir) {
                Ok(r) => weights = r.best,
                Err(e) => error!("λ search for {variant} failed, keeping defaults: {e}"),
            }
        }
        let cells = (0..exp.split().folds.len())
            .map(|fi| match exp.run_cell(variant, weights, fi, out_dir) {
                Ok(metrics) => CellStatus::Ok { metrics },
                Err(e) => {
                    error!("{variant} fold {fi} failed: {e}");
                    CellStatus::Failed {
                        reason: e.to_string(),
                    }
                }
            })
            .collect();
        rows.push(VariantRow {
            variant,
            weights,
            cells,
        });
    }
    let report = AblationReport {
        folds: exp.split().folds.len(),
        rows,
    };
    for (name, text) in [
        ("ablation.csv", report.to_csv()),
        ("ablation.txt", report.to_table()),
        ("ablation.json", serde_json::to_string_pretty(&report)?),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(Error::io(&p))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_metrics_conventions() {
        let fg: Vec<bool> = (0..27).map(|i| i == 13).collect();
        let gt = BinaryMask::from_bools([3; 3], [1.0; 3], &fg).unwrap();
        assert_eq!(
            case_metrics(&gt, &gt).unwrap(),
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
        let empty = BinaryMask::empty([3; 3], [1.0; 3]).unwrap();
        let m = case_metrics(&empty, &gt).unwrap();
        assert_eq!(&m[..3], &[0.0, 0.0, 0.0]);
        assert!(m[3].is_nan() && m[5].is_nan());
        assert_eq!(m[4], 1.0);
    }

    #[test]
    fn report_formats() {
        let ok = |v: f64| CellStatus::Ok {
            metrics: [v, v / 2.0, v, 3.0, 0.1, 1.0],
        };
        let report = AblationReport {
            folds: 2,
            rows: vec![
                VariantRow {
                    variant: VariantKind::Baseline,
                    weights: LossWeights::default(),
                    cells: vec![ok(0.8), ok(0.6)],
                },
                VariantRow {
                    variant: VariantKind::Jmpe,
                    weights: LossWeights::default(),
                    cells: vec![ok(0.8), CellStatus::Failed { reason: "x".into() }],
                },
            ],
        };
        let (m, s) = report.rows[0].summary()[0];
        // sample std of {0.8, 0.6} is 0.1·√2
        assert!((m - 0.7).abs() < 1e-12 && (s - 0.1 * 2f64.sqrt()).abs() < 1e-12);
        assert!(!report.is_complete());
        let table = report.to_table();
        assert!(table.contains("70.00±14.14"));
        assert!(table.contains("FAILED"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3 + 12);
        assert!(csv.contains("jmpe,lambda=65.10,failed"));
    }
}
