//! Error metrics, anomaly counts, power-law fitting and feature export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::finetune::{ParamRatio, WindowPrediction};

pub const MAPE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BpMetrics {
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
    pub count: usize,
}

pub fn bp_metrics(y: &[f64], y_hat: &[f64]) -> BpMetrics {
    assert_eq!(y.len(), y_hat.len(), "bp_metrics needs equal lengths");
    BpAccumulator::default().extend(y.iter().copied().zip(y_hat.iter().copied())).finish()
}

/// Streaming sums behind [`bp_metrics`], so predictions can be scored
/// without collecting them.
#[derive(Debug, Clone, Copy, Default)]
pub struct BpAccumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
}

impl BpAccumulator {
    pub fn push(&mut self, y: f64, y_hat: f64) {
        let e = (y - y_hat).abs();
        self.abs += e;
        self.sq += e * e;
        self.pct += e / y.abs().max(MAPE_FLOOR);
        self.n += 1;
    }

    pub fn extend(mut self, pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        for (y, h) in pairs {
            self.push(y, h);
        }
        self
    }

    pub fn finish(self) -> BpMetrics {
        if self.n == 0 {
            return BpMetrics::default();
        }
        let n = self.n as f64;
        BpMetrics {
            mae: self.abs / n,
            mse: self.sq / n,
            mape: self.pct / n,
            count: self.n,
        }
    }
}

/// Per-timestep confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl AdCounts {
    pub fn push(&mut self, label: u8, score: f64, threshold: f64) {
        match (score >= threshold, label != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(self, o: AdCounts) -> AdCounts {
        AdCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when there are no positives.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `None` unless both precision and recall exist and their sum is positive.
    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn ad_metrics(labels: &[u8], scores: &[f64], threshold: f64) -> AdCounts {
    assert_eq!(labels.len(), scores.len(), "ad_metrics needs equal lengths");
    let mut c = AdCounts::default();
    for (&l, &s) in labels.iter().zip(scores) {
        c.push(l, s, threshold);
    }
    c
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "None".to_string(), |x| format!("{x:.6}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetBp {
    pub fleet_id: String,
    pub bp: BpMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub fleets: Vec<FleetBp>,
    pub ad: AdCounts,
    pub threshold: f64,
    pub config_hash: String,
    pub seed: u64,
    pub ratio: Option<ParamRatio>,
}

impl EvalReport {
    /// Score predictions: BP on normal timesteps only (faulty timesteps have
    /// no normal-condition target), AD on every timestep.
    pub fn from_predictions(
        preds: &[WindowPrediction],
        threshold: f64,
        config_hash: impl Into<String>,
        seed: u64,
        ratio: Option<ParamRatio>,
    ) -> Self {
        let mut fleets: Vec<(String, BpAccumulator)> = Vec::new();
        let mut ad = AdCounts::default();
        for p in preds {
            let idx = match fleets.iter().position(|(f, _)| *f == p.fleet_id) {
                Some(i) => i,
                None => {
                    fleets.push((p.fleet_id.clone(), BpAccumulator::default()));
                    fleets.len() - 1
                }
            };
            let acc = &mut fleets[idx].1;
            for (row, target) in p.bp.iter().zip(&p.bp_target) {
                for ((&y_hat, &y), &l) in row.iter().zip(target).zip(&p.labels) {
                    if l == 0 {
                        acc.push(y, y_hat);
                    }
                }
            }
            for (&l, &s) in p.labels.iter().zip(&p.ad_scores) {
                ad.push(l, s, threshold);
            }
        }
        EvalReport {
            fleets: fleets
                .into_iter()
                .map(|(fleet_id, acc)| FleetBp { fleet_id, bp: acc.finish() })
                .collect(),
            ad,
            threshold,
            config_hash: config_hash.into(),
            seed,
            ratio,
        }
    }

    /// Flat `key=value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "ad.counting=per_timestep");
        let _ = writeln!(s, "ad.threshold={}", self.threshold);
        let c = &self.ad;
        let _ = writeln!(s, "ad.tp={}\nad.fp={}\nad.tn={}\nad.fn={}", c.tp, c.fp, c.tn, c.fn_);
        let _ = writeln!(s, "ad.precision={}", fmt_opt(c.precision()));
        let _ = writeln!(s, "ad.recall={}", fmt_opt(c.recall()));
        let _ = writeln!(s, "ad.f1={}", fmt_opt(c.f1()));
        for f in &self.fleets {
            let k = &f.fleet_id;
            let _ = writeln!(s, "bp.{k}.mae={:.6}", f.bp.mae);
            let _ = writeln!(s, "bp.{k}.mse={:.6}", f.bp.mse);
            let _ = writeln!(s, "bp.{k}.mape={:.6}", f.bp.mape);
            let _ = writeln!(s, "bp.{k}.count={}", f.bp.count);
        }
        if let Some(r) = self.ratio {
            let _ = writeln!(s, "params.trainable={}\nparams.total={}", r.trainable, r.total);
            let _ = writeln!(s, "params.ratio={:.6}", r.ratio());
        }
        s
    }

    pub fn counts_csv(&self) -> String {
        let c = &self.ad;
        format!(
            "threshold,tp,fp,tn,fn,precision,recall,f1\n{},{},{},{},{},{},{},{}\n",
            self.threshold,
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            fmt_opt(c.precision()),
            fmt_opt(c.recall()),
            fmt_opt(c.f1())
        )
    }

    /// Write `<stem>.txt` and `<stem>.counts.csv`.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("counts.csv");
        fs::write(&csv, self.counts_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Fit of `L(N) = (N_c / N)^alpha_N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    /// `None` when `alpha_N` is zero and the scale is unidentifiable.
    pub n_c: Option<f64>,
    pub alpha_n: f64,
    pub r2: f64,
}

impl PowerLaw {
    pub fn predict(&self, n: f64) -> Option<f64> {
        Some((self.n_c? / n).powf(self.alpha_n))
    }
}

/// Least squares on `log L = alpha·log N_c − alpha·log N`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLaw> {
    if points.len() < 3 {
        return Err(Error::Data(format!("power-law fit needs at least 3 points, got {}", points.len())));
    }
    if let Some(&(n, l)) = points.iter().find(|&&(n, l)| !(n > 0.0 && l > 0.0 && n.is_finite() && l.is_finite())) {
        return Err(Error::Data(format!("power-law points must be positive and finite, got ({n}, {l})")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("power-law fit needs at least two distinct parameter counts".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 { 1.0 } else { 0.0 }
    } else {
        1.0 - ss_res / ss_tot
    };
    let alpha_n = -slope;
    let n_c = (alpha_n != 0.0).then(|| (intercept / alpha_n).exp());
    Ok(PowerLaw { n_c, alpha_n, r2 })
}

/// One exported feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub fleet_id: String,
    pub anomalous: bool,
    pub features: Vec<f64>,
}

pub fn features_csv(rows: &[FeatureRow]) -> String {
    let d = rows.first().map_or(0, |r| r.features.len());
    let mut s = String::from("fleet_id,anomalous");
    for j in 0..d {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.fleet_id, u8::from(r.anomalous));
        for v in &r.features {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bp_hand_example() {
        let m = bp_metrics(&[2.0, 2.0], &[1.0, 3.0]);
        assert_eq!((m.mae, m.mse, m.mape), (1.0, 1.0, 0.5));
        let z = bp_metrics(&[1.0, -4.0], &[1.0, -4.0]);
        assert_eq!((z.mae, z.mse, z.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ad_hand_example() {
        let c = ad_metrics(&[0, 1, 1, 0], &[0.1, 0.9, 0.2, 0.8], 0.5);
        assert_eq!(c, AdCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!((c.precision(), c.recall(), c.f1()), (Some(0.5), Some(0.5), Some(0.5)));
    }

    #[test]
    fn undefined_cases() {
        let c = ad_metrics(&[1, 1, 0], &[0.1, 0.2, 0.3], 0.5);
        assert_eq!(c.recall(), Some(0.0));
        assert_eq!(c.precision(), None);
        assert_eq!(c.f1(), None);
        let perfect = ad_metrics(&[1, 0], &[1.0, 0.0], 0.5);
        assert_eq!(perfect.f1(), Some(1.0));
    }

    #[test]
    fn power_law_exact_and_errors() {
        let pts: Vec<(f64, f64)> = [1e3f64, 1e4, 1e5, 3e5].iter().map(|&n| (n, (1e6 / n).powf(0.1))).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.n_c.unwrap() / 1e6 - 1.0).abs() < 1e-6);
        assert!((fit.alpha_n - 0.1).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-9);
        assert!(fit_power_law(&pts[..2]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, -1.0), (3.0, 1.0)]).is_err());
        let flat = fit_power_law(&[(10.0, 0.3), (100.0, 0.3), (1000.0, 0.3)]).unwrap();
        assert_eq!(flat.alpha_n, 0.0);
        assert_eq!(flat.n_c, None);
    }

    #[test]
    fn features_csv_shape() {
        let rows = vec![
            FeatureRow { fleet_id: "a".into(), anomalous: true, features: vec![1.0, 2.0] },
            FeatureRow { fleet_id: "b".into(), anomalous: false, features: vec![0.5, -1.0] },
        ];
        let s = features_csv(&rows);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "fleet_id,anomalous,f0,f1");
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
    }

    proptest! {
        #[test]
        fn threshold_monotone(labels in prop::collection::vec(0u8..2, 1..60), seed in any::<u64>(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let scores: Vec<f64> = (0..labels.len()).map(|i| ((seed.wrapping_mul(i as u64 + 1) >> 11) as f64) / (1u64 << 53) as f64).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = ad_metrics(&labels, &scores, lo);
            let b = ad_metrics(&labels, &scores, hi);
            prop_assert!(b.tp <= a.tp && b.fp <= a.fp);
            prop_assert_eq!(a.tp + a.fp + a.tn + a.fn_, labels.len());
        }

        #[test]
        fn bp_permutation_invariant(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40), rot in 0usize..40) {
            let (y, h): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let k = rot % y.len();
            let (mut y2, mut h2) = (y.clone(), h.clone());
            y2.rotate_left(k);
            h2.rotate_left(k);
            let (a, b) = (bp_metrics(&y, &h), bp_metrics(&y2, &h2));
            prop_assert!((a.mae - b.mae).abs() <= 1e-9 * (1.0 + a.mae));
            prop_assert!((a.mse - b.mse).abs() <= 1e-9 * (1.0 + a.mse));
            prop_assert!((a.mape - b.mape).abs() <= 1e-9 * (1.0 + a.mape));
        }

        #[test]
        fn power_law_recovers_parameters(log_nc in 3.0f64..8.0, alpha in 0.02f64..1.0) {
            let n_c = 10f64.powf(log_nc);
            let pts: Vec<(f64, f64)> = [2e3f64, 2e4, 1e5, 5e5].iter().map(|&n| (n, (n_c / n).powf(alpha))).collect();
            let fit = fit_power_law(&pts).unwrap();
            prop_assert!((fit.alpha_n - alpha).abs() < 1e-9);
            prop_assert!((fit.n_c.unwrap() / n_c - 1.0).abs() < 1e-6);
            prop_assert!((fit.r2 - 1.0).abs() < 1e-9);
        }
    }
}
