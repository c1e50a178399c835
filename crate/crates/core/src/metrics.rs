//! Rate and distortion bookkeeping: bits per pixel, PSNR, Bjøntegaard delta rate,
//! base-utilization ratio and the RD CSV format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn bpp_of(total_bits: f64, height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(Error::Contract(format!("image area {height}×{width} is zero")));
    }
    Ok(total_bits / (height * width) as f64)
}

/// PSNR in dB of a signal in [0, 1] with the given RMSE.
pub fn psnr(rmse: f64) -> f64 {
    20.0 * (1.0 / rmse).log10()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CurveMode {
    Base,
    Conditional,
    Residual,
    Standalone,
    LowerBaseline,
}

impl CurveMode {
    pub fn name(self) -> &'static str {
        match self {
            CurveMode::Base => "base",
            CurveMode::Conditional => "conditional",
            CurveMode::Residual => "residual",
            CurveMode::Standalone => "standalone",
            CurveMode::LowerBaseline => "lower-baseline",
        }
    }
}

impl FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => CurveMode::Base,
            "conditional" => CurveMode::Conditional,
            "residual" => CurveMode::Residual,
            "standalone" => CurveMode::Standalone,
            "lower-baseline" => CurveMode::LowerBaseline,
            other => return Err(Error::Format(format!("unknown curve mode `{other}`"))),
        })
    }
}

impl From<crate::pipelines::Mode> for CurveMode {
    fn from(m: crate::pipelines::Mode) -> Self {
        match m {
            crate::pipelines::Mode::Conditional => CurveMode::Conditional,
            crate::pipelines::Mode::Residual => CurveMode::Residual,
            crate::pipelines::Mode::Standalone => CurveMode::Standalone,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub mode: CurveMode,
    pub lambda: f64,
    pub bpp: f64,
    pub rmse: f64,
    pub psnr: f64,
}

impl RdPoint {
    pub fn new(mode: CurveMode, lambda: f64, bpp: f64, rmse: f64) -> Self {
        RdPoint {
            mode,
            lambda,
            bpp,
            rmse,
            psnr: psnr(rmse),
        }
    }
}

/// Points of one curve ordered by strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.psnr.is_finite()) {
            return Err(Error::Eval("curve points need positive rate and finite PSNR".into()));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::Eval("curve rates must be distinct".into()));
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    /// `(rate, psnr)` pairs.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.bpp, p.psnr)).collect()
    }
}

/// Least-squares cubic `log10(rate) ≈ c0 + c1·u + c2·u² + c3·u³` with `u = (psnr − shift) / scale`.
#[derive(Clone, Copy, Debug)]
struct CubicFit {
    coef: [f64; 4],
    shift: f64,
    scale: f64,
}

impl CubicFit {
    fn fit(points: &[(f64, f64)]) -> Result<Self> {
        let n = points.len() as f64;
        let shift = points.iter().map(|p| p.1).sum::<f64>() / n;
        let scale = points.iter().map(|p| (p.1 - shift).abs()).fold(0.0, f64::max).max(1e-12);
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for &(rate, q) in points {
            let u = (q - shift) / scale;
            let basis = [1.0, u, u * u, u * u * u];
            let v = rate.log10();
            for i in 0..4 {
                atb[i] += basis[i] * v;
                for j in 0..4 {
                    ata[i][j] += basis[i] * basis[j];
                }
            }
        }
        let coef = solve4(ata, atb).ok_or_else(|| Error::Eval("degenerate curve: PSNR values do not support a cubic fit".into()))?;
        Ok(CubicFit { coef, shift, scale })
    }

    /// `∫ log10(rate) d(psnr)` from `lo` to `hi`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |q: f64| {
            let u = (q - self.shift) / self.scale;
            let c = &self.coef;
            self.scale * (c[0] * u + c[1] * u * u / 2.0 + c[2] * u.powi(3) / 3.0 + c[3] * u.powi(4) / 4.0)
        };
        anti(hi) - anti(lo)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Bjøntegaard delta rate (percent) of `test` against `reference`, both given as
/// `(rate, psnr)` pairs. Negative means `test` needs less rate for the same PSNR.
pub fn bd_rate(reference: &[(f64, f64)], test: &[(f64, f64)]) -> Result<f64> {
    if reference.len() < 4 || test.len() < 4 {
        return Err(Error::Contract(format!(
            "BD-rate needs at least 4 points per curve, got {} and {}",
            reference.len(),
            test.len()
        )));
    }
    if reference.iter().chain(test).any(|&(r, q)| !(r > 0.0) || !q.is_finite()) {
        return Err(Error::Eval("rates must be positive and PSNR finite".into()));
    }
    let range = |c: &[(f64, f64)]| {
        c.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)))
    };
    let (rlo, rhi) = range(reference);
    let (tlo, thi) = range(test);
    let (lo, hi) = (rlo.max(tlo), rhi.min(thi));
    if !(hi > lo) {
        return Err(Error::Eval(format!(
            "PSNR ranges [{rlo:.3}, {rhi:.3}] and [{tlo:.3}, {thi:.3}] do not overlap"
        )));
    }
    let fr = CubicFit::fit(reference)?;
    let ft = CubicFit::fit(test)?;
    let avg = (ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Share of the base layer's rate an enhancement method reuses, as the ratio of its
/// BD-rate against the lower baseline to the upper baseline's.
pub fn utilization(bd_vs_lower: f64, bd_upper_vs_lower: f64) -> Result<f64> {
    if !(bd_upper_vs_lower < 0.0) {
        return Err(Error::Contract(format!(
            "upper-baseline BD-rate {bd_upper_vs_lower} must be negative"
        )));
    }
    Ok(bd_vs_lower / bd_upper_vs_lower * 100.0)
}

/// Standalone points shifted by the base layer's rate.
pub fn lower_baseline(standalone: &[RdPoint], base_bpp: f64) -> Vec<RdPoint> {
    standalone
        .iter()
        .map(|p| RdPoint {
            mode: CurveMode::LowerBaseline,
            bpp: p.bpp + base_bpp,
            ..*p
        })
        .collect()
}

pub const CSV_HEADER: &str = "mode,lambda,bpp,rmse,psnr";

pub fn write_rd_csv(points: &[RdPoint]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{}", p.mode.name(), p.lambda, p.bpp, p.rmse, p.psnr);
    }
    s
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == CSV_HEADER => {}
        other => return Err(Error::Format(format!("expected header `{CSV_HEADER}`, found {other:?}"))),
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("row {}: expected 5 fields, found {}", i + 2, fields.len())));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: `{}` is not a number", i + 2, fields[j])))
        };
        points.push(RdPoint {
            mode: fields[0].parse()?,
            lambda: num(1)?,
            bpp: num(2)?,
            rmse: num(3)?,
            psnr: num(4)?,
        });
    }
    Ok(points)
}

/// Points of one mode, as a curve.
pub fn curve_of(points: &[RdPoint], mode: CurveMode) -> Result<RdCurve> {
    RdCurve::new(points.iter().filter(|p| p.mode == mode).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        (0..8).map(|i| 30.0 + i as f64 * 1.5).map(|q| (10f64.powf(f(q)), q)).collect()
    }

    #[test]
    fn bpp_examples() {
        assert_eq!(bpp_of(589_824.0, 768, 768).unwrap(), 1.0);
        assert_eq!(bpp_of(0.0, 4, 4).unwrap(), 0.0);
        assert!(bpp_of(1.0, 0, 3).is_err());
        let (b, e) = (bpp_of(1000.0, 10, 10).unwrap(), bpp_of(500.0, 10, 10).unwrap());
        assert_eq!(bpp_of(1500.0, 10, 10).unwrap(), b + e);
    }

    #[test]
    fn identity_and_doubling() {
        let r = curve(|q| -2.0 + 0.08 * q + 0.001 * (q - 33.0).powi(2));
        assert!(bd_rate(&r, &r).unwrap().abs() < 1e-12);
        let t: Vec<_> = r.iter().map(|&(rate, q)| (2.0 * rate, q)).collect();
        assert!((bd_rate(&r, &t).unwrap() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn exact_cubic_matches_trapezoid() {
        let fr = |q: f64| -3.0 + 0.1 * q - 0.002 * (q - 35.0).powi(2) + 1e-4 * (q - 35.0).powi(3);
        let ft = |q: f64| -3.2 + 0.1 * q - 0.001 * (q - 35.0).powi(2);
        let (r, t) = (curve(fr), curve(ft));
        let (lo, hi) = (30.0, 40.5);
        let n = 10_000;
        let h = (hi - lo) / n as f64;
        let trap: f64 = (0..=n)
            .map(|i| {
                let q = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (ft(q) - fr(q))
            })
            .sum::<f64>()
            * h;
        let oracle = (10f64.powf(trap / (hi - lo)) - 1.0) * 100.0;
        assert!((bd_rate(&r, &t).unwrap() - oracle).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        let r = curve(|q| 0.05 * q);
        assert!(matches!(bd_rate(&r[..3], &r), Err(Error::Contract(_))));
        let far: Vec<_> = r.iter().map(|&(rate, q)| (rate, q + 100.0)).collect();
        assert!(matches!(bd_rate(&r, &far), Err(Error::Eval(_))));
    }

    #[test]
    fn utilization_cases() {
        assert!((utilization(-16.56, -38.5).unwrap() - 43.01).abs() < 0.05);
        assert_eq!(utilization(-20.0, -20.0).unwrap(), 100.0);
        assert_eq!(utilization(0.0, -20.0).unwrap(), 0.0);
        assert!(utilization(-1.0, 0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let pts = vec![
            RdPoint::new(CurveMode::Conditional, 0.01, 0.731_234_5, 0.052_1),
            RdPoint::new(CurveMode::LowerBaseline, 1e-3, 1.25, 0.1 / 3.0),
        ];
        let text = write_rd_csv(&pts);
        assert!(text.starts_with("mode,lambda,bpp,rmse,psnr\n"));
        assert!(!text.contains('\r'));
        let back = parse_rd_csv(&text).unwrap();
        assert_eq!(back, pts);
        assert_eq!(write_rd_csv(&back), text);
        assert!(parse_rd_csv("bad\n").is_err());
        assert!(parse_rd_csv("mode,lambda,bpp,rmse,psnr\nbase,1,2\n").is_err());
    }

    #[test]
    fn lower_baseline_adds_base_rate() {
        let s = vec![RdPoint::new(CurveMode::Standalone, 0.1, 0.5, 0.05)];
        let l = lower_baseline(&s, 0.125);
        assert_eq!(l[0].bpp, 0.625);
        assert_eq!(l[0].mode, CurveMode::LowerBaseline);
        assert_eq!(l[0].psnr, s[0].psnr);
    }
}
