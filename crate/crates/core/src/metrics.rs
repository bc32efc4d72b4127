//! Evaluation protocol: SROCC, PLCC after a monotone 4-parameter logistic
//! mapping, and dataset-size weighted averages.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Predictions paired with subjective scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePairs {
    preds: Vec<f64>,
    gts: Vec<f64>,
}

impl ScorePairs {
    pub fn new(preds: Vec<f64>, gts: Vec<f64>) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::shape(
                "score_pairs",
                format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
            ));
        }
        if preds.iter().chain(&gts).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score pairs contain NaN or infinity".into()));
        }
        Ok(Self { preds, gts })
    }

    pub fn preds(&self) -> &[f64] {
        &self.preds
    }

    pub fn gts(&self) -> &[f64] {
        &self.gts
    }

    pub fn n(&self) -> usize {
        self.preds.len()
    }
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid(format!(
            "pearson needs two equal-length vectors of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation (Pearson correlation of average ranks).
pub fn srocc(pairs: &ScorePairs) -> Result<f64> {
    if pairs.n() < 3 {
        return Err(Error::Invalid(format!("srocc needs n >= 3, got {}", pairs.n())));
    }
    pearson(&average_ranks(&pairs.preds), &average_ranks(&pairs.gts))
}

/// `f(x) = (β1 - β2) / (1 + exp(-(x - β3)/|β4|)) + β2`, with `β1 >= β2` so the
/// map is non-decreasing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticParams {
    pub beta: [f64; 4],
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticParams {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.beta;
        (b1 - b2) * sigmoid((x - b3) / b4.abs()) + b2
    }

    pub fn eval_all(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.eval(v)).collect()
    }

    fn sse(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(&a, &b)| (self.eval(a) - b).powi(2)).sum()
    }

    fn admissible(&self) -> bool {
        self.beta.iter().all(|v| v.is_finite()) && self.beta[0] >= self.beta[1] && self.beta[3] != 0.0
    }
}

pub const LOGISTIC_MAX_ITER: usize = 200;
pub const LOGISTIC_TOL: f64 = 1e-10;

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `None` when singular.
fn solve_dense<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let piv = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Damped Gauss–Newton (Levenberg–Marquardt) from `start`. Steps that would
/// make the map decreasing are rejected. Returns the best parameters seen.
fn levenberg_marquardt(x: &[f64], y: &[f64], start: LogisticParams) -> (LogisticParams, f64) {
    let mut p = start;
    let mut sse = p.sse(x, y);
    let mut damping = 1e-3;
    for _ in 0..LOGISTIC_MAX_ITER {
        if sse == 0.0 {
            break;
        }
        let [b1, b2, b3, b4] = p.beta;
        let s4 = b4.abs();
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&xi, &yi) in x.iter().zip(y) {
            let z = (xi - b3) / s4;
            let sg = sigmoid(z);
            let ds = sg * (1.0 - sg);
            let j = [
                sg,
                1.0 - sg,
                -(b1 - b2) * ds / s4,
                -(b1 - b2) * ds * z / s4 * b4.signum(),
            ];
            let r = (b1 - b2) * sg + b2 - yi;
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for c in 0..4 {
                    jtj[a][c] += j[a] * j[c];
                }
            }
        }
        let mut improved = false;
        while damping < 1e16 {
            let mut a = jtj;
            for (k, row) in a.iter_mut().enumerate() {
                row[k] += damping * jtj[k][k].max(1e-12);
            }
            let rhs = jtr.map(|v| -v);
            let Some(step) = solve_dense(a, rhs) else {
                damping *= 10.0;
                continue;
            };
            let cand = LogisticParams {
                beta: std::array::from_fn(|k| p.beta[k] + step[k]),
            };
            let cand_sse = if cand.admissible() { cand.sse(x, y) } else { f64::INFINITY };
            if cand_sse < sse {
                let rel = (sse - cand_sse) / sse;
                p = cand;
                sse = cand_sse;
                damping = (damping / 10.0).max(1e-12);
                improved = true;
                if rel < LOGISTIC_TOL {
                    return (p, sse);
                }
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (p, sse)
}

/// Optimal `β1, β2` for fixed `β3, β4`: ordinary least squares of `y` on the
/// sigmoid. Keeps `p` when the refit would make the map decreasing.
fn refit_amplitude(x: &[f64], y: &[f64], p: LogisticParams) -> LogisticParams {
    let s: Vec<f64> = x
        .iter()
        .map(|&v| sigmoid((v - p.beta[2]) / p.beta[3].abs()))
        .collect();
    let (ms, my) = (mean(&s), mean(y));
    let sss: f64 = s.iter().map(|v| (v - ms) * (v - ms)).sum();
    if sss <= 0.0 {
        return p;
    }
    let slope = s.iter().zip(y).map(|(a, b)| (a - ms) * (b - my)).sum::<f64>() / sss;
    if slope < 0.0 {
        return p;
    }
    let b2 = my - slope * ms;
    let cand = LogisticParams {
        beta: [b2 + slope, b2, p.beta[2], p.beta[3]],
    };
    if cand.admissible() && cand.sse(x, y) <= p.sse(x, y) {
        cand
    } else {
        p
    }
}

/// Least-squares fit of the monotone logistic from predictions to ground truth.
///
/// Two deterministic starts are refined: the data-driven start
/// (`β1 = max gt`, `β2 = min gt`, `β3 = median pred`, `β4 = std pred / 4`) and
/// a near-linear member of the family (`β4 = 1e6·std pred`). When the best
/// increasing affine map beats every sigmoid, the result trails it by about
/// 1e-11 in correlation: wider starts lose more to cancellation in `β1 - β2`.
pub fn fit_logistic(pairs: &ScorePairs) -> Result<LogisticParams> {
    let (x, y) = (pairs.preds(), pairs.gts());
    if pairs.n() < 5 {
        return Err(Error::Invalid(format!("logistic fit needs n >= 5, got {}", pairs.n())));
    }
    let sx = std_dev(x);
    if sx == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "logistic fit: predictions are constant".into(),
        ));
    }
    if std_dev(y) == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "logistic fit: ground truths are constant".into(),
        ));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let ymax = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().copied().fold(f64::INFINITY, f64::min);
    let data_start = LogisticParams {
        beta: [ymax, ymin, median, sx / 4.0],
    };
    let mut best = levenberg_marquardt(x, y, data_start);

    // near-linear member: slope a around the mean, β4 = 1e6·std
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let a = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / sxx;
    if a > 0.0 {
        let wide = 1e6 * sx;
        let b2 = my - 2.0 * a * wide;
        let linear_start = LogisticParams {
            beta: [b2 + 4.0 * a * wide, b2, mx, wide],
        };
        let cand = levenberg_marquardt(x, y, linear_start);
        if cand.1 < best.1 {
            best = cand;
        }
    }
    Ok(refit_amplitude(x, y, best.0))
}

/// Pearson correlation between the mapped predictions and ground truth.
/// A map that is flat over the predictions leaves no linear association: 0.
pub fn plcc_with(pairs: &ScorePairs, params: &LogisticParams) -> Result<f64> {
    let mapped = params.eval_all(pairs.preds());
    match pearson(&mapped, pairs.gts()) {
        Err(Error::UndefinedCorrelation(_)) if std_dev(pairs.gts()) > 0.0 => Ok(0.0),
        other => other,
    }
}

pub fn plcc(pairs: &ScorePairs) -> Result<f64> {
    let params = fit_logistic(pairs)?;
    plcc_with(pairs, &params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub srocc: f64,
    pub plcc: f64,
    pub logistic: LogisticParams,
    pub n: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "dataset,n,srocc,plcc,beta1,beta2,beta3,beta4";

    pub fn csv_row(&self, dataset: &str) -> String {
        let b = self.logistic.beta;
        format!(
            "{dataset},{},{},{},{},{},{},{}",
            self.n, self.srocc, self.plcc, b[0], b[1], b[2], b[3]
        )
    }

    /// Flat `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.n);
        let _ = writeln!(s, "srocc={}", self.srocc);
        let _ = writeln!(s, "plcc={}", self.plcc);
        for (i, b) in self.logistic.beta.iter().enumerate() {
            let _ = writeln!(s, "beta{}={b}", i + 1);
        }
        s
    }
}

pub fn evaluate(pairs: &ScorePairs) -> Result<MetricReport> {
    let logistic = fit_logistic(pairs)?;
    Ok(MetricReport {
        srocc: srocc(pairs)?,
        plcc: plcc_with(pairs, &logistic)?,
        logistic,
        n: pairs.n(),
    })
}

/// `Σ v_i w_i / Σ w_i`.
pub fn weighted_average(values: &[f64], sizes: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("weighted average of nothing".into()));
    }
    if values.len() != sizes.len() {
        return Err(Error::shape(
            "weighted_average",
            format!("{} values vs {} sizes", values.len(), sizes.len()),
        ));
    }
    if sizes.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Invalid("dataset sizes must be positive".into()));
    }
    let total: f64 = sizes.iter().sum();
    Ok(values.iter().zip(sizes).map(|(v, w)| v * w).sum::<f64>() / total)
}
