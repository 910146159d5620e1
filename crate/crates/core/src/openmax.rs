//! Openmax recalibration: per-class mean activation vectors, Weibull models of
//! the largest divergences from them, and a softmax with an extra unknown slot.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{target_index, LogitRecord, Regime};
use crate::decision::{OpenSetDecision, Outcome};
use crate::error::{Error, Result};
use crate::nn::softmax;

/// `d = euclid_weight * |v - mu| + cosine_weight * (1 - cos(v, mu))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceConfig {
    pub euclid_weight: f64,
    pub cosine_weight: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self { euclid_weight: 5e-3, cosine_weight: 1.0 }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.euclid_weight >= 0.0 && self.cosine_weight >= 0.0 && self.euclid_weight + self.cosine_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid divergence weights {self:?}")))
        }
    }
}

pub fn divergence(v: &[f64], mu: &[f64], cfg: &DivergenceConfig) -> Result<f64> {
    cfg.validate()?;
    if v.len() != mu.len() {
        return Err(Error::Shape(format!("vector of length {} vs mean of length {}", v.len(), mu.len())));
    }
    let euclid = v.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut d = cfg.euclid_weight * euclid;
    if cfg.cosine_weight > 0.0 {
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nm = mu.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv == 0.0 || nm == 0.0 {
            return Err(Error::DegenerateVector("cosine term of a zero vector".into()));
        }
        let cos = v.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>() / (nv * nm);
        d += cfg.cosine_weight * (1.0 - cos).max(0.0);
    }
    Ok(d)
}

/// Three-parameter Weibull: `F(x) = 1 - exp(-((x - shift) / scale)^shape)`
/// for `x > shift`, zero below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullFit {
    pub shape: f64,
    pub scale: f64,
    pub shift: f64,
}

/// Shape used for tails without spread: close to a step at `scale`.
pub const DEGENERATE_SHAPE: f64 = 1e3;

impl WeibullFit {
    pub fn cdf(&self, x: f64) -> f64 {
        let y = x - self.shift;
        if y <= 0.0 {
            return 0.0;
        }
        1.0 - (-(y / self.scale).powf(self.shape)).exp()
    }

    /// Log-likelihood of already-shifted positive values under `(shape, scale)`.
    pub fn log_likelihood(shape: f64, scale: f64, shifted: &[f64]) -> f64 {
        shifted
            .iter()
            .map(|&y| {
                let z = y / scale;
                shape.ln() - scale.ln() + (shape - 1.0) * z.ln() - z.powf(shape)
            })
            .sum()
    }

    /// Step-like fallback at `value` for tails with no spread.
    pub fn degenerate(value: f64) -> Self {
        Self { shape: DEGENERATE_SHAPE, scale: value.max(1e-12), shift: 0.0 }
    }
}

/// Profile-likelihood equation in the shape `k` for values scaled into
/// (0, 1]; increasing in `k`, root at the MLE. Returns (g, g').
fn profile(k: f64, y: &[f64], mean_log: f64) -> (f64, f64) {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for &v in y {
        let l = v.ln();
        let p = v.powf(k);
        s0 += p;
        s1 += p * l;
        s2 += p * l * l;
    }
    let g = s1 / s0 - 1.0 / k - mean_log;
    let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
    (g, dg)
}

/// Two-parameter MLE on strictly positive values.
fn weibull_mle(values: &[f64]) -> Result<(f64, f64)> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.len() < 2 || max - min <= max * 1e-12 {
        return Err(Error::DegenerateTail(max));
    }
    let y: Vec<f64> = values.iter().map(|v| v / max).collect();
    let mean_log = y.iter().map(|v| v.ln()).sum::<f64>() / y.len() as f64;

    let (mut lo, mut hi) = (1e-3, 1.0);
    while profile(hi, &y, mean_log).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::DegenerateTail(max));
        }
    }
    if profile(lo, &y, mean_log).0 > 0.0 {
        return Err(Error::DegenerateTail(max));
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (g, dg) = profile(k, &y, mean_log);
        if g.abs() < 1e-13 {
            break;
        }
        if g < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let newton = k - g / dg;
        k = if newton > lo && newton < hi && dg > 0.0 { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    let scale = (y.iter().map(|v| v.powf(k)).sum::<f64>() / y.len() as f64).powf(1.0 / k) * max;
    Ok((k, scale))
}

/// Fits a Weibull to the `tail_size` largest values. When the tail is a strict
/// subset the shift is the tail minimum and the MLE runs on the values above
/// it; a tail covering the whole sample is fitted unshifted.
pub fn fit_weibull_tail(values: &[f64], tail_size: usize) -> Result<WeibullFit> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput("divergences must be finite and nonnegative".into()));
    }
    let size = tail_size.min(values.len());
    if size < 3 {
        return Err(Error::TailTooSmall(size));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tail = &sorted[..size];
    let shift = if size < values.len() { tail[size - 1] } else { 0.0 };
    let shifted: Vec<f64> = tail.iter().map(|v| v - shift).filter(|v| *v > 0.0).collect();
    if shifted.is_empty() {
        return Err(Error::DegenerateTail(tail[0]));
    }
    let (shape, scale) = weibull_mle(&shifted).map_err(|_| Error::DegenerateTail(tail[0]))?;
    Ok(WeibullFit { shape, scale, shift })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenmaxConfig {
    pub tail_size: usize,
    /// Number of top-ranked classes revised; `None` means `min(10, width)`.
    pub alpha: Option<usize>,
    pub divergence: DivergenceConfig,
}

impl Default for OpenmaxConfig {
    fn default() -> Self {
        Self { tail_size: 20, alpha: None, divergence: DivergenceConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEvtModel {
    pub class: usize,
    pub mean: Vec<f64>,
    pub weibull: WeibullFit,
    /// Tail size actually used, after clamping to the correct examples.
    pub tail_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenmaxModel {
    pub regime: Regime,
    pub num_known: usize,
    pub alpha: usize,
    pub divergence: DivergenceConfig,
    pub classes: Vec<ClassEvtModel>,
}

/// Fits one mean vector and Weibull model per output, using only training
/// records the classifier got right.
pub fn fit_openmax(
    records: &[LogitRecord],
    config: &OpenmaxConfig,
    regime: Regime,
    num_known: usize,
) -> Result<OpenmaxModel> {
    config.divergence.validate()?;
    let width = regime.width(num_known);
    if width == 0 {
        return Err(Error::InvalidConfig("no classes to fit".into()));
    }
    let alpha = config.alpha.unwrap_or(width.min(10));
    if alpha == 0 || alpha > width {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside 1..={width}")));
    }
    if config.tail_size == 0 {
        return Err(Error::InvalidConfig("tail size must be positive".into()));
    }
    let mut per_class: Vec<Vec<&[f64]>> = vec![Vec::new(); width];
    for r in records {
        if r.width() != width {
            return Err(Error::Shape(format!("record {} has width {}, expected {width}", r.id, r.width())));
        }
        let truth = target_index(r.truth, regime, num_known)?;
        if r.predicted == truth {
            per_class[truth].push(&r.logits);
        }
    }
    let mut classes = Vec::with_capacity(width);
    for (class, members) in per_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::UnfittableClass(class));
        }
        let mut mean = vec![0.0; width];
        for v in members {
            mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        let divergences =
            members.iter().map(|v| divergence(v, &mean, &config.divergence)).collect::<Result<Vec<_>>>()?;
        let tail_size = config.tail_size.min(members.len());
        if tail_size < config.tail_size {
            log::warn!("class {class}: only {} correct examples, tail clamped to {tail_size}", members.len());
        }
        let weibull = match fit_weibull_tail(&divergences, tail_size) {
            Ok(w) => w,
            Err(Error::TailTooSmall(_)) | Err(Error::DegenerateTail(_)) => {
                let max = divergences.iter().copied().fold(0.0, f64::max);
                log::warn!("class {class}: degenerate divergence tail, using a step at {max}");
                WeibullFit::degenerate(max)
            }
            Err(e) => return Err(e),
        };
        classes.push(ClassEvtModel { class, mean, weibull, tail_size });
    }
    Ok(OpenmaxModel { regime, num_known, alpha, divergence: config.divergence, classes })
}

/// Decision plus the revised probabilities, unknown slot first.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenmaxOutput {
    pub decision: OpenSetDecision,
    pub revised: Vec<f64>,
}

/// Per-class weights `w_c` used to revise the logits.
pub fn revision_weights(logits: &[f64], model: &OpenmaxModel) -> Result<Vec<f64>> {
    if model.classes.is_empty() {
        return Err(Error::NotFitted);
    }
    let width = model.classes.len();
    if logits.len() != width {
        return Err(Error::Shape(format!("record has width {}, model expects {width}", logits.len())));
    }
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut w = vec![1.0; width];
    let alpha = model.alpha as f64;
    for (rank, &c) in order.iter().take(model.alpha).enumerate() {
        let class = &model.classes[c];
        let d = divergence(logits, &class.mean, &model.divergence)?;
        let factor = (alpha - rank as f64) / alpha;
        w[c] = 1.0 - factor * class.weibull.cdf(d);
    }
    Ok(w)
}

pub fn openmax_decide(
    record: &LogitRecord,
    model: &OpenmaxModel,
    uncertainty_eps: Option<f64>,
) -> Result<OpenmaxOutput> {
    let w = revision_weights(&record.logits, model)?;
    let mut revised_logits = Vec::with_capacity(w.len() + 1);
    revised_logits.push(record.logits.iter().zip(&w).map(|(v, w)| v * (1.0 - w)).sum());
    revised_logits.extend(record.logits.iter().zip(&w).map(|(v, w)| v * w));
    let revised = softmax(&revised_logits);
    let top = crate::classifier::argmax(&revised);
    let unknown = top == 0
        || (model.regime == Regime::C2 && top - 1 == model.num_known)
        || uncertainty_eps.is_some_and(|eps| revised[top] < eps);
    let outcome = if unknown { Outcome::Unknown } else { Outcome::Known(top - 1) };
    Ok(OpenmaxOutput { decision: OpenSetDecision { outcome, unknownness: revised[0] }, revised })
}

impl OpenmaxModel {
    /// Line-oriented text: a header of `key value` lines, then one
    /// tab-separated line per class (index, shape, scale, shift, tail size,
    /// mean vector).
    pub fn to_text(&self, fingerprint: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "openmax 1");
        let _ = writeln!(s, "fingerprint {fingerprint:016x}");
        let _ = writeln!(s, "regime {}", self.regime);
        let _ = writeln!(s, "num_known {}", self.num_known);
        let _ = writeln!(s, "alpha {}", self.alpha);
        let _ = writeln!(s, "euclid_weight {:e}", self.divergence.euclid_weight);
        let _ = writeln!(s, "cosine_weight {:e}", self.divergence.cosine_weight);
        for c in &self.classes {
            let _ = write!(
                s,
                "class\t{}\t{:e}\t{:e}\t{:e}\t{}",
                c.class, c.weibull.shape, c.weibull.scale, c.weibull.shift, c.tail_size
            );
            for m in &c.mean {
                let _ = write!(s, "\t{m:e}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses `to_text` output and checks its fingerprint.
    pub fn from_text(text: &str, fingerprint: u64) -> Result<Self> {
        let bad = |msg: &str| Error::CorruptFile(format!("openmax model: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some("openmax 1") {
            return Err(bad("missing header"));
        }
        let mut header = std::collections::HashMap::new();
        let mut classes = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("class\t") {
                let f: Vec<&str> = rest.split('\t').collect();
                if f.len() < 6 {
                    return Err(bad("short class line"));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
                classes.push(ClassEvtModel {
                    class: f[0].parse().map_err(|_| bad("bad class index"))?,
                    weibull: WeibullFit { shape: num(f[1])?, scale: num(f[2])?, shift: num(f[3])? },
                    tail_size: f[4].parse().map_err(|_| bad("bad tail size"))?,
                    mean: f[5..].iter().map(|s| num(s)).collect::<Result<_>>()?,
                });
            } else if let Some((k, v)) = line.split_once(' ') {
                header.insert(k, v);
            }
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let stored = u64::from_str_radix(get("fingerprint")?, 16).map_err(|_| bad("bad fingerprint"))?;
        if stored != fingerprint {
            return Err(Error::PipelineMismatch(format!(
                "openmax model fingerprint {stored:016x} does not match expected {fingerprint:016x}"
            )));
        }
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(k));
        let int = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
        let model = Self {
            regime: get("regime")?.parse()?,
            num_known: int("num_known")?,
            alpha: int("alpha")?,
            divergence: DivergenceConfig { euclid_weight: num("euclid_weight")?, cosine_weight: num("cosine_weight")? },
            classes,
        };
        let width = model.regime.width(model.num_known);
        if model.classes.len() != width
            || model.classes.iter().enumerate().any(|(i, c)| c.class != i || c.mean.len() != width)
        {
            return Err(bad("class table does not match the regime"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        std::fs::write(path, self.to_text(fingerprint))?;
        Ok(())
    }

    pub fn load(path: &Path, fingerprint: u64) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, fingerprint)
    }
}
