use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Positive rational `num/den`, written as `"num/den"` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fraction {
    pub num: u32,
    pub den: u32,
}

impl Fraction {
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 {
            return Err(Error::Config(format!("ratio {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    /// `round(n * num / den)` with exact ties going to the even integer.
    pub fn scale_round_half_even(self, n: usize) -> usize {
        let p = n as u64 * u64::from(self.num);
        let den = u64::from(self.den);
        let (q, r) = (p / den, p % den);
        let up = match (2 * r).cmp(&den) {
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => q % 2 == 1,
        };
        (q + u64::from(up)) as usize
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse ratio {s:?}"));
        match s.split_once('/') {
            Some((n, d)) => Fraction::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Fraction::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) => Fraction::new(n, 1),
            Raw::Text(t) => t.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    #[default]
    Rayleigh,
    Geometric,
}

/// Antenna layout at the base station. `n_tx` must equal the element count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArrayGeometry {
    #[default]
    Ula,
    Upa { rows: usize, cols: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub paths: usize,
    /// Spread of path angles around each user's mean direction, degrees.
    pub angle_spread_deg: f64,
}

impl Default for GeometricParams {
    fn default() -> Self {
        Self {
            paths: 4,
            angle_spread_deg: 10.0,
        }
    }
}

fn unit() -> f64 {
    1.0
}

/// One system configuration: array size, user count, pilot and feedback
/// budgets (as ratios of the antenna count), power and SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    pub n_tx: usize,
    #[serde(default)]
    pub array: ArrayGeometry,
    pub n_users: usize,
    pub pilot_ratio: Fraction,
    pub feedback_ratio: Fraction,
    pub snr_db: f64,
    /// Total transmit power `P` (linear).
    #[serde(default = "unit")]
    pub power: f64,
    /// Per-pilot-symbol energy `E_s` (linear).
    #[serde(default = "unit")]
    pub pilot_symbol_energy: f64,
    #[serde(default)]
    pub channel_model: ChannelModel,
    #[serde(default)]
    pub geometric: GeometricParams,
    #[serde(default)]
    pub seed: u64,
}

impl TaskConfig {
    /// Rayleigh task with unit power and pilot energy.
    pub fn new(
        task_id: impl Into<String>,
        n_tx: usize,
        n_users: usize,
        pilot_ratio: Fraction,
        feedback_ratio: Fraction,
        snr_db: f64,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            n_tx,
            array: ArrayGeometry::Ula,
            n_users,
            pilot_ratio,
            feedback_ratio,
            snr_db,
            power: 1.0,
            pilot_symbol_energy: 1.0,
            channel_model: ChannelModel::Rayleigh,
            geometric: GeometricParams::default(),
            seed: 0,
        }
    }

    pub fn resolve(&self) -> Result<ResolvedTask> {
        resolve_config(self)
    }
}

/// Integer dimensions and noise level derived from a [`TaskConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedTask {
    pub task_id: String,
    pub n_tx: usize,
    pub n_users: usize,
    /// Pilot length `L`.
    pub pilot_len: usize,
    /// Feedback bits per user `B`.
    pub feedback_bits: usize,
    pub power: f64,
    pub pilot_symbol_energy: f64,
    pub noise: NoiseModel,
}

impl ResolvedTask {
    pub fn sigma2(&self) -> f64 {
        self.noise.sigma2
    }

    /// Zero-forcing needs at least as many antennas as users.
    pub fn zf_applicable(&self) -> bool {
        self.n_tx >= self.n_users
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma2: f64,
}

impl NoiseModel {
    pub fn from_snr(snr_db: f64, power: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(Error::Config(format!("power must be positive, got {power}")));
        }
        Ok(Self {
            sigma2: snr_to_sigma2(snr_db, power),
        })
    }
}

/// `sigma^2 = P / 10^(snr_db / 10)`.
pub fn snr_to_sigma2(snr_db: f64, power: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

pub fn resolve_config(raw: &TaskConfig) -> Result<ResolvedTask> {
    let fail = |m: String| Err(Error::Config(format!("task {:?}: {m}", raw.task_id)));
    if raw.n_tx == 0 || raw.n_users == 0 {
        return fail("antenna and user counts must be positive".into());
    }
    if let ArrayGeometry::Upa { rows, cols } = raw.array {
        if rows * cols != raw.n_tx {
            return fail(format!("UPA {rows}x{cols} does not have {} elements", raw.n_tx));
        }
    }
    if !(raw.pilot_symbol_energy > 0.0) {
        return fail("pilot symbol energy must be positive".into());
    }
    for r in [raw.pilot_ratio, raw.feedback_ratio] {
        if r.num == 0 || r.den == 0 {
            return fail(format!("ratio {}/{} must be positive", r.num, r.den));
        }
    }
    let pilot_len = raw.pilot_ratio.scale_round_half_even(raw.n_tx);
    let feedback_bits = raw.feedback_ratio.scale_round_half_even(raw.n_tx);
    if pilot_len == 0 {
        return fail(format!("pilot length rounds to 0 ({} x {})", raw.n_tx, raw.pilot_ratio));
    }
    if feedback_bits == 0 {
        return fail(format!("feedback budget rounds to 0 ({} x {})", raw.n_tx, raw.feedback_ratio));
    }
    if raw.n_tx < raw.n_users {
        log::warn!(
            "task {:?}: {} antennas < {} users, zero-forcing is not applicable",
            raw.task_id,
            raw.n_tx,
            raw.n_users
        );
    }
    Ok(ResolvedTask {
        task_id: raw.task_id.clone(),
        n_tx: raw.n_tx,
        n_users: raw.n_users,
        pilot_len,
        feedback_bits,
        power: raw.power,
        pilot_symbol_energy: raw.pilot_symbol_energy,
        noise: NoiseModel::from_snr(raw.snr_db, raw.power)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frac(s: &str) -> Fraction {
        s.parse().unwrap()
    }

    #[test]
    fn seventy_two_antenna_example() {
        let t = TaskConfig::new("T9", 72, 4, frac("1/4"), frac("2/9"), 10.0);
        let r = resolve_config(&t).unwrap();
        assert_eq!((r.pilot_len, r.feedback_bits), (18, 16));
    }

    #[test]
    fn unit_ratio_and_rounding() {
        let t = TaskConfig::new("a", 8, 2, Fraction::ONE, frac("1/2"), 10.0);
        assert_eq!(resolve_config(&t).unwrap().pilot_len, 8);
        let t = TaskConfig::new("b", 10, 2, frac("1/3"), frac("1/2"), 10.0);
        assert_eq!(resolve_config(&t).unwrap().pilot_len, 3);
    }

    #[test]
    fn exact_halves_round_to_even() {
        assert_eq!(frac("1/4").scale_round_half_even(10), 2); // 2.5
        assert_eq!(frac("1/4").scale_round_half_even(14), 4); // 3.5
        assert_eq!(frac("1/2").scale_round_half_even(5), 2); // 2.5
        assert_eq!(frac("2/3").scale_round_half_even(5), 3); // 3.33
        assert_eq!(frac("5/6").scale_round_half_even(5), 4); // 4.17
    }

    #[test]
    fn zero_budget_is_rejected() {
        let t = TaskConfig::new("z", 4, 2, frac("1/16"), frac("1/2"), 10.0);
        assert!(matches!(resolve_config(&t), Err(Error::Config(_))));
        let t = TaskConfig::new("z", 4, 2, frac("1/2"), frac("1/10"), 10.0);
        assert!(resolve_config(&t).is_err());
    }

    #[test]
    fn invalid_power_and_geometry_rejected() {
        let mut t = TaskConfig::new("p", 4, 2, frac("1/2"), frac("1/2"), 10.0);
        t.power = 0.0;
        assert!(resolve_config(&t).is_err());
        let mut t = TaskConfig::new("u", 6, 2, frac("1/2"), frac("1/2"), 10.0);
        t.array = ArrayGeometry::Upa { rows: 2, cols: 2 };
        assert!(resolve_config(&t).is_err());
        t.array = ArrayGeometry::Upa { rows: 2, cols: 3 };
        assert!(resolve_config(&t).is_ok());
    }

    #[test]
    fn snr_conversion() {
        assert!((snr_to_sigma2(10.0, 1.0) - 0.1).abs() < 1e-15);
        assert_eq!(snr_to_sigma2(0.0, 1.0), 1.0);
        assert!((snr_to_sigma2(20.0, 2.0) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn fraction_parsing_and_serde() {
        assert_eq!(frac("2/9"), Fraction { num: 2, den: 9 });
        assert_eq!(frac("3"), Fraction { num: 3, den: 1 });
        assert!("0/3".parse::<Fraction>().is_err());
        assert!("1/0".parse::<Fraction>().is_err());
        assert!("x".parse::<Fraction>().is_err());
        let json = r#"{"task_id":"t","n_tx":8,"n_users":2,"pilot_ratio":"1/2","feedback_ratio":1,"snr_db":10}"#;
        let t: TaskConfig = serde_json::from_str(json).unwrap();
        assert_eq!(t.feedback_ratio, Fraction::ONE);
        assert_eq!(t.power, 1.0);
        assert_eq!(t.channel_model, ChannelModel::Rayleigh);
        let back: TaskConfig = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn resolve_is_idempotent() {
        let t = TaskConfig::new("i", 72, 4, frac("1/4"), frac("2/9"), 5.0);
        assert_eq!(resolve_config(&t).unwrap(), resolve_config(&t).unwrap());
    }
}
