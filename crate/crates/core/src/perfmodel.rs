//! Analytical throughput, power and energy model for pipelined (prefill)
//! and fall-through (generate) execution across chips.

use serde::{Deserialize, Serialize};

/// Inter-chip slowdown fit: `TPS(n) = TPS(1) * (1 + overhead * min(n-1, n0) / n0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingFit {
    pub overhead: f64,
    pub n0: u32,
}

/// Per-chip timing and power inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipProfile {
    pub name: String,
    /// Seconds per time step in pipelined mode.
    pub t_tps_pipelined: f64,
    /// Average seconds per time step in fall-through mode.
    pub t_tps_fallthrough: f64,
    /// Static power per chip, watts.
    pub static_power_w: f64,
    /// Dynamic power per chip, watts.
    pub dynamic_power_w: f64,
    pub n_steps_per_block: u32,
    pub n_blocks: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tokens_per_s: f64,
    pub power_w: f64,
    /// Seconds per token.
    pub time_s: f64,
    pub energy_mj_per_token: f64,
}

impl Metrics {
    fn new(time_s: f64, power_w: f64) -> Self {
        Metrics { tokens_per_s: 1.0 / time_s, power_w, time_s, energy_mj_per_token: power_w * time_s * 1e3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub chips: u32,
    /// Time per step relative to one chip.
    pub tps_factor: f64,
    pub tokens_per_s: f64,
    pub power_w: f64,
    pub energy_mj_per_token: f64,
}

impl ChipProfile {
    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("t_tps_pipelined", self.t_tps_pipelined),
            ("t_tps_fallthrough", self.t_tps_fallthrough),
            ("static_power_w", self.static_power_w),
            ("dynamic_power_w", self.dynamic_power_w),
        ];
        if let Some((n, v)) = pos.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(format!("{n} must be positive, got {v}"));
        }
        if self.n_steps_per_block == 0 || self.n_blocks == 0 {
            return Err("n_steps_per_block and n_blocks must be positive".into());
        }
        if let Some(s) = self.scaling {
            if s.n0 == 0 || !(s.overhead.is_finite() && s.overhead >= 0.0) {
                return Err("scaling fit needs n0 > 0 and overhead >= 0".into());
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let p: ChipProfile = serde_json::from_str(s).map_err(|e| e.to_string())?;
        p.validate()?;
        Ok(p)
    }

    /// Latency for one token through every block in fall-through mode.
    pub fn t_ttft(&self) -> f64 {
        self.n_blocks as f64 * self.n_steps_per_block as f64 * self.t_tps_fallthrough
    }
}

/// One token enters per pipelined step; every chip draws full power.
pub fn prefill_metrics(p: &ChipProfile) -> Metrics {
    Metrics::new(p.t_tps_pipelined, p.n_blocks as f64 * (p.static_power_w + p.dynamic_power_w))
}

/// One chip is active at a time; the rest draw static power only.
pub fn generate_metrics(p: &ChipProfile) -> Metrics {
    Metrics::new(p.t_ttft(), p.dynamic_power_w + p.n_blocks as f64 * p.static_power_w)
}

/// Prefill throughput and energy across `1..=max_chips` chips.
pub fn scaling_curve(p: &ChipProfile, max_chips: u32) -> Vec<ScalingRow> {
    let fit = p.scaling.unwrap_or(ScalingFit { overhead: 0.0, n0: 1 });
    (1..=max_chips)
        .map(|n| {
            let factor = 1.0 + fit.overhead * (n - 1).min(fit.n0) as f64 / fit.n0 as f64;
            let time = p.t_tps_pipelined * factor;
            let power = n as f64 * (p.static_power_w + p.dynamic_power_w);
            ScalingRow {
                chips: n,
                tps_factor: factor,
                tokens_per_s: 1.0 / time,
                power_w: power,
                energy_mj_per_token: power * time * 1e3,
            }
        })
        .collect()
}

/// Round to `sig` significant figures.
pub fn round_sig(x: f64, sig: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let f = 10f64.powi(sig - 1 - mag);
    (x * f).round() / f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> ChipProfile {
        ChipProfile {
            name: "t".into(),
            t_tps_pipelined: 1.0 / 6632.0,
            t_tps_fallthrough: 1e-4,
            static_power_w: 0.5,
            dynamic_power_w: 0.5,
            n_steps_per_block: 9,
            n_blocks: 24,
            scaling: Some(ScalingFit { overhead: 1.1, n0: 4 }),
            notes: None,
        }
    }

    #[test]
    fn prefill_throughput_is_step_rate() {
        let m = prefill_metrics(&profile());
        assert!((m.tokens_per_s - 6632.0).abs() < 1e-9);
        assert_eq!(m.power_w, 24.0);
    }

    #[test]
    fn doubling_step_time() {
        let p = profile();
        let mut q = p.clone();
        q.t_tps_pipelined *= 2.0;
        let (a, b) = (prefill_metrics(&p), prefill_metrics(&q));
        assert!((a.tokens_per_s / b.tokens_per_s - 2.0).abs() < 1e-12);
        assert!((b.energy_mj_per_token / a.energy_mj_per_token - 2.0).abs() < 1e-12);
    }

    #[test]
    fn generate_power_composition() {
        let m = generate_metrics(&profile());
        assert_eq!(m.power_w, 0.5 + 24.0 * 0.5);
        assert!((m.time_s - 24.0 * 9.0 * 1e-4).abs() < 1e-15);
    }

    #[test]
    fn scaling_curve_shape() {
        let rows = scaling_curve(&profile(), 24);
        assert_eq!(rows[0].tps_factor, 1.0);
        assert!(rows.windows(2).all(|w| w[1].tps_factor >= w[0].tps_factor));
        assert!(rows[4..].iter().all(|r| r.tps_factor == rows[4].tps_factor));
    }

    #[test]
    fn profile_validation() {
        let mut p = profile();
        assert!(p.validate().is_ok());
        p.static_power_w = 0.0;
        assert!(p.validate().is_err());
        let json = serde_json::to_string(&profile()).unwrap();
        assert_eq!(ChipProfile::from_json(&json).unwrap(), profile());
        assert!(ChipProfile::from_json(&json.replace("\"name\"", "\"nome\"")).is_err());
    }

    #[test]
    fn sig_figs() {
        assert_eq!(round_sig(41.4999, 3), 41.5);
        assert_eq!(round_sig(13965.2, 3), 14000.0);
        assert_eq!(round_sig(0.0037004, 2), 0.0037);
    }
}
