//! TOML run configuration and run manifests.
//!
//! Every physical quantity carries its unit in the key name. Unknown keys are
//! rejected. Rates of `inf` select independent reflections or noise.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{Axis, SearchSpec};
use crate::geometry::{StationLayout, TargetState};
use crate::montecarlo::ExperimentPlan;
use crate::scalar::{lit, Real};
use crate::signal_model::{Decay, NoiseCorrelation, ReflectionCorrelation, Scenario};
use crate::waveform::GmskParams;

/// Station placement: either a ring (`ring_*`, `num_tx`, `num_rx`) or
/// explicit coordinate lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_center_x_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_center_y_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_radius_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_tx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_rx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_x_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_y_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rx_x_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rx_y_m: Option<Vec<f64>>,
    /// Transmit energy per transmitter; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_energy_j: Option<Vec<f64>>,
    pub path_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub x_m: f64,
    pub y_m: f64,
    pub vx_mps: f64,
    pub vy_mps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformSection {
    pub bit_duration_s: f64,
    pub bt_product: f64,
    pub num_bits: usize,
    pub freq_offset_hz: f64,
    pub carrier_hz: f64,
    pub oversampling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionSection {
    pub decay_per_rad: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub decay_per_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScnrSection {
    /// Operating point for single-point commands.
    pub point_db: f64,
    /// Grid for sweeps.
    pub sweep_db: Vec<f64>,
}

/// Variable swept by the `sweep` command on top of the SCNR grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Scnr,
    FreqOffset,
    Reflection,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub sweep: SweepKind,
    pub trials: usize,
    pub bit_draws: usize,
    pub mismatch_variance: f64,
    pub mismatch_samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub freq_offsets_hz: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reflection_decays_per_rad: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise_decays_per_m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub center_x_m: f64,
    pub center_y_m: f64,
    pub half_width_m: f64,
    pub center_vx_mps: f64,
    pub center_vy_mps: f64,
    pub half_width_mps: f64,
    pub grid_x: usize,
    pub grid_y: usize,
    pub grid_vx: usize,
    pub grid_vy: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub simplex_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub stations: StationsSection,
    pub target: TargetSection,
    pub waveform: WaveformSection,
    pub reflection: ReflectionSection,
    pub noise: NoiseSection,
    pub scnr: ScnrSection,
    pub experiment: ExperimentSection,
    pub search: SearchSection,
    pub seeds: SeedsSection,
}

fn config_error(message: impl Into<String>) -> Error {
    Error::Config {
        message: message.into(),
        line: None,
    }
}

fn required<V: Clone>(v: &Option<V>, key: &str) -> Result<V> {
    v.clone().ok_or_else(|| config_error(format!("missing key `stations.{key}`")))
}

fn point_list(xs: &[f64], ys: &[f64], what: &str) -> Result<Vec<Point2<f64>>> {
    if xs.len() != ys.len() {
        return Err(config_error(format!("{what} x and y lists differ in length")));
    }
    Ok(xs.iter().zip(ys).map(|(&x, &y)| Point2::new(x, y)).collect())
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Config {
                message: e.message().trim().to_string(),
                line,
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Hex SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn layout<T: Real>(&self) -> Result<StationLayout<T>> {
        let s = &self.stations;
        let explicit = s.tx_x_m.is_some() || s.tx_y_m.is_some() || s.rx_x_m.is_some() || s.rx_y_m.is_some();
        let cast = |v: Vec<Point2<f64>>| v.into_iter().map(|p| Point2::new(lit::<T>(p.x), lit::<T>(p.y))).collect();
        if explicit {
            let tx = point_list(&required(&s.tx_x_m, "tx_x_m")?, &required(&s.tx_y_m, "tx_y_m")?, "transmitter")?;
            let rx = point_list(&required(&s.rx_x_m, "rx_x_m")?, &required(&s.rx_y_m, "rx_y_m")?, "receiver")?;
            StationLayout::new(cast(tx), cast(rx))
        } else {
            StationLayout::ring(
                Point2::new(
                    lit(required(&s.ring_center_x_m, "ring_center_x_m")?),
                    lit(required(&s.ring_center_y_m, "ring_center_y_m")?),
                ),
                lit(required(&s.ring_radius_m, "ring_radius_m")?),
                required(&s.num_tx, "num_tx")?,
                required(&s.num_rx, "num_rx")?,
            )
        }
    }

    /// Scenario at `scnr.point_db`.
    pub fn scenario<T: Real>(&self) -> Result<Scenario<T>> {
        let layout = self.layout::<T>()?;
        let m = layout.num_tx();
        let p = layout.num_paths();
        let energies = match &self.stations.tx_energy_j {
            Some(e) => e.iter().map(|&v| lit(v)).collect(),
            None => vec![T::one(); m],
        };
        let w = &self.waveform;
        let t = &self.target;
        let sc = Scenario {
            layout,
            truth: TargetState::new(lit(t.x_m), lit(t.y_m), lit(t.vx_mps), lit(t.vy_mps)),
            gmsk: GmskParams {
                bit_duration: lit(w.bit_duration_s),
                bt_product: lit(w.bt_product),
                num_bits: w.num_bits,
                freq_offset: lit(w.freq_offset_hz),
                carrier: lit(w.carrier_hz),
                oversampling: w.oversampling,
            },
            energies,
            path_gain: lit(self.stations.path_gain),
            reflection: ReflectionCorrelation::uniform(
                Decay::from_rate(lit(self.reflection.decay_per_rad)),
                lit(self.reflection.variance),
                p,
            ),
            noise: NoiseCorrelation {
                decay: Decay::from_rate(lit(self.noise.decay_per_m)),
            },
            scnr_db: lit(self.scnr.point_db),
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn search<T: Real>(&self) -> SearchSpec<T> {
        let s = &self.search;
        let axis = |c: f64, h: f64, n: usize| Axis::new(lit(c - h), lit(c + h), n);
        SearchSpec {
            x: axis(s.center_x_m, s.half_width_m, s.grid_x),
            y: axis(s.center_y_m, s.half_width_m, s.grid_y),
            vx: axis(s.center_vx_mps, s.half_width_mps, s.grid_vx),
            vy: axis(s.center_vy_mps, s.half_width_mps, s.grid_vy),
            max_iterations: s.max_iterations,
            simplex_scale: lit(s.simplex_scale),
            tolerance: lit(s.tolerance),
        }
    }

    pub fn plan<T: Real>(&self) -> Result<ExperimentPlan<T>> {
        let e = &self.experiment;
        let plan = ExperimentPlan {
            scenario: self.scenario()?,
            scnr_db: self.scnr.sweep_db.iter().map(|&v| lit(v)).collect(),
            trials: e.trials,
            bit_draws: e.bit_draws,
            seed: self.seeds.seed,
            search: self.search(),
            mismatch_variance: lit(e.mismatch_variance),
            mismatch_samples: e.mismatch_samples,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn reflection_decays<T: Real>(&self) -> Vec<Decay<T>> {
        self.experiment.reflection_decays_per_rad.iter().map(|&r| Decay::from_rate(lit(r))).collect()
    }

    pub fn noise_decays<T: Real>(&self) -> Vec<Decay<T>> {
        self.experiment.noise_decays_per_m.iter().map(|&r| Decay::from_rate(lit(r))).collect()
    }
}

/// Everything needed to rerun a command bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub outputs: Vec<String>,
    /// Effective configuration in canonical TOML form.
    pub config: String,
}

impl Manifest {
    pub fn new(command: &str, config: &ConfigDocument, outputs: Vec<String>) -> Self {
        Manifest {
            command: command.to_string(),
            seed: config.seeds.seed,
            config_sha256: config.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            config: config.to_toml(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

/// Reference scenario: two transmitters and three receivers on a 7 km ring.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

/// Reduced scenario used by the validation suite.
pub const SMALL_CONFIG: &str = include_str!("../configs/small.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses_and_round_trips() {
        let doc = ConfigDocument::parse(DEFAULT_CONFIG).unwrap();
        let again = ConfigDocument::parse(&doc.to_toml()).unwrap();
        assert_eq!(doc, again);
        assert_eq!(doc.hash(), again.hash());
        let sc = doc.scenario::<f64>().unwrap();
        assert_eq!(sc.layout.num_tx(), 2);
        assert_eq!(sc.layout.num_rx(), 3);
        assert_eq!(sc.reflection.decay, Decay::Independent);
        assert!(doc.plan::<f64>().is_ok());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = DEFAULT_CONFIG.replace("x_m = 15150.0", "x_m = 15150.0\nspeed_kmh = 3.0");
        match ConfigDocument::parse(&text) {
            Err(Error::Config { message, line }) => {
                assert!(message.contains("speed_kmh"), "{message}");
                let expected = text.lines().position(|l| l.starts_with("speed_kmh")).unwrap() + 1;
                assert_eq!(line, Some(expected));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = DEFAULT_CONFIG
            .lines()
            .filter(|l| !l.starts_with("carrier_hz"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = ConfigDocument::parse(&text).unwrap_err();
        assert!(err.to_string().contains("carrier_hz"), "{err}");
    }

    #[test]
    fn explicit_layout_needs_all_lists() {
        let mut doc = ConfigDocument::parse(DEFAULT_CONFIG).unwrap();
        doc.stations.tx_x_m = Some(vec![0.0]);
        let err = doc.layout::<f64>().unwrap_err();
        assert!(err.to_string().contains("tx_y_m"), "{err}");
        doc.stations.tx_y_m = Some(vec![0.0]);
        doc.stations.rx_x_m = Some(vec![1000.0]);
        doc.stations.rx_y_m = Some(vec![0.0]);
        assert_eq!(doc.layout::<f64>().unwrap().num_paths(), 1);
    }

    #[test]
    fn manifest_has_no_clock_and_is_stable() {
        let doc = ConfigDocument::parse(DEFAULT_CONFIG).unwrap();
        let a = Manifest::new("crb", &doc, vec!["crb.csv".into()]).to_json();
        let b = Manifest::new("crb", &doc, vec!["crb.csv".into()]).to_json();
        assert_eq!(a, b);
        let back: Manifest = serde_json::from_str(&a).unwrap();
        assert_eq!(ConfigDocument::parse(&back.config).unwrap(), doc);
        assert_eq!(back.config_sha256.len(), 64);
    }
}
