//! Demand generation: time-sliced O-D matrix ingestion and seeded Poisson
//! arrival processes per (period, O-D pair, fleet class).
//!
//! Each (period, pair, class) combination draws from its own RNG stream
//! derived from the master seed with a splitmix64 hash of the stream key, so
//! changing one class ratio never perturbs the draws of the other class and
//! sweeps stay seed-paired.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NodeId;
use crate::VehicleId;

#[derive(Debug, Error, PartialEq)]
pub enum DemandError {
    #[error("malformed O-D row {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("negative flow {flow} for pair {origin}->{destination}")]
    NegativeFlow {
        origin: NodeId,
        destination: NodeId,
        flow: f64,
    },
    #[error("wrong direction: destination {destination} <= origin {origin} (eastbound only)")]
    WrongDirection { origin: NodeId, destination: NodeId },
    #[error("periods must be contiguous and non-overlapping: [{prev_end}, ..) followed by [{start}, ..)")]
    NonContiguousPeriods { prev_end: f64, start: f64 },
    #[error("period end {end} not after start {start}")]
    EmptyPeriod { start: f64, end: f64 },
}

/// Fleet class of a vehicle. Background vehicles are physically simulated
/// but invisible to the coordination layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Cav,
    Background,
}

impl VehicleClass {
    fn stream_tag(self) -> u64 {
        match self {
            VehicleClass::Cav => 0xCA,
            VehicleClass::Background => 0xB6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub start: f64,
    pub end: f64,
}

/// Time-sliced O-D matrix: hourly flows per (period, origin, destination).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ODMatrix {
    periods: Vec<Period>,
    /// (period index, origin, destination) -> veh/hr; only nonzero cells.
    flows: Vec<(usize, NodeId, NodeId, f64)>,
}

/// Fractions of the base O-D demand realized per class. The two ratios scale
/// the same base demand independently; they do not need to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetMix {
    pub cav_ratio: f64,
    pub background_ratio: f64,
}

impl FleetMix {
    pub fn validate(&self) -> Result<(), String> {
        for (name, r) in [("cav_ratio", self.cav_ratio), ("background_ratio", self.background_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("{name} must be in [0, 1], got {r}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: f64,
    pub origin: NodeId,
    pub destination: NodeId,
    pub class: VehicleClass,
    pub id: VehicleId,
}

/// Time-ordered arrival schedule with dense unique vehicle ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSchedule {
    pub arrivals: Vec<Arrival>,
}

impl ODMatrix {
    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn flows(&self) -> &[(usize, NodeId, NodeId, f64)] {
        &self.flows
    }

    pub fn flow(&self, period: usize, origin: NodeId, destination: NodeId) -> f64 {
        self.flows
            .iter()
            .find(|(p, o, d, _)| *p == period && *o == origin && *d == destination)
            .map(|(_, _, _, f)| *f)
            .unwrap_or(0.0)
    }

    /// Total veh/hr entering during one period.
    pub fn period_total(&self, period: usize) -> f64 {
        self.flows
            .iter()
            .filter(|(p, _, _, _)| *p == period)
            .map(|(_, _, _, f)| f)
            .sum()
    }

    /// Returns a copy with every flow multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ODMatrix {
        ODMatrix {
            periods: self.periods.clone(),
            flows: self
                .flows
                .iter()
                .map(|&(p, o, d, f)| (p, o, d, f * factor))
                .collect(),
        }
    }

    /// Every (origin, destination) pair appearing in any period.
    pub fn od_pairs(&self) -> Vec<(NodeId, NodeId)> {
        let mut pairs: Vec<(NodeId, NodeId)> =
            self.flows.iter().map(|&(_, o, d, _)| (o, d)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

/// Parses the O-D CSV format: header
/// `period_start_s,period_end_s,origin,destination,flow_vph`, one row per
/// nonzero cell. Periods are inferred from the rows and must tile the
/// horizon contiguously.
pub fn load_od_matrix(text: &str) -> Result<ODMatrix, DemandError> {
    let mut periods: Vec<Period> = Vec::new();
    let mut flows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.starts_with("period_start_s") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(DemandError::MalformedRow {
                line: lineno + 1,
                detail: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, DemandError> {
            s.parse::<f64>().map_err(|e| DemandError::MalformedRow {
                line: lineno + 1,
                detail: format!("{what}: {e}"),
            })
        };
        let parse_n = |s: &str, what: &str| -> Result<NodeId, DemandError> {
            s.parse::<NodeId>().map_err(|e| DemandError::MalformedRow {
                line: lineno + 1,
                detail: format!("{what}: {e}"),
            })
        };
        let start = parse_f(fields[0], "period_start_s")?;
        let end = parse_f(fields[1], "period_end_s")?;
        let origin = parse_n(fields[2], "origin")?;
        let destination = parse_n(fields[3], "destination")?;
        let flow = parse_f(fields[4], "flow_vph")?;
        if end <= start {
            return Err(DemandError::EmptyPeriod { start, end });
        }
        if flow < 0.0 {
            return Err(DemandError::NegativeFlow {
                origin,
                destination,
                flow,
            });
        }
        if destination <= origin {
            return Err(DemandError::WrongDirection {
                origin,
                destination,
            });
        }
        let period = Period { start, end };
        let idx = match periods.iter().position(|p| p == &period) {
            Some(i) => i,
            None => {
                periods.push(period);
                periods.len() - 1
            }
        };
        flows.push((idx, origin, destination, flow));
    }
    // Validate the period tiling in chronological order.
    let mut order: Vec<usize> = (0..periods.len()).collect();
    order.sort_by(|&a, &b| periods[a].start.total_cmp(&periods[b].start));
    for w in order.windows(2) {
        let prev = periods[w[0]];
        let next = periods[w[1]];
        if (next.start - prev.end).abs() > 1e-9 {
            return Err(DemandError::NonContiguousPeriods {
                prev_end: prev.end,
                start: next.start,
            });
        }
    }
    Ok(ODMatrix { periods, flows })
}

/// splitmix64 finalizer; used to derive independent stream seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(master: u64, period: usize, origin: NodeId, destination: NodeId, class: VehicleClass) -> u64 {
    let key = mix64(period as u64 + 1)
        ^ mix64(((origin as u64) << 32) | destination as u64)
        ^ mix64(class.stream_tag());
    mix64(master ^ key)
}

/// Generates Poisson arrivals for the whole horizon. For each (period, pair,
/// class) the arrival process has rate `flow * class_ratio` restricted to
/// the period. The result is a pure function of `(od, mix, seed)`.
pub fn generate_arrivals(od: &ODMatrix, mix: &FleetMix, seed: u64) -> ArrivalSchedule {
    let mut raw: Vec<(f64, NodeId, NodeId, VehicleClass, u64)> = Vec::new();
    for &(p, origin, destination, flow) in od.flows() {
        let period = od.periods()[p];
        for (class, ratio) in [
            (VehicleClass::Cav, mix.cav_ratio),
            (VehicleClass::Background, mix.background_ratio),
        ] {
            let rate = flow * ratio / 3600.0; // veh per second
            if rate <= 0.0 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, p, origin, destination, class));
            let mut t = period.start;
            let mut k = 0u64;
            loop {
                let u: f64 = rng.gen();
                t += -(1.0 - u).ln() / rate;
                if t >= period.end {
                    break;
                }
                raw.push((t, origin, destination, class, k));
                k += 1;
            }
        }
    }
    raw.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
            .then(a.4.cmp(&b.4))
    });
    let arrivals = raw
        .into_iter()
        .enumerate()
        .map(|(i, (time, origin, destination, class, _))| Arrival {
            time,
            origin,
            destination,
            class,
            id: VehicleId(i as u64),
        })
        .collect();
    ArrivalSchedule { arrivals }
}

impl ArrivalSchedule {
    /// Builds a schedule from an explicit arrival list (scripted scenarios).
    /// Entries are sorted by time; ids are assigned in that order.
    pub fn from_list(mut entries: Vec<(f64, NodeId, NodeId, VehicleClass)>) -> ArrivalSchedule {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        ArrivalSchedule {
            arrivals: entries
                .into_iter()
                .enumerate()
                .map(|(i, (time, origin, destination, class))| Arrival {
                    time,
                    origin,
                    destination,
                    class,
                    id: VehicleId(i as u64),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "period_start_s,period_end_s,origin,destination,flow_vph\n";

    #[test]
    fn load_reads_flows() {
        let od = load_od_matrix(&format!("{HEADER}0,3600,1,2,3040\n0,3600,1,7,1180\n")).unwrap();
        assert_eq!(od.flow(0, 1, 2), 3040.0);
        assert_eq!(od.flow(0, 1, 7), 1180.0);
        assert_eq!(od.period_total(0), 4220.0);
    }

    #[test]
    fn load_rejects_wrong_direction() {
        let err = load_od_matrix(&format!("{HEADER}0,3600,3,2,100\n")).unwrap_err();
        assert!(matches!(err, DemandError::WrongDirection { origin: 3, destination: 2 }));
    }

    #[test]
    fn load_rejects_negative_flow_and_bad_rows() {
        assert!(matches!(
            load_od_matrix(&format!("{HEADER}0,3600,1,2,-5\n")),
            Err(DemandError::NegativeFlow { .. })
        ));
        assert!(matches!(
            load_od_matrix(&format!("{HEADER}0,3600,1,2\n")),
            Err(DemandError::MalformedRow { .. })
        ));
        assert!(matches!(
            load_od_matrix(&format!("{HEADER}0,3600,1,2,abc\n")),
            Err(DemandError::MalformedRow { .. })
        ));
    }

    #[test]
    fn load_rejects_period_gaps() {
        let err = load_od_matrix(&format!("{HEADER}0,3600,1,2,100\n4000,7600,1,2,100\n")).unwrap_err();
        assert!(matches!(err, DemandError::NonContiguousPeriods { .. }));
    }

    #[test]
    fn zero_ratios_yield_empty_schedule() {
        let od = load_od_matrix(&format!("{HEADER}0,3600,1,2,3040\n")).unwrap();
        let mix = FleetMix { cav_ratio: 0.0, background_ratio: 0.0 };
        assert!(generate_arrivals(&od, &mix, 42).arrivals.is_empty());
    }

    #[test]
    fn schedule_is_deterministic_in_inputs() {
        let od = load_od_matrix(&format!("{HEADER}0,3600,1,2,500\n0,3600,2,7,300\n")).unwrap();
        let mix = FleetMix { cav_ratio: 0.3, background_ratio: 0.5 };
        let a = generate_arrivals(&od, &mix, 9);
        let b = generate_arrivals(&od, &mix, 9);
        assert_eq!(a, b);
        let c = generate_arrivals(&od, &mix, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn changing_one_ratio_leaves_other_class_draws_alone() {
        let od = load_od_matrix(&format!("{HEADER}0,3600,1,2,800\n")).unwrap();
        let a = generate_arrivals(&od, &FleetMix { cav_ratio: 0.2, background_ratio: 0.4 }, 7);
        let b = generate_arrivals(&od, &FleetMix { cav_ratio: 0.2, background_ratio: 0.9 }, 7);
        let cav_times = |s: &ArrivalSchedule| {
            s.arrivals
                .iter()
                .filter(|a| a.class == VehicleClass::Cav)
                .map(|a| a.time)
                .collect::<Vec<_>>()
        };
        assert_eq!(cav_times(&a), cav_times(&b));
    }

    #[test]
    fn poisson_mean_matches_rate() {
        // flow 3600 veh/hr at ratio 0.1 over 3600 s: expected count 360 per
        // seed. The mean over 200 seeds has standard error sqrt(360/200).
        let od = load_od_matrix(&format!("{HEADER}0,3600,1,2,3600\n")).unwrap();
        let mix = FleetMix { cav_ratio: 0.1, background_ratio: 0.0 };
        let n = 200;
        let counts: Vec<f64> = (0..n)
            .map(|s| generate_arrivals(&od, &mix, s as u64).arrivals.len() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let se = (360.0_f64 / n as f64).sqrt();
        assert!(
            (mean - 360.0).abs() < 3.0 * se,
            "empirical mean {mean} outside 3 standard errors of 360"
        );
        // Poisson variance equals the mean; allow 3 standard errors of the
        // sample variance estimate (~ var * sqrt(2/(n-1))).
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let var_se = 360.0 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (var - 360.0).abs() < 3.0 * var_se,
            "empirical variance {var} inconsistent with Poisson"
        );
    }

    #[test]
    fn arrivals_sorted_within_periods_with_unique_ids() {
        let od = load_od_matrix(&format!(
            "{HEADER}0,3600,1,2,400\n3600,7200,1,2,700\n0,3600,2,7,250\n3600,7200,2,7,50\n"
        ))
        .unwrap();
        let mix = FleetMix { cav_ratio: 0.5, background_ratio: 0.2 };
        let sched = generate_arrivals(&od, &mix, 3);
        assert!(!sched.arrivals.is_empty());
        for w in sched.arrivals.windows(2) {
            assert!(w[0].time <= w[1].time);
            assert!(w[0].id < w[1].id);
        }
        for a in &sched.arrivals {
            assert!((0.0..7200.0).contains(&a.time));
        }
    }
}
