//! Corridor topology: a single eastbound mainline with a cascade of
//! junctions, each optionally carrying an on-ramp and an off-ramp.
//!
//! Geometry is one-dimensional. The mainline runs from position 0 to
//! `mainline_length`; each on-ramp is its own short link of length
//! `ramp_length` whose coordinate 0 is the ramp start and whose end merges
//! into the mainline at the junction position. Detectors sit `d1` before the
//! junction on both branches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node identifier as used by O-D matrices and routes.
pub type NodeId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("corridor must contain at least one junction")]
    NoJunctions,
    #[error("junction positions must be strictly increasing (junction {junction} at {position} m)")]
    NonMonotonePositions { junction: NodeId, position: f64 },
    #[error("junction {junction}: detector offset d1 must be positive (got {d1} m)")]
    InvalidD1 { junction: NodeId, d1: f64 },
    #[error("junction {junction}: coordination zone of {d1} m crosses the previous junction")]
    OverlappingZones { junction: NodeId, d1: f64 },
    #[error("junction {junction}: on-ramp of {ramp_length} m is shorter than d1 = {d1} m")]
    RampTooShort {
        junction: NodeId,
        ramp_length: f64,
        d1: f64,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node {node} has no {missing} for this route")]
    MissingRamp { node: NodeId, missing: &'static str },
    #[error("route {origin}->{destination} does not pass through junction {junction}")]
    RouteNotThroughJunction {
        origin: NodeId,
        destination: NodeId,
        junction: NodeId,
    },
    #[error("junction {junction} has no {branch:?} branch")]
    NoSuchBranch { junction: NodeId, branch: Branch },
    #[error("junction {junction}: threshold must be >= 0 (got {threshold})")]
    NegativeThreshold { junction: NodeId, threshold: f64 },
    #[error("last junction at {junction_pos} m lies beyond the corridor end at {mainline_length} m")]
    JunctionBeyondEnd {
        junction_pos: f64,
        mainline_length: f64,
    },
}

/// Which approach branch of a junction a detector or vehicle is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Mainline,
    OnRamp,
}

/// One junction of the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub id: NodeId,
    /// Meters from the corridor origin.
    pub position: f64,
    pub has_on_ramp: bool,
    pub has_off_ramp: bool,
    /// Length of the on-ramp link, ignored when there is no on-ramp.
    pub ramp_length: f64,
    /// Coordination radius: detectors sit this far before the junction.
    pub d1: f64,
    /// Platooning headway threshold in seconds for this junction.
    pub threshold_r: f64,
}

/// Serializable corridor description; `build_corridor` validates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorSpec {
    pub mainline_length_m: f64,
    pub origin_node: NodeId,
    pub end_node: NodeId,
    #[serde(rename = "junction")]
    pub junctions: Vec<JunctionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionSpec {
    pub id: NodeId,
    pub position_m: f64,
    #[serde(default)]
    pub on_ramp: bool,
    #[serde(default)]
    pub off_ramp: bool,
    #[serde(default)]
    pub ramp_length_m: f64,
    pub d1_m: f64,
    pub threshold_s: f64,
}

/// Validated, immutable corridor. Safe to share read-only across parallel
/// simulation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    junctions: Vec<Junction>,
    mainline_length: f64,
    origin_node: NodeId,
    end_node: NodeId,
}

/// A fixed O-D route on the corridor, expressed in mainline coordinates.
///
/// On-ramp origins enter the mainline at their junction position; the ramp
/// approach itself is handled by the engine's per-link state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub origin: NodeId,
    pub destination: NodeId,
    pub entry_position: f64,
    pub exit_position: f64,
}

/// Validates a corridor description and returns the corridor.
pub fn build_corridor(spec: &CorridorSpec) -> Result<Corridor, NetworkError> {
    if spec.junctions.is_empty() {
        return Err(NetworkError::NoJunctions);
    }
    let mut seen = vec![spec.origin_node, spec.end_node];
    if spec.origin_node == spec.end_node {
        return Err(NetworkError::DuplicateNode(spec.end_node));
    }
    let mut prev_pos = 0.0_f64;
    let mut junctions = Vec::with_capacity(spec.junctions.len());
    for (i, j) in spec.junctions.iter().enumerate() {
        if seen.contains(&j.id) {
            return Err(NetworkError::DuplicateNode(j.id));
        }
        seen.push(j.id);
        if j.position_m <= prev_pos {
            return Err(NetworkError::NonMonotonePositions {
                junction: j.id,
                position: j.position_m,
            });
        }
        if j.d1_m <= 0.0 {
            return Err(NetworkError::InvalidD1 {
                junction: j.id,
                d1: j.d1_m,
            });
        }
        // The detector must not fall upstream of the previous junction (or of
        // the corridor origin for the first junction): coordination zones may
        // touch but never overlap.
        let det = j.position_m - j.d1_m;
        let floor = if i == 0 { 0.0 } else { prev_pos };
        if det < floor {
            return Err(NetworkError::OverlappingZones {
                junction: j.id,
                d1: j.d1_m,
            });
        }
        if j.on_ramp && j.ramp_length_m < j.d1_m {
            return Err(NetworkError::RampTooShort {
                junction: j.id,
                ramp_length: j.ramp_length_m,
                d1: j.d1_m,
            });
        }
        if j.threshold_s < 0.0 {
            return Err(NetworkError::NegativeThreshold {
                junction: j.id,
                threshold: j.threshold_s,
            });
        }
        junctions.push(Junction {
            id: j.id,
            position: j.position_m,
            has_on_ramp: j.on_ramp,
            has_off_ramp: j.off_ramp,
            ramp_length: j.ramp_length_m,
            d1: j.d1_m,
            threshold_r: j.threshold_s,
        });
        prev_pos = j.position_m;
    }
    if spec.mainline_length_m <= prev_pos {
        return Err(NetworkError::JunctionBeyondEnd {
            junction_pos: prev_pos,
            mainline_length: spec.mainline_length_m,
        });
    }
    Ok(Corridor {
        junctions,
        mainline_length: spec.mainline_length_m,
        origin_node: spec.origin_node,
        end_node: spec.end_node,
    })
}

impl Corridor {
    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn mainline_length(&self) -> f64 {
        self.mainline_length
    }

    pub fn origin_node(&self) -> NodeId {
        self.origin_node
    }

    pub fn end_node(&self) -> NodeId {
        self.end_node
    }

    pub fn junction_index(&self, id: NodeId) -> Option<usize> {
        self.junctions.iter().position(|j| j.id == id)
    }

    pub fn junction_by_id(&self, id: NodeId) -> Option<&Junction> {
        self.junctions.iter().find(|j| j.id == id)
    }

    /// Reconstructs the serializable spec; `build_corridor(&c.to_spec())`
    /// round-trips to an identical corridor.
    pub fn to_spec(&self) -> CorridorSpec {
        CorridorSpec {
            mainline_length_m: self.mainline_length,
            origin_node: self.origin_node,
            end_node: self.end_node,
            junctions: self
                .junctions
                .iter()
                .map(|j| JunctionSpec {
                    id: j.id,
                    position_m: j.position,
                    on_ramp: j.has_on_ramp,
                    off_ramp: j.has_off_ramp,
                    ramp_length_m: j.ramp_length,
                    d1_m: j.d1,
                    threshold_s: j.threshold_r,
                })
                .collect(),
        }
    }

    /// Builds the route for an O-D pair, checking that the referenced nodes
    /// exist and carry the required ramps.
    pub fn route(&self, origin: NodeId, destination: NodeId) -> Result<Route, NetworkError> {
        let entry_position = if origin == self.origin_node {
            0.0
        } else {
            let j = self
                .junction_by_id(origin)
                .ok_or(NetworkError::UnknownNode(origin))?;
            if !j.has_on_ramp {
                return Err(NetworkError::MissingRamp {
                    node: origin,
                    missing: "on-ramp",
                });
            }
            j.position
        };
        let exit_position = if destination == self.end_node {
            self.mainline_length
        } else {
            let j = self
                .junction_by_id(destination)
                .ok_or(NetworkError::UnknownNode(destination))?;
            if !j.has_off_ramp {
                return Err(NetworkError::MissingRamp {
                    node: destination,
                    missing: "off-ramp",
                });
            }
            j.position
        };
        if entry_position >= exit_position {
            return Err(NetworkError::RouteNotThroughJunction {
                origin,
                destination,
                junction: destination,
            });
        }
        Ok(Route {
            origin,
            destination,
            entry_position,
            exit_position,
        })
    }
}

impl Route {
    /// A route passes through a junction when it enters at or before it and
    /// exits at or after it.
    pub fn passes_through(&self, junction: &Junction) -> bool {
        self.entry_position <= junction.position && junction.position <= self.exit_position
    }
}

/// Distance from the junction to the route exit (or corridor end): the
/// cruising distance over which a platoon formed at this junction keeps
/// saving fuel.
pub fn cruising_distance(
    corridor: &Corridor,
    junction: &Junction,
    route: &Route,
) -> Result<f64, NetworkError> {
    if !route.passes_through(junction) {
        return Err(NetworkError::RouteNotThroughJunction {
            origin: route.origin,
            destination: route.destination,
            junction: junction.id,
        });
    }
    Ok(route.exit_position.min(corridor.mainline_length()) - junction.position)
}

/// Detector position on the requested branch, in that branch's coordinates.
pub fn detector_position(junction: &Junction, branch: Branch) -> Result<f64, NetworkError> {
    match branch {
        Branch::Mainline => Ok(junction.position - junction.d1),
        Branch::OnRamp => {
            if !junction.has_on_ramp {
                return Err(NetworkError::NoSuchBranch {
                    junction: junction.id,
                    branch,
                });
            }
            Ok(junction.ramp_length - junction.d1)
        }
    }
}
