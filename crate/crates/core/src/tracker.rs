//! Dynamic fleet state: ingests position updates, map-matches them onto the
//! route, runs the two-pass link updater (exponential speed averaging plus
//! length-proportional travel-time redistribution over completed links),
//! derives direction, computes the next-stop announcement trigger, and
//! aggregates the position log for analysis.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geo::{self, GeoPoint};
use crate::store::{
    BusId, BusState, BusStatus, Category, Direction, NodeId, RouteId, Store,
};

/// The wire message a vehicle unit (or the simulator) sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionUpdate {
    pub bus_id: BusId,
    pub position: GeoPoint,
    pub speed_mps: f64,
    pub timestamp: f64,
    pub breakdown: bool,
}

/// Parses one wire record: `bus_id<TAB>lat<TAB>lon<TAB>speed_mps<TAB>unix_seconds<TAB>0|1`.
pub fn parse_update_line(line: &str) -> Result<PositionUpdate, Error> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(Error::Parse(format!(
            "expected 6 update fields, got {}",
            fields.len()
        )));
    }
    let num = |i: usize, what: &str| {
        fields[i]
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad {what}: {:?}", fields[i])))
    };
    let breakdown = match fields[5] {
        "0" => false,
        "1" => true,
        other => return Err(Error::Parse(format!("bad breakdown flag {other:?}"))),
    };
    if fields[0].is_empty() {
        return Err(Error::Parse("empty bus id".into()));
    }
    Ok(PositionUpdate {
        bus_id: fields[0].to_string(),
        position: GeoPoint::new(num(1, "lat")?, num(2, "lon")?)?,
        speed_mps: num(3, "speed")?,
        timestamp: num(4, "timestamp")?,
        breakdown,
    })
}

pub fn format_update_line(u: &PositionUpdate) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        u.bus_id,
        u.position.lat,
        u.position.lon,
        u.speed_mps,
        u.timestamp,
        if u.breakdown { 1 } else { 0 }
    )
}

#[derive(Debug, Clone)]
pub struct UpdaterConfig {
    /// Map-match threshold on the linearity error of (link start, position,
    /// link end), meters.
    pub match_threshold_m: f64,
    /// Weight of the previous average in the speed estimate.
    pub vel_weight_prev: f64,
    /// Weight of the previous estimate in the link travel time.
    pub tt_weight_prev: f64,
    /// Announcement radius for the next stop, meters.
    pub next_stop_radius_m: f64,
    /// Substitute speed when the average is below this floor, so the
    /// link-end estimate stays finite (flagged low-confidence).
    pub floor_speed_mps: f64,
}

impl Default for UpdaterConfig {
    fn default() -> Self {
        UpdaterConfig {
            match_threshold_m: 60.0,
            vel_weight_prev: 0.9,
            tt_weight_prev: 0.7,
            next_stop_radius_m: 50.0,
            floor_speed_mps: 1.0,
        }
    }
}

/// The next stop ahead of a bus and whether it is close enough to announce.
#[derive(Debug, Clone, Serialize)]
pub struct NextStop {
    pub node: NodeId,
    pub name: String,
    pub occ: usize,
    pub distance_m: f64,
    pub trigger: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub subject: String,
    /// Completed circuits: direction flips from return back to onward.
    pub trips: u64,
    pub total_distance_m: f64,
    pub buses_used: Vec<BusId>,
    pub off_route_updates: u64,
    pub records: usize,
}

type Listener = Box<dyn Fn(&BusState) + Send + Sync>;

/// Owns update ingestion and the per-bus quarantine counters. Updates for the
/// same bus must arrive in timestamp order; the store serializes writes.
#[derive(Default)]
pub struct Tracker {
    pub cfg: UpdaterConfig,
    listeners: Mutex<Vec<Listener>>,
    quarantined: Mutex<BTreeMap<BusId, u64>>,
}

impl Tracker {
    pub fn new(cfg: UpdaterConfig) -> Self {
        Tracker {
            cfg,
            ..Default::default()
        }
    }

    /// Registers a callback invoked after every accepted update.
    pub fn subscribe<F: Fn(&BusState) + Send + Sync + 'static>(&self, f: F) {
        self.listeners.lock().push(Box::new(f));
    }

    pub fn quarantined_for(&self, bus_id: &str) -> u64 {
        self.quarantined.lock().get(bus_id).copied().unwrap_or(0)
    }

    /// Ingests one position update.
    ///
    /// Pass 1 scans the route's links forward from the current link (wrapping
    /// the circuit at most once) for the first link whose linearity error
    /// against the reported position is inside the match threshold. Pass 2
    /// splits the time since link entry over the completed links in
    /// proportion to their lengths and folds each share into the link's
    /// travel-time estimate. Updates that match no link are quarantined
    /// (`OffRoute`) and leave the state unchanged except the update time.
    pub fn ingest(&self, store: &Store, u: &PositionUpdate) -> Result<BusState, Error> {
        let cfg = &self.cfg;
        let state = {
            let mut v = store.write(Category::LinkUpdater);
            let identity = v.bus(&u.bus_id)?.clone();
            let prev = v.bus_state(&u.bus_id).cloned();
            if let Some(p) = &prev {
                if u.timestamp < p.last_update_time {
                    return Err(Error::StaleTimestamp {
                        bus: u.bus_id.clone(),
                        got: u.timestamp,
                        have: p.last_update_time,
                    });
                }
            }
            let route = v.route(&identity.route_id)?.clone();
            let n = route.links.len();
            let start_idx = prev.as_ref().map(|p| p.current_link_index).unwrap_or(0);

            // Pass 1: forward map match. Failed probes are exactly the
            // completed links, so their rows are reused in pass 2.
            let mut matched = None;
            let mut completed = Vec::new();
            for step in 0..n {
                let idx = (start_idx + step) % n;
                let g = v.link_geometry(route.links[idx])?;
                if geo::linearity_error(g.start_pos, u.position, g.end_pos)
                    < cfg.match_threshold_m
                {
                    matched = Some((idx, g));
                    break;
                }
                completed.push(g);
            }
            let Some((new_idx, new_geom)) = matched else {
                if let Some(mut p) = prev {
                    p.last_update_time = u.timestamp;
                    v.put_bus_state(p);
                }
                drop(v);
                *self.quarantined.lock().entry(u.bus_id.clone()).or_insert(0) += 1;
                return Err(Error::OffRoute(u.bus_id.clone()));
            };

            let avg_speed = match &prev {
                Some(p) => {
                    cfg.vel_weight_prev * p.avg_speed + (1.0 - cfg.vel_weight_prev) * u.speed_mps
                }
                None => u.speed_mps,
            };

            let mut link_entry_time = u.timestamp;
            if let Some(p) = &prev {
                if new_idx == p.current_link_index {
                    link_entry_time = p.link_entry_time;
                } else {
                    // Pass 2: redistribute the elapsed time over the
                    // completed links by length. The last share is the exact
                    // remainder so the split sums to the elapsed time.
                    let dt = u.timestamp - p.link_entry_time;
                    let d_total: f64 = completed.iter().map(|g| g.length_m).sum();
                    if dt > 0.0 && d_total > 0.0 {
                        let mut allocated = 0.0;
                        for (i, g) in completed.iter().enumerate() {
                            let raw = if i + 1 == completed.len() {
                                dt - allocated
                            } else {
                                let share = dt * g.length_m / d_total;
                                allocated += share;
                                share
                            };
                            let tt = cfg.tt_weight_prev * g.travel_time_s
                                + (1.0 - cfg.tt_weight_prev) * raw;
                            v.set_link_travel_time(g.id, tt)?;
                        }
                    }
                }
            }

            let remaining = geo::dist(u.position, new_geom.end_pos);
            let low_confidence = avg_speed < cfg.floor_speed_mps;
            let est_speed = if low_confidence {
                cfg.floor_speed_mps
            } else {
                avg_speed
            };

            let state = BusState {
                bus_id: u.bus_id.clone(),
                position: u.position,
                current_speed: u.speed_mps,
                avg_speed,
                direction: route.leg_of_link(new_idx),
                current_link: new_geom.id,
                current_link_index: new_idx,
                link_entry_time,
                estimated_end_time: remaining / est_speed,
                status: if u.breakdown {
                    BusStatus::Invalid
                } else {
                    BusStatus::Valid
                },
                last_update_time: u.timestamp,
                low_confidence,
                updates_accepted: prev.map(|p| p.updates_accepted).unwrap_or(0) + 1,
            };
            v.put_bus_state(state.clone());
            v.append_log(&identity.route_id, state.clone());
            state
        };
        for l in self.listeners.lock().iter() {
            l(&state);
        }
        Ok(state)
    }

    /// Direction of travel, derived from which side of the terminus the
    /// current link lies on. Needs at least two accepted updates.
    pub fn infer_direction(&self, store: &Store, bus_id: &str) -> Result<Direction, Error> {
        let v = store.read(Category::LinkUpdater);
        v.bus(bus_id)?;
        let state = v
            .bus_state(bus_id)
            .ok_or_else(|| Error::InsufficientHistory(bus_id.to_string()))?;
        if state.updates_accepted < 2 {
            return Err(Error::InsufficientHistory(bus_id.to_string()));
        }
        Ok(state.direction)
    }

    /// The first stop occurrence strictly ahead of the bus along the circuit,
    /// with trigger=true when the bus is within the announcement radius.
    /// Returns None for routes without stops.
    pub fn next_stop(&self, store: &Store, bus_id: &str) -> Result<Option<NextStop>, Error> {
        let v = store.read(Category::LinkUpdater);
        v.bus(bus_id)?;
        let Some(state) = v.bus_state(bus_id).cloned() else {
            return Err(Error::UnknownBus(bus_id.to_string()));
        };
        let route = v.route_of_bus(&state)?;
        if route.stops.is_empty() {
            return Ok(None);
        }
        let geom = v.link_geometry(state.current_link)?;
        let link_start_arc: f64 = route
            .links
            .iter()
            .take(state.current_link_index)
            .map(|l| v.link_length_uncounted(*l))
            .sum();
        let along = geo::dist(geom.start_pos, state.position).min(geom.length_m);
        let bus_arc = link_start_arc + along;

        let next = route
            .stops
            .iter()
            .find(|s| s.arc_m > bus_arc + 1e-9)
            .or_else(|| route.stops.first())
            .unwrap()
            .clone();
        let stop_pos = v.node(next.node)?.position;
        let distance_m = geo::dist(state.position, stop_pos);
        Ok(Some(NextStop {
            node: next.node,
            name: next.name,
            occ: next.occ,
            distance_m,
            trigger: distance_m <= self.cfg.next_stop_radius_m,
        }))
    }

    /// Trip counts and distance covered, from the position log.
    pub fn analyze_bus(
        &self,
        store: &Store,
        bus_id: &str,
        from: f64,
        to: f64,
    ) -> Result<AnalysisReport, Error> {
        let v = store.read(Category::SmsWeb);
        v.bus(bus_id)?;
        let log = v.log_for_bus(bus_id, from, to);
        let (trips, dist) = trips_and_distance(&log.iter().collect::<Vec<_>>());
        Ok(AnalysisReport {
            subject: format!("bus {bus_id}"),
            trips,
            total_distance_m: dist,
            buses_used: vec![bus_id.to_string()],
            off_route_updates: self.quarantined_for(bus_id),
            records: log.len(),
        })
    }

    /// Aggregates over every bus that used the route in the window.
    pub fn analyze_route(
        &self,
        store: &Store,
        route_id: &str,
        from: f64,
        to: f64,
    ) -> Result<AnalysisReport, Error> {
        let v = store.read(Category::SmsWeb);
        v.route(route_id)?;
        let log = v.log_for_route(route_id, from, to);
        let mut by_bus: BTreeMap<&str, Vec<&crate::store::LogRecord>> = BTreeMap::new();
        for r in &log {
            by_bus.entry(r.state.bus_id.as_str()).or_default().push(r);
        }
        let mut trips = 0;
        let mut dist = 0.0;
        let mut off_route = 0;
        for (bus, records) in &by_bus {
            let (t, d) = trips_and_distance(records);
            trips += t;
            dist += d;
            off_route += self.quarantined_for(bus);
        }
        Ok(AnalysisReport {
            subject: format!("route {route_id}"),
            trips,
            total_distance_m: dist,
            buses_used: by_bus.keys().map(|b| b.to_string()).collect(),
            off_route_updates: off_route,
            records: log.len(),
        })
    }
}

fn trips_and_distance(records: &[&crate::store::LogRecord]) -> (u64, f64) {
    let mut trips = 0;
    let mut dist = 0.0;
    for w in records.windows(2) {
        dist += geo::dist(w[0].state.position, w[1].state.position);
        if w[0].state.direction == Direction::Return && w[1].state.direction == Direction::Onward {
            trips += 1;
        }
    }
    (trips, dist)
}
