//! Stop arrival prediction: walks each route's circuit from the first
//! occupied link, taking the nearest approaching valid bus for every stop
//! occurrence, and publishes the result as an immutable table.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::error::Error;
use crate::store::{BusStatus, Category, Direction, NodeId, ReadView, RouteId, Store};

/// One predicted arrival: seconds from the computation instant until the
/// nearest approaching valid bus reaches this stop occurrence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaEntry {
    pub route_id: RouteId,
    pub occ: usize,
    pub node: NodeId,
    pub stop_name: String,
    pub leg: Direction,
    pub eta_s: f64,
}

/// ETAs for one route plus its current round-trip time (the sum of all link
/// travel times, which bounds every published ETA).
#[derive(Debug, Clone)]
pub struct RouteEtas {
    pub entries: Vec<EtaEntry>,
    pub round_trip_s: f64,
}

/// The published table, swapped atomically on every recomputation.
#[derive(Debug, Clone)]
pub struct EtaTable {
    pub computed_at: f64,
    pub entries: BTreeMap<(RouteId, usize), EtaEntry>,
    /// Routes that currently have no valid bus.
    pub no_service: BTreeSet<RouteId>,
    pub round_trip_s: BTreeMap<RouteId, f64>,
}

impl EtaTable {
    pub fn empty() -> Self {
        EtaTable {
            computed_at: f64::NEG_INFINITY,
            entries: BTreeMap::new(),
            no_service: BTreeSet::new(),
            round_trip_s: BTreeMap::new(),
        }
    }

    pub fn age_s(&self, now: f64) -> f64 {
        now - self.computed_at
    }

    /// The same arrival `k` full circuits later.
    pub fn eta_after(&self, entry: &EtaEntry, k: u64) -> f64 {
        entry.eta_s + k as f64 * self.round_trip_s.get(&entry.route_id).copied().unwrap_or(0.0)
    }
}

/// Boundary for slotting in alternative arrival-time predictors; only the
/// link-walk predictor is implemented.
pub trait Predictor: Send + Sync {
    fn route_etas(&self, view: &ReadView<'_>, route_id: &str) -> Result<RouteEtas, Error>;
}

/// The link-walk predictor: wraps the circuit once starting at the first
/// occupied link; an occupied link resets the running ETA to the smallest
/// estimated link-end time among its valid buses, an empty link adds its
/// travel time, and every link end that is a stop records an entry.
pub struct LinkWalkPredictor;

impl Predictor for LinkWalkPredictor {
    fn route_etas(&self, view: &ReadView<'_>, route_id: &str) -> Result<RouteEtas, Error> {
        let route = view.route(route_id)?.clone();
        let states = view.bus_states_on_route(route_id);

        let mut est_by_link: BTreeMap<usize, f64> = BTreeMap::new();
        for s in states.iter().filter(|s| s.status == BusStatus::Valid) {
            let e = est_by_link
                .entry(s.current_link_index)
                .or_insert(f64::INFINITY);
            *e = e.min(s.estimated_end_time);
        }
        if est_by_link.is_empty() {
            return Err(Error::NoActiveBus(route_id.to_string()));
        }

        let mut tts = Vec::with_capacity(route.links.len());
        for l in &route.links {
            tts.push(view.link(*l)?.travel_time_s);
        }
        let round_trip_s: f64 = tts.iter().sum();

        let mut stops_by_link: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in route.stops.iter().enumerate() {
            stops_by_link.entry(s.link_index).or_default().push(i);
        }

        let n = route.links.len();
        let start = *est_by_link.keys().next().unwrap();
        let mut eta = 0.0;
        let mut entries = Vec::with_capacity(route.stops.len());
        for step in 0..n {
            let i = (start + step) % n;
            match est_by_link.get(&i) {
                Some(est) => eta = *est,
                None => eta += tts[i],
            }
            if let Some(stop_idxs) = stops_by_link.get(&i) {
                for &si in stop_idxs {
                    let s = &route.stops[si];
                    entries.push(EtaEntry {
                        route_id: route.id.clone(),
                        occ: s.occ,
                        node: s.node,
                        stop_name: s.name.clone(),
                        leg: s.leg,
                        eta_s: eta.clamp(0.0, round_trip_s),
                    });
                }
            }
        }
        entries.sort_by_key(|e| e.occ);
        Ok(RouteEtas {
            entries,
            round_trip_s,
        })
    }
}

/// Recomputes and publishes ETAs on a fixed tick (and on demand when a query
/// finds the published table stale).
pub struct EtaEngine {
    predictor: Box<dyn Predictor>,
    pub tick_s: f64,
}

impl Default for EtaEngine {
    fn default() -> Self {
        EtaEngine::new(60.0)
    }
}

impl EtaEngine {
    pub fn new(tick_s: f64) -> Self {
        EtaEngine {
            predictor: Box::new(LinkWalkPredictor),
            tick_s,
        }
    }

    pub fn with_predictor(tick_s: f64, predictor: Box<dyn Predictor>) -> Self {
        EtaEngine { predictor, tick_s }
    }

    /// ETAs for a single route. Errors with NoActiveBus when every bus on the
    /// route is missing or marked invalid.
    pub fn compute_route(&self, store: &Store, route_id: &str) -> Result<RouteEtas, Error> {
        let view = store.read(Category::EtaCalculator);
        self.predictor.route_etas(&view, route_id)
    }

    /// Recomputes every route and atomically swaps the published table.
    /// Routes without a valid bus are marked no-service, never fatal.
    pub fn recompute_all(&self, store: &Store, now: f64) -> Arc<EtaTable> {
        let mut table = EtaTable::empty();
        table.computed_at = now;
        {
            let view = store.read(Category::EtaCalculator);
            for route_id in view.route_ids() {
                match self.predictor.route_etas(&view, &route_id) {
                    Ok(r) => {
                        table.round_trip_s.insert(route_id.clone(), r.round_trip_s);
                        for e in r.entries {
                            table.entries.insert((route_id.clone(), e.occ), e);
                        }
                    }
                    Err(_) => {
                        table.no_service.insert(route_id);
                    }
                }
            }
        }
        let table = Arc::new(table);
        store.publish_eta(table.clone());
        table
    }

    /// On-demand refresh when the published table is older than one tick.
    pub fn recompute_if_stale(&self, store: &Store, now: f64) -> Arc<EtaTable> {
        let published = store.published_eta();
        if published.age_s(now) > self.tick_s {
            self.recompute_all(store, now)
        } else {
            published
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{offset, GeoPoint};
    use crate::store::{
        BusIdentity, BusState, BusType, Category, LinkId, NodeKind, StoreConfig,
    };

    /// Square circuit Alpha -> n -> Charlie -> n -> Alpha, 600 m sides,
    /// every link travel time 60 s.
    fn square() -> (Store, Vec<LinkId>) {
        let store = Store::new(StoreConfig::default());
        let mut v = store.write(Category::Admin);
        let a = GeoPoint::new(12.9, 77.5).unwrap();
        let pts = [
            (a, Some("Alpha"), NodeKind::Stop),
            (offset(a, 0.0, 600.0), None, NodeKind::Plain),
            (offset(a, 600.0, 600.0), Some("Charlie"), NodeKind::Stop),
            (offset(a, 600.0, 0.0), None, NodeKind::Plain),
        ];
        let nodes: Vec<_> = pts
            .into_iter()
            .map(|(p, name, kind)| v.upsert_node(p, name, kind).unwrap().0)
            .collect();
        let links: Vec<_> = (0..4)
            .map(|i| v.upsert_link(nodes[i], nodes[(i + 1) % 4], 60.0).unwrap().0)
            .collect();
        v.insert_route("R1", &links).unwrap();
        v.register_bus(BusIdentity {
            bus_id: "b1".into(),
            bus_type: BusType::Ordinary,
            route_id: "R1".into(),
        })
        .unwrap();
        drop(v);
        (store, links)
    }

    fn state(bus: &str, link_index: usize, links: &[LinkId], est: f64, status: BusStatus) -> BusState {
        BusState {
            bus_id: bus.into(),
            position: GeoPoint::new(12.9, 77.5).unwrap(),
            current_speed: 10.0,
            avg_speed: 10.0,
            direction: Direction::Onward,
            current_link: links[link_index],
            current_link_index: link_index,
            link_entry_time: 0.0,
            estimated_end_time: est,
            status,
            last_update_time: 0.0,
            low_confidence: false,
            updates_accepted: 1,
        }
    }

    #[test]
    fn single_bus_walk_accumulates_link_times() {
        let (store, links) = square();
        {
            let mut v = store.write(Category::Admin);
            v.put_bus_state(state("b1", 0, &links, 30.0, BusStatus::Valid));
        }
        let engine = EtaEngine::default();
        let r = engine.compute_route(&store, "R1").unwrap();
        assert_eq!(r.round_trip_s, 240.0);
        // Stops: Alpha occ 0 (end of link 3), Charlie occ 1 (end of link 1).
        let by_occ: BTreeMap<usize, f64> = r.entries.iter().map(|e| (e.occ, e.eta_s)).collect();
        // Charlie: est to end of link 0, plus link 1.
        assert_eq!(by_occ[&1], 30.0 + 60.0);
        // Alpha: plus links 2 and 3.
        assert_eq!(by_occ[&0], 30.0 + 60.0 + 60.0 + 60.0);
    }

    #[test]
    fn nearest_bus_in_link_wins() {
        let (store, links) = square();
        {
            let mut v = store.write(Category::Admin);
            v.register_bus(BusIdentity {
                bus_id: "b2".into(),
                bus_type: BusType::Ordinary,
                route_id: "R1".into(),
            })
            .unwrap();
            v.put_bus_state(state("b1", 1, &links, 80.0, BusStatus::Valid));
            v.put_bus_state(state("b2", 1, &links, 30.0, BusStatus::Valid));
        }
        let engine = EtaEngine::default();
        let r = engine.compute_route(&store, "R1").unwrap();
        let charlie = r.entries.iter().find(|e| e.occ == 1).unwrap();
        assert_eq!(charlie.eta_s, 30.0);
    }

    #[test]
    fn invalid_buses_are_excluded() {
        let (store, links) = square();
        {
            let mut v = store.write(Category::Admin);
            v.put_bus_state(state("b1", 0, &links, 30.0, BusStatus::Invalid));
        }
        let engine = EtaEngine::default();
        assert!(matches!(
            engine.compute_route(&store, "R1"),
            Err(Error::NoActiveBus(_))
        ));
        // recompute_all marks the route no-service instead of failing.
        let table = engine.recompute_all(&store, 0.0);
        assert!(table.no_service.contains("R1"));
        assert!(table.entries.is_empty());
    }

    #[test]
    fn etas_are_bounded_by_round_trip() {
        let (store, links) = square();
        {
            let mut v = store.write(Category::Admin);
            // Parked bus: floor-speed estimate larger than the link time.
            v.put_bus_state(state("b1", 0, &links, 600.0, BusStatus::Valid));
        }
        let engine = EtaEngine::default();
        let r = engine.compute_route(&store, "R1").unwrap();
        for e in &r.entries {
            assert!(e.eta_s >= 0.0 && e.eta_s <= r.round_trip_s, "{e:?}");
        }
    }

    #[test]
    fn eta_after_adds_whole_circuits() {
        let mut table = EtaTable::empty();
        table.round_trip_s.insert("R1".into(), 1800.0);
        let entry = EtaEntry {
            route_id: "R1".into(),
            occ: 0,
            node: NodeId(0),
            stop_name: "Alpha".into(),
            leg: Direction::Onward,
            eta_s: 100.0,
        };
        assert_eq!(table.eta_after(&entry, 0), 100.0);
        assert_eq!(table.eta_after(&entry, 2), 3700.0);
        let mut prev = 0.0;
        for k in 0..5 {
            let v = table.eta_after(&entry, k);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn empty_store_publishes_empty_table() {
        let store = Store::default();
        let engine = EtaEngine::default();
        let table = engine.recompute_all(&store, 123.0);
        assert!(table.entries.is_empty());
        assert!(table.no_service.is_empty());
        assert_eq!(store.published_eta().computed_at, 123.0);
    }
}
