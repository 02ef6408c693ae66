//! The static network model and storage layer: nodes, links, routes, stop
//! bindings, bus registrations, dynamic bus state, the position log, and the
//! published ETA table.
//!
//! The store is in-memory. Every mutation of the static model is recorded in
//! an append-only journal; replaying the journal into an empty store
//! reproduces a byte-identical snapshot export. Access goes through counted
//! views so per-category query loads can be measured and reconciled against
//! the analytic capacity model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Deref;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eta::EtaTable;
use crate::geo::{self, GeoPoint};

pub type RouteId = String;
pub type BusId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for LinkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Plain,
    Poi,
    Stop,
}

impl NodeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NodeKind::Plain => "plain",
            NodeKind::Poi => "poi",
            NodeKind::Stop => "stop",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "plain" => Ok(NodeKind::Plain),
            "poi" => Ok(NodeKind::Poi),
            "stop" => Ok(NodeKind::Stop),
            other => Err(Error::Parse(format!("unknown node kind {other:?}"))),
        }
    }
}

/// A named or unnamed coordinate on a route: stop, point of interest, or
/// geometric bend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub position: GeoPoint,
    pub name: Option<String>,
    pub kind: NodeKind,
}

/// A directed edge between two adjacent nodes carrying the running
/// travel-time estimate shared by every route that uses it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    pub start: NodeId,
    pub end: NodeId,
    pub length_m: f64,
    pub travel_time_s: f64,
}

/// Link row joined with its endpoint coordinates; what the map matcher and
/// ETA walk actually consume, fetched as one store access.
#[derive(Debug, Clone)]
pub struct LinkGeometry {
    pub id: LinkId,
    pub start: NodeId,
    pub end: NodeId,
    pub start_pos: GeoPoint,
    pub end_pos: GeoPoint,
    pub length_m: f64,
    pub travel_time_s: f64,
}

/// Which half of the circuit an occurrence or bus is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Onward,
    Return,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Onward => "onward",
            Direction::Return => "return",
        }
    }
}

/// One appearance of a stop along a route's circuit. A stop served in both
/// directions has two occurrences with distinct indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopOccurrence {
    pub occ: usize,
    pub node: NodeId,
    pub name: String,
    /// Index of the link whose end node records this occurrence during the
    /// ETA walk (the route's last link for the start-of-circuit stop).
    pub link_index: usize,
    /// Distance along the circuit from the route start, meters.
    pub arc_m: f64,
    pub leg: Direction,
}

/// A closed circuit of links covering the onward and return paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Route {
    pub id: RouteId,
    pub links: Vec<LinkId>,
    pub length_m: f64,
    pub stops: Vec<StopOccurrence>,
    /// Index of the last onward link; links after it are the return leg.
    /// None when the route has no usable terminus (no labeled stops).
    pub terminus_link: Option<usize>,
}

impl Route {
    pub fn leg_of_link(&self, link_index: usize) -> Direction {
        match self.terminus_link {
            Some(t) if link_index > t => Direction::Return,
            _ => Direction::Onward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    Ordinary,
    Luxury,
    Other(String),
}

impl BusType {
    pub fn as_string(&self) -> String {
        match self {
            BusType::Ordinary => "ordinary".into(),
            BusType::Luxury => "luxury".into(),
            BusType::Other(t) => format!("other:{t}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "ordinary" => Ok(BusType::Ordinary),
            "luxury" => Ok(BusType::Luxury),
            other => match other.strip_prefix("other:") {
                Some(t) if !t.is_empty() => Ok(BusType::Other(t.to_string())),
                _ => Err(Error::Parse(format!("unknown bus type {other:?}"))),
            },
        }
    }
}

/// Static bus record: who it is and which route it runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusIdentity {
    pub bus_id: BusId,
    pub bus_type: BusType,
    pub route_id: RouteId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusStatus {
    Valid,
    Invalid,
}

/// Dynamic per-bus record, rewritten on every accepted position update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusState {
    pub bus_id: BusId,
    pub position: GeoPoint,
    pub current_speed: f64,
    pub avg_speed: f64,
    pub direction: Direction,
    pub current_link: LinkId,
    pub current_link_index: usize,
    /// Entry time into the current link (LST), seconds since epoch.
    pub link_entry_time: f64,
    /// Estimated seconds from the last update until the current link's end.
    pub estimated_end_time: f64,
    pub status: BusStatus,
    pub last_update_time: f64,
    /// Set when the estimate had to fall back to the floor speed.
    pub low_confidence: bool,
    pub updates_accepted: u64,
}

/// Append-only copy of the bus state written on every accepted update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub route_id: RouteId,
    pub state: BusState,
}

/// A node-reuse request that wanted to rename an already-named node; the
/// existing name is kept and the conflict recorded for operator review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameConflict {
    pub node: NodeId,
    pub existing: String,
    pub proposed: String,
}

/// One row of the materialized Stop table: binding plus current ETA.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalRow {
    pub route_id: RouteId,
    pub occ: usize,
    pub leg: Direction,
    pub stop_name: String,
    pub node: NodeId,
    /// None means no service (no valid bus on the route right now).
    pub eta_s: Option<f64>,
}

/// Store-access attribution, mirroring the load model's terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    LinkUpdater,
    EtaCalculator,
    SmsWeb,
    Station,
    Admin,
}

#[derive(Debug, Default)]
pub struct QueryCounters {
    enabled: AtomicBool,
    link_updater: AtomicU64,
    eta_calculator: AtomicU64,
    sms_web: AtomicU64,
    station: AtomicU64,
    admin: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub link_updater: u64,
    pub eta_calculator: u64,
    pub sms_web: u64,
    pub station: u64,
    pub admin: u64,
}

impl CounterSnapshot {
    /// Per-category difference since an earlier snapshot.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            link_updater: self.link_updater - earlier.link_updater,
            eta_calculator: self.eta_calculator - earlier.eta_calculator,
            sms_web: self.sms_web - earlier.sms_web,
            station: self.station - earlier.station,
            admin: self.admin - earlier.admin,
        }
    }

    pub fn total(&self) -> u64 {
        self.link_updater + self.eta_calculator + self.sms_web + self.station + self.admin
    }
}

impl QueryCounters {
    fn new(enabled: bool) -> Self {
        let c = QueryCounters::default();
        c.enabled.store(enabled, Ordering::Relaxed);
        c
    }

    fn bump(&self, cat: Category) {
        if !self.enabled.load(Ordering::Relaxed) {
            return;
        }
        let counter = match cat {
            Category::LinkUpdater => &self.link_updater,
            Category::EtaCalculator => &self.eta_calculator,
            Category::SmsWeb => &self.sms_web,
            Category::Station => &self.station,
            Category::Admin => &self.admin,
        };
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            link_updater: self.link_updater.load(Ordering::Relaxed),
            eta_calculator: self.eta_calculator.load(Ordering::Relaxed),
            sms_web: self.sms_web.load(Ordering::Relaxed),
            station: self.station.load(Ordering::Relaxed),
            admin: self.admin.load(Ordering::Relaxed),
        }
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }
}

/// Journaled mutations of the static model. Replaying these into an empty
/// store reproduces the exact table contents (ids included).
#[derive(Debug, Clone, PartialEq)]
pub enum JournalEntry {
    NodeInsert {
        id: NodeId,
        lat: f64,
        lon: f64,
        kind: NodeKind,
        name: Option<String>,
    },
    NodeMeta {
        id: NodeId,
        kind: NodeKind,
        name: Option<String>,
    },
    LinkInsert {
        id: LinkId,
        start: NodeId,
        end: NodeId,
        travel_time_s: f64,
    },
    LinkTravelTime {
        id: LinkId,
        travel_time_s: f64,
    },
    RouteInsert {
        id: RouteId,
        links: Vec<LinkId>,
    },
    RouteDelete {
        id: RouteId,
    },
    BusRegister {
        id: BusId,
        bus_type: BusType,
        route_id: RouteId,
    },
}

fn name_field(name: &Option<String>) -> &str {
    name.as_deref().unwrap_or("-")
}

fn parse_name_field(s: &str) -> Option<String> {
    if s == "-" {
        None
    } else {
        Some(s.to_string())
    }
}

impl JournalEntry {
    pub fn to_line(&self) -> String {
        match self {
            JournalEntry::NodeInsert {
                id,
                lat,
                lon,
                kind,
                name,
            } => format!(
                "node\t{id}\t{lat}\t{lon}\t{}\t{}",
                kind.as_str(),
                name_field(name)
            ),
            JournalEntry::NodeMeta { id, kind, name } => {
                format!("node_meta\t{id}\t{}\t{}", kind.as_str(), name_field(name))
            }
            JournalEntry::LinkInsert {
                id,
                start,
                end,
                travel_time_s,
            } => format!("link\t{id}\t{start}\t{end}\t{travel_time_s}"),
            JournalEntry::LinkTravelTime { id, travel_time_s } => {
                format!("link_tt\t{id}\t{travel_time_s}")
            }
            JournalEntry::RouteInsert { id, links } => {
                let csv: Vec<String> = links.iter().map(|l| l.to_string()).collect();
                format!("route\t{id}\t{}", csv.join(","))
            }
            JournalEntry::RouteDelete { id } => format!("route_del\t{id}"),
            JournalEntry::BusRegister {
                id,
                bus_type,
                route_id,
            } => format!("bus\t{id}\t{}\t{route_id}", bus_type.as_string()),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self, Error> {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse(format!("malformed journal line {line:?}"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let id32 = |s: &str| s.parse::<u32>().map_err(|_| bad());
        match fields.first().copied() {
            Some("node") if fields.len() == 6 => Ok(JournalEntry::NodeInsert {
                id: NodeId(id32(fields[1])?),
                lat: num(fields[2])?,
                lon: num(fields[3])?,
                kind: NodeKind::parse(fields[4])?,
                name: parse_name_field(fields[5]),
            }),
            Some("node_meta") if fields.len() == 4 => Ok(JournalEntry::NodeMeta {
                id: NodeId(id32(fields[1])?),
                kind: NodeKind::parse(fields[2])?,
                name: parse_name_field(fields[3]),
            }),
            Some("link") if fields.len() == 5 => Ok(JournalEntry::LinkInsert {
                id: LinkId(id32(fields[1])?),
                start: NodeId(id32(fields[2])?),
                end: NodeId(id32(fields[3])?),
                travel_time_s: num(fields[4])?,
            }),
            Some("link_tt") if fields.len() == 3 => Ok(JournalEntry::LinkTravelTime {
                id: LinkId(id32(fields[1])?),
                travel_time_s: num(fields[2])?,
            }),
            Some("route") if fields.len() == 3 => {
                let mut links = Vec::new();
                for part in fields[2].split(',') {
                    links.push(LinkId(id32(part)?));
                }
                Ok(JournalEntry::RouteInsert {
                    id: fields[1].to_string(),
                    links,
                })
            }
            Some("route_del") if fields.len() == 2 => Ok(JournalEntry::RouteDelete {
                id: fields[1].to_string(),
            }),
            Some("bus") if fields.len() == 4 => Ok(JournalEntry::BusRegister {
                id: fields[1].to_string(),
                bus_type: BusType::parse(fields[2])?,
                route_id: fields[3].to_string(),
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Radius within which a new node is merged into an existing one.
    pub node_match_threshold_m: f64,
    pub instrumentation: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            node_match_threshold_m: 25.0,
            instrumentation: true,
        }
    }
}

/// Spatial grid cell edge, degrees (~111 m of latitude).
const GRID_CELL_DEG: f64 = 0.001;
const METERS_PER_DEG: f64 = 111_194.92664455873;

fn grid_key(p: GeoPoint) -> (i64, i64) {
    (
        (p.lat / GRID_CELL_DEG).floor() as i64,
        (p.lon / GRID_CELL_DEG).floor() as i64,
    )
}

#[derive(Debug, Default)]
pub struct Tables {
    config: StoreConfig,
    nodes: BTreeMap<NodeId, Node>,
    grid: HashMap<(i64, i64), Vec<NodeId>>,
    links: BTreeMap<LinkId, Link>,
    link_by_pair: HashMap<(NodeId, NodeId), LinkId>,
    routes: BTreeMap<RouteId, Route>,
    buses: BTreeMap<BusId, BusIdentity>,
    bus_states: BTreeMap<BusId, BusState>,
    bus_log: Vec<LogRecord>,
    journal: Vec<JournalEntry>,
    conflicts: Vec<NameConflict>,
    next_node: u32,
    next_link: u32,
    log_seq: u64,
}

impl Tables {
    fn new(config: StoreConfig) -> Self {
        Tables {
            config,
            ..Default::default()
        }
    }

    fn nearest_node_within(&self, p: GeoPoint, radius_m: f64) -> Option<(NodeId, f64)> {
        let (cy, cx) = grid_key(p);
        let lat_cells = ((radius_m / METERS_PER_DEG) / GRID_CELL_DEG).ceil() as i64;
        let lon_m_per_deg = METERS_PER_DEG * p.lat.to_radians().cos().max(1e-6);
        let lon_cells = ((radius_m / lon_m_per_deg) / GRID_CELL_DEG).ceil() as i64;
        let mut best: Option<(NodeId, f64)> = None;
        for dy in -lat_cells..=lat_cells {
            for dx in -lon_cells..=lon_cells {
                if let Some(ids) = self.grid.get(&(cy + dy, cx + dx)) {
                    for &id in ids {
                        let d = geo::dist(p, self.nodes[&id].position);
                        if d <= radius_m && best.map(|(_, bd)| d < bd).unwrap_or(true) {
                            best = Some((id, d));
                        }
                    }
                }
            }
        }
        best
    }

    fn apply_node_insert(&mut self, node: Node) {
        self.next_node = self.next_node.max(node.id.0 + 1);
        self.grid.entry(grid_key(node.position)).or_default().push(node.id);
        self.nodes.insert(node.id, node);
    }

    fn apply_node_meta(&mut self, id: NodeId, kind: NodeKind, name: Option<String>) {
        if let Some(n) = self.nodes.get_mut(&id) {
            n.kind = kind;
            n.name = name;
        }
    }

    fn apply_link_insert(&mut self, id: LinkId, start: NodeId, end: NodeId, tt: f64) -> Result<(), Error> {
        let sp = self.nodes.get(&start).ok_or(Error::UnknownNode(start.0))?.position;
        let ep = self.nodes.get(&end).ok_or(Error::UnknownNode(end.0))?.position;
        self.next_link = self.next_link.max(id.0 + 1);
        self.link_by_pair.insert((start, end), id);
        self.links.insert(
            id,
            Link {
                id,
                start,
                end,
                length_m: geo::dist(sp, ep),
                travel_time_s: tt,
            },
        );
        Ok(())
    }

    /// Validates the chain/closure invariants and derives stop occurrences,
    /// arc positions and the terminus partition for a link sequence.
    fn derive_route(&self, id: &str, links: &[LinkId]) -> Result<Route, Error> {
        if id.is_empty() || id.contains(['\t', '\n']) {
            return Err(Error::InvalidRoute(id.to_string(), "bad route id".into()));
        }
        if links.len() < 2 {
            return Err(Error::InvalidRoute(id.to_string(), "needs at least 2 links".into()));
        }
        let mut rows = Vec::with_capacity(links.len());
        for lid in links {
            rows.push(self.links.get(lid).ok_or(Error::UnknownLink(lid.0))?);
        }
        for w in rows.windows(2) {
            if w[0].end != w[1].start {
                return Err(Error::InvalidRoute(
                    id.to_string(),
                    format!("links {} and {} do not chain", w[0].id, w[1].id),
                ));
            }
        }
        let first = rows[0];
        let last = rows[rows.len() - 1];
        if last.end != first.start {
            return Err(Error::InvalidRoute(
                id.to_string(),
                "circuit does not close".into(),
            ));
        }

        let length_m: f64 = rows.iter().map(|l| l.length_m).sum();
        let stop_name = |n: NodeId| -> Option<String> {
            let node = &self.nodes[&n];
            (node.kind == NodeKind::Stop).then(|| node.name.clone().unwrap_or_default())
        };

        // Occurrences in circuit order; the start-of-circuit stop (if any)
        // comes first at arc 0 and is recorded by the final link's end.
        let mut stops = Vec::new();
        if let Some(name) = stop_name(first.start) {
            stops.push(StopOccurrence {
                occ: 0,
                node: first.start,
                name,
                link_index: rows.len() - 1,
                arc_m: 0.0,
                leg: Direction::Onward,
            });
        }
        let mut arc = 0.0;
        for (i, row) in rows.iter().enumerate() {
            arc += row.length_m;
            if i == rows.len() - 1 {
                break; // closure node already covered at arc 0
            }
            if let Some(name) = stop_name(row.end) {
                stops.push(StopOccurrence {
                    occ: 0,
                    node: row.end,
                    name,
                    link_index: i,
                    arc_m: arc,
                    leg: Direction::Onward,
                });
            }
        }
        for (i, s) in stops.iter_mut().enumerate() {
            s.occ = i;
        }

        // Terminus: the stop occurrence farthest from the start measured the
        // short way around the circuit; the direction flips after its link.
        let terminus_link = stops
            .iter()
            .filter(|s| s.arc_m > 0.0)
            .map(|s| (s.arc_m.min(length_m - s.arc_m), s.link_index))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, li)| li);

        let mut route = Route {
            id: id.to_string(),
            links: links.to_vec(),
            length_m,
            stops,
            terminus_link,
        };
        for s in route.stops.iter_mut() {
            s.leg = match terminus_link {
                Some(t) if s.link_index > t => Direction::Return,
                _ => Direction::Onward,
            };
        }
        Ok(route)
    }

    fn apply_route_insert(&mut self, id: &str, links: &[LinkId]) -> Result<(), Error> {
        let route = self.derive_route(id, links)?;
        self.routes.insert(id.to_string(), route);
        Ok(())
    }

    fn apply(&mut self, entry: &JournalEntry) -> Result<(), Error> {
        match entry {
            JournalEntry::NodeInsert {
                id,
                lat,
                lon,
                kind,
                name,
            } => {
                self.apply_node_insert(Node {
                    id: *id,
                    position: GeoPoint::new(*lat, *lon)?,
                    name: name.clone(),
                    kind: *kind,
                });
                Ok(())
            }
            JournalEntry::NodeMeta { id, kind, name } => {
                self.apply_node_meta(*id, *kind, name.clone());
                Ok(())
            }
            JournalEntry::LinkInsert {
                id,
                start,
                end,
                travel_time_s,
            } => self.apply_link_insert(*id, *start, *end, *travel_time_s),
            JournalEntry::LinkTravelTime { id, travel_time_s } => {
                let link = self.links.get_mut(id).ok_or(Error::UnknownLink(id.0))?;
                link.travel_time_s = *travel_time_s;
                Ok(())
            }
            JournalEntry::RouteInsert { id, links } => self.apply_route_insert(id, links),
            JournalEntry::RouteDelete { id } => {
                self.routes.remove(id);
                Ok(())
            }
            JournalEntry::BusRegister {
                id,
                bus_type,
                route_id,
            } => {
                if !self.routes.contains_key(route_id) {
                    return Err(Error::NotFound(format!("route {route_id}")));
                }
                let replaced = self.buses.insert(
                    id.clone(),
                    BusIdentity {
                        bus_id: id.clone(),
                        bus_type: bus_type.clone(),
                        route_id: route_id.clone(),
                    },
                );
                if replaced.map(|r| r.route_id != *route_id).unwrap_or(false) {
                    self.bus_states.remove(id);
                }
                Ok(())
            }
        }
    }

    fn record(&mut self, entry: JournalEntry) -> Result<(), Error> {
        self.apply(&entry)?;
        self.journal.push(entry);
        Ok(())
    }
}

/// Rough table sizes, for diagnostics and idempotence tests. Not a counted
/// access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub nodes: usize,
    pub links: usize,
    pub routes: usize,
    pub buses: usize,
    pub log_records: usize,
    pub name_conflicts: usize,
}

pub struct Store {
    tables: RwLock<Tables>,
    published: RwLock<Arc<EtaTable>>,
    counters: QueryCounters,
}

impl Default for Store {
    fn default() -> Self {
        Store::new(StoreConfig::default())
    }
}

impl Store {
    pub fn new(config: StoreConfig) -> Self {
        let counters = QueryCounters::new(config.instrumentation);
        Store {
            tables: RwLock::new(Tables::new(config)),
            published: RwLock::new(Arc::new(EtaTable::empty())),
            counters,
        }
    }

    /// Shared read access attributed to a load category.
    pub fn read(&self, cat: Category) -> ReadView<'_> {
        View {
            tables: self.tables.read(),
            store: self,
            cat,
        }
    }

    /// Exclusive write access attributed to a load category. Writes are
    /// serialized; readers always see a consistent snapshot.
    pub fn write(&self, cat: Category) -> WriteView<'_> {
        View {
            tables: self.tables.write(),
            store: self,
            cat,
        }
    }

    pub fn counters(&self) -> &QueryCounters {
        &self.counters
    }

    pub fn published_eta(&self) -> Arc<EtaTable> {
        self.published.read().clone()
    }

    /// Atomically swaps the published ETA table.
    pub fn publish_eta(&self, table: Arc<EtaTable>) {
        *self.published.write() = table;
    }

    pub fn stats(&self) -> StoreStats {
        let t = self.tables.read();
        StoreStats {
            nodes: t.nodes.len(),
            links: t.links.len(),
            routes: t.routes.len(),
            buses: t.buses.len(),
            log_records: t.bus_log.len(),
            name_conflicts: t.conflicts.len(),
        }
    }

    pub fn name_conflicts(&self) -> Vec<NameConflict> {
        self.tables.read().conflicts.clone()
    }

    /// Removes and returns all journal entries accumulated so far.
    pub fn drain_journal(&self) -> Vec<JournalEntry> {
        std::mem::take(&mut self.tables.write().journal)
    }

    pub fn journal_len(&self) -> usize {
        self.tables.read().journal.len()
    }

    /// Applies journaled mutations (without re-journaling them), e.g. when
    /// restoring state from a journal file on top of a snapshot.
    pub fn replay_journal(&self, entries: &[JournalEntry]) -> Result<(), Error> {
        let mut t = self.tables.write();
        for e in entries {
            t.apply(e)?;
        }
        Ok(())
    }

    /// Serializes the static model: NODES/LINKS/ROUTES/STOPS sections,
    /// tab-separated, coordinates at 6 decimal places, times in integer
    /// seconds. Export → import → export is byte-identical.
    pub fn export_snapshot(&self) -> String {
        self.counters.bump(Category::Admin);
        let t = self.tables.read();
        let mut out = String::new();
        out.push_str("NODES\n");
        for n in t.nodes.values() {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{}\t{}\n",
                n.id,
                n.position.lat,
                n.position.lon,
                n.kind.as_str(),
                name_field(&n.name)
            ));
        }
        out.push_str("LINKS\n");
        for l in t.links.values() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                l.id,
                l.start,
                l.end,
                l.travel_time_s.round() as i64
            ));
        }
        out.push_str("ROUTES\n");
        for r in t.routes.values() {
            let csv: Vec<String> = r.links.iter().map(|l| l.to_string()).collect();
            out.push_str(&format!("{}\t{}\n", r.id, csv.join(",")));
        }
        out.push_str("STOPS\n");
        for r in t.routes.values() {
            for s in &r.stops {
                out.push_str(&format!("{}\t{}\t{}\t{}\n", s.name, s.node, r.id, s.occ));
            }
        }
        out
    }

    /// Builds a store from a snapshot produced by [`export_snapshot`].
    pub fn import_snapshot(text: &str, config: StoreConfig) -> Result<Store, Error> {
        let store = Store::new(config);
        {
            let mut t = store.tables.write();
            let mut section = "";
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim_end_matches('\r');
                if line.is_empty() {
                    continue;
                }
                if matches!(line, "NODES" | "LINKS" | "ROUTES" | "STOPS") {
                    section = line;
                    continue;
                }
                let bad = |what: &str| {
                    Error::Parse(format!("snapshot line {}: {what}: {line:?}", lineno + 1))
                };
                let fields: Vec<&str> = line.split('\t').collect();
                match section {
                    "NODES" => {
                        if fields.len() != 5 {
                            return Err(bad("expected 5 node fields"));
                        }
                        let id = fields[0].parse::<u32>().map_err(|_| bad("node id"))?;
                        let lat = fields[1].parse::<f64>().map_err(|_| bad("lat"))?;
                        let lon = fields[2].parse::<f64>().map_err(|_| bad("lon"))?;
                        let kind = NodeKind::parse(fields[3])?;
                        let name = parse_name_field(fields[4]);
                        if kind != NodeKind::Plain && name.as_deref().unwrap_or("").is_empty() {
                            return Err(bad("stop/poi node without a name"));
                        }
                        t.apply_node_insert(Node {
                            id: NodeId(id),
                            position: GeoPoint::new(lat, lon)?,
                            name,
                            kind,
                        });
                    }
                    "LINKS" => {
                        if fields.len() != 4 {
                            return Err(bad("expected 4 link fields"));
                        }
                        let id = fields[0].parse::<u32>().map_err(|_| bad("link id"))?;
                        let start = fields[1].parse::<u32>().map_err(|_| bad("start node"))?;
                        let end = fields[2].parse::<u32>().map_err(|_| bad("end node"))?;
                        let tt = fields[3].parse::<f64>().map_err(|_| bad("travel time"))?;
                        if start == end {
                            return Err(bad("degenerate link"));
                        }
                        t.apply_link_insert(LinkId(id), NodeId(start), NodeId(end), tt)?;
                    }
                    "ROUTES" => {
                        if fields.len() != 2 {
                            return Err(bad("expected 2 route fields"));
                        }
                        let mut links = Vec::new();
                        for part in fields[1].split(',') {
                            links.push(LinkId(part.parse::<u32>().map_err(|_| bad("link id"))?));
                        }
                        t.apply_route_insert(fields[0], &links)?;
                    }
                    "STOPS" => {
                        if fields.len() != 4 {
                            return Err(bad("expected 4 stop fields"));
                        }
                        let node = fields[1].parse::<u32>().map_err(|_| bad("node id"))?;
                        let occ = fields[3].parse::<usize>().map_err(|_| bad("occurrence"))?;
                        let route = t
                            .routes
                            .get(fields[2])
                            .ok_or_else(|| bad("stop references unknown route"))?;
                        let derived = route
                            .stops
                            .get(occ)
                            .ok_or_else(|| bad("stop occurrence out of range"))?;
                        if derived.node.0 != node || derived.name != fields[0] {
                            return Err(bad("stop binding disagrees with route definition"));
                        }
                    }
                    _ => return Err(bad("line before any section header")),
                }
            }
        }
        Ok(store)
    }
}

pub struct View<'a, G> {
    tables: G,
    store: &'a Store,
    cat: Category,
}

pub type ReadView<'a> = View<'a, RwLockReadGuard<'a, Tables>>;
pub type WriteView<'a> = View<'a, RwLockWriteGuard<'a, Tables>>;

impl<'a, G: Deref<Target = Tables>> View<'a, G> {
    fn count(&self) {
        self.store.counters.bump(self.cat);
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, Error> {
        self.count();
        self.tables.nodes.get(&id).ok_or(Error::UnknownNode(id.0))
    }

    pub fn link(&self, id: LinkId) -> Result<&Link, Error> {
        self.count();
        self.tables.links.get(&id).ok_or(Error::UnknownLink(id.0))
    }

    /// Link row joined with endpoint positions, as one access.
    pub fn link_geometry(&self, id: LinkId) -> Result<LinkGeometry, Error> {
        self.count();
        let l = self.tables.links.get(&id).ok_or(Error::UnknownLink(id.0))?;
        Ok(LinkGeometry {
            id: l.id,
            start: l.start,
            end: l.end,
            start_pos: self.tables.nodes[&l.start].position,
            end_pos: self.tables.nodes[&l.end].position,
            length_m: l.length_m,
            travel_time_s: l.travel_time_s,
        })
    }

    pub fn route(&self, id: &str) -> Result<&Route, Error> {
        self.count();
        self.tables
            .routes
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("route {id}")))
    }

    pub fn route_ids(&self) -> Vec<RouteId> {
        self.count();
        self.tables.routes.keys().cloned().collect()
    }

    pub fn links_of(&self, route_id: &str) -> Result<Vec<Link>, Error> {
        self.count();
        let r = self
            .tables
            .routes
            .get(route_id)
            .ok_or_else(|| Error::NotFound(format!("route {route_id}")))?;
        Ok(r.links.iter().map(|l| self.tables.links[l].clone()).collect())
    }

    pub fn stops_of(&self, route_id: &str) -> Result<Vec<StopOccurrence>, Error> {
        self.count();
        let r = self
            .tables
            .routes
            .get(route_id)
            .ok_or_else(|| Error::NotFound(format!("route {route_id}")))?;
        Ok(r.stops.clone())
    }

    pub fn routes_through(&self, node: NodeId) -> Vec<RouteId> {
        self.count();
        self.tables
            .routes
            .values()
            .filter(|r| r.stops.iter().any(|s| s.node == node))
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn bus(&self, id: &str) -> Result<&BusIdentity, Error> {
        self.count();
        self.tables
            .buses
            .get(id)
            .ok_or_else(|| Error::UnknownBus(id.to_string()))
    }

    pub fn bus_state(&self, id: &str) -> Option<&BusState> {
        self.count();
        self.tables.bus_states.get(id)
    }

    pub fn buses_on_route(&self, route_id: &str) -> Vec<BusIdentity> {
        self.count();
        self.tables
            .buses
            .values()
            .filter(|b| b.route_id == route_id)
            .cloned()
            .collect()
    }

    pub fn bus_states_on_route(&self, route_id: &str) -> Vec<BusState> {
        self.count();
        let t = &self.tables;
        t.buses
            .values()
            .filter(|b| b.route_id == route_id)
            .filter_map(|b| t.bus_states.get(&b.bus_id).cloned())
            .collect()
    }

    /// Log records for one bus, oldest first, filtered to [from, to].
    pub fn log_for_bus(&self, bus_id: &str, from: f64, to: f64) -> Vec<LogRecord> {
        self.count();
        self.tables
            .bus_log
            .iter()
            .filter(|r| {
                r.state.bus_id == bus_id
                    && r.state.last_update_time >= from
                    && r.state.last_update_time <= to
            })
            .cloned()
            .collect()
    }

    pub fn log_for_route(&self, route_id: &str, from: f64, to: f64) -> Vec<LogRecord> {
        self.count();
        self.tables
            .bus_log
            .iter()
            .filter(|r| {
                r.route_id == route_id
                    && r.state.last_update_time >= from
                    && r.state.last_update_time <= to
            })
            .cloned()
            .collect()
    }

    /// Resolves a stop name to its node: exact match first, then
    /// case-insensitive; multiple distinct matches are ambiguous.
    pub fn resolve_stop(&self, name: &str) -> Result<NodeId, Error> {
        self.count();
        self.resolve_stop_inner(name)
    }

    fn resolve_stop_inner(&self, name: &str) -> Result<NodeId, Error> {
        let stops = |pred: &dyn Fn(&str) -> bool| -> Vec<NodeId> {
            self.tables
                .nodes
                .values()
                .filter(|n| n.kind == NodeKind::Stop)
                .filter(|n| n.name.as_deref().map(pred).unwrap_or(false))
                .map(|n| n.id)
                .collect()
        };
        let exact = stops(&|n| n == name);
        let matches = if exact.is_empty() {
            let lower = name.to_lowercase();
            stops(&|n| n.to_lowercase() == lower)
        } else {
            exact
        };
        match matches.len() {
            0 => Err(Error::UnknownStop(name.to_string())),
            1 => Ok(matches[0]),
            _ => Err(Error::AmbiguousStop(name.to_string())),
        }
    }

    /// The Stop-table fetch: all (route, occurrence) ETA rows for a stop in
    /// one store access, as a station unit or the SMS/web handlers use it.
    pub fn arrivals_for(
        &self,
        stop_name: &str,
        route_filter: Option<&str>,
    ) -> Result<Vec<ArrivalRow>, Error> {
        self.count();
        let node = self.resolve_stop_inner(stop_name)?;
        Ok(self.arrival_rows(node, route_filter))
    }

    /// Same fetch keyed by node id.
    pub fn arrivals_for_node(
        &self,
        node: NodeId,
        route_filter: Option<&str>,
    ) -> Result<Vec<ArrivalRow>, Error> {
        self.count();
        if !self.tables.nodes.contains_key(&node) {
            return Err(Error::UnknownNode(node.0));
        }
        Ok(self.arrival_rows(node, route_filter))
    }

    fn arrival_rows(&self, node: NodeId, route_filter: Option<&str>) -> Vec<ArrivalRow> {
        let published = self.store.published_eta();
        let mut rows = Vec::new();
        for r in self.tables.routes.values() {
            if route_filter.map(|f| f != r.id).unwrap_or(false) {
                continue;
            }
            for s in r.stops.iter().filter(|s| s.node == node) {
                let eta_s = published
                    .entries
                    .get(&(r.id.clone(), s.occ))
                    .map(|e| e.eta_s);
                rows.push(ArrivalRow {
                    route_id: r.id.clone(),
                    occ: s.occ,
                    leg: s.leg,
                    stop_name: s.name.clone(),
                    node: s.node,
                    eta_s,
                });
            }
        }
        rows
    }
}

impl<'a> WriteView<'a> {
    fn t(&mut self) -> &mut Tables {
        &mut self.tables
    }

    /// Inserts a node or reuses an existing one within the match threshold.
    /// Returns the node id and whether an existing node was reused. Reuse may
    /// upgrade a plain node to a stop/POI; it never renames a named node
    /// (that is recorded as a conflict instead).
    pub fn upsert_node(
        &mut self,
        position: GeoPoint,
        name: Option<&str>,
        kind: NodeKind,
    ) -> Result<(NodeId, bool), Error> {
        self.count();
        if let Some(n) = name {
            if n.is_empty() || n.contains(['\t', '\n']) {
                return Err(Error::Parse(format!("bad node name {n:?}")));
            }
        }
        if kind != NodeKind::Plain && name.is_none() {
            return Err(Error::Parse(format!(
                "{} node requires a name",
                kind.as_str()
            )));
        }
        let threshold = self.tables.config.node_match_threshold_m;
        if let Some((id, _)) = self.tables.nearest_node_within(position, threshold) {
            let existing_kind = self.tables.nodes[&id].kind;
            let existing_name = self.tables.nodes[&id].name.clone();
            let new_kind = existing_kind.max(kind);
            let mut new_name = existing_name.clone();
            match (&existing_name, name) {
                (None, Some(n)) => new_name = Some(n.to_string()),
                (Some(have), Some(want)) if have != want => {
                    self.t().conflicts.push(NameConflict {
                        node: id,
                        existing: have.clone(),
                        proposed: want.to_string(),
                    });
                }
                _ => {}
            }
            if new_kind != existing_kind || new_name != existing_name {
                self.t().record(JournalEntry::NodeMeta {
                    id,
                    kind: new_kind,
                    name: new_name,
                })?;
            }
            return Ok((id, true));
        }
        let id = NodeId(self.tables.next_node);
        self.t().record(JournalEntry::NodeInsert {
            id,
            lat: position.lat,
            lon: position.lon,
            kind,
            name: name.map(|s| s.to_string()),
        })?;
        Ok((id, false))
    }

    /// Inserts a link for the ordered node pair or returns the existing one.
    /// The travel time of an existing link is left untouched: it is shared
    /// across all routes that contain the link.
    pub fn upsert_link(
        &mut self,
        start: NodeId,
        end: NodeId,
        initial_travel_time_s: f64,
    ) -> Result<(LinkId, bool), Error> {
        self.count();
        if start == end {
            return Err(Error::DegenerateLink(start.0));
        }
        if !self.tables.nodes.contains_key(&start) {
            return Err(Error::UnknownNode(start.0));
        }
        if !self.tables.nodes.contains_key(&end) {
            return Err(Error::UnknownNode(end.0));
        }
        if let Some(&id) = self.tables.link_by_pair.get(&(start, end)) {
            return Ok((id, true));
        }
        if !(initial_travel_time_s > 0.0) {
            return Err(Error::Parse(format!(
                "travel time must be positive, got {initial_travel_time_s}"
            )));
        }
        let id = LinkId(self.tables.next_link);
        self.t().record(JournalEntry::LinkInsert {
            id,
            start,
            end,
            travel_time_s: initial_travel_time_s,
        })?;
        Ok((id, false))
    }

    /// Writes or replaces a route definition (validating chain and closure).
    pub fn insert_route(&mut self, id: &str, links: &[LinkId]) -> Result<(), Error> {
        self.count();
        self.t().record(JournalEntry::RouteInsert {
            id: id.to_string(),
            links: links.to_vec(),
        })
    }

    pub fn delete_route(&mut self, id: &str) -> Result<bool, Error> {
        self.count();
        if !self.tables.routes.contains_key(id) {
            return Ok(false);
        }
        self.t().record(JournalEntry::RouteDelete { id: id.to_string() })?;
        Ok(true)
    }

    /// Atomic read-modify-write of a link's shared travel-time estimate.
    pub fn set_link_travel_time(&mut self, id: LinkId, travel_time_s: f64) -> Result<(), Error> {
        self.count();
        self.t().record(JournalEntry::LinkTravelTime { id, travel_time_s })
    }

    pub fn register_bus(&mut self, identity: BusIdentity) -> Result<(), Error> {
        self.count();
        if identity.bus_id.is_empty() || identity.bus_id.contains(['\t', '\n']) {
            return Err(Error::Parse(format!("bad bus id {:?}", identity.bus_id)));
        }
        self.t().record(JournalEntry::BusRegister {
            id: identity.bus_id.clone(),
            bus_type: identity.bus_type.clone(),
            route_id: identity.route_id.clone(),
        })
    }

    pub fn put_bus_state(&mut self, state: BusState) {
        self.count();
        self.t().bus_states.insert(state.bus_id.clone(), state);
    }

    /// Appends the accepted-update copy to the position log.
    pub fn append_log(&mut self, route_id: &str, state: BusState) {
        self.count();
        let seq = self.tables.log_seq;
        self.t().log_seq += 1;
        self.t().bus_log.push(LogRecord {
            seq,
            route_id: route_id.to_string(),
            state,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::offset;

    fn base() -> GeoPoint {
        GeoPoint::new(12.9, 77.5).unwrap()
    }

    /// Square circuit: A(stop) -> B -> C(stop) -> D -> A, 600 m sides.
    fn square_store() -> (Store, Vec<NodeId>, Vec<LinkId>) {
        let store = Store::default();
        let mut v = store.write(Category::Admin);
        let a = base();
        let pts = [
            (a, Some("Alpha"), NodeKind::Stop),
            (offset(a, 0.0, 600.0), None, NodeKind::Plain),
            (offset(a, 600.0, 600.0), Some("Charlie"), NodeKind::Stop),
            (offset(a, 600.0, 0.0), None, NodeKind::Plain),
        ];
        let mut nodes = Vec::new();
        for (p, name, kind) in pts {
            nodes.push(v.upsert_node(p, name, kind).unwrap().0);
        }
        let mut links = Vec::new();
        for i in 0..4 {
            let (l, _) = v
                .upsert_link(nodes[i], nodes[(i + 1) % 4], 60.0)
                .unwrap();
            links.push(l);
        }
        v.insert_route("R1", &links).unwrap();
        drop(v);
        (store, nodes, links)
    }

    #[test]
    fn upsert_node_reuses_within_threshold() {
        let store = Store::default();
        let mut v = store.write(Category::Admin);
        let p = base();
        let (id, reused) = v.upsert_node(p, None, NodeKind::Plain).unwrap();
        assert!(!reused);
        // Same point: reused, store unchanged.
        let (id2, reused2) = v.upsert_node(p, None, NodeKind::Plain).unwrap();
        assert_eq!(id, id2);
        assert!(reused2);
        // 24 m away: still the same node.
        let (id3, reused3) = v
            .upsert_node(offset(p, 24.0, 0.0), None, NodeKind::Plain)
            .unwrap();
        assert_eq!(id, id3);
        assert!(reused3);
        // 30 m away: a new node.
        let (id4, reused4) = v
            .upsert_node(offset(p, 30.0, 0.0), None, NodeKind::Plain)
            .unwrap();
        assert_ne!(id, id4);
        assert!(!reused4);
        drop(v);
        assert_eq!(store.stats().nodes, 2);
    }

    #[test]
    fn node_reuse_upgrades_kind_but_keeps_name() {
        let store = Store::default();
        let mut v = store.write(Category::Admin);
        let p = base();
        let (id, _) = v.upsert_node(p, None, NodeKind::Plain).unwrap();
        let (id2, _) = v
            .upsert_node(offset(p, 5.0, 0.0), Some("Depot"), NodeKind::Stop)
            .unwrap();
        assert_eq!(id, id2);
        assert_eq!(v.node(id).unwrap().kind, NodeKind::Stop);
        assert_eq!(v.node(id).unwrap().name.as_deref(), Some("Depot"));
        // A different name near the same node is a conflict, not a rename.
        let (id3, _) = v
            .upsert_node(offset(p, 3.0, 0.0), Some("Yard"), NodeKind::Stop)
            .unwrap();
        assert_eq!(id, id3);
        assert_eq!(v.node(id).unwrap().name.as_deref(), Some("Depot"));
        drop(v);
        let conflicts = store.name_conflicts();
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].proposed, "Yard");
    }

    #[test]
    fn links_are_directional_and_reused() {
        let store = Store::default();
        let mut v = store.write(Category::Admin);
        let a = v.upsert_node(base(), None, NodeKind::Plain).unwrap().0;
        let b = v
            .upsert_node(offset(base(), 0.0, 500.0), None, NodeKind::Plain)
            .unwrap()
            .0;
        let (ab, ab_reused) = v.upsert_link(a, b, 50.0).unwrap();
        assert!(!ab_reused);
        let (ab2, reused) = v.upsert_link(a, b, 99.0).unwrap();
        assert_eq!(ab, ab2);
        assert!(reused);
        // Reuse must not overwrite the shared travel time.
        assert_eq!(v.link(ab).unwrap().travel_time_s, 50.0);
        let (ba, _) = v.upsert_link(b, a, 50.0).unwrap();
        assert_ne!(ab, ba);
        assert!(matches!(
            v.upsert_link(a, NodeId(999), 10.0),
            Err(Error::UnknownNode(999))
        ));
        assert!(matches!(v.upsert_link(a, a, 10.0), Err(Error::DegenerateLink(_))));
    }

    #[test]
    fn route_validation_rejects_broken_circuits() {
        let store = Store::default();
        let mut v = store.write(Category::Admin);
        let a = v.upsert_node(base(), None, NodeKind::Plain).unwrap().0;
        let b = v
            .upsert_node(offset(base(), 0.0, 500.0), None, NodeKind::Plain)
            .unwrap()
            .0;
        let c = v
            .upsert_node(offset(base(), 500.0, 500.0), None, NodeKind::Plain)
            .unwrap()
            .0;
        let (ab, _) = v.upsert_link(a, b, 50.0).unwrap();
        let (bc, _) = v.upsert_link(b, c, 50.0).unwrap();
        let (ca, _) = v.upsert_link(c, a, 50.0).unwrap();
        // Not closed.
        assert!(matches!(
            v.insert_route("X", &[ab, bc]),
            Err(Error::InvalidRoute(_, _))
        ));
        // Does not chain.
        assert!(matches!(
            v.insert_route("X", &[ab, ca]),
            Err(Error::InvalidRoute(_, _))
        ));
        // Too short.
        assert!(matches!(
            v.insert_route("X", &[ab]),
            Err(Error::InvalidRoute(_, _))
        ));
        v.insert_route("X", &[ab, bc, ca]).unwrap();
    }

    #[test]
    fn stops_in_circuit_order_and_terminus() {
        let (store, nodes, _) = square_store();
        let v = store.read(Category::Admin);
        let stops = v.stops_of("R1").unwrap();
        assert_eq!(stops.len(), 2);
        assert_eq!(stops[0].name, "Alpha");
        assert_eq!(stops[0].arc_m, 0.0);
        assert_eq!(stops[0].node, nodes[0]);
        assert_eq!(stops[1].name, "Charlie");
        assert_eq!(stops[1].link_index, 1);
        // Charlie sits half way around: it is the terminus, so links 2..3 are
        // the return leg and the start stop is recorded on the return leg.
        let r = v.route("R1").unwrap();
        assert_eq!(r.terminus_link, Some(1));
        assert_eq!(stops[1].leg, Direction::Onward);
        assert_eq!(stops[0].leg, Direction::Return);
    }

    #[test]
    fn routes_through_returns_all_routes() {
        let (store, nodes, links) = square_store();
        let mut v = store.write(Category::Admin);
        // Second route sharing the Alpha stop, opposite direction.
        let mut rev = Vec::new();
        for i in (0..4).rev() {
            let l = v
                .upsert_link(nodes[(i + 1) % 4], nodes[i], 60.0)
                .unwrap()
                .0;
            rev.push(l);
        }
        v.insert_route("R2", &rev).unwrap();
        assert!(!rev.iter().any(|l| links.contains(l)));
        let mut through = v.routes_through(nodes[0]);
        through.sort();
        assert_eq!(through, vec!["R1".to_string(), "R2".to_string()]);
        assert!(matches!(v.route("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn counters_attribute_accesses() {
        let (store, _, links) = square_store();
        let before = store.counters().snapshot();
        let v = store.read(Category::LinkUpdater);
        v.link_geometry(links[0]).unwrap();
        drop(v);
        let v = store.read(Category::Station);
        let _ = v.arrivals_for("Alpha", None);
        drop(v);
        let delta = store.counters().snapshot().since(&before);
        assert_eq!(delta.link_updater, 1);
        assert_eq!(delta.station, 1);
        assert_eq!(delta.eta_calculator, 0);
    }

    #[test]
    fn snapshot_round_trip_is_lossless() {
        let (store, _, _) = square_store();
        let snap = store.export_snapshot();
        let restored = Store::import_snapshot(&snap, StoreConfig::default()).unwrap();
        assert_eq!(restored.export_snapshot(), snap);
    }

    #[test]
    fn journal_replay_reproduces_snapshot() {
        let (store, _, links) = square_store();
        {
            let mut v = store.write(Category::LinkUpdater);
            v.set_link_travel_time(links[0], 72.5).unwrap();
        }
        let journal = store.drain_journal();
        let fresh = Store::default();
        fresh.replay_journal(&journal).unwrap();
        assert_eq!(fresh.export_snapshot(), store.export_snapshot());
        // Journal lines round-trip through the text codec too.
        for entry in &journal {
            let line = entry.to_line();
            assert_eq!(&JournalEntry::parse_line(&line).unwrap(), entry);
        }
    }

    #[test]
    fn resolve_stop_matches_exact_then_case_insensitive() {
        let (store, _, _) = square_store();
        let v = store.read(Category::SmsWeb);
        let id = v.resolve_stop("Alpha").unwrap();
        assert_eq!(v.resolve_stop("alpha").unwrap(), id);
        assert!(matches!(
            v.resolve_stop("Atlantis"),
            Err(Error::UnknownStop(_))
        ));
    }

    #[test]
    fn ambiguous_stop_names_are_rejected() {
        let (store, _, _) = square_store();
        let mut v = store.write(Category::Admin);
        // A second, distant "Alpha".
        let far = offset(base(), 5000.0, 5000.0);
        v.upsert_node(far, Some("Alpha"), NodeKind::Stop).unwrap();
        assert!(matches!(
            v.resolve_stop("Alpha"),
            Err(Error::AmbiguousStop(_))
        ));
    }
}
