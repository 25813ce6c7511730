//! Ground-truth world: targets circulating on closed loops and the binary
//! limited field-of-view sensor.
//!
//! Mission time equals agent path length (the agent moves at unit speed), so
//! a target with speed ratio `r_v` covers `r_v * d` of its loop while the agent
//! travels `d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Point;
use crate::tsp;
use crate::Error;

fn default_domain_size() -> f64 {
    1.0
}
fn default_sensor_radius() -> f64 {
    0.1
}
fn default_spacing() -> f64 {
    0.1
}
fn default_loop_nodes() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(default = "default_domain_size")]
    pub domain_size: f64,
    #[serde(default = "default_sensor_radius")]
    pub sensor_radius: f64,
    pub speed_ratio: f64,
    pub num_targets: usize,
    #[serde(default = "default_spacing")]
    pub measurement_spacing: f64,
    /// Random points per target loop before touring them.
    #[serde(default = "default_loop_nodes")]
    pub loop_nodes: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(num_targets: usize, speed_ratio: f64, seed: u64) -> Self {
        Self {
            domain_size: default_domain_size(),
            sensor_radius: default_sensor_radius(),
            speed_ratio,
            num_targets,
            measurement_spacing: default_spacing(),
            loop_nodes: default_loop_nodes(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.domain_size != 1.0 {
            return bad(format!("domain_size must be 1.0, got {}", self.domain_size));
        }
        if !(self.sensor_radius > 0.0) {
            return bad(format!("sensor_radius must be > 0, got {}", self.sensor_radius));
        }
        if !(0.0..1.0).contains(&self.speed_ratio) {
            return bad(format!("speed_ratio must be in [0, 1), got {}", self.speed_ratio));
        }
        if self.num_targets == 0 {
            return bad("num_targets must be >= 1".into());
        }
        if !(self.measurement_spacing > 0.0) {
            return bad(format!(
                "measurement_spacing must be > 0, got {}",
                self.measurement_spacing
            ));
        }
        if self.loop_nodes < 2 {
            return bad("loop_nodes must be >= 2".into());
        }
        Ok(())
    }
}

/// A target moving at constant speed along a closed polygonal loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTrack {
    loop_points: Vec<Point>,
    /// `cumulative[j]` is the arc length from point 0 to point j; last entry is the perimeter.
    cumulative: Vec<f64>,
    arc_position: f64,
    speed: f64,
}

impl TargetTrack {
    /// Panics if fewer than two points are given or they are all identical.
    pub fn new(loop_points: Vec<Point>, arc_position: f64, speed: f64) -> Self {
        assert!(loop_points.len() >= 2, "a loop needs at least two points");
        let mut cumulative = Vec::with_capacity(loop_points.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for (a, b) in loop_points.iter().zip(loop_points.iter().cycle().skip(1)) {
            acc += a.dist(*b);
            cumulative.push(acc);
        }
        assert!(acc > 0.0, "degenerate loop");
        let mut track = Self {
            loop_points,
            cumulative,
            arc_position: 0.0,
            speed,
        };
        track.arc_position = arc_position.rem_euclid(track.perimeter());
        track
    }

    pub fn loop_points(&self) -> &[Point] {
        &self.loop_points
    }

    pub fn perimeter(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn arc_position(&self) -> f64 {
        self.arc_position
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn set_speed(&mut self, speed: f64) {
        self.speed = speed;
    }

    pub fn position(&self) -> Point {
        self.position_at_arc(self.arc_position)
    }

    pub fn position_at_arc(&self, arc: f64) -> Point {
        let arc = arc.rem_euclid(self.perimeter());
        // Segment j spans cumulative[j]..cumulative[j+1].
        let j = match self
            .cumulative
            .binary_search_by(|c| c.total_cmp(&arc))
        {
            Ok(j) => j.min(self.loop_points.len() - 1),
            Err(j) => j - 1,
        };
        let a = self.loop_points[j];
        let b = self.loop_points[(j + 1) % self.loop_points.len()];
        let len = self.cumulative[j + 1] - self.cumulative[j];
        if len <= 0.0 {
            return a;
        }
        a.lerp(b, (arc - self.cumulative[j]) / len)
    }

    /// Moves the target by `speed * agent_distance` along its loop.
    pub fn advance(&mut self, agent_distance: f64) {
        debug_assert!(agent_distance >= 0.0);
        self.arc_position = (self.arc_position + self.speed * agent_distance).rem_euclid(self.perimeter());
    }
}

/// Perturbs exact duplicates by 1e-9 so every tour edge has positive length.
fn dedupe_points(points: &mut [Point]) {
    for i in 1..points.len() {
        while points[..i].iter().any(|p| *p == points[i]) {
            let p = points[i];
            // Nudge toward the centre so the point stays inside the domain.
            points[i] = Point::new(
                p.x + if p.x < 0.5 { 1e-9 } else { -1e-9 },
                p.y + if p.y < 0.5 { 1e-9 } else { -1e-9 },
            );
        }
    }
}

/// One closed loop per target: a 2-opt-improved tour over uniform random
/// points, with the starting arc position drawn uniformly along it.
pub fn generate_tracks<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Vec<TargetTrack> {
    (0..config.num_targets)
        .map(|_| {
            let mut points: Vec<Point> = (0..config.loop_nodes)
                .map(|_| Point::new(rng.gen::<f64>(), rng.gen::<f64>()))
                .collect();
            dedupe_points(&mut points);
            let tour = tsp::solve_tour(&points, 0);
            let loop_points: Vec<Point> = tour.iter().map(|&i| points[i]).collect();
            let perimeter = tsp::tour_length(&points, &tour);
            let arc = rng.gen::<f64>() * perimeter;
            TargetTrack::new(loop_points, arc, config.speed_ratio)
        })
        .collect()
}

pub fn advance_targets(tracks: &mut [TargetTrack], agent_distance: f64) {
    for t in tracks {
        t.advance(agent_distance);
    }
}

/// A location in space-time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestampedLocation {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl TimestampedLocation {
    pub const fn new(x: f64, y: f64, t: f64) -> Self {
        Self { x, y, t }
    }

    pub fn at(p: Point, t: f64) -> Self {
        Self::new(p.x, p.y, t)
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// One binary detection for one target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub target: usize,
    pub location: TimestampedLocation,
    pub detected: bool,
}

impl Measurement {
    pub fn value(&self) -> f64 {
        if self.detected {
            1.0
        } else {
            0.0
        }
    }
}

/// Per-target history of measurements in arrival order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    per_target: Vec<Vec<Measurement>>,
}

impl MeasurementSet {
    pub fn new(num_targets: usize) -> Self {
        Self {
            per_target: vec![Vec::new(); num_targets],
        }
    }

    pub fn push(&mut self, m: Measurement) {
        if m.target >= self.per_target.len() {
            self.per_target.resize(m.target + 1, Vec::new());
        }
        self.per_target[m.target].push(m);
    }

    pub fn extend(&mut self, ms: impl IntoIterator<Item = Measurement>) {
        for m in ms {
            self.push(m);
        }
    }

    pub fn target(&self, i: usize) -> &[Measurement] {
        &self.per_target[i]
    }

    pub fn num_targets(&self) -> usize {
        self.per_target.len()
    }

    pub fn detections(&self, i: usize) -> usize {
        self.per_target[i].iter().filter(|m| m.detected).count()
    }

    pub fn len(&self) -> usize {
        self.per_target.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads the sensor: one entry per target. A target within `radius` of the
/// agent yields a detection at the target's own position; otherwise a
/// non-detection is recorded at the agent's position.
pub fn sense(agent: Point, time: f64, tracks: &[TargetTrack], radius: f64) -> Vec<Measurement> {
    tracks
        .iter()
        .enumerate()
        .map(|(i, track)| {
            let y = track.position();
            if y.dist(agent) <= radius {
                Measurement {
                    target: i,
                    location: TimestampedLocation::at(y, time),
                    detected: true,
                }
            } else {
                Measurement {
                    target: i,
                    location: TimestampedLocation::at(agent, time),
                    detected: false,
                }
            }
        })
        .collect()
}

/// Tracks path length and emits a sense event every `spacing` of travel,
/// carrying the remainder across segments so the cadence is global.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SenseCadence {
    spacing: f64,
    travelled: f64,
    emitted: u64,
}

/// Slack for deciding that a segment end lands exactly on a sense point.
const CADENCE_SLACK: f64 = 1e-9;

impl SenseCadence {
    pub fn new(spacing: f64) -> Self {
        assert!(spacing > 0.0);
        Self {
            spacing,
            travelled: 0.0,
            emitted: 0,
        }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Total path length so far.
    pub fn travelled(&self) -> f64 {
        self.travelled
    }

    pub fn events_emitted(&self) -> u64 {
        self.emitted
    }

    /// Distance travelled since the last sense event.
    pub fn carry(&self) -> f64 {
        (self.travelled - self.emitted as f64 * self.spacing).max(0.0)
    }

    /// Advances by a segment of `length`; returns the offsets along the
    /// segment (from its start) at which sense events fire.
    pub fn advance(&mut self, length: f64) -> Vec<f64> {
        debug_assert!(length >= 0.0);
        let start = self.travelled;
        let end = start + length;
        let mut offsets = Vec::new();
        loop {
            let next = (self.emitted + 1) as f64 * self.spacing;
            if next > end + CADENCE_SLACK {
                break;
            }
            offsets.push((next - start).clamp(0.0, length));
            self.emitted += 1;
        }
        self.travelled = end;
        offsets
    }

    /// Mission time of the `k`-th sense event (1-based).
    pub fn event_time(&self, k: u64) -> f64 {
        k as f64 * self.spacing
    }
}

/// A sense event produced while traversing one straight segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseEvent {
    pub position: Point,
    pub time: f64,
    pub measurements: Vec<Measurement>,
    /// True target positions at the event.
    pub target_positions: Vec<Point>,
}

/// Moves the agent straight from `from` to `to`, advancing the targets
/// continuously and sensing at every cadence point.
pub fn step_along_edge(
    from: Point,
    to: Point,
    cadence: &mut SenseCadence,
    tracks: &mut [TargetTrack],
    radius: f64,
) -> Vec<SenseEvent> {
    let length = from.dist(to);
    let start_time = cadence.travelled();
    let first_event = cadence.events_emitted() + 1;
    let offsets = cadence.advance(length);
    let mut moved = 0.0;
    let mut events = Vec::with_capacity(offsets.len());
    for (n, offset) in offsets.into_iter().enumerate() {
        advance_targets(tracks, offset - moved);
        moved = offset;
        let position = if length > 0.0 {
            from.lerp(to, offset / length)
        } else {
            to
        };
        let time = cadence.event_time(first_event + n as u64);
        debug_assert!((time - (start_time + offset)).abs() < 1e-6);
        events.push(SenseEvent {
            position,
            time,
            measurements: sense(position, time, tracks, radius),
            target_positions: tracks.iter().map(TargetTrack::position).collect(),
        });
    }
    advance_targets(tracks, length - moved);
    events
}

/// Explicit target loop in a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub loop_points: Vec<Point>,
    pub arc_position: f64,
}

/// A deterministic evaluation scenario.
///
/// JSON schema:
///
/// ```json
/// {
///   "seed": 7,
///   "env": { "speed_ratio": 0.1, "num_targets": 4, "seed": 7,
///            "sensor_radius": 0.1, "measurement_spacing": 0.1,
///            "domain_size": 1.0, "loop_nodes": 50 },
///   "tracks": [ { "loop_points": [ {"x": 0.1, "y": 0.2}, ... ], "arc_position": 0.0 } ],
///   "roadmap_nodes": 200,
///   "roadmap_k": 10
/// }
/// ```
///
/// `tracks` is optional; when absent the loops are regenerated from `env.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub env: EnvConfig,
    #[serde(default)]
    pub tracks: Option<Vec<TrackSpec>>,
    #[serde(default = "default_roadmap_nodes")]
    pub roadmap_nodes: usize,
    #[serde(default = "default_roadmap_k")]
    pub roadmap_k: usize,
}

fn default_roadmap_nodes() -> usize {
    200
}
fn default_roadmap_k() -> usize {
    10
}

impl Scenario {
    /// Builds a scenario with its loops generated and written out explicitly.
    pub fn generate(env: EnvConfig, roadmap_nodes: usize, roadmap_k: usize) -> Result<Self, Error> {
        env.validate()?;
        let mut rng = crate::rng::stream_rng(env.seed, crate::rng::Stream::Tracks);
        let tracks = generate_tracks(&env, &mut rng)
            .into_iter()
            .map(|t| TrackSpec {
                loop_points: t.loop_points().to_vec(),
                arc_position: t.arc_position(),
            })
            .collect();
        Ok(Self {
            seed: env.seed,
            env,
            tracks: Some(tracks),
            roadmap_nodes,
            roadmap_k,
        })
    }

    pub fn build_tracks(&self) -> Result<Vec<TargetTrack>, Error> {
        self.env.validate()?;
        match &self.tracks {
            Some(specs) => {
                if specs.len() != self.env.num_targets {
                    return Err(Error::Config(format!(
                        "scenario lists {} tracks for {} targets",
                        specs.len(),
                        self.env.num_targets
                    )));
                }
                specs
                    .iter()
                    .map(|s| {
                        if s.loop_points.len() < 2 || !s.loop_points.iter().all(|p| p.in_unit_square()) {
                            return Err(Error::Config("track loop must have >= 2 points inside [0,1]^2".into()));
                        }
                        Ok(TargetTrack::new(s.loop_points.clone(), s.arc_position, self.env.speed_ratio))
                    })
                    .collect()
            }
            None => {
                let mut rng = crate::rng::stream_rng(self.env.seed, crate::rng::Stream::Tracks);
                Ok(generate_tracks(&self.env, &mut rng))
            }
        }
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn cfg(n: usize, rv: f64) -> EnvConfig {
        EnvConfig::new(n, rv, 3)
    }

    #[test]
    fn single_track_has_fifty_points() {
        let tracks = generate_tracks(&cfg(1, 0.1), &mut stream_rng(3, Stream::Tracks));
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].loop_points().len(), 50);
        assert!(tracks[0].perimeter() > 0.0);
    }

    #[test]
    fn full_perimeter_returns_to_start() {
        let mut tracks = generate_tracks(&cfg(3, 1.0 / 3.0), &mut stream_rng(5, Stream::Tracks));
        for t in &mut tracks {
            t.set_speed(1.0);
            let p0 = t.position();
            t.advance(t.perimeter());
            assert!(t.position().dist(p0) < 1e-9);
        }
    }

    #[test]
    fn zero_speed_and_full_loop_keep_position() {
        let mut tracks = generate_tracks(&cfg(2, 0.0), &mut stream_rng(8, Stream::Tracks));
        let before: Vec<_> = tracks.iter().map(TargetTrack::position).collect();
        advance_targets(&mut tracks, 12.3);
        for (t, p) in tracks.iter().zip(&before) {
            assert_eq!(t.position(), *p);
        }

        let mut t = generate_tracks(&cfg(1, 0.25), &mut stream_rng(9, Stream::Tracks)).remove(0);
        let p0 = t.position();
        let d = t.perimeter() / 0.25;
        t.advance(d);
        assert!(t.position().dist(p0) < 1e-9);
    }

    #[test]
    fn arc_advance_is_speed_times_distance() {
        let pts = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0), Point::new(0.0, 1.0)];
        let mut t = TargetTrack::new(pts, 0.0, 0.1);
        t.advance(1.0);
        assert!((t.arc_position() - 0.1).abs() < 1e-15);
        assert!(t.position().dist(Point::new(0.1, 0.0)) < 1e-15);
    }

    #[test]
    fn sensor_boundary() {
        let pts = vec![Point::new(0.5, 0.5), Point::new(0.9, 0.5)];
        let t = TargetTrack::new(pts, 0.0, 0.0);
        let on = sense(Point::new(0.5, 0.5), 1.0, std::slice::from_ref(&t), 0.1);
        assert!(on[0].detected);
        assert_eq!(on[0].location, TimestampedLocation::new(0.5, 0.5, 1.0));
        let agent = Point::new(0.5, 0.6 + 1e-9);
        let off = sense(agent, 1.0, std::slice::from_ref(&t), 0.1);
        assert!(!off[0].detected);
        assert_eq!(off[0].location.point(), agent);
    }

    #[test]
    fn three_targets_one_in_view() {
        let mk = |x: f64| TargetTrack::new(vec![Point::new(x, 0.5), Point::new(x, 0.9)], 0.0, 0.0);
        let tracks = vec![mk(0.1), mk(0.5), mk(0.9)];
        let ms = sense(Point::new(0.52, 0.5), 0.3, &tracks, 0.1);
        assert_eq!(ms.len(), 3);
        assert_eq!(ms.iter().filter(|m| m.detected).count(), 1);
        assert!(ms[1].detected);
    }

    #[test]
    fn cadence_carries_over() {
        let mut c = SenseCadence::new(0.1);
        let offs = c.advance(0.25);
        assert_eq!(offs.len(), 2);
        assert!((offs[0] - 0.1).abs() < 1e-12 && (offs[1] - 0.2).abs() < 1e-12);
        assert!((c.carry() - 0.05).abs() < 1e-12);
        assert!(c.advance(0.0).is_empty());
        let offs = c.advance(0.05);
        assert_eq!(offs.len(), 1);
        assert!(offs[0].abs() < 1e-9 || (offs[0] - 0.05).abs() < 1e-9);
    }

    #[test]
    fn thirty_units_of_path_gives_three_hundred_events() {
        let mut c = SenseCadence::new(0.1);
        let mut n = 0;
        let mut rng = stream_rng(1, Stream::Planner);
        let mut total = 0.0;
        while total < 30.0 {
            let seg = (rng.gen::<f64>() * 0.37).min(30.0 - total);
            total += seg;
            n += c.advance(seg).len();
        }
        assert_eq!(n, 300);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = cfg(2, 0.1);
        c.speed_ratio = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(0, 0.1);
        c.num_targets = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(2, 0.1);
        c.sensor_radius = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn scenario_roundtrip_rebuilds_tracks() {
        let s = Scenario::generate(cfg(3, 0.05), 120, 10).unwrap();
        let back = Scenario::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let a = s.build_tracks().unwrap();
        let b = back.build_tracks().unwrap();
        assert_eq!(a, b);
        let implicit = Scenario { tracks: None, ..s.clone() }.build_tracks().unwrap();
        for (x, y) in a.iter().zip(&implicit) {
            assert_eq!(x.loop_points(), y.loop_points());
        }
    }
}
