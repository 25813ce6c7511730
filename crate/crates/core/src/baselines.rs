//! Non-learned planners: the boustrophedon lawnmower, the TSP-loop tracker
//! and a uniform random walk on the roadmap.

use rand::Rng;

use crate::env::Measurement;
use crate::geom::Point;
use crate::mission::Mission;
use crate::roadmap::Roadmap;
use crate::tsp;
use crate::Error;

/// Vertical lanes spaced one sensor diameter apart, inset one radius from
/// the side walls and spanning the full height. Returns one sweep; the
/// sweep is flown forward then backward, repeatedly.
pub fn lawnmower_plan(sensor_radius: f64) -> Vec<Point> {
    let spacing = 2.0 * sensor_radius;
    let lanes = ((1.0 - 2.0 * sensor_radius) / spacing + 1e-9).floor() as usize + 1;
    let mut path = Vec::with_capacity(2 * lanes);
    for lane in 0..lanes {
        let x = sensor_radius + lane as f64 * spacing;
        let (a, b) = if lane % 2 == 0 { (0.0, 1.0) } else { (1.0, 0.0) };
        path.push(Point::new(x, a));
        path.push(Point::new(x, b));
    }
    path
}

/// Flies the lawnmower sweep until the horizon.
pub fn run_lawnmower(mission: &mut Mission) -> Result<(), Error> {
    let sweep = lawnmower_plan(mission.sensor_radius());
    let mut forward = true;
    while !mission.done() {
        let legs: Vec<Point> = if forward {
            sweep.clone()
        } else {
            sweep.iter().rev().copied().collect()
        };
        for p in legs {
            mission.travel_to(p)?;
            mission.arrival_reward();
            if mission.done() {
                break;
            }
        }
        forward = !forward;
    }
    Ok(())
}

/// Start of the lawnmower sweep.
pub fn lawnmower_start(sensor_radius: f64) -> Point {
    lawnmower_plan(sensor_radius)[0]
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Sighting {
    position: Point,
    time: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct TrackedTarget {
    last: Sighting,
    previous: Option<Sighting>,
}

impl TrackedTarget {
    fn heading(&self) -> Option<Point> {
        let prev = self.previous?;
        let dx = self.last.position.x - prev.position.x;
        let dy = self.last.position.y - prev.position.y;
        let norm = dx.hypot(dy);
        (norm > 0.0).then(|| Point::new(dx / norm, dy / norm))
    }
}

/// State of the TSP-loop tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct TspLoopState {
    targets: Vec<TrackedTarget>,
    speed_ratio: f64,
    /// Remaining stops of the current loop, next stop first.
    order: Vec<usize>,
    arrival_tolerance: f64,
}

impl TspLoopState {
    /// Starts from known initial positions.
    pub fn new(initial: &[Point], speed_ratio: f64, arrival_tolerance: f64, agent: Point) -> Self {
        let targets = initial
            .iter()
            .map(|&p| TrackedTarget {
                last: Sighting { position: p, time: 0.0 },
                previous: None,
            })
            .collect();
        let mut state = Self {
            targets,
            speed_ratio,
            order: Vec::new(),
            arrival_tolerance,
        };
        state.start_loop(agent, 0.0);
        state
    }

    /// Last-seen position extrapolated along the last-seen heading.
    pub fn predict(&self, target: usize, time: f64) -> Point {
        let t = &self.targets[target];
        match t.heading() {
            None => t.last.position,
            Some(h) => {
                let d = self.speed_ratio * (time - t.last.time);
                Point::new(t.last.position.x + h.x * d, t.last.position.y + h.y * d).clamp_unit()
            }
        }
    }

    pub fn heading(&self, target: usize) -> Option<Point> {
        self.targets[target].heading()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Tour over `stops` from the agent, depot excluded from the result.
    fn solve(&self, stops: &[usize], agent: Point, time: f64) -> Vec<usize> {
        let mut points = vec![agent];
        points.extend(stops.iter().map(|&i| self.predict(i, time)));
        tsp::solve_tour(&points, 0)
            .into_iter()
            .skip(1)
            .map(|k| stops[k - 1])
            .collect()
    }

    fn start_loop(&mut self, agent: Point, time: f64) {
        let all: Vec<usize> = (0..self.targets.len()).collect();
        self.order = self.solve(&all, agent, time);
    }

    /// Feeds sensor readings; every detected target counts as visited for
    /// this loop and the remaining stops are re-toured.
    pub fn observe(&mut self, measurements: &[Measurement], agent: Point, time: f64) {
        let mut seen = false;
        for m in measurements.iter().filter(|m| m.detected) {
            let t = &mut self.targets[m.target];
            let s = Sighting {
                position: m.location.point(),
                time: m.location.t,
            };
            if s.position != t.last.position {
                t.previous = Some(t.last);
            }
            t.last = s;
            self.order.retain(|&i| i != m.target);
            seen = true;
        }
        if seen {
            if self.order.is_empty() {
                self.start_loop(agent, time);
            } else {
                let rest = self.order.clone();
                self.order = self.solve(&rest, agent, time);
            }
        }
    }

    /// Next goal. Stops whose prediction is already within the arrival
    /// tolerance were reached without a sighting and are skipped. `None`
    /// when every stop of a fresh loop is that close.
    pub fn next_waypoint(&mut self, agent: Point, time: f64) -> Option<Point> {
        let mut fresh_loop = false;
        loop {
            if self.order.is_empty() {
                if fresh_loop {
                    return None;
                }
                self.start_loop(agent, time);
                fresh_loop = true;
            }
            let goal = self.predict(self.order[0], time);
            if agent.dist(goal) > self.arrival_tolerance {
                return Some(goal);
            }
            self.order.remove(0);
        }
    }
}

/// Runs the TSP-loop tracker until the horizon, moving in steps no longer
/// than `step` so predictions stay current. When every prediction has been
/// visited in vain the agent keeps its heading, reflecting off the walls.
pub fn run_tsp_loop(mission: &mut Mission, initial: &[Point], speed_ratio: f64, step: f64) -> Result<(), Error> {
    let mut state = TspLoopState::new(initial, speed_ratio, step, mission.agent());
    let mut direction = Point::new(1.0, 0.0);
    while !mission.done() {
        let agent = mission.agent();
        let dest = match state.next_waypoint(agent, mission.time()) {
            Some(goal) => {
                let d = agent.dist(goal);
                direction = Point::new((goal.x - agent.x) / d, (goal.y - agent.y) / d);
                if d > step {
                    agent.lerp(goal, step / d)
                } else {
                    goal
                }
            }
            None => {
                let mut next = Point::new(agent.x + direction.x * step, agent.y + direction.y * step);
                if !(0.0..=1.0).contains(&next.x) {
                    direction.x = -direction.x;
                }
                if !(0.0..=1.0).contains(&next.y) {
                    direction.y = -direction.y;
                }
                next = Point::new(agent.x + direction.x * step, agent.y + direction.y * step);
                next.clamp_unit()
            }
        };
        let events = mission.travel_to(dest)?;
        mission.arrival_reward();
        for ev in &events {
            state.observe(&ev.measurements, ev.position, ev.time);
        }
    }
    Ok(())
}

/// Uniform random neighbour walk on the roadmap, until the horizon or
/// `max_steps` moves.
pub fn run_random<R: Rng + ?Sized>(
    mission: &mut Mission,
    roadmap: &Roadmap,
    start: usize,
    max_steps: Option<usize>,
    rng: &mut R,
) -> Result<(), Error> {
    let mut current = start;
    mission.record_node(current);
    let mut steps = 0;
    while !mission.done() && max_steps.map_or(true, |m| steps < m) {
        steps += 1;
        let nbrs = roadmap.neighbors(current);
        if nbrs.is_empty() {
            return Err(Error::EmptyNeighborSet);
        }
        current = nbrs[rng.gen_range(0..nbrs.len())];
        mission.travel_to(roadmap.node(current))?;
        mission.record_node(current);
        mission.arrival_reward();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_lanes_at_sensor_spacing() {
        let plan = lawnmower_plan(0.1);
        let xs: Vec<f64> = plan.iter().step_by(2).map(|p| p.x).collect();
        let expected = [0.1, 0.3, 0.5, 0.7, 0.9];
        assert_eq!(xs.len(), 5);
        for (a, b) in xs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unseen_heading_means_no_drift() {
        let s = TspLoopState::new(&[Point::new(0.2, 0.3)], 0.5, 0.1, Point::new(0.0, 0.0));
        assert_eq!(s.predict(0, 10.0), Point::new(0.2, 0.3));
        assert!(s.heading(0).is_none());
    }
}
