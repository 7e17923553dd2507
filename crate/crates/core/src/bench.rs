//! Phase-level timing of the forward pass.
//!
//! The forward pass is generic over a [`Clock`]; production code uses
//! [`NoClock`], whose methods compile to nothing, and the benchmark swaps in
//! [`PhaseClock`], so both run the same code path.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::layer::{GiblyConfig, GiblyLayer};
use crate::neighborhood::{NeighborhoodIndex, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Neighborhood = 0,
    Rotation = 1,
    Normalization = 2,
    Gib = 3,
    Composite = 4,
    Other = 5,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Neighborhood,
        Phase::Rotation,
        Phase::Normalization,
        Phase::Gib,
        Phase::Composite,
        Phase::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Neighborhood => "Neighborhood Computation",
            Phase::Rotation => "R_phi Computation",
            Phase::Normalization => "GIB Normalization",
            Phase::Gib => "GIB Computation",
            Phase::Composite => "Composite Bias Computation",
            Phase::Other => "Other operations",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Phase::Neighborhood => "neighborhood",
            Phase::Rotation => "rotation",
            Phase::Normalization => "normalization",
            Phase::Gib => "gib",
            Phase::Composite => "composite",
            Phase::Other => "other",
        }
    }
}

pub trait Clock: Default + Send {
    const ENABLED: bool;
    /// Starts a new lap without attributing the elapsed time.
    fn mark(&mut self);
    /// Attributes the time since the last mark/lap to `phase`.
    fn lap(&mut self, phase: Phase);
    /// Adds another clock's totals (used to fold per-worker clocks).
    fn absorb(&mut self, other: &Self);
    /// Records wall time spent inside a parallel region.
    fn parallel_wall(&mut self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    const ENABLED: bool = false;
    #[inline(always)]
    fn mark(&mut self) {}
    #[inline(always)]
    fn lap(&mut self, _: Phase) {}
    #[inline(always)]
    fn absorb(&mut self, _: &Self) {}
    #[inline(always)]
    fn parallel_wall(&mut self, _: Duration) {}
}

#[derive(Debug, Default, Clone)]
pub struct PhaseClock {
    last: Option<Instant>,
    totals: [Duration; 6],
    /// Worker time spent inside parallel regions, all phases included.
    worker_total: Duration,
    parallel_wall: Duration,
}

impl Clock for PhaseClock {
    const ENABLED: bool = true;

    fn mark(&mut self) {
        self.last = Some(Instant::now());
    }

    fn lap(&mut self, phase: Phase) {
        let now = Instant::now();
        if let Some(last) = self.last {
            self.totals[phase as usize] += now - last;
        }
        self.last = Some(now);
    }

    fn absorb(&mut self, other: &Self) {
        for (a, b) in self.totals.iter_mut().zip(other.totals) {
            *a += b;
        }
        self.worker_total += other.totals.iter().sum::<Duration>();
    }

    fn parallel_wall(&mut self, d: Duration) {
        self.parallel_wall += d;
    }
}

impl PhaseClock {
    pub fn total(&self, phase: Phase) -> Duration {
        self.totals[phase as usize]
    }

    /// Converts raw lap totals into per-phase times for a pass that took
    /// `wall` overall. Serial time outside parallel regions counts once;
    /// parallel regions count every worker's busy time. `Other` is the
    /// residual of the total after the named phases.
    pub fn into_timings(self, wall: Duration) -> PhaseTimings {
        let serial = wall.saturating_sub(self.parallel_wall);
        let total = serial + self.worker_total;
        let mut seconds = [0.0; 6];
        let mut named = 0.0;
        for phase in &Phase::ALL[..5] {
            let s = self.totals[*phase as usize].as_secs_f64();
            seconds[*phase as usize] = s;
            named += s;
        }
        let total_s = total.as_secs_f64().max(named);
        seconds[Phase::Other as usize] = total_s - named;
        PhaseTimings::from_seconds(seconds)
    }
}

/// Per-phase wall time and fraction of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTimings {
    pub seconds: [f64; 6],
    pub fractions: [f64; 6],
}

impl PhaseTimings {
    pub fn from_seconds(seconds: [f64; 6]) -> Self {
        let total: f64 = seconds.iter().sum();
        let fractions = if total > 0.0 {
            seconds.map(|s| s / total)
        } else {
            let mut f = [0.0; 6];
            f[Phase::Other as usize] = 1.0;
            f
        };
        PhaseTimings { seconds, fractions }
    }

    pub fn total_seconds(&self) -> f64 {
        self.seconds.iter().sum()
    }

    pub fn fraction(&self, phase: Phase) -> f64 {
        self.fractions[phase as usize]
    }

    /// Phase with the largest fraction.
    pub fn dominant(&self) -> Phase {
        let mut best = Phase::Neighborhood;
        for p in Phase::ALL {
            if self.fraction(p) > self.fraction(best) {
                best = p;
            }
        }
        best
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>12} {:>10}", "Operation", "Time (ms)", "Ratio");
        for p in Phase::ALL {
            let _ = writeln!(
                out,
                "{:<28} {:>12.3} {:>9.2}%",
                p.label(),
                self.seconds[p as usize] * 1e3,
                self.fraction(p) * 100.0
            );
        }
        let _ = writeln!(out, "{:<28} {:>12.3} {:>9.2}%", "Total", self.total_seconds() * 1e3, 100.0);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,seconds,fraction\n");
        for p in Phase::ALL {
            let _ = writeln!(out, "{},{:.9},{:.9}", p.key(), self.seconds[p as usize], self.fraction(p));
        }
        out
    }
}

/// Median per-phase timings over `repeats` forward passes (first discarded).
pub fn run_benchmark(cloud: &PointCloud, config: &GiblyConfig, repeats: usize) -> Result<PhaseTimings> {
    if repeats < 3 {
        return Err(Error::Config("benchmark needs at least 3 repeats".into()));
    }
    let layer = GiblyLayer::new(config.clone(), cloud.feature_dim())?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        runs.push(timed_forward(&layer, cloud)?);
    }
    Ok(median_timings(&runs[1..]))
}

/// One instrumented forward pass, index construction included in the
/// neighborhood phase.
pub fn timed_forward(layer: &GiblyLayer, cloud: &PointCloud) -> Result<PhaseTimings> {
    let start = Instant::now();
    let mut clock = PhaseClock::default();
    clock.mark();
    let index = NeighborhoodIndex::new(cloud.coords(), layer.config().schedule.max_radius())?;
    clock.lap(Phase::Neighborhood);
    layer.forward_clocked(cloud, &index, &mut clock)?;
    Ok(clock.into_timings(start.elapsed()))
}

/// Wall time of an uninstrumented forward pass, index construction included.
pub fn untimed_forward(layer: &GiblyLayer, cloud: &PointCloud) -> Result<Duration> {
    let start = Instant::now();
    let index = NeighborhoodIndex::new(cloud.coords(), layer.config().schedule.max_radius())?;
    layer.forward(cloud, &index)?;
    Ok(start.elapsed())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-phase median seconds, renormalized into fractions.
pub fn median_timings(runs: &[PhaseTimings]) -> PhaseTimings {
    let mut seconds = [0.0; 6];
    for (k, s) in seconds.iter_mut().enumerate() {
        let mut column: Vec<f64> = runs.iter().map(|r| r.seconds[k]).collect();
        *s = median(&mut column);
    }
    PhaseTimings::from_seconds(seconds)
}
