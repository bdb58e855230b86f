//! Deterministic fault schedules and the GEMM hook they produce.
//!
//! Every decision is a pure function of `(schedule seed, step)`: a ChaCha8
//! stream is keyed by the step, so replaying a step or querying it twice
//! always gives the same answer.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gemm::{FaultHook, GemmSiteId, Operand, Pass};
use crate::model::{enumerate_gemm_sites, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SiteSelector {
    Sites(Vec<GemmSiteId>),
    AllForward,
    AllBackward,
    All,
}

/// Which operand elements a firing fault corrupts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementMode {
    /// One element, flat row-major index taken modulo `rows * cols`.
    Single(usize),
    /// Every element of the operand.
    All,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultSpec {
    pub sites: SiteSelector,
    pub bitmask: u16,
    pub element: ElementMode,
    pub operand: Operand,
}

impl FaultSpec {
    pub fn new(sites: SiteSelector, bitmask: u16) -> Self {
        FaultSpec {
            sites,
            bitmask,
            element: ElementMode::Single(0),
            operand: Operand::A,
        }
    }

    /// Mask with only bit `bit` set.
    pub fn single_bit(sites: SiteSelector, bit: u8) -> Self {
        FaultSpec::new(sites, 1u16 << (bit & 15))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Each step is active with probability `1 / one_in`.
    Rate { one_in: u64 },
    /// Active for `start <= step < start + duration`.
    Window { start: u64, duration: u64 },
    /// Events start with probability `1 / one_in` per step and last a
    /// uniformly drawn `dur_min..=dur_max` steps.
    RateWithRandomDuration { one_in: u64, dur_min: u64, dur_max: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteSelection {
    /// Every site in the spec fires.
    Fixed,
    /// One site of the spec, drawn per event.
    RandomPerEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultSchedule {
    pub mode: ScheduleMode,
    pub seed: u64,
    pub site_selection: SiteSelection,
}

/// One fault event: first and last active step, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultEvent {
    pub start: u64,
    pub end: u64,
    pub site: Option<GemmSiteId>,
}

/// Faults active during one step. Doubles as the GEMM hook.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ActiveFaults {
    sites: Vec<GemmSiteId>,
    bitmask: u16,
    element: Option<ElementMode>,
    operand: Option<Operand>,
}

impl ActiveFaults {
    pub fn none() -> Self {
        ActiveFaults::default()
    }

    pub fn is_active(&self) -> bool {
        !self.sites.is_empty() && self.bitmask != 0
    }

    pub fn sites(&self) -> &[GemmSiteId] {
        &self.sites
    }

    pub fn bitmask(&self) -> u16 {
        self.bitmask
    }
}

impl FaultHook for ActiveFaults {
    fn watches(&self, site: GemmSiteId) -> bool {
        self.bitmask != 0 && self.sites.contains(&site)
    }

    fn mask(&self, site: GemmSiteId, operand: Operand, row: usize, col: usize, rows: usize, cols: usize) -> u16 {
        if Some(operand) != self.operand || !self.watches(site) {
            return 0;
        }
        match self.element {
            Some(ElementMode::All) => self.bitmask,
            Some(ElementMode::Single(e)) if row * cols + col == e % (rows * cols) => self.bitmask,
            _ => 0,
        }
    }
}

/// A validated spec + schedule pair, resolved against one model's site list.
#[derive(Clone, Debug)]
pub struct FaultInjector {
    spec: FaultSpec,
    schedule: FaultSchedule,
    candidates: Vec<GemmSiteId>,
}

fn draw(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

impl FaultInjector {
    pub fn new(spec: FaultSpec, schedule: FaultSchedule, model: &ModelConfig) -> Result<Self> {
        if spec.bitmask == 0 {
            return Err(Error::InvalidConfig("fault bitmask must be non-zero"));
        }
        match schedule.mode {
            ScheduleMode::Rate { one_in: 0 } => {
                return Err(Error::InvalidConfig("fault rate one_in must be >= 1"))
            }
            ScheduleMode::Window { duration: 0, .. } => {
                return Err(Error::InvalidConfig("fault window duration must be >= 1"))
            }
            ScheduleMode::RateWithRandomDuration { one_in, dur_min, dur_max }
                if one_in == 0 || dur_min == 0 || dur_max < dur_min =>
            {
                return Err(Error::InvalidConfig("need one_in >= 1 and 1 <= dur_min <= dur_max"))
            }
            _ => {}
        }
        let all: Vec<GemmSiteId> = enumerate_gemm_sites(model).into_iter().map(|s| s.id).collect();
        let candidates: Vec<GemmSiteId> = match &spec.sites {
            SiteSelector::Sites(list) => {
                if list.iter().any(|s| !all.contains(s)) {
                    return Err(Error::InvalidConfig("fault site not present in this model"));
                }
                list.clone()
            }
            SiteSelector::AllForward => all.into_iter().filter(|s| s.pass == Pass::Forward).collect(),
            SiteSelector::AllBackward => all.into_iter().filter(|s| s.pass == Pass::Backward).collect(),
            SiteSelector::All => all,
        };
        if candidates.is_empty() {
            return Err(Error::InvalidConfig("fault spec selects no sites"));
        }
        Ok(FaultInjector { spec, schedule, candidates })
    }

    pub fn spec(&self) -> &FaultSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &FaultSchedule {
        &self.schedule
    }

    /// If an event starting at `start` exists, its last step and site.
    fn event_at(&self, start: u64) -> Option<(u64, Option<GemmSiteId>)> {
        let mut rng = draw(self.schedule.seed, start);
        let end = match self.schedule.mode {
            ScheduleMode::Rate { one_in } => {
                if rng.random_range(0..one_in) != 0 {
                    return None;
                }
                start
            }
            ScheduleMode::Window { start: s, duration } => {
                if start != s {
                    return None;
                }
                s + duration - 1
            }
            ScheduleMode::RateWithRandomDuration { one_in, dur_min, dur_max } => {
                if rng.random_range(0..one_in) != 0 {
                    return None;
                }
                start + rng.random_range(dur_min..=dur_max) - 1
            }
        };
        let site = match self.schedule.site_selection {
            SiteSelection::Fixed => None,
            SiteSelection::RandomPerEvent => Some(self.candidates[rng.random_range(0..self.candidates.len())]),
        };
        Some((end, site))
    }

    /// Events covering `step`, oldest first.
    fn events_covering(&self, step: u64) -> Vec<FaultEvent> {
        let lookback = match self.schedule.mode {
            ScheduleMode::Rate { .. } => 0,
            ScheduleMode::Window { start, duration } => {
                if step < start || step - start >= duration {
                    return Vec::new();
                }
                step - start
            }
            ScheduleMode::RateWithRandomDuration { dur_max, .. } => dur_max - 1,
        };
        let first = step.saturating_sub(lookback);
        (first..=step)
            .filter_map(|s| {
                self.event_at(s)
                    .filter(|&(end, _)| end >= step)
                    .map(|(end, site)| FaultEvent { start: s, end, site })
            })
            .collect()
    }

    /// Faults active at `step`.
    pub fn plan_step(&self, step: u64) -> ActiveFaults {
        let events = self.events_covering(step);
        if events.is_empty() {
            return ActiveFaults::none();
        }
        let mut sites: Vec<GemmSiteId> = match self.schedule.site_selection {
            SiteSelection::Fixed => self.candidates.clone(),
            SiteSelection::RandomPerEvent => events.iter().filter_map(|e| e.site).collect(),
        };
        sites.sort();
        sites.dedup();
        ActiveFaults {
            sites,
            bitmask: self.spec.bitmask,
            element: Some(self.spec.element),
            operand: Some(self.spec.operand),
        }
    }

    /// All events that start in `first..=last`, in start order.
    pub fn events(&self, first: u64, last: u64) -> Vec<FaultEvent> {
        match self.schedule.mode {
            ScheduleMode::Window { start, .. } => {
                if (first..=last).contains(&start) {
                    self.event_at(start)
                        .map(|(end, site)| alloc::vec![FaultEvent { start, end, site }])
                        .unwrap_or_default()
                } else {
                    Vec::new()
                }
            }
            _ => (first..=last)
                .filter_map(|s| self.event_at(s).map(|(end, site)| FaultEvent { start: s, end, site }))
                .collect(),
        }
    }
}

/// One corrupted GEMM call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultLogEntry {
    pub step: u64,
    pub site: GemmSiteId,
    pub bitmask: u16,
    pub element: usize,
}

/// Append-only record of the corruptions actually applied.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultLog {
    entries: Vec<FaultLogEntry>,
}

impl FaultLog {
    pub fn new() -> Self {
        FaultLog::default()
    }

    pub fn push(&mut self, entry: FaultLogEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[FaultLogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct steps with at least one corrupted call, ascending.
    pub fn steps(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.entries.iter().map(|e| e.step).collect();
        s.dedup();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn injector(mode: ScheduleMode) -> FaultInjector {
        FaultInjector::new(
            FaultSpec::single_bit(SiteSelector::AllBackward, 14),
            FaultSchedule {
                mode,
                seed: 0,
                site_selection: SiteSelection::Fixed,
            },
            &ModelConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn window_of_three() {
        let inj = injector(ScheduleMode::Window { start: 500, duration: 3 });
        let active: Vec<bool> = (499..=503).map(|s| inj.plan_step(s).is_active()).collect();
        assert_eq!(active, [false, true, true, true, false]);
        assert_eq!(inj.events(0, 1000), [FaultEvent { start: 500, end: 502, site: None }]);
    }

    #[test]
    fn rate_one_is_always_active() {
        let inj = injector(ScheduleMode::Rate { one_in: 1 });
        assert!((0..200).all(|s| inj.plan_step(s).is_active()));
    }

    #[test]
    fn rate_ten_binomial_bounds() {
        let inj = injector(ScheduleMode::Rate { one_in: 10 });
        let n = (0..10_000).filter(|&s| inj.plan_step(s).is_active()).count();
        assert!((800..=1200).contains(&n), "{n}");
    }

    #[test]
    fn random_duration_events_cover_their_span() {
        let inj = injector(ScheduleMode::RateWithRandomDuration { one_in: 100, dur_min: 1, dur_max: 5 });
        let events = inj.events(1, 5000);
        assert!(!events.is_empty());
        for e in &events {
            assert!((1..=5).contains(&(e.end - e.start + 1)));
            assert!((e.start..=e.end).all(|s| inj.plan_step(s).is_active()));
        }
        let active = (1..=5000).filter(|&s| inj.plan_step(s).is_active()).count();
        let covered = (1..=5000u64)
            .filter(|&s| events.iter().any(|e| e.start <= s && s <= e.end))
            .count();
        assert_eq!(active, covered);
    }

    #[test]
    fn random_site_is_stable_per_event() {
        let inj = FaultInjector::new(
            FaultSpec::single_bit(SiteSelector::AllBackward, 13),
            FaultSchedule {
                mode: ScheduleMode::Window { start: 10, duration: 4 },
                seed: 9,
                site_selection: SiteSelection::RandomPerEvent,
            },
            &ModelConfig::default(),
        )
        .unwrap();
        let first = inj.plan_step(10);
        assert_eq!(first.sites().len(), 1);
        assert!((11..14).all(|s| inj.plan_step(s) == first));
    }

    #[test]
    fn hook_fires_on_one_element() {
        let site = GemmSiteId::backward(3);
        let inj = FaultInjector::new(
            FaultSpec {
                element: ElementMode::Single(7),
                ..FaultSpec::new(SiteSelector::Sites(alloc::vec![site]), 0x4000)
            },
            FaultSchedule {
                mode: ScheduleMode::Rate { one_in: 1 },
                seed: 0,
                site_selection: SiteSelection::Fixed,
            },
            &ModelConfig::default(),
        )
        .unwrap();
        let h = inj.plan_step(1);
        let mut hits = 0;
        for r in 0..2 {
            for c in 0..3 {
                let m = h.mask(site, Operand::A, r, c, 2, 3);
                assert_eq!(m, h.mask(site, Operand::A, r, c, 2, 3));
                if m != 0 {
                    hits += 1;
                    assert_eq!(r * 3 + c, 7 % 6);
                }
                assert_eq!(h.mask(site, Operand::B, r, c, 2, 3), 0);
                assert_eq!(h.mask(GemmSiteId::backward(4), Operand::A, r, c, 2, 3), 0);
            }
        }
        assert_eq!(hits, 1);
        let none = ActiveFaults::none();
        assert!(!none.watches(site));
        assert_eq!(none.mask(site, Operand::A, 0, 0, 1, 1), 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let sched = FaultSchedule {
            mode: ScheduleMode::Rate { one_in: 1 },
            seed: 0,
            site_selection: SiteSelection::Fixed,
        };
        let cfg = ModelConfig::default();
        assert!(FaultInjector::new(FaultSpec::new(SiteSelector::All, 0), sched, &cfg).is_err());
        assert!(FaultInjector::new(
            FaultSpec::new(SiteSelector::Sites(alloc::vec![GemmSiteId::forward(999)]), 1),
            sched,
            &cfg
        )
        .is_err());
        assert!(FaultInjector::new(
            FaultSpec::new(SiteSelector::Sites(alloc::vec![]), 1),
            sched,
            &cfg
        )
        .is_err());
    }
}
