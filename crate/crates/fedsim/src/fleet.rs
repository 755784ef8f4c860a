//! Simulated device fleet: hardware/locale profiles, the eligibility
//! policy gate, and the diurnal availability model.
//!
//! Eligibility is a time-invariant property of a profile; availability is
//! the only time-varying gate and is drawn once per device-hour from a
//! stateless hash, so the outcome does not depend on when or how often it
//! is queried.

use std::collections::BTreeSet;

use crate::rng::{hash_bernoulli, mix64};

pub use crate::server::ClientId;

pub const HOUR_S: u64 = 3_600;
pub const DAY_S: u64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    Low,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::High => "high",
            Tier::Low => "low",
        }
    }
}

/// Behavioral parameters of one simulated user.
#[derive(Debug, Clone)]
pub struct UserBehaviorParams {
    /// Per-user shift of the click logit.
    pub base_click_logit: f64,
    /// Per-category click-logit offsets.
    pub category_affinities: Vec<f64>,
    /// Per-local-hour click-logit offsets.
    pub hour_effects: [f64; 24],
    /// Mean suggestion impressions per day.
    pub impressions_per_day: f64,
    /// Scale applied to the generative model's score for this user's
    /// click draws; below 1.0 the user's clicks align less with the
    /// signal the triggering model can see.
    pub ground_truth_alignment: f64,
}

impl Default for UserBehaviorParams {
    fn default() -> Self {
        Self {
            base_click_logit: 0.0,
            category_affinities: Vec::new(),
            hour_effects: [0.0; 24],
            impressions_per_day: 10.0,
            ground_truth_alignment: 1.0,
        }
    }
}

/// Hardware, locale, timezone, reliability, and behavior of one device.
#[derive(Debug, Clone)]
pub struct DeviceProfile {
    pub device_id: ClientId,
    pub ram_mb: u32,
    pub sdk_level: u32,
    pub locale: String,
    pub tz_offset_hours: f64,
    pub tier: Tier,
    /// Probability that a selected device's report survives upload.
    pub network_reliability: f64,
    pub behavior: UserBehaviorParams,
    /// Name of the subpopulation this device was drawn from.
    pub subpopulation: String,
}

/// Per-local-hour probability that the device is simultaneously charging,
/// on an unmetered network, and idle.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilitySchedule(pub [f64; 24]);

impl AvailabilitySchedule {
    pub fn from_slice(values: &[f64]) -> Option<Self> {
        if values.len() != 24 || values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return None;
        }
        let mut a = [0.0; 24];
        a.copy_from_slice(values);
        Some(Self(a))
    }

    pub fn constant(p: f64) -> Self {
        Self([p; 24])
    }

    /// Charging-overnight profile: high through local night, near-dead
    /// mid-afternoon, ramping back up in the evening.
    pub fn night_peaked() -> Self {
        Self([
            0.65, 0.65, 0.62, 0.58, 0.52, 0.42, 0.26, 0.12, // 00-07
            0.06, 0.04, 0.03, 0.03, 0.03, 0.03, 0.04, 0.05, // 08-15
            0.08, 0.12, 0.20, 0.30, 0.40, 0.50, 0.58, 0.64, // 16-23
        ])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut a = self.0;
        for p in a.iter_mut() {
            *p = (*p * factor).clamp(0.0, 1.0);
        }
        Self(a)
    }
}

/// Device requirements for a task population.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EligibilityPolicy {
    pub min_ram_mb: u32,
    pub min_sdk_level: u32,
    pub locales: BTreeSet<String>,
}

impl EligibilityPolicy {
    pub fn new(min_ram_mb: u32, min_sdk_level: u32, locales: &[&str]) -> Self {
        Self {
            min_ram_mb,
            min_sdk_level,
            locales: locales.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// True when `other` admits every device this policy admits.
    pub fn is_subset_of(&self, other: &EligibilityPolicy) -> bool {
        other.min_ram_mb <= self.min_ram_mb
            && other.min_sdk_level <= self.min_sdk_level
            && self.locales.is_subset(&other.locales)
    }
}

/// Thresholds are inclusive: a device exactly at the RAM or SDK floor is
/// eligible.
pub fn is_eligible(profile: &DeviceProfile, policy: &EligibilityPolicy) -> bool {
    profile.ram_mb >= policy.min_ram_mb
        && profile.sdk_level >= policy.min_sdk_level
        && policy.locales.contains(&profile.locale)
}

/// Local hour of day for a device, handling fractional offsets like +5.5.
pub fn local_hour(tz_offset_hours: f64, sim_time: u64) -> usize {
    let h = (sim_time as f64 / HOUR_S as f64 + tz_offset_hours).floor() as i64;
    (h.rem_euclid(24)) as usize
}

/// Local day-of-week index (simulation starts on day 0).
pub fn local_day_of_week(tz_offset_hours: f64, sim_time: u64) -> u8 {
    let shifted = sim_time as f64 + tz_offset_hours * HOUR_S as f64;
    let day = (shifted / DAY_S as f64).floor() as i64;
    day.rem_euclid(7) as u8
}

/// One Bernoulli availability draw per device-hour with
/// `p = schedule[local_hour]`; deterministic in `(seed, device, hour)`.
pub fn is_available(
    profile: &DeviceProfile,
    schedule: &AvailabilitySchedule,
    sim_time: u64,
    avail_seed: u64,
) -> bool {
    let hour_slot = sim_time / HOUR_S;
    let p = schedule.0[local_hour(profile.tz_offset_hours, sim_time)];
    hash_bernoulli(mix64(avail_seed ^ mix64(profile.device_id) ^ hour_slot), p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(ram: u32, sdk: u32, locale: &str, tz: f64) -> DeviceProfile {
        DeviceProfile {
            device_id: 7,
            ram_mb: ram,
            sdk_level: sdk,
            locale: locale.into(),
            tz_offset_hours: tz,
            tier: Tier::High,
            network_reliability: 1.0,
            behavior: UserBehaviorParams::default(),
            subpopulation: "test".into(),
        }
    }

    fn keyboard_policy() -> EligibilityPolicy {
        EligibilityPolicy::new(2048, 21, &["en-US", "en-CA"])
    }

    #[test]
    fn low_ram_is_ineligible() {
        assert!(!is_eligible(
            &profile(1536, 28, "en-US", -8.0),
            &keyboard_policy()
        ));
    }

    #[test]
    fn locale_gate_admits_mislabelled_devices() {
        // A device physically at +5.5 with locale en-US passes the filter;
        // the restriction only sees the Android locale.
        assert!(!is_eligible(
            &profile(4096, 28, "hi-IN", 5.5),
            &keyboard_policy()
        ));
        assert!(is_eligible(
            &profile(4096, 28, "en-US", 5.5),
            &keyboard_policy()
        ));
    }

    #[test]
    fn exact_thresholds_are_eligible() {
        assert!(is_eligible(
            &profile(2048, 21, "en-CA", -5.0),
            &keyboard_policy()
        ));
    }

    #[test]
    fn local_hour_handles_fractional_and_negative_offsets() {
        // 03:40 UTC at +5.5 is 09:10 local
        assert_eq!(local_hour(5.5, 3 * HOUR_S + 40 * 60), 9);
        // 02:00 UTC at -8 is 18:00 the previous local day
        assert_eq!(local_hour(-8.0, 2 * HOUR_S), 18);
        assert_eq!(local_hour(0.0, 0), 0);
    }

    #[test]
    fn availability_extremes() {
        let p = profile(4096, 28, "en-US", 0.0);
        let dead = AvailabilitySchedule::constant(0.0);
        let live = AvailabilitySchedule::constant(1.0);
        for hour in 0..48u64 {
            let t = hour * HOUR_S;
            assert!(!is_available(&p, &dead, t, 99));
            assert!(is_available(&p, &live, t, 99));
        }
    }

    #[test]
    fn availability_is_stable_within_an_hour_slot() {
        let p = profile(4096, 28, "en-US", -8.0);
        let sched = AvailabilitySchedule::constant(0.5);
        for slot in 0..100u64 {
            let base = slot * HOUR_S;
            let first = is_available(&p, &sched, base, 5);
            assert_eq!(first, is_available(&p, &sched, base + 1, 5));
            assert_eq!(first, is_available(&p, &sched, base + HOUR_S - 1, 5));
        }
    }

    #[test]
    fn night_peaked_fleet_is_up_more_at_2am_than_2pm() {
        let sched = AvailabilitySchedule::night_peaked();
        let mut night = 0u32;
        let mut midday = 0u32;
        for id in 0..400u64 {
            let mut p = profile(4096, 28, "en-US", 0.0);
            p.device_id = id;
            for day in 0..7u64 {
                let t_night = day * DAY_S + 2 * HOUR_S;
                let t_midday = day * DAY_S + 14 * HOUR_S;
                night += is_available(&p, &sched, t_night, 1234) as u32;
                midday += is_available(&p, &sched, t_midday, 1234) as u32;
            }
        }
        assert!(
            night > 5 * midday,
            "night {night} should dwarf midday {midday}"
        );
    }

    #[test]
    fn policy_subset_check() {
        let train = keyboard_policy();
        let deploy = EligibilityPolicy::new(0, 0, &["en-US", "en-CA", "hi-IN"]);
        assert!(train.is_subset_of(&deploy));
        assert!(!deploy.is_subset_of(&train));
    }
}
