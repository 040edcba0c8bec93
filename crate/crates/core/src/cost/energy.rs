//! Robot energy per inference from a power-state timeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Robot power draw in watts per state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerStates {
    pub inference: f64,
    pub transmission: f64,
    pub standby: f64,
    /// Extra draw of the network card transmitting while the robot computes.
    pub nic_idle: f64,
}

impl Default for PowerStates {
    fn default() -> Self {
        PowerStates {
            inference: 13.35,
            transmission: 4.25,
            standby: 4.04,
            nic_idle: 0.21,
        }
    }
}

impl PowerStates {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("inference", self.inference),
            ("transmission", self.transmission),
            ("standby", self.standby),
            ("nic_idle", self.nic_idle),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "power state {} must be > 0 W, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }

    /// Reads a TOML table of overrides; missing keys keep their defaults.
    pub fn from_toml(s: &str) -> Result<PowerStates> {
        let p: PowerStates =
            toml::from_str(s).map_err(|e| Error::Invalid(format!("power config: {}", e)))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<PowerStates> {
        PowerStates::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Durations in seconds of each robot power state during one inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub compute: f64,
    pub transmit_exclusive: f64,
    pub idle: f64,
    pub transmit_overlapped: f64,
}

impl Timeline {
    /// Derives the state durations over `[0, wall]` from the robot's compute
    /// intervals and the intervals its network card is busy.
    pub fn from_intervals(wall: f64, compute: &[(f64, f64)], link_busy: &[(f64, f64)]) -> Timeline {
        let c = union(compute, wall);
        let l = union(link_busy, wall);
        let c_len = measure(&c);
        let l_len = measure(&l);
        let both = intersection_len(&c, &l);
        let exclusive = l_len - both;
        Timeline {
            compute: c_len,
            transmit_exclusive: exclusive,
            idle: (wall - c_len - exclusive).max(0.0),
            transmit_overlapped: both,
        }
    }

    /// Wall time covered by the states (overlapped transmission runs during compute).
    pub fn wall(&self) -> f64 {
        self.compute + self.transmit_exclusive + self.idle
    }
}

fn union(iv: &[(f64, f64)], wall: f64) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = iv
        .iter()
        .map(|&(a, b)| (a.max(0.0), b.min(wall)))
        .filter(|(a, b)| b > a)
        .collect();
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn measure(v: &[(f64, f64)]) -> f64 {
    v.iter().map(|(a, b)| b - a).sum()
}

fn intersection_len(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

pub fn energy_per_inference(t: &Timeline, power: &PowerStates) -> Result<f64> {
    let d = [
        t.compute,
        t.transmit_exclusive,
        t.idle,
        t.transmit_overlapped,
    ];
    if d.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Invalid(format!(
            "negative or undefined duration in {:?}",
            t
        )));
    }
    Ok(power.inference * t.compute
        + power.transmission * t.transmit_exclusive
        + power.standby * t.idle
        + power.nic_idle * t.transmit_overlapped)
}
