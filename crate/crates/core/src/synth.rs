//! Deterministic synthetic trace generator.
//!
//! Genuine vehicles circulate on a ring corridor (radius band around the
//! map origin) with smoothly varying speed, so honest kinematic norms
//! live in narrow, predictable bands. Each attack type falsifies the
//! transmitted fields in its own way; flooding variants raise the send
//! rate, Sybil variants change the pseudonym per message, replay variants
//! re-send previously observed genuine messages.
//!
//! Content attacks on position draw from the whole bounding box, which
//! mostly lies outside the honest corridor: separable, but with overlap.
//! The `DoSRandom*` variants deliberately draw within honest bands, so
//! their only reliable tells are message frequency and pseudonym churn.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::trace::{AttackType, BsmRecord, Vec3};

const TAU: f64 = core::f64::consts::PI * 2.0;
/// Sybil pseudonyms are allocated from here upward, well clear of real ids.
const SYBIL_PSEUDO_BASE: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_vehicles: usize,
    /// Fraction of vehicles that misbehave (vehicle granularity).
    pub misbehaving_fraction: f64,
    /// Trace length in seconds.
    pub duration: f64,
    /// Honest beacon period in seconds.
    pub genuine_period: f64,
    /// Beacon period for flooding attackers.
    pub dos_period: f64,
    /// Attack types cycled over the misbehaving vehicles.
    pub attack_mix: Vec<AttackType>,
    /// Honest corridor: radius band around the origin.
    pub ring_radius: (f64, f64),
    /// Simulation bounding box (x range, y range); position falsification
    /// draws from it.
    pub bounds: ((f64, f64), (f64, f64)),
    /// Honest speed magnitude band, m/s.
    pub genuine_speed: (f64, f64),
    /// Magnitude range for falsified speed draws.
    pub attack_speed: (f64, f64),
    /// Max along-track acceleration, m/s^2.
    pub accel_limit: f64,
    /// Seconds between target-speed redraws.
    pub speed_hold: f64,
    pub const_pos_offset: Vec3,
    /// Random position offsets are uniform in +-this per axis, m.
    pub rand_pos_offset: f64,
    pub const_spd_offset: Vec3,
    /// Random speed offsets are uniform in +-this per axis, m/s.
    pub rand_spd_offset: f64,
    /// Fixed propagation delay added to send times.
    pub recv_delay: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_vehicles: 60,
            misbehaving_fraction: 0.3,
            duration: 120.0,
            genuine_period: 1.0,
            dos_period: 0.1,
            attack_mix: alloc::vec![AttackType::RandomPosition],
            ring_radius: (400.0, 500.0),
            bounds: ((-600.0, 600.0), (-600.0, 600.0)),
            genuine_speed: (8.0, 14.0),
            attack_speed: (0.0, 28.0),
            accel_limit: 0.5,
            speed_hold: 20.0,
            const_pos_offset: Vec3::new(50.0, 50.0, 0.0),
            rand_pos_offset: 100.0,
            const_spd_offset: Vec3::new(5.0, 5.0, 0.0),
            rand_spd_offset: 10.0,
            recv_delay: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn misbehaving_count(&self) -> usize {
        crate::math::round(self.misbehaving_fraction * self.n_vehicles as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_vehicles == 0 {
            return bad("n_vehicles must be positive");
        }
        if !(self.misbehaving_fraction > 0.0 && self.misbehaving_fraction < 1.0) {
            return bad("misbehaving_fraction must be in (0, 1)");
        }
        let m = self.misbehaving_count();
        if m == 0 || m == self.n_vehicles {
            return Err(Error::InvalidConfig(format!(
                "{} vehicles at fraction {} leaves a class empty",
                self.n_vehicles, self.misbehaving_fraction
            )));
        }
        if self.attack_mix.is_empty() {
            return bad("attack_mix must name at least one attack");
        }
        if self.attack_mix.contains(&AttackType::Genuine) {
            return bad("attack_mix cannot contain Genuine");
        }
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.genuine_period > 0.0) || !(self.dos_period > 0.0) {
            return bad("beacon periods must be positive");
        }
        if self.dos_period >= self.genuine_period {
            return bad("dos_period must be shorter than genuine_period");
        }
        if !(self.ring_radius.0 > 0.0 && self.ring_radius.1 > self.ring_radius.0) {
            return bad("ring_radius band must be increasing and positive");
        }
        if self.bounds.0 .0 >= self.bounds.0 .1 || self.bounds.1 .0 >= self.bounds.1 .1 {
            return bad("bounds must be non-degenerate");
        }
        if !(self.genuine_speed.1 > self.genuine_speed.0 && self.genuine_speed.0 >= 0.0) {
            return bad("genuine_speed band must be increasing");
        }
        if !(self.attack_speed.1 > self.attack_speed.0 && self.attack_speed.0 >= 0.0) {
            return bad("attack_speed band must be increasing");
        }
        if !(self.accel_limit > 0.0) || !(self.speed_hold > 0.0) {
            return bad("accel_limit and speed_hold must be positive");
        }
        if self.const_pos_offset.norm() == 0.0 || self.const_spd_offset.norm() == 0.0 {
            return bad("constant offsets must be non-zero");
        }
        if !(self.rand_pos_offset > 0.0) || !(self.rand_spd_offset > 0.0) {
            return bad("random offset ranges must be positive");
        }
        if self.recv_delay < 0.0 {
            return bad("recv_delay cannot be negative");
        }
        Ok(())
    }
}

/// True kinematics of the sender at each emitted record's send time;
/// index-aligned with the record list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub pos: Vec3,
    pub spd: Vec3,
    pub acl: Vec3,
    pub hed: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub seed: u64,
    pub duration: f64,
    pub vehicles_total: usize,
    pub vehicles_misbehaving: usize,
    pub class_ratio: f64,
    pub records_total: usize,
    pub records_by_attack: BTreeMap<String, u64>,
    pub replay_skipped: u64,
}

pub struct GenOutput {
    pub records: Vec<BsmRecord>,
    pub truth: Vec<TruthRecord>,
    pub summary: GenSummary,
}

/// Pool of previously transmitted genuine messages for replay attacks.
pub struct ReplayPool {
    msgs: Vec<BsmRecord>,
}

impl ReplayPool {
    pub fn new() -> Self {
        ReplayPool { msgs: Vec::new() }
    }

    pub fn push(&mut self, r: BsmRecord) {
        self.msgs.push(r);
    }

    pub fn len(&self) -> usize {
        self.msgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }

    /// Uniformly draw a pooled message and re-stamp it with the replaying
    /// sender's identity and the current times.
    pub fn draw<R: Rng>(
        &self,
        rng: &mut R,
        send_time: f64,
        recv_time: f64,
        sender: u64,
        pseudo: u64,
        attack: AttackType,
    ) -> Result<BsmRecord> {
        if self.msgs.is_empty() {
            return Err(Error::EmptyInput("replay pool"));
        }
        let src = &self.msgs[rng.random_range(0..self.msgs.len())];
        Ok(BsmRecord {
            recv_time,
            send_time,
            sender,
            pseudo,
            pos: src.pos,
            spd: src.spd,
            acl: src.acl,
            hed: src.hed,
            label: 1,
            attack_type: attack,
        })
    }
}

impl Default for ReplayPool {
    fn default() -> Self {
        Self::new()
    }
}

struct VehicleSim {
    id: u64,
    attack: AttackType,
    rng: rand_chacha::ChaCha12Rng,
    // Ring motion state.
    radius: f64,
    theta: f64,
    dir: f64,
    speed: f64,
    target_speed: f64,
    hold_left: f64,
    tangential_accel: f64,
    last_time: f64,
    // Frozen falsification parameters.
    const_pos: Vec3,
    const_spd: Vec3,
}

impl VehicleSim {
    fn new(id: u64, attack: AttackType, cfg: &GenConfig, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, "vehicle", id);
        let radius = rng.random_range(cfg.ring_radius.0..cfg.ring_radius.1);
        let theta = rng.random_range(0.0..TAU);
        let dir = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
        let speed = rng.random_range(cfg.genuine_speed.0..cfg.genuine_speed.1);
        let target_speed = rng.random_range(cfg.genuine_speed.0..cfg.genuine_speed.1);
        let cr = rng.random_range(cfg.ring_radius.0..cfg.ring_radius.1);
        let ca = rng.random_range(0.0..TAU);
        let const_pos = Vec3::new(cr * crate::math::cos(ca), cr * crate::math::sin(ca), 0.0);
        let sa = rng.random_range(0.0..TAU);
        let sm = rng.random_range(cfg.attack_speed.0..cfg.attack_speed.1);
        let const_spd = Vec3::new(sm * crate::math::cos(sa), sm * crate::math::sin(sa), 0.0);
        VehicleSim {
            id,
            attack,
            rng,
            radius,
            theta,
            dir,
            speed,
            target_speed,
            hold_left: cfg.speed_hold,
            tangential_accel: 0.0,
            last_time: 0.0,
            const_pos,
            const_spd,
        }
    }

    fn advance_to(&mut self, t: f64, cfg: &GenConfig) {
        let dt = t - self.last_time;
        self.last_time = t;
        if dt <= 0.0 {
            return;
        }
        self.hold_left -= dt;
        if self.hold_left <= 0.0 {
            self.target_speed = self
                .rng
                .random_range(cfg.genuine_speed.0..cfg.genuine_speed.1);
            self.hold_left = cfg.speed_hold;
        }
        let dv_max = cfg.accel_limit * dt;
        let dv = (self.target_speed - self.speed).clamp(-dv_max, dv_max);
        let new_speed = self.speed + dv;
        self.tangential_accel = dv / dt;
        let arc = 0.5 * (self.speed + new_speed) * dt;
        self.speed = new_speed;
        self.theta = (self.theta + self.dir * arc / self.radius) % TAU;
    }

    fn truth(&self) -> TruthRecord {
        let (s, c) = (crate::math::sin(self.theta), crate::math::cos(self.theta));
        let tangent = Vec3::new(-s * self.dir, c * self.dir, 0.0);
        let inward = Vec3::new(-c, -s, 0.0);
        let centripetal = self.speed * self.speed / self.radius;
        TruthRecord {
            pos: Vec3::new(self.radius * c, self.radius * s, 0.0),
            spd: tangent.scale(self.speed),
            acl: tangent
                .scale(self.tangential_accel)
                .add(&inward.scale(centripetal)),
            hed: tangent,
        }
    }

    fn random_box_point(&mut self, cfg: &GenConfig) -> Vec3 {
        Vec3::new(
            self.rng.random_range(cfg.bounds.0 .0..cfg.bounds.0 .1),
            self.rng.random_range(cfg.bounds.1 .0..cfg.bounds.1 .1),
            0.0,
        )
    }
}

fn period_for(attack: AttackType, cfg: &GenConfig) -> f64 {
    if attack.is_dos() {
        cfg.dos_period
    } else {
        cfg.genuine_period
    }
}

/// Generate a trace together with per-record ground-truth kinematics.
/// Identical configs (including seed) produce bit-identical output.
pub fn generate_detailed(cfg: &GenConfig) -> Result<GenOutput> {
    cfg.validate()?;
    let n = cfg.n_vehicles;
    let n_mis = cfg.misbehaving_count();
    let n_gen = n - n_mis;

    let mut sims: Vec<VehicleSim> = Vec::with_capacity(n);
    for i in 0..n {
        let id = i as u64 + 1;
        let attack = if i < n_gen {
            AttackType::Genuine
        } else {
            cfg.attack_mix[(i - n_gen) % cfg.attack_mix.len()]
        };
        sims.push(VehicleSim::new(id, attack, cfg, cfg.seed));
    }

    // Emission schedule: per-vehicle phase plus fixed period, merged in
    // time order with the vehicle index as deterministic tie-break.
    let mut events: Vec<(f64, usize)> = Vec::new();
    for (idx, sim) in sims.iter_mut().enumerate() {
        let period = period_for(sim.attack, cfg);
        let phase: f64 = sim.rng.random_range(0.0..period);
        let mut t = phase;
        while t <= cfg.duration {
            events.push((t, idx));
            t += period;
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut records: Vec<BsmRecord> = Vec::with_capacity(events.len());
    let mut truths: Vec<TruthRecord> = Vec::with_capacity(events.len());
    let mut pool = ReplayPool::new();
    let mut next_sybil = SYBIL_PSEUDO_BASE;
    let mut replay_skipped = 0u64;

    for (t, idx) in events {
        let sim = &mut sims[idx];
        sim.advance_to(t, cfg);
        let truth = sim.truth();
        let recv_time = t + cfg.recv_delay;
        let pseudo = if sim.attack.is_sybil() {
            next_sybil += 1;
            next_sybil - 1
        } else {
            sim.id
        };
        let base = BsmRecord {
            recv_time,
            send_time: t,
            sender: sim.id,
            pseudo,
            pos: truth.pos,
            spd: truth.spd,
            acl: truth.acl,
            hed: truth.hed,
            label: u8::from(sim.attack != AttackType::Genuine),
            attack_type: sim.attack,
        };
        let record = match sim.attack {
            AttackType::Genuine | AttackType::DoS => base,
            AttackType::ConstantPosition => BsmRecord {
                pos: sim.const_pos,
                ..base
            },
            AttackType::ConstantPositionOffset => BsmRecord {
                pos: truth.pos.add(&cfg.const_pos_offset),
                ..base
            },
            AttackType::RandomPosition => {
                let p = sim.random_box_point(cfg);
                BsmRecord { pos: p, ..base }
            }
            AttackType::RandomPositionOffset => {
                let o = Vec3::new(
                    sim.rng.random_range(-cfg.rand_pos_offset..cfg.rand_pos_offset),
                    sim.rng.random_range(-cfg.rand_pos_offset..cfg.rand_pos_offset),
                    0.0,
                );
                BsmRecord {
                    pos: truth.pos.add(&o),
                    ..base
                }
            }
            AttackType::ConstantSpeed => BsmRecord {
                spd: sim.const_spd,
                ..base
            },
            AttackType::ConstantSpeedOffset => BsmRecord {
                spd: truth.spd.add(&cfg.const_spd_offset),
                ..base
            },
            AttackType::RandomSpeed => {
                let a = sim.rng.random_range(0.0..TAU);
                let m = sim.rng.random_range(cfg.attack_speed.0..cfg.attack_speed.1);
                BsmRecord {
                    spd: Vec3::new(m * crate::math::cos(a), m * crate::math::sin(a), 0.0),
                    ..base
                }
            }
            AttackType::RandomSpeedOffset => {
                let o = Vec3::new(
                    sim.rng.random_range(-cfg.rand_spd_offset..cfg.rand_spd_offset),
                    sim.rng.random_range(-cfg.rand_spd_offset..cfg.rand_spd_offset),
                    0.0,
                );
                BsmRecord {
                    spd: truth.spd.add(&o),
                    ..base
                }
            }
            AttackType::Disruptive | AttackType::DoSDisruptive | AttackType::DoSDisruptiveSybil => {
                if pool.is_empty() {
                    replay_skipped += 1;
                    continue;
                }
                pool.draw(&mut sim.rng, t, recv_time, sim.id, pseudo, sim.attack)?
            }
            AttackType::DoSRandom | AttackType::DoSRandomSybil => {
                // In-band draws: plausible per message, anomalous in rate
                // and pseudonym churn only.
                let pa = sim.rng.random_range(0.0..TAU);
                let pr = sim.rng.random_range(cfg.ring_radius.0..cfg.ring_radius.1);
                let sa = sim.rng.random_range(0.0..TAU);
                let sm = sim
                    .rng
                    .random_range(cfg.genuine_speed.0..cfg.genuine_speed.1);
                let aa = sim.rng.random_range(0.0..TAU);
                let am = sim.rng.random_range(0.0..cfg.accel_limit);
                let ha = sim.rng.random_range(0.0..TAU);
                BsmRecord {
                    pos: Vec3::new(pr * crate::math::cos(pa), pr * crate::math::sin(pa), 0.0),
                    spd: Vec3::new(sm * crate::math::cos(sa), sm * crate::math::sin(sa), 0.0),
                    acl: Vec3::new(am * crate::math::cos(aa), am * crate::math::sin(aa), 0.0),
                    hed: Vec3::new(crate::math::cos(ha), crate::math::sin(ha), 0.0),
                    ..base
                }
            }
        };
        if record.attack_type == AttackType::Genuine {
            pool.push(record.clone());
        }
        records.push(record);
        truths.push(truth);
    }

    let mut by_attack: BTreeMap<String, u64> = BTreeMap::new();
    for r in &records {
        *by_attack.entry(r.attack_type.as_str().into()).or_insert(0) += 1;
    }
    let summary = GenSummary {
        seed: cfg.seed,
        duration: cfg.duration,
        vehicles_total: n,
        vehicles_misbehaving: n_mis,
        class_ratio: n_mis as f64 / n as f64,
        records_total: records.len(),
        records_by_attack: by_attack,
        replay_skipped,
    };
    Ok(GenOutput {
        records,
        truth: truths,
        summary,
    })
}

/// Generate a trace; see [`generate_detailed`] for the truth-keeping form.
pub fn generate(cfg: &GenConfig) -> Result<(Vec<BsmRecord>, GenSummary)> {
    let out = generate_detailed(cfg)?;
    Ok((out.records, out.summary))
}
