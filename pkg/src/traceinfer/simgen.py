"""Synthetic autopilot flights.

A point-mass aircraft flown by cascaded P/PI loops (altitude -> pitch ->
elevator, heading -> roll -> aileron, speed -> throttle).  Each flight plan
command activates one or more controller modes and the active mode at every
5 Hz control step is the ground-truth state label.  Servo commands reach the
actuators (and the logged output channels) ``lag`` steps after they are
computed, so outputs respond to a mode switch only after that lag.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .trace import (
    AUTOPILOT_SCHEMA,
    ChangePointAnnotation,
    Dataset,
    MultivariateTrace,
    StateCatalog,
    save_dataset,
)

logger = logging.getLogger(__name__)

DT = 0.2
G = 9.81
FT = 0.3048
KT = 0.514444

STATES = (
    "takeoff_roll",
    "liftoff",
    "climb",
    "cruise",
    "goto_waypoint",
    "loiter",
    "descend",
    "approach",
    "glide",
    "flare",
    "rollout",
)
CATALOG = StateCatalog(STATES)
S = {name: i for i, name in enumerate(STATES)}

COMMAND_TYPES = ("takeoff", "climb", "cruise", "goto_waypoint", "loiter", "descend", "approach", "land")
MIDDLE_TYPES = ("climb", "cruise", "goto_waypoint", "loiter", "descend", "approach")
# waypoint legs are drawn more often since they are also rejected more often
# by the length filter (long legs)
_MIDDLE_WEIGHT = {"climb": 1.0, "cruise": 1.0, "goto_waypoint": 2.0, "loiter": 1.0, "descend": 1.0,
                  "approach": 1.0}


class PlanError(ValueError):
    pass


class SimulationDivergence(RuntimeError):
    def __init__(self, step, detail=""):
        super().__init__(f"simulation diverged at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass(frozen=True)
class Command:
    kind: str
    altitude_ft: float | None = None
    duration_s: float | None = None
    x: float | None = None
    y: float | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class FlightPlan:
    commands: tuple[Command, ...]

    def __post_init__(self):
        cmds = tuple(self.commands)
        object.__setattr__(self, "commands", cmds)
        if len(cmds) < 2 or cmds[0].kind != "takeoff" or cmds[-1].kind != "land":
            raise PlanError("a flight plan starts with takeoff and ends with land")
        for c in cmds:
            if c.kind not in COMMAND_TYPES:
                raise PlanError(f"unknown command {c.kind!r}")
            if c.kind in ("climb", "descend") and not (c.altitude_ft and c.altitude_ft > 0):
                raise PlanError(f"{c.kind} needs a positive target altitude")
            if c.kind == "goto_waypoint" and not (
                c.x is not None and c.y is not None and math.isfinite(c.x) and math.isfinite(c.y)
            ):
                raise PlanError("goto_waypoint needs finite coordinates")
            if c.kind in ("cruise", "loiter") and not (c.duration_s and c.duration_s > 0):
                raise PlanError(f"{c.kind} needs a positive duration")

    @property
    def kinds(self) -> list[str]:
        return [c.kind for c in self.commands]


@dataclass(frozen=True)
class PlanConstraints:
    min_commands: int = 3
    max_commands: int = 7
    altitude_ft: tuple[float, float] = (250.0, 1000.0)
    duration_s: tuple[float, float] = (25.0, 70.0)
    waypoint_m: tuple[float, float] = (300.0, 900.0)


def generate_flight_plan(seed, constraints: PlanConstraints = PlanConstraints()) -> FlightPlan:
    """Random valid plan; altitude-changing commands always change altitude."""
    c = constraints
    if c.min_commands < 3 or c.max_commands < c.min_commands:
        raise PlanError(f"unsatisfiable command bounds {c.min_commands}..{c.max_commands}")
    lo_alt, hi_alt = c.altitude_ft
    if not 0 < lo_alt < hi_alt - 200:
        raise PlanError("altitude range too narrow for climb/descend commands")
    rng = np.random.default_rng(seed)
    n_middle = int(rng.integers(c.min_commands, c.max_commands + 1)) - 2
    alt = 50.0
    prev = "takeoff"
    cmds = [Command("takeoff")]
    for i in range(n_middle):
        last = i == n_middle - 1
        options = []
        for kind in MIDDLE_TYPES:
            if kind == prev:
                continue
            if kind == "approach" and not last:
                continue
            if alt < lo_alt and kind != "climb":
                continue
            if kind == "climb" and alt > hi_alt - 100:
                continue
            if kind == "descend" and alt < lo_alt + 100:
                continue
            options.append(kind)
        weights = np.array([_MIDDLE_WEIGHT[k] for k in options], dtype=float)
        kind = options[int(rng.choice(len(options), p=weights / weights.sum()))]
        if kind == "climb":
            target = float(rng.uniform(max(alt + 100, lo_alt), hi_alt))
            cmds.append(Command("climb", altitude_ft=round(target)))
            alt = round(target)
        elif kind == "descend":
            target = float(rng.uniform(lo_alt, alt - 100))
            cmds.append(Command("descend", altitude_ft=round(target)))
            alt = round(target)
        elif kind in ("cruise", "loiter"):
            cmds.append(Command(kind, duration_s=round(float(rng.uniform(*c.duration_s)), 1)))
        elif kind == "goto_waypoint":
            dist = rng.uniform(*c.waypoint_m)
            ang = rng.uniform(-math.pi, math.pi)
            cmds.append(Command(kind, x=round(float(dist * math.cos(ang)), 1),
                                y=round(float(dist * math.sin(ang)), 1)))
        else:
            cmds.append(Command("approach"))
        prev = kind
    cmds.append(Command("land"))
    return FlightPlan(tuple(cmds))


@dataclass(frozen=True)
class AircraftParams:
    cruise_speed: float = 24.0  # m/s
    dash_factor: float = 1.15  # goto_waypoint speed relative to cruise
    approach_speed: float = 18.0
    rotate_speed: float = 17.0
    climb_rate: float = 2.5  # m/s
    descent_rate: float = 2.0
    loiter_bank_deg: float = 25.0
    glide_slope_deg: float = 4.0
    approach_alt_ft: float = 150.0
    # loop gains
    k_alt: float = 0.25
    k_pitch: float = 0.6
    ki_pitch: float = 0.15
    k_heading: float = 0.6
    k_roll: float = 0.5
    k_speed: float = 0.15
    ki_speed: float = 0.05
    k_rudder: float = 0.4
    # plant
    pitch_response: float = 1.2
    roll_response: float = 1.5
    thrust: float = 4.0  # m/s^2 at full throttle
    drag: float = 0.0035
    actuator_tau: float = 0.3  # s
    lag: int = 2  # steps
    noise_std: tuple[float, ...] = (0.3, 0.3, 0.5, 2.0, 0.4, 0.2, 0.2, 0.2, 0.005, 0.002)
    gust_reversion: float = 0.3
    gust_volatility: tuple[float, float, float] = (0.6, 0.3, 0.02)  # along, vertical, roll

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("actuator lag must be at least one step")
        if len(self.noise_std) != len(AUTOPILOT_SCHEMA) or min(self.noise_std) < 0:
            raise ValueError("noise_std needs one non-negative value per channel")
        if min(self.gust_volatility) < 0 or self.gust_reversion < 0:
            raise ValueError("gust parameters must be non-negative")

    def quiet(self) -> "AircraftParams":
        """Same aircraft without sensor noise or wind."""
        return replace(self, noise_std=(0.0,) * len(self.noise_std), gust_volatility=(0.0, 0.0, 0.0))


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


class _Aircraft:
    def __init__(self, p: AircraftParams):
        self.p = p
        self.x = self.y = self.h = 0.0
        self.v = 0.0
        self.psi = 0.0
        self.theta = 0.0
        self.phi = 0.0
        self.on_ground = True
        # elevator, aileron, rudder (deg), throttle, flaps
        self.surf = np.zeros(5)
        self.gust = np.zeros(3)

    def aoa(self):
        # lift balance: lower speed and less flap need more angle of attack
        v = max(self.v, 8.0)
        return math.radians(3.0) * (self.p.cruise_speed / v) ** 2 / (1.0 + 0.6 * self.surf[4])

    def elevator_trim(self):
        v = max(self.v, 8.0)
        return 2.0 * (self.p.cruise_speed / v) ** 2 - 4.0 * self.surf[4]

    def gamma(self):
        return 0.0 if self.on_ground else self.theta - self.aoa()


# mode -> (speed setpoint selector, flaps, throttle override)
_FLAPS = {"takeoff_roll": 0.3, "liftoff": 0.3, "approach": 0.5, "glide": 0.7, "flare": 1.0, "rollout": 1.0}


class _Autopilot:
    """Mode sequencer and control laws."""

    def __init__(self, plan: FlightPlan, p: AircraftParams):
        self.plan = plan
        self.p = p
        self.cmd_idx = 0
        self.mode = "takeoff_roll"
        self.mode_start = 0
        self.hold_heading = 0.0
        self.target_alt = 50 * FT
        self.finished = False
        self.loiter_dir = 1.0
        self.i_pitch = 0.0
        self.i_speed = 0.0

    def _command(self):
        return self.plan.commands[self.cmd_idx]

    def _enter(self, mode, step, ac):
        self.mode = mode
        self.mode_start = step
        self.hold_heading = ac.psi

    def _next_command(self, step, ac):
        self.cmd_idx += 1
        c = self._command()
        if c.kind == "climb" or c.kind == "descend":
            self.target_alt = c.altitude_ft * FT
            self._enter(c.kind, step, ac)
        elif c.kind in ("cruise", "goto_waypoint", "loiter"):
            self._enter(c.kind, step, ac)
            self.loiter_dir = 1.0 if (step // 7) % 2 == 0 else -1.0
        elif c.kind == "approach":
            self.target_alt = self.p.approach_alt_ft * FT
            self._enter("approach", step, ac)
        elif c.kind == "land":
            self._enter("glide", step, ac)
        else:
            raise PlanError(f"unexpected command {c.kind!r} after takeoff")

    def update_mode(self, step, ac: _Aircraft):
        p = self.p
        elapsed = (step - self.mode_start) * DT
        m = self.mode
        if m == "takeoff_roll":
            if ac.v >= p.rotate_speed:
                ac.on_ground = False
                self._enter("liftoff", step, ac)
        elif m == "liftoff":
            if ac.h >= 50 * FT:
                self._next_command(step, ac)
        elif m in ("climb", "descend"):
            if abs(ac.h - self.target_alt) < 1.5 or elapsed > 240:
                self._next_command(step, ac)
        elif m in ("cruise", "loiter"):
            if elapsed >= self._command().duration_s:
                self._next_command(step, ac)
        elif m == "goto_waypoint":
            c = self._command()
            if math.hypot(c.x - ac.x, c.y - ac.y) < 80.0 or elapsed > 150:
                self._next_command(step, ac)
        elif m == "approach":
            stable = abs(ac.h - self.target_alt) < 2.0 and abs(ac.v - p.approach_speed) < 1.0
            if (stable and elapsed > 8) or elapsed > 90:
                self._next_command(step, ac)
        elif m == "glide":
            if ac.h <= 4.0:
                self._enter("flare", step, ac)
        elif m == "flare":
            if ac.h <= 0.0:
                ac.on_ground = True
                ac.h = 0.0
                self._enter("rollout", step, ac)
        elif m == "rollout":
            if ac.v < 2.0:
                self.finished = True

    def control(self, ac: _Aircraft) -> np.ndarray:
        """Servo commands (elevator, aileron, rudder [deg], throttle, flaps)."""
        p = self.p
        m = self.mode
        v = max(ac.v, 5.0)
        flaps = _FLAPS.get(m, 0.0)
        # speed setpoint and climb-rate command
        if m in ("goto_waypoint",):
            v_sp = p.cruise_speed * p.dash_factor
        elif m in ("approach", "glide", "flare"):
            v_sp = p.approach_speed
        else:
            v_sp = p.cruise_speed
        if m == "glide":
            vs = -max(v * math.sin(math.radians(p.glide_slope_deg)), min(p.descent_rate, 0.05 * ac.h))
        elif m == "flare":
            vs = -0.4
        elif m in ("takeoff_roll", "rollout"):
            vs = 0.0
        elif m == "liftoff":
            vs = p.climb_rate
        elif m == "climb":
            # a floor on the commanded rate keeps the pitch loop from dipping below level
            vs = float(np.clip(p.k_alt * (self.target_alt - ac.h), 0.5 * p.climb_rate, p.climb_rate))
        elif m == "descend":
            vs = float(np.clip(p.k_alt * (self.target_alt - ac.h), -p.descent_rate, -0.5 * p.descent_rate))
        else:
            vs = float(np.clip(p.k_alt * (self.target_alt - ac.h), -p.descent_rate, p.climb_rate))
        if m in ("takeoff_roll", "rollout"):
            theta_sp = 0.0
        else:
            theta_sp = math.asin(max(-0.5, min(0.5, vs / v))) + ac.aoa()
        err = theta_sp - ac.theta
        if not ac.on_ground:
            self.i_pitch += p.ki_pitch * err * DT
        elevator = math.degrees(p.k_pitch * err + self.i_pitch)
        # lateral
        if m == "goto_waypoint":
            c = self._command()
            psi_sp = math.atan2(c.y - ac.y, c.x - ac.x)
            phi_sp = p.k_heading * _wrap(psi_sp - ac.psi)
        elif m == "loiter":
            phi_sp = self.loiter_dir * math.radians(p.loiter_bank_deg)
        elif ac.on_ground:
            phi_sp = 0.0
        else:
            phi_sp = p.k_heading * _wrap(self.hold_heading - ac.psi)
        phi_sp = float(np.clip(phi_sp, -math.radians(35), math.radians(35)))
        if m in ("takeoff_roll", "rollout", "flare"):
            phi_sp = 0.0
        aileron = math.degrees(p.k_roll * (phi_sp - ac.phi))
        rudder = math.degrees(p.k_rudder * phi_sp)
        # throttle
        if m in ("takeoff_roll", "liftoff"):
            throttle = 1.0
        elif m in ("flare", "rollout"):
            throttle = 0.0
        else:
            self.i_speed += p.ki_speed * (v_sp - ac.v) * DT
            self.i_speed = float(np.clip(self.i_speed, -0.6, 0.6))
            ff = p.drag * v_sp ** 2 / p.thrust + G * math.sin(ac.gamma()) / p.thrust
            throttle = ff + p.k_speed * (v_sp - ac.v) + self.i_speed
        cmd = np.array([elevator, aileron, rudder, throttle, flaps])
        cmd[:3] = np.clip(cmd[:3], -25.0, 25.0)
        cmd[3] = min(max(cmd[3], 0.0), 1.0)
        return cmd


def _step_dynamics(ac: _Aircraft, applied: np.ndarray, rng_gust: np.ndarray):
    p = ac.p
    a = DT / (p.actuator_tau + DT)
    ac.surf += a * (applied - ac.surf)
    ac.gust += -p.gust_reversion * ac.gust * DT + np.asarray(p.gust_volatility) * math.sqrt(DT) * rng_gust
    elev, ail, rud, thr, flaps = ac.surf
    # attitude responds to control surfaces relative to their trim
    if ac.on_ground:
        ac.theta += DT * (0.0 - ac.theta)
        ac.phi = 0.0
    else:
        ac.theta += DT * p.pitch_response * math.radians(elev - ac.elevator_trim())
        ac.phi += DT * (p.roll_response * math.radians(ail) + ac.gust[2])
        ac.phi = float(np.clip(ac.phi, -1.2, 1.2))
    gamma = ac.gamma()
    drag = p.drag * ac.v ** 2 * (1.0 + 0.5 * flaps)
    if ac.on_ground and thr < 0.05:
        drag += 1.5  # wheel brakes
    dv = p.thrust * thr - drag - G * math.sin(gamma) + 0.2 * ac.gust[0]
    ac.v = max(0.0, ac.v + DT * dv)
    if not ac.on_ground:
        ac.h = max(0.0, ac.h + DT * (ac.v * math.sin(gamma) + ac.gust[1]))
        ac.psi = _wrap(ac.psi + DT * G * math.tan(ac.phi) / max(ac.v, 5.0) + DT * 0.02 * math.radians(rud))
    ac.x += DT * ac.v * math.cos(ac.psi)
    ac.y += DT * ac.v * math.sin(ac.psi)


def simulate_flight(plan: FlightPlan, params: AircraftParams, seed, max_steps: int = 20000
                    ) -> tuple[MultivariateTrace, ChangePointAnnotation]:
    """Fly ``plan`` and return the logged 10-channel trace and its state changes."""
    rng = np.random.default_rng(seed)
    ac = _Aircraft(params)
    ap = _Autopilot(plan, params)
    noise_std = np.asarray(params.noise_std)
    pending = [np.array([0.0, 0.0, 0.0, 0.0, _FLAPS["takeoff_roll"]])] * params.lag
    rows, labels = [], []
    step = 0
    while True:
        ap.update_mode(step, ac)
        if ap.finished:
            break
        if step >= max_steps:
            raise SimulationDivergence(step, "flight did not finish within max_steps")
        noise = rng.standard_normal(noise_std.size) * noise_std
        gust_draw = rng.standard_normal(3)
        applied = pending.pop(0)
        sensors = [
            math.degrees(ac.theta),
            math.degrees(ac.phi),
            math.degrees(ac.psi),
            ac.h / FT,
            (ac.v + (0.0 if ac.on_ground else ac.gust[0])) / KT,
        ]
        row = np.concatenate([sensors, applied]) + noise
        if not np.all(np.isfinite(row)):
            raise SimulationDivergence(step, "non-finite logged value")
        rows.append(row)
        labels.append(S[ap.mode])
        pending.append(ap.control(ac))
        _step_dynamics(ac, applied, gust_draw)
        if not all(math.isfinite(v) for v in (ac.h, ac.v, ac.theta, ac.phi, ac.psi, ac.x, ac.y)):
            raise SimulationDivergence(step, "non-finite aircraft state")
        step += 1
    samples = np.array(rows)
    labels = np.array(labels)
    changes = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    entries = [(0, int(labels[0]))] + [(int(t), int(labels[t])) for t in changes]
    return MultivariateTrace(AUTOPILOT_SCHEMA, samples, DT), ChangePointAnnotation(tuple(entries))


# -- datasets ----------------------------------------------------------------

# Per-flight parameter ranges; every AircraftParams field listed here is drawn
# uniformly from [lo, hi] (lag is drawn as an integer).
VARIANT_RANGES = {
    "A": {
        "cruise_speed": (21.0, 27.0),
        "dash_factor": (1.12, 1.2),
        "approach_speed": (16.0, 19.0),
        "climb_rate": (2.0, 3.0),
        "descent_rate": (1.6, 2.4),
        "loiter_bank_deg": (20.0, 30.0),
        "k_pitch": (0.5, 0.7),
        "k_roll": (0.4, 0.6),
        "lag": (1, 3),
    },
    "B": {
        "cruise_speed": (17.0, 22.0),
        "dash_factor": (1.15, 1.25),
        "approach_speed": (13.0, 15.5),
        "climb_rate": (1.4, 2.2),
        "descent_rate": (1.2, 1.8),
        "loiter_bank_deg": (28.0, 38.0),
        "k_pitch": (0.6, 0.75),
        "rotate_speed": (13.0, 15.0),
        "k_roll": (0.25, 0.35),
        "k_speed": (0.2, 0.3),
        "thrust": (3.0, 3.5),
        "drag": (0.004, 0.005),
        "lag": (2, 4),
    },
}


@dataclass
class SimConfig:
    count: int = 120
    seed: int = 0
    variant: str = "A"
    min_len: int = 800
    max_len: int = 2500
    min_commands: int = 3
    max_commands: int = 7
    param_ranges: dict | None = None
    max_attempts: int = 50

    def ranges(self) -> dict:
        if self.param_ranges is not None:
            return self.param_ranges
        if self.variant not in VARIANT_RANGES:
            raise ValueError(f"unknown simulator variant {self.variant!r}")
        return VARIANT_RANGES[self.variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["param_ranges"] = {k: list(v) for k, v in self.ranges().items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if d.get("param_ranges") is not None:
            d["param_ranges"] = {k: tuple(v) for k, v in d["param_ranges"].items()}
        return cls(**d)


def sample_params(rng: np.random.Generator, ranges: dict) -> AircraftParams:
    kw = {}
    for name in sorted(ranges):
        lo, hi = ranges[name]
        if name == "lag":
            kw[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            kw[name] = float(rng.uniform(lo, hi))
    return AircraftParams(**kw)


def generate_flight(config: SimConfig, index: int):
    """Flight ``index`` of a dataset; resamples until the length bounds hold."""
    constraints = PlanConstraints(min_commands=config.min_commands, max_commands=config.max_commands)
    for attempt in range(config.max_attempts):
        ss = np.random.SeedSequence([config.seed, index, attempt])
        plan_seed, param_seed, sim_seed = ss.spawn(3)
        plan = generate_flight_plan(plan_seed, constraints)
        params = sample_params(np.random.default_rng(param_seed), config.ranges())
        try:
            trace, cp = simulate_flight(plan, params, sim_seed, max_steps=config.max_len + 1)
        except SimulationDivergence:
            continue
        if config.min_len <= trace.length <= config.max_len:
            return trace, cp, plan, params
    raise RuntimeError(f"flight {index}: no plan within length bounds after {config.max_attempts} attempts")


def generate_dataset(config: SimConfig, directory: Path | str | None = None) -> Dataset:
    """Simulate ``config.count`` flights; optionally write CSVs + manifest."""
    if config.count < 1:
        raise ValueError("count must be at least 1")
    traces, names, plans = [], [], []
    for i in range(config.count):
        trace, cp, plan, _ = generate_flight(config, i)
        traces.append((trace, cp))
        names.append(f"flight_{i:04d}")
        plans.append([c.to_dict() for c in plan.commands])
    dataset = Dataset(tuple(traces), CATALOG, tuple(names))
    if directory is not None:
        directory = Path(directory)
        save_dataset(dataset, directory, extra=config.to_dict())
        (directory / "plans.json").write_text(json.dumps(dict(zip(names, plans)), indent=1) + "\n")
    return dataset
