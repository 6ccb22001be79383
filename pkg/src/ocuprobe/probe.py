"""LED probe trains and checkup scheduling.

A probe train is a 30 s sequence of LED changes on a small ring of LEDs in the
driver's visual periphery. Standard changes step the lit LED one position
around the ring; deviant changes jump by any other step, breaking the
established progression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation, ParseError, PolicyError

TRAIN_DURATION = 30.0
RING_RADIUS = 10.0  # degrees, LED ring around the array centre
MAX_DEVIANT_FRACTION = 0.3

STANDARD = "Standard"
DEVIANT = "Deviant"


def _q9(x: float) -> float:
    return float(f"{x:.9g}")


@dataclass(frozen=True)
class ProbeConfig:
    n_leds: int = 8
    base_interval: float = 1.0
    interval_jitter: float = 0.2
    deviant_prob: float = 0.15
    eccentricity: float = 25.0
    duration: float = TRAIN_DURATION

    def validate(self) -> None:
        if int(self.n_leds) != self.n_leds or self.n_leds < 2:
            raise ConfigError(f"n_leds must be an integer >= 2, got {self.n_leds}")
        if not self.base_interval > 0:
            raise ConfigError(f"base_interval must be > 0, got {self.base_interval}")
        if not 0 <= self.interval_jitter < 1:
            raise ConfigError(f"interval_jitter must be in [0, 1), got {self.interval_jitter}")
        if not 0 <= self.deviant_prob <= MAX_DEVIANT_FRACTION:
            raise ConfigError(f"deviant_prob must be in [0, 0.3], got {self.deviant_prob}")
        if not self.duration > 0:
            raise ConfigError(f"duration must be > 0, got {self.duration}")


@dataclass(frozen=True)
class LedEvent:
    t: float
    led_index: int
    kind: str = STANDARD


@dataclass(frozen=True)
class ProbeTrain:
    events: tuple[LedEvent, ...]
    duration: float = TRAIN_DURATION
    eccentricity: float = 25.0
    n_leds: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        self.validate()

    def validate(self) -> None:
        prev = -math.inf
        n_dev = 0
        for i, ev in enumerate(self.events):
            if not 0 <= ev.t < self.duration:
                raise ConfigError(f"event {i}: t={ev.t} outside [0, {self.duration})")
            if ev.t <= prev:
                raise ConfigError(f"event {i}: times must be strictly increasing")
            if not 0 <= ev.led_index < self.n_leds:
                raise ConfigError(f"event {i}: led_index {ev.led_index} out of range")
            if ev.kind not in (STANDARD, DEVIANT):
                raise ConfigError(f"event {i}: unknown kind {ev.kind!r}")
            if ev.kind == DEVIANT:
                if i < 2:
                    raise ConfigError("deviant events cannot open a train")
                n_dev += 1
            prev = ev.t
        if self.events and n_dev / len(self.events) > MAX_DEVIANT_FRACTION:
            raise ConfigError("deviant fraction exceeds 0.3")

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    @property
    def deviant_mask(self) -> np.ndarray:
        return np.array([e.kind == DEVIANT for e in self.events], dtype=bool)

    def led_positions(self) -> np.ndarray:
        """(n_events, 2) gaze coordinates in degrees of each event's lit LED."""
        idx = np.array([e.led_index for e in self.events], dtype=float)
        return led_position(idx, self.n_leds, self.eccentricity)

    def standard_streaks(self) -> np.ndarray:
        """Position of each event within its current run of Standard events.

        Deviants reset the run and get index 0, as does the first event.
        """
        out = np.zeros(len(self.events), dtype=int)
        run = 0
        for i, ev in enumerate(self.events):
            if ev.kind == DEVIANT:
                run = 0
                out[i] = 0
            else:
                out[i] = run
                run += 1
        return out

    def to_dict(self) -> dict:
        return {
            "v": 1,
            "duration": self.duration,
            "eccentricity": self.eccentricity,
            "n_leds": self.n_leds,
            "seed": self.seed,
            "events": [{"t": e.t, "led": e.led_index, "kind": e.kind} for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeTrain":
        if d.get("v") != 1:
            raise ParseError(f"unsupported probe train version {d.get('v')!r}")
        try:
            events = [LedEvent(float(e["t"]), int(e["led"]), str(e["kind"])) for e in d["events"]]
            return cls(
                events=tuple(events),
                duration=float(d["duration"]),
                eccentricity=float(d["eccentricity"]),
                n_leds=int(d["n_leds"]),
                seed=int(d["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed probe train: {exc}") from exc


def led_position(led_index, n_leds: int, eccentricity: float) -> np.ndarray:
    angle = 2.0 * np.pi * np.asarray(led_index, dtype=float) / n_leds
    return np.stack([eccentricity + RING_RADIUS * np.cos(angle), RING_RADIUS * np.sin(angle)], axis=-1)


def generate_probe_train(config: ProbeConfig, seed: int) -> ProbeTrain:
    """Draw one probe train; identical (config, seed) pairs give identical trains."""
    config.validate()
    rng = np.random.default_rng(seed)
    n = int(config.n_leds)
    deviant_steps = list(range(2, n)) or [0]

    events: list[LedEvent] = []
    t = 0.0
    led = 0
    n_dev = 0
    while True:
        t_q = _q9(t)
        if t_q >= config.duration:
            break
        # fixed draw pattern per event keeps trains reproducible across parameter changes
        u_interval, u_dev, u_step = rng.random(3)
        i = len(events)
        kind = STANDARD
        if i >= 2 and u_dev < config.deviant_prob and (n_dev + 1) <= MAX_DEVIANT_FRACTION * (i + 1):
            kind = DEVIANT
        if i > 0:
            step = deviant_steps[int(u_step * len(deviant_steps))] if kind == DEVIANT else 1
            led = (led + step) % n
        if kind == DEVIANT:
            n_dev += 1
        events.append(LedEvent(t_q, led, kind))
        t += config.base_interval * (1.0 + config.interval_jitter * (2.0 * u_interval - 1.0))

    return ProbeTrain(
        events=tuple(events),
        duration=float(config.duration),
        eccentricity=float(config.eccentricity),
        n_leds=n,
        seed=int(seed),
    )


@dataclass(frozen=True)
class CheckupPolicy:
    period: float = 1800.0
    phase: float = 0.0


def schedule_checkups(shift_duration: float, policy: CheckupPolicy, train_duration: float = TRAIN_DURATION) -> list[float]:
    if policy.period <= train_duration:
        raise PolicyError(f"checkup period {policy.period} s must exceed the {train_duration} s train")
    if not 0 <= policy.phase < policy.period:
        raise PolicyError(f"phase {policy.phase} must be in [0, period)")
    onsets = []
    k = 0
    while True:
        onset = policy.phase + k * policy.period
        if onset + train_duration > shift_duration:
            break
        onsets.append(float(onset))
        k += 1
    return onsets


def write_probe_train(train: ProbeTrain, path: Path) -> None:
    Path(path).write_text(json.dumps(train.to_dict(), separators=(",", ":")) + "\n")


def read_probe_train(path: Path) -> ProbeTrain:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, path=str(path)) from exc
    try:
        return ProbeTrain.from_dict(d)
    except ConfigError as exc:
        raise InvariantViolation(str(exc), path=str(path)) from exc
