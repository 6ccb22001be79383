"""Synthetic drivers: ocular responses to probe trains under impairment.

Each checkup is simulated once as a noiseless underlying response (saccades,
pupil dilations, blinks) and then rendered into two DMS streams: the native
stream at 60 Hz and the cloud stream, a 30 Hz re-sampling with 20% more gaze
noise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import UnknownDose
from .probe import ProbeTrain
from .telemetry import (
    ALCOHOL,
    CLOUD,
    CONDITIONS,
    FATIGUE,
    NATIVE,
    SOBER,
    THC,
    TIME_ON_TASK,
    Trace,
)

SACCADE_DURATION = 0.05
PUPIL_RISE = 0.5
PUPIL_DECAY_TAU = 1.5
PUPIL_BASE_MM = 4.0
PUPIL_NOISE_MM = 0.02
MIN_LATENCY_MS = 100.0
CLOUD_NOISE_GAIN = 1.2
CLOUD_DECIMATION = 2

# population distributions: (low, high) of a uniform draw per field
PROFILE_RANGES = {
    "latency_mu": (180.0, 420.0),
    "latency_sd": (20.0, 60.0),
    "hit_rate": (0.8, 1.0),
    "pupil_amp": (0.2, 0.8),
    "pupil_lat": (600.0, 1000.0),
    "blink_rate": (6.0, 20.0),
    "blink_dur": (100.0, 300.0),
    "anticipation": (-4.0, -1.0),
    "gaze_noise": (0.05, 0.15),
}


@dataclass(frozen=True)
class DriverProfile:
    latency_mu: float = 300.0  # ms
    latency_sd: float = 40.0  # ms
    hit_rate: float = 0.9
    pupil_amp: float = 0.5  # mm
    pupil_lat: float = 800.0  # ms
    blink_rate: float = 12.0  # per minute
    blink_dur: float = 200.0  # ms
    anticipation: float = -2.0  # ms per Standard event in a run
    gaze_noise: float = 0.1  # degrees RMS

    def check(self, sober: bool = True) -> None:
        if not 100 <= self.latency_mu <= 600:
            raise ValueError(f"latency_mu {self.latency_mu} outside [100, 600]")
        lo = 0.5 if sober else 0.0
        if not lo <= self.hit_rate <= 1:
            raise ValueError(f"hit_rate {self.hit_rate} outside [{lo}, 1]")
        if not (0.05 if sober else 0.0) <= self.pupil_amp <= 1.0:
            raise ValueError(f"pupil_amp {self.pupil_amp} outside range")
        if self.anticipation > 0:
            raise ValueError("anticipation must be <= 0")
        if self.latency_sd < 0 or self.blink_rate < 0 or self.blink_dur < 0 or self.gaze_noise < 0:
            raise ValueError("negative dispersion/rate parameter")


@dataclass(frozen=True)
class ImpairmentSpec:
    condition: str = SOBER
    severity: float = 0.0
    d_latency: float = 120.0  # ms per unit severity
    d_hit: float = -0.25
    d_pupil: float = -0.5  # fraction of pupil_amp
    d_blink: float = 8.0  # blinks/min
    d_anticip: float = -1.0  # fraction of anticipation

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if not 0 <= self.severity <= 1:
            raise ValueError(f"severity {self.severity} outside [0, 1]")

    @classmethod
    def sober(cls) -> "ImpairmentSpec":
        return cls()


def sample_profile(seed: int) -> DriverProfile:
    rng = np.random.default_rng(seed)
    draws = rng.random(len(PROFILE_RANGES))
    kw = {name: lo + u * (hi - lo) for (name, (lo, hi)), u in zip(PROFILE_RANGES.items(), draws)}
    return DriverProfile(**kw)


def severity_for(condition: str, dose=None) -> float:
    """Map a condition and its dose descriptor to an impairment level in [0, 1].

    Alcohol takes a breathalyzer reading in µg (240 maps to 0.7), THC takes
    ``"smoked"``, Fatigue a KSS level 1..9, TimeOnTask hours behind the wheel.
    """
    if condition == SOBER:
        return 0.0
    if condition == ALCOHOL:
        if isinstance(dose, bool) or not isinstance(dose, (int, float)) or not np.isfinite(dose) or dose < 0:
            raise UnknownDose(f"alcohol dose must be a non-negative breathalyzer value, got {dose!r}")
        return float(min(1.0, 0.7 * dose / 240.0))
    if condition == THC:
        if dose != "smoked":
            raise UnknownDose(f"THC dose must be 'smoked', got {dose!r}")
        return 0.45
    if condition == FATIGUE:
        if isinstance(dose, bool) or not isinstance(dose, (int, float)) or dose != int(dose) or not 1 <= dose <= 9:
            raise UnknownDose(f"fatigue dose must be a KSS level 1..9, got {dose!r}")
        return (int(dose) - 1) / 8.0
    if condition == TIME_ON_TASK:
        if isinstance(dose, bool) or not isinstance(dose, (int, float)) or not np.isfinite(dose) or dose < 0:
            raise UnknownDose(f"time-on-task dose must be hours >= 0, got {dose!r}")
        return float(min(1.0, dose / 10.0) * 0.6)
    raise UnknownDose(f"unknown condition {condition!r}")


def effective_profile(profile: DriverProfile, impairment: ImpairmentSpec) -> DriverProfile:
    lam = impairment.severity
    if lam == 0:
        return profile
    return replace(
        profile,
        latency_mu=float(np.clip(profile.latency_mu + lam * impairment.d_latency, 100.0, 600.0)),
        hit_rate=float(np.clip(profile.hit_rate + lam * impairment.d_hit, 0.0, 1.0)),
        pupil_amp=float(np.clip(profile.pupil_amp * (1.0 + lam * impairment.d_pupil), 0.0, 1.0)),
        blink_rate=float(max(0.0, profile.blink_rate + lam * impairment.d_blink)),
        anticipation=float(min(0.0, profile.anticipation * max(0.0, 1.0 + lam * impairment.d_anticip))),
    )


@dataclass(frozen=True)
class Response:
    """Ground truth behind one simulated checkup (train-relative seconds)."""

    event_t: np.ndarray
    hit: np.ndarray
    latency_ms: np.ndarray  # nan where missed
    streak: np.ndarray
    targets: np.ndarray  # (n_events, 2)
    deviant: np.ndarray
    blink_onsets: np.ndarray
    blink_dur_s: float
    pupil_amp: float
    pupil_lat_s: float
    gaze_noise: float


@dataclass(frozen=True)
class SimulatedCheckup:
    native: Trace
    cloud: Trace
    response: Response

    def stream(self, stream_id: str) -> Trace:
        return self.native if stream_id == NATIVE else self.cloud


def _child_rngs(seed, n: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def simulate_response(profile: DriverProfile, impairment: ImpairmentSpec, train: ProbeTrain, rng: np.random.Generator) -> Response:
    eff = effective_profile(profile, impairment)
    n = len(train.events)
    u_hit = rng.random(n)
    z_lat = rng.standard_normal(n)
    n_blinks = rng.poisson(eff.blink_rate * train.duration / 60.0) if eff.blink_rate > 0 else 0
    u_blink = rng.random(n_blinks)

    deviant = train.deviant_mask
    streak = train.standard_streaks()
    antic = np.where(deviant, 0.0, eff.anticipation * streak)
    lat = np.maximum(MIN_LATENCY_MS, eff.latency_mu + antic + eff.latency_sd * z_lat)
    hit = u_hit < eff.hit_rate
    return Response(
        event_t=train.times,
        hit=hit,
        latency_ms=np.where(hit, lat, np.nan),
        streak=streak,
        targets=train.led_positions(),
        deviant=deviant,
        blink_onsets=np.sort(u_blink * train.duration),
        blink_dur_s=eff.blink_dur / 1000.0,
        pupil_amp=eff.pupil_amp,
        pupil_lat_s=eff.pupil_lat / 1000.0,
        gaze_noise=eff.gaze_noise,
    )


def _render_clean(resp: Response, t_local: np.ndarray):
    """Noiseless gaze, pupil, eyelid and tracking mask on the given grid."""
    # gaze: ramps between successive fixation targets, starting at straight ahead
    starts = resp.event_t[resp.hit] + resp.latency_ms[resp.hit] / 1000.0
    targets = resp.targets[resp.hit]
    order = np.argsort(starts, kind="stable")
    starts, targets = starts[order], targets[order]
    points = np.vstack([[0.0, 0.0], targets])
    k = np.searchsorted(starts, t_local, side="right")
    frac = np.zeros_like(t_local)
    moving = k > 0
    frac[moving] = np.clip((t_local[moving] - starts[k[moving] - 1]) / SACCADE_DURATION, 0.0, 1.0)
    prev = points[np.maximum(k - 1, 0)]
    prev[~moving] = points[0]
    cur = points[k]
    gaze = prev + frac[:, None] * (cur - prev)
    gaze[~moving] = points[0]

    pupil = np.full_like(t_local, PUPIL_BASE_MM)
    if resp.pupil_amp > 0:
        for te in resp.event_t[resp.deviant]:
            peak = te + resp.pupil_lat_s
            rise0 = max(te, peak - PUPIL_RISE)
            rising = (t_local >= rise0) & (t_local < peak)
            pupil[rising] += resp.pupil_amp * (t_local[rising] - rise0) / (peak - rise0)
            after = t_local >= peak
            pupil[after] += resp.pupil_amp * np.exp(-(t_local[after] - peak) / PUPIL_DECAY_TAU)

    lid = np.ones_like(t_local)
    for b in resp.blink_onsets:
        lid[(t_local >= b) & (t_local < b + resp.blink_dur_s)] = 0.0
    tracked = lid > 0
    return gaze, pupil, lid, tracked


def _make_stream(t_local, gaze, pupil, lid, tracked, noise_deg, rng, onset, rate, stream_id) -> Trace:
    n = len(t_local)
    axis_sd = noise_deg / np.sqrt(2.0)
    gx = gaze[:, 0] + axis_sd * rng.standard_normal(n)
    gy = gaze[:, 1] + axis_sd * rng.standard_normal(n)
    p = pupil + PUPIL_NOISE_MM * rng.standard_normal(n)
    gx[~tracked] = np.nan
    gy[~tracked] = np.nan
    p[~tracked] = np.nan
    return Trace(onset + t_local, gx, gy, p, lid, tracked, rate=rate, stream_id=stream_id)


def simulate_checkup(
    profile: DriverProfile,
    impairment: ImpairmentSpec,
    train: ProbeTrain,
    seed,
    onset: float = 0.0,
    rate: float = 60.0,
) -> SimulatedCheckup:
    """Simulate one checkup and render both DMS streams from the same response."""
    r_resp, r_native, r_cloud = _child_rngs(seed, 3)
    resp = simulate_response(profile, impairment, train, r_resp)
    n = int(round(train.duration * rate))
    t_local = np.arange(n) / rate
    gaze, pupil, lid, tracked = _render_clean(resp, t_local)
    native = _make_stream(t_local, gaze, pupil, lid, tracked, resp.gaze_noise, r_native, onset, rate, NATIVE)
    sl = slice(None, None, CLOUD_DECIMATION)
    cloud = _make_stream(
        t_local[sl], gaze[sl], pupil[sl], lid[sl], tracked[sl],
        resp.gaze_noise * CLOUD_NOISE_GAIN, r_cloud, onset, rate / CLOUD_DECIMATION, CLOUD,
    )
    return SimulatedCheckup(native, cloud, resp)


def simulate_trace(
    profile: DriverProfile,
    impairment: ImpairmentSpec,
    train: ProbeTrain,
    seed,
    onset: float = 0.0,
    stream_id: str = NATIVE,
) -> Trace:
    return simulate_checkup(profile, impairment, train, seed, onset=onset).stream(stream_id)


def profile_to_dict(profile: DriverProfile) -> dict:
    return {f.name: getattr(profile, f.name) for f in fields(profile)}
