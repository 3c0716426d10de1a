"""Stochastic SRAM power-up model with bias-temperature aging.

Each cell carries a normalized mismatch ``m`` (threshold difference of the two
pull-up PMOS divided by the noise scale) and an accumulated aging shift
``drift``. A power-up latches 1 iff ``m + drift + sigma * z > 0`` with fresh
``z ~ N(0, 1)``, so a cell's one-probability is ``Phi((m + drift) / sigma)``.

Aging stresses the PMOS that is switched on while the cell holds its latched
state, which always pushes the cell away from the state it just latched. Two
drift laws are available:

``linear``
    Every power-up moves ``drift`` by a constant ``delta`` (down after a 1,
    up after a 0).
``defect``
    Each PMOS captures discrete traps as an inhomogeneous Poisson process in
    its own stress count ``S`` with mean ``trap_count * (S / ref_cycles) ** beta``;
    every trap shifts the mismatch by an exponentially distributed amount with
    mean ``trap_impact``. Mean drift of an always-stressed transistor follows the
    usual ``t**beta`` power law, and because drift arrives in discrete jumps,
    cells that reach balance keep wandering instead of freezing at p = 0.5.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numba
import numpy as np
from scipy.special import ndtr

from .bits import DEFAULT_N, LengthMismatchError, PowerUpPattern, pack_bits

LAWS = ("linear", "defect")
_LAW_CODE = {"linear": 0, "defect": 1}

# |m_eff| / sigma at or above which a cell skips ahead geometrically between flips
NEAR_BAND = 3.0
_NEVER = np.int64(2**62)
_NO_BITS = np.zeros(0, dtype=np.uint8)


@dataclass(frozen=True)
class ModelParams:
    mu_m: float = 5.55
    s_m: float = 17.1
    sigma: float = 1.0
    law: str = "defect"
    delta: float = 0.0
    trap_count: float = 2.0
    trap_impact: float = 0.25
    beta: float = 0.5
    ref_cycles: int = 120_000

    def __post_init__(self):
        if self.law not in LAWS:
            raise ValueError(f"law must be one of {LAWS}, got {self.law!r}")
        if self.s_m < 0 or self.sigma < 0 or self.delta < 0:
            raise ValueError("s_m, sigma and delta must be non-negative")
        if self.trap_count < 0 or self.trap_impact < 0:
            raise ValueError("trap_count and trap_impact must be non-negative")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.ref_cycles < 1:
            raise ValueError("ref_cycles must be >= 1")

    @property
    def aging_enabled(self) -> bool:
        if self.law == "linear":
            return self.delta > 0
        return self.trap_count > 0 and self.trap_impact > 0

    @property
    def mean_drift_at_ref(self) -> float:
        """Expected total shift of an always-stressed cell after ``ref_cycles``."""
        if self.law == "linear":
            return self.delta * self.ref_cycles
        return self.trap_count * self.trap_impact

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model parameter(s): {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


@numba.njit(inline="always")
def _geometric(gen, q):
    # failures before the first success, success probability q
    if q <= 0.0:
        return _NEVER
    if q >= 1.0:
        return np.int64(0)
    g = math.floor(math.log(1.0 - gen.random()) / math.log1p(-q))
    if g >= 4.0e18:
        return _NEVER
    return np.int64(g)


@numba.njit(nogil=True, cache=True)
def _kernel(m, drift, stress, level, next_trap, countdown, noise_gen, aging_gen,
            sigma, law, delta, ntraps, impact, beta, ref,
            latch, age, observed, ncycles, out):
    # latch: sample bits from noise_gen, else read them from ``observed``.
    # age: advance stress/drift after each latched bit.
    # Bodies are written inline: numba helpers taking a Generator cost a
    # call per cell.
    n = m.shape[0]
    record = out.shape[0] > 0
    for t in range(ncycles):
        for i in range(n):
            if latch:
                me = m[i] + drift[i]
                if sigma == 0.0:
                    b = me > 0.0
                else:
                    a = abs(me) / sigma
                    if a < NEAR_BAND:
                        countdown[i] = -1
                        b = me + sigma * noise_gen.standard_normal() > 0.0
                    else:
                        majority = me > 0.0
                        c = countdown[i]
                        if c < 0:
                            c = _geometric(noise_gen, 0.5 * math.erfc(a / math.sqrt(2.0)))
                        if c > 0:
                            countdown[i] = c - 1
                            b = majority
                        else:
                            countdown[i] = _geometric(noise_gen, 0.5 * math.erfc(a / math.sqrt(2.0)))
                            b = not majority
                if record:
                    out[t, i] = b
            else:
                b = observed[i] != 0
            if not age:
                continue
            k = 1 if b else 0
            stress[i, k] += 1
            if law == 0:
                if delta > 0.0:
                    if b:
                        drift[i] -= delta
                    else:
                        drift[i] += delta
                    countdown[i] = -1
            elif stress[i, k] >= next_trap[i, k]:
                while stress[i, k] >= next_trap[i, k]:
                    jump = -impact * math.log(1.0 - aging_gen.random())
                    if b:
                        drift[i] -= jump
                    else:
                        drift[i] += jump
                    lv = level[i, k] - math.log(1.0 - aging_gen.random())
                    level[i, k] = lv
                    next_trap[i, k] = ref * (lv / ntraps) ** (1.0 / beta)
                countdown[i] = -1


def _no_output(n: int) -> np.ndarray:
    return np.zeros((0, n), dtype=np.bool_)


def _device_seeds(seed: int, index: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed, spawn_key=(index,)).spawn(3)


class DevicePopulation:
    """All cells of one simulated SRAM plus their private random streams.

    Devices with the same ``(seed, index)`` are bit-identical; a device is
    independent of how many other devices exist in the same campaign.
    """

    def __init__(self, params: ModelParams, n: int = DEFAULT_N, seed: int = 0, index: int = 0,
                 device_id: str | None = None, mismatch=None):
        if n <= 0:
            raise ValueError("n must be positive")
        self.params = params
        self.n = int(n)
        self.seed = int(seed)
        self.index = int(index)
        self.device_id = device_id if device_id is not None else f"S{index}"
        phys_ss, noise_ss, aging_ss = _device_seeds(self.seed, self.index)
        phys = np.random.default_rng(phys_ss)
        if mismatch is None:
            m = phys.normal(params.mu_m, params.s_m, self.n)
        else:
            m = np.array(mismatch, dtype=np.float64)
            if m.shape != (self.n,):
                raise LengthMismatchError(f"mismatch vector has shape {m.shape}, expected ({self.n},)")
        m.flags.writeable = False
        self.m = m
        self.noise_rng = np.random.default_rng(noise_ss)
        self.aging_rng = np.random.default_rng(aging_ss)
        self.drift = np.zeros(self.n)
        self.stress = np.zeros((self.n, 2), dtype=np.int64)
        self.countdown = np.full(self.n, -1, dtype=np.int64)
        self.level = np.zeros((self.n, 2))
        self.next_trap = np.full((self.n, 2), np.inf)
        if params.law == "defect" and params.trap_count > 0:
            self.level = self.aging_rng.standard_exponential((self.n, 2))
            self.next_trap = params.ref_cycles * (self.level / params.trap_count) ** (1.0 / params.beta)
        self.cycle = 0

    @property
    def m_effective(self) -> np.ndarray:
        return self.m + self.drift

    def one_probability(self) -> np.ndarray:
        """Closed-form per-cell probability of latching 1 at the next power-up."""
        me = self.m_effective
        if self.params.sigma == 0:
            return (me > 0).astype(np.float64)
        return ndtr(me / self.params.sigma)

    def _run(self, latch, age, observed, ncycles, out):
        p = self.params
        _kernel(self.m, self.drift, self.stress, self.level, self.next_trap, self.countdown,
                self.noise_rng, self.aging_rng, float(p.sigma), _LAW_CODE[p.law], float(p.delta),
                float(p.trap_count), float(p.trap_impact), float(p.beta), float(p.ref_cycles),
                latch, age, observed, ncycles, out)

    def state_dict(self) -> dict:
        """Everything needed to resume this device bit-exactly."""
        return {
            "cycle": self.cycle,
            "drift": self.drift.copy(),
            "stress": self.stress.copy(),
            "countdown": self.countdown.copy(),
            "level": self.level.copy(),
            "next_trap": self.next_trap.copy(),
            "noise_rng": self.noise_rng.bit_generator.state,
            "aging_rng": self.aging_rng.bit_generator.state,
        }

    def load_state(self, state: dict) -> None:
        self.cycle = int(state["cycle"])
        for name in ("drift", "stress", "countdown", "level", "next_trap"):
            getattr(self, name)[...] = state[name]
        self.noise_rng.bit_generator.state = state["noise_rng"]
        self.aging_rng.bit_generator.state = state["aging_rng"]


def power_up(device: DevicePopulation) -> PowerUpPattern:
    """Sample one power-up pattern. Does not age the device."""
    out = np.empty((1, device.n), dtype=np.bool_)
    device._run(latch=True, age=False, observed=_NO_BITS, ncycles=1, out=out)
    return PowerUpPattern(out[0])


def apply_aging(device: DevicePopulation, observed: PowerUpPattern) -> DevicePopulation:
    """Age every cell once, away from the state it latched in ``observed``."""
    if observed.n != device.n:
        raise LengthMismatchError(f"observed n={observed.n} but device n={device.n}")
    device._run(latch=False, age=True, observed=observed.bits, ncycles=1, out=_no_output(device.n))
    device.cycle += 1
    return device


def run_cycles(device: DevicePopulation, cycles: int, record: bool = True) -> np.ndarray | None:
    """Power-up and age ``cycles`` times; same streams as alternating
    :func:`power_up` / :func:`apply_aging`.

    Returns the packed ``(cycles, ceil(n/8))`` read-outs, or ``None`` when
    ``record`` is false.
    """
    if cycles < 0:
        raise ValueError("cycles must be >= 0")
    out = np.zeros((cycles if record else 0, device.n), dtype=np.bool_)
    if cycles:
        device._run(latch=True, age=True, observed=_NO_BITS, ncycles=cycles, out=out)
    device.cycle += cycles
    return pack_bits(out) if record else None
