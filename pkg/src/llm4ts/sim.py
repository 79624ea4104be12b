"""StepCountJITAI+LLM participant simulator.

The participant state is ``[c, h, d, w]``: a binary context, habituation and
disengagement levels in [0, 1], and a latent walk-ability flag.  Actions are
0 (no message), 1 (untailored), 2 (tailored to context 0) and 3 (tailored to
context 1).  The simulator with ``p_w11 = 1`` reduces to the base
StepCountJITAI dynamics.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
from typing import Any

import numpy as np

from .errors import ConfigError, StepAfterTermination

# Snap tolerance for "d reached 1" after capping.
DISENGAGE_EPS = 1e-12


class Action(IntEnum):
    NONE = 0
    UNTAILORED = 1
    TAILORED_0 = 2
    TAILORED_1 = 3


ACTIONS = tuple(Action)


@dataclass(frozen=True)
class SimParams:
    sigma_ctx: float = 0.4
    delta_h: float = 0.1
    eps_h: float = 0.05
    delta_d: float = 0.1
    eps_d: float = 0.05
    eta_d: float = 0.05
    rho1: float = 50.0
    rho2: float = 200.0
    m_s: float = 0.1
    p_w00: float = 0.5
    p_w11: float = 0.7
    horizon: int = 50
    h0: float = 0.0
    d0: float = 0.0

    def __post_init__(self):
        for name in ("delta_h", "eps_h", "delta_d", "eps_d", "eta_d", "p_w00", "p_w11", "h0", "d0"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not self.sigma_ctx > 0:
            raise ConfigError(f"sigma_ctx must be positive, got {self.sigma_ctx}")
        for name in ("rho1", "rho2", "m_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon}")
        if self.d0 >= 1.0 - DISENGAGE_EPS:
            raise ConfigError("d0 must be below 1 (the participant would start disengaged)")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "SimParams":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sim parameter(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class EnvState:
    t: int
    c: int
    x: float
    p_ctx: float
    l: int
    h: float
    d: float
    w: int
    disengaged: bool = False


@dataclass(frozen=True)
class Event:
    kind: str  # "WalkTransition" | "Disengaged"
    t: int
    detail: dict = field(default_factory=dict)


def context_posterior(x: float, sigma_ctx: float) -> float:
    """P(C=1 | x) for x ~ N(c, sigma^2) with equal class priors."""
    z = (2.0 * x - 1.0) / (2.0 * sigma_ctx * sigma_ctx)
    # split on sign so exp never overflows
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def sample_context(rng: np.random.Generator, sigma_ctx: float) -> tuple[int, float, float, int]:
    c = int(rng.random() < 0.5)
    x = float(c + sigma_ctx * rng.standard_normal())
    p = context_posterior(x, sigma_ctx)
    return c, x, p, int(p > 0.5)


def update_habituation(h: float, a: int, delta_h: float, eps_h: float) -> float:
    if a == 0:
        return (1.0 - delta_h) * h
    return min(1.0, h + eps_h)


def is_tailoring_correct(a: int, c: int) -> bool:
    return a == 1 or a == c + 2


def update_disengagement(d: float, a: int, c: int, w: int,
                         delta_d: float, eps_d: float, eta_d: float) -> float:
    if a == 0:
        return d
    if is_tailoring_correct(a, c):
        if w == 1:
            return (1.0 - delta_d) * d
        return min(1.0, d + eta_d)
    return min(1.0, d + eps_d + (1 - w) * eta_d)


def step_count(a: int, c: int, w: int, h_next: float,
               m_s: float, rho1: float, rho2: float) -> float:
    """Walking steps credited to action ``a``; ``h_next`` is the post-action habituation."""
    if w == 1 and a == 1:
        return m_s + (1.0 - h_next) * rho1
    if w == 1 and a == c + 2:
        return m_s + (1.0 - h_next) * rho2
    return m_s * w


def update_walk_state(w: int, rng: np.random.Generator, p_w00: float, p_w11: float) -> int:
    u = rng.random()
    if w == 1:
        return 1 if u < p_w11 else 0
    return 0 if u < p_w00 else 1


def stationary_cannot_walk(p_w11: float, p_w00: float) -> float:
    """Long-run fraction of time spent in the can't-walk state."""
    leave_1 = 1.0 - p_w11
    leave_0 = 1.0 - p_w00
    if leave_1 + leave_0 == 0:
        raise ValueError("chain is reducible; no unique stationary distribution")
    return leave_1 / (leave_1 + leave_0)


def initial_state(rng: np.random.Generator, params: SimParams) -> EnvState:
    c, x, p, l = sample_context(rng, params.sigma_ctx)
    return EnvState(t=0, c=c, x=x, p_ctx=p, l=l, h=params.h0, d=params.d0, w=1)


def env_step(state: EnvState, a: int, ctx_rng: np.random.Generator,
             params: SimParams, walk_rng: np.random.Generator | None = None
             ) -> tuple[EnvState, float, list[Event]]:
    """Advance one decision point.

    Habituation, disengagement and reward are computed from the pre-transition
    walk state; the walk chain and the context then move to ``t + 1``.  Walk
    transitions draw from ``walk_rng`` when given so that the context stream is
    unaffected by the walk chain.
    """
    if state.disengaged:
        raise StepAfterTermination(f"environment already terminated at t={state.t}")
    a = int(a)
    if a not in (0, 1, 2, 3):
        raise ValueError(f"invalid action {a}")
    p = params
    h_next = update_habituation(state.h, a, p.delta_h, p.eps_h)
    d_next = update_disengagement(state.d, a, state.c, state.w, p.delta_d, p.eps_d, p.eta_d)
    z = step_count(a, state.c, state.w, h_next, p.m_s, p.rho1, p.rho2)

    events: list[Event] = []
    w_next = update_walk_state(state.w, walk_rng if walk_rng is not None else ctx_rng,
                               p.p_w00, p.p_w11)
    if w_next != state.w:
        events.append(Event("WalkTransition", state.t + 1, {"from": state.w, "to": w_next}))
    disengaged = d_next >= 1.0 - DISENGAGE_EPS
    if disengaged:
        d_next = 1.0
        events.append(Event("Disengaged", state.t + 1, {"action": a}))
    c, x, p_ctx, l = sample_context(ctx_rng, p.sigma_ctx)
    new_state = EnvState(t=state.t + 1, c=c, x=x, p_ctx=p_ctx, l=l,
                         h=h_next, d=d_next, w=w_next, disengaged=disengaged)
    return new_state, z, events


class StepCountEnv:
    """Stateful wrapper around :func:`env_step` with its own random streams."""

    def __init__(self, params: SimParams, seed: int | np.random.SeedSequence | None = None):
        self.params = params
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        ctx_seq, walk_seq = seq.spawn(2)
        self.ctx_rng = np.random.default_rng(ctx_seq)
        self.walk_rng = np.random.default_rng(walk_seq)
        self.state = initial_state(self.ctx_rng, params)

    @property
    def done(self) -> bool:
        return self.state.disengaged

    def step(self, a: int) -> tuple[EnvState, float, list[Event]]:
        self.state, z, events = env_step(self.state, a, self.ctx_rng, self.params, self.walk_rng)
        return self.state, z, events

