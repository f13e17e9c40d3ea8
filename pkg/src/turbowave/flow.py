"""Conditional flow matching: probability path, CFM objective, and ODE sampling.

Training regresses the network onto the constant target velocity of a linear
interpolant between noise and data; sampling integrates the learned field
from t=0 to t=1 with fixed-step explicit solvers.  The few-step generator is
the same integration with a short Euler grid, kept differentiable so the
adversarial stage can optimize through all steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, LengthError
from .signal import as_samples

SOLVERS = ("euler", "midpoint")


@dataclass(frozen=True)
class ProbabilityPath:
    """Linear interpolant x_t = (1-(1-sigma_min)t)*x0 + t*x1."""

    sigma_min: float = 1e-4

    def __post_init__(self):
        if not (0 < self.sigma_min < 1):
            raise ConfigError(f"sigma_min must lie in (0, 1), got {self.sigma_min}")


@dataclass(frozen=True)
class TimeGrid:
    """Integration knots in [0,1) with an implicit terminal time of 1.0."""

    knots: tuple
    solver: str = "euler"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        k = tuple(float(t) for t in self.knots)
        if not k or k[0] != 0.0:
            raise ConfigError("time grid must start at 0")
        if any(b <= a for a, b in zip(k, k[1:])) or k[-1] >= 1.0:
            raise ConfigError("knots must be strictly increasing and below 1")
        object.__setattr__(self, "knots", k)

    @classmethod
    def uniform(cls, n_steps: int, solver: str = "euler") -> "TimeGrid":
        if n_steps < 1:
            raise ConfigError("need at least one step")
        return cls(tuple(i / n_steps for i in range(n_steps)), solver)

    @property
    def n_steps(self) -> int:
        return len(self.knots)

    @property
    def nfe(self) -> int:
        """Function evaluations per sample: Euler 1/step, Midpoint 2/step."""
        return self.n_steps * (2 if self.solver == "midpoint" else 1)


def sample_interpolant(path: ProbabilityPath, x0, x1, t):
    """Return (x_t, u_target) on the linear path at time t.

    t may be a scalar or a per-item tensor broadcast over trailing dims.
    """
    a, b = as_samples(x0), as_samples(x1)
    if a.shape != b.shape:
        raise LengthError(f"x0/x1 shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    t = torch.as_tensor(t, dtype=a.dtype)
    while t.dim() < a.dim():
        t = t.unsqueeze(-1)
    # coefficient written as (1-t) + sigma*t so both endpoints are exact in
    # floating point: t=0 -> 1, t=1 -> sigma_min
    x_t = ((1 - t) + path.sigma_min * t) * a + t * b
    u_target = b - (1 - path.sigma_min) * a
    return x_t, u_target


def cfm_loss(est, path: ProbabilityPath, x1: torch.Tensor, cond, rng: torch.Generator) -> torch.Tensor:
    """Flow-matching MSE between the estimated field and the path's target.

    Draw order from rng is fixed and part of the contract: first t of shape
    (batch,) uniform on [0,1], then x0 of x1's shape from a standard normal.
    """
    x1 = as_samples(x1)
    if x1.dim() == 1:
        x1 = x1[None, :]
    if x1.shape[0] < 1:
        raise ConfigError("batch must be non-empty")
    t = torch.rand(x1.shape[0], generator=rng, dtype=x1.dtype)
    x0 = torch.randn(x1.shape, generator=rng, dtype=x1.dtype)
    x_t, u_target = sample_interpolant(path, x0, x1, t)
    u_est = est(x_t, cond, t)
    return ((u_est - u_target) ** 2).mean()


def ode_sample(est, x0, c, grid: TimeGrid) -> torch.Tensor:
    """Integrate the learned field from x0 at t=0 to t=1 over the grid.

    est is any callable (x, c, t) -> field with x's shape; gradients flow
    through every step.
    """
    x = as_samples(x0)
    times = grid.knots + (1.0,)
    for t, t_next in zip(times, times[1:]):
        dt = t_next - t
        if grid.solver == "euler":
            x = x + dt * est(x, c, t)
        else:
            k1 = est(x, c, t)
            x_mid = x + (dt / 2) * k1
            x = x + dt * est(x_mid, c, t + dt / 2)
    return x


FIXED_STEP_GRIDS = {
    2: TimeGrid((0.0, 0.5), "euler"),
    4: TimeGrid((0.0, 0.25, 0.5, 0.75), "euler"),
}


def fixed_step_generate(est, x0, c, n_steps: int = 4) -> torch.Tensor:
    """Few-step Euler generation on the fixed grid; the fine-tuning target."""
    if n_steps not in FIXED_STEP_GRIDS:
        raise ConfigError(f"fixed-step generation supports {sorted(FIXED_STEP_GRIDS)} steps, got {n_steps}")
    return ode_sample(est, x0, c, FIXED_STEP_GRIDS[n_steps])
