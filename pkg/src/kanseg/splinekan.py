"""
B-spline bases and the KAN linear layer.

Every edge ``(j, i)`` of a KAN layer carries its own univariate activation

    phi_ji(x) = base_weights[j, i] * silu(x) + sum_g spline_coeffs[j, i, g] * B_g(x)

and output ``j`` is the sum of the activations of all incoming edges. The
spline argument is clamped to ``[grid_min, grid_max]``; the SiLU branch sees
the raw input.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import Tensor, _make, as_tensor, silu_derivative, silu_values

__all__ = [
    "SplineGrid",
    "KanLinearParams",
    "bspline_basis",
    "bspline_bases",
    "kan_linear",
    "kan_linear_forward",
    "activation_curve",
    "activation_variance_report",
    "export_activation_curves",
    "probe_points",
]


@dataclass(frozen=True)
class SplineGrid:
    grid_min: float = -2.0
    grid_max: float = 2.0
    intervals: int = 5
    order: int = 3
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.grid_min) and np.isfinite(self.grid_max)):
            raise ConfigurationError("grid bounds must be finite")
        if not self.grid_min < self.grid_max:
            raise ConfigurationError(
                f"grid_min ({self.grid_min}) must be below grid_max ({self.grid_max})"
            )
        if int(self.intervals) != self.intervals or self.intervals < 1:
            raise ConfigurationError(f"intervals must be an integer >= 1, got {self.intervals}")
        if int(self.order) != self.order or self.order < 1:
            raise ConfigurationError(f"order must be an integer >= 1, got {self.order}")
        step = (self.grid_max - self.grid_min) / self.intervals
        ks = np.arange(-self.order, self.intervals + self.order + 1)
        knots = self.grid_min + ks * step
        knots[self.order] = self.grid_min
        knots[self.order + self.intervals] = self.grid_max
        object.__setattr__(self, "knots", knots)

    @property
    def num_basis(self) -> int:
        return self.intervals + self.order

    @property
    def step(self) -> float:
        return (self.grid_max - self.grid_min) / self.intervals

    def to_dict(self) -> dict:
        return {
            "grid_min": float(self.grid_min),
            "grid_max": float(self.grid_max),
            "intervals": int(self.intervals),
            "order": int(self.order),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineGrid":
        return cls(
            float(d["grid_min"]), float(d["grid_max"]), int(d["intervals"]), int(d["order"])
        )


def _clamp(x: np.ndarray, grid: SplineGrid) -> np.ndarray:
    return np.clip(x, grid.grid_min, grid.grid_max)


def _bases_of_order(x: np.ndarray, t: np.ndarray, order: int) -> np.ndarray:
    """Cox-de Boor recursion up to ``order`` for already clamped ``x``."""
    x = x[..., None]
    bases = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    for p in range(1, order + 1):
        left = (x - t[: -p - 1]) / (t[p:-1] - t[: -p - 1])
        right = (t[p + 1 :] - x) / (t[p + 1 :] - t[1:-p])
        bases = left * bases[..., :-1] + right * bases[..., 1:]
    return bases


def bspline_bases(x, grid: SplineGrid, derivative: bool = False):
    """Evaluate all ``G + k`` basis functions at every entry of ``x``.

    Returns an array of shape ``x.shape + (G + k,)``. With ``derivative=True``
    also returns d/dx of each basis (zero where ``x`` was clamped).
    """
    x = np.asarray(x, dtype=np.float64)
    t = grid.knots
    k = grid.order
    xc = _clamp(x, grid)
    values = _bases_of_order(xc, t, k)
    if not derivative:
        return values
    lower = _bases_of_order(xc, t, k - 1)
    left = k / (t[k:-1] - t[: -k - 1])
    right = k / (t[k + 1 :] - t[1:-k])
    d = left * lower[..., :-1] - right * lower[..., 1:]
    inside = (x >= grid.grid_min) & (x <= grid.grid_max)
    d = d * inside[..., None]
    return values, d


def bspline_basis(x: float, grid: SplineGrid) -> np.ndarray:
    """Basis values ``B_0(x) .. B_{G+k-1}(x)`` for a single real ``x``."""
    if not np.isfinite(x):
        raise ValueError("bspline_basis: x must be finite")
    return bspline_bases(np.asarray(float(x)), grid)


@dataclass
class KanLinearParams:
    base_weights: np.ndarray  # [m, n]
    spline_coeffs: np.ndarray  # [m, n, G + k]
    grid: SplineGrid = field(default_factory=SplineGrid)

    def __post_init__(self):
        self.base_weights = np.asarray(self.base_weights, dtype=np.float64)
        self.spline_coeffs = np.asarray(self.spline_coeffs, dtype=np.float64)
        m, n = self.base_weights.shape
        if self.spline_coeffs.shape != (m, n, self.grid.num_basis):
            raise DimensionError(
                f"spline_coeffs shape {self.spline_coeffs.shape} != {(m, n, self.grid.num_basis)}"
            )
        if not (np.all(np.isfinite(self.base_weights)) and np.all(np.isfinite(self.spline_coeffs))):
            raise ConfigurationError("KAN coefficients must be finite")

    @property
    def in_dim(self) -> int:
        return self.base_weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_weights.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, grid: SplineGrid | None = None, rng=None):
        grid = grid or SplineGrid()
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(in_dim)
        base = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        coeffs = rng.normal(0.0, 0.1 / np.sqrt(in_dim), size=(out_dim, in_dim, grid.num_basis))
        return cls(base, coeffs, grid)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, grid: SplineGrid | None = None):
        grid = grid or SplineGrid()
        return cls(np.zeros((out_dim, in_dim)), np.zeros((out_dim, in_dim, grid.num_basis)), grid)


def kan_linear(x, base_weights, spline_coeffs, grid: SplineGrid) -> Tensor:
    """Differentiable KAN layer on tensors; ``x`` has shape [..., n]."""
    x, bw, sc = as_tensor(x), as_tensor(base_weights), as_tensor(spline_coeffs)
    m, n = bw.shape
    if x.shape[-1] != n:
        raise DimensionError(f"kan_linear: input last axis = {x.shape[-1]}, layer expects {n}")
    if sc.shape != (m, n, grid.num_basis):
        raise DimensionError(f"kan_linear: spline_coeffs shape {sc.shape} != {(m, n, grid.num_basis)}")
    lead = x.shape[:-1]
    xf = x.data.reshape(-1, n)
    act = silu_values(xf)
    bases, dbases = bspline_bases(xf, grid, derivative=True)  # P,n,K
    P = xf.shape[0]
    flat_bases = bases.reshape(P, -1)
    flat_coeffs = sc.data.reshape(m, -1)
    out = act @ bw.data.T + flat_bases @ flat_coeffs.T

    def grad_fn(g):
        gf = g.reshape(P, m)
        gbw = gf.T @ act if bw.requires_grad else None
        gsc = (gf.T @ flat_bases).reshape(sc.shape) if sc.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (gf @ bw.data) * silu_derivative(xf)
            gx = gx + np.einsum("pm,mnk,pnk->pn", gf, sc.data, dbases, optimize=True)
            gx = gx.reshape(x.shape)
        return gx, gbw, gsc

    out = out.astype(x.data.dtype, copy=False)
    return _make(out.reshape(*lead, m), (x, bw, sc), grad_fn, "kan_linear")


def kan_linear_forward(x, params: KanLinearParams) -> Tensor:
    return kan_linear(x, Tensor(params.base_weights), Tensor(params.spline_coeffs), params.grid)


def _check_edge(params: KanLinearParams, out_idx: int, in_idx: int) -> None:
    if not 0 <= out_idx < params.out_dim:
        raise ValueError(f"out_idx {out_idx} outside [0, {params.out_dim})")
    if not 0 <= in_idx < params.in_dim:
        raise ValueError(f"in_idx {in_idx} outside [0, {params.in_dim})")


def activation_curve(params: KanLinearParams, out_idx: int, in_idx: int, xs) -> np.ndarray:
    """Sample the learned activation of one edge at ``xs``."""
    _check_edge(params, out_idx, in_idx)
    xs = np.asarray(xs, dtype=np.float64)
    base = params.base_weights[out_idx, in_idx] * silu_values(xs)
    return base + bspline_bases(xs, params.grid) @ params.spline_coeffs[out_idx, in_idx]


def probe_points(grid: SplineGrid, count: int = 256) -> np.ndarray:
    return np.linspace(grid.grid_min, grid.grid_max, count)


def activation_variance_report(params: KanLinearParams, probe_xs=None, thresholds=(1.0, 0.1)):
    """Fraction of edges whose activation variance over ``probe_xs`` is below each threshold."""
    if probe_xs is None:
        probe_xs = probe_points(params.grid)
    probe_xs = np.asarray(probe_xs, dtype=np.float64)
    if probe_xs.size == 0:
        raise ValueError("activation_variance_report: probe_xs is empty")
    curves = params.base_weights[..., None] * silu_values(probe_xs) + np.einsum(
        "mnk,pk->mnp", params.spline_coeffs, bspline_bases(probe_xs, params.grid)
    )
    variances = curves.var(axis=-1).reshape(-1)
    return np.array([float(np.mean(variances < t)) for t in thresholds])


def export_activation_curves(params: KanLinearParams, out_dir, xs=None, prefix="edge"):
    """Write one ``x,y`` CSV per edge; returns the list of written paths."""
    if xs is None:
        xs = probe_points(params.grid)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for j in range(params.out_dim):
        for i in range(params.in_dim):
            ys = activation_curve(params, j, i, xs)
            path = os.path.join(out_dir, f"{prefix}_{j:03d}_{i:03d}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x", "y"])
                for xv, yv in zip(xs, ys):
                    writer.writerow([repr(float(xv)), repr(float(yv))])
            paths.append(path)
    return paths
