"""Multi-stage non-local diffusion inference.

One stage updates the running image u by a learned diffusion term plus a
data-fidelity pull toward the noisy input f:

    u_next = u - ( sum_i conv(Wᵀ phi_i(W conv(u, k_i)), rot180(k_i))
                   + lambda * (u - f) )

where W is the sparse non-local operator built from the neighbor table of
f (computed once, shared by every stage) and each phi_i is a learned RBF
influence function.  With a single neighbor (W = identity) the stage is
exactly the classic local trainable diffusion update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import as_image, convolve, rotate180
from .matching import compute_neighbor_table
from .nonlocal_op import apply_nonlocal, apply_nonlocal_adjoint
from .params import (
    DEFAULT_NUM_RBF,
    DEFAULT_RBF_GAMMA,
    DEFAULT_RBF_RANGE,
    InfluenceWeights,
    dct_filter_bank,
    influence_eval,
    make_local_filter,
    make_nonlocal_filter,
    rbf_centers,
)


@dataclass(frozen=True)
class ModelHyper:
    """Architecture constants shared by every stage."""

    filter_size: int = 5
    num_filters: int = 24
    num_neighbors: int = 3
    num_rbf: int = DEFAULT_NUM_RBF
    rbf_range: float = DEFAULT_RBF_RANGE
    rbf_gamma: float = DEFAULT_RBF_GAMMA
    patch: int = 7
    window: int = 31
    sigma: float = 25.0

    def __post_init__(self):
        if self.filter_size % 2 == 0 or self.filter_size < 3:
            raise ValueError(f"filter size must be odd and >= 3, got {self.filter_size}")
        if not 1 <= self.num_filters <= self.filter_size**2 - 1:
            raise ValueError(
                f"filter count must lie in [1, {self.filter_size ** 2 - 1}], got {self.num_filters}"
            )
        if self.num_neighbors < 1:
            raise ValueError(f"neighbor count must be >= 1, got {self.num_neighbors}")
        if self.patch % 2 == 0 or self.window % 2 == 0:
            raise ValueError("patch and window sizes must be odd")
        if self.window < self.patch:
            raise ValueError(f"window {self.window} smaller than patch {self.patch}")
        if self.num_rbf < 1 or self.rbf_range <= 0 or self.rbf_gamma <= 0:
            raise ValueError("invalid RBF grid")
        if self.sigma < 0:
            raise ValueError(f"noise level must be non-negative, got {self.sigma}")

    @property
    def coeff_count(self) -> int:
        return self.filter_size**2 - 1

    def filter_bank(self) -> np.ndarray:
        return dct_filter_bank(self.filter_size)

    def centers(self) -> np.ndarray:
        return rbf_centers(self.num_rbf, self.rbf_range)

    def stage_param_count(self) -> int:
        return 1 + self.num_filters * (self.coeff_count + self.num_neighbors + self.num_rbf)


@dataclass
class StageParameters:
    """Raw trainables of one diffusion stage.

    lambda_raw: data-term weight through lambda = exp(lambda_raw)
    filters: (num_filters, m*m-1) local filter coefficients c_i
    nonlocal_raw: (num_filters, L) raw neighbor weights b_i
    alphas: (num_filters, M) RBF weights of each influence function
    """

    lambda_raw: float
    filters: np.ndarray
    nonlocal_raw: np.ndarray
    alphas: np.ndarray

    def check(self, hyper: ModelHyper) -> "StageParameters":
        n = hyper.num_filters
        if self.filters.shape != (n, hyper.coeff_count):
            raise ValueError(f"filter coefficients shaped {self.filters.shape}, expected {(n, hyper.coeff_count)}")
        if self.nonlocal_raw.shape != (n, hyper.num_neighbors):
            raise ValueError(f"nonlocal weights shaped {self.nonlocal_raw.shape}, expected {(n, hyper.num_neighbors)}")
        if self.alphas.shape != (n, hyper.num_rbf):
            raise ValueError(f"RBF weights shaped {self.alphas.shape}, expected {(n, hyper.num_rbf)}")
        return self

    @property
    def lam(self) -> float:
        return float(np.exp(self.lambda_raw))


@dataclass
class DiffusionModel:
    hyper: ModelHyper
    stages: list

    def __post_init__(self):
        if not self.stages:
            raise ValueError("model needs at least one stage")
        for stage in self.stages:
            stage.check(self.hyper)

    @property
    def num_stages(self) -> int:
        return len(self.stages)


@dataclass
class StageTrace:
    """Forward intermediates one stage's backprop reuses.

    Per filter i: u_hat = conv(u_prev, k_i), z = W u_hat, and the
    influence values h = phi(z), hprime = phi'(z).
    """

    u_hat: list = field(default_factory=list)
    z: list = field(default_factory=list)
    h: list = field(default_factory=list)
    hprime: list = field(default_factory=list)


def stage_influences(stage: StageParameters, centers: np.ndarray, gamma: float):
    return [InfluenceWeights(stage.alphas[i], centers, gamma) for i in range(stage.alphas.shape[0])]


def diffusion_step(u_prev, f, stage: StageParameters, table, bank, centers, gamma,
                   keep_trace: bool = False):
    """One diffusion stage; returns (u_next, trace or None).

    The trace is only assembled when requested since inference does not
    need it.
    """
    u_prev = as_image(u_prev)
    f = as_image(f)
    if u_prev.shape != f.shape:
        raise ValueError(f"shape mismatch {u_prev.shape} vs {f.shape}")
    if table.shape[0] != u_prev.size:
        raise ValueError(f"neighbor table covers {table.shape[0]} pixels, image has {u_prev.size}")
    trace = StageTrace() if keep_trace else None
    update = stage.lam * (u_prev - f)
    num_filters = stage.filters.shape[0]
    for i in range(num_filters):
        kernel = make_local_filter(stage.filters[i], bank)
        a = make_nonlocal_filter(stage.nonlocal_raw[i])
        w = InfluenceWeights(stage.alphas[i], centers, gamma)
        u_hat = convolve(u_prev, kernel)
        z = apply_nonlocal(u_hat, table, a)
        h, hprime = influence_eval(w, z)
        update += convolve(apply_nonlocal_adjoint(h, table, a), rotate180(kernel))
        if keep_trace:
            trace.u_hat.append(u_hat)
            trace.z.append(z)
            trace.h.append(h)
            trace.hprime.append(hprime)
    return u_prev - update, trace


def denoise_with_trace(f, model: DiffusionModel, table=None):
    """Run all stages from u_0 = f, keeping per-stage inputs and traces.

    Returns (iterates, traces): iterates[t] is u_t for t = 0..T, and
    traces[t-1] belongs to the step producing u_t.
    """
    f = as_image(f)
    hyper = model.hyper
    if table is None:
        table = compute_neighbor_table(f, hyper.patch, hyper.window, hyper.num_neighbors)
    bank = hyper.filter_bank()
    centers = hyper.centers()
    iterates = [f]
    traces = []
    for stage in model.stages:
        u_next, trace = diffusion_step(
            iterates[-1], f, stage, table, bank, centers, hyper.rbf_gamma, keep_trace=True
        )
        iterates.append(u_next)
        traces.append(trace)
    return iterates, traces


def denoise(f, model: DiffusionModel, table=None) -> np.ndarray:
    """Full inference: neighbor table once on f, then T diffusion stages."""
    f = as_image(f)
    hyper = model.hyper
    if table is None:
        table = compute_neighbor_table(f, hyper.patch, hyper.window, hyper.num_neighbors)
    bank = hyper.filter_bank()
    centers = hyper.centers()
    u = f
    for stage in model.stages:
        u, _ = diffusion_step(u, f, stage, table, bank, centers, hyper.rbf_gamma)
    return u
