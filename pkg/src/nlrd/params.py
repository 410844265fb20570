"""Maps from raw trainable coefficients to constrained model objects.

Three families, each with the chain-rule factor backprop needs:

* local filters: unit-norm zero-mean kernels spanned by a modified DCT
  basis (the DC atom is dropped), k = B c / ||c||
* non-local filters: unit-norm weight vectors a = b / ||b||
* influence functions: weighted sums of Gaussian RBFs on an equidistant
  center grid, evaluated together with their derivative

Both unit-norm maps share the tangent-space chain
(1/||v||)(I - v̂ v̂ᵀ) applied to the downstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_FLOOR = 1e-12

# Default RBF grid: 63 centers spanning [-310, 310] gives spacing 10.0,
# and gamma equal to the spacing keeps the basis well conditioned while
# covering unit-norm filter responses on [0, 255] images with margin.
DEFAULT_NUM_RBF = 63
DEFAULT_RBF_RANGE = 310.0
DEFAULT_RBF_GAMMA = 10.0


def dct_filter_bank(m: int) -> np.ndarray:
    """The m*m 2-D DCT-II atoms minus the constant one: shape (m*m-1, m, m).

    Atoms are ordered by (row frequency, column frequency).  Each is
    zero-mean and unit-norm, and the family is orthonormal.
    """
    if m % 2 == 0 or m < 3:
        raise ValueError(f"filter size must be odd and >= 3, got {m}")
    x = np.arange(m)
    # cos(pi*(2x+1)*p/(2m)) rows, with the standard DCT-II scaling.
    c = np.cos(np.pi * (2.0 * x[None, :] + 1.0) * x[:, None] / (2.0 * m))
    c *= np.sqrt(2.0 / m)
    c[0, :] = np.sqrt(1.0 / m)
    bank = np.empty((m * m - 1, m, m))
    r = 0
    for p in range(m):
        for q in range(m):
            if p == 0 and q == 0:
                continue
            atom = np.outer(c[p], c[q])
            bank[r] = atom / np.sqrt(np.sum(atom * atom))
            r += 1
    return bank


def _unit(v: np.ndarray, what: str):
    norm = float(np.sqrt(np.sum(v * v)))
    if norm < NORM_FLOOR:
        raise ValueError(f"{what} has near-zero norm {norm:.3e}; optimizer state is broken")
    return v / norm, norm


def make_local_filter(c, bank: np.ndarray) -> np.ndarray:
    """k = sum_r (c_r/||c||) * bank_r, a zero-mean unit-norm kernel."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (bank.shape[0],):
        raise ValueError(f"coefficient shape {c.shape} does not match bank of {bank.shape[0]} atoms")
    chat, _ = _unit(c, "local filter coefficient vector")
    return np.einsum("r,rxy->xy", chat, bank)


def local_filter_chain(c, g_k, bank: np.ndarray) -> np.ndarray:
    """Pull a kernel-tap gradient back to the raw coefficients.

    For k(c) = B c/||c|| the Jacobian transpose is
    (1/||c||)(I - ĉ ĉᵀ) Bᵀ, with ĉ = c/||c||.
    """
    c = np.asarray(c, dtype=np.float64)
    g_k = np.asarray(g_k, dtype=np.float64)
    if c.shape != (bank.shape[0],):
        raise ValueError(f"coefficient shape {c.shape} does not match bank of {bank.shape[0]} atoms")
    if g_k.shape != bank.shape[1:]:
        raise ValueError(f"kernel gradient shape {g_k.shape} does not match bank atoms {bank.shape[1:]}")
    chat, norm = _unit(c, "local filter coefficient vector")
    btg = np.einsum("rxy,xy->r", bank, g_k)
    return (btg - chat * np.sum(chat * btg)) / norm


def make_nonlocal_filter(b) -> np.ndarray:
    """a = b/||b||, the unit-norm neighbor weight vector."""
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1 or b.size < 1:
        raise ValueError(f"expected a 1-D weight vector, got shape {b.shape}")
    bhat, _ = _unit(b, "nonlocal filter weight vector")
    return bhat


def nonlocal_filter_chain(b, g_a) -> np.ndarray:
    """Tangent-space chain for the unit-norm map: (1/||b||)(I - b̂ b̂ᵀ) g_a."""
    b = np.asarray(b, dtype=np.float64)
    g_a = np.asarray(g_a, dtype=np.float64)
    if b.shape != g_a.shape or b.ndim != 1:
        raise ValueError(f"shape mismatch {b.shape} vs {g_a.shape}")
    bhat, norm = _unit(b, "nonlocal filter weight vector")
    return (g_a - bhat * np.sum(bhat * g_a)) / norm


@dataclass(frozen=True)
class InfluenceWeights:
    """One influence function: RBF weights on an equidistant center grid."""

    alpha: np.ndarray
    centers: np.ndarray
    gamma: float

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        centers = np.asarray(self.centers, dtype=np.float64)
        if alpha.ndim != 1 or alpha.shape != centers.shape:
            raise ValueError(f"alpha {alpha.shape} and centers {centers.shape} must be equal-length vectors")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if centers.size > 1:
            gaps = np.diff(centers)
            if gaps.min() <= 0 or not np.allclose(gaps, gaps[0], rtol=1e-9, atol=0):
                raise ValueError("centers must be strictly increasing and equidistant")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "centers", centers)


def rbf_centers(num_rbf: int = DEFAULT_NUM_RBF, rbf_range: float = DEFAULT_RBF_RANGE) -> np.ndarray:
    """Equidistant center grid spanning [-rbf_range, rbf_range]."""
    if num_rbf < 1:
        raise ValueError(f"need at least one center, got {num_rbf}")
    if rbf_range <= 0:
        raise ValueError(f"center range must be positive, got {rbf_range}")
    if num_rbf == 1:
        return np.zeros(1)
    return np.linspace(-rbf_range, rbf_range, num_rbf)


def rbf_design_row(w: InfluenceWeights, z) -> np.ndarray:
    """Gaussian basis values at z: entry j is exp(-(z-mu_j)^2 / (2 gamma^2)).

    Scalar z gives a length-M row; an array gives one row per element,
    shape z.shape + (M,).
    """
    z = np.asarray(z, dtype=np.float64)
    d = z[..., None] - w.centers
    return np.exp(-(d * d) / (2.0 * w.gamma * w.gamma))


def influence_eval(w: InfluenceWeights, z):
    """Evaluate phi(z) = sum_j alpha_j exp(-(z-mu_j)^2/(2 gamma^2)) and phi'(z)."""
    z = np.asarray(z, dtype=np.float64)
    d = z[..., None] - w.centers
    g = np.exp(-(d * d) / (2.0 * w.gamma * w.gamma))
    ga = g * w.alpha
    phi = np.sum(ga, axis=-1)
    phiprime = -np.sum(ga * d, axis=-1) / (w.gamma * w.gamma)
    return phi, phiprime
