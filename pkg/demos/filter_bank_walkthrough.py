"""Tour of the model's parameterizations.

Prints the properties of the zero-mean filter basis, shows how raw
coefficient vectors map to unit-norm kernels, and sketches the learned
influence functions as small text plots.
"""

import numpy as np

from nlrd.params import (
    InfluenceWeights,
    dct_filter_bank,
    influence_eval,
    make_local_filter,
    make_nonlocal_filter,
    rbf_centers,
)
from nlrd.training import INIT_INFLUENCE_SCALE, soft_shrinkage


def sketch(z, phi, height=9):
    """Tiny ASCII plot of phi over z."""
    lo, hi = phi.min(), phi.max()
    span = hi - lo if hi > lo else 1.0
    rows = []
    for level in range(height - 1, -1, -1):
        cut_lo = lo + span * level / height
        cut_hi = lo + span * (level + 1) / height
        line = "".join("*" if cut_lo <= v < cut_hi else " " for v in phi)
        rows.append(f"{cut_lo:8.2f} |{line}")
    rows.append(" " * 9 + "+" + "-" * len(z))
    rows.append(" " * 10 + f"z from {z[0]:.0f} to {z[-1]:.0f}")
    return "\n".join(rows)


def main():
    m = 5
    bank = dct_filter_bank(m)
    print(f"filter basis for {m}x{m} kernels: {bank.shape[0]} atoms")
    print(f"  every atom zero-mean: max |sum| = {np.max(np.abs(bank.sum(axis=(1, 2)))):.2e}")
    gram = np.einsum("rxy,sxy->rs", bank, bank)
    print(f"  orthonormal: max |gram - I| = {np.max(np.abs(gram - np.eye(bank.shape[0]))):.2e}")

    rng = np.random.default_rng(4)
    c = rng.normal(size=bank.shape[0])
    k = make_local_filter(c, bank)
    print("\na random coefficient vector maps to a kernel with")
    print(f"  norm {np.sqrt(np.sum(k * k)):.15f} and mean {k.mean():+.2e}")
    print(f"  scale invariance: max |k(c) - k(10c)| = "
          f"{np.max(np.abs(k - make_local_filter(10 * c, bank))):.2e}")

    b = np.array([2.0, -1.0, 0.5])
    a = make_nonlocal_filter(b)
    print(f"\nraw neighbor weights {b} normalize to {np.round(a, 4)} (norm 1)")

    centers = rbf_centers(63, 310.0)
    print(f"\ninfluence grid: {centers.size} centers on "
          f"[{centers[0]:.0f}, {centers[-1]:.0f}], spacing {centers[1] - centers[0]:.1f}")

    # the shrinkage-like curve training starts from
    d = centers[:, None] - centers[None, :]
    sums = np.sum(np.exp(-(d * d) / 200.0), axis=1)
    alpha = INIT_INFLUENCE_SCALE * soft_shrinkage(centers, 5.0) / sums
    w = InfluenceWeights(alpha, centers, 10.0)
    z = np.linspace(-300, 300, 61)
    phi, phiprime = influence_eval(w, z)
    print("\nstarting influence function phi(z):")
    print(sketch(z, phi))
    print(f"\nphi is odd (max |phi(z) + phi(-z)| = {np.max(np.abs(phi + phi[::-1])):.2e})"
          f" and phi'(0) = {influence_eval(w, 0.0)[1]:.4f}")


if __name__ == "__main__":
    main()
