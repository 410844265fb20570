"""End-to-end acceptance checks, one test per numbered criterion.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
PASS lines.  Criteria 5 and 6 share one module-scoped training run of a
small two-stage model (about three minutes); everything else is fast.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest
from numpy.random import default_rng

import oracles
from nlrd.diffusion import ModelHyper, denoise, diffusion_step
from nlrd.image import PEAK, add_gaussian_noise, convolve, psnr, ssim
from nlrd.matching import compute_neighbor_table
from nlrd.nonlocal_op import apply_nonlocal, apply_nonlocal_adjoint, dense_nonlocal_matrix
from nlrd.params import make_local_filter
from nlrd.training import (
    TrainingSample,
    finite_difference_check,
    initialize_model,
    pack_parameters,
    train,
    unpack_parameters,
)


def report(number, name, ok, detail):
    verdict = "PASS" if ok else "FAIL"
    print(f"acceptance criterion {number} ({name}): {verdict} [{detail}]")
    assert ok, f"criterion {number} ({name}): {detail}"


def random_stage(rng, hyper):
    x = pack_parameters(initialize_model(hyper, 1))
    x = x + 0.05 * rng.standard_normal(x.size)
    return unpack_parameters(x, hyper, 1)


# ---------------------------------------------------------------------------
# 1. Gradient exactness on the toy model
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_exactness(camera):
    toy = ModelHyper(filter_size=3, num_filters=3, num_neighbors=3, num_rbf=7,
                     rbf_range=310.0, rbf_gamma=310.0 / 3.0,
                     patch=3, window=5, sigma=25.0)
    clean = camera[200:216, 200:216]
    sample = TrainingSample(add_gaussian_noise(clean, 25.0, [3, 0]), clean)
    rng = default_rng(42)
    model = initialize_model(toy, 2)
    x = pack_parameters(model) + 0.05 * rng.standard_normal(2 * toy.stage_param_count())
    model = unpack_parameters(x, toy, 2)
    start = time.time()
    errors = finite_difference_check(model, [sample], kind="quadratic", eps=1e-4)
    elapsed = time.time() - start
    worst = max(errors.values())
    ok = worst <= 1e-5 and elapsed <= 60.0
    report(1, "gradient exactness", ok,
           f"worst block rel err {worst:.3e} <= 1e-5 over {len(errors)} blocks, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Single-neighbor degeneration to the local diffusion step
# ---------------------------------------------------------------------------

def test_criterion_2_local_degeneration():
    rng = default_rng(7)
    hyper = ModelHyper(filter_size=3, num_filters=4, num_neighbors=1, num_rbf=9,
                       rbf_range=4.0, rbf_gamma=1.0, patch=3, window=5, sigma=25.0)
    bank = hyper.filter_bank()
    centers = hyper.centers()
    worst = 0.0
    for _ in range(20):
        stage = random_stage(rng, hyper).stages[0]
        stage.nonlocal_raw[:, 0] = 1.0  # the lone neighbor weight normalizes away
        f = rng.normal(size=(12, 14))
        u = rng.normal(size=(12, 14))
        table = compute_neighbor_table(f, hyper.patch, hyper.window, 1)
        got, _ = diffusion_step(u, f, stage, table, bank, centers, hyper.rbf_gamma)
        kernels = [make_local_filter(stage.filters[i], bank)
                   for i in range(hyper.num_filters)]
        want = oracles.local_diffusion_step(
            u, f, stage.lam, kernels, stage.alphas, centers, hyper.rbf_gamma
        )
        worst = max(worst, float(np.max(np.abs(got - want))))
    report(2, "L=1 equals the local update", worst <= 1e-12,
           f"max abs deviation {worst:.3e} <= 1e-12 over 20 random inputs")


# ---------------------------------------------------------------------------
# 3. Operator algebra
# ---------------------------------------------------------------------------

def test_criterion_3_operator_algebra():
    rng = default_rng(11)
    worst_adjoint = 0.0
    for _ in range(100):
        p = int(rng.integers(20, 60))
        L = int(rng.integers(1, 6))
        table = np.empty((p, L), dtype=np.int64)
        table[:, 0] = np.arange(p)
        for n in range(p):
            others = rng.choice(np.delete(np.arange(p), n), size=L - 1, replace=False)
            table[n, 1:] = others
        a = rng.normal(size=L)
        v = rng.normal(size=p)
        h = rng.normal(size=p)
        lhs = np.sum(apply_nonlocal(v, table, a) * h)
        rhs = np.sum(v * apply_nonlocal_adjoint(h, table, a))
        worst_adjoint = max(worst_adjoint, abs(lhs - rhs))

    worst_dense = 0.0
    f = rng.normal(size=(8, 8))
    table = compute_neighbor_table(f, 3, 5, 3)
    a = rng.normal(size=3)
    w = oracles.dense_nonlocal(table, a)
    worst_dense = max(worst_dense, float(np.max(np.abs(
        apply_nonlocal(f, table, a).ravel() - w @ f.ravel()))))
    worst_dense = max(worst_dense, float(np.max(np.abs(
        dense_nonlocal_matrix(table, a) - w))))
    k = rng.normal(size=(3, 3))
    km = oracles.dense_convolution_matrix((8, 8), k)
    worst_dense = max(worst_dense, float(np.max(np.abs(
        convolve(f, k).ravel() - km @ f.ravel()))))

    rows_ok = True
    for L in (1, 3, 5):
        table = compute_neighbor_table(f, 3, 7, L)
        dense = dense_nonlocal_matrix(table, np.arange(1.0, L + 1.0))
        rows_ok = rows_ok and int(np.max(np.sum(dense != 0.0, axis=1))) <= L

    ok = worst_adjoint <= 1e-10 and worst_dense <= 1e-12 and rows_ok
    report(3, "operator algebra", ok,
           f"adjoint {worst_adjoint:.3e} <= 1e-10, dense oracle {worst_dense:.3e} <= 1e-12, "
           f"row sparsity <= L {rows_ok}")


# ---------------------------------------------------------------------------
# 4. Block matching vs brute force
# ---------------------------------------------------------------------------

def test_criterion_4_matching_oracle(camera):
    rng = default_rng(23)
    fixtures = [
        rng.uniform(0, 255, (7, 9)),
        rng.uniform(0, 255, (16, 16)),
        np.full((6, 6), 40.0),
        np.add.outer(np.arange(12.0), 7.0 * np.arange(10.0)),
        camera[200:216, 300:316],
        camera[64:77, 400:416],
    ]
    checked = 0
    identity_ok = True
    for f in fixtures:
        assert max(f.shape) <= 16
        for patch, window, L in [(3, 5, 3), (3, 7, 4), (5, 9, 2), (3, 5, 1)]:
            got = compute_neighbor_table(f, patch, window, L)
            want = oracles.brute_force_table(f, patch, window, L)
            assert np.array_equal(got, want), (f.shape, patch, window, L)
            identity_ok = identity_ok and np.array_equal(got[:, 0], np.arange(f.size))
            checked += 1
    report(4, "block-matching oracle", identity_ok,
           f"table equals brute force on {checked} image/config pairs, first column identity")


# ---------------------------------------------------------------------------
# 5 & 6. Small-scale training, and the non-local benefit trend
# ---------------------------------------------------------------------------

TRAIN_HYPER = ModelHyper(filter_size=5, num_filters=24, num_neighbors=3, num_rbf=63,
                         rbf_range=310.0, rbf_gamma=10.0, patch=7, window=31, sigma=25.0)


@pytest.fixture(scope="module")
def trained_models(camera):
    """Two-stage models trained on eight 64x64 tiles, with held-out scores."""
    train_tiles = [camera[r:r + 64, c:c + 64]
                   for r in (192, 320) for c in (0, 128, 256, 384)]
    test_tiles = [camera[448:512, c:c + 64] for c in (0, 128, 256, 384)]
    dataset = [TrainingSample(add_gaussian_noise(t, 25.0, [11, i]), t)
               for i, t in enumerate(train_tiles)]
    held_out = [(add_gaussian_noise(t, 25.0, [13, i]), t)
                for i, t in enumerate(test_tiles)]

    def evaluate(model):
        noisy, out = [], []
        for f, clean in held_out:
            noisy.append(psnr(f, clean))
            out.append(psnr(denoise(f, model), clean))
        return float(np.mean(noisy)), float(np.mean(out))

    results = {}
    start = time.time()
    res3 = train(TRAIN_HYPER, 2, dataset, kind="quadratic", max_iter=50)
    results["elapsed"] = time.time() - start
    results["noisy_psnr"], results["psnr_L3"] = evaluate(res3.model)

    hyper1 = ModelHyper(filter_size=5, num_filters=24, num_neighbors=1, num_rbf=63,
                        rbf_range=310.0, rbf_gamma=10.0, patch=7, window=31, sigma=25.0)
    res1 = train(hyper1, 2, dataset, kind="quadratic", max_iter=50)
    _, results["psnr_L1"] = evaluate(res1.model)
    return results


def test_criterion_5_training_improves_psnr(trained_models):
    r = trained_models
    gain = r["psnr_L3"] - r["noisy_psnr"]
    ok = gain >= 4.0 and r["elapsed"] <= 1200.0
    report(5, "small-scale training gain", ok,
           f"held-out mean {r['noisy_psnr']:.2f} -> {r['psnr_L3']:.2f} dB "
           f"(gain {gain:.2f} >= 4.0), trained in {r['elapsed']:.0f}s <= 1200s")


def test_criterion_6_nonlocal_not_inferior(trained_models):
    r = trained_models
    ok = r["psnr_L3"] >= r["psnr_L1"] - 0.05
    report(6, "non-local benefit trend", ok,
           f"L=3 {r['psnr_L3']:.3f} dB >= L=1 {r['psnr_L1']:.3f} dB - 0.05")


# ---------------------------------------------------------------------------
# 7. Metrics
# ---------------------------------------------------------------------------

def test_criterion_7_metrics(camera):
    rng = default_rng(31)
    u = camera[100:164, 200:264]
    self_ok = ssim(u, u) == 1.0

    worst_psnr = 0.0
    for offset in (25.0, 10.0):
        worst_psnr = max(worst_psnr, abs(
            psnr(u + offset, u) - 20.0 * np.log10(PEAK / offset)))

    v = np.clip(u + rng.normal(0, 20, u.shape), 0, 255)
    worst_ssim = abs(ssim(u, v) - oracles.naive_ssim(u, v))

    ok = self_ok and worst_psnr <= 1e-9 and worst_ssim <= 1e-8
    report(7, "metric identities", ok,
           f"ssim(u,u)=1 {self_ok}, psnr closed forms {worst_psnr:.2e} <= 1e-9, "
           f"ssim oracle {worst_ssim:.2e} <= 1e-8")


# ---------------------------------------------------------------------------
# 8. Determinism across runs and thread counts
# ---------------------------------------------------------------------------

DETERMINISM_SCRIPT = r"""
import hashlib
import numpy as np
import skimage.data
from nlrd.diffusion import ModelHyper, denoise
from nlrd.image import add_gaussian_noise, psnr, ssim
from nlrd.training import TrainingSample, pack_parameters, train

camera = skimage.data.camera().astype(np.float64)
clean = camera[192:256, 0:64]
f = add_gaussian_noise(clean, 25.0, [11, 0])
hyper = ModelHyper(filter_size=3, num_filters=8, num_neighbors=3, num_rbf=63,
                   rbf_range=310.0, rbf_gamma=10.0, patch=7, window=31, sigma=25.0)
res = train(hyper, 2, [TrainingSample(f, clean)], max_iter=8)
test_clean = camera[448:512, 0:64]
g = add_gaussian_noise(test_clean, 25.0, [13, 0])
out = denoise(g, res.model)
digest = hashlib.sha256()
digest.update(pack_parameters(res.model).tobytes())
digest.update(out.tobytes())
digest.update(np.float64(psnr(out, test_clean)).tobytes())
digest.update(np.float64(ssim(out, test_clean)).tobytes())
print(digest.hexdigest())
"""


def run_determinism_probe(threads):
    env = dict(os.environ)
    for name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[name] = str(threads)
    proc = subprocess.run([sys.executable, "-c", DETERMINISM_SCRIPT],
                          capture_output=True, text=True, env=env, check=True)
    return proc.stdout.strip()


def test_criterion_8_determinism():
    digests = [run_determinism_probe(t) for t in (1, 1, 2, 4)]
    ok = len(set(digests)) == 1
    report(8, "bitwise determinism", ok,
           f"train+denoise+metrics sha256 {digests[0][:16]}... identical over "
           f"repeat run and thread counts 1/2/4")
