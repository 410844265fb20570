"""Loss functions, backpropagation through the unrolled diffusion, the
optimizer loop, and model serialization.

The trainable parameters of a T-stage model form one flat vector in a
fixed order: for each stage, lambda_raw, then the filter coefficient
rows, then the raw non-local weight rows, then the RBF weight rows.
Gradients, the optimizer, and the model file all share that layout.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lbfgs
from .diffusion import (
    DiffusionModel,
    ModelHyper,
    StageParameters,
    StageTrace,
    denoise,
    denoise_with_trace,
)
from .image import (
    add_gaussian_noise,
    as_image,
    convolve_adjoint,
    convolve_kernel_gradient,
    read_image,
    rotate180,
    ssim_and_gradient,
)
from .matching import compute_neighbor_table
from .nonlocal_op import apply_nonlocal, apply_nonlocal_adjoint, nonlocal_weight_gradient
from .params import (
    InfluenceWeights,
    local_filter_chain,
    make_local_filter,
    make_nonlocal_filter,
    nonlocal_filter_chain,
    rbf_design_row,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("quadratic", "ssim")

MODEL_MAGIC = b"NLRDMODL"
MODEL_VERSION = 1


@dataclass
class TrainingSample:
    f: np.ndarray
    u_gt: np.ndarray

    def __post_init__(self):
        self.f = as_image(self.f)
        self.u_gt = as_image(self.u_gt)
        if self.f.shape != self.u_gt.shape:
            raise ValueError(f"noisy {self.f.shape} and clean {self.u_gt.shape} shapes differ")


def normalize_loss_kind(kind: str) -> str:
    kind = {"l2": "quadratic"}.get(kind, kind)
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS} or 'l2'")
    return kind


def loss_and_grad_output(u_final, u_gt, kind: str):
    """Loss between the last iterate and the target plus its gradient in u_final."""
    u_final = as_image(u_final)
    u_gt = as_image(u_gt)
    if u_final.shape != u_gt.shape:
        raise ValueError(f"shape mismatch {u_final.shape} vs {u_gt.shape}")
    kind = normalize_loss_kind(kind)
    if kind == "quadratic":
        diff = u_final - u_gt
        return 0.5 * float(np.sum(diff * diff)), diff
    value, grad = ssim_and_gradient(u_final, u_gt)
    return 1.0 - value, -grad


@dataclass
class StageGradients:
    """Per-stage gradient blocks, mirroring StageParameters."""

    lambda_raw: float
    filters: np.ndarray
    nonlocal_raw: np.ndarray
    alphas: np.ndarray


def backprop_stage(e_t, trace: StageTrace, stage: StageParameters, f, u_prev,
                   table, bank, centers, gamma):
    """Gradients of one stage's parameters plus the error passed downstream.

    e_t is dloss/du_t for the image u_t this stage produced; the trace
    must come from the forward step that produced it.  Returns
    (StageGradients, e_prev) with e_prev = dloss/du_{t-1}.
    """
    e_t = as_image(e_t)
    f = as_image(f)
    u_prev = as_image(u_prev)
    num_filters = stage.filters.shape[0]
    if len(trace.u_hat) != num_filters:
        raise ValueError(f"trace holds {len(trace.u_hat)} filters, stage has {num_filters}")
    lam = stage.lam

    # Data term: u_t = u_prev - ... - lam*(u_prev - f), chained through exp.
    grad_lambda_raw = lam * (-np.sum((u_prev - f) * e_t))

    grad_filters = np.empty_like(stage.filters)
    grad_nonlocal = np.empty_like(stage.nonlocal_raw)
    grad_alphas = np.empty_like(stage.alphas)
    e_prev = (1.0 - lam) * e_t

    size = bank.shape[1]
    for i in range(num_filters):
        kernel = make_local_filter(stage.filters[i], bank)
        a = make_nonlocal_filter(stage.nonlocal_raw[i])
        w = InfluenceWeights(stage.alphas[i], centers, gamma)
        u_hat, z, h, hprime = trace.u_hat[i], trace.z[i], trace.h[i], trace.hprime[i]

        # ehat = adjoint of the rotated-kernel convolution applied to e_t;
        # what = W ehat feeds three of the four gradient blocks.
        ehat = convolve_adjoint(e_t, rotate180(kernel))
        what = apply_nonlocal(ehat, table, a)

        # RBF weights: dloss/dalpha_j = -sum_n G[n,j] * what[n].
        design = rbf_design_row(w, z.ravel())
        grad_alphas[i] = -np.sum(design * what.ravel()[:, None], axis=0)

        # Non-local weights, then through the unit-norm map.
        g_a = nonlocal_weight_gradient(h, hprime, u_hat, ehat, table, a)
        grad_nonlocal[i] = nonlocal_filter_chain(stage.nonlocal_raw[i], g_a)

        # Local filter: the kernel appears twice, as the analysis filter
        # inside phi and as the rotated synthesis filter outside it.
        s = apply_nonlocal_adjoint(hprime * what, table, a)
        y = apply_nonlocal_adjoint(h, table, a)
        g_kernel = -convolve_kernel_gradient(u_prev, s, size)
        g_kernel -= rotate180(convolve_kernel_gradient(y, e_t, size))
        grad_filters[i] = local_filter_chain(stage.filters[i], g_kernel, bank)

        # Error propagation: e_prev -= Kᵀ Wᵀ diag(phi') W K̄ᵀ e_t.
        e_prev -= convolve_adjoint(s, kernel)

    grads = StageGradients(float(grad_lambda_raw), grad_filters, grad_nonlocal, grad_alphas)
    return grads, e_prev


def pack_gradients(grads) -> np.ndarray:
    parts = []
    for g in grads:
        parts.append(np.array([g.lambda_raw]))
        parts.append(g.filters.ravel())
        parts.append(g.nonlocal_raw.ravel())
        parts.append(g.alphas.ravel())
    return np.concatenate(parts)


def pack_parameters(model: DiffusionModel) -> np.ndarray:
    return pack_gradients(model.stages)


def unpack_parameters(vec: np.ndarray, hyper: ModelHyper, num_stages: int) -> DiffusionModel:
    vec = np.asarray(vec, dtype=np.float64)
    expected = num_stages * hyper.stage_param_count()
    if vec.shape != (expected,):
        raise ValueError(f"parameter vector has {vec.shape}, expected ({expected},)")
    n, cc, nn, nr = hyper.num_filters, hyper.coeff_count, hyper.num_neighbors, hyper.num_rbf
    stages = []
    pos = 0
    for _ in range(num_stages):
        lambda_raw = float(vec[pos])
        pos += 1
        filters = vec[pos : pos + n * cc].reshape(n, cc).copy()
        pos += n * cc
        nonlocal_raw = vec[pos : pos + n * nn].reshape(n, nn).copy()
        pos += n * nn
        alphas = vec[pos : pos + n * nr].reshape(n, nr).copy()
        pos += n * nr
        stages.append(StageParameters(lambda_raw, filters, nonlocal_raw, alphas))
    return DiffusionModel(hyper, stages)


def sample_loss_and_gradient(model: DiffusionModel, sample: TrainingSample, kind: str,
                             table=None):
    """Loss and flat parameter gradient contributed by one sample."""
    hyper = model.hyper
    if table is None:
        table = compute_neighbor_table(sample.f, hyper.patch, hyper.window, hyper.num_neighbors)
    bank = hyper.filter_bank()
    centers = hyper.centers()
    iterates, traces = denoise_with_trace(sample.f, model, table=table)
    loss, e = loss_and_grad_output(iterates[-1], sample.u_gt, kind)
    grads = [None] * model.num_stages
    for t in range(model.num_stages - 1, -1, -1):
        grads[t], e = backprop_stage(
            e, traces[t], model.stages[t], sample.f, iterates[t],
            table, bank, centers, hyper.rbf_gamma,
        )
    return loss, pack_gradients(grads)


def loss_and_gradient(model: DiffusionModel, batch, kind: str, tables=None):
    """Total loss and gradient over a batch, summed in batch order."""
    if not batch:
        raise ValueError("empty training batch")
    kind = normalize_loss_kind(kind)
    if tables is None:
        tables = [None] * len(batch)
    total = 0.0
    grad = None
    for sample, table in zip(batch, tables):
        loss, g = sample_loss_and_gradient(model, sample, kind, table=table)
        total += loss
        grad = g if grad is None else grad + g
    return total, grad


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

# Plain-init influence target: a soft-shrinkage curve of this slope and
# threshold, fitted pointwise at the RBF centers.  Values are empirical
# defaults; anything small and monotone works as a starting point.
INIT_INFLUENCE_SCALE = 0.02
INIT_INFLUENCE_THRESHOLD = 5.0


def soft_shrinkage(z, threshold: float):
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


def _init_alpha_row(centers: np.ndarray, gamma: float) -> np.ndarray:
    """RBF weights making phi roughly the small soft-shrinkage target.

    With gamma equal to the center spacing the RBFs nearly partition
    unity up to the constant sum_k exp(-k^2/2); dividing the target
    values at the centers by the actual per-center basis sums gives a
    faithful smooth fit without any linear solve.
    """
    target = INIT_INFLUENCE_SCALE * soft_shrinkage(centers, INIT_INFLUENCE_THRESHOLD)
    d = centers[:, None] - centers[None, :]
    basis_sums = np.sum(np.exp(-(d * d) / (2.0 * gamma * gamma)), axis=1)
    return target / basis_sums


def initialize_model(hyper: ModelHyper, num_stages: int, init: str = "plain",
                     base_model: DiffusionModel | None = None) -> DiffusionModel:
    """Fresh model: 'plain' DCT-atom start, or 'local' extension of an
    existing single-neighbor model to the current neighbor count."""
    if num_stages < 1:
        raise ValueError(f"need at least one stage, got {num_stages}")
    if init == "plain":
        centers = hyper.centers()
        alpha = _init_alpha_row(centers, hyper.rbf_gamma)
        stages = []
        for _ in range(num_stages):
            filters = np.eye(hyper.num_filters, hyper.coeff_count)
            nonlocal_raw = np.zeros((hyper.num_filters, hyper.num_neighbors))
            nonlocal_raw[:, 0] = 1.0
            alphas = np.tile(alpha, (hyper.num_filters, 1))
            stages.append(StageParameters(0.0, filters, nonlocal_raw, alphas))
        return DiffusionModel(hyper, stages)
    if init == "local":
        if base_model is None:
            raise ValueError("local initialization needs a base model")
        base = base_model.hyper
        if base.num_neighbors != 1:
            raise ValueError(f"base model must have a single neighbor, has {base.num_neighbors}")
        for name in ("filter_size", "num_filters", "num_rbf", "rbf_range", "rbf_gamma"):
            if getattr(base, name) != getattr(hyper, name):
                raise ValueError(f"base model differs in {name}")
        if base_model.num_stages != num_stages:
            raise ValueError(
                f"base model has {base_model.num_stages} stages, requested {num_stages}"
            )
        stages = []
        for src in base_model.stages:
            nonlocal_raw = np.zeros((hyper.num_filters, hyper.num_neighbors))
            nonlocal_raw[:, 0] = src.nonlocal_raw[:, 0]
            stages.append(
                StageParameters(
                    src.lambda_raw, src.filters.copy(), nonlocal_raw, src.alphas.copy()
                )
            )
        return DiffusionModel(hyper, stages)
    raise ValueError(f"unknown initialization {init!r}; expected 'plain' or 'local'")


# ---------------------------------------------------------------------------
# Dataset preparation
# ---------------------------------------------------------------------------

def center_crop(u: np.ndarray, size: int):
    u = as_image(u)
    h, w = u.shape
    if h < size or w < size:
        raise ValueError(f"image {u.shape} smaller than crop {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return u[top : top + size, left : left + size].copy(), (top, left)


def make_dataset(clean_dir, sigma: float, seed: int, crop: int):
    """Load, center-crop and corrupt every readable image in a directory.

    Returns (samples, manifest) with manifest rows
    (filename, crop_top, crop_left, sample_seed).  Per-image seeds are
    derived from (seed, index) so the dataset is reproducible and each
    image gets an independent noise stream.  Unreadable or undersized
    files are skipped with a warning.
    """
    clean_dir = Path(clean_dir)
    paths = sorted(p for p in clean_dir.iterdir() if p.is_file())
    samples, manifest = [], []
    index = 0
    for path in paths:
        try:
            u = read_image(path)
            u_gt, (top, left) = center_crop(u, crop)
        except (ValueError, OSError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        sample_seed = [seed, index]
        f = add_gaussian_noise(u_gt, sigma, sample_seed)
        samples.append(TrainingSample(f, u_gt))
        manifest.append((path.name, top, left, sample_seed))
        index += 1
    if not samples:
        raise ValueError(f"no usable images in {clean_dir}")
    return samples, manifest


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DiffusionModel
    loss: float
    status: str
    iterations: int
    history: list = field(default_factory=list)


def train(hyper: ModelHyper, num_stages: int, dataset, kind: str = "quadratic",
          max_iter: int = 200, init: str = "plain",
          base_model: DiffusionModel | None = None, log_fn=None) -> TrainResult:
    """Joint training of all stages with full-batch limited-memory BFGS."""
    if not dataset:
        raise ValueError("empty training dataset")
    kind = normalize_loss_kind(kind)
    model0 = initialize_model(hyper, num_stages, init=init, base_model=base_model)
    tables = [
        compute_neighbor_table(s.f, hyper.patch, hyper.window, hyper.num_neighbors)
        for s in dataset
    ]

    def objective(x):
        model = unpack_parameters(x, hyper, num_stages)
        return loss_and_gradient(model, dataset, kind, tables=tables)

    x0 = pack_parameters(model0)
    result = lbfgs.minimize(objective, x0, max_iter=max_iter, log=log_fn)
    if result.status == lbfgs.STATUS_LINE_SEARCH:
        log.warning("line search stalled; returning the best iterate found")
    model = unpack_parameters(result.x, hyper, num_stages)
    return TrainResult(model, result.loss, result.status, result.iterations, result.history)


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   8s   magic "NLRDMODL"
#   u32  format version (1)
#   u32  stage count T
#   u32  filter size m
#   u32  filter count
#   u32  neighbor count L
#   u32  RBF count M
#   u32  matching patch size
#   u32  search window size
#   f64  rbf_range, rbf_gamma, sigma
#   then T stage blocks of f64: lambda_raw, filters row-major,
#   nonlocal weights row-major, RBF weights row-major.

_HEADER = struct.Struct("<8sIIIIIIII3d")


def save_model(model: DiffusionModel, path) -> None:
    h = model.hyper
    header = _HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, model.num_stages, h.filter_size, h.num_filters,
        h.num_neighbors, h.num_rbf, h.patch, h.window,
        h.rbf_range, h.rbf_gamma, h.sigma,
    )
    body = pack_parameters(model).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def load_model(path) -> DiffusionModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size or data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file (bad magic)")
    (_, version, num_stages, m, num_filters, num_neighbors, num_rbf,
     patch, window, rbf_range, rbf_gamma, sigma) = _HEADER.unpack_from(data)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model format version {version}")
    hyper = ModelHyper(
        filter_size=m, num_filters=num_filters, num_neighbors=num_neighbors,
        num_rbf=num_rbf, rbf_range=rbf_range, rbf_gamma=rbf_gamma,
        patch=patch, window=window, sigma=sigma,
    )
    expected = num_stages * hyper.stage_param_count()
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != expected:
        raise ValueError(f"{path}: body holds {body.size} values, header promises {expected}")
    return unpack_parameters(body.astype(np.float64), hyper, num_stages)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def gradient_blocks(vec: np.ndarray, hyper: ModelHyper, num_stages: int):
    """Split a flat vector into named per-stage blocks for reporting."""
    n, cc, nn, nr = hyper.num_filters, hyper.coeff_count, hyper.num_neighbors, hyper.num_rbf
    blocks = []
    pos = 0
    for t in range(num_stages):
        blocks.append((f"stage{t + 1}.lambda_raw", vec[pos : pos + 1]))
        pos += 1
        blocks.append((f"stage{t + 1}.filters", vec[pos : pos + n * cc]))
        pos += n * cc
        blocks.append((f"stage{t + 1}.nonlocal", vec[pos : pos + n * nn]))
        pos += n * nn
        blocks.append((f"stage{t + 1}.alphas", vec[pos : pos + n * nr]))
        pos += n * nr
    return blocks


def finite_difference_check(model: DiffusionModel, batch, kind: str = "quadratic",
                            eps: float = 1e-4):
    """Compare analytic gradients against central differences.

    Returns a dict mapping block name to the worst relative error in the
    block, with relative error |a - n| / max(|a|, |n|, 1).
    """
    hyper = model.hyper
    num_stages = model.num_stages
    kind = normalize_loss_kind(kind)
    tables = [
        compute_neighbor_table(s.f, hyper.patch, hyper.window, hyper.num_neighbors)
        for s in batch
    ]
    x0 = pack_parameters(model)
    _, analytic = loss_and_gradient(model, batch, kind, tables=tables)

    def value(x):
        m = unpack_parameters(x, hyper, num_stages)
        total = 0.0
        for sample, table in zip(batch, tables):
            out = denoise(sample.f, m, table=table)
            loss, _ = loss_and_grad_output(out, sample.u_gt, kind)
            total += loss
        return total

    numeric = np.empty_like(x0)
    for i in range(x0.size):
        step = np.zeros_like(x0)
        step[i] = eps
        numeric[i] = (value(x0 + step) - value(x0 - step)) / (2.0 * eps)

    errors = {}
    for (name, a_block), (_, n_block) in zip(
        gradient_blocks(analytic, hyper, num_stages),
        gradient_blocks(numeric, hyper, num_stages),
    ):
        denom = np.maximum(np.maximum(np.abs(a_block), np.abs(n_block)), 1.0)
        errors[name] = float(np.max(np.abs(a_block - n_block) / denom))
    return errors
