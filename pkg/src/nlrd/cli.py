"""Command-line surface: dataset preparation, training, denoising,
evaluation and gradient checking.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Options may
come from a flat `key = value` config file; explicit flags win.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .diffusion import ModelHyper, denoise
from .image import add_gaussian_noise, psnr, read_image, ssim, write_image
from .training import (
    TrainingSample,
    center_crop,
    finite_difference_check,
    initialize_model,
    load_model,
    make_dataset,
    normalize_loss_kind,
    pack_parameters,
    save_model,
    train,
    unpack_parameters,
)

GRADCHECK_LIMIT = 1e-4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


@dataclass
class RunConfig:
    sigma: float = 25.0
    stages: int = 5
    filter_size: int = 5
    num_filters: int = 0  # 0 means filter_size^2 - 1
    num_neighbors: int = 3
    num_rbf: int = 63
    rbf_range: float = 310.0
    rbf_gamma: float = 10.0
    patch: int = 7
    window: int = 31
    iterations: int = 200
    seed: int = 0
    crop: int = 180
    loss: str = "quadratic"
    init: str = "plain"

    def hyper(self) -> ModelHyper:
        num_filters = self.num_filters or self.filter_size**2 - 1
        return ModelHyper(
            filter_size=self.filter_size, num_filters=num_filters,
            num_neighbors=self.num_neighbors, num_rbf=self.num_rbf,
            rbf_range=self.rbf_range, rbf_gamma=self.rbf_gamma,
            patch=self.patch, window=self.window, sigma=self.sigma,
        )


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; # starts a comment."""
    known = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key or not val:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown option {key!r}")
        try:
            values[key] = casts[known[key]](val)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {val!r} for {key}") from None
    return values


def build_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        for key, val in parse_config_file(args.config).items():
            setattr(config, key, val)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            setattr(config, f.name, flag)
    config.loss = normalize_loss_kind(config.loss)
    return config


def _cmd_make_dataset(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples, manifest = make_dataset(args.clean, args.sigma, args.seed, args.crop)
    lines = []
    for index, (sample, row) in enumerate(zip(samples, manifest)):
        name, top, left, sample_seed = row
        write_image(sample.u_gt, out / f"{index:04d}_clean.pgm")
        np.save(out / f"{index:04d}_noisy.npy", sample.f)
        seed_txt = ",".join(str(s) for s in sample_seed)
        lines.append(
            f"index={index} source={name} top={top} left={left} "
            f"seed={seed_txt} sigma={args.sigma}"
        )
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def load_dataset_dir(path):
    """Read back the (clean, noisy) pairs a make-dataset run wrote."""
    path = Path(path)
    samples = []
    for clean_path in sorted(path.glob("*_clean.pgm")):
        noisy_path = clean_path.with_name(clean_path.name.replace("_clean.pgm", "_noisy.npy"))
        if not noisy_path.exists():
            raise ValueError(f"{clean_path} has no matching noisy array {noisy_path.name}")
        samples.append(TrainingSample(np.load(noisy_path), read_image(clean_path)))
    if not samples:
        raise ValueError(f"no dataset samples found in {path}")
    return samples


def _cmd_train(args) -> int:
    config = build_config(args)
    dataset = load_dataset_dir(args.dataset)
    base_model = None
    init = config.init
    if init.startswith("local:"):
        base_model = load_model(init[len("local:") :])
        init = "local"

    def log_fn(iteration, loss, gnorm, step):
        print(f"iter={iteration} loss={loss:.10g} gnorm={gnorm:.6g} step={step:.6g}")

    result = train(
        config.hyper(), config.stages, dataset, kind=config.loss,
        max_iter=config.iterations, init=init, base_model=base_model, log_fn=log_fn,
    )
    save_model(result.model, args.out)
    print(f"status={result.status} iterations={result.iterations} "
          f"loss={result.loss:.10g} model={args.out}")
    return 0


def _cmd_denoise(args) -> int:
    model = load_model(args.model)
    noisy = read_image(args.input)
    write_image(denoise(noisy, model), args.out)
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    paths = sorted(p for p in Path(args.clean).iterdir() if p.is_file())
    if not paths:
        raise ValueError(f"no images in {args.clean}")
    rows = []
    for index, path in enumerate(paths):
        clean = read_image(path)
        if args.crop:
            clean, _ = center_crop(clean, args.crop)
        noisy = add_gaussian_noise(clean, args.sigma, [args.seed, index])
        out = denoise(noisy, model)
        rows.append((path.name, psnr(noisy, clean), psnr(out, clean), ssim(out, clean)))
    width = max(len(r[0]) for r in rows)
    print(f"{'image':<{width}}  {'noisy-psnr':>10}  {'psnr':>8}  {'ssim':>7}")
    for name, p_noisy, p_out, s_out in rows:
        print(f"{name:<{width}}  {p_noisy:>10.2f}  {p_out:>8.2f}  {s_out:>7.4f}")
    n = len(rows)
    means = tuple(sum(r[k] for r in rows) / n for k in (1, 2, 3))
    print(f"{'mean':<{width}}  {means[0]:>10.2f}  {means[1]:>8.2f}  {means[2]:>7.4f}")
    print()
    for name, p_noisy, p_out, s_out in rows:
        print(f"image={name} noisy_psnr={p_noisy:.6f} psnr={p_out:.6f} ssim={s_out:.6f}")
    print(f"mean noisy_psnr={means[0]:.6f} psnr={means[1]:.6f} ssim={means[2]:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = build_config(args)
    hyper = config.hyper()
    rng = np.random.default_rng(config.seed)
    size = max(hyper.filter_size, args.size)
    clean = rng.uniform(0.0, 255.0, size=(size, size))
    sample = TrainingSample(
        add_gaussian_noise(clean, config.sigma, [config.seed, 0]), clean
    )
    model = initialize_model(hyper, config.stages)
    # A generic evaluation point: the plain init has many exact zeros
    # whose gradients would vanish coincidentally.
    x = pack_parameters(model) + 0.05 * rng.standard_normal(pack_parameters(model).size)
    model = unpack_parameters(x, hyper, config.stages)
    errors = finite_difference_check(model, [sample], kind=config.loss, eps=args.eps)
    worst = max(errors.values())
    for name, err in errors.items():
        verdict = "pass" if err <= GRADCHECK_LIMIT else "FAIL"
        print(f"block={name} max_rel_err={err:.3e} {verdict}")
    print(f"worst={worst:.3e} limit={GRADCHECK_LIMIT:g}")
    return 0 if worst <= GRADCHECK_LIMIT else 2


def make_parser() -> Parser:
    parser = Parser(prog="nlrd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("make-dataset", help="crop and corrupt a directory of clean images")
    p.add_argument("--clean", required=True, help="directory of clean grayscale images")
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int, default=180)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=_cmd_make_dataset)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="key = value option file")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--init", help="plain | local:BASE_MODEL_FILE")
    p.add_argument("--loss", choices=["l2", "ssim", "quadratic"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("denoise", help="denoise one image with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM of a model over a clean image directory")
    p.add_argument("--model", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int, default=0, help="optional center crop, 0 = full image")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--size", type=int, default=16, help="side of the synthetic test image")
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
