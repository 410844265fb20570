from types import SimpleNamespace

import numpy as np
import pytest

from nlrd.cli import RunConfig, UsageError, build_config, load_dataset_dir, main, parse_config_file
from nlrd.diffusion import ModelHyper
from nlrd.image import read_pgm, write_pgm
from nlrd.training import initialize_model, save_model

TINY_CONFIG = """
# training options for a desk-size smoke run
sigma = 10
stages = 1
filter_size = 3
num_filters = 3
num_neighbors = 2
num_rbf = 7
rbf_range = 315
rbf_gamma = 105
patch = 3
window = 5
iterations = 3
"""


@pytest.fixture
def corpus(tmp_path, rng):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(3):
        base = rng.uniform(40, 215, (40, 40))
        write_pgm(base, d / f"tile{i}.pgm")
    return d


def write_config(tmp_path, text=TINY_CONFIG):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_config_file_parsing(tmp_path):
    path = write_config(tmp_path, "sigma = 15.5  # noise\n\nstages=2\nloss = ssim\n")
    values = parse_config_file(path)
    assert values == {"sigma": 15.5, "stages": 2, "loss": "ssim"}


def test_config_file_rejects_garbage(tmp_path):
    for text in ("volume = 11\n", "sigma = loud\n", "just words\n", "sigma =\n"):
        path = write_config(tmp_path, text)
        with pytest.raises(UsageError):
            parse_config_file(path)


def test_flags_override_config_file(tmp_path):
    path = write_config(tmp_path, "iterations = 50\nsigma = 15\n")
    config = build_config(SimpleNamespace(config=str(path), iterations=7))
    assert config.iterations == 7  # explicit flag wins
    assert config.sigma == 15.0  # file beats the default
    assert config.stages == RunConfig.stages


def test_config_default_filter_count():
    assert RunConfig(filter_size=5).hyper().num_filters == 24
    assert RunConfig(filter_size=5, num_filters=8).hyper().num_filters == 8


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["denoise"]) == 1  # missing required flags
    assert main(["no-such-command"]) == 1
    bad = write_config(tmp_path, "volume = 11\n")
    assert main(["gradcheck", "--config", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.nlrd"
    out = tmp_path / "out.pgm"
    assert main(["denoise", "--model", str(missing), "--in", str(missing), "--out", str(out)]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["make-dataset", "--clean", str(empty), "--out", str(tmp_path / "ds")]) == 2
    assert "error:" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, corpus, capsys):
    ds = tmp_path / "ds"
    assert main(["make-dataset", "--clean", str(corpus), "--sigma", "10",
                 "--seed", "5", "--crop", "24", "--out", str(ds)]) == 0
    assert sorted(p.name for p in ds.iterdir()) == [
        "0000_clean.pgm", "0000_noisy.npy",
        "0001_clean.pgm", "0001_noisy.npy",
        "0002_clean.pgm", "0002_noisy.npy",
        "manifest.txt",
    ]
    manifest = (ds / "manifest.txt").read_text().splitlines()
    assert len(manifest) == 3 and manifest[0].startswith("index=0 source=tile0.pgm")
    samples = load_dataset_dir(ds)
    assert len(samples) == 3 and samples[0].f.shape == (24, 24)

    config = write_config(tmp_path)
    model_path = tmp_path / "model.nlrd"
    assert main(["train", "--dataset", str(ds), "--config", str(config),
                 "--out", str(model_path)]) == 0
    out = capsys.readouterr().out
    assert "iter=0 loss=" in out and "status=" in out
    assert model_path.exists()

    denoised = tmp_path / "denoised.pgm"
    assert main(["denoise", "--model", str(model_path),
                 "--in", str(ds / "0000_clean.pgm"), "--out", str(denoised)]) == 0
    assert read_pgm(denoised).shape == (24, 24)

    assert main(["eval", "--model", str(model_path), "--clean", str(corpus),
                 "--sigma", "10", "--seed", "9", "--crop", "24"]) == 0
    out = capsys.readouterr().out
    records = [line for line in out.splitlines() if line.startswith("image=")]
    assert len(records) == 3
    mean_line = [line for line in out.splitlines() if line.startswith("mean noisy_psnr=")]
    assert len(mean_line) == 1
    fields = dict(kv.split("=") for kv in mean_line[0].split()[1:])
    assert 5.0 < float(fields["noisy_psnr"]) < 60.0
    assert 0.0 < float(fields["ssim"]) <= 1.0


def test_train_iteration_flag_overrides_config(tmp_path, corpus, capsys):
    ds = tmp_path / "ds"
    main(["make-dataset", "--clean", str(corpus), "--sigma", "10",
          "--seed", "5", "--crop", "24", "--out", str(ds)])
    config = write_config(tmp_path)  # asks for 3 iterations
    model_path = tmp_path / "model.nlrd"
    assert main(["train", "--dataset", str(ds), "--config", str(config),
                 "--out", str(model_path), "--iterations", "1"]) == 0
    out = capsys.readouterr().out
    assert "iter=1 " in out and "iter=2 " not in out


def test_eval_identity_model_reports_noisy_psnr(tmp_path, corpus, capsys):
    hyper = ModelHyper(filter_size=3, num_filters=3, num_neighbors=2, num_rbf=7,
                       rbf_range=315.0, rbf_gamma=105.0, patch=3, window=5, sigma=10.0)
    model = initialize_model(hyper, 1)
    model.stages[0].alphas[:] = 0.0
    # exp(-1e6) underflows to exactly zero, so the stage is a no-op
    model.stages[0].lambda_raw = -1e6
    path = tmp_path / "identity.nlrd"
    save_model(model, path)
    assert main(["eval", "--model", str(path), "--clean", str(corpus),
                 "--sigma", "10", "--seed", "3", "--crop", "24"]) == 0
    out = capsys.readouterr().out
    records = [line for line in out.splitlines() if line.startswith("image=")]
    assert len(records) == 3
    for line in records:
        fields = dict(kv.split("=") for kv in line.split()[1:])
        assert fields["psnr"] == fields["noisy_psnr"]


def test_eval_is_deterministic(tmp_path, corpus, capsys):
    hyper = ModelHyper(filter_size=3, num_filters=3, num_neighbors=2, num_rbf=7,
                       rbf_range=315.0, rbf_gamma=105.0, patch=3, window=5, sigma=10.0)
    save_model(initialize_model(hyper, 1), tmp_path / "m.nlrd")
    argv = ["eval", "--model", str(tmp_path / "m.nlrd"), "--clean", str(corpus),
            "--sigma", "10", "--seed", "3", "--crop", "24"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first


def test_gradcheck_passes(tmp_path, capsys):
    config = write_config(tmp_path, TINY_CONFIG.replace("stages = 1", "stages = 2"))
    assert main(["gradcheck", "--config", str(config), "--size", "16"]) == 0
    out = capsys.readouterr().out
    assert out.count("pass") >= 8 and "FAIL" not in out
    assert "worst=" in out


def test_dataset_dir_validation(tmp_path, rng):
    ds = tmp_path / "ds"
    ds.mkdir()
    with pytest.raises(ValueError):
        load_dataset_dir(ds)
    write_pgm(rng.uniform(0, 255, (24, 24)), ds / "0000_clean.pgm")
    with pytest.raises(ValueError):
        load_dataset_dir(ds)  # orphan clean image
