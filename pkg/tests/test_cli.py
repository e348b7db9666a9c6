"""End-to-end command-line behavior: artifacts, config precedence,
replayability, and exit codes."""

import os

import numpy as np
import pytest
import torch

from classgen import RunRecord, SamplerConfig, LossWeights, init_input
from classgen import zoo
from classgen.cli import default_stages, main, read_config_file
from classgen.losses import ClassStatistics
from tests.conftest import CACHE

CLF = os.path.join(CACHE, "classifier_conv.pt")
ATTN = os.path.join(CACHE, "classifier_attn.pt")
MAE = os.path.join(CACHE, "reconstruction.pt")
DUAL = os.path.join(CACHE, "dual_encoder.pt")
STATS = os.path.join(CACHE, "stats")


@pytest.fixture(autouse=True)
def _artifacts(conv_clf_art, mae_art, stats_all):
    """All CLI tests lean on the session-cached artifacts."""


def test_default_stages_split():
    assert default_stages(28, 2000) == ((14, 1000), (28, 1000))
    assert default_stages(28, 5) == ((14, 2), (28, 3))


def test_unknown_config_key_fails_closed(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("stepz 100\n")
    assert main(["generate", "--config", str(cfg)]) == 2
    with pytest.raises(Exception):
        read_config_file(str(cfg))


def test_missing_required_option_exits_2(tmp_path):
    assert main(["generate", "--out", str(tmp_path / "o")]) == 2


def test_generate_zero_steps_returns_init(tmp_path):
    out = str(tmp_path / "run")
    rc = main(["generate", "--model", CLF, "--recon", MAE, "--stats-dir", STATS,
               "--out", out, "--stages", "14:0", "--seed", "3", "--batch-size", "4"])
    assert rc == 0
    record = RunRecord.load(out)
    expected = init_input(SamplerConfig(stages=((14, 0),), seed=3, batch_size=4))
    assert np.array_equal(record.final_images, expected.data.numpy())


def test_generate_writes_artifacts_and_replays(tmp_path):
    args = ["generate", "--model", CLF, "--recon", MAE, "--stats-dir", STATS,
            "--seed", "5", "--class", "2", "--steps", "20", "--batch-size", "4"]
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(args + ["--out", out1]) == 0
    assert main(args + ["--out", out2]) == 0
    for name in ("config.txt", "log.tsv", "final.npy", "final.png",
                 "grid.png", "loss_curves.png", "invocation.txt"):
        assert os.path.exists(os.path.join(out1, name)), name
    a, b = RunRecord.load(out1), RunRecord.load(out2)
    assert np.array_equal(a.final_images, b.final_images)
    assert [e.to_row() for e in a.steps] == [e.to_row() for e in b.steps]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps 8\nbatch-size 4\nseed 9\n")
    out = str(tmp_path / "run")
    rc = main(["generate", "--config", str(cfg), "--model", CLF, "--recon", MAE,
               "--stats-dir", STATS, "--out", out, "--steps", "6"])
    assert rc == 0
    record = RunRecord.load(out)
    assert record.config.total_steps == 6      # flag beats file
    assert record.config.batch_size == 4       # file beats default
    assert record.config.seed == 9


def test_generate_requires_recon_unless_baseline(tmp_path):
    out = str(tmp_path / "run")
    assert main(["generate", "--model", CLF, "--out", out, "--steps", "4"]) == 2
    assert main(["generate", "--model", CLF, "--out", out, "--steps", "4",
                 "--batch-size", "2", "--baseline", "--stats-dir", STATS]) == 0


def test_generate_numerical_failure_exits_3(tmp_path):
    model, container = zoo.load_model(CLF)
    state = model.state_dict()
    state["head.weight"] = state["head.weight"] * float("nan")
    model.load_state_dict(state)
    bad = str(tmp_path / "bad.pt")
    zoo.save_classifier(model, bad, "small-convolutional", container["report"])
    out = str(tmp_path / "run")
    rc = main(["generate", "--model", bad, "--recon", MAE, "--stats-dir", STATS,
               "--out", out, "--steps", "10", "--batch-size", "2"])
    assert rc == 3
    assert os.path.exists(os.path.join(out, "final.npy"))  # checkpoint preserved


def test_stats_command_matches_library(tmp_path, dataset, conv_clf, mae):
    out = str(tmp_path / "stats")
    rc = main(["stats", "--model", CLF, "--recon", MAE, "--classes", "4",
               "--seed", "7", "--out", out])
    assert rc == 0
    from classgen import estimate_class_statistics
    ref = estimate_class_statistics(dataset, 4, conv_clf, mae, 0.75, 7)
    got = ClassStatistics.load(os.path.join(out, "stats_004.txt"))
    assert np.array_equal(got.mu, ref.mu) and np.array_equal(got.var, ref.var)


def test_t2i_command(tmp_path):
    out = str(tmp_path / "t2i")
    rc = main(["t2i", "--dual-encoder", DUAL, "--recon", MAE,
               "--prompt", "a handwritten digit five", "--w-dist", "0",
               "--steps", "10", "--batch-size", "2", "--seed", "1", "--out", out])
    assert rc == 0
    record = RunRecord.load(out)
    assert record.final_images.shape == (2, 1, 28, 28)


def test_evaluate_command(tmp_path):
    run_dir = str(tmp_path / "run")
    assert main(["generate", "--model", CLF, "--recon", MAE, "--stats-dir", STATS,
                 "--out", run_dir, "--steps", "20", "--batch-size", "4",
                 "--seed", "2"]) == 0
    out = str(tmp_path / "eval")
    assert main(["evaluate", "--model", CLF, "--run", run_dir, "--seed", "0",
                 "--out", out]) == 0
    metrics = {}
    with open(os.path.join(out, "metrics.tsv")) as f:
        next(f)
        for line in f:
            name, value, *_ = line.split("\t")
            metrics[name] = float(value)
    assert {"fid_real_vs_real", "fid_generated_vs_real", "fid_noise_vs_real",
            "inception_score_mean", "diversity_score"} <= set(metrics)
    assert os.path.exists(os.path.join(out, "metrics.png"))
    assert os.path.exists(os.path.join(out, "generated.png"))


def test_ablate_div_loss_differs_only_in_w_div(tmp_path):
    out = str(tmp_path / "ablate")
    rc = main(["ablate", "--axis", "div-loss", "--model", CLF, "--recon", MAE,
               "--stats-dir", STATS, "--steps", "6", "--batch-size", "2",
               "--seed", "4", "--out", out])
    assert rc == 0
    on = RunRecord.load(os.path.join(out, "on")).config.to_flat()
    off = RunRecord.load(os.path.join(out, "off")).config.to_flat()
    diff = {k for k in on if on[k] != off[k]}
    assert diff == {"w_div"}
    assert float(off["w_div"]) == 0.0
    assert os.path.exists(os.path.join(out, "report.tsv"))


def test_ablate_recon_axis_with_workers(tmp_path):
    out = str(tmp_path / "ablate")
    rc = main(["ablate", "--axis", "recon", "--model", CLF, "--recon", MAE,
               "--stats-dir", STATS, "--steps", "6", "--batch-size", "2",
               "--seed", "4", "--workers", "2", "--out", out])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "on", "final.npy"))
    assert os.path.exists(os.path.join(out, "off", "final.npy"))


def test_ablate_unknown_axis_exits_2(tmp_path):
    assert main(["ablate", "--axis", "dropout", "--model", CLF, "--recon", MAE,
                 "--out", str(tmp_path / "x")]) == 2


def test_zoo_train_command(tmp_path):
    out = str(tmp_path / "clf.pt")
    rc = main(["zoo-train", "--preset", "small-convolutional", "--epochs", "1",
               "--seed", "0", "--out", out])
    assert rc == 0
    model = zoo.load_classifier(out)
    assert model.num_classes == 10
    out2 = str(tmp_path / "mae.pt")
    assert main(["zoo-train", "--preset", "reconstruction", "--epochs", "1",
                 "--seed", "0", "--out", out2]) == 0
    zoo.load_reconstruction(out2)
