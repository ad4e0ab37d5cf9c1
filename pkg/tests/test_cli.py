import csv
import json

import numpy as np
import pytest

from graybox.adjoint import simulate
from graybox.cli import main
from graybox.datagen import Corpus, GenConfig, Split, generate_corpus, load_corpus, save_corpus
from graybox.dynamics import BioreactorConfig, haldane_mu
from graybox.nn import GroupInit, InitSpec, MlpParams, load_checkpoint, mlp_init, save_checkpoint
from graybox.training import mu_surface_error, visited_region

from conftest import self_generated


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def corpus_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["generate", "--seed", "7", "--samples", "8", "--steps", "64",
                 "--out", str(out)]) == 0
    return out


def test_generate_outputs_and_determinism(corpus_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["generate", "--seed", "7", "--samples", "8", "--steps", "64",
                 "--out", str(again)]) == 0
    for name in ("corpus.gbx", "corpus_stats.csv"):
        assert (corpus_dir / name).read_bytes() == (again / name).read_bytes()
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    assert manifest["corpus_seed"] == 7 and manifest["config"]["dynamics"]["n_steps"] == 64
    c = load_corpus(corpus_dir / "corpus.gbx")
    assert (len(c.train), len(c.validation), len(c.test)) == (8, 8, 8)


def test_generate_defaults_sizes():
    gen = GenConfig()
    assert (gen.n_train, gen.n_validation, gen.n_test) == (1024, 1024, 1024)
    assert BioreactorConfig().n_steps == 2048


def test_coarsen_check_must_divide(tmp_path, capsys):
    code = main(["generate", "--steps", "63", "--samples", "2", "--coarsen-check", "8",
                 "--out", str(tmp_path / "x")])
    assert code != 0
    assert "divide" in capsys.readouterr().err


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"dynamics": {"n_steps": 32, "F": 0.04},
                                "gen": {"n_train": 3, "n_validation": 3, "n_test": 3}}))
    out = tmp_path / "o"
    assert main(["generate", "--config", str(conf), "--steps", "16", "--out", str(out)]) == 0
    c = load_corpus(out / "corpus.gbx")
    assert c.cfg.n_steps == 16 and c.cfg.F == 0.04 and len(c.test) == 3


def test_unknown_config_field_fails(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"dynamics": {"nope": 1}}))
    assert main(["generate", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1


@pytest.mark.parametrize("mask", ["s_only_dense", "xs_every_8th"])
def test_train_writes_outputs(corpus_dir, tmp_path, mask):
    out = tmp_path / "run"
    args = ["train", "--corpus", str(corpus_dir / "corpus.gbx"), "--mask", mask,
            "--hidden", "8", "--batch-size", "4", "--epochs-max", "3", "--out", str(out)]
    assert main(args) == 0
    for name in ("manifest.json", "train_log.csv", "history.csv", "termination.txt",
                 "final.ckpt", "stage1_best_val.ckpt", "stage2_best_val.ckpt"):
        assert (out / name).exists(), name
    assert load_checkpoint(out / "final.ckpt").hidden == 8
    lines = (out / "termination.txt").read_text().splitlines()
    assert [l.split()[0] for l in lines] == ["stage=1", "stage=2"]
    hist = rows(out / "history.csv")
    assert {r["stage"] for r in hist} == {"1", "2"}

    rerun = tmp_path / "rerun"
    assert main(args[:-1] + [str(rerun)]) == 0
    for name in ("history.csv", "final.ckpt", "termination.txt"):
        assert (out / name).read_bytes() == (rerun / name).read_bytes()


def test_train_stage2_only_from_checkpoint(corpus_dir, tmp_path):
    ckpt = tmp_path / "k.ckpt"
    save_checkpoint(mlp_init(8, InitSpec(w2=GroupInit("normal", 0.01), seed=4)), ckpt)
    out = tmp_path / "run"
    assert main(["train", "--corpus", str(corpus_dir / "corpus.gbx"), "--stage2-only",
                 "--init-checkpoint", str(ckpt), "--batch-size", "4", "--epochs-max", "2",
                 "--out", str(out)]) == 0
    assert {r["stage"] for r in rows(out / "history.csv")} == {"2"}
    assert not (out / "stage1_best_val.ckpt").exists()


def test_train_blowup_exit_code(corpus_dir, tmp_path):
    ckpt = tmp_path / "wild.ckpt"
    save_checkpoint(MlpParams([[40.0, 40.0]], [10.0], [500.0], 10.0), ckpt)
    out = tmp_path / "run"
    code = main(["train", "--corpus", str(corpus_dir / "corpus.gbx"), "--init-checkpoint",
                 str(ckpt), "--batch-size", "4", "--out", str(out)])
    assert code == 3
    assert "blowup_abort" in (out / "termination.txt").read_text()


def test_missing_corpus_is_error(tmp_path):
    assert main(["train", "--corpus", str(tmp_path / "none.gbx"), "--out",
                 str(tmp_path / "o")]) == 1


def test_eval_perfect_checkpoint(tmp_path):
    p = mlp_init(8, InitSpec(w2=GroupInit("normal", 0.01), seed=2))
    base = generate_corpus(3, BioreactorConfig(n_steps=64), GenConfig(n_train=4, n_validation=4, n_test=5))
    save_corpus(self_generated(base, p), tmp_path / "c.gbx")
    save_checkpoint(p, tmp_path / "p.ckpt")
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(tmp_path / "p.ckpt"), "--corpus",
                 str(tmp_path / "c.gbx"), "--out", str(out)]) == 0
    per = rows(out / "per_sample_loss.csv")
    assert len(per) == 5 and all(float(r["loss_ratio"]) == 0.0 for r in per)
    for label in ("lowest", "median", "highest"):
        traj = rows(out / f"trajectory_{label}.csv")
        assert len(traj) == 65
        assert set(traj[0]) == {"t", "X_pred", "X_true", "S_pred", "S_true", "V_pred",
                                "V_true", "S_in"}
        assert traj[-1]["S_in"] == ""
        assert all(r["S_pred"] == r["S_true"] for r in traj)


def test_eval_ranks_samples(corpus_dir, tmp_path):
    p = mlp_init(8, InitSpec(w2=GroupInit("normal", 0.01), seed=2))
    save_checkpoint(p, tmp_path / "p.ckpt")
    out = tmp_path / "ev"
    assert main(["eval", "--init-checkpoint", str(tmp_path / "p.ckpt"), "--corpus",
                 str(corpus_dir / "corpus.gbx"), "--out", str(out)]) == 0
    ratios = np.array([float(r["loss_ratio"]) for r in rows(out / "per_sample_loss.csv")])
    assert np.all(np.isfinite(ratios)) and ratios.size == 8
    lo = rows(out / "trajectory_lowest.csv")
    hi = rows(out / "trajectory_highest.csv")
    err = lambda t: sum((float(r["X_pred"]) - float(r["X_true"])) ** 2
                        + (float(r["S_pred"]) - float(r["S_true"])) ** 2 for r in t)
    assert err(lo) <= err(hi)


def _corpus_touching_zero(path):
    """Corpus whose test truths start at S = 0 so the rate grid includes S = 0."""
    cfg = BioreactorConfig(n_steps=32)
    base = generate_corpus(1, cfg, GenConfig(n_train=2, n_validation=2, n_test=3))
    x0 = base.test.x0.copy()
    x0[:, 1] = 0.0
    states, _ = simulate(MlpParams([[0.0, 1.0]], [0.0], [0.5], 0.0), x0, base.test.s_in, cfg)
    truth = Split(x0, base.test.s_in, states)
    save_corpus(Corpus(base.train, base.validation, truth, 1, cfg, base.gen), path)
    return load_corpus(path)


def test_export_mu_zero_network(tmp_path):
    corpus = _corpus_touching_zero(tmp_path / "c.gbx")
    zero = MlpParams(np.zeros((3, 2)), np.zeros(3), np.zeros(3), 0.0)
    save_checkpoint(zero, tmp_path / "z.ckpt")
    out = tmp_path / "mu"
    assert main(["export-mu", "--checkpoint", str(tmp_path / "z.ckpt"), "--corpus",
                 str(tmp_path / "c.gbx"), "--resolution", "16", "--out", str(out)]) == 0
    grid = rows(out / "mu_grid.csv")
    assert len(grid) == 256
    zero_rows = [r for r in grid if float(r["S"]) == 0.0]
    assert zero_rows and all(float(r["mu_g"]) == 0.0 for r in zero_rows)
    for r in grid:
        assert float(r["difference"]) == -float(r["mu_g"])
        assert float(r["mu_g"]) == haldane_mu(float(r["S"]), corpus.cfg)
    summary = dict(l.split("=") for l in (out / "mu_summary.txt").read_text().split())
    expected = mu_surface_error(zero, corpus.cfg, visited_region(corpus.test, 16))
    assert float(summary["rmse"]) == expected


def test_parser_rejects_unknown_mask(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--corpus", "c", "--mask", "nope", "--out", str(tmp_path)])
