import json

import numpy as np
import pytest
from sklearn.base import clone

from xlstm_vmunet import cli
from xlstm_vmunet.estimator import XLSTMVMUNetSegmenter, check_images, check_masks
from xlstm_vmunet.errors import ConfigurationError, DataError
from xlstm_vmunet.io import load_checkpoint, read_pnm, save_checkpoint, write_pnm
from xlstm_vmunet.network import ModelConfig, init_weights

TINY = """\
height = 32
width = 32
widths = 8, 16
depths = 1, 1
state_dim = 4
count = 10
batch_size = 4
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    return tmp_path, cfg


def test_gen_train_eval_predict(tiny, capsys):
    root, cfg = tiny
    run = root / "run"
    assert cli.main(["train", str(root / "data"), "--config", str(cfg), "--epochs", "2", "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "# train: resolved config" in out and "epochs = 2" in out and "widths = 8,16" in out
    rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    ck = load_checkpoint(run / "model.xvmu")
    assert ck.config["model"]["widths"] == [8, 16] and ck.config["train"]["epochs"] == 2

    assert cli.main(["eval", str(run / "model.xvmu"), str(root / "data")]) == 0
    assert "DSC" in capsys.readouterr().out

    image, gt = root / "data" / "s00000.pgm", root / "data" / "s00000_mask.pgm"
    for name in ("a.pgm", "b.pgm"):
        assert cli.main(["predict", str(run / "model.xvmu"), str(image), "--mask", str(gt),
                         "--out", str(root / name)]) == 0
    assert (root / "a.pgm").read_bytes() == (root / "b.pgm").read_bytes()
    assert set(np.unique(read_pnm(root / "a.pgm"))) <= {0, 255}
    assert "IoU" in capsys.readouterr().out


def test_predict_resolution_mismatch_names_both(tiny, capsys):
    root, _ = tiny
    c = ModelConfig(height=32, width=32, in_channels=1, widths=(8, 16), depths=(1, 1), state_dim=4)
    save_checkpoint(root / "m.xvmu", {"model": c.to_dict()}, init_weights(c, 0))
    write_pnm(root / "big.pgm", np.zeros((64, 64), dtype=np.uint8))
    code = cli.main(["predict", str(root / "m.xvmu"), str(root / "big.pgm"), "--out", str(root / "o.pgm")])
    err = capsys.readouterr().err
    assert code == 2 and "1×64×64" in err and "1×32×32" in err


def test_zero_weights_negative_bias_predicts_background(tmp_path):
    c = ModelConfig(height=32, width=32, in_channels=1, widths=(8, 16), depths=(1, 1), state_dim=4)
    w = {k: np.zeros(t.shape) for k, t in init_weights(c, 0).items()}
    w["head.bias"] = np.array([-4.0])
    save_checkpoint(tmp_path / "m.xvmu", {"model": c.to_dict()}, w)
    write_pnm(tmp_path / "x.pgm", np.random.default_rng(0).integers(0, 256, (32, 32), dtype=np.uint8))
    assert cli.main(["predict", str(tmp_path / "m.xvmu"), str(tmp_path / "x.pgm"), "--out",
                     str(tmp_path / "o.pgm")]) == 0
    assert np.all(read_pnm(tmp_path / "o.pgm") == 0)


def test_ablate_ver1_equals_plain_run(tiny, capsys):
    root, cfg = tiny
    assert cli.main(["ablate", str(root / "data"), "--config", str(cfg), "--epochs", "1",
                     "--out", str(root / "abl")]) == 0
    table = capsys.readouterr().out
    assert all(f"Ver {v}" in table for v in range(1, 5))
    plain = root / "plain.cfg"
    plain.write_text(TINY + "use_slstm = false\nuse_mlstm = false\n")
    assert cli.main(["train", str(root / "data"), "--config", str(plain), "--epochs", "1",
                     "--out", str(root / "plain")]) == 0
    assert (root / "abl" / "metrics_ver1.jsonl").read_bytes() == (root / "plain" / "metrics.jsonl").read_bytes()
    digests = [line.split()[4] for line in (root / "abl" / "ablation.txt").read_text().splitlines()[2:]]
    assert len(set(digests)) == 4


@pytest.mark.parametrize("argv,code", [
    (["train", "{data}", "--config", "{bad}", "--out", "{out}"], 2),
    (["train", "{missing}", "--out", "{out}"], 3),
    (["eval", "{garbage}", "{data}"], 3),
])
def test_exit_codes(tiny, argv, code):
    root, _ = tiny
    (root / "bad.cfg").write_text("no_such_key = 1\n")
    (root / "garbage.xvmu").write_bytes(b"nope")
    paths = {"data": root / "data", "bad": root / "bad.cfg", "out": root / "o", "missing": root / "missing",
             "garbage": root / "garbage.xvmu"}
    assert cli.main([a.format(**paths) for a in argv]) == code


def test_numerical_abort_exit_code(tiny, monkeypatch):
    root, cfg = tiny
    from xlstm_vmunet import training
    from xlstm_vmunet.tensor import Tensor
    monkeypatch.setattr(training, "forward",
                        lambda x, c, w: Tensor._wrap(np.full((len(x), 1, 32, 32), np.nan), False))
    assert cli.main(["train", str(root / "data"), "--config", str(cfg), "--out", str(root / "r")]) == 4


def test_gradcheck_subcommand(capsys):
    assert cli.main(["gradcheck", "--samples", "100"]) == 0
    out = capsys.readouterr().out
    assert "full model" in out and "FAIL" not in out


class TestEstimator:
    def test_params_and_clone(self):
        est = XLSTMVMUNetSegmenter(epochs=3, widths=(8, 16), depths=(1, 1))
        assert est.get_params()["epochs"] == 3
        assert clone(est).get_params() == est.get_params()

    def test_fit_predict_score(self):
        rng = np.random.default_rng(0)
        y = np.zeros((6, 32, 32))
        for i in range(6):
            r, c = rng.integers(4, 16, 2)
            y[i, r:r + 12, c:c + 12] = 1
        X = 0.8 - 0.5 * y
        est = XLSTMVMUNetSegmenter(widths=(8, 16), depths=(1, 1), state_dim=4, epochs=1, batch_size=3)
        est.fit(X, y)
        pred = est.predict(X)
        assert pred.shape == (6, 32, 32) and pred.dtype == np.uint8
        assert 0.0 <= est.score(X, y) <= 1.0 and len(est.history_) == 1

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            XLSTMVMUNetSegmenter().predict(np.zeros((1, 32, 32)))

    def test_validation_helpers(self):
        with pytest.raises(DataError):
            check_images(np.full((1, 4, 4), 2.0))
        X = check_images(np.zeros((2, 4, 4)))
        assert X.shape == (2, 1, 4, 4)
        with pytest.raises(DataError):
            check_masks(np.zeros((2, 4, 5)), X)
        with pytest.raises(ConfigurationError):
            check_images(np.zeros((2, 3, 4, 4)), channels=1)

    def test_from_weights(self):
        c = ModelConfig(height=32, width=32, in_channels=1, widths=(8, 16), depths=(1, 1), state_dim=4)
        est = XLSTMVMUNetSegmenter.from_weights(c, {k: t.data for k, t in init_weights(c, 0).items()})
        assert est.predict_proba(np.zeros((1, 32, 32))).shape == (1, 32, 32)
