import csv
import io
import shutil
import subprocess

import numpy as np
import pytest

from inrnet import inr
from inrnet.cli import main
from inrnet.config import build_preset, parse_config
from inrnet.data import DatasetStore, constant_model, read_pnm, shape_image, threshold_labels, write_pnm
from inrnet.errors import ConfigError, FormatError
from inrnet.layers.graph import load_graph

BASE = """
# classifier run
train.steps = 3
train.lr = 0.01
train.batch = 4
points.n = 64
net.io = inr->vector
net.arch = inrnet2
net.width = 2
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def write_images(folder, n, labels=True):
    folder.mkdir(exist_ok=True)
    lines = []
    for i in range(n):
        img = shape_image(("disk", "square")[i % 2], 8, (0.1 * i - 0.2, 0.0), 0.5)
        write_pnm(folder / f"img{i}.pgm", img)
        lines.append(f"img{i}.pgm\t{i % 2}\n")
    if labels:
        (folder / "labels.tsv").write_text("".join(lines))
    return folder


def fit_args(src, out, seed=0):
    return ["fit", "--images", src, "--out", out, "--steps", 30, "--lr", 1e-3, "--widths", "8", "--seed", seed,
            "--tol", 1.0]


@pytest.fixture
def cls_store(tmp_path, capsys):
    src = write_images(tmp_path / "img", 4)
    code, _, _ = run(capsys, *fit_args(src, tmp_path / "store"))
    assert code == 0
    return tmp_path / "store"


class TestConfig:
    def test_parse(self):
        cfg = parse_config(BASE)
        assert cfg["train.steps"] == 3 and cfg["points.scramble"] is True
        tc = cfg.train_config()
        assert tc.n_points == 64 and tc.batch == 4

    def test_resolved_lists_every_key(self):
        text = parse_config(BASE).resolved()
        assert "train.weight_decay = 0.0" in text and "net.arch = inrnet2" in text

    @pytest.mark.parametrize("extra, key", [("train.stpes = 3", "train.stpes"), ("train.lr = 0.5", "train.lr"),
                                            ("points.n = many", "points.n")])
    def test_errors_name_the_key(self, extra, key):
        with pytest.raises(ConfigError, match=key):
            parse_config(BASE + extra + "\n")

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="train.lr"):
            parse_config(BASE.replace("train.lr = 0.01", ""))

    def test_bad_line_and_io(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_config(BASE.replace("# classifier run", "oops"))
        with pytest.raises(ConfigError, match="net.io"):
            parse_config(BASE.replace("inr->vector", "inr->inr"))

    def test_invalid_train_value(self):
        with pytest.raises(ConfigError, match="n_points"):
            parse_config(BASE.replace("points.n = 64", "points.n = 4"))

    @pytest.mark.parametrize("arch, io_sig, classes", [("inrnet2", "inr->vector", 3), ("seg1", "inr->inr", 4),
                                                       ("legendre", "vector->inr", 1)])
    def test_presets(self, arch, io_sig, classes):
        text = BASE.replace("inrnet2", arch).replace("inr->vector", io_sig) + f"net.classes = {classes}\n"
        g = build_preset(parse_config(text).values)
        assert g.io == io_sig
        assert g.out_channels == classes


class TestData:
    def test_pnm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7)) / 255.0
        write_pnm(tmp_path / "a.pgm", img)
        assert np.array_equal(read_pnm(tmp_path / "a.pgm"), img.astype(np.float32))
        rgb = np.random.default_rng(1).integers(0, 256, size=(3, 4, 3)) / 255.0
        write_pnm(tmp_path / "b.ppm", rgb)
        assert np.array_equal(read_pnm(tmp_path / "b.ppm"), rgb.astype(np.float32))

    def test_pnm_header_comment(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        assert read_pnm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]

    def test_pnm_errors(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(FormatError):
            read_pnm(tmp_path / "bad.pgm")
        (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        with pytest.raises(FormatError):
            read_pnm(tmp_path / "short.pgm")

    def test_store_round_trip(self, tmp_path):
        store = DatasetStore.create(tmp_path / "s")
        m = constant_model(0.3)
        store.add(m, label=1)
        store.add(m, dense_labels=threshold_labels(m, 10, 0))
        back = DatasetStore.open(tmp_path / "s")
        assert len(back) == 2
        recs = back.records()
        assert recs[0].label == 1 and recs[1].dense_labels.shape == (10, 3)
        assert inr.serialize(recs[0].model) == inr.serialize(m)

    def test_store_missing_file(self, tmp_path):
        store = DatasetStore.create(tmp_path / "s")
        name = store.add(constant_model(0.3))
        (tmp_path / "s" / name).unlink()
        with pytest.raises(FormatError):
            DatasetStore.open(tmp_path / "s")


class TestFit:
    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        code, out, _ = run(capsys, *fit_args(tmp_path / "empty", tmp_path / "store"))
        assert code == 0 and rows(out) == [["file", "final_mse", "converged"]]
        assert len(DatasetStore.open(tmp_path / "store")) == 0

    def test_one_line_per_image(self, tmp_path, capsys):
        src = write_images(tmp_path / "img", 3)
        code, out, _ = run(capsys, *fit_args(src, tmp_path / "store"))
        table = rows(out)
        assert code == 0 and len(table) == 4
        assert all(float(r[1]) >= 0 for r in table[1:])
        recs = DatasetStore.open(tmp_path / "store").records()
        assert [r.label for r in recs] == [0, 1, 0]

    def test_deterministic_bytes(self, tmp_path, capsys):
        src = write_images(tmp_path / "img", 2)
        run(capsys, *fit_args(src, tmp_path / "a"))
        run(capsys, *fit_args(src, tmp_path / "b"))
        a = sorted((p.name, p.read_bytes()) for p in (tmp_path / "a").iterdir())
        b = sorted((p.name, p.read_bytes()) for p in (tmp_path / "b").iterdir())
        assert a == b

    def test_unreadable_image_skipped(self, tmp_path, capsys):
        src = write_images(tmp_path / "img", 2, labels=False)
        (src / "broken.pgm").write_bytes(b"junk")
        code, out, err = run(capsys, *fit_args(src, tmp_path / "store"))
        assert code == 2 and "broken.pgm" in err
        assert len(DatasetStore.open(tmp_path / "store")) == 2

    def test_not_converged_exit(self, tmp_path, capsys):
        src = write_images(tmp_path / "img", 1)
        argv = fit_args(src, tmp_path / "store")
        argv[-1] = 1e-12
        assert run(capsys, *argv)[0] == 2


class TestTrainEval:
    def test_train_zero_steps_equals_init(self, tmp_path, capsys, cls_store):
        (tmp_path / "run.cfg").write_text(BASE.replace("train.steps = 3", "train.steps = 0"))
        code, _, err = run(capsys, "train-cls", "--data", cls_store, "--config", tmp_path / "run.cfg",
                           "--out", tmp_path / "ck.ingr")
        assert code == 0 and "net.arch = inrnet2" in err
        init = build_preset(parse_config(BASE).values)
        got = load_graph(tmp_path / "ck.ingr")
        assert all(np.array_equal(p.data, q.data) for p, q in zip(got.params(), init.params()))

    def test_train_log_and_eval(self, tmp_path, capsys, cls_store):
        (tmp_path / "run.cfg").write_text(BASE)
        ck = tmp_path / "ck.ingr"
        assert run(capsys, "train-cls", "--data", cls_store, "--config", tmp_path / "run.cfg", "--out", ck)[0] == 0
        log = rows((tmp_path / "ck.ingr.log").read_text())
        assert log[0] == ["step", "loss"] and len(log) == 4
        assert all(np.isfinite(float(r[1])) for r in log[1:])
        code, out, _ = run(capsys, "eval", "--ckpt", ck, "--data", cls_store, "--n-points", "64,256", "--seed", 1)
        table = rows(out)
        assert code == 0 and table[0] == ["n_points", "sampler", "top1", "top3", "miou", "pixacc"]
        assert [r[0] for r in table[1:]] == ["64", "256"]
        assert 0.0 <= float(table[1][2]) <= 1.0
        again = run(capsys, "eval", "--ckpt", ck, "--data", cls_store, "--n-points", "64,256", "--seed", 1)[1]
        assert again == out

    def test_eval_grid_non_square(self, tmp_path, capsys, cls_store):
        (tmp_path / "run.cfg").write_text(BASE)
        ck = tmp_path / "ck.ingr"
        run(capsys, "train-cls", "--data", cls_store, "--config", tmp_path / "run.cfg", "--out", ck)
        code, out, err = run(capsys, "eval", "--ckpt", ck, "--data", cls_store, "--n-points", "1000",
                             "--sampler", "grid")
        assert code == 0 and "warning" in err and rows(out)[1][0] == "1024"

    def test_io_mismatch_before_training(self, tmp_path, capsys, cls_store):
        (tmp_path / "run.cfg").write_text(BASE)
        code, _, err = run(capsys, "train-seg", "--data", cls_store, "--config", tmp_path / "run.cfg",
                           "--out", tmp_path / "ck.ingr")
        assert code == 3 and "net.io" in err
        assert not (tmp_path / "ck.ingr.log").exists()

    def test_missing_key_exit(self, tmp_path, capsys, cls_store):
        (tmp_path / "run.cfg").write_text(BASE.replace("points.n = 64", ""))
        code, _, err = run(capsys, "train-cls", "--data", cls_store, "--config", tmp_path / "run.cfg",
                           "--out", tmp_path / "ck.ingr")
        assert code == 3 and "points.n" in err

    def test_bad_checkpoint(self, tmp_path, capsys, cls_store):
        (tmp_path / "junk.ingr").write_bytes(b"nope")
        assert run(capsys, "eval", "--ckpt", tmp_path / "junk.ingr", "--data", cls_store)[0] == 3

    def test_train_gen(self, tmp_path, capsys):
        store = DatasetStore.create(tmp_path / "s")
        for v in (0.2, 0.4):
            store.add(constant_model(v))
        cfg = BASE.replace("inrnet2", "legendre").replace("inr->vector", "vector->inr") + "net.in_channels = 3\n"
        (tmp_path / "gen.cfg").write_text(cfg)
        code, _, _ = run(capsys, "train-gen", "--data", tmp_path / "s", "--config", tmp_path / "gen.cfg",
                         "--out", tmp_path / "g.ingr")
        assert code == 0 and load_graph(tmp_path / "g.ingr").io == "vector->inr"


class TestReports:
    def test_discrepancy_decreasing(self, capsys):
        code, out, _ = run(capsys, "discrepancy", "--sampler", "sobol", "--d", 2, "--n", "64,256,1024")
        table = rows(out)
        assert code == 0 and table[0] == ["n", "star_discrepancy", "method"] and len(table) == 4
        d = [float(r[1]) for r in table[1:]]
        assert d[0] > d[1] > d[2]

    def test_approx_demo(self, capsys):
        code, out, _ = run(capsys, "approx-demo", "--target", "quadrant", "--eps", 0.1)
        table = rows(out)
        assert code == 0 and float(table[1][table[0].index("l1_error")]) < 0.1

    def test_gradcheck_conv(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--layer", "conv", "--configs", 2)
        table = rows(out)
        assert code == 0 and len(table) == 1 + 3 * 2
        assert max(float(r[2]) for r in table[1:]) < 1e-3

    def test_gradcheck_unknown_layer(self, capsys):
        assert run(capsys, "gradcheck", "--layer", "attention")[0] == 3

    def test_convert_check(self, capsys):
        code, out, _ = run(capsys, "convert-check", "--images", 3, "--fp64")
        table = rows(out)
        assert code == 0 and len(table) == 4 and max(float(r[1]) for r in table[1:]) < 1e-8

    def test_deterministic_output(self, capsys):
        a = run(capsys, "discrepancy", "--sampler", "sobol", "--n", "128", "--seed", 3)[1]
        b = run(capsys, "discrepancy", "--sampler", "sobol", "--n", "128", "--seed", 3)[1]
        assert a == b

    def test_usage_error(self, capsys):
        assert run(capsys, "no-such-command")[0] == 3

    def test_thread_cap_validation(self, capsys, monkeypatch):
        monkeypatch.setenv("INRNET_THREADS", "zero")
        assert run(capsys, "discrepancy", "--n", "16")[0] == 3

    @pytest.mark.skipif(shutil.which("inrnet") is None, reason="console script not installed")
    def test_console_script(self):
        res = subprocess.run(["inrnet", "discrepancy", "--n", "16,64"], capture_output=True, text=True,
                             timeout=120)
        assert res.returncode == 0 and res.stdout.startswith("n,star_discrepancy,method")
