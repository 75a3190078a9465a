import json

import numpy as np
import pytest
from PIL import Image

from zeropair.cli import main
from zeropair.codec import Palette
from zeropair.data import ingest_folder, read_split_manifest
from zeropair.model import NetworkConfig, build_decoder
from zeropair.trainer import TrainState, load_checkpoint

from conftest import CONFIGS

TINY_TOML = """
[model]
image_size = 32
base_channels = 4
mode = "{mode}"

[loss]
total_iters = {iters}
batch_size = 2
lambda_l1 = 100.0

[train]
seed = 0
out_dir = "{out}"

[data]
toy_size = 32
n_rd = 8
n_rs = 8
n_test = 4
"""


def write_cfg(path, mode="dcn", iters=6, out="run"):
    path.write_text(TINY_TOML.format(mode=mode, iters=iters, out=out))
    return path


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """A tiny DCN checkpoint trained long enough to have learned something."""
    root = tmp_path_factory.mktemp("trained")
    cfg = write_cfg(root / "cfg.toml", iters=300, out=root / "run")
    assert main(["train", "--config", str(cfg), "--log-every", "1000"]) == 0
    assert main(["make-splits", "--config", str(cfg), "--out", str(root / "splits.json")]) == 0
    return root, root / "run" / "checkpoints" / "ckpt_0000300.pt"


def test_inspect_params_paper_scale(tmp_path, capsys):
    out = tmp_path / "p.json"
    assert main(["inspect-params", "--config", "configs/paper_dcn.toml", "--json", str(out)]) == 0
    s = json.loads(out.read_text())
    assert abs(s["dcn0"]["generator"] - 11.41e6) / 11.41e6 < 0.01
    assert abs(s["dcn"]["generator"] - 11.44e6) / 11.44e6 < 0.01
    assert s["delta"]["match"] and s["delta"]["measured"] == 33_024
    assert "match" in capsys.readouterr().out


def test_inspect_params_toy_delta_matches_structural_walk(tmp_path):
    out = tmp_path / "p.json"
    cfg = write_cfg(tmp_path / "c.toml")
    assert main(["inspect-params", "--config", str(cfg), "--json", str(out)]) == 0
    walked = sum(2 * m.num_features
                 for _, m in build_decoder(NetworkConfig(32, 4, mode="dcn0")).cbn_layers())
    assert json.loads(out.read_text())["delta"]["measured"] == (9 - 3) * walked


@pytest.mark.parametrize("mode,step", [("dcn0", "invariance"), ("dcn", "pseudo")])
def test_train_mode_wiring(tmp_path, mode, step):
    cfg = write_cfg(tmp_path / "c.toml", mode="dcn" if mode == "dcn0" else "dcn0",
                    out=tmp_path / "run")
    assert main(["train", "--config", str(cfg), "--mode", mode]) == 0
    payload = load_checkpoint(tmp_path / "run" / "checkpoints" / "ckpt_0000006.pt")
    assert payload["manifest"]["mode"] == mode
    has_cls = any(k.startswith("classifier.") for k in payload["params"])
    assert has_cls == (mode == "dcn0")
    steps = {line.split(",")[1] for line in
             (tmp_path / "run" / "train_log.csv").read_text().splitlines()[1:]}
    assert step in steps
    other = {"dcn0": "pseudo", "dcn": "invariance"}[mode]
    assert other not in steps


def test_same_seed_gives_byte_identical_logs(tmp_path):
    cfg = write_cfg(tmp_path / "c.toml")
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--seed", "7",
                     "--out-dir", str(tmp_path / name)]) == 0
    assert ((tmp_path / "a" / "train_log.csv").read_bytes()
            == (tmp_path / "b" / "train_log.csv").read_bytes())


def test_resume_flag(tmp_path):
    cfg = write_cfg(tmp_path / "c.toml", iters=6, out=tmp_path / "run")
    assert main(["train", "--config", str(cfg)]) == 0
    full = (tmp_path / "run" / "train_log.csv").read_bytes()
    ckpt = tmp_path / "run" / "checkpoints" / "ckpt_0000002.pt"
    assert main(["train", "--config", str(cfg), "--resume", str(ckpt)]) == 0
    assert (tmp_path / "run" / "train_log.csv").read_bytes() == full


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nimage_size = 30\n")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text("[modle]\n")
    assert main(["inspect-params", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "error" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["translate", "--ckpt", "x"])
    assert info.value.code == 2


def test_numerical_abort_exits_3(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path / "c.toml", out=tmp_path / "run")
    orig = TrainState.train_step_supervised

    def poisoned(self, pair_set, a, b):
        return orig(self, pair_set, a * float("nan"), b)

    monkeypatch.setattr(TrainState, "train_step_supervised", poisoned)
    assert main(["train", "--config", str(cfg)]) == 3


def _toy_inputs(tmp_path, size=32):
    gen = tmp_path / "toy"
    assert main(["gen-toy", "--out", str(gen), "--n", "3", "--size", str(size), "--seed", "5"]) == 0
    return gen


@pytest.fixture(scope="session")
def toy_ckpt(toy_run):
    """The committed toy DCN config, shared with the acceptance run."""
    return toy_run("dcn", CONFIGS / "toy_dcn.toml").ckpt


def test_translate_missing_checkpoint(tmp_path):
    gen = _toy_inputs(tmp_path)
    out = tmp_path / "o.png"
    rgb = next((gen / "rgb").glob("*.png"))
    assert main(["translate", "--ckpt", str(tmp_path / "nope.pt"), "--input", str(rgb),
                 "--source", "r", "--target", "s", "--out", str(out)]) == 2
    assert not out.exists()


def test_translate_depth_to_semantics(tmp_path, toy_ckpt):
    ckpt = toy_ckpt
    gen = _toy_inputs(tmp_path, 64)
    p = Palette.toy(5)
    classes = set()
    for depth in sorted((gen / "depth").glob("*.png")):
        out = tmp_path / f"s_{depth.name}"
        assert main(["translate", "--ckpt", str(ckpt), "--input", str(depth),
                     "--source", "d", "--target", "s", "--out", str(out)]) == 0
        px = np.asarray(Image.open(out).convert("RGB"))
        assert {tuple(c) for c in px.reshape(-1, 3).tolist()} <= set(p.colors)
        classes |= {p.colors.index(tuple(c)) for c in px.reshape(-1, 3).tolist()}
    assert len(classes) >= 2


def test_translate_identity_path_reconstructs_input(tmp_path, toy_ckpt):
    ckpt = toy_ckpt
    gen = _toy_inputs(tmp_path, 64)
    rgbs = [np.asarray(Image.open(p).convert("RGB")).astype(float)
            for p in sorted((gen / "rgb").glob("*.png"))]
    src = sorted((gen / "rgb").glob("*.png"))[0]
    for target in ("r", "d"):
        assert main(["translate", "--ckpt", str(ckpt), "--input", str(src), "--source", "r",
                     "--target", target, "--out", str(tmp_path / f"{target}.png")]) == 0
    out = np.asarray(Image.open(tmp_path / "r.png")).astype(float)
    err = [np.abs(out - x).mean() for x in rgbs]
    # the r -> r output tracks its own input rather than scenes in general
    assert err[0] < min(err[1:])
    with Image.open(tmp_path / "d.png") as im:
        assert im.mode.startswith("I")


def test_evaluate_outputs(tmp_path, trained, capsys):
    root, ckpt = trained
    split = root / "splits.json"
    outs = [tmp_path / "a.json", tmp_path / "b.json"]
    for o in outs:
        assert main(["evaluate", "--ckpt", str(ckpt), "--split", str(split), "--out", str(o),
                     "--dump-images", str(tmp_path / "dump")]) == 0
    assert outs[0].read_text() == outs[1].read_text()
    rep = json.loads(outs[0].read_text())
    assert 0 <= rep["mean_iou"] <= 1 and rep["n_images"] == 4
    header = [h.strip() for h in outs[0].with_suffix(".txt").read_text().splitlines()[0].split("|")]
    assert header == list(Palette.toy(5).names) + ["mIoU", "Pixel Acc."]
    n_test = len(read_split_manifest(split)["splits"]["TEST_DS"])
    assert len(list((tmp_path / "dump").glob("*.png"))) == n_test


def test_evaluate_empty_test_set(tmp_path, trained):
    _, ckpt = trained
    split = tmp_path / "empty.json"
    split.write_text(json.dumps({"splits": {"RD": [], "RS": [], "TEST_DS": []}}))
    assert main(["evaluate", "--ckpt", str(ckpt), "--split", str(split),
                 "--out", str(tmp_path / "r.json")]) == 2
    assert not (tmp_path / "r.json").exists()


def test_make_splits_and_gen_toy_roundtrip(tmp_path):
    gen = tmp_path / "toy"
    assert main(["gen-toy", "--out", str(gen), "--n", "10", "--size", "32",
                 "--splits", "4", "4", "2"]) == 0
    samples = ingest_folder(gen, palette=Palette.toy(5))
    assert len(samples) == 10
    m = read_split_manifest(gen / "splits.json")["splits"]
    assert [len(m[k]) for k in ("RD", "RS", "TEST_DS")] == [4, 4, 2]
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[data]\nsource = "folder"\nroot = "{gen}"\nn_rd = 4\nn_rs = 4\nn_test = 2\n')
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["make-splits", "--config", str(cfg), "--out", str(a), "--seed", "3"]) == 0
    assert main(["make-splits", "--config", str(cfg), "--out", str(b), "--seed", "3"]) == 0
    assert a.read_text() == b.read_text()
