import json

import numpy as np
import pytest

from mgbp import cli, io
from mgbp import config as C
from mgbp.graph import ConfigError


def toy_dict():
    return json.loads(C.load("preset:toy").dumps())


def test_effective_config_round_trips():
    cfg = C.load("preset:toy")
    again = C.loads(cfg.dumps())
    assert again.dumps() == cfg.dumps()
    assert json.loads(cfg.dumps())["train"]["patch_size"] == 32


def test_paper_preset_protocol_constants():
    eff = json.loads(C.load("preset:mgbpv2-x4").dumps())
    assert C.loads(json.dumps(eff)).loss_weights.coefficients() == (0.001, 10, 0.1, 10, 10)
    assert (eff["train"]["lr"], eff["train"]["halving_interval"]) == (1e-4, 200000)
    assert (eff["train"]["batch_size"], eff["train"]["patch_size"]) == (16, 192)


def test_unknown_keys_and_bad_versions_are_rejected():
    d = toy_dict()
    d["model"]["depth"] = 3
    with pytest.raises(ConfigError, match="depth"):
        C.from_dict(d)
    d = toy_dict()
    d["version"] = 2
    with pytest.raises(ConfigError, match="version"):
        C.from_dict(d)
    d = toy_dict()
    d["train"]["scale_factor"] = 4
    with pytest.raises(ConfigError):
        C.from_dict(d)


def test_every_preset_loads():
    names = C.preset_names()
    assert {"toy", "mgbpv2-x16", "mgbp3d-x16"} <= set(names)
    for name in names:
        C.load(f"preset:{name}")


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_describe_paper_x8(capsys, tmp_path):
    code, out, _ = run(["describe", "--config", "preset:mgbpv2-x8", "--out", str(tmp_path)],
                       capsys)
    assert code == 0 and "16" in out
    assert (tmp_path / "effective_config.json").exists()
    assert (tmp_path / "describe.txt").read_text().strip() == out.strip()


def test_gradcheck_passes_on_toy(capsys, tmp_path):
    code, out, _ = run(["gradcheck", "--config", "preset:toy", "--out", str(tmp_path)], capsys)
    assert code == 0 and "PASS" in out


def test_infer_is_byte_identical_across_runs(capsys, tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 16, 16)).astype(float)
    io.write_png(tmp_path / "in.png", img)
    outs = []
    for seed, name in ((1, "a"), (2, "b")):
        code, _, err = run(["infer", "--config", "preset:toy", "--input", str(tmp_path / "in.png"),
                            "--noise-amp", "0", "--seed", str(seed),
                            "--out", str(tmp_path / name)], capsys)
        assert code == 0, err
        outs.append((tmp_path / name / "in_x2.png").read_bytes())
    assert outs[0] == outs[1]


def test_sweep_writes_one_row_per_amplitude(capsys, tmp_path):
    r = np.random.default_rng(1)
    io.write_png(tmp_path / "in.png", r.integers(0, 256, (3, 16, 16)).astype(float))
    io.write_png(tmp_path / "hr.png", r.integers(0, 256, (3, 32, 32)).astype(float))
    code, _, err = run(["sweep", "--config", "preset:toy", "--input", str(tmp_path / "in.png"),
                        "--reference", str(tmp_path / "hr.png"), "--out", str(tmp_path / "s")],
                       capsys)
    assert code == 0, err
    assert len((tmp_path / "s" / "sweep.jsonl").read_text().splitlines()) == 6


def test_analyze_writes_cost_record(capsys, tmp_path):
    code, out, _ = run(["analyze", "--config", "preset:toy", "--input-shape", "32,32",
                        "--out", str(tmp_path)], capsys)
    assert code == 0 and "total MACs" in out
    assert "macs" in json.loads((tmp_path / "cost.jsonl").read_text())


def test_bad_config_exits_nonzero_with_one_line(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "model": {"levels": 2, "bogus": 1}}')
    code, _, err = run(["describe", "--config", str(bad)], capsys)
    assert code == 2 and err.count("\n") == 1 and "bogus" in err
    code, _, err = run(["describe", "--config", str(tmp_path / "missing.json")], capsys)
    assert code == 2
