import csv
import io
import json

import pytest
import yaml

from odefed.cli import main
from odefed.config import PRESET_DIR, PRESETS, ConfigError, load_config, parse_config, parse_mix, resolve_config

SMALL = {
    "dataset": {"kind": "synth", "classes": 4, "side": 8, "train_per_class": 12, "test_per_class": 6, "server_per_class": 6},
    "model": {"family": "odenet", "iterations": 2, "widths": [4, 8, 8], "norm_groups": 2},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.05, "test_iterations": [1, 2, 4]},
    "federated": {"mix": "1x odenet:C1, 1x odenet:C3", "rounds": 2, "epochs": 1, "batch_size": 8},
    "partition": {"alpha": 10, "seed": 0},
}


def write(tmp_path, cfg, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- config ------------------------------------------------------------------


def test_presets_validate():
    for name in PRESETS:
        cfg = load_config(PRESET_DIR / f"{name}.yaml")
        assert cfg.build_model_config().num_classes == cfg.dataset.classes
    assert (PRESET_DIR / "README.md").exists()


def test_thirty_client_depth_mix():
    cfg = resolve_config("tables-3-5")
    specs = cfg.client_specs()
    assert len(specs) == 30 and cfg.federated.fraction == 0.2
    assert [s.iterations for s in specs].count(5) == 10
    assert [s.iterations for s in specs].count(16) == 10


@pytest.mark.parametrize(
    "text,expected",
    [
        ("10x odenet-34, 10x odenet-50", [(10, "odenet", 5), (10, "odenet", 7)]),
        (["2x dsodenet:C4", "1x dsodenet"], [(2, "dsodenet", 4), (1, "dsodenet", None)]),
        ("3× resnet-101", [(3, "resnet", 16)]),
    ],
)
def test_parse_mix(text, expected):
    assert parse_mix(text) == expected


@pytest.mark.parametrize(
    "patch,needle",
    [
        ({"model": {"bogus": 1}}, "model.bogus: unknown key"),
        ({"extra_section": {}}, "extra_section: unknown key"),
        ({"federated": {"mix": "2 odenet"}}, "cannot parse"),
        ({"federated": {"clients": 3, "mix": "1x odenet"}}, "adds up to 1"),
        ({"model": {"widths": [6, 8, 8], "norm_groups": 4}}, "norm_groups"),
        ({"model": {"depth": 50, "iterations": 3}}, "either depth or iterations"),
        ({"dataset": {"kind": "cifar10"}}, "path is required"),
        ({"federated": {"mix": "1x resnet-34"}}, "differs from model.family"),
    ],
)
def test_schema_errors(patch, needle):
    data = {k: dict(v) for k, v in SMALL.items()}
    for section, values in patch.items():
        data[section] = {**data.get(section, {}), **values} if isinstance(values, dict) and values else values
    with pytest.raises(ConfigError, match=needle):
        parse_config(data)


def test_config_echo_round_trips(tmp_path):
    cfg = parse_config(SMALL)
    from odefed.config import dump_config

    dump_config(cfg, tmp_path / "echo.yaml")
    assert load_config(tmp_path / "echo.yaml") == cfg


# -- count -------------------------------------------------------------------


def test_count_depths_identical(capsys):
    code, out, _ = run(capsys, "count", "--family", "odenet", "--depth", "34,50,101")
    assert code == 0
    assert out.splitlines()[0] == "family,depth,C,params,bytes,mib"
    table = rows(out)
    assert [r["C"] for r in table] == ["5", "7", "16"]
    assert len({r["params"] for r in table}) == 1
    assert int(table[0]["bytes"]) == 4 * int(table[0]["params"])


def test_count_resnet_increasing(capsys):
    _, out, _ = run(capsys, "count", "--family", "resnet", "--iters", "1,2")
    a, b = rows(out)
    assert int(b["params"]) > int(a["params"])


def test_count_ratios(tmp_path, capsys):
    out_file = tmp_path / "r.csv"
    code, _, _ = run(capsys, "count", "--family", "resnet,odenet", "--depth", "50", "--ratios-out", out_file)
    assert code == 0
    (row,) = rows(out_file.read_text())
    assert row["family"] == "odenet" and 0 < float(row["reduction_pct"]) < 100


@pytest.mark.parametrize("argv", [["--family", "vgg", "--depth", "34"], ["--depth", "34", "--iters", "2"], ["--iters", "0"]])
def test_count_usage_errors(capsys, argv):
    code, _, err = run(capsys, "count", *argv)
    assert code == 2 and "error [usage]" in err


# -- partition ---------------------------------------------------------------


def test_partition_csv(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    _, out, _ = run(capsys, "partition", "--config", cfg, "--clients", "3", "--alpha", "1", "--seed", "4")
    table = rows(out)
    assert len(table) == 3
    for r in table:
        assert int(r["n_k"]) == sum(int(r[f"class_{c}"]) for c in range(4))
    assert sum(int(r["n_k"]) for r in table) == 48
    _, again, _ = run(capsys, "partition", "--config", cfg, "--clients", "3", "--alpha", "1", "--seed", "4")
    assert again == out


def test_partition_chi_square_column_orders_alpha(capsys):
    def mean_chi(alpha):
        _, out, _ = run(capsys, "partition", "--clients", "10", "--alpha", alpha, "--seed", "0")
        return sum(float(r["chi_square"]) for r in rows(out)) / 10

    assert mean_chi(100) < mean_chi(1)


def test_partition_error(capsys):
    code, _, err = run(capsys, "partition", "--clients", "5", "--alpha", "-1")
    assert code == 1 and "error [partition]" in err


# -- train / eval ------------------------------------------------------------


def test_train_then_eval(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    code, _, _ = run(capsys, "train", cfg, "--out", tmp_path / "run")
    assert code == 0
    grid = rows((tmp_path / "run" / "compat.csv").read_text())
    assert [r["tested_C"] for r in grid] == ["1", "2", "4"]
    assert (tmp_path / "run" / "config.yaml").exists()

    ckpt = tmp_path / "run" / "model.ckpt"
    _, out, _ = run(capsys, "eval", ckpt, "--iters", "2")
    (ev,) = rows(out)
    same = next(r for r in grid if r["tested_C"] == "2")
    assert (ev["loss"], ev["top1"]) == (same["loss"], same["top1"])
    code, out, _ = run(capsys, "eval", ckpt, "--iters", "4")
    assert code == 0 and rows(out)[0]["C"] == "4"


def test_eval_resnet_rejects_iters(tmp_path, capsys):
    data = {**SMALL, "model": {**SMALL["model"], "family": "resnet"}, "train": {**SMALL["train"], "epochs": 0, "test_iterations": []}}
    data.pop("federated")
    cfg = write(tmp_path, data)
    assert run(capsys, "train", cfg, "--out", tmp_path / "res")[0] == 0
    code, _, err = run(capsys, "eval", tmp_path / "res" / "model.ckpt", "--iters", "3")
    assert code == 2 and "re-iterated" in err


def test_eval_digest_mismatch(tmp_path, capsys):
    cfg = write(tmp_path, {**SMALL, "train": {**SMALL["train"], "epochs": 0}})
    run(capsys, "train", cfg, "--out", tmp_path / "m")
    sidecar = tmp_path / "m" / "model.json"
    meta = json.loads(sidecar.read_text())
    meta["model"]["stage_channels"] = [4, 8, 16]
    sidecar.write_text(json.dumps(meta))
    code, _, err = run(capsys, "eval", tmp_path / "m" / "model.ckpt")
    assert code == 1 and "error [checkpoint]" in err and "digest" in err


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", tmp_path / "nope.ckpt")
    assert code == 1 and "error [file]" in err


def test_unknown_key_fails_before_work(tmp_path, capsys):
    cfg = write(tmp_path, {**SMALL, "train": {**SMALL["train"], "epoch": 3}})
    code, _, err = run(capsys, "train", cfg, "--out", tmp_path / "never")
    assert code == 2 and "train.epoch" in err
    assert not (tmp_path / "never").exists()


# -- federate ----------------------------------------------------------------


def test_federate_outputs_and_determinism(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    run(capsys, "federate", cfg, "--out", tmp_path / "a")
    run(capsys, "federate", cfg, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "rounds.csv").read_bytes()
    assert a == (tmp_path / "b" / "rounds.csv").read_bytes()
    table = rows(a.decode())
    assert list(table[0]) == ["round", "selected", "mean_client_loss", "global_loss", "top1", "top5", "bytes"]
    assert [r["round"] for r in table] == ["1", "2"]
    assert (tmp_path / "a" / "final.ckpt").exists() and (tmp_path / "a" / "config.yaml").exists()


def test_feddf_zero_steps_csv_equals_fedavg(tmp_path, capsys):
    fedavg = write(tmp_path, SMALL, "avg.yaml")
    df = {**SMALL, "federated": {**SMALL["federated"], "algorithm": "feddf", "feddf": {"budget": 10, "steps": 0}}}
    feddf = write(tmp_path, df, "df.yaml")
    run(capsys, "federate", fedavg, "--out", tmp_path / "avg")
    run(capsys, "federate", feddf, "--out", tmp_path / "df")
    assert (tmp_path / "avg" / "rounds.csv").read_bytes() == (tmp_path / "df" / "rounds.csv").read_bytes()


def test_socket_mode_csv_equals_in_process(tmp_path, capsys):
    cfg = write(tmp_path, SMALL)
    run(capsys, "federate", cfg, "--out", tmp_path / "ip")
    assert run(capsys, "federate", cfg, "--out", tmp_path / "sock", "--mode", "socket")[0] == 0
    assert (tmp_path / "ip" / "rounds.csv").read_bytes() == (tmp_path / "sock" / "rounds.csv").read_bytes()


def test_federate_resnet_mixed_depths_fails(tmp_path, capsys):
    data = {**SMALL, "model": {**SMALL["model"], "family": "resnet"}, "federated": {**SMALL["federated"], "mix": "1x resnet:C1, 1x resnet:C3"}}
    code, _, err = run(capsys, "federate", write(tmp_path, data), "--out", tmp_path / "r")
    assert code == 1 and "error [shape]" in err


def test_log_level_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("ODEFED_LOG_LEVEL", "info")
    import logging

    logging.getLogger().handlers.clear()
    cfg = write(tmp_path, SMALL)
    run(capsys, "federate", cfg, "--out", tmp_path / "log")
    assert logging.getLogger().level == logging.INFO
