import csv
import io
import json

import numpy as np
import pytest

from handtcl.cli import RunConfig, load_config, main
from handtcl.errors import InvalidConfig
from handtcl.synth import load_dataset

TINY = {
    "version": 1,
    "synth": {"n_frames": 16, "image_size": 16},
    "n_sequences": 3,
    "contrastive": {"M": 4, "radius": 3},
    "pretrain_schedule": {"total_epochs": 2, "warmup_epochs": 1, "batch_size": 4},
    "finetune_schedule": {"base_lr": 5e-4, "total_epochs": 2, "warmup_epochs": 1, "batch_size": 16},
    "ablation": {"seeds": [0, 1]},
    "audit": {"strategies": ["linear", "tanh"], "radii": [2], "n_draws": 20000},
}


def run(args):
    err = io.StringIO()
    code = main([str(a) for a in args], stderr=err)
    return code, err.getvalue()


def write_config(path, **over):
    cfg = dict(TINY)
    cfg.update(over)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "synth.json")
    assert run(["synth", "--config", cfg, "--seed", 5, "--out", root / "train"])[0] == 0
    assert run(["synth", "--config", cfg, "--seed", 900, "--out", root / "test"])[0] == 0
    run_cfg = write_config(
        root / "run.json", datasets={"train": str(root / "train" / "dataset"), "test": str(root / "test" / "dataset")}
    )
    return root, run_cfg


def files_of(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_synth_with_no_sequences(tmp_path):
    cfg = write_config(tmp_path / "c.json", n_sequences=0)
    code, err = run(["synth", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"])
    assert code == 0 and err == ""
    manifest = json.loads((tmp_path / "o" / "dataset" / "manifest.json").read_text())
    assert manifest["sequences"] == [] and manifest["n_sequences"] == 0
    assert len(load_dataset(tmp_path / "o" / "dataset")) == 0


def test_synth_is_byte_identical(data, tmp_path):
    root, _ = data
    cfg = write_config(tmp_path / "c.json")
    run(["synth", "--config", cfg, "--seed", 5, "--out", tmp_path / "again"])
    assert files_of(tmp_path / "again" / "dataset") == files_of(root / "train" / "dataset")


def test_config_defaults_are_materialized(data):
    root, _ = data
    snap = json.loads((root / "train" / "config.json").read_text())
    assert snap["command"] == "synth" and snap["seed"] == 5
    cfg = snap["config"]
    assert cfg["version"] == 1
    assert cfg["contrastive"]["tau"] == 0.5 and cfg["contrastive"]["n_neg"] == 8
    assert cfg["finetune_schedule"]["batch_size"] == 16
    # the materialized document is itself a valid config
    assert RunConfig.from_dict(cfg).to_dict() == cfg


@pytest.mark.parametrize("command", ["pretrain", "finetune", "eval", "export-embeddings"])
def test_training_commands_are_reproducible(data, tmp_path, command):
    root, cfg = data
    extra = []
    if command in ("eval", "export-embeddings"):
        assert run(["finetune", "--config", cfg, "--seed", 3, "--out", tmp_path / "ft"])[0] == 0
        extra = ["--checkpoint", tmp_path / "ft" / "finetune.ckpt"]
    outs = []
    for rep in ("a", "b"):
        code, err = run([command, "--config", cfg, "--seed", 3, "--out", tmp_path / rep, *extra])
        assert code == 0, err
        outs.append(files_of(tmp_path / rep))
    assert outs[0] == outs[1]
    assert len(outs[0]) >= 2


def test_pretrain_then_finetune_outputs(data, tmp_path):
    root, cfg = data
    run(["pretrain", "--config", cfg, "--seed", 1, "--out", tmp_path / "pre"])
    rows = list(csv.reader(open(tmp_path / "pre" / "pretrain_loss.csv")))
    assert rows[0] == ["epoch", "loss", "lr"] and len(rows) == 3
    code, err = run(
        ["finetune", "--config", cfg, "--seed", 1, "--out", tmp_path / "ft", "--checkpoint", tmp_path / "pre" / "pretrain.ckpt"]
    )
    assert code == 0, err
    assert list(csv.reader(open(tmp_path / "ft" / "finetune_loss.csv")))[0] == ["epoch", "loss", "l2d", "l3d", "ltheta", "lr"]


def test_eval_identity_hook(data, tmp_path):
    root, _ = data
    cfg = write_config(
        tmp_path / "c.json", datasets={"test": str(root / "test" / "dataset")}, eval_model="identity"
    )
    assert run(["eval", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"])[0] == 0
    report = json.loads((tmp_path / "o" / "metrics.json").read_text())
    for mode, metrics in report["aggregate"].items():
        for name, value in metrics.items():
            if name.startswith("f@"):
                assert value == 1.0
            else:
                assert value == pytest.approx(0.0, abs=1e-6), (mode, name)


def test_export_embeddings_layout(data, tmp_path):
    root, cfg = data
    run(["finetune", "--config", cfg, "--seed", 2, "--out", tmp_path / "ft"])
    ck = tmp_path / "ft" / "finetune.ckpt"
    assert run(["export-embeddings", "--config", cfg, "--seed", 0, "--out", tmp_path / "e", "--checkpoint", ck])[0] == 0
    rows = list(csv.reader(open(tmp_path / "e" / "embeddings.csv")))
    assert rows[0][:3] == ["seq_id", "frame_index", "e0"] and rows[0][-1] == "e63"
    assert len(rows) == 1 + 3 * 16
    assert rows[1][:2] == ["seq_00000", "0"]


def test_audit_sampling_csv(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert run(["audit-sampling", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"])[0] == 0
    for strategy in ("linear", "tanh"):
        rows = list(csv.reader(open(tmp_path / "o" / f"audit_{strategy}_k2.csv")))
        assert rows[0] == ["distance", "analytic_p", "empirical_p"]
        d = np.array([int(r[0]) for r in rows[1:]])
        a = np.array([float(r[1]) for r in rows[1:]])
        e = np.array([float(r[2]) for r in rows[1:]])
        inside = np.abs(d) <= 2
        assert a[inside].sum() == pytest.approx(1.0) and a[~inside].sum() == pytest.approx(1.0)
        assert e[inside].sum() == pytest.approx(1.0) and np.abs(a - e).max() < 0.02


def test_ablate_reports_every_arm(data, tmp_path):
    root, cfg = data
    assert run(["ablate", "--config", cfg, "--seed", 0, "--out", tmp_path / "a"])[0] == 0
    rows = list(csv.reader(open(tmp_path / "a" / "ablation.csv")))
    assert [r[0] for r in rows[1:]] == ["Baseline", "TempCLR", "TempCLR-NoCoherentAug", "TempCLR-NoProbSampling"]
    result = json.loads((tmp_path / "a" / "ablation.json").read_text())
    for arm in result["arms"].values():
        assert set(arm["per_seed"]) == {"0", "1"}
        pa = [v["pa.epe"] for v in arm["per_seed"].values()]
        assert arm["median"]["pa.epe"] == pytest.approx(np.median(pa))


def test_ablate_is_independent_of_worker_count(data, tmp_path):
    root, _ = data
    base = json.loads(data[1].read_text())
    for workers in (1, 2):
        base["ablation"] = {"seeds": [0], "arms": ["Baseline", "TempCLR"], "workers": workers}
        cfg = tmp_path / f"w{workers}.json"
        cfg.write_text(json.dumps(base))
        assert run(["ablate", "--config", cfg, "--seed", 0, "--out", tmp_path / f"w{workers}"])[0] == 0
    a = json.loads((tmp_path / "w1" / "ablation.json").read_text())
    b = json.loads((tmp_path / "w2" / "ablation.json").read_text())
    assert a == b


@pytest.mark.parametrize(
    "cfg,code",
    [
        ({"version": 2}, "invalid_config"),
        ({"version": 1, "bogus": 1}, "invalid_config"),
        ({"version": 1, "contrastive": {"tau": 0}}, "invalid_config"),
        ({"version": 1, "augment": {"pretrain": "nope"}}, "invalid_config"),
        ({"version": 1, "synth": {"n_frames": 1}}, "invalid_config"),
    ],
)
def test_invalid_configs_fail_with_json_errors(tmp_path, cfg, code):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    status, err = run(["synth", "--config", path, "--seed", 0, "--out", tmp_path / "o"])
    assert status == 2
    assert json.loads(err)["error"] == code


def test_missing_inputs_fail_with_json_errors(data, tmp_path):
    root, cfg = data
    status, err = run(["eval", "--config", cfg, "--seed", 0, "--out", tmp_path / "o"])
    assert status == 2 and json.loads(err)["error"] == "invalid_config"
    status, err = run(["eval", "--config", cfg, "--seed", 0, "--out", tmp_path / "o", "--checkpoint", tmp_path / "none.ckpt"])
    assert status == 2 and json.loads(err)["error"] == "io_error"
    (tmp_path / "junk.ckpt").write_bytes(b"JUNKJUNK")
    status, err = run(["eval", "--config", cfg, "--seed", 0, "--out", tmp_path / "o", "--checkpoint", tmp_path / "junk.ckpt"])
    assert status == 2 and json.loads(err)["error"] == "format_error"
    status, err = run(["pretrain", "--seed", 0, "--out", tmp_path / "o"])
    assert status == 2 and "datasets.train" in json.loads(err)["message"]
    status, err = run(["synth", "--seed", -1, "--out", tmp_path / "o"])
    assert status == 2


def test_default_config_matches_design_defaults():
    cfg = load_config(None)
    assert cfg.pretrain_schedule.total_epochs == 50 and cfg.pretrain_schedule.base_lr == 1e-3
    assert cfg.contrastive.M == 32
    assert cfg.finetune_schedule.base_lr == 5e-4 and cfg.finetune_schedule.batch_size == 128
    assert cfg.finetune_schedule.total_epochs == 10
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({})
