"""CLI: config resolution, report rendering, subcommands, exit codes."""

import json

import numpy as np
import pytest

from onlinekd import cli
from onlinekd.cli import (
    build_config,
    build_report,
    config_digest,
    default_experiment,
    load_config,
    main,
)
from onlinekd.errors import (
    ConfigError,
    DivergenceError,
    SchemaError,
    StoreCorruptionError,
)
from onlinekd.labelstore import LabelStore, SegmentWriter, segment_filename
from onlinekd.pipeline import (
    FAMILIES,
    FAMILY_DISTILL,
    FAMILY_OBJECTIVE,
    FAMILY_SCALE,
    JOB_LEVEL_TASK,
    MetricRow,
    build_runs,
    read_metrics_csv,
    write_metrics_csv,
)
from onlinekd.ranker import AUXILIARY, BINARY, NO_DISTILL


def test_default_experiment_covers_every_family():
    for family in FAMILIES:
        cfg = default_experiment(family, (0, 1))
        assert cfg.family == family
        assert cfg.seeds == (0, 1)
        build_runs(cfg)  # expands without error
    with pytest.raises(ConfigError, match="unknown family"):
        default_experiment("nope", (0,))


def test_parse_seed_list():
    assert cli._parse_seed_list("0,1,2") == (0, 1, 2)
    assert cli._parse_seed_list("0-3") == (0, 1, 2, 3)
    assert cli._parse_seed_list("7") == (7,)
    assert cli._parse_seed_list("0-1,5") == (0, 1, 5)
    with pytest.raises(ConfigError, match="bad seed range"):
        cli._parse_seed_list("5-2")
    with pytest.raises(ConfigError, match="empty"):
        cli._parse_seed_list(",")
    with pytest.raises(ConfigError, match="duplicate"):
        cli._parse_seed_list("1,1")


def test_build_config_minimal_uses_family_defaults():
    cfg = build_config({"family": FAMILY_DISTILL})
    assert cfg.seeds == tuple(range(10))
    assert cfg.distill_tasks == ("ltv",)
    assert cfg.bias == {"ltv": 1.3}
    assert cfg.schedule.total_steps == 3000


def test_build_config_overrides_and_merging():
    raw = {
        "family": "custom",
        "seeds": [0, 1],
        "stream": {
            "feature_dim": 8,
            "drift_rate": 0.99,
            "tasks": [
                {"name": "ctr", "kind": "binary", "category": "pet", "distill": True},
                {"name": "spend", "kind": "regression"},
            ],
        },
        "schedule": {
            "total_steps": 12,
            "batch_size": 16,
            "online_sim": {"slate_size": 4, "n_slates": 50},
        },
        "model": {"teacher_trunk": [10], "student_trunk": [8], "tower": [5]},
        "training": {
            "teacher": {
                "base_lr": 0.05,
                "warmup_steps": 0,
                "adam": {"beta1": 0.8, "epsilon": 1e-9},
            },
            "student": {"clippy": None, "activation_clip": None},
        },
        "distill": {"tasks": ["ctr"], "mode": "auxiliary", "alpha": {"ctr": 0.25}},
        "teacher": {"bias": {"spend": 2.0}, "write_every": 2, "label_delay": 1},
        "students": [
            {"name": "control", "mode": "none"},
            {"name": "aux", "mode": "auxiliary", "distill": ["ctr"], "alpha": {"ctr": 0.25}},
        ],
    }
    cfg = build_config(raw)
    assert cfg.gen.feature_dim == 8
    assert cfg.gen.drift_rate == 0.99
    assert [t.name for t in cfg.gen.tasks] == ["ctr", "spend"]
    assert cfg.gen.tasks[0].distill is True
    assert cfg.gen.tasks[1].kind == "regression"
    assert cfg.schedule.total_steps == 12
    assert cfg.schedule.online_sim.slate_size == 4
    assert cfg.teacher_trunk == (10,)
    assert cfg.teacher_train.base_lr == 0.05
    assert cfg.teacher_train.adam.beta1 == 0.8
    assert cfg.teacher_train.adam.epsilon == 1e-9
    assert cfg.teacher_train.adam.beta2 == 0.999  # untouched default
    assert cfg.student_train.clippy is None
    assert cfg.student_train.activation_clip is None
    assert cfg.distill_tasks == ("ctr",)
    assert cfg.alpha == {"ctr": 0.25}
    assert cfg.bias == {"spend": 2.0}
    assert cfg.write_every == 2 and cfg.label_delay == 1
    assert cfg.students[0].mode == NO_DISTILL
    assert cfg.students[1].mode == AUXILIARY


def test_build_config_rejects_bad_input():
    with pytest.raises(ConfigError, match="root must be a mapping"):
        build_config([1, 2])
    with pytest.raises(ConfigError, match="family is required"):
        build_config({})
    with pytest.raises(ConfigError, match="unknown keys under config"):
        build_config({"family": FAMILY_DISTILL, "bogus": 1})
    with pytest.raises(ConfigError, match="unknown keys under stream"):
        build_config({"family": FAMILY_DISTILL, "stream": {"nope": 1}})
    with pytest.raises(ConfigError, match="seeds"):
        build_config({"family": FAMILY_DISTILL, "seeds": "zero"})
    with pytest.raises(ConfigError, match="name and kind"):
        build_config({
            "family": FAMILY_DISTILL,
            "stream": {"tasks": [{"name": "x"}]},
        })
    with pytest.raises(ConfigError, match="expected a mapping"):
        build_config({"family": FAMILY_DISTILL, "distill": {"alpha": [1]}})
    with pytest.raises(ConfigError, match="expected a non-empty list of ints"):
        build_config({"family": FAMILY_DISTILL, "model": {"tower": []}})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("family: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)


def test_config_digest_stable_and_sensitive():
    a = default_experiment(FAMILY_SCALE, (0, 1))
    b = default_experiment(FAMILY_SCALE, (0, 1))
    c = default_experiment(FAMILY_SCALE, (0, 2))
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)
    assert len(config_digest(a)) == 64
    int(config_digest(a), 16)


def test_job_name_split_and_family_inference():
    assert cli._split_or_single("s3/direct") == (3, "direct")
    assert cli._split_or_single("teacher") == (-1, "teacher")
    assert cli._split_or_single("snake/case") == (-1, "snake/case")
    assert cli._infer_family(["control", "direct", "auxiliary"]) == FAMILY_DISTILL
    assert cli._infer_family(["control", "student-2x"]) == FAMILY_SCALE
    assert cli._infer_family(["pet", "pet-pst"]) == FAMILY_OBJECTIVE
    assert cli._infer_family(["control", "thing"]) == "custom"


def test_fmt_ci_small_samples_report_bare_mean():
    assert cli._fmt_ci([0.5, 0.7]) == "0.6000"
    wide = cli._fmt_ci([float(i) for i in range(12)])
    assert wide.startswith("5.5000 [") and wide.endswith("]")


def rows_for_report(metrics):
    rows = []
    for job, task, metric, per_seed in metrics:
        for seed, value in per_seed.items():
            rows.append(MetricRow(40, f"s{seed}/{job}", task, metric, value))
    return rows


def test_build_report_distill_layout_transposed():
    rows = rows_for_report([
        ("control", "ctr", "auc", {0: 0.70, 1: 0.72}),
        ("direct", "ctr", "auc", {0: 0.74, 1: 0.75}),
        ("auxiliary", "ctr", "auc", {0: 0.73, 1: 0.76}),
        ("control", "ltv", "rmse", {0: 1.0, 1: 1.1}),
        ("direct", "ltv", "rmse", {0: 0.9, 1: 0.8}),
        ("auxiliary", "ltv", "rmse", {0: 0.95, 1: 0.85}),
        ("auxiliary", "ltv", "rmse_true", {0: 0.5, 1: 0.5}),
        ("direct", JOB_LEVEL_TASK, "coverage", {0: 0.5, 1: 0.75}),
        ("auxiliary", JOB_LEVEL_TASK, "coverage", {0: 1.0, 1: 1.0}),
    ])
    # rows from an earlier eval point must be ignored
    rows.append(MetricRow(20, "s0/control", "ctr", "auc", 0.1))
    text = build_report(rows)
    lines = text.splitlines()
    assert "| metric | control | direct | auxiliary |" in lines
    auc_line = next(l for l in lines if l.startswith("| ctr.auc"))
    assert auc_line == "| ctr.auc | 0.7100 | 0.7450 | 0.7450 |"
    assert not any("rmse_true" in l for l in lines)
    # paired deltas vs control: direct ctr.auc is mean of (0.04, 0.03)
    delta = next(l for l in lines if l.startswith("| direct |"))
    assert "0.0350" in delta
    cov = [l for l in lines if l.startswith("| auxiliary | 1.000")]
    assert cov, text


def test_build_report_wide_layout_and_lifts():
    rows = rows_for_report([
        ("control", "ctr", "auc", {0: 0.70, 1: 0.71}),
        ("student-2x", "ctr", "auc", {0: 0.74, 1: 0.73}),
        ("control", JOB_LEVEL_TASK, "engagement", {0: 0.50, 1: 0.50}),
        ("student-2x", JOB_LEVEL_TASK, "engagement", {0: 0.55, 1: 0.60}),
        ("control", JOB_LEVEL_TASK, "satisfaction", {0: 0.40, 1: 0.40}),
        ("student-2x", JOB_LEVEL_TASK, "satisfaction", {0: 0.42, 1: 0.38}),
    ])
    text = build_report(rows)
    lines = text.splitlines()
    assert "| variant | ctr.auc |" in lines
    header_idx = lines.index("| variant | ctr.auc |")
    assert lines[header_idx + 2].startswith("| control |")  # control listed first
    sim = next(l for l in lines if l.startswith("| student-2x | 0.575"))
    # paired lifts: engagement (10%, 20%) -> 15; satisfaction (5%, -5%) -> 0
    assert "15.0000" in sim
    assert "0.0000" in sim
    control_sim = next(
        l for l in lines if l.startswith("| control | 0.5000")
    )
    assert control_sim.rstrip().endswith("| - | - |")
    with pytest.raises(SchemaError, match="no metric rows"):
        build_report([])


TINY_YAML = """\
family: custom
seeds: [0]
stream:
  feature_dim: 8
schedule:
  total_steps: 6
  batch_size: 16
  eval_every: 0
  eval_batches: 2
model:
  teacher_trunk: [10]
  student_trunk: [8]
  tower: [5]
training:
  teacher: {warmup_steps: 0}
  student: {warmup_steps: 0}
distill:
  tasks: [ctr]
  alpha: {ctr: 0.5}
students:
  - {name: control, mode: none}
  - {name: aux, mode: auxiliary, distill: [ctr], alpha: {ctr: 0.5}}
"""


def test_cmd_run_writes_artifacts(tmp_path, capsys):
    cfg_path = tmp_path / "exp.yaml"
    cfg_path.write_text(TINY_YAML)
    out = tmp_path / "out"
    code = main(["run", str(cfg_path), "--out", str(out), "--seeds", "0,1"])
    assert code == 0
    rows = read_metrics_csv(out / "metrics.csv")
    assert rows
    jobs = {r.job for r in rows}
    assert jobs == {
        "s0/teacher", "s0/control", "s0/aux", "s1/teacher", "s1/control", "s1/aux"
    }
    report = (out / "report.md").read_text()
    assert report.startswith("# custom report")
    assert "| variant |" in report
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["family"] == "custom"
    assert manifest["seeds"] == [0, 1]
    assert manifest["runs"] == ["main"]
    assert manifest["metric_rows"] == len(rows)
    assert manifest["config_sha256"] == config_digest(load_config(cfg_path, (0, 1)))
    assert (out / "stores" / "main-s0" / "MANIFEST").exists()
    assert (out / "stores" / "main-s1" / "MANIFEST").exists()
    assert "metrics.csv" in capsys.readouterr().out


def test_cmd_run_bad_config_exit_code(tmp_path, capsys):
    cfg_path = tmp_path / "exp.yaml"
    cfg_path.write_text("family: nonsense\n")
    assert main(["run", str(cfg_path)]) == 1
    assert "config error" in capsys.readouterr().err


def seed_store(root):
    tasks = [("ctr", BINARY)]
    ids = np.array([1, 2, 3], dtype=np.uint64)
    values = {"ctr": np.array([0.1, 0.2, 0.3], dtype=np.float32)}
    with SegmentWriter(LabelStore(root), tasks) as w:
        w.append(ids, values, teacher_version=1)
        w.append(ids + 10, values, teacher_version=2)


def test_cmd_inspect_exit_codes(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "absent")]) == 1
    assert "missing" in capsys.readouterr().err

    store = tmp_path / "store"
    seed_store(store)
    assert main(["inspect", str(store)]) == 0
    out = capsys.readouterr().out
    assert "status: OK" in out
    assert "manifest version: 2" in out
    assert "ctr(binary)" in out

    seg = store / segment_filename(1)
    data = bytearray(seg.read_bytes())
    data[-6] ^= 0xFF  # inside the value column, before the crc
    seg.write_bytes(bytes(data))
    assert main(["inspect", str(store)]) == 3
    out = capsys.readouterr().out
    assert "CORRUPT" in out


def test_cmd_replay_rebuilds_report(tmp_path, capsys):
    rows = rows_for_report([
        ("control", "ctr", "auc", {0: 0.7}),
        ("direct", "ctr", "auc", {0: 0.75}),
        ("auxiliary", "ctr", "auc", {0: 0.74}),
    ])
    csv = tmp_path / "metrics.csv"
    write_metrics_csv(csv, rows)
    assert main(["replay", str(csv)]) == 0
    out_text = capsys.readouterr().out
    assert "| metric | control | direct | auxiliary |" in out_text
    report = (tmp_path / "report.md").read_text()
    assert report.startswith("# Replayed report")
    alt = tmp_path / "sub" / "r.md"
    assert main(["replay", str(csv), "--out", str(alt)]) == 0
    assert alt.exists()
    capsys.readouterr()

    bad = tmp_path / "bad.csv"
    bad.write_text("nope,nope\n")
    assert main(["replay", str(bad)]) == 1
    assert "schema error" in capsys.readouterr().err


def test_main_maps_runtime_errors_to_exit_codes(tmp_path, monkeypatch, capsys):
    cfg_path = tmp_path / "exp.yaml"
    cfg_path.write_text(TINY_YAML)

    def boom_divergence(*a, **kw):
        raise DivergenceError("loss went non-finite", job="s0/aux")

    monkeypatch.setattr(cli, "run_experiment", boom_divergence)
    assert main(["run", str(cfg_path)]) == 2
    assert "divergence" in capsys.readouterr().err

    def boom_corrupt(*a, **kw):
        raise StoreCorruptionError("checksum mismatch")

    monkeypatch.setattr(cli, "run_experiment", boom_corrupt)
    assert main(["run", str(cfg_path)]) == 3
    assert "corruption" in capsys.readouterr().err


def test_main_requires_subcommand():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
