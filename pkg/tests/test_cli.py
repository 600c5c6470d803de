from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from blendsched.cli import DEFAULTS, _grid, main
from blendsched.cost_model import load_hardware_config, load_model_config
from blendsched.prefix_tree import Request, build, dfs_order, load_tree_dump
from blendsched.scheduler import read_steps
from blendsched.workload import write_workload

MC = load_model_config()
HC = load_hardware_config()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One synthesized workload scheduled under four policies and simulated."""
    d = tmp_path_factory.mktemp("cli")
    w = d / "w.jsonl"
    assert main(["synth", "--out", str(w), "--target-density", "1.0", "--target-sharing", "0.25",
                 "--total-requests", "1500"]) == 0
    for policy in ("blend", "dfs", "fcfs", "random"):
        assert main(["schedule", "--workload", str(w), "--out", str(d / f"{policy}.jsonl"),
                     "--policy", policy]) == 0
        assert main(["simulate", "--schedule", str(d / f"{policy}.jsonl"),
                     "--out", str(d / f"{policy}.json")]) == 0
    return d


def test_synth_reaches_grid_point(workdir):
    meta = json.loads((workdir / "w.jsonl.meta.json").read_text())
    assert abs(meta["achieved_density"] - 1.0) <= 0.02
    assert abs(meta["achieved_sharing"] - 0.25) <= 0.02
    cfg = json.loads((workdir / "w.jsonl.config.json").read_text())
    assert cfg["target_density"] == 1.0 and cfg["param_count"] == MC.param_count


def test_synth_rerun_byte_identical(workdir, tmp_path):
    again = tmp_path / "w.jsonl"
    assert main(["synth", "--config", str(workdir / "w.jsonl.config.json"), "--out", str(again)]) == 0
    assert again.read_bytes() == (workdir / "w.jsonl").read_bytes()
    assert Path(str(again) + ".meta.json").read_bytes() == Path(str(workdir / "w.jsonl") + ".meta.json").read_bytes()


def test_schedule_and_simulate_rerun_byte_identical(workdir, tmp_path):
    s = tmp_path / "blend.jsonl"
    assert main(["schedule", "--config", str(workdir / "blend.jsonl.config.json"), "--out", str(s),
                 "--tree-dump", str(tmp_path / "blend.tree.txt")]) == 0
    assert s.read_bytes() == (workdir / "blend.jsonl").read_bytes()
    assert (tmp_path / "blend.tree.txt").read_bytes() == (workdir / "blend.jsonl.tree.txt").read_bytes()
    r = tmp_path / "blend.json"
    assert main(["simulate", "--schedule", str(workdir / "blend.jsonl"), "--out", str(r)]) == 0
    assert r.read_bytes() == (workdir / "blend.json").read_bytes()


def test_missing_trace_dir_exit_2(tmp_path, capsys):
    code = main(["synth", "--traces", str(tmp_path / "nowhere"), "--out", str(tmp_path / "w.jsonl"),
                 "--target-density", "1", "--target-sharing", "0.2"])
    assert code == 2
    assert "nowhere" in capsys.readouterr().err


def test_infeasible_mix_exit_2(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "w.jsonl"), "--target-density", "1",
                 "--target-sharing", "0.97", "--total-requests", "500"])
    assert code == 2
    assert "target_sharing" in capsys.readouterr().err


def test_malformed_config_exit_2(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{nope")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "w.jsonl")]) == 2


def test_tiny_dfs_schedule_matches_hand_order(tmp_path):
    A, B, C, D = 1, 2, 3, 4
    reqs = [Request(0, (D, A), 3), Request(1, (A, C), 3), Request(2, (A, B), 3), Request(3, (A, B, C), 3)]
    w = tmp_path / "tiny.jsonl"
    write_workload(w, reqs)
    out = tmp_path / "tiny.sched.jsonl"
    assert main(["schedule", "--workload", str(w), "--out", str(out), "--policy", "dfs"]) == 0
    admitted = []
    for sb in read_steps(out):
        for rid, _, _ in sb.prefill_chunks:
            if rid not in admitted:
                admitted.append(rid)
    # trie order: A -> (B -> (C)), (C); then D
    assert admitted == [2, 3, 1, 0] == [r.id for r in dfs_order(build(reqs))]


def test_blend_partition_annotations(workdir):
    tree = load_tree_dump((workdir / "blend.jsonl.tree.txt").read_text())
    first = next(read_steps(workdir / "blend.jsonl"))
    M = HC.kv_memory_capacity
    assert first.partition.m_left + first.partition.m_right == pytest.approx(M)
    rho_L, rho_R, rho_root = tree["children"][0]["rho"], tree["children"][-1]["rho"], tree["rho"]
    if 0 < first.partition.m_left < M:
        blended = (first.partition.m_left * rho_L + first.partition.m_right * rho_R) / M
        assert blended == pytest.approx(rho_root, rel=1e-4)


def test_simulate_report_fields(workdir):
    rep = json.loads((workdir / "blend.json").read_text())
    assert rep["policy"] == "blend" and len(rep["workload_digest"]) == 64
    assert rep["sharing_fraction_of_optimal"] >= 0.97
    with open(workdir / "blend.json.timeline.csv") as fh:
        assert sum(1 for _ in fh) == rep["num_steps"] + 1


def test_empty_schedule_zero_report(tmp_path):
    w = tmp_path / "empty.jsonl"
    w.write_text("")
    s = tmp_path / "empty.sched.jsonl"
    s.write_text("")
    out = tmp_path / "r.json"
    assert main(["simulate", "--schedule", str(s), "--workload", str(w), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["makespan"] == 0 and rep["num_steps"] == 0


def test_inconsistent_schedule_exit_1_with_step(workdir, tmp_path, capsys):
    lines = (workdir / "dfs.jsonl").read_text().splitlines()
    rec = json.loads(lines[3])
    rec["kv"] += 1
    lines[3] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    code = main(["simulate", "--schedule", str(bad), "--workload", str(workdir / "w.jsonl"),
                 "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert "step 3" in capsys.readouterr().err


def test_compare_self_is_unity(workdir, tmp_path):
    out = tmp_path / "self.csv"
    r = str(workdir / "blend.json")
    assert main(["compare", r, r, "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        assert float(row["throughput_ratio"]) == 1.0
        assert float(row["sharing_ratio"]) == 1.0
        assert float(row["optimal_ratio"]) == 1.0


def test_compare_four_policies(workdir, tmp_path):
    out = tmp_path / "four.csv"
    reports = [str(workdir / f"{p}.json") for p in ("blend", "dfs", "fcfs", "random")]
    assert main(["compare", *reports, "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["policy"] for r in rows] == ["blend", "dfs", "fcfs", "random"]


def test_compare_rejects_mismatched_workloads(workdir, tmp_path):
    other = json.loads((workdir / "dfs.json").read_text())
    other["workload_digest"] = "0" * 64
    path = tmp_path / "other.json"
    path.write_text(json.dumps(other))
    assert main(["compare", str(workdir / "blend.json"), str(path), "--out", str(tmp_path / "x.csv")]) == 2


def test_scale_flag_subsamples(workdir, tmp_path):
    out = tmp_path / "scaled.jsonl"
    assert main(["schedule", "--workload", str(workdir / "w.jsonl"), "--out", str(out), "--scale", "0.1",
                 "--policy", "dfs"]) == 0
    meta = json.loads(Path(str(out) + ".meta.json").read_text())
    assert 100 <= meta["num_requests"] <= 200
    assert Path(meta["workload"]).exists()


def test_traces_and_describe(tmp_path, capsys):
    d = tmp_path / "traces"
    assert main(["traces", "--out", str(d), "--trace-scale", "0.02"]) == 0
    assert sorted(p.name for p in d.glob("*.jsonl")) == ["benchmark.jsonl", "chat.jsonl", "video.jsonl"]
    w = tmp_path / "w.jsonl"
    assert main(["synth", "--traces", str(d), "--out", str(w), "--target-density", "1.1",
                 "--target-sharing", "0.1", "--total-requests", "200", "--tolerance", "0.05"]) == 0
    capsys.readouterr()
    assert main(["describe", "--workload", str(w)]) == 0
    assert json.loads(capsys.readouterr().out)["count"] == 200


def test_default_sweep_grid_has_65_points():
    assert len(_grid(DEFAULTS["densities"])) * len(_grid(DEFAULTS["sharings"])) == 65
    assert _grid("0.8:1.4:0.05")[-1] == 1.4
    assert _grid("1,2.5") == [1.0, 2.5]


def test_sweep_emits_one_row_per_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"trace_scale": 0.05}))
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(out), "--total-requests", "120",
                 "--policies", "dfs", "--densities", "0.8:1.4:0.3", "--sharings", "0.05,0.45"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert all(r["status"] == "ok" or r["status"].startswith("infeasible") for r in rows)
