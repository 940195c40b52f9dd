"""Desk-scale harness: scenario files, the in-process cluster's fault
switches, the three experiments, report rendering, and the harness CLI."""

import json
import random

import pytest

from dynostore.erasure import HEADER_LEN
from dynostore.errors import NotEnoughChunksError, ScenarioInvalidError
from dynostore.harness.cli import main as harness_main
from dynostore.harness.cluster import spread_failure_rates
from dynostore.harness.experiments import run_fairness, run_overhead, run_retention
from dynostore.harness.report import render_json, render_text, write_report
from dynostore.harness.scenario import BUILTIN, Scenario, Workload, builtin


# ---------------------------------------------------------------------------
# scenarios


def test_minimal_scenario_fills_defaults():
    s = Scenario.from_dict({"name": "tiny"})
    assert s.name == "tiny"
    assert s.seed == 0
    assert len(s.containers) == 10
    assert s.metadata_replicas == 1
    assert s.workload.objects == 25
    assert s.workload.size_bytes == 65536
    assert s.workload.n is None and s.workload.k is None
    assert s.faults.max_down == 0
    assert s.faults.exhaustive_cap == 300
    assert s.faults.samples == 40
    assert s.retention_days == 30
    assert s.pending_ttl_ms == 3000


def test_scenario_failure_rate_forms():
    """Rates come as an explicit list, a low/high spread, or a default."""
    explicit = Scenario.from_dict({
        "name": "x", "containers": 3, "failure_rates": [0.1, 0.2, 0.3],
    })
    assert [c.annual_failure_rate for c in explicit.containers] == [0.1, 0.2, 0.3]

    spread = Scenario.from_dict({
        "name": "x", "containers": 5,
        "failure_rates": {"low": 0.02, "high": 0.1},
    })
    rates = [c.annual_failure_rate for c in spread.containers]
    assert rates[0] == pytest.approx(0.02)
    assert rates[-1] == pytest.approx(0.1)
    assert rates == sorted(rates)

    listed = Scenario.from_dict({
        "name": "x",
        "containers": [
            {"fs_capacity_bytes": 1024, "annual_failure_rate": 0.5},
            {},
        ],
    })
    assert listed.containers[0].fs_capacity_bytes == 1024
    assert listed.containers[0].annual_failure_rate == 0.5
    assert listed.containers[1].annual_failure_rate == 0.0


def test_spread_failure_rates_endpoints():
    rates = spread_failure_rates(10)
    assert len(rates) == 10
    assert rates[0] == pytest.approx(0.01)
    assert rates[-1] == pytest.approx(0.25)
    assert all(b > a for a, b in zip(rates, rates[1:]))
    assert spread_failure_rates(1, low=0.07, high=0.9) == [0.07]


def test_workload_size_sampling():
    fixed = Workload(size_bytes=65536)
    assert fixed.sample_size(random.Random(1)) == 65536
    assert fixed.max_size() == 65536

    rng = random.Random(5)
    uniform = Workload(size_bytes={"min": 100, "max": 1000})
    for _ in range(200):
        assert 100 <= uniform.sample_size(rng) <= 1000
    assert uniform.max_size() == 1000

    log = Workload(size_bytes={
        "min": 16, "max": 16384, "distribution": "log_uniform",
    })
    draws = [log.sample_size(rng) for _ in range(300)]
    assert all(16 <= d <= 16384 for d in draws)
    # log-uniform puts roughly half the mass below the geometric midpoint
    below = sum(d < 512 for d in draws)
    assert 90 <= below <= 210


@pytest.mark.parametrize("raw, fragment", [
    ({}, "needs a name"),
    ({"name": "x", "containers": 0}, "at least one container"),
    ({"name": "x", "containers": []}, "non-empty list"),
    ({"name": "x", "containers": 3, "failure_rates": [0.1, 0.2]},
     "failure_rates has 2 entries"),
    ({"name": "x", "containers": [{"fs_capacity_bytes": 0}]},
     "capacity must be positive"),
    ({"name": "x", "containers": 1, "failure_rates": [1.5]},
     "within [0, 1]"),
    ({"name": "x", "metadata_replicas": 0}, "at least one metadata replica"),
    ({"name": "x", "workload": {"objects": 0}}, "at least one object"),
    ({"name": "x", "workload": {"size_bytes": {"min": 10, "max": 5}}},
     "0 < min <= max"),
    ({"name": "x", "workload": {"n": 3}}, "both n and k, or neither"),
    ({"name": "x", "workload": {"n": 3, "k": 5}}, "invalid dispersal shape"),
    ({"name": "x", "containers": 4, "workload": {"n": 6, "k": 2}},
     "needs at least that many containers"),
    ({"name": "x", "containers": 4, "workload": {"shapes": [[5, 2]]}},
     "invalid sweep shape"),
    ({"name": "x", "containers": 4, "faults": {"max_down": 5}},
     "cannot exceed the container count"),
    ({"name": "x", "faults": {"exhaustive_cap": 0}},
     "bounds must be positive"),
])
def test_scenario_validation_errors(raw, fragment):
    with pytest.raises(ScenarioInvalidError) as err:
        Scenario.from_dict(raw)
    assert fragment in str(err.value)


def test_scenario_rejects_non_object():
    with pytest.raises(ScenarioInvalidError):
        Scenario.from_dict(["not", "a", "scenario"])


def test_scenario_load_bad_files(tmp_path):
    with pytest.raises(ScenarioInvalidError, match="cannot read scenario"):
        Scenario.load(tmp_path / "missing.json")
    garbled = tmp_path / "garbled.json"
    garbled.write_text("{not json", encoding="utf-8")
    with pytest.raises(ScenarioInvalidError, match="cannot read scenario"):
        Scenario.load(garbled)


def test_builtin_presets():
    retention = builtin("retention")
    assert retention.seed == 7
    rates = [c.annual_failure_rate for c in retention.containers]
    assert len(rates) == 10
    assert rates[0] == pytest.approx(0.01)
    assert rates[-1] == pytest.approx(0.25)
    assert retention.workload.target_loss == 0.001
    assert retention.faults.max_down == 6

    fairness = builtin("fairness")
    assert fairness.workload.objects == 1000
    assert fairness.workload.size_bytes == 8192

    overhead = builtin("overhead")
    assert len(overhead.containers) == 12
    assert (12, 8) in overhead.workload.shapes
    assert overhead.workload.size_bytes["distribution"] == "log_uniform"

    with pytest.raises(ScenarioInvalidError) as err:
        builtin("nope")
    assert "fairness" in str(err.value) and "retention" in str(err.value)
    assert set(BUILTIN) == {"retention", "fairness", "overhead"}


# ---------------------------------------------------------------------------
# cluster fault switches


def test_container_kill_blocks_and_restart_recovers(cluster):
    c = cluster(containers=3)
    client = c.client("alice")
    client.ensure_path("alice/data/solo")
    payload = b"survives a reboot"
    client.push("alice/data/solo", payload)

    before = c.chunk_census()
    holder = next(cid for cid, chunks in before.items() if chunks)
    c.kill_container(holder)
    with pytest.raises(NotEnoughChunksError):
        client.pull("alice/data/solo")

    # the kill switch cuts reachability, not the backend: after a restart
    # the same bytes come back and nothing was re-uploaded anywhere
    c.restart_container(holder)
    assert client.pull("alice/data/solo") == payload
    assert c.chunk_census() == before


def test_metadata_kill_majority_and_restart_converges(cluster):
    c = cluster(containers=4, metadata_replicas=3)
    client = c.client("alice")
    client.ensure_path("alice/data/first")
    client.push("alice/data/first", b"written with all replicas up")

    c.kill_metadata("meta-0")
    client.push("alice/data/second", b"written on a 2/3 majority")
    assert client.pull("alice/data/second") == b"written on a 2/3 majority"

    c.restart_metadata("meta-0")
    c.sync_metadata()
    snapshots = [svc.machine.to_snapshot() for svc in c.metadata.values()]
    assert snapshots[0] == snapshots[1] == snapshots[2]
    assert client.pull("alice/data/first") == b"written with all replicas up"


def test_chunk_census_and_stored_bytes(cluster):
    c = cluster(containers=4)
    client = c.client("alice")
    client.ensure_path("alice/data/a")
    rng = random.Random(31)
    client.push("alice/data/a", rng.randbytes(8192), n=3, k=2)
    client.push("alice/data/b", rng.randbytes(8192), n=3, k=2)

    census = c.chunk_census()
    assert set(census) == set(c.container_ids())
    assert sum(len(chunks) for chunks in census.values()) == 6
    # 8192 bytes split k=2 ways is 4096 per shard, plus the fixed frame
    assert sum(c.stored_bytes().values()) == 6 * (4096 + HEADER_LEN)


def test_sweep_finds_orphans_and_missing(cluster):
    c = cluster(containers=3)
    client = c.client("alice")
    client.ensure_path("alice/data/a")
    client.push("alice/data/a", b"a" * 512)
    client.push("alice/data/b", b"b" * 512)

    clean = c.sweep_orphans()
    assert clean.orphan_count == 0 and clean.missing_count == 0

    token = c.service_token()
    stray_home = c.container_ids()[0]
    c.nodes[stray_home].put_chunk("deadbeef.0", b"stray", token)
    swept = c.sweep_orphans()
    assert swept.orphan_count == 1
    assert swept.orphans[stray_home] == ["deadbeef.0"]
    c.nodes[stray_home].delete_chunk("deadbeef.0", token)

    census = c.chunk_census()
    victim_cid, victim_chunk = next(
        (cid, chunks[0]) for cid, chunks in census.items() if chunks
    )
    c.nodes[victim_cid].delete_chunk(victim_chunk, token)
    swept = c.sweep_orphans()
    assert swept.missing_count == 1
    assert swept.missing[victim_cid] == [victim_chunk]

    # a dead container is expected to be unreadable, so nothing it held
    # counts as missing until it comes back without the chunk
    c.kill_container(victim_cid)
    assert c.sweep_orphans().missing_count == 0
    c.restart_container(victim_cid)
    assert c.sweep_orphans().missing_count == 1


# ---------------------------------------------------------------------------
# experiments


RETENTION_SCENARIO = {
    "name": "tiny-retention",
    "seed": 13,
    "containers": 4,
    "workload": {"objects": 3, "size_bytes": 2048, "n": 3, "k": 2},
    "faults": {"max_down": 2, "exhaustive_cap": 50, "samples": 5},
}


def test_run_retention_levels_and_determinism():
    scenario = Scenario.from_dict(RETENTION_SCENARIO)
    report = run_retention(scenario)
    assert report["experiment"] == "retention"
    assert report["objects"] == 3
    assert report["shape"] == {"n": 3, "k": 2, "target_loss": None}

    levels = {lv["containers_down"]: lv for lv in report["levels"]}
    assert set(levels) == {0, 1, 2}
    assert levels[0]["kill_sets"] == 1
    assert levels[1]["kill_sets"] == 4 and levels[1]["exhaustive"]
    assert levels[2]["kill_sets"] == 6
    # (3,2) tolerates any single loss; some pair takes out two of an
    # object's three chunks
    assert levels[0]["worst_retained"] == 1.0
    assert levels[1]["worst_retained"] == 1.0
    assert levels[2]["worst_retained"] < 1.0

    assert run_retention(scenario) == report
    assert run_retention(scenario, seed=99)["seed"] == 99


def test_run_retention_reports_planner_shape():
    scenario = Scenario.from_dict({
        "name": "planned",
        "seed": 2,
        "containers": 4,
        "failure_rates": [0.01, 0.05, 0.1, 0.2],
        "workload": {"objects": 2, "size_bytes": 1024, "target_loss": 0.2},
    })
    report = run_retention(scenario)
    shape = report["shape"]
    assert 1 <= shape["k"] <= shape["n"] <= 4
    assert shape["target_loss"] == 0.2
    assert report["levels"] == [{
        "containers_down": 0,
        "kill_sets": 1,
        "exhaustive": True,
        "worst_retained": 1.0,
        "mean_retained": 1.0,
    }]


def test_run_fairness_spreads_equal_load():
    scenario = Scenario.from_dict({
        "name": "tiny-fairness",
        "seed": 21,
        "containers": 4,
        "workload": {"objects": 40, "size_bytes": 4096},
    })
    report = run_fairness(scenario)
    assert report["chunks_per_container"] == {
        cid: 10 for cid in report["chunks_per_container"]
    }
    assert report["spread"] == 0
    assert report["min_chunks"] == report["max_chunks"] == 10
    assert len(set(report["bytes_per_container"].values())) == 1
    assert run_fairness(scenario) == report


def test_run_overhead_tracks_ideal():
    scenario = Scenario.from_dict({
        "name": "tiny-overhead",
        "seed": 8,
        "containers": 4,
        "workload": {"objects": 3, "size_bytes": 65536,
                     "shapes": [[1, 1], [4, 2]]},
    })
    report = run_overhead(scenario)
    assert report["objects_per_shape"] == 3
    assert [(r["n"], r["k"]) for r in report["shapes"]] == [(1, 1), (4, 2)]
    for row in report["shapes"]:
        assert row["measured_overhead"] > row["ideal_overhead"]
        assert row["excess_percent"] < 2.0
    assert report["shapes"][0]["ideal_overhead"] == 1.0
    assert report["shapes"][1]["ideal_overhead"] == 2.0


# ---------------------------------------------------------------------------
# report rendering


FAIRNESS_REPORT = {
    "experiment": "fairness",
    "scenario": "demo",
    "seed": 4,
    "objects": 3,
    "chunks_per_container": {"c0": 2, "c1": 1},
    "bytes_per_container": {"c0": 100, "c1": 50},
    "min_chunks": 1,
    "max_chunks": 2,
    "spread": 1,
}


def test_render_json_is_stable():
    rendered = render_json({"b": 1, "a": {"d": 2, "c": 3}})
    assert rendered == '{\n  "a": {\n    "c": 3,\n    "d": 2\n  },\n  "b": 1\n}\n'
    assert json.loads(render_json(FAIRNESS_REPORT)) == FAIRNESS_REPORT


def test_render_text_retention():
    text = render_text({
        "experiment": "retention",
        "scenario": "demo",
        "seed": 1,
        "objects": 2,
        "shape": {"n": 3, "k": 2, "target_loss": 0.001},
        "levels": [
            {"containers_down": 0, "kill_sets": 1, "exhaustive": True,
             "worst_retained": 1.0, "mean_retained": 1.0},
            {"containers_down": 4, "kill_sets": 40, "exhaustive": False,
             "worst_retained": 0.5, "mean_retained": 0.75},
        ],
    })
    assert "retention  scenario=demo  seed=1" in text
    assert "dispersal n=3 k=2" in text
    assert "worst retained" in text
    assert "100.00%" in text and "50.00%" in text
    assert "sampled" in text and "all" in text


def test_render_text_fairness_and_overhead():
    fair = render_text(FAIRNESS_REPORT)
    assert "fairness  scenario=demo  seed=4" in fair
    assert "min=1  max=2  spread=1" in fair

    over = render_text({
        "experiment": "overhead",
        "scenario": "demo",
        "seed": 9,
        "objects_per_shape": 1,
        "shapes": [{
            "n": 3, "k": 2, "object_bytes": 100, "stored_bytes": 160,
            "measured_overhead": 1.6, "ideal_overhead": 1.5,
            "excess_percent": 10.0,
        }],
    })
    assert "(3,2)" in over
    assert "1.6000" in over and "1.5000" in over
    assert "+10.000%" in over


def test_render_text_consensus():
    base = {
        "experiment": "consensus",
        "seed": 0,
        "exhaustive": [{
            "name": "reliable-depth8", "states": 100,
            "schedules_completed": 90, "schedules_truncated": 10,
            "truncated_by_state_cap": False, "violations": [],
        }],
        "random": {"schedules": 50, "events": 400, "commits": 30,
                   "aborts": 5, "crashes": 12, "violations": []},
        "violations": [],
    }
    clean = render_text(base)
    assert "no invariant violations" in clean

    dirty = dict(base, violations=["read-after-write: stale value"])
    text = render_text(dirty)
    assert "VIOLATIONS (1):" in text
    assert "read-after-write: stale value" in text


def test_render_text_rejects_unknown_kind():
    with pytest.raises(ValueError, match="no text renderer"):
        render_text({"experiment": "mystery"})
    with pytest.raises(ValueError):
        render_text({})


def test_write_report_writes_file(tmp_path):
    out = tmp_path / "reports" / "fairness.txt"
    rendered = write_report(FAIRNESS_REPORT, out)
    assert out.read_text(encoding="utf-8") == rendered
    assert "spread=1" in rendered

    out_json = tmp_path / "fairness.json"
    rendered = write_report(FAIRNESS_REPORT, out_json, fmt="json")
    assert json.loads(out_json.read_text(encoding="utf-8")) == FAIRNESS_REPORT
    assert write_report(FAIRNESS_REPORT, None) == write_report(FAIRNESS_REPORT, None)


# ---------------------------------------------------------------------------
# harness CLI


def test_cli_lists_builtin_scenarios(capsys):
    assert harness_main(["scenarios"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["fairness", "overhead", "retention"]


def test_cli_fairness_json_run(tmp_path, capsys):
    scenario_file = tmp_path / "tiny.json"
    scenario_file.write_text(json.dumps({
        "name": "cli-fairness",
        "seed": 5,
        "containers": 4,
        "workload": {"objects": 24, "size_bytes": 1024},
    }), encoding="utf-8")
    out_file = tmp_path / "out" / "report.json"

    rc = harness_main([
        "fairness", "--scenario", str(scenario_file),
        "--json", "--out", str(out_file),
    ])
    captured = capsys.readouterr()
    assert rc == 0
    report = json.loads(captured.out)
    assert report["scenario"] == "cli-fairness"
    assert report["spread"] == 0
    assert out_file.read_text(encoding="utf-8") == captured.out
    assert "wrote" in captured.err


def test_cli_retention_text_run(tmp_path, capsys):
    scenario_file = tmp_path / "tiny.json"
    scenario_file.write_text(json.dumps({
        "name": "cli-retention",
        "seed": 1,
        "containers": 3,
        "workload": {"objects": 2, "size_bytes": 512, "n": 2, "k": 1},
        "faults": {"max_down": 1},
    }), encoding="utf-8")
    rc = harness_main(["retention", "--scenario", str(scenario_file)])
    out = capsys.readouterr().out
    assert rc == 0
    assert "worst retained" in out
    assert "100.00%" in out


def test_cli_rejects_invalid_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "containers": 0}), encoding="utf-8")
    rc = harness_main(["fairness", "--scenario", str(bad)])
    captured = capsys.readouterr()
    assert rc == 2
    assert "error:" in captured.err


def test_cli_consensus_smoke(capsys):
    rc = harness_main([
        "consensus", "--schedules", "5", "--max-states", "400", "--json",
    ])
    captured = capsys.readouterr()
    assert rc == 0
    report = json.loads(captured.out)
    assert report["violations"] == []
    assert report["random"]["schedules"] == 5
    assert {run["name"] for run in report["exhaustive"]} == {
        "reliable-depth8", "lossy-depth7",
    }
