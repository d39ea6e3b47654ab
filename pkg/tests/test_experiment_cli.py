import csv
import json

import numpy as np
import pytest
import yaml

from hyperadapt import cli
from hyperadapt import experiment as ex

TINY = {
    "seeds": [0],
    "methods": ["vanilla"],
    "synthetic": {"group_sizes": [90, 60, 45]},
    "backbone": {"channels": [4, 8]},
    "pretrain": {"epochs": 2},
    "adapt": {"epochs": 2},
}

WIDE = {
    "seeds": [0],
    "methods": ["vanilla", "hyperadapt"],
    "synthetic": {"num_classes": 16, "feature_dim": 48, "group_sizes": [960, 480, 480], "rendering": "vector"},
    "backbone": {"kind": "mlp", "dims": [48, 32, 16]},
    "adapter": {"depth": "all"},
    "pretrain": {"epochs": 1},
    "adapt": {"epochs": 1},
    "sweep": {"ranks": [1, 4, 16], "depths": ["head_only", "all"]},
}


def write_config(tmp_path, raw, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    return str(path)


def merged(base, **changes):
    out = json.loads(json.dumps(base))
    out.update(changes)
    return out


def listing(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


# --- config validation ------------------------------------------------------------

@pytest.mark.parametrize("changes, field", [
    (dict(seeds=[]), "seeds"),
    (dict(methods=["vanilla", "magic"]), "methods"),
    (dict(adapt={"lr": -1.0}), "adapt"),
    (dict(pretrain={"epochs": 0}), "pretrain"),
    (dict(adapter={"rank": 0}), "adapter"),
    (dict(adapter={"rank": 9}), "adapter.rank"),
    (dict(sweep={"depths": ["everything"]}), "sweep.depths"),
    (dict(sweep={"ranks": [0]}), "sweep.ranks"),
    (dict(backbone={"kind": "mlp", "dims": [10, 3]}), "backbone"),
    (dict(bogus=1), "bogus"),
    (dict(synthetic={"group_sizes": [90, 60, 45], "colour": "red"}), "synthetic.colour"),
])
def test_invalid_config_exits_2_naming_field(tmp_path, capsys, changes, field):
    path = write_config(tmp_path, merged(TINY, **changes))
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("config error: ") and field in err
    assert not (tmp_path / "out").exists()


def test_missing_and_malformed_config_files(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("seeds: [0\n", encoding="utf-8")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "not valid YAML" in capsys.readouterr().err


def test_bad_thread_setting(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HYPERADAPT_THREADS", "zero")
    assert cli.main(["run", "--config", write_config(tmp_path, TINY), "--out", str(tmp_path / "o")]) == 2
    assert "HYPERADAPT_THREADS" in capsys.readouterr().err


def test_config_hash_is_stable_under_key_reordering():
    a = ex.parse_config(TINY)
    reordered = {k: (dict(reversed(list(v.items()))) if isinstance(v, dict) else v) for k, v in reversed(TINY.items())}
    assert list(reordered) != list(TINY)
    assert ex.parse_config(reordered).hash() == a.hash()
    assert ex.parse_config(merged(TINY, output_dir="elsewhere")).hash() == a.hash()
    assert ex.parse_config(merged(TINY, seeds=[1])).hash() != a.hash()
    # defaults spelled out explicitly hash like defaults left implicit
    explicit = merged(TINY, adapter={"rank": 2, "sharing": True})
    assert ex.parse_config(explicit).hash() == a.hash()


def test_shipped_configs_parse():
    for name in ("default", "quick", "wide_mlp"):
        cfg = ex.load_config(f"configs/{name}.yaml")
        assert cfg.seeds and cfg.methods
    assert ex.load_config("configs/default.yaml").seeds == (0, 1, 2)


# --- run ------------------------------------------------------------------------

def test_single_method_single_seed_writes_two_reports(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", write_config(tmp_path, TINY), "--out", str(out)]) == 0
    assert listing(out) == ["aggregate.json", "runs", "runs/vanilla_seed0.json"]
    report = json.loads((out / "runs/vanilla_seed0.json").read_text())
    assert report["config_hash"] == ex.parse_config(TINY).hash()
    assert {"config", "dataset_hash", "metrics", "parameters", "history"} <= set(report)
    assert "vanilla" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    path = write_config(tmp_path, merged(TINY, methods=["vanilla", "hyperadapt"]))
    for out in ("a", "b"):
        assert cli.main(["run", "--config", path, "--out", str(tmp_path / out)]) == 0
    files = listing(tmp_path / "a")
    assert files == listing(tmp_path / "b")
    for f in files:
        if (tmp_path / "a" / f).is_file():
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_parallel_seeds_match_serial(tmp_path, monkeypatch):
    config = ex.parse_config(merged(TINY, seeds=[0, 1]))
    serial = ex.run(config, tmp_path / "serial")
    monkeypatch.setenv("HYPERADAPT_THREADS", "2")
    parallel = ex.run(config, tmp_path / "parallel")
    for a, b in zip(serial.files, parallel.files):
        assert a.read_bytes() == b.read_bytes()


def test_aggregate_is_mean_over_seeds(tmp_path):
    outcome = ex.run(ex.parse_config(merged(TINY, seeds=[0, 1, 2])), tmp_path)
    accs = [json.loads((tmp_path / f"runs/vanilla_seed{s}.json").read_text())["metrics"]["accuracy"] for s in range(3)]
    agg = json.loads((tmp_path / "aggregate.json").read_text())
    assert abs(agg["methods"]["vanilla"]["mean"]["accuracy"] - sum(accs) / 3) <= 1e-12
    assert agg["methods"]["vanilla"]["per_seed"]["accuracy"] == accs
    assert len(set(agg["dataset_hashes"].values())) == 3
    assert outcome.aggregate == agg


def test_cli_writes_only_inside_out_dir(tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    path = write_config(work, merged(TINY, output_dir="default_out"))
    monkeypatch.chdir(work)
    before = listing(tmp_path)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 0
    after = [p for p in listing(tmp_path) if not p.startswith("out")]
    assert after == before


def test_divergence_exits_3_naming_method_and_seed(tmp_path, capsys):
    path = write_config(tmp_path, merged(TINY, pretrain={"epochs": 2, "lr": 1e200}))
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "a")]) == 3
    assert "pretrain (seed 0)" in capsys.readouterr().err
    path = write_config(tmp_path, merged(TINY, methods=["hyperadapt"], adapt={"epochs": 2, "lr": 1e200}), "b.yaml")
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "b"), "--seeds", "4"]) == 3
    err = capsys.readouterr().err
    assert "hyperadapt (seed 4)" in err and "diverged" in err


# --- sweep and ablation -------------------------------------------------------------

def test_rank_sweep(tmp_path):
    path = write_config(tmp_path, WIDE)
    assert cli.main(["sweep", "--axis", "rank", "--config", path, "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "sweep_rank.json").read_text())["rows"]
    assert [r["setting"] for r in rows] == ["rank=1", "rank=4", "rank=16"]
    generated = [r["generated"] for r in rows]
    assert generated[0] < generated[1] < generated[2]
    assert generated[2] / generated[1] == 4.0
    assert len(list(csv.reader((tmp_path / "sweep_rank.csv").open()))) == 4


def test_depth_sweep(tmp_path):
    path = write_config(tmp_path, WIDE)
    assert cli.main(["sweep", "--axis", "depth", "--config", path, "--out", str(tmp_path)]) == 0
    rows = {r["setting"]: r for r in json.loads((tmp_path / "sweep_depth.json").read_text())["rows"]}
    assert rows["depth=all"]["generator_params"] > rows["depth=head_only"]["generator_params"]
    assert rows["depth=all"]["generated"] > rows["depth=head_only"]["generated"]


def test_sweep_rank_above_layer_width_is_a_config_error(tmp_path, capsys):
    path = write_config(tmp_path, merged(WIDE, sweep={"ranks": [64]}))
    assert cli.main(["sweep", "--axis", "rank", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "sweep (rank=64)" in capsys.readouterr().err


ABLATE = merged(TINY, backbone={"channels": [8, 16, 32, 32]}, methods=["hyperadapt"])


def test_ablation_counts_strictly_decrease(tmp_path):
    path = write_config(tmp_path, ABLATE)
    assert cli.main(["ablate", "--config", path, "--out", str(tmp_path / "a")]) == 0
    rows = json.loads((tmp_path / "a/ablation.json").read_text())["rows"]
    assert [r["setting"] for r in rows] == [name for name, _ in ex.ABLATION_ROWS]
    counts = [r["generator_params"] for r in rows]
    assert all(a > b for a, b in zip(counts, counts[1:])), counts
    assert len({tuple(r["dataset_hashes"]) for r in rows}) == 1
    assert cli.main(["ablate", "--config", path, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/ablation.json").read_bytes() == (tmp_path / "b/ablation.json").read_bytes()


def test_ablation_cap(tmp_path, capsys):
    path = write_config(tmp_path, merged(ABLATE, ablation={"param_cap": 1000}))
    assert cli.main(["ablate", "--config", path, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "ablation.param_cap" in err and "'dense'" in err
    assert not (tmp_path / "o").exists()
    rows = ex.ablate(ex.load_config(path), tmp_path / "o", allow_large=True, train_rows=False)
    assert len(rows) == 4


# --- export --------------------------------------------------------------------------

@pytest.mark.parametrize("layer, width", [("patient", 16), ("penultimate", 8)])
def test_export_embeddings(tmp_path, layer, width):
    path = write_config(tmp_path, TINY)
    argv = ["export-embeddings", "--layer", layer, "--config", path]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    name = f"embeddings/hyperadapt_seed0_{layer}_test.csv"
    a = (tmp_path / "a" / name).read_bytes()
    assert a == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.reader((tmp_path / "a" / name).open()))
    cfg = ex.load_config(path)
    ctx_dataset = ex.load_dataset(cfg, 0)
    n_test = len(ex.split(ctx_dataset, 0).test)
    assert len(rows) == n_test + 1
    assert all(len(r) == width + 2 + len(ctx_dataset.schema.names) for r in rows)
    assert np.isfinite(np.array([r[:width] for r in rows[1:]], dtype=float)).all()


def test_export_rejects_layers_a_method_lacks(tmp_path, capsys):
    path = write_config(tmp_path, TINY)
    assert cli.main(["export-embeddings", "--layer", "patient", "--method", "vanilla", "--config", path,
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["export-embeddings", "--layer", "pixels", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "layer" in capsys.readouterr().err
