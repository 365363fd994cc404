"""Experiment orchestration: configs, seeds, paired runs, reports, plots."""

import json

import numpy as np
import pytest

from credo import data, harness, network, priors, regularizer, scm
from credo.harness import ExperimentConfig


def tiny_config(**overrides) -> ExperimentConfig:
    blob = {
        "name": "tiny",
        "seed": 1,
        "dataset": {"recipe": "tabular1", "n": 80},
        "split": {"train": 0.75, "test": 0.25},
        "model": {"hidden": [4]},
        "training": {"epochs": 3, "batch_size": 16, "learning_rate": 0.02, "lambda_reg": 0.5},
        "priors": {
            "effect": "ACDE",
            "epsilon": 0.05,
            "priors": [{"feature": "x", "family": "log1p", "params": {"a": 1, "b": 2}}],
        },
        "evaluation": {"points": 9},
    }
    blob.update(overrides)
    return ExperimentConfig.from_json(blob)


# -- canonical JSON ----------------------------------------------------------


def test_canonical_json_sorts_and_formats():
    text = harness.canonical_json({"b": 1.0, "a": [1, 2.5, None], "c": {"y": True}})
    assert text == '{\n "a": [1, 2.5, null],\n "b": 1,\n "c": {\n  "y": true\n }\n}\n'


def test_canonical_json_float_rendering():
    assert harness.canonical_json(0.1).strip() == "0.1"
    assert harness.canonical_json(2.0).strip() == "2"
    assert harness.canonical_json(1 / 3).strip() == "0.333333333333"
    assert harness.canonical_json(float("nan")).strip() == "null"
    assert harness.canonical_json(np.float64(0.5)).strip() == "0.5"
    assert harness.canonical_json(np.arange(3)).strip() == "[0, 1, 2]"


def test_canonical_json_rejects_exotic_types():
    with pytest.raises(harness.HarnessError, match="cannot serialize"):
        harness.canonical_json({"x": object()})


def test_write_json_atomic_round_trip(tmp_path):
    path = tmp_path / "out.json"
    harness.write_json(path, {"value": 0.25})
    assert json.loads(path.read_text()) == {"value": 0.25}
    assert list(tmp_path.iterdir()) == [path]


# -- seeds ---------------------------------------------------------------------


def test_derive_seed_stable_and_label_sensitive():
    a = harness.derive_seed(7, "train")
    assert a == harness.derive_seed(7, "train")
    assert a != harness.derive_seed(7, "data")
    assert a != harness.derive_seed(8, "train")
    assert 0 <= a < 2**31


# -- config parsing ---------------------------------------------------------


def test_config_defaults_and_hash():
    cfg = tiny_config()
    assert cfg.hidden == (4,) and cfg.normalization == "none"
    assert cfg.evaluation == {"points": 9, "baseline": None, "rows": None}
    h = cfg.config_hash()
    assert h == tiny_config().config_hash() and len(h) == 12
    assert h != tiny_config(seed=2).config_hash()


def test_config_rejects_unknown_keys():
    with pytest.raises(harness.HarnessError, match="unknown keys"):
        tiny_config(optimizer="sgd")
    with pytest.raises(harness.HarnessError, match=r"config\.model"):
        tiny_config(model={"hidden": [4], "activation": "gelu"})
    with pytest.raises(harness.HarnessError, match="missing required key"):
        ExperimentConfig.from_json({"dataset": {"recipe": "tabular1"}})


def test_config_from_file_with_priors_indirection(tmp_path):
    priors_blob = {
        "effect": "ACDE",
        "priors": [{"feature": "x", "family": "zero", "params": {}}],
    }
    (tmp_path / "priors.json").write_text(json.dumps(priors_blob))
    blob = tiny_config().resolved()
    blob["priors"] = "priors.json"
    (tmp_path / "config.json").write_text(json.dumps(blob))
    cfg = harness.load_config(tmp_path / "config.json")
    assert cfg.priors["priors"][0]["family"] == "zero"


def test_config_bad_json_names_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n "name": "x",\n}\n')
    with pytest.raises(harness.HarnessError, match="line 3"):
        harness.load_config(path)


def test_training_keys_validated():
    cfg = tiny_config(training={"epochs": 2, "batch_size": 8, "learning_rate": 0.1, "momentum": 0.9})
    with pytest.raises(harness.HarnessError, match=r"config\.training.*momentum"):
        harness.prepare(cfg)


# -- dataset building -----------------------------------------------------------


def test_build_dataset_recipe_with_split_and_binarize():
    cfg = tiny_config(
        dataset={"recipe": "tabular4", "n": 200}, binarize=True, normalization="zscore"
    )
    dataset, named = harness.build_dataset(cfg)
    assert named is None
    assert dataset.task == "classification"
    assert set(np.unique(dataset.y)) <= {0, 1}
    assert dataset.normalization is not None
    assert len(dataset.splits["train"]) == 150


def test_build_dataset_seed_follows_master_unless_pinned():
    a, _ = harness.build_dataset(tiny_config(seed=1))
    b, _ = harness.build_dataset(tiny_config(seed=2))
    assert not np.array_equal(a.X, b.X)
    pinned = {"recipe": "tabular1", "n": 80, "seed": 5}
    c, _ = harness.build_dataset(tiny_config(seed=1, dataset=pinned))
    d, _ = harness.build_dataset(tiny_config(seed=2, dataset=pinned))
    np.testing.assert_array_equal(c.X, d.X)


def test_build_dataset_from_graph_file(tmp_path):
    path = tmp_path / "graph.json"
    scm.save_graph(data.reference_scm(), path, roles=scm.NamedRoles("x"))
    cfg = tiny_config(dataset={"graph": str(path), "n": 120}, priors=None)
    dataset, named = harness.build_dataset(cfg)
    # Feature order is topological with the outcome dropped.
    assert dataset.feature_names == ["w", "z", "x"]
    assert dataset.target_name == "y" and dataset.n == 120
    assert named.treatment == "x"


def test_build_dataset_from_csv(tmp_path):
    source = data.generate("tabular2", n=30, seed=0)
    path = tmp_path / "surface.csv"
    data.save_csv(source, path)
    cfg = tiny_config(dataset={"csv": str(path), "target": "z"}, priors=None)
    dataset, _ = harness.build_dataset(cfg)
    assert dataset.feature_names == ["x", "y"]
    np.testing.assert_array_equal(np.sort(dataset.X[:, 0]), np.sort(source.X[:, 0]))


def test_build_dataset_requires_source():
    with pytest.raises(harness.HarnessError, match="recipe, csv, graph"):
        harness.build_dataset(tiny_config(dataset={"n": 10}))


# -- prepare -----------------------------------------------------------------


def test_prepare_resolves_arch_and_penalty():
    ctx = harness.prepare(tiny_config())
    assert ctx.arch.n_inputs == 1 and ctx.arch.n_outputs == 1
    assert ctx.arch.task == "regression"
    assert ctx.spec is not None and ctx.penalty is not None
    assert ctx.evaluation_points == 9
    assert ctx.train_config.seed == harness.derive_seed(1, "train")


def test_prepare_fits_mediators_for_total_effect():
    cfg = tiny_config(
        dataset={"recipe": "tabular4", "n": 300},
        roles={"treatment": "w", "mediators": ["z", "x"], "baseline": 0.0},
        priors={
            "effect": "ATCE",
            "epsilon": 0.1,
            "priors": [{"feature": "w", "family": "linear", "params": {"alpha": -3.0}}],
        },
    )
    ctx = harness.prepare(cfg)
    assert ctx.roles.treatment == 2 and ctx.roles.mediators == (1, 0)
    assert ctx.penalty.mediators is not None
    chain = ctx.penalty.mediators.chain_derivatives()
    np.testing.assert_allclose(chain, [-2.0, -1.0], atol=0.2)


def test_prepare_rejects_causal_priors_without_roles():
    cfg = tiny_config(
        priors={
            "effect": "ANDE",
            "priors": [{"feature": "x", "family": "zero", "params": {}}],
        }
    )
    with pytest.raises(harness.HarnessError, match="ANDE priors need config.roles"):
        harness.prepare(cfg)


# -- penalty reporting ----------------------------------------------------------


def test_mean_penalty_matches_unrolled_report():
    arch = network.Architecture(2, (3,), 1, task="regression")
    model = network.Perceptron(arch, seed=4)
    spec = priors.PriorSpec(
        entries=(priors.PriorEntry(0, 0, priors.PriorFunction.linear(1.0)),),
        epsilon=0.1,
    )
    penalty = regularizer.CredoPenalty(spec)
    X = np.random.default_rng(0).normal(size=(300, 2))
    report = regularizer.penalty_report(model, X, penalty)
    assert harness.mean_penalty(model, X, penalty) == pytest.approx(report.value, rel=1e-12)


# -- runs --------------------------------------------------------------------


def test_run_produces_metrics_and_files(tmp_path):
    metrics = harness.run(tiny_config(), tmp_path / "out")
    assert metrics["task"] == "regression"
    assert set(metrics) == {
        "name", "seed", "config_hash", "task", "erm", "credo", "conformity", "curves",
    }
    for arm in ("erm", "credo"):
        assert set(metrics[arm]) == {"train_loss", "test_loss", "penalty"}
    scores = metrics["conformity"]["x"]
    assert set(scores) == {"erm", "credo"}
    assert set(scores["erm"]) == {"rmse", "frechet", "pearson"}
    block = metrics["curves"]["x"]
    assert len(block["t"]) == 9
    assert block["prior"][0] == 0.0
    for name in ("config.json", "metrics.json", "erm.json", "credo.json"):
        assert (tmp_path / "out" / name).exists()
    reloaded = network.load_checkpoint(tmp_path / "out" / "credo.json")
    Xte, yte = harness.prepare(tiny_config()).dataset.test_xy()
    assert network.test_loss(reloaded, Xte, yte) == pytest.approx(metrics["credo"]["test_loss"])


def test_run_metrics_bytes_identical_on_rerun(tmp_path):
    harness.run(tiny_config(), tmp_path / "a")
    harness.run(tiny_config(), tmp_path / "b")
    first = (tmp_path / "a" / "metrics.json").read_bytes()
    second = (tmp_path / "b" / "metrics.json").read_bytes()
    assert first == second


def test_run_without_priors_has_single_arm():
    metrics = harness.run(tiny_config(priors=None))
    assert "credo" not in metrics and "conformity" not in metrics
    assert set(metrics["erm"]) == {"train_loss", "test_loss"}


def test_run_classification_reports_accuracy_and_class_keys():
    cfg = tiny_config(
        dataset={"recipe": "tabular4", "n": 240},
        binarize=True,
        priors={
            "effect": "ACDE",
            "epsilon": 0.1,
            "signed_expansion": True,
            "priors": [{"feature": "x", "family": "linear", "params": {"alpha": 2.0}, "class": 1}],
        },
    )
    metrics = harness.run(cfg)
    assert "accuracy" in metrics["erm"]
    assert sorted(metrics["conformity"]) == ["x@0", "x@1"]


def test_sweep_runs_each_weight(tmp_path):
    summary = harness.sweep(tiny_config(), [0.0, 0.5], tmp_path)
    assert sorted(summary["runs"]) == ["0", "0.5"]
    assert "credo" not in summary["runs"]["0"]
    assert "credo" in summary["runs"]["0.5"]
    assert (tmp_path / "sweep.json").exists()
    assert (tmp_path / "lambda_0.5" / "metrics.json").exists()


def test_slope_search_scores_are_negated_losses(tmp_path):
    cfg = tiny_config(
        priors={
            "effect": "ACDE",
            "epsilon": 0.05,
            "priors": [{"feature": "x", "family": "linear", "params": {"alpha": 1.0}}],
        }
    )
    report = harness.run_slope_search(cfg, 0.5, 1.5, 0.5, tmp_path)
    assert report["grid"] == [0.5, 1.0, 1.5]
    assert len(report["scores"]) == 3
    assert report["best"] in report["grid"]
    assert report["best_score"] == max(s for _, s in report["scores"])
    assert (tmp_path / "slope_search.json").exists()


def test_slope_search_requires_linear_first_entry():
    with pytest.raises(harness.HarnessError, match="not linear"):
        harness.run_slope_search(tiny_config(), 0.5, 1.5, 0.5)
    with pytest.raises(harness.HarnessError, match="needs a prior entry"):
        harness.run_slope_search(tiny_config(priors=None), 0.5, 1.5, 0.5)


# -- plots -----------------------------------------------------------------------


def test_render_curves_svg_is_deterministic():
    ts = np.linspace(0.0, 1.0, 5)
    series = {"prior": ts**2, "erm": ts, "credo": np.sqrt(ts)}
    svg = harness.render_curves_svg(ts, series, title="demo")
    assert svg == harness.render_curves_svg(ts, series, title="demo")
    assert svg.count("<polyline") == 3
    for label in series:
        assert f">{label}</text>" in svg
    assert "demo" in svg and "<svg " in svg


def test_plot_metrics_writes_one_svg_per_feature(tmp_path):
    metrics = harness.run(tiny_config(), tmp_path / "out")
    written = harness.plot_metrics(metrics, tmp_path / "plots")
    assert [p.name for p in written] == ["x.svg"]
    body = written[0].read_text()
    assert body.count("<polyline") == 3
    with pytest.raises(harness.HarnessError, match="no curves"):
        harness.plot_metrics({"name": "empty"}, tmp_path / "plots")
