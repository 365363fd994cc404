"""Experiment orchestration: paired runs, sweeps, slope search, reports.

A JSON config describes one experiment end to end: data source, model,
training settings, priors, and how learned effects are evaluated.  A run
trains two models from the same initialization, one with the prior
penalty and one without, then scores both against the prior curves.
All outputs are byte-reproducible: seeds derive from the config seed,
floats are written in a canonical format, and nothing records the clock.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dt
from . import effects as ef
from . import network as nw
from . import priors as pr
from . import regularizer as rg
from . import scm


class HarnessError(ValueError):
    """Malformed experiment configuration."""


# -- canonical JSON --------------------------------------------------------


def _emit(obj, depth: int) -> str:
    pad = " " * (depth + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        keys = sorted(obj)
        if any(not isinstance(k, str) for k in keys):
            raise HarnessError("canonical JSON requires string keys")
        body = ",\n".join(f"{pad}{json.dumps(k)}: {_emit(obj[k], depth + 1)}" for k in keys)
        return "{\n" + body + "\n" + " " * depth + "}"
    if isinstance(obj, (list, tuple)):
        items = [_emit(v, depth + 1) for v in obj]
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(items) + "]"
        return "[\n" + ",\n".join(pad + it for it in items) + "\n" + " " * depth + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return f"{x:.12g}" if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _emit(obj.tolist(), depth)
    raise HarnessError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, floats at 12 significant digits, no volatile content."""
    return _emit(obj, 0) + "\n"


def write_json(path, obj) -> None:
    """Write canonical JSON atomically (temp file then rename)."""
    path = Path(path)
    text = canonical_json(obj)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def derive_seed(master: int, label: str) -> int:
    """Stable per-component seed from the master seed and a role label."""
    digest = hashlib.sha256(f"{label}:{master}".encode()).digest()
    return int.from_bytes(digest[:4], "big") % 2**31


# -- configuration -----------------------------------------------------------


_TOP_KEYS = {
    "name", "seed", "dataset", "split", "normalization", "binarize",
    "model", "training", "priors", "roles", "evaluation",
}
_EVAL_DEFAULTS = {"points": 21, "baseline": None, "rows": None}


def _check_keys(blob: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(blob) - allowed)
    if unknown:
        raise HarnessError(f"{where}: unknown keys {unknown}")


@dataclass
class ExperimentConfig:
    dataset: dict
    training: dict
    name: str = "experiment"
    seed: int = 0
    split: dict = field(default_factory=lambda: {"train": 0.8, "test": 0.2})
    normalization: str = "none"
    binarize: bool = False
    hidden: tuple[int, ...] = (16, 16)
    priors: dict | None = None
    roles: dict | None = None
    evaluation: dict = field(default_factory=lambda: dict(_EVAL_DEFAULTS))

    @classmethod
    def from_json(cls, source) -> "ExperimentConfig":
        if isinstance(source, (str, Path)):
            with open(source, encoding="utf-8") as fh:
                try:
                    blob = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise HarnessError(
                        f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}"
                    ) from exc
        else:
            blob = dict(source)
        _check_keys(blob, _TOP_KEYS, "config")
        for key in ("dataset", "training"):
            if key not in blob:
                raise HarnessError(f"config: missing required key {key!r}")
        model = blob.get("model", {})
        _check_keys(model, {"hidden"}, "config.model")
        evaluation = dict(_EVAL_DEFAULTS)
        extra = blob.get("evaluation", {})
        _check_keys(extra, set(_EVAL_DEFAULTS), "config.evaluation")
        evaluation.update(extra)
        priors = blob.get("priors")
        if isinstance(priors, str):
            base = Path(source).parent if isinstance(source, (str, Path)) else Path()
            with open(base / priors, encoding="utf-8") as fh:
                priors = json.load(fh)
        return cls(
            dataset=dict(blob["dataset"]),
            training=dict(blob["training"]),
            name=blob.get("name", "experiment"),
            seed=int(blob.get("seed", 0)),
            split=dict(blob.get("split", {"train": 0.8, "test": 0.2})),
            normalization=blob.get("normalization", "none"),
            binarize=bool(blob.get("binarize", False)),
            hidden=tuple(int(w) for w in model.get("hidden", (16, 16))),
            priors=priors,
            roles=dict(blob["roles"]) if blob.get("roles") else None,
            evaluation=evaluation,
        )

    def resolved(self) -> dict:
        """Plain JSON view with every default filled in; hashed and echoed."""
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset,
            "split": self.split,
            "normalization": self.normalization,
            "binarize": self.binarize,
            "model": {"hidden": list(self.hidden)},
            "training": self.training,
            "priors": self.priors,
            "roles": self.roles,
            "evaluation": self.evaluation,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.resolved()).encode()).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(path)


# -- run context --------------------------------------------------------------


def build_dataset(config: ExperimentConfig) -> tuple[dt.Dataset, scm.NamedRoles | None]:
    src = config.dataset
    named = None
    if "recipe" in src:
        _check_keys(src, {"recipe", "n", "seed"}, "config.dataset")
        seed = src.get("seed", derive_seed(config.seed, "data"))
        dataset = dt.generate(src["recipe"], n=src.get("n"), seed=seed)
    elif "csv" in src:
        _check_keys(src, {"csv", "target", "task", "features"}, "config.dataset")
        if "target" not in src:
            raise HarnessError("config.dataset: csv source needs a target column")
        dataset = dt.load_csv(
            src["csv"], target=src["target"],
            task=src.get("task", "regression"), features=src.get("features"),
        )
    elif "graph" in src:
        _check_keys(src, {"graph", "n"}, "config.dataset")
        graph, named = scm.load_graph(src["graph"])
        n = int(src.get("n", 1000))
        seed = derive_seed(config.seed, "data")
        values = graph.intervene_sample(n, seed, {})
        names = [m for m in graph.topo_order() if m != graph.outcome]
        X = np.column_stack([values[m] for m in names])
        dataset = dt.Dataset(X, values[graph.outcome], names, target_name=graph.outcome)
    else:
        raise HarnessError("config.dataset needs one of: recipe, csv, graph")
    dataset = dt.split(dataset, config.split, derive_seed(config.seed, "split"))
    if config.binarize:
        dataset = dt.binarize_output(dataset)
    return dt.normalize(dataset, config.normalization), named


@dataclass
class RunContext:
    """Everything a training arm needs, resolved once per run."""

    dataset: dt.Dataset
    arch: nw.Architecture
    train_config: nw.TrainingConfig
    spec: pr.PriorSpec | None
    penalty: rg.CredoPenalty | None
    roles: scm.RoleAssignment | None
    evaluation_points: int = 21
    evaluation_baseline: float | None = None


_TRAINING_KEYS = {
    "epochs", "batch_size", "learning_rate", "lambda_reg", "lambda_warmup",
    "weight_decay", "dropout", "ema_decay", "lr_schedule",
    "adam_beta1", "adam_beta2", "adam_eps",
}


def prepare(config: ExperimentConfig) -> RunContext:
    dataset, graph_roles = build_dataset(config)
    if dataset.task == "classification":
        n_outputs = int(dataset.y.max()) + 1
        if n_outputs < 2:
            raise HarnessError("classification target has a single label")
    else:
        n_outputs = 1
    arch = nw.Architecture(dataset.d, config.hidden, n_outputs, task=dataset.task)
    _check_keys(config.training, _TRAINING_KEYS, "config.training")
    train_config = nw.TrainingConfig(
        **config.training, seed=derive_seed(config.seed, "train")
    )

    roles = None
    named = graph_roles
    if config.roles is not None:
        _check_keys(config.roles, {"treatment", "mediators", "baseline"}, "config.roles")
        named = scm.NamedRoles(
            treatment=config.roles["treatment"],
            mediators=tuple(config.roles.get("mediators", ())),
            baseline=float(config.roles.get("baseline", 0.0)),
        )
    if named is not None:
        roles = scm.roles_from_names(named, dataset.feature_names)

    spec = None
    penalty = None
    if config.priors is not None:
        blob = dict(config.priors)
        expand = bool(blob.pop("signed_expansion", False))
        spec = pr.load_priors(blob, dataset.feature_names, n_classes=n_outputs)
        if expand:
            spec = pr.signed_class_expansion(spec, n_classes=n_outputs)
        mediators = None
        if spec.effect != "ACDE" and roles is None:
            raise HarnessError(f"{spec.effect} priors need config.roles")
        if spec.effect != "ACDE" and roles.mediators:
            Xtr, _ = dataset.train_xy()
            mediators = scm.fit_mediators(Xtr, roles)
        penalty = rg.CredoPenalty(
            spec, roles=roles if spec.effect != "ACDE" else None, mediators=mediators
        )
    return RunContext(
        dataset, arch, train_config, spec, penalty, roles,
        evaluation_points=int(config.evaluation["points"]),
        evaluation_baseline=config.evaluation["baseline"],
    )


# -- metrics -----------------------------------------------------------------


def mean_penalty(model: nw.Perceptron, X: np.ndarray, penalty: rg.CredoPenalty) -> float:
    """Batched average of the per-sample penalty at the model's parameters."""
    tape = ad.Tape()
    params = nw.make_param_nodes(tape, model.arch)
    graph = penalty.build_sample(tape, model.arch, params)
    param_rows = np.array([p.index for p in params], dtype=np.int64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    buffers: dict[int, ad.ColumnBatch] = {}
    total = 0.0
    for lo in range(0, X.shape[0], 256):
        chunk = X[lo : lo + 256]
        width = chunk.shape[0]
        buf = buffers.get(width)
        if buf is None:
            buf = buffers[width] = ad.ColumnBatch(tape, width)
        buf.bind(param_rows, model.params.reshape(-1, 1))
        rows, mat = graph.batch_bindings(chunk)
        buf.bind(rows, mat)
        buf.forward()
        total += float(buf.values[graph.node.index, :].sum())
    return total / X.shape[0]


def _arm_metrics(ctx: RunContext, model: nw.Perceptron) -> dict:
    Xtr, ytr = ctx.dataset.train_xy()
    Xte, yte = ctx.dataset.test_xy()
    out = {
        "train_loss": nw.test_loss(model, Xtr, ytr),
        "test_loss": nw.test_loss(model, Xte, yte),
    }
    if ctx.dataset.task == "classification":
        out["accuracy"] = nw.accuracy(model, Xte, yte)
    if ctx.penalty is not None:
        out["penalty"] = mean_penalty(model, Xtr, ctx.penalty)
    return out


def _eval_rows(ctx: RunContext, which: str | None) -> np.ndarray:
    if which is None:
        which = "test" if ctx.dataset.splits else "all"
    if which == "all":
        return ctx.dataset.X
    return ctx.dataset.part(which)[0]


def _entry_query(ctx: RunContext, entry: pr.PriorEntry, X: np.ndarray) -> ef.EffectQuery:
    col = X[:, entry.feature]
    lo, hi = float(col.min()), float(col.max())
    if entry.active_range is not None:
        lo, hi = max(lo, entry.active_range[0]), min(hi, entry.active_range[1])
    if not lo < hi:
        raise HarnessError(
            f"prior range for feature {entry.feature} misses the data entirely"
        )
    baseline = ctx.evaluation_baseline if ctx.evaluation_baseline is not None else lo
    baseline = min(max(baseline, lo), hi)
    grid = ef.effect_grid(lo, hi, n=ctx.evaluation_points, baseline=baseline)
    return ef.EffectQuery(
        treatment=entry.feature,
        grid=grid,
        class_index=entry.class_index,
        kind=ctx.spec.effect,
        baseline=baseline,
    )


def effect_report(ctx: RunContext, models: dict[str, nw.Perceptron], rows: np.ndarray):
    """Anchored prior/model curves and conformity scores per prior entry."""
    conf: dict[str, dict] = {}
    curves: dict[str, dict] = {}
    for entry in ctx.spec.entries:
        name = ctx.dataset.feature_names[entry.feature]
        key = f"{name}@{entry.class_index}" if ctx.arch.task == "classification" else name
        query = _entry_query(ctx, entry, rows)
        prior = ef.prior_curve(entry, query)
        conf[key] = {}
        curves[key] = {"t": list(query.grid), "prior": prior.values.tolist()}
        for arm, model in models.items():
            curve = ef.mc_effect_curve(model, rows, query, mediators=ctx.penalty.mediators)
            report = ef.conformity(curve, entry)
            conf[key][arm] = {
                "rmse": report.rmse, "frechet": report.frechet, "pearson": report.pearson,
            }
            curves[key][arm] = curve.values.tolist()
    return conf, curves


def run(config: ExperimentConfig, out_dir=None) -> dict:
    """Train paired models and report losses, conformity, and curves."""
    ctx = prepare(config)
    Xtr, ytr = ctx.dataset.train_xy()

    erm_model = nw.Perceptron(ctx.arch, seed=ctx.train_config.seed)
    nw.train(erm_model, (Xtr, ytr), replace(ctx.train_config, lambda_reg=0.0))
    models = {"erm": erm_model}

    regularized = ctx.penalty is not None and ctx.train_config.lambda_reg > 0.0
    if regularized:
        credo_model = nw.Perceptron(ctx.arch, seed=ctx.train_config.seed)
        nw.train(credo_model, (Xtr, ytr), ctx.train_config, penalty=ctx.penalty)
        models["credo"] = credo_model

    metrics = {
        "name": config.name,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "task": ctx.dataset.task,
    }
    for arm, model in models.items():
        metrics[arm] = _arm_metrics(ctx, model)
    if ctx.spec is not None:
        rows = _eval_rows(ctx, config.evaluation["rows"])
        metrics["conformity"], metrics["curves"] = effect_report(ctx, models, rows)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", config.resolved())
        write_json(out / "metrics.json", metrics)
        for arm, model in models.items():
            nw.save_checkpoint(model, out / f"{arm}.json")
    return metrics


# -- sweeps and slope search ---------------------------------------------------


def sweep(config: ExperimentConfig, values: list[float], out_dir=None) -> dict:
    """Re-run the experiment across penalty weights."""
    runs = {}
    for value in values:
        cfg = replace(config, training=dict(config.training, lambda_reg=float(value)))
        sub = None if out_dir is None else Path(out_dir) / f"lambda_{value:g}"
        runs[f"{value:g}"] = run(cfg, sub)
    summary = {
        "name": config.name,
        "field": "lambda_reg",
        "values": [float(v) for v in values],
        "runs": runs,
    }
    if out_dir is not None:
        write_json(Path(out_dir) / "sweep.json", summary)
    return summary


def run_slope_search(
    config: ExperimentConfig, low: float, high: float, step: float, out_dir=None
) -> dict:
    """Scan linear prior slopes; score each by held-out performance.

    Classification candidates are scored by test accuracy, regression
    candidates by negated test loss.  Every candidate trains from the
    same initialization on the same data, so the only difference between
    runs is the prior slope itself.
    """
    if config.priors is None or not config.priors.get("priors"):
        raise HarnessError("slope search needs a prior entry to vary")
    if config.priors["priors"][0].get("family") != "linear":
        raise HarnessError("slope search varies a linear prior; entry 0 is not linear")
    ctx = prepare(config)
    Xtr, ytr = ctx.dataset.train_xy()
    Xte, yte = ctx.dataset.test_xy()
    classify = ctx.arch.task == "classification"
    varied = [
        i for i, e in enumerate(ctx.spec.entries)
        if e.feature == ctx.spec.entries[0].feature and e.fn.family == "linear"
    ]

    def evaluate(alpha: float) -> float:
        entries = list(ctx.spec.entries)
        for i in varied:
            entries[i] = replace(entries[i], fn=pr.PriorFunction.linear(alpha))
        penalty = replace(ctx.penalty, spec=replace(ctx.spec, entries=tuple(entries)))
        model = nw.Perceptron(ctx.arch, seed=ctx.train_config.seed)
        nw.train(model, (Xtr, ytr), ctx.train_config, penalty=penalty)
        if classify:
            return nw.accuracy(model, Xte, yte)
        return -nw.test_loss(model, Xte, yte)

    space = pr.SlopeSearchSpace.grid(low, high, step)
    result = pr.slope_search(space, evaluate)
    report = {
        "name": config.name,
        "config_hash": config.config_hash(),
        "grid": list(space.values),
        "scores": [[v, s] for v, s in result.scores],
        "best": result.best,
        "best_score": result.best_score,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "slope_search.json", report)
    return report


# -- plots ---------------------------------------------------------------------


_SVG_COLORS = {"prior": "#444444", "erm": "#d62728", "credo": "#1f77b4"}
_FALLBACK_COLORS = ("#2ca02c", "#9467bd", "#8c564b", "#e377c2")
_SVG_W, _SVG_H, _MARGIN = 640, 480, 54


def _scale(lo: float, hi: float) -> tuple[float, float]:
    if hi == lo:
        return lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_curves_svg(ts, series: dict[str, np.ndarray], title: str = "") -> str:
    """Fixed-size line chart; output depends only on the data passed in."""
    ts = np.asarray(ts, dtype=np.float64)
    xlo, xhi = _scale(float(ts.min()), float(ts.max()))
    allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    ylo, yhi = _scale(float(allv.min()), float(allv.max()))
    sx = lambda x: _MARGIN + (x - xlo) / (xhi - xlo) * (_SVG_W - 2 * _MARGIN)
    sy = lambda y: _SVG_H - _MARGIN - (y - ylo) / (yhi - ylo) * (_SVG_H - 2 * _MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}" font-family="monospace" font-size="12">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W // 2}" y="20" text-anchor="middle">{title}</text>',
    ]
    axis = 'stroke="black" stroke-width="1"'
    parts.append(f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" y2="{_SVG_H - _MARGIN}" {axis}/>')
    parts.append(f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_SVG_H - _MARGIN}" {axis}/>')
    for i in range(5):
        xv = xlo + (xhi - xlo) * i / 4
        yv = ylo + (yhi - ylo) * i / 4
        parts.append(
            f'<text x="{sx(xv):.2f}" y="{_SVG_H - _MARGIN + 16}" text-anchor="middle">{xv:.4g}</text>'
        )
        parts.append(
            f'<text x="{_MARGIN - 6}" y="{sy(yv):.2f}" text-anchor="end" dominant-baseline="middle">{yv:.4g}</text>'
        )
    fallback = iter(_FALLBACK_COLORS)
    for row, (label, values) in enumerate(series.items()):
        color = _SVG_COLORS.get(label) or next(fallback)
        pts = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in zip(ts, values))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = _MARGIN + 10 + 16 * row
        parts.append(f'<line x1="{_SVG_W - 150}" y1="{ly}" x2="{_SVG_W - 126}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_SVG_W - 120}" y="{ly + 4}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_metrics(metrics: dict, out_dir) -> list[Path]:
    """One SVG per evaluated feature, drawn from a metrics report."""
    curves = metrics.get("curves")
    if not curves:
        raise HarnessError("metrics report has no curves to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, block in curves.items():
        series = {arm: np.asarray(vals) for arm, vals in block.items() if arm != "t"}
        svg = render_curves_svg(block["t"], series, title=f"{metrics.get('name', '')}: {key}")
        path = out / f"{key.replace('@', '_class')}.svg"
        path.write_text(svg, encoding="utf-8")
        written.append(path)
    return written
