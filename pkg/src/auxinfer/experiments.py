"""Experiment harness: datasets, model builders and form-comparison runs."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError, RangeError
from .learning import LearnConfig, LearningAborted, Problem, fit
from .model import (
    BayesNet,
    ConditionalSpec,
    ParameterStore,
    VariableDecl,
    ancestral_sample,
    build_network,
    init_params,
    load_model,
)

IDX_IMAGE_MAGIC = 0x00000803


# ------------------------------------------------------------------ models


def dbn_network(T: int = 10, latent_dim: int = 10, obs_dim: int = 10) -> BayesNet:
    """Chain ``z_0 -> ... -> z_{T-1}`` with ``x_t | z_t``; transition and emission
    parameters are shared across time steps."""
    if T < 2:
        raise ConfigError("T must be at least 2")
    variables = [VariableDecl(f"z{t}", latent_dim, "latent-continuous") for t in range(T)]
    variables += [VariableDecl(f"x{t}", obs_dim, "observed") for t in range(T)]
    conds = [ConditionalSpec("z0", (), "gaussian-isotropic-prior", log_sigma="log_sigma_z0")]
    for t in range(1, T):
        conds.append(ConditionalSpec(f"z{t}", (f"z{t-1}",), "gaussian-affine-tanh",
                                     weights=("W_z",), bias="b_z", log_sigma="log_sigma_z"))
    for t in range(T):
        conds.append(ConditionalSpec(f"x{t}", (f"z{t}",), "gaussian-affine-tanh",
                                     weights=("W_x",), bias="b_x", log_sigma="log_sigma_x"))
    return build_network(variables, conds)


def mnist_network(latent_dim: int = 16, obs_dim: int = 784, layers: int = 2) -> BayesNet:
    """``z1 -> ... -> z{layers} -> x`` with a Bernoulli-sigmoid image layer."""
    variables = [VariableDecl(f"z{i}", latent_dim, "latent-continuous") for i in range(1, layers + 1)]
    variables.append(VariableDecl("x", obs_dim, "observed"))
    conds = [ConditionalSpec("z1", (), "gaussian-isotropic-prior")]
    for i in range(2, layers + 1):
        conds.append(ConditionalSpec(f"z{i}", (f"z{i-1}",), "gaussian-affine-tanh"))
    conds.append(ConditionalSpec("x", (f"z{layers}",), "bernoulli-affine-sigmoid"))
    return build_network(variables, conds)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    """Observed values for ``M`` datapoints plus provenance metadata."""

    values: dict
    metadata: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return next(iter(self.values.values())).shape[0]


def write_idx_images(path, images):
    """Write a uint8 ``(n, rows, cols)`` array as an IDX3 file (gzipped if ``.gz``)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def read_idx_images(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 16:
        raise FormatError("IDX header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    if len(raw) != 16 + n * rows * cols:
        raise FormatError(f"IDX payload has {len(raw) - 16} bytes, expected {n * rows * cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def load_mnist_idx(path, subset: int, threshold: float = 0.5, seed: int = 0) -> Dataset:
    """Random ``subset`` of 28x28 IDX images, flattened and binarized.

    A pixel becomes 1 when it exceeds ``threshold * 255``.
    """
    images = read_idx_images(path)
    if images.shape[1:] != (28, 28):
        raise FormatError(f"expected 28x28 images, got {images.shape[1:]}")
    if subset < 1 or subset > images.shape[0]:
        raise RangeError(f"subset {subset} outside 1..{images.shape[0]}")
    idx = np.random.default_rng(seed).permutation(images.shape[0])[:subset]
    flat = images[idx].reshape(subset, -1).astype(float)
    x = (flat > threshold * 255.0).astype(float)
    meta = {"source": "mnist", "path": str(path), "M": subset, "dims": {"x": 784},
            "seed": seed, "threshold": threshold}
    return Dataset({"x": x}, meta)


@dataclass(frozen=True)
class DbnDataConfig:
    T: int = 10
    latent_dim: int = 10
    obs_dim: int = 10
    M: int = 100
    seed: int = 0
    noiseless: bool = False

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if min(self.latent_dim, self.obs_dim, self.M) < 1:
            raise ConfigError("dims and M must be positive")


def dbn_ground_truth(net: BayesNet, rng: np.random.Generator) -> ParameterStore:
    """Ground-truth parameters with every entry of ``W``, ``b`` and ``sigma`` drawn N(0, 1).

    Scales are stored as ``log |sigma|``.
    """
    entries = {}
    for name, shape in net.param_shapes.items():
        draw = rng.standard_normal(shape)
        entries[name] = np.log(np.abs(draw)) if name.startswith("log_sigma") else draw
    return ParameterStore(entries)


def generate_dbn_data(config: DbnDataConfig, rng: np.random.Generator | None = None):
    """Forward-sample ``M`` independent sequences; returns ``(Dataset, ground_truth)``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    net = dbn_network(config.T, config.latent_dim, config.obs_dim)
    truth = dbn_ground_truth(net, rng)
    values = ancestral_sample(net, truth, config.M, rng, noise_scale=0.0 if config.noiseless else 1.0)
    observed = {n: values[n] for n in net.observed_names}
    meta = {"source": "dbn-synthetic", "M": config.M, "T": config.T,
            "dims": {"latent": config.latent_dim, "obs": config.obs_dim}, "seed": config.seed}
    return Dataset(observed, meta), truth


def dbn_columns(T: int, obs_dim: int):
    return [f"x_t{t}_d{d}" for t in range(T) for d in range(obs_dim)]


def write_dbn_csv(dataset: Dataset, path):
    T = dataset.metadata["T"]
    d = dataset.metadata["dims"]["obs"]
    matrix = np.concatenate([dataset.values[f"x{t}"] for t in range(T)], axis=1)
    with open(path, "w") as fh:
        fh.write(",".join(dbn_columns(T, d)) + "\n")
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_dbn_csv(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        matrix = np.loadtxt(fh, delimiter=",", ndmin=2)
    ts = sorted({int(c.split("_")[1][1:]) for c in header})
    obs_dim = len(header) // len(ts)
    if header != dbn_columns(len(ts), obs_dim):
        raise FormatError("unexpected DBN CSV columns")
    values = {f"x{t}": matrix[:, t * obs_dim:(t + 1) * obs_dim] for t in ts}
    meta = {"source": "dbn-csv", "M": matrix.shape[0], "T": len(ts),
            "dims": {"obs": obs_dim}, "path": str(path)}
    return Dataset(values, meta)


# -------------------------------------------------------------- comparison


def iterations_to_reach(objective, target) -> int | None:
    """1-based count of iterations until the objective first reaches ``target``."""
    hits = np.nonzero(np.asarray(objective) >= target)[0]
    return int(hits[0]) + 1 if hits.size else None


def plateau_value(objective, window: float = 0.05) -> float:
    """Mean objective over the final ``window`` fraction of the run."""
    objective = np.asarray(objective, dtype=float)
    n = max(1, int(round(window * objective.size)))
    return float(np.mean(objective[-n:]))


def band_target(plateau: float, baseline: float | None, tolerance: float = 0.05) -> float:
    """Objective level counted as "within ``tolerance`` of ``plateau``".

    With a ``baseline`` (the objective at the shared starting point) the band
    is ``tolerance`` of the climb from baseline to plateau.  Without one it
    is ``tolerance`` of the plateau's magnitude.
    """
    scale = abs(plateau - baseline) if baseline is not None else abs(plateau)
    return plateau - tolerance * scale


def compare_objectives(objectives: Mapping[str, np.ndarray], baseline: float | None = None,
                       tolerance: float = 0.05, window: float = 0.05) -> dict:
    """Plateaus, hitting times and the speedup of the second run over the first.

    Every run is timed against the same target: the band around the lower
    of the plateaus.  ``speedup_ratio`` is first-run iterations over
    second-run iterations, so swapping the runs inverts it and identical
    runs give exactly 1.
    """
    labels = list(objectives)
    plateau = {k: plateau_value(v, window) for k, v in objectives.items()}
    own = {k: iterations_to_reach(v, band_target(plateau[k], baseline, tolerance))
           for k, v in objectives.items()}
    target = band_target(min(plateau.values()), baseline, tolerance)
    shared = {k: iterations_to_reach(v, target) for k, v in objectives.items()}
    ratio = None
    if len(labels) == 2 and all(shared[k] for k in labels):
        ratio = shared[labels[0]] / shared[labels[1]]
    return {"plateau": plateau, "iters_to_plateau": own, "baseline": baseline, "target": target,
            "iters_to_target": shared, "speedup_ratio": ratio}


@dataclass
class ExperimentConfig:
    data: dict
    learn: LearnConfig
    model: str | None = None
    output_dir: str = "runs"
    latent_dim: int | None = None
    layers: int = 2
    generators: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str | os.PathLike | None = None) -> "ExperimentConfig":
        doc = dict(doc)
        data = dict(doc.pop("data"))
        kind = data.get("kind")
        if kind not in ("mnist", "dbn-synthetic", "dbn-csv"):
            raise ConfigError(f"unknown data kind {kind!r}")
        if kind == "mnist" and int(data.get("subset", 1)) < 1:
            raise ConfigError("subset must be at least 1")
        if kind == "dbn-synthetic" and int(data.get("T", 10)) < 2:
            raise ConfigError("T must be at least 2")
        base = Path(base_dir) if base_dir is not None else Path(".")
        for key in ("path",):
            if key in data and not os.path.isabs(data[key]):
                data[key] = str(base / data[key])
        model = doc.pop("model", None)
        if model is not None and not os.path.isabs(model):
            model = str(base / model)
        learn = LearnConfig.from_dict(doc.pop("learn", {}))
        cfg = cls(data=data, learn=learn, model=model, **doc)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=Path(path).parent)


def load_experiment_data(config: ExperimentConfig):
    """Returns ``(net, Dataset, prior_variances)`` for an experiment config."""
    d = config.data
    kind = d["kind"]
    if kind == "mnist":
        dataset = load_mnist_idx(d["path"], int(d.get("subset", 1000)),
                                 float(d.get("threshold", 0.5)), int(d.get("seed", 0)))
        default_net = lambda: mnist_network(config.latent_dim or 16, 784, config.layers)  # noqa: E731
    elif kind == "dbn-synthetic":
        dcfg = DbnDataConfig(**{k: v for k, v in d.items() if k != "kind"})
        dataset, _ = generate_dbn_data(dcfg)
        default_net = lambda: dbn_network(dcfg.T, dcfg.latent_dim, dcfg.obs_dim)  # noqa: E731
    else:
        dataset = read_dbn_csv(d["path"])
        default_net = lambda: dbn_network(dataset.metadata["T"], config.latent_dim or 10,  # noqa: E731
                                          dataset.metadata["dims"]["obs"])
    if config.model is not None:
        net, variances = load_model(config.model)
    else:
        net, variances = default_net(), None
    for name in net.observed_names:
        if name not in dataset.values or dataset.values[name].shape[1] != net.dim(name):
            raise ConfigError(f"dataset does not match model variable {name!r}")
    return net, dataset, variances


def _labels(forms):
    labels, seen = [], {}
    for f in forms:
        seen[f] = seen.get(f, 0) + 1
        labels.append(f if seen[f] == 1 else f"{f}_{seen[f]}")
    return labels


def run_comparison(config: ExperimentConfig, forms=("original", "auxiliary"), out_dir=None,
                   log=None) -> dict:
    """Run the learner once per form from identical seeds, parameters and latents.

    Writes ``trace_<label>.csv`` per run and ``report.json`` into ``out_dir``
    and returns the report.  A run that aborts keeps its partial trace; the
    report is still written and :class:`LearningAborted` is raised after.
    """
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, dataset, variances = load_experiment_data(config)
    base = config.learn
    init_rng, state_rng, _ = [np.random.default_rng(s) for s in np.random.SeedSequence(base.seed).spawn(3)]
    params0 = init_params(net, init_rng, base.init_std, variances)
    reference = Problem(net, dataset.values, "auxiliary", config.generators)
    eps0 = reference.init_state(params0, state_rng)
    z0 = reference.latents(eps0, params0)
    baseline = reference.objective(eps0, params0)

    objectives, wall, accept, failures = {}, {}, {}, {}
    labels = _labels(forms)
    for label, form in zip(labels, forms):
        path = out / f"trace_{label}.csv"
        try:
            _, trace = fit(net, dataset.values, replace(base, form=form), init_params_store=params0,
                           init_state=eps0 if form == "auxiliary" else z0, trace_path=path,
                           generators=config.generators)
        except LearningAborted as exc:
            trace = exc.trace
            failures[label] = str(exc)
        objectives[label] = trace.objective
        wall[label] = float(trace.records[-1].wall_s) if trace.records else 0.0
        accept[label] = float(trace.records[-1].accept_rate) if trace.records else 0.0
        if log:
            last = objectives[label][-1] if len(trace) else float("nan")
            log(f"{label}: {len(trace)} iterations, final objective {last:.4f}, {wall[label]:.1f} s")

    report = {"labels": labels}
    if all(len(v) for v in objectives.values()):
        report.update(compare_objectives(objectives, baseline))
        report["magnitude_band"] = compare_objectives(objectives)
    report["wall_s"] = wall
    report["accept_rate"] = accept
    if failures:
        report["failures"] = failures
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failures:
        raise LearningAborted("; ".join(f"{k}: {v}" for k, v in failures.items()), None, None)
    return report
