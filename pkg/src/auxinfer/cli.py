"""``auxinfer`` command line: run form comparisons, generate DBN data, check gradients."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import finite_diff_check, grad_auxiliary, grad_original
from .auxiliary import sample_epsilon, to_auxiliary
from .errors import AuxInferError
from .experiments import (
    DbnDataConfig,
    ExperimentConfig,
    generate_dbn_data,
    load_experiment_data,
    run_comparison,
    write_dbn_csv,
)
from .model import init_params

log = logging.getLogger("auxinfer")

GRAD_TOLERANCE = 1e-4


def _cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = replace(config, learn=replace(config.learn, seed=args.seed))
    forms = ("original", "auxiliary") if args.form == "both" else (args.form,)
    report = run_comparison(config, forms, out_dir=args.out, log=log.info)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_gen_dbn(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    data = dict(doc.get("data", doc))
    data.pop("kind", None)
    dataset, _ = generate_dbn_data(DbnDataConfig(**data))
    write_dbn_csv(dataset, args.out)
    log.info("wrote %d sequences to %s", dataset.M, args.out)
    return 0


def _cmd_check_grads(args) -> int:
    """Central-difference check of both gradient paths on a few datapoints of the config's model."""
    config = ExperimentConfig.load(args.config)
    net, dataset, variances = load_experiment_data(config)
    rng = np.random.default_rng(args.seed)
    rows = rng.choice(dataset.M, size=min(args.rows, dataset.M), replace=False)
    data = {k: v[rows] for k, v in dataset.values.items()}
    params = init_params(net, rng, 0.5, variances)
    auxnet = to_auxiliary(net, config.generators)
    eps = sample_epsilon(auxnet, len(rows), rng)
    latents = {n: rng.standard_normal((len(rows), net.dim(n))) for n in net.latent_names}

    def coords(size):
        return rng.choice(size, size=min(size, args.coords), replace=False)

    worst = {}
    for name in net.latent_names:
        f = lambda v, n=name: (lambda val, g: (val, g.wrt_values[n]))(  # noqa: E731
            *grad_original(net, {**data, **latents, n: v}, params))
        worst[f"original/{name}"] = finite_diff_check(f, latents[name], coords=coords(latents[name].size))
    for name in auxnet.aux_names:
        f = lambda v, n=name: (lambda val, g: (val, g.wrt_values[n]))(  # noqa: E731
            *grad_auxiliary(auxnet, data, {**eps, n: v}, params))
        worst[f"auxiliary/{name}"] = finite_diff_check(f, eps[name], coords=coords(eps[name].size))
    for pname in params.names():
        for form, gfn in (("original", lambda p: grad_original(net, {**data, **latents}, p)),
                          ("auxiliary", lambda p: grad_auxiliary(auxnet, data, eps, p))):
            f = lambda v, n=pname, gfn=gfn: (lambda val, g: (val, g.wrt_params[n]))(  # noqa: E731
                *gfn(params.replace({n: v})))
            worst[f"{form}/{pname}"] = finite_diff_check(f, params[pname], coords=coords(params[pname].size))
    failed = 0
    for key, err in worst.items():
        ok = err < GRAD_TOLERANCE
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {key:40s} max rel err {err:.2e}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="auxinfer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="learn in one or both forms and write traces plus a report")
    run.add_argument("--config", required=True)
    run.add_argument("--form", choices=("original", "auxiliary", "both"), default="both")
    run.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    run.add_argument("--seed", type=int, default=None, help="override the learning seed")
    run.set_defaults(func=_cmd_run)

    gen = sub.add_parser("gen-dbn", help="forward-sample a synthetic DBN dataset to CSV")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_dbn)

    chk = sub.add_parser("check-grads", help="finite-difference check of both gradient paths")
    chk.add_argument("--config", required=True)
    chk.add_argument("--rows", type=int, default=3)
    chk.add_argument("--coords", type=int, default=20, help="coordinates checked per array")
    chk.add_argument("--seed", type=int, default=0)
    chk.set_defaults(func=_cmd_check_grads)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (AuxInferError, OSError, json.JSONDecodeError) as exc:
        print(f"auxinfer: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
