"""Command-line entry point: ``dasnet <command> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 data or model error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, maxoutnet, policy, trainer
from .dataio import FormatError, IngestionError
from .numerics import DimensionError, NumericalError, RngStream

log = logging.getLogger("dasnet")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Config


_TOP_KEYS = {"data_dir", "output_dir", "seed", "architecture", "sgd", "dasnet"}
_REQUIRED = ("data_dir",)


def _section(cls, values: dict, name: str, skip=()):
    fields = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    return values


def load_config(path) -> dict:
    """Read a run config, fill defaults and validate keys.

    Returns a dict with ``data_dir``, ``output_dir``, ``seed``,
    ``architecture``, ``sgd`` (:class:`SgdConfig`) and ``dasnet``
    (:class:`DasNetConfig`).
    """
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    for key in _REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required key: {key}")
    seed = int(os.environ.get("DASNET_SEED", raw.get("seed", 0)))
    sgd = _section(maxoutnet.SgdConfig, raw.get("sgd", {}), "sgd")
    das = _section(trainer.DasNetConfig, raw.get("dasnet", {}), "dasnet", skip=("seed",))
    try:
        das_cfg = trainer.DasNetConfig(**{**das, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"dasnet: {exc}") from exc
    arch = raw.get("architecture", "toy")
    if arch not in maxoutnet.PRESETS:
        raise ConfigError(f"unknown architecture {arch!r}")
    return {
        "data_dir": Path(raw["data_dir"]),
        "output_dir": Path(raw.get("output_dir", "run")),
        "seed": seed,
        "architecture": arch,
        "sgd": maxoutnet.SgdConfig(**sgd),
        "dasnet": das_cfg,
    }


def _setup_logging(output_dir: Path | None, verbose: bool) -> None:
    root = logging.getLogger("dasnet")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        sidecar = logging.FileHandler(output_dir / "run.log")
        sidecar.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root.addHandler(sidecar)


# --------------------------------------------------------------------------
# Prepared data


def load_prepared(directory) -> tuple[dict, dict[str, dataio.Dataset]]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise IngestionError(f"{meta_path}: file not found (run prepare-data first)")
    meta = json.loads(meta_path.read_text())
    splits = {}
    for name in ("train", "val", "test"):
        if (directory / f"{name}_labels.npy").is_file():
            splits[name] = dataio.load_dataset(directory, name, meta["classes"])
    return meta, splits


def prepare(
    train: dataio.Dataset,
    test: dataio.Dataset,
    out: Path,
    meta: dict,
    val_count: int,
    zca_epsilon: float,
) -> None:
    """GCN, validation hold-out, ZCA fit on train, then write every split."""
    dims = int(np.prod(train.image_shape))
    # Unit-norm images scaled by sqrt(D) give roughly unit per-pixel variance.
    scale = float(np.sqrt(dims))
    train.images = dataio.global_contrast_normalize(train.images, scale=scale)
    test.images = dataio.global_contrast_normalize(test.images, scale=scale)
    splits = {"test": test}
    if val_count:
        train, splits["val"] = dataio.split_validation(train, val_count)
    splits["train"] = train
    zca = dataio.fit_zca(train.images, zca_epsilon)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_zca(zca, out / "zca.bin")
    for name, ds in splits.items():
        ds.images = dataio.apply_zca(zca, ds.images)
        dataio.save_dataset(ds, out, name)
    meta = {**meta, "classes": train.classes, "image_shape": list(train.image_shape),
            "counts": {k: len(v) for k, v in splits.items()}, "zca_epsilon": zca_epsilon}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    rng = RngStream(args.seed)
    if args.toy:
        full = dataio.make_toy_dataset(rng.spawn(1), args.toy_count + args.toy_test, args.toy_classes, args.toy_size)
        train, test = dataio.split_validation(full, args.toy_test)
        test.split = "test"
        meta = {"dataset": "toy", "seed": args.seed}
    else:
        if args.input is None:
            raise ConfigError("--in is required unless --toy is given")
        train = dataio.load_cifar(args.input, args.dataset, "train")
        test = dataio.load_cifar(args.input, args.dataset, "test")
        if args.test_subset:
            test = dataio.subset(test, args.test_subset, rng.spawn(3))
        meta = {"dataset": args.dataset, "seed": args.seed}
    if args.train_subset:
        train = dataio.subset(train, args.train_subset, rng.spawn(2))
    prepare(train, test, out, meta, args.val_count, args.zca_epsilon)
    print(f"prepared {out}")
    return 0


# --------------------------------------------------------------------------
# Training


def cmd_train_base(args) -> int:
    cfg = load_config(args.config)
    out = cfg["output_dir"]
    _setup_logging(out, args.verbose)
    meta, splits = load_prepared(cfg["data_dir"])
    rng = RngStream(cfg["seed"])
    net = maxoutnet.build_preset(cfg["architecture"], tuple(meta["image_shape"]), meta["classes"], rng.spawn(1))
    hist = maxoutnet.train_supervised(net, splits["train"], cfg["sgd"], rng.spawn(2), splits.get("val"))
    maxoutnet.save(net, out / "model.dnet")
    keys = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    trainer.write_csv(out / "train_log.csv", keys, ([h[k] for k in keys] for h in hist))
    print(f"wrote {out / 'model.dnet'}")
    return 0


def _load_model_for(meta: dict, path) -> maxoutnet.MaxoutNet:
    net = maxoutnet.load(path)
    if list(net.input_shape) != list(meta["image_shape"]) or net.classes != meta["classes"]:
        raise DimensionError(
            f"model expects {net.input_shape} images and {net.classes} classes; data has "
            f"{tuple(meta['image_shape'])} and {meta['classes']}"
        )
    return net


def cmd_train_policy(args) -> int:
    cfg = load_config(args.config)
    out = cfg["output_dir"]
    _setup_logging(out, args.verbose)
    meta, splits = load_prepared(cfg["data_dir"])
    net = _load_model_for(meta, args.model)
    das = cfg["dasnet"]
    if args.threads:
        das = dataclasses.replace(das, threads=args.threads)
    params, hist = trainer.train_policy(
        net, splits["train"], splits.get("val"), das, out / "checkpoint", resume=args.resume,
        max_generations=args.generations,
    )
    policy.save(params, out / "policy.dpol")
    trainer.write_history_csv(hist, out / "history.csv")
    print(f"wrote {out / 'policy.dpol'}")
    return 0


# --------------------------------------------------------------------------
# Evaluation


def _eval_inputs(args):
    meta, splits = load_prepared(args.data)
    if args.split not in splits:
        raise IngestionError(f"{args.data}: no '{args.split}' split")
    net = _load_model_for(meta, args.model)
    if getattr(args, "policy", None):
        if not Path(args.policy).is_file():
            raise FileNotFoundError(f"{args.policy}: policy file not found")
        params = policy.load(args.policy)
        params.check(net)
    else:
        params = policy.PolicyParams.zeros(net)
    return net, params, splits


def cmd_eval(args) -> int:
    net, params, splits = _eval_inputs(args)
    data = splits[args.split]
    if args.policy:
        acc = trainer.policy_accuracy(net, params, data, args.steps)
    else:
        acc = maxoutnet.accuracy(net, data)
    if args.out:
        trainer.write_csv(args.out, ["steps", "accuracy"], [(args.steps if args.policy else 0, acc)])
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_dynamics(args) -> int:
    net, params, splits = _eval_inputs(args)
    accs = trainer.dynamics_sweep(net, params, splits[args.split], args.max_steps)
    trainer.write_dynamics_csv(accs, args.out)
    print(" ".join(f"{a:.4f}" for a in accs))
    return 0


def cmd_probe(args) -> int:
    net, params, splits = _eval_inputs(args)
    res = trainer.probe_gates(net, params, splits["train"], splits[args.split], args.steps, args.k)
    trainer.write_probe_csv(res, args.out)
    print(f"knn {res.knn:.4f} logreg {res.logreg:.4f} majority {res.majority:.4f}")
    return 0


def cmd_emphasis(args) -> int:
    net, params, splits = _eval_inputs(args)
    data = splits[args.split]
    if not 0 <= args.image_index < len(data):
        raise ConfigError(f"--image-index must lie in [0, {len(data)})")
    rep = trainer.emphasis_report(net, params, data.images[args.image_index], args.steps)
    trainer.write_emphasis_csv(rep, args.out, args.probs_out)
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dasnet", description="Maxout nets with learned feedback gates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare-data", help="ingest and preprocess a dataset")
    s.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
    s.add_argument("--in", dest="input")
    s.add_argument("--out", required=True)
    s.add_argument("--toy", action="store_true", help="generate the synthetic bar dataset instead")
    s.add_argument("--seed", type=int, default=int(os.environ.get("DASNET_SEED", 0)))
    s.add_argument("--train-subset", type=int, default=0)
    s.add_argument("--test-subset", type=int, default=0)
    s.add_argument("--val-count", type=int, default=5000)
    s.add_argument("--zca-epsilon", type=float, default=1e-2)
    s.add_argument("--toy-count", type=int, default=4000)
    s.add_argument("--toy-test", type=int, default=1000)
    s.add_argument("--toy-classes", type=int, default=4)
    s.add_argument("--toy-size", type=int, default=16)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train-base", help="train the maxout net")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("train-policy", help="evolve the gate policy")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--threads", type=int, default=0, help="worker threads (default: config value)")
    s.add_argument("--generations", type=int, default=None, help="stop this invocation after N generations")
    s.set_defaults(func=cmd_train_policy)

    def eval_parser(name, func, help_):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--model", required=True)
        e.add_argument("--data", required=True, help="prepared data directory")
        e.add_argument("--split", default="test")
        e.set_defaults(func=func)
        return e

    e = eval_parser("eval", cmd_eval, "accuracy of the base net or a policy")
    e.add_argument("--policy")
    e.add_argument("--steps", type=int, default=5)
    e.add_argument("--out")
    e = eval_parser("dynamics", cmd_dynamics, "accuracy per number of passes")
    e.add_argument("--policy", required=True)
    e.add_argument("--max-steps", type=int, default=9)
    e.add_argument("--out", required=True)
    e = eval_parser("probe", cmd_probe, "classify from final gate values")
    e.add_argument("--policy", required=True)
    e.add_argument("--steps", type=int, default=5)
    e.add_argument("--k", type=int, default=15)
    e.add_argument("--out", required=True)
    e = eval_parser("emphasis", cmd_emphasis, "per-map activation changes for one image")
    e.add_argument("--policy", required=True)
    e.add_argument("--image-index", type=int, required=True)
    e.add_argument("--steps", type=int, default=5)
    e.add_argument("--out", required=True)
    e.add_argument("--probs-out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("prepare-data", "eval", "dynamics", "probe", "emphasis"):
        _setup_logging(None, args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (IngestionError, FormatError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
