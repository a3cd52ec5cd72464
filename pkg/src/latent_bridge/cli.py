"""Command-line front end.

Every tunable is a config key; a flat ``key = value`` file given with
``--config`` sets keys and any flag overrides its key.  Each run prints the
resolved configuration and writes it next to its outputs.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from .base_models import (
    BaseVaeConfig,
    ClassifierConfig,
    DecoderOnly,
    IdentityBase,
    build_latent_bank_encoded,
    build_latent_bank_rejection,
    train_base_vae,
    train_data_classifier,
)
from .bridge import TRACE_COLUMNS, BridgeConfig, BridgingVae, train_bridge
from .errors import LatentBridgeError, NonFiniteLoss, NumericalError
from .evaluation import (
    TransferSetup,
    ablation_sweep,
    data_efficiency_sweep,
    fid_in_classifier_space,
    interpolation_sweep,
    reconstruction_accuracy,
    spike_ratio,
    transfer,
    transfer_accuracy,
    write_pgm,
    write_scatter,
    write_table,
)
from .losses import LossWeights
from .store import load_bank, load_model, save_bank, save_model

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none", "all") else int(text)


BRIDGE_KEYS = [
    ("shared_dim", int, 8),
    ("hidden", _int_list, (512, 512, 512, 512)),
    ("beta_kl", float, 0.05),
    ("beta_swd", float, 1.0),
    ("beta_cls", float, 0.05),
    ("sigma", float, 1.0),
    ("num_projections", int, 50),
    ("batch_size", int, 128),
    ("steps", int, 50000),
    ("labels_per_class", _opt_int, None),
    ("lr", float, 1e-3),
    ("conditional", _bool, True),
    ("seed", int, 0),
]

EVAL_KEYS = [("mapping", str, "identity"), ("seed", int, 0)]

KEYS = {
    "gen-synthetic": [
        ("num_classes", int, 2),
        ("samples_per_class", int, 500),
        ("noise", float, 0.05),
        ("rotation_deg", float, 90.0),
        ("offset_x", float, 3.0),
        ("offset_y", float, 0.0),
        ("seed", int, 0),
    ],
    "train-base": [
        ("latent_dim", int, 100),
        ("hidden", _int_list, (1024, 1024, 1024)),
        ("beta", float, 1.0),
        ("x_sigma", float, 0.1),
        ("epochs", int, 100),
        ("batch_size", int, 512),
        ("lr", float, 1e-3),
        ("seed", int, 0),
    ],
    "train-classifier": [
        ("hidden", _int_list, (512, 512, 512, 512)),
        ("epochs", int, 100),
        ("batch_size", int, 256),
        ("lr", float, 1e-3),
        ("holdout_fraction", float, 0.1),
        ("seed", int, 0),
    ],
    "make-bank": [
        ("threshold", float, 0.95),
        ("quota", int, 1300),
        ("seed", int, 0),
    ],
    "train-bridge": BRIDGE_KEYS,
    "transfer": [("sample", _bool, False), ("seed", int, 0)],
    "eval": EVAL_KEYS,
    "interpolate": [("steps", int, 10), ("seed", int, 0)],
    "ablate": BRIDGE_KEYS + [("mapping", str, "identity")],
    "sweep-labels": BRIDGE_KEYS + [("mapping", str, "identity"), ("counts", str, "0,1,10,100,all")],
}


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    table = {k: (conv, default) for k, conv, default in KEYS[command]}
    cfg = {k: default for k, (_, default) in table.items()}
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in table:
                raise UsageError(f"unknown config key {key!r} for {command}")
            try:
                cfg[key] = table[key][0](value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
    for key, (conv, _) in table.items():
        flag = getattr(args, key, None)
        if flag is not None:
            try:
                cfg[key] = conv(flag)
            except ValueError as exc:
                raise UsageError(f"bad value for --{key.replace('_', '-')}: {exc}") from None
    return cfg


def echo_config(command: str, cfg: dict, out_path=None) -> None:
    lines = [f"# {command}"] + [f"{k} = {_fmt(v)}" for k, v in cfg.items()]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_path is not None:
        p = Path(out_path)
        target = p / "config.txt" if p.is_dir() else p.with_name(p.name + ".config.txt")
        target.write_text(text)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return "all" if v is None else str(v)


# ---------------------------------------------------------------------------
# data and model arguments


def load_data(spec: str, num_classes=None) -> ds.LabeledVectorDataset:
    """``path.csv[@domain]`` or ``idx:images:labels[:limit]``."""
    if spec.startswith("idx:"):
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise UsageError(f"bad IDX data spec {spec!r}")
        limit = int(parts[3]) if len(parts) == 4 else None
        return ds.load_idx(parts[1], parts[2], limit)
    path, _, dom = spec.partition("@")
    return ds.read_csv(path, int(dom) if dom else None, num_classes)


def load_domain(spec: str, domain: int, num_classes=None) -> ds.LabeledVectorDataset:
    """Like :func:`load_data`, but a bare CSV path is filtered to ``domain``."""
    if not spec.startswith("idx:") and "@" not in spec:
        spec = f"{spec}@{domain}"
    data = load_data(spec, num_classes)
    data.domain = domain
    return data


def load_base(spec: str, dim=None):
    if spec == "identity":
        if dim is None:
            raise UsageError("identity base needs a known latent width")
        return IdentityBase(dim)
    return load_model(spec)


def _bridge_config(cfg: dict) -> BridgeConfig:
    return BridgeConfig(
        shared_dim=cfg["shared_dim"],
        hidden=cfg["hidden"],
        weights=LossWeights(cfg["beta_kl"], cfg["beta_swd"], cfg["beta_cls"], cfg["sigma"]),
        num_projections=cfg["num_projections"],
        batch_size=cfg["batch_size"],
        total_steps=cfg["steps"],
        labels_per_class=cfg["labels_per_class"],
        lr=cfg["lr"],
        conditional=cfg["conditional"],
        seed=cfg["seed"],
    )


def _mapping(kind: str, num_classes: int):
    if kind == "identity":
        return {i: i for i in range(num_classes)}
    return ds.class_mapping(kind)


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row.step] + [repr(float(v)) for v in row[1:]])


def _setup(args, cfg, bank1, bridge_latent_dim) -> TransferSetup:
    base1 = load_base(args.base1, bridge_latent_dim)
    base2 = load_base(args.base2, bridge_latent_dim)
    classifier2 = load_model(args.classifier2)
    data1 = load_domain(args.data1, 1, bank1.num_classes)
    return TransferSetup(base1, base2, data1, classifier2, _mapping(cfg["mapping"], bank1.num_classes))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> int:
    cfg = resolve("gen-synthetic", args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config("gen-synthetic", cfg, out)
    conf = ds.SyntheticConfig(
        num_classes=cfg["num_classes"],
        samples_per_class=cfg["samples_per_class"],
        noise=cfg["noise"],
        seed=cfg["seed"],
        rotation_deg=cfg["rotation_deg"],
        offset=(cfg["offset_x"], cfg["offset_y"]),
    )
    d1, d2 = ds.gen_synthetic_domains(conf)
    ds.write_csv(out / "synthetic.csv", [d1, d2])
    if d1.dim == 2:
        write_scatter(out / "scatter.csv", {1: (d1.vectors, d1.labels), 2: (d2.vectors, d2.labels)})
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = resolve("train-base", args)
    echo_config("train-base", cfg, args.out)
    data = load_data(args.data)
    conf = BaseVaeConfig(cfg["latent_dim"], cfg["hidden"], cfg["beta"], cfg["x_sigma"], cfg["epochs"],
                         cfg["batch_size"], cfg["lr"], cfg["seed"])
    model, trace = train_base_vae(data, conf)
    save_model(args.out, model, {"seed": cfg["seed"]})
    write_table(str(args.out) + ".trace.csv", ["epoch", "loss"], list(enumerate(trace)))
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = resolve("train-classifier", args)
    echo_config("train-classifier", cfg, args.out)
    data = load_data(args.data)
    conf = ClassifierConfig(cfg["hidden"], cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["holdout_fraction"],
                            cfg["seed"])
    model, history = train_data_classifier(data, conf)
    save_model(args.out, model, {"seed": cfg["seed"]})
    write_table(str(args.out) + ".history.csv", ["epoch", "holdout_accuracy"], history)
    return EXIT_OK


def cmd_make_bank(args) -> int:
    cfg = resolve("make-bank", args)
    echo_config("make-bank", cfg, args.out)
    rng = np.random.default_rng(cfg["seed"])
    if args.mode == "encoded":
        if not args.data:
            raise UsageError("--mode encoded needs --data")
        data = load_data(args.data)
        base = load_base(args.base, data.dim)
        bank = build_latent_bank_encoded(base, data, rng)
    else:
        if not args.classifier:
            raise UsageError("--mode rejection needs --classifier")
        decoder = DecoderOnly(load_model(args.base))
        bank = build_latent_bank_rejection(decoder, load_model(args.classifier), cfg["threshold"], cfg["quota"], rng)
    save_bank(args.out, bank, {"seed": cfg["seed"]})
    return EXIT_OK


def cmd_train_bridge(args) -> int:
    cfg = resolve("train-bridge", args)
    echo_config("train-bridge", cfg, args.out)
    bank1, bank2 = load_bank(args.bank1), load_bank(args.bank2)
    try:
        model, trace = train_bridge(bank1, bank2, _bridge_config(cfg))
    except NonFiniteLoss as exc:
        if exc.trace is not None:
            write_trace(args.metrics, exc.trace)
        if exc.last_good is not None:
            partial = BridgingVae(bank1.dim, cfg["shared_dim"], bank1.num_classes, cfg["hidden"], cfg["conditional"])
            for name, p in partial.named_parameters().items():
                p.data = exc.last_good[name]
            save_model(args.out, partial, {"seed": cfg["seed"], "aborted": "non-finite loss"})
        raise
    save_model(args.out, model, {"seed": cfg["seed"]})
    write_trace(args.metrics, trace)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = resolve("transfer", args)
    echo_config("transfer", cfg, args.out)
    bridge = load_model(args.bridge)
    src = int(getattr(args, "from"))
    tgt = 3 - src
    base_src = load_base(args.base1 if src == 1 else args.base2, bridge.latent_dim)
    base_tgt = load_base(args.base2 if src == 1 else args.base1, bridge.latent_dim)
    data = load_domain(args.input, src)
    rng = cfg["seed"] if cfg["sample"] else None
    out = transfer(base_src, bridge, base_tgt, data.vectors, rng, source=src, target=tgt)
    if str(args.out).endswith(".pgm"):
        write_pgm(args.out, np.clip(out, 0.0, 1.0), cols=min(len(out), 10))
    else:
        result = ds.LabeledVectorDataset(out, data.labels, tgt, data.params, data.num_classes)
        ds.write_csv(args.out, [result])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve("eval", args)
    echo_config("eval", cfg, args.out)
    bridge = load_model(args.bridge)
    base1 = load_base(args.base1, bridge.latent_dim)
    base2 = load_base(args.base2, bridge.latent_dim)
    data = {1: load_domain(args.data1, 1, bridge.num_classes)}
    if args.data2:
        data[2] = load_domain(args.data2, 2, bridge.num_classes)
    clf = {1: load_model(args.classifier1) if args.classifier1 else None,
           2: load_model(args.classifier2) if args.classifier2 else None}
    bases = {1: base1, 2: base2}
    mapping = _mapping(cfg["mapping"], bridge.num_classes)
    inverse = {v: k for k, v in mapping.items()}
    rows = []
    for d, dataset in data.items():
        other = 3 - d
        if args.mode == "reconstruction" and clf[d] is not None:
            rows.append(("reconstruction", f"{d}->{d}", reconstruction_accuracy(bases[d], bridge, dataset, clf[d])))
        elif args.mode == "transfer" and clf[other] is not None:
            m = mapping if d == 1 else inverse
            acc = transfer_accuracy(bases[d], bridge, bases[other], dataset, clf[other], m)
            rows.append(("transfer", f"{d}->{other}", acc))
        elif args.mode == "fid" and clf[other] is not None and other in data:
            moved = transfer(bases[d], bridge, bases[other], dataset.vectors, None, d, other)
            rows.append(("fid", f"{d}->{other}", fid_in_classifier_space(clf[other], moved, data[other].vectors)))
    if not rows:
        raise UsageError(f"--mode {args.mode}: missing classifier or data arguments")
    write_table(args.out, ["metric", "direction", "value"], rows)
    for r in rows:
        print(f"{r[0]} {r[1]}: {r[2]:.6f}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    cfg = resolve("interpolate", args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config("interpolate", cfg, out)
    bridge = load_model(args.bridge)
    src = int(getattr(args, "from"))
    tgt = 3 - src
    base_src = load_base(args.base1 if src == 1 else args.base2, bridge.latent_dim)
    base_tgt = load_base(args.base2 if src == 1 else args.base1, bridge.latent_dim)
    data = load_domain(args.data, src)
    ids = _int_list(args.points)
    if len(ids) < 2:
        raise UsageError("--points needs at least two ids")
    x = data.vectors[list(ids)]
    fixed = base_src.encode(x, None) if hasattr(base_src, "encode") else x
    sweep = interpolation_sweep(base_src, bridge, base_tgt, fixed, cfg["steps"], src, tgt)
    names = ("source", "target", "transfer")
    with open(out / "latents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col"] + [f"z{i}" for i in range(sweep.source.shape[1])])
        for name, row in zip(names, sweep.rows()):
            for c, z in enumerate(row):
                w.writerow([name, c] + [repr(float(v)) for v in z])
    grids = (sweep.source_data, sweep.target_data, sweep.transfer_data)
    if grids[0].shape[1] == 784:
        write_pgm(out / "grid.pgm", np.clip(np.concatenate(grids), 0.0, 1.0), cols=cfg["steps"])
    elif grids[0].shape[1] == 2:
        write_scatter(out / "grid.csv", {src: (grids[0], np.zeros(len(grids[0]))),
                                         tgt: (np.concatenate(grids[1:]), np.r_[np.zeros(cfg["steps"]),
                                                                               np.ones(cfg["steps"])])})
    write_table(out / "locality.csv", ["row", "spike_ratio"],
                [(n, spike_ratio(r)) for n, r in zip(names, sweep.rows())])
    return EXIT_OK


def _sweep_inputs(args, cfg):
    bank1, bank2 = load_bank(args.bank1), load_bank(args.bank2)
    return bank1, bank2, _setup(args, cfg, bank1, bank1.dim)


def cmd_ablate(args) -> int:
    cfg = resolve("ablate", args)
    echo_config("ablate", cfg, args.out)
    bank1, bank2, setup = _sweep_inputs(args, cfg)
    rows = ablation_sweep(bank1, bank2, _bridge_config(cfg), setup)
    write_table(args.out, ["variant", "transfer_accuracy"], rows)
    return EXIT_OK


def cmd_sweep_labels(args) -> int:
    cfg = resolve("sweep-labels", args)
    echo_config("sweep-labels", cfg, args.out)
    counts = [_opt_int(c) for c in cfg["counts"].split(",") if c.strip()]
    bank1, bank2, setup = _sweep_inputs(args, cfg)
    rows = data_efficiency_sweep(bank1, bank2, _bridge_config(cfg), counts, setup)
    write_table(args.out, ["labels_per_class", "transfer_accuracy", "mean_cls_loss"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_keys(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", help="flat key = value file")
    for key, conv, default in KEYS[command]:
        flag = "--" + key.replace("_", "-")
        if key == "conditional":
            p.add_argument("--unconditional", dest=key, action="store_const", const="false",
                           help="replace the domain code by zeros")
            continue
        p.add_argument(flag, dest=key, help=f"(default {_fmt(default)})")


def _add_sweep_args(p) -> None:
    for name in ("--bank1", "--bank2", "--classifier2", "--data1"):
        p.add_argument(name, required=True)
    p.add_argument("--base1", default="identity")
    p.add_argument("--base2", default="identity")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-bridge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write the two-domain synthetic dataset")
    _add_keys(p, "gen-synthetic")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-base", help="train a beta-VAE base model")
    _add_keys(p, "train-base")
    p.add_argument("--data", required=True, help="path.csv[@domain] or idx:images:labels[:limit]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-classifier", help="train a data-space classifier")
    _add_keys(p, "train-classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("make-bank", help="build a latent bank")
    _add_keys(p, "make-bank")
    p.add_argument("--mode", choices=("encoded", "rejection"), required=True)
    p.add_argument("--base", required=True, help="base checkpoint, or 'identity'")
    p.add_argument("--data")
    p.add_argument("--classifier")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_bank)

    p = sub.add_parser("train-bridge", help="train the bridging VAE")
    _add_keys(p, "train-bridge")
    p.add_argument("--bank1", required=True)
    p.add_argument("--bank2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", required=True, help="CSV trace output")
    p.set_defaults(func=cmd_train_bridge)

    p = sub.add_parser("transfer", help="transfer samples between domains")
    _add_keys(p, "transfer")
    p.add_argument("--from", choices=("1", "2"), default="1")
    p.add_argument("--base1", default="identity")
    p.add_argument("--base2", default="identity")
    p.add_argument("--bridge", required=True)
    p.add_argument("--input", required=True, help="CSV or idx:images:labels[:limit]")
    p.add_argument("--out", required=True, help=".csv or .pgm")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="reconstruction / transfer accuracy or Fréchet distance")
    _add_keys(p, "eval")
    p.add_argument("--mode", choices=("reconstruction", "transfer", "fid"), required=True)
    p.add_argument("--base1", default="identity")
    p.add_argument("--base2", default="identity")
    p.add_argument("--bridge", required=True)
    p.add_argument("--classifier1")
    p.add_argument("--classifier2")
    p.add_argument("--data1", required=True)
    p.add_argument("--data2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpolate", help="slerp sweeps in source, target and transferred spaces")
    _add_keys(p, "interpolate")
    p.add_argument("--points", required=True, help="comma-separated sample ids")
    p.add_argument("--from", choices=("1", "2"), default="1")
    p.add_argument("--base1", default="identity")
    p.add_argument("--base2", default="identity")
    p.add_argument("--bridge", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("ablate", help="train and score the four ablation variants")
    _add_keys(p, "ablate")
    _add_sweep_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-labels", help="transfer accuracy against labels per class")
    _add_keys(p, "sweep-labels")
    _add_sweep_args(p)
    p.set_defaults(func=cmd_sweep_labels)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"latent-bridge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"latent-bridge: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LatentBridgeError, OSError, ValueError, KeyError) as exc:
        print(f"latent-bridge: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
