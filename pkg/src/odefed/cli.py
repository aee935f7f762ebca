"""``odefed`` command line: count, train, federate, partition, eval.

Log verbosity comes from ``ODEFED_LOG_LEVEL`` (default ``WARNING``).
Errors print ``error [<category>]: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .comms.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .comms.sizes import communication_size, reduction_ratio
from .comms.wire import ProtocolError
from .config import ExperimentConfig, dump_config, parse_config, resolve_config
from .data import DataFormatError, PartitionError, chi_square_uniformity, class_histogram, dirichlet_partition
from .federated import ClientSpec, RoundMetrics, client_update, evaluate, run_fedavg
from .models import FAMILIES, ConfigError, ModelConfig, NotReiterableError, build_model, depth_to_iterations
from .paramset import IncongruentParametersError
from .tensor import NonFiniteError

log = logging.getLogger("odefed")

ROUND_COLUMNS = ("round", "selected", "mean_client_loss", "global_loss", "top1", "top5", "bytes")
COUNT_COLUMNS = ("family", "depth", "C", "params", "bytes", "mib")


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fmt(x: float) -> str:
    return repr(float(x))


def _open_out(path: Optional[str]):
    if path is None:
        return sys.stdout
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


# ---------------------------------------------------------------------------
# count


def cmd_count(args) -> None:
    if (args.depth is None) == (args.iters is None):
        raise UsageError("give exactly one of --depth or --iters")
    widths, groups, classes = [64, 128, 256], 8, 10
    if args.config:
        cfg = resolve_config(args.config)
        widths, groups, classes = list(cfg.model.widths), cfg.model.norm_groups, cfg.dataset.classes
    widths = args.widths or widths
    groups = args.groups or groups
    classes = args.classes or classes
    if len(widths) != 3:
        raise UsageError(f"--widths needs three values, got {widths}")
    families = [f.strip() for f in args.family.split(",")]
    for f in families:
        if f not in FAMILIES:
            raise UsageError(f"--family: unknown family {f!r}; choose from {', '.join(FAMILIES)}")
    if args.depth is not None:
        points = [(d, depth_to_iterations(d)[0]) for d in args.depth]
    else:
        if any(c < 1 for c in args.iters):
            raise UsageError("--iters values must be >= 1")
        points = [(6 * c + 6, c) for c in args.iters]

    def config(family, c):
        return ModelConfig(family=family, stem_channels=widths[0], stage_channels=tuple(widths),
                           iterations=c, num_classes=classes, norm_groups=groups)

    out = _open_out(args.out)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(COUNT_COLUMNS)
        for family in families:
            for depth, c in points:
                n, size, mib = communication_size(config(family, c))
                w.writerow([family, depth, c, n, size, f"{mib:.2f}"])
    finally:
        if out is not sys.stdout:
            out.close()

    if args.ratios_out:
        with _open_out(args.ratios_out) as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("family", "depth", "baseline", "reduction_pct"))
            for family in families:
                if family == "resnet":
                    continue
                for depth, c in points:
                    pct = reduction_ratio(config(family, c), config("resnet", c))
                    w.writerow([family, depth, "resnet", f"{pct:.2f}"])


# ---------------------------------------------------------------------------
# train


def _prepare_output(cfg: ExperimentConfig, override: Optional[str]) -> Path:
    out = Path(override or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


def _write_sidecar(ckpt: Path, cfg: ExperimentConfig, model_cfg: ModelConfig) -> None:
    sidecar = {"model": model_cfg.to_dict(), "experiment": cfg.effective()}
    ckpt.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> None:
    cfg = resolve_config(args.config)
    model_cfg = cfg.build_model_config()
    tested = cfg.train.test_iterations or [model_cfg.iterations]
    if not model_cfg.is_ode and any(c != model_cfg.iterations for c in tested):
        raise NotReiterableError("train.test_iterations: a resnet can only be tested at its trained depth")
    train, test, _ = cfg.load_data()
    out = _prepare_output(cfg, args.out)

    params = build_model(model_cfg, cfg.train.seed).params
    spec = ClientSpec(0, None, 1, cfg.train.batch_size, cfg.train.lr)
    everything = range(len(train))
    with open(out / "train.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("epoch", "train_loss"))
        for epoch in range(1, cfg.train.epochs + 1):
            params, loss = client_update(params, spec, everything, train, model_cfg, cfg.train.seed, epoch)
            w.writerow((epoch, _fmt(loss)))
            f.flush()
            log.info("epoch %d: loss %.4f", epoch, loss)

    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, params, model_cfg)
    _write_sidecar(ckpt, cfg, model_cfg)

    with open(out / "compat.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("trained_C", "tested_C", "loss", "top1", "top5"))
        for c in tested:
            loss, top1, top5 = evaluate(params, model_cfg, c if model_cfg.is_ode else None, test)
            w.writerow((model_cfg.iterations, c, _fmt(loss), _fmt(top1), _fmt(top5)))
    print(out / "compat.csv")


# ---------------------------------------------------------------------------
# federate


def _round_row(m: RoundMetrics) -> list:
    return [m.round, " ".join(map(str, m.selected)), _fmt(m.mean_client_loss), _fmt(m.loss), _fmt(m.top1), _fmt(m.top5), m.bytes]


def cmd_federate(args) -> None:
    cfg = resolve_config(args.config)
    model_cfg = cfg.build_model_config()
    fed = cfg.fed_config()
    clients = cfg.client_specs()
    train, test, server = cfg.load_data()
    if fed.algorithm == "feddf" and fed.feddf.steps > 0 and server is None:
        raise ConfigError("dataset: feddf needs server samples (server_per_class or server_holdout)")
    partition = dirichlet_partition(train.labels, fed.clients, cfg.partition.alpha, cfg.partition.seed)
    mode = args.mode or cfg.federated.mode
    out = _prepare_output(cfg, args.out)

    with open(out / "rounds.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        f.flush()

        def on_round(m: RoundMetrics) -> None:
            w.writerow(_round_row(m))
            f.flush()

        if mode == "socket":
            from .comms.transport import run_loopback

            history = run_loopback(fed, model_cfg, clients, partition, train, test, server_data=server,
                                   timeout=cfg.federated.timeout, on_round=on_round)
        else:
            history = run_fedavg(fed, model_cfg, clients, partition, train, test, server_data=server, on_round=on_round)

    ckpt = out / "final.ckpt"
    save_checkpoint(ckpt, history.params, model_cfg)
    _write_sidecar(ckpt, cfg, model_cfg)
    print(out / "rounds.csv")


# ---------------------------------------------------------------------------
# partition


def cmd_partition(args) -> None:
    cfg = resolve_config(args.config) if args.config else parse_config({"dataset": {"classes": 10, "train_per_class": 100}})
    train, _, _ = cfg.load_data()
    alpha = args.alpha if args.alpha is not None else cfg.partition.alpha
    seed = args.seed if args.seed is not None else cfg.partition.seed
    spec = dirichlet_partition(train.labels, args.clients, alpha, seed)
    hist = class_histogram(train.labels, spec, train.class_count)
    chi = chi_square_uniformity(hist)
    out = _open_out(args.out)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["client", "n_k", *[f"class_{c}" for c in range(train.class_count)], "chi_square"])
        for k, row in enumerate(hist):
            w.writerow([k, int(row.sum()), *map(int, row), f"{chi[k]:.6f}"])
    finally:
        if out is not sys.stdout:
            out.close()


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> None:
    ckpt = Path(args.checkpoint)
    sidecar = Path(args.sidecar) if args.sidecar else ckpt.with_suffix(".json")
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt}: no such checkpoint")
    try:
        meta = json.loads(sidecar.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{sidecar}: checkpoint sidecar config not found") from None
    model_cfg = ModelConfig.from_dict(meta["model"])
    exp = resolve_config(args.config) if args.config else parse_config(meta["experiment"], str(sidecar))
    if args.iters is not None and not model_cfg.is_ode:
        raise NotReiterableError("--iters: resnet checkpoints cannot be re-iterated")
    params = load_checkpoint(ckpt, model_cfg)
    _, test, _ = exp.load_data()
    loss, top1, top5 = evaluate(params, model_cfg, args.iters, test)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("C", "loss", "top1", "top5"))
    w.writerow((args.iters or model_cfg.iterations, _fmt(loss), _fmt(top1), _fmt(top5)))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odefed", description="Federated training of weight-shared ODE networks.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("count", help="parameter counts and communication sizes")
    c.add_argument("--family", default="odenet", help="comma-separated: resnet, odenet, dsodenet")
    c.add_argument("--depth", type=_ints, help="nominal depths, e.g. 34,50,101")
    c.add_argument("--iters", type=_ints, help="explicit iteration counts C")
    c.add_argument("--widths", type=_ints, help="three stage widths (default 64,128,256)")
    c.add_argument("--classes", type=int, help="output classes (default 10)")
    c.add_argument("--groups", type=int, help="group-norm groups (default 8)")
    c.add_argument("--config", help="take widths, groups and classes from this YAML file or preset")
    c.add_argument("--out", help="CSV path (default stdout)")
    c.add_argument("--ratios-out", help="also write reduction ratios against resnet")
    c.set_defaults(func=cmd_count)

    t = sub.add_parser("train", help="train one model, then test it at several C")
    t.add_argument("config", help="YAML file or preset name")
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("federate", help="run FedAvg or FedDF")
    f.add_argument("config", help="YAML file or preset name")
    f.add_argument("--out", help="output directory (overrides output.dir)")
    f.add_argument("--mode", choices=("inprocess", "socket"), help="override federated.mode")
    f.set_defaults(func=cmd_federate)

    pa = sub.add_parser("partition", help="per-client class histogram of a Dirichlet split")
    pa.add_argument("--clients", type=int, required=True)
    pa.add_argument("--alpha", type=float)
    pa.add_argument("--seed", type=int)
    pa.add_argument("--config", help="take the dataset (and defaults) from this YAML file or preset")
    pa.add_argument("--out", help="CSV path (default stdout)")
    pa.set_defaults(func=cmd_partition)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--iters", type=int, help="evaluate at this C (ODE families only)")
    e.add_argument("--sidecar", help="JSON config written next to the checkpoint (default: <checkpoint>.json)")
    e.add_argument("--config", help="evaluate on this experiment's test data instead")
    e.set_defaults(func=cmd_eval)
    return p


_CATEGORIES = (
    (UsageError, "usage", 2),
    (ConfigError, "config", 2),
    (NotReiterableError, "config", 2),
    (CheckpointError, "checkpoint", 1),
    (IncongruentParametersError, "shape", 1),
    (DataFormatError, "data", 1),
    (PartitionError, "partition", 1),
    (ProtocolError, "protocol", 1),
    (NonFiniteError, "numeric", 1),
    (FileNotFoundError, "file", 1),
    (OSError, "io", 1),
    (ValueError, "value", 1),
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("ODEFED_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        for kind, category, code in _CATEGORIES:
            if isinstance(exc, kind):
                print(f"error [{category}]: {exc}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
