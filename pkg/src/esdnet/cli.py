"""``esdnet`` command line: train | eval | prune | cost | inspect.

Exit codes: 0 success, 1 user error (bad config, data, checkpoint, usage),
2 internal error.  Failures print one line to stderr of the form
``esdnet: error kind=<Kind> msg="<message>"``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from esdnet.branches import EnsembleModel, TopologyConfig, build_ensemble, prune_to_main
from esdnet.checkpoint import load_checkpoint, restore_optimizer, restore_rng, save_checkpoint
from esdnet.config import RunConfig, load_config, save_config
from esdnet.cost import compare, cost_report
from esdnet.errors import EsdError, UsageError
from esdnet.experiment import build_model, load_data, output_paths
from esdnet.metrics import emit_metrics
from esdnet.nn.backbones import get_preset
from esdnet.training import evaluate, train

logger = logging.getLogger("esdnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(kind: str, message: str) -> str:
    return f"esdnet: error kind={kind} msg={json.dumps(' '.join(str(message).split()))}"


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    ckpt = load_checkpoint(args.resume) if args.resume else None
    if args.config:
        cfg = load_config(args.config)
    elif ckpt is not None and ckpt.run_config is not None:
        cfg = RunConfig.from_dict(ckpt.run_config)
    else:
        cfg = RunConfig()
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.data_dir is not None:
        cfg.data.path = args.data_dir
    paths = output_paths(cfg, args.out)
    paths["root"].mkdir(parents=True, exist_ok=True)

    train_set, test_set = load_data(cfg)
    start, optimizer = 0, None
    if ckpt is not None:
        if not isinstance(ckpt.model, EnsembleModel):
            raise UsageError("cannot resume training from a pruned checkpoint")
        model, start = ckpt.model, ckpt.epoch
        optimizer, rng = restore_optimizer(ckpt), restore_rng(ckpt)
        if rng is None:
            raise UsageError(f"{args.resume}: checkpoint carries no generator state")
    else:
        rng = np.random.default_rng(cfg.train.seed)
        model = build_model(cfg, train_set, rng)
        paths["metrics"].write_text("")
        emit_metrics([], paths["metrics"])
    save_config(cfg, paths["config"])
    cfg_dict = cfg.to_dict()

    def on_epoch_end(metrics, result):
        emit_metrics([metrics], paths["metrics"])
        save_checkpoint(paths["checkpoint"], result.model, cfg_dict, result.optimizer, result.rng, metrics.epoch)

    result = train(model, train_set, cfg.train, test_set, rng=rng, optimizer=optimizer,
                   start_epoch=start, on_epoch_end=on_epoch_end)
    epoch = result.history[-1].epoch if result.history else start
    save_checkpoint(paths["final"], model, cfg_dict, result.optimizer, result.rng, epoch)
    if result.history:
        last = result.history[-1]
        print(f"epochs={epoch} main_test_acc={last.main_test_acc:.4f} ensemble_test_acc={last.ensemble_test_acc:.4f}")
    else:
        print(f"epochs={epoch} (no training performed)")
    print(f"checkpoint={paths['final']} metrics={paths['metrics']}")
    return 0


# -- eval ------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    elif ckpt.run_config is not None:
        cfg = RunConfig.from_dict(ckpt.run_config)
    else:
        raise UsageError("checkpoint has no embedded run config; pass --config to locate test data")
    if args.data_dir is not None:
        cfg.data.path = args.data_dir
    _, test_set = load_data(cfg)
    res = evaluate(ckpt.model, test_set, args.branch, cfg.train.eval_batch_size)
    confusion = Path(args.confusion) if args.confusion else Path(args.checkpoint).with_suffix(f".confusion-{args.branch}.csv")
    res.confusion.to_csv(confusion)
    print(f"branch={args.branch} accuracy={res.accuracy:.6f} samples={res.confusion.total}")
    print(f"confusion={confusion}")
    return 0


# -- prune -----------------------------------------------------------------------


def cmd_prune(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    before = model.num_parameters()
    if isinstance(model, EnsembleModel) and model.num_branches == 1:
        print("esdnet: warning: model has a single branch; pruning removes nothing", file=sys.stderr)
    pruned = prune_to_main(model)
    after = pruned.num_parameters()
    save_checkpoint(args.out, pruned, ckpt.run_config, epoch=ckpt.epoch)
    print(f"params_before={before} params_after={after} removed={before - after}")
    print(f"pruned={args.out}")
    return 0


# -- cost / inspect --------------------------------------------------------------


def _model_from_args(args):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint).model
    if args.config:
        cfg = load_config(args.config)
        backbone, topo = cfg.backbone, cfg.topology
    else:
        backbone = args.backbone or "resnet20"
        topo = TopologyConfig(args.variant, args.split_points, args.attention)
    spec = get_preset(backbone, args.num_classes)
    if args.image_size:
        spec = dataclasses.replace(spec, image_size=args.image_size)
    # parameters stay zero: structure and counts do not depend on values
    return build_ensemble(spec, topo, None)


def cmd_cost(args) -> int:
    model = _model_from_args(args)
    with_flops = not args.no_flops
    if isinstance(model, EnsembleModel):
        reports = compare(model, with_flops=with_flops)
    else:
        reports = {"pruned": cost_report(model, with_flops=with_flops)}
    for name, rep in reports.items():
        line = f"{name}: params={rep.params}"
        if rep.flops is not None:
            line += f" flops={rep.flops}"
        print(line)
        if name == "ensemble":
            for j, p in enumerate(rep.branch_params):
                extra = f" flops={rep.branch_flops[j]}" if rep.branch_flops else ""
                print(f"  branch[{j}]: params={p}{extra}")
    return 0


def cmd_inspect(args) -> int:
    model = _model_from_args(args)
    desc = model.describe()
    spec = desc.get("backbone", {})
    print(f"kind={desc['kind']} backbone={spec.get('name')} classes={spec.get('num_classes')}")
    if isinstance(model, EnsembleModel):
        topo = model.topology
        print(f"variant={topo.variant} split_points={list(topo.split_points)} branches={model.num_branches}")
    else:
        print("variant=pruned branches=1")
    for j, path in enumerate(model.branch_paths()):
        print(f"path[{j}]: " + " -> ".join(path))
    return 0


# -- wiring ----------------------------------------------------------------------


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _model_source(p):
    p.add_argument("--checkpoint", help="existing checkpoint")
    p.add_argument("--config", help="run config (YAML)")
    p.add_argument("--backbone", help="backbone preset name")
    p.add_argument("--variant", default="v1", choices=["baseline", "v1", "v2"])
    p.add_argument("--split-points", type=_int_list, default=None)
    p.add_argument("--attention", action="append", default=None, help="attention kind, repeatable (se, cam, dropout:0.2, none)")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="esdnet", description="Multi-branch self-distillation ensembles: train, prune, evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train an ensemble from a run config")
    p.add_argument("--config", help="run config (YAML); defaults apply when omitted")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help="CIFAR-10 binary directory (overrides data.path)")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--branch", default="main", choices=["main", "ensemble"])
    p.add_argument("--confusion", help="confusion matrix CSV path")
    p.add_argument("--config", help="run config overriding the embedded one")
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune", help="keep only the main branch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("cost", help="parameter and FLOP counts, ensemble vs pruned")
    _model_source(p)
    p.add_argument("--no-flops", action="store_true", help="skip the FLOP-counting forward pass")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("inspect", help="print branch paths as block-name sequences")
    _model_source(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except EsdError as exc:
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_error_line("IOError", f"{exc.filename or ''}: {exc.strerror or exc}"), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(_error_line("InternalError", f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
