"""Command-line entry point: ``t2vreg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config, shape
mismatch, infeasible rank, unreadable input), 3 numerical failure.
Set ``T2VREG_LOG`` to DEBUG/INFO/WARNING to control log verbosity on stderr.
"""

import argparse
import json
import logging
import os
import sys

from . import bounds, dsp
from .checkpoint import load_enhancer, save_enhancer
from .errors import ConfigError, NumericalError, ShapeError
from .experiment import (heldout_mse, run_tradeoff, tradeoff_csv, train_enhancer)
from .models import (ModelConfig, compress_model, count_params, human_count, output_difference,
                     shipped_config)
from .pipeline import Enhancer, by_split, read_dataset, write_dataset
from .tensor import Rng
from .train import TrainConfig

log = logging.getLogger("t2vreg")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json_arg(value):
    """A JSON document given inline or as a path to a file."""
    text = value.strip()
    if text.startswith("{") or text.startswith("["):
        return json.loads(text)
    with open(value) as f:
        return json.load(f)


def _model_config(value):
    """Config from a JSON file, inline JSON, or the name of a shipped config."""
    if not os.path.exists(value) and not value.strip().startswith("{"):
        try:
            return ModelConfig.from_json(shipped_config(value))
        except FileNotFoundError:
            raise ConfigError(f"no config file or shipped config named {value!r}") from None
    return ModelConfig.from_json(_read_json_arg(value))


def parse_ranks(text, kind):
    """``full``, a single int cap, or a comma list; Tucker entries may be ``RinxRout``."""
    text = text.strip()
    if text in ("", "full", "none"):
        return None
    if text.startswith("["):
        return json.loads(text)
    parts = [p.strip() for p in text.split(",")]
    try:
        if len(parts) == 1 and "x" not in parts[0]:
            return int(parts[0])
        out = []
        for p in parts:
            if "x" in p:
                a, b = p.split("x")
                out.append([int(a), int(b)])
            else:
                out.append(int(p))
        return out
    except ValueError:
        raise ConfigError(f"cannot parse rank spec {text!r}") from None


# --- subcommands ------------------------------------------------------------------

def cmd_synth_data(args):
    spec = dsp.SynthSpec.from_json(_read_json_arg(args.spec) if args.spec else {})
    utts = dsp.synth_dataset(spec, seed=args.seed)
    rows = write_dataset(utts, args.out, spec, args.seed, fmt=args.format)
    print(json.dumps({"pairs": len(rows), "out": args.out}))


def _train_config(args):
    doc = _read_json_arg(args.train_config) if args.train_config else {}
    cfg = TrainConfig.from_json(doc)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.lr is not None:
        cfg.lr = args.lr
    if cfg.epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    return cfg


def cmd_train(args):
    config = _model_config(args.model)
    train_cfg = _train_config(args)
    utts = read_dataset(args.data)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w") as log_file:
        enh, reports = train_enhancer(config, utts, train_cfg, log=log_file,
                                      log_timing=args.timing)
    val_mse = heldout_mse(enh, utts)
    history = [r.to_json(args.timing) for r in reports]
    save_enhancer(args.out, enh, trainConfig=train_cfg.to_json(), seed=train_cfg.seed,
                  epoch=len(reports), history=history, valMse=val_mse)
    summary = {"params": count_params(enh.model), "epochs": len(reports), "valMse": val_mse,
               "checkpoint": args.out, "log": log_path}
    if reports:
        summary["initialTrainMse"] = reports[0].trainMse
        summary["finalTrainMse"] = reports[-1].trainMse
    print(json.dumps(summary))


def _eval_split(utts, split):
    if split == "all":
        return utts
    subset = by_split(utts, split)
    if not subset:
        raise ConfigError(f"dataset has no {split!r} utterances")
    return subset


def cmd_eval(args):
    enh, _ = load_enhancer(args.ckpt)
    utts = _eval_split(read_dataset(args.data), args.split)
    if args.gv and enh.gv is None:
        raise ConfigError("checkpoint holds no GV statistics; cannot apply --gv")
    metrics = enh.evaluate(utts, use_gv=args.gv, identity=args.identity,
                           resynth_dir=args.resynth)
    metrics["split"] = args.split
    metrics["utterances"] = len(utts)
    print(json.dumps(metrics))


def cmd_params(args):
    from .models import build_model
    config = _model_config(args.model)
    model = build_model(config, Rng(0))
    n = count_params(model)
    if args.verbose:
        print(model.summary())
    print(f"{n:,d} ({human_count(n)})")


def cmd_compress(args):
    enh, meta = load_enhancer(args.ckpt)
    target = {"tt": enh.model.config.kind.split("_")[0] + "_tt", "tucker": "cnn_tucker"}[args.kind]
    ranks = parse_ranks(args.ranks, args.kind)
    model, report = compress_model(enh.model, target, ranks=ranks, tt_cores=args.cores,
                                   tt_placement=args.placement)
    diff = output_difference(enh.model, model, n_inputs=100, rng=Rng(args.seed))
    new = Enhancer(model, enh.cfg, enh.in_stats, enh.out_stats, enh.gv)
    meta = dict(meta)
    meta.pop("modelConfig", None)
    meta.pop("featureConfig", None)
    meta["compressedFrom"] = {"checkpoint": os.path.basename(args.ckpt), "kind": args.kind,
                              "ranks": args.ranks}
    save_enhancer(args.out, new, **meta)
    report["outputMaxAbsDiff"] = diff
    for row in report["layers"]:
        print(f"layer {row['layer']:3d}  {row['from']} -> {row['to']}  "
              f"params {row['oldParams']:,d} -> {row['newParams']:,d}  "
              f"error {row['error']:.3e} (bound {row['errorBound']:.3e})")
    print(f"params {report['oldParams']:,d} -> {report['newParams']:,d}")
    print(f"new/old output max abs diff {diff:.3e}")
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2)


def cmd_tradeoff(args):
    if os.path.exists(args.suite) or args.suite.strip().startswith("{"):
        suite = _read_json_arg(args.suite)
    else:
        try:
            suite = shipped_config(args.suite)
        except FileNotFoundError:
            raise ConfigError(f"no suite file or shipped suite named {args.suite!r}") from None
    rows = run_tradeoff(suite, data_dir=args.data)
    text = tradeoff_csv(rows, timing=args.timing)
    with open(args.out, "w") as f:
        f.write(text)
    report_path = args.report or os.path.splitext(args.out)[0] + ".json"
    with open(report_path, "w") as f:
        json.dump(rows, f, indent=2)
    sys.stdout.write(text)


def cmd_bounds(args):
    doc = _read_json_arg(args.params)
    configs = doc if isinstance(doc, list) else doc.get("configs", [doc])
    text = bounds.bounds_table(configs)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    sys.stdout.write(text)


def build_parser():
    p = _Parser(prog="t2vreg", description="Tensor-to-vector regression toolkit for "
                                            "spectral-mapping speech enhancement.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-data", help="synthesize a paired noisy/clean WAV dataset")
    s.add_argument("--spec", help="data spec JSON (file or inline); defaults if omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=["float", "pcm16"], default="float")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--model", required=True, help="model config JSON or shipped config name")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--train-config", help="training config JSON (file or inline)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--log", help="line-JSON training log (default <out>.log.jsonl)")
    s.add_argument("--timing", action="store_true", help="include wall time in the log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    s.add_argument("--gv", action="store_true", help="apply GV equalization first")
    s.add_argument("--resynth", help="directory for enhanced WAVs")
    s.add_argument("--identity", action="store_true",
                   help="debug: bypass the network and copy the noisy features")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="count the parameters of a model config")
    s.add_argument("--model", required=True)
    s.add_argument("--verbose", "-v", action="store_true", help="per-layer breakdown")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("compress", help="factor a trained checkpoint into TT or Tucker form")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--kind", choices=["tt", "tucker"], required=True)
    s.add_argument("--ranks", default="full",
                   help="'full', an int cap, or a comma list (Tucker entries as RinxRout)")
    s.add_argument("--cores", type=int, default=4, help="TT cores per layer")
    s.add_argument("--placement", choices=["both", "top"], default="both")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="seed for the output-difference probe")
    s.add_argument("--report", help="write the compression report as JSON")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("tradeoff", help="train and score every entry of a suite")
    s.add_argument("--suite", required=True,
                   help="suite JSON (inline or path) or a shipped suite name such as desk_suite")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset directory (overrides the suite's data block)")
    s.add_argument("--timing", action="store_true", help="add the wallMs column to the CSV")
    s.add_argument("--report", help="full JSON report (default <out>.json)")
    s.set_defaults(func=cmd_tradeoff)

    s = sub.add_parser("bounds", help="evaluate the approximation-bound expressions")
    s.add_argument("--params", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bounds)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("T2VREG_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ShapeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
