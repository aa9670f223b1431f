"""Train/evaluate runs and the parameter-vs-quality tradeoff table."""

import csv
import io
import json
import time

from . import dsp
from .errors import ConfigError
from .models import ModelConfig, build_model, count_params, shipped_config
from .pipeline import Enhancer, by_split, read_dataset
from .tensor import Rng
from .train import TrainConfig, evaluate_mse, fit

CSV_COLUMNS = ["model", "kind", "params", "mse", "lsd", "segSnrOut"]


def train_enhancer(config, utts, train_cfg, log=None, fit_gv=True, log_timing=False):
    """Build, normalize and train one model on the train/valid splits of ``utts``."""
    model = build_model(config, Rng(train_cfg.seed))
    enh = Enhancer(model)
    train_f = enh.features(by_split(utts, "train"))
    if not train_f:
        raise ConfigError("dataset has no training utterances")
    enh.fit_stats(train_f)
    train = enh.arrays(train_f)
    valid_f = enh.features(by_split(utts, "valid"))
    valid = enh.arrays(valid_f) if valid_f else None
    reports = fit(model, train, valid, train_cfg, log=log, log_timing=log_timing)
    if fit_gv:
        enh.fit_gv(train_f)
    return enh, reports


def heldout_mse(enh, utts):
    """Normalized-LPS MSE on the validation split (training split if there is none)."""
    subset = by_split(utts, "valid") or by_split(utts, "train")
    return evaluate_mse(enh.model, *enh.arrays(enh.features(subset)))


def load_suite(path_or_doc):
    if isinstance(path_or_doc, dict):
        return path_or_doc
    with open(path_or_doc) as f:
        return json.load(f)


def _suite_entries(suite):
    entries = []
    for entry in suite.get("entries", []):
        if "config" in entry:
            doc = entry["config"]
        elif "shipped" in entry:
            doc = shipped_config(entry["shipped"])
        else:
            raise ConfigError(f"suite entry {entry.get('name')!r} needs 'config' or 'shipped'")
        cfg = ModelConfig.from_json(doc)
        entries.append((entry.get("name") or cfg.name or cfg.kind, cfg))
    return entries


def suite_data(suite, data_dir=None):
    if data_dir is not None:
        return read_dataset(data_dir)
    data = suite.get("data")
    if data is None:
        raise ConfigError("suite has no 'data' block and no data directory was given")
    return dsp.synth_dataset(dsp.SynthSpec.from_json(data.get("spec", {})),
                             seed=int(data.get("seed", 0)))


def run_tradeoff(suite, data_dir=None):
    """Train and evaluate every suite entry; returns one result dict per entry."""
    suite = load_suite(suite)
    entries = _suite_entries(suite)
    if not entries:
        return []
    utts = suite_data(suite, data_dir)
    train_cfg = TrainConfig.from_json(suite.get("train", {}))
    test = by_split(utts, "test")
    if not test:
        raise ConfigError("dataset has no test utterances")
    rows = []
    for name, cfg in entries:
        start = time.perf_counter()
        enh, reports = train_enhancer(cfg, utts, train_cfg)
        metrics = enh.evaluate(test)
        rows.append({"model": name, "kind": cfg.kind, "params": count_params(enh.model),
                     "epochs": len(reports), **metrics,
                     "wallMs": round((time.perf_counter() - start) * 1000, 1)})
    return rows


def tradeoff_csv(rows, timing=False):
    """CSV text; floats are printed with fixed precision so reruns match byte for byte."""
    cols = CSV_COLUMNS + (["wallMs"] if timing else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([f"{row[c]:.10g}" if isinstance(row[c], float) else row[c]
                         for c in cols])
    return buf.getvalue()
