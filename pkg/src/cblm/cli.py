"""Command-line entry point: prepare | train | eval | intervene | attribute | inspect.

Every command reads one JSON run config (``--config``), applies ``--seed`` and
``--set key=value`` overrides, writes the resolved config into its output
directory and exits nonzero with a JSON error record on failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .concepts import corrupt_scale
from .corpus import Corpus, load_stats, save_stats
from .errors import CblmError, ConfigError, VariantError
from .evaluate import (EvalReport, ground_truth_concept_correlation, intervention_accuracy,
                       intervention_correlation, mean_concept_shift, perplexity, run_single_concept,
                       write_shift_csv)
from .interpret import debug_report, export_decoder_weights
from .intervene import METHODS, InterventionRequest, _resolve_concept, attribute, intervene_batch
from .model import CbModel, ModelConfig
from .seqio import detokenize, generate_synthetic_corpus, parse_fasta, tokenize
from .train import TrainConfig, train

logger = logging.getLogger("cblm")

COMMANDS = ("prepare", "train", "eval", "intervene", "attribute", "inspect")


def default_config() -> dict:
    return {
        "seed": 0,
        "paths": {"fasta": None, "corpus": None, "stats": None, "checkpoint": None,
                  "ar_checkpoint": None, "sequences": None, "output": "out"},
        "corpus": {"synthetic_n": 20000, "len_min": 20, "len_max": 40, "concentration": 20.0},
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        # concept name -> factor; reproduces a badly scaled concept
        "corrupt_scale": {},
        "intervene": {"concept": "aromaticity", "direction": "+", "target": None, "mask_fraction": 0.05,
                      "iterations": 1, "decode": "greedy", "temperature": 1.0, "method": None,
                      "sequence": None},
        "attribute": {"concept": "aromaticity", "method": "grad_x_input_minus_mask", "sequence": None},
        "eval": {"concepts": ["aromaticity", "gravy"], "n": 200, "fraction": 0.2, "mask_fraction": 0.05,
                 "method": None, "correlation_sequences": 50, "mask_rate": 0.25},
    }


# sections whose values are free-form mappings
_OPEN = {"corrupt_scale", "train.weights"}


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys raise ConfigError."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and path not in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = merge(out[key], value, path + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_set(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = _parse_value(text)
    return merge(cfg, node)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        cfg = merge(cfg, json.loads(Path(args.config).read_text()))
    shortcuts = {"out": "paths.output", "corpus": "paths.corpus", "checkpoint": "paths.checkpoint",
                 "fasta": "paths.fasta", "stats": "paths.stats", "ar_checkpoint": "paths.ar_checkpoint"}
    for attr, key in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg = apply_set(cfg, f"{key}={json.dumps(value)}")
    for assignment in args.set or []:
        cfg = apply_set(cfg, assignment)
    if args.seed is not None:
        cfg["seed"] = args.seed
    # every stochastic component is keyed off the one top-level seed
    cfg["model"]["seed"] = cfg["seed"]
    cfg["train"]["seed"] = cfg["seed"]
    return cfg


def _require(cfg: dict, key: str) -> Path:
    value = cfg["paths"][key]
    if not value:
        raise ConfigError(f"paths.{key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    return path


def _output_dir(cfg: dict) -> Path:
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    (out / "seed.txt").write_text(f"{cfg['seed']}\n")
    return out


def _sequences(cfg: dict, section: str) -> list[str]:
    if cfg[section].get("sequence"):
        return [cfg[section]["sequence"]]
    if cfg["paths"]["sequences"]:
        with open(_require(cfg, "sequences")) as fh:
            return [s for _, s in parse_fasta(fh)]
    raise ConfigError(f"give {section}.sequence or paths.sequences")


def cmd_prepare(cfg: dict) -> dict:
    from .report import plot_concept_distributions

    if cfg["paths"]["fasta"]:
        with open(_require(cfg, "fasta")) as fh:
            records = parse_fasta(fh)
        headers = [h for h, _ in records]
        sequences = [s for _, s in records]
    else:
        c = cfg["corpus"]
        sequences = generate_synthetic_corpus(c["synthetic_n"], (c["len_min"], c["len_max"]),
                                              seed=cfg["seed"], concentration=c["concentration"])
        headers = None
    out = _output_dir(cfg)
    corpus = Corpus.from_sequences(sequences, headers)
    train_set, _ = corpus.split(cfg["train"]["val_fraction"]) if len(corpus) >= 10 else (corpus, corpus)
    stats = train_set.fit_stats()
    corpus.save(out / "corpus.tsv")
    save_stats(stats, out / "stats.json")
    plot_concept_distributions(corpus.raw, corpus.names, out / "concepts.png")
    return {"corpus": str(out / "corpus.tsv"), "stats": str(out / "stats.json"), "sequences": len(corpus)}


def cmd_train(cfg: dict) -> dict:
    from .report import plot_loss_curve

    corpus = Corpus.load(_require(cfg, "corpus"))
    tcfg = TrainConfig(**cfg["train"])
    stats = load_stats(_require(cfg, "stats")) if cfg["paths"]["stats"] else None
    if cfg["corrupt_scale"]:
        if stats is None:
            stats = corpus.split(tcfg.val_fraction)[0].fit_stats()
        for name, factor in sorted(cfg["corrupt_scale"].items()):
            stats = corrupt_scale(stats, name, float(factor))
    out = _output_dir(cfg)
    model = CbModel(ModelConfig(**cfg["model"]))
    model, report = train(model, corpus, tcfg, stats=stats)
    save_checkpoint(model, out / "model.ckpt")
    report.write_jsonl(out / "train_report.jsonl")
    (out / "train_summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    plot_loss_curve(report.records, out / "loss.png")
    return {"checkpoint": str(out / "model.ckpt"), "perplexity": report.perplexity}


def cmd_eval(cfg: dict) -> dict:
    from .report import plot_matrix

    model = load_checkpoint(_require(cfg, "checkpoint"))
    corpus = Corpus.load(_require(cfg, "corpus"))
    _, val = corpus.split(cfg["train"]["val_fraction"]) if len(corpus) >= 10 else (corpus, corpus)
    e = cfg["eval"]
    out = _output_dir(cfg)
    report = EvalReport(concepts=list(val.names), settings={"eval": e, "seed": cfg["seed"]})
    report.perplexity = perplexity(model, val, mask_rate=e["mask_rate"], seed=cfg["seed"])
    report.ground_truth_correlation = ground_truth_concept_correlation(val).tolist()
    if model.variant != "AR":
        method = e["method"] or ("random" if model.variant == "C" else None)
        for name in e["concepts"]:
            i = _resolve_concept(model, name)
            res = run_single_concept(model, val, i, n=e["n"], fraction=e["fraction"],
                                     mask_fraction=e["mask_fraction"], method=method, seed=cfg["seed"])
            pos, neg, mean = intervention_accuracy(res)
            report.accuracy[name] = {"positive": pos, "negative": neg, "mean": mean}
            report.mean_shift[name] = mean_concept_shift(res)
        if e["correlation_sequences"]:
            seqs = val.sequences[: e["correlation_sequences"]]
            mat = intervention_correlation(model, seqs, mask_fraction=e["mask_fraction"], method=method,
                                           seed=cfg["seed"])
            report.intervention_correlation = mat.tolist()
            plot_matrix(mat, val.names, out / "intervention_correlation.png", "intervention correlation")
    plot_matrix(np.asarray(report.ground_truth_correlation), val.names, out / "concept_correlation.png",
                "concept correlation")
    (out / "eval.json").write_text(report.to_json())
    return {"eval": str(out / "eval.json"), "perplexity": report.perplexity}


def cmd_intervene(cfg: dict) -> dict:
    from .report import plot_shift_histogram

    model = load_checkpoint(_require(cfg, "checkpoint"))
    if model.variant not in ("CB", "CC"):
        raise VariantError(f"cannot intervene on a {model.variant} checkpoint; it has no concept predictions")
    ar = load_checkpoint(_require(cfg, "ar_checkpoint")) if cfg["paths"]["ar_checkpoint"] else None
    seqs = _sequences(cfg, "intervene")
    r = cfg["intervene"]
    req = InterventionRequest(concept=r["concept"], direction=r["direction"], target=r["target"],
                              mask_fraction=r["mask_fraction"], iterations=r["iterations"], decode=r["decode"],
                              temperature=r["temperature"], seed=cfg["seed"], method=r["method"])
    out = _output_dir(cfg)
    results = intervene_batch(model, seqs, req, ar)
    with open(out / "interventions.jsonl", "w") as fh:
        for res in results:
            fh.write(res.to_json() + "\n")
    write_shift_csv(results, out / "shift.csv", model.registry.names)
    plot_shift_histogram([res.delta() for res in results], out / "shift.png", f"{r['concept']} {r['direction']}")
    return {"results": str(out / "interventions.jsonl"), "mean_shift": mean_concept_shift(results)}


def cmd_attribute(cfg: dict) -> dict:
    from .report import plot_attribution

    model = load_checkpoint(_require(cfg, "checkpoint"))
    a = cfg["attribute"]
    if a["method"] not in METHODS:
        raise ConfigError(f"attribute.method must be one of {METHODS}")
    seqs = _sequences(cfg, "attribute")
    concept = _resolve_concept(model, a["concept"])
    out = _output_dir(cfg)
    names = model.registry.names
    with open(out / "attribution.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "position", "residue", *names])
        for n, seq in enumerate(seqs):
            ts = tokenize(seq, max_len=model.cfg.max_len)
            mat = attribute(model, ts, a["method"], seed=cfg["seed"])
            residues = ts.residue_positions
            letters = detokenize(ts)
            for p in residues:
                w.writerow([n, p, letters[p - 1], *(f"{v:.8g}" for v in mat.scores[p])])
            if n == 0:
                plot_attribution(letters, mat.scores[residues, concept],
                                 out / "attribution.png", f"{names[concept]} ({a['method']})")
    return {"attribution": str(out / "attribution.csv")}


def cmd_inspect(cfg: dict) -> dict:
    from .report import plot_weight_rows

    model = load_checkpoint(_require(cfg, "checkpoint"))
    if model.variant != "CB":
        raise VariantError(f"{model.variant} checkpoints have no concept decoder weights")
    out = _output_dir(cfg)
    W = export_decoder_weights(model)
    W.to_csv(out / "weights.csv")
    report = debug_report(W, (model.extra or {}).get("concept_val_mse"))
    (out / "debug.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    plot_weight_rows(W.M, W.concepts, W.tokens, out / "weights.png")
    return {"weights": str(out / "weights.csv"), "flagged": report["flagged"]}


HANDLERS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "intervene": cmd_intervene,
            "attribute": cmd_attribute, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cblm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--out", help="output directory (paths.output)")
        if name == "prepare":
            p.add_argument("--fasta")
        if name in ("train", "eval"):
            p.add_argument("--corpus")
        if name == "train":
            p.add_argument("--stats")
        if name in ("eval", "intervene", "attribute", "inspect"):
            p.add_argument("--checkpoint")
        if name == "intervene":
            p.add_argument("--ar-checkpoint", dest="ar_checkpoint")
    return parser


def _error_type(exc: BaseException) -> str:
    if isinstance(exc, CblmError):
        return exc.code
    if isinstance(exc, OSError):
        return "IOError"
    return type(exc).__name__


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        result = HANDLERS[args.command](cfg)
    except (CblmError, OSError, ValueError, KeyError, TypeError) as exc:
        record = {"error": _error_type(exc), "message": str(exc), "command": args.command}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
