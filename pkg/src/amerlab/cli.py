"""Command-line entry point: ``amerlab <command> [options]``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
data or validation errors. Every artifact is written to a temporary file and
renamed into place, so a failed command leaves nothing half-written.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli
from threadpoolctl import threadpool_limits

from amerlab import __version__, config, evaluate, seqmodel, synthgen, trainer, vector_index
from amerlab.errors import AmerError, ConfigError, MissingCorpusIds
from amerlab.fileio import sha256_file, write_text
from amerlab.tensor_core import RngStream

log = logging.getLogger("amerlab")

SPLIT_FILES = {"train": "train.ds", "val": "val.ds", "test": "test.ds"}
CORPUS_FILE = "corpus.bin"
TRANSFORM_FILE = "transforms.bin"
CKPT_FILE = "model.ckpt"
TRAIN_LOG = "train_log.csv"
CONFIG_SNAPSHOT = "config.toml"
EVAL_MODES = {"amer": evaluate.AMER, "single-query": evaluate.SINGLE_QUERY,
              "single-query+mmr": evaluate.SINGLE_QUERY_MMR}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="TOML run configuration")
    p.add_argument("--seed", metavar="U64", help="master seed (overrides config)")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads (default: all cores)")
    p.add_argument("--out", metavar="DIR", default=".", help="artifact directory (default: .)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.lr=3e-4 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="amerlab", description="Multi-target retrieval lab on synthetic vectors.")
    parser.add_argument("--version", action="version", version=f"amerlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate splits, corpus and transforms")
    p.add_argument("--setting", choices=sorted(synthgen.SETTING_NAMES))
    p.add_argument("--transform", choices=sorted(synthgen.KIND_NAMES))

    p = sub.add_parser("build-index", parents=[common], help="validate a corpus as an index")
    p.add_argument("--corpus", metavar="PATH", help=f"corpus file (default: OUT/{CORPUS_FILE})")

    p = sub.add_parser("train", parents=[common], help="train a query encoder")
    p.add_argument("--data", metavar="DIR", help="directory from gen-data (default: OUT)")
    p.add_argument("--mode", choices=[trainer.AMER, trainer.SINGLE_QUERY])
    p.add_argument("--feedback", choices=["scheduled", "predicted"])
    p.add_argument("--steps", type=int, metavar="N", help="total optimizer steps")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", metavar="PATH", help=f"checkpoint (default: OUT/{CKPT_FILE})")
    p.add_argument("--data", metavar="DIR", help="directory from gen-data (default: OUT)")
    p.add_argument("--mode", choices=sorted(EVAL_MODES),
                   help="retrieval mode (default: follows the checkpoint's training mode)")
    p.add_argument("--name", default="report", help="report file stem (default: report)")

    p = sub.add_parser("analyze", parents=[common],
                       help="diversity-binned analysis of a dataset or an external run")
    p.add_argument("--dataset", metavar="PATH", help="dataset split file")
    p.add_argument("--run", metavar="PATH", help="run file: query_id corpus_id rank score")
    p.add_argument("--targets", metavar="PATH", help="targets file: query_id m target_id...")
    p.add_argument("--corpus", metavar="PATH", help="corpus file for target vectors")
    p.add_argument("--metric", choices=list(evaluate.METRICS))
    p.add_argument("--name", default="analysis", help="report file stem (default: analysis)")

    p = sub.add_parser("rerank", parents=[common], help="MMR re-ranking of a run file")
    p.add_argument("--run", metavar="PATH", required=True)
    p.add_argument("--corpus", metavar="PATH", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True, metavar="L")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--output", metavar="PATH", help="re-ranked run file (default: OUT/reranked.run)")
    return parser


# ------------------------------------------------------------------ helpers


def _load_config(args) -> config.RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    for flag, key in (("setting", "data.setting"), ("transform", "data.transform"),
                      ("mode", "train.mode"), ("feedback", "train.feedback"),
                      ("steps", "train.total_steps"), ("metric", "eval.metric")):
        value = getattr(args, flag, None)
        if value is not None and not (flag == "mode" and args.command == "eval"):
            overrides.append(f"{key}={value}")
    return config.load(args.config, overrides)


def _threads(cfg) -> int:
    return cfg.threads if cfg.threads > 0 else (os.cpu_count() or 1)


class Manifest:
    """Config snapshot, seeds, input/output digests, version and duration."""

    def __init__(self, command, cfg: config.RunConfig):
        self.command = command
        self.cfg = cfg
        self.inputs = {}
        self.outputs = {}
        self.start = time.perf_counter()

    def add_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path):
        self.outputs[str(path)] = sha256_file(path)

    def write(self, out_dir):
        doc = {
            "tool": "amerlab",
            "version": __version__,
            "command": self.command,
            "seed": self.cfg.seed,
            "config": self.cfg.to_toml(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_s": round(time.perf_counter() - self.start, 3),
        }
        path = Path(out_dir) / f"{self.command}.manifest.json"
        write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def verify_manifest(path) -> bool:
    """True when every listed output still matches its digest."""
    doc = json.loads(Path(path).read_text())
    return all(Path(p).exists() and sha256_file(p) == h for p, h in doc["outputs"].items())


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file: {path}")
    return path


def _read_splits(data_dir, man=None):
    data_dir = Path(data_dir)
    out, offset = {}, 0
    for name in ("train", "val", "test"):
        path = _require(data_dir / SPLIT_FILES[name])
        if man:
            man.add_input(path)
        out[name] = synthgen.read_dataset(path, first_query_id=offset)
        offset += len(out[name])
    return out


def _read_corpus(path, man=None):
    path = _require(path)
    if man:
        man.add_input(path)
    return synthgen.read_corpus(path)


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    out = Path(args.out)
    man = Manifest("gen-data", cfg)
    dc = cfg.data
    g = synthgen.generate(dc.setting, dc.transform, dc.n_train, dc.n_test, dc.d, dc.m,
                          dc.corpus_size, cfg.seed, normalize_inputs=dc.normalize_inputs)
    for split, name in ((synthgen.Split.TRAIN, "train"), (synthgen.Split.VAL, "val"),
                        (synthgen.Split.TEST, "test")):
        path = out / SPLIT_FILES[name]
        synthgen.write_dataset(path, g.splits[split])
        man.add_output(path)
    synthgen.write_corpus(out / CORPUS_FILE, g.corpus)
    synthgen.write_transforms(out / TRANSFORM_FILE, g.transforms, g.distributions)
    write_text(out / CONFIG_SNAPSHOT, cfg.to_toml())
    for name in (CORPUS_FILE, TRANSFORM_FILE, CONFIG_SNAPSHOT):
        man.add_output(out / name)
    man.write(out)
    print(f"wrote {len(g.splits[synthgen.Split.TRAIN])}/{len(g.splits[synthgen.Split.VAL])}/"
          f"{len(g.splits[synthgen.Split.TEST])} queries and a {len(g.corpus)}-vector corpus to {out}")


def cmd_build_index(args, cfg):
    corpus = _read_corpus(args.corpus or Path(args.out) / CORPUS_FILE)
    index = vector_index.build(corpus)
    print(f"index ok: n={index.n} d={index.d}")


def cmd_train(args, cfg):
    out = Path(args.out)
    data_dir = Path(args.data or out)
    man = Manifest("train", cfg)
    splits = _read_splits(data_dir, man)
    corpus = _read_corpus(data_dir / CORPUS_FILE, man)
    mcfg = cfg.model_config()
    tcfg = cfg.train_config()
    if splits["train"].d != mcfg.d:
        raise ConfigError(f"config d={mcfg.d} but data has d={splits['train'].d}")
    params = seqmodel.init_model(mcfg, RngStream(cfg.seed).derive("init").generator())
    tr = trainer.TrainData.from_split(splits["train"], corpus)
    va = trainer.TrainData.from_split(splits["val"], corpus)

    def progress(step, total, val):
        log.info("step %d/%d val_loss %.4f", step, total, val)

    res = trainer.train(params, mcfg, tr, va, tcfg, progress=progress)
    seqmodel.save_checkpoint(out / CKPT_FILE, mcfg, res.params, cfg.to_toml(),
                             res.moments, res.best_step)
    write_text(out / TRAIN_LOG, res.log_csv())
    man.add_output(out / CKPT_FILE)
    man.add_output(out / TRAIN_LOG)
    man.write(out)
    print(f"best step {res.best_step} val_loss {res.best_val:.4f}; checkpoint {out / CKPT_FILE}")


def _ckpt_mode(text) -> str:
    try:
        return config.from_dict(tomli.loads(text)).train.mode if text else trainer.AMER
    except (tomli.TOMLDecodeError, AmerError):  # foreign snapshot
        return trainer.AMER


def cmd_eval(args, cfg):
    out = Path(args.out)
    data_dir = Path(args.data or out)
    man = Manifest("eval", cfg)
    ckpt = _require(args.checkpoint or out / CKPT_FILE)
    man.add_input(ckpt)
    mcfg, params, info = seqmodel.load_checkpoint(ckpt)
    splits = _read_splits(data_dir, man)
    corpus = _read_corpus(data_dir / CORPUS_FILE, man)
    index = vector_index.build(corpus)
    mode = EVAL_MODES[args.mode] if args.mode else EVAL_MODES[_ckpt_mode(info["config_text"])]
    report, lists = evaluate.evaluate_model(params, mcfg, splits["test"], index, cfg.eval, mode,
                                            val_dataset=splits["val"], n_threads=_threads(cfg),
                                            return_lists=True)
    report.extra["checkpoint_step"] = int(info["step"])
    json_path, csv_path = out / f"{args.name}.json", out / f"{args.name}.csv"
    run_path, tgt_path = out / f"{args.name}.run", out / f"{args.name}.targets"
    report.save(json_path, csv_path)
    vector_index.write_run(run_path, lists)
    evaluate.write_targets(tgt_path, splits["test"].query_ids, splits["test"].target_ids)
    for path in (json_path, csv_path, run_path, tgt_path):
        man.add_output(path)
    man.write(out)
    summary = " ".join(f"MR@{k}={v:.3f}" for k, v in sorted(report.overall.items()))
    print(f"{mode}: {summary}")


def cmd_analyze(args, cfg):
    out = Path(args.out)
    man = Manifest("analyze", cfg)
    ec = cfg.eval
    if args.run:
        if not (args.targets and args.corpus):
            raise UsageError("--run requires --targets and --corpus")
        man.add_input(_require(args.run))
        man.add_input(_require(args.targets))
        corpus = _read_corpus(args.corpus, man)
        report = evaluate.evaluate_run(vector_index.read_run(args.run),
                                       evaluate.read_targets(args.targets), corpus.vectors, ec)
    elif args.dataset:
        path = _require(args.dataset)
        man.add_input(path)
        ds = synthgen.read_dataset(path)
        stat, bins = evaluate.diversity_bins(ds.targets, ec.metric, ec.bins)
        sizes = np.bincount(bins, minlength=ec.bins)
        report = evaluate.EvalReport(
            mode="analysis", config={"metric": ec.metric, "bins": ec.bins}, n_queries=len(ds),
            overall={}, per_bin={}, bin_sizes=[int(s) for s in sizes],
            queries=[{"query_id": i, "statistic": float(s), "bin": int(b) + 1}
                     for i, (s, b) in enumerate(zip(stat, bins))],
            target_diversity=evaluate.mean_pairwise_similarity(ds.targets),
            extra={"bin_upper_edges": [float(stat[bins == b].max()) for b in range(ec.bins)
                                       if sizes[b]]},
        )
    else:
        raise UsageError("analyze needs --dataset or --run/--targets/--corpus")
    json_path = out / f"{args.name}.json"
    report.save(json_path, out / f"{args.name}.csv")
    man.add_output(json_path)
    man.add_output(out / f"{args.name}.csv")
    man.write(out)
    print(f"analyzed {report.n_queries} queries ({ec.metric}, {ec.bins} bins)")


def cmd_rerank(args, cfg):
    if not 0.0 <= args.lam <= 1.0:
        raise UsageError("--lambda must lie in [0, 1]")
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    out = Path(args.out)
    man = Manifest("rerank", cfg)
    man.add_input(_require(args.run))
    corpus = _read_corpus(args.corpus, man)
    run = vector_index.read_run(args.run)
    lists = []
    for qid, rl in run.items():
        if rl.ids.size and (rl.ids.min() < 0 or rl.ids.max() >= len(corpus)):
            raise MissingCorpusIds(f"query {qid}: ids outside the corpus")
        v = corpus.vectors[rl.ids].astype(np.float64)
        # run scores are the query similarities
        order = evaluate.mmr_order(rl.scores, v @ v.T, args.lam, args.k)
        lists.append(vector_index.RankedList(rl.ids[order], rl.scores[order], qid))
    path = Path(args.output or out / "reranked.run")
    vector_index.write_run(path, lists)
    man.add_output(path)
    man.write(out)
    print(f"re-ranked {len(lists)} queries with lambda={args.lam}")


COMMANDS = {"gen-data": cmd_gen_data, "build-index": cmd_build_index, "train": cmd_train,
            "eval": cmd_eval, "analyze": cmd_analyze, "rerank": cmd_rerank}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=_threads(cfg)):
            COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"amerlab {args.command}: {exc}", file=sys.stderr)
        return 1
    except (AmerError, OSError, ValueError) as exc:
        print(f"amerlab {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
