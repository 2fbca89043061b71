"""``pilora`` command line: data generation, both training stages, evaluation and reports.

Every command writes ``manifest.json`` into ``--out`` before anything else.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from pilora import experiment as ex
from pilora.datagen import Corpus, GenSpec, gen_corpus
from pilora.exceptions import ConfigError, DataError, NumericError
from pilora.lora import attach, parse_site_key, read_allocation, write_allocation
from pilora.scoring import SCORERS, read_scores, top_sites
from pilora.shapley import correlation, exact_values, fixed_batches, write_report
from pilora.tokenizer import Tokenizer
from pilora.training import TrainConfig, dump_json, resolve_n_lora, stage1, stage2

log = logging.getLogger("pilora")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
DEFAULT_PRESET = "desk-pretrained"


@dataclass
class RunConfig:
    data: GenSpec = field(default_factory=GenSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone_preset: str = DEFAULT_PRESET

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"data", "train", "backbone_preset"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        preset = doc.get("backbone_preset", DEFAULT_PRESET)
        if preset not in ex.PRESETS:
            raise ConfigError(f"backbone_preset: unknown preset {preset!r}; choose from {ex.PRESETS}")
        try:
            data = GenSpec.from_dict(doc.get("data", {}))
        except TypeError as exc:
            raise ConfigError(f"data: {exc}") from None
        return cls(data, TrainConfig.from_dict(doc.get("train", {})), preset)

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict(), "backbone_preset": self.backbone_preset}


def load_config(args) -> RunConfig:
    doc: dict = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(doc)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        overrides["K"] = args.k
    if getattr(args, "n_lora", None) is not None:
        overrides["n_lora"] = args.n_lora
    if getattr(args, "scorer", None) is not None:
        overrides["scorer"] = args.scorer
    if getattr(args, "single_pass", False):
        overrides["single_pass"] = True
    if overrides:
        cfg.train = cfg.train.replace(**overrides)
    if getattr(args, "backbone_preset", None):
        if args.backbone_preset not in ex.PRESETS:
            raise ConfigError(f"--backbone-preset: unknown preset {args.backbone_preset!r}")
        cfg.backbone_preset = args.backbone_preset
    return cfg


def _hash_inputs(cfg: RunConfig, paths) -> str:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("*")) if p.is_dir() else [p]
        for f in files:
            if f.is_file() and f.name != "manifest.json":
                h.update(f.name.encode())
                h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(args, cfg: RunConfig, inputs=()) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": args.command,
        "config_path": args.config,
        "config": cfg.to_dict(),
        "input_hash": _hash_inputs(cfg, [p for p in inputs if p]),
        "out": str(out),
    }
    dump_json(out / "manifest.json", doc)
    return out


def _need(path, what: str) -> Path:
    if path is None:
        raise DataError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _corpus(args, cfg: RunConfig) -> Corpus:
    return Corpus.load(_need(args.data, "--data directory"))


def _setup(cfg: RunConfig, corpus: Corpus | None = None):
    tok = Tokenizer.for_corpus(cfg.data)
    model = ex.load_backbone(cfg.backbone_preset, len(tok))
    return tok, model


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    out = write_manifest(args, cfg)
    corpus = gen_corpus(cfg.data)
    corpus.save(out)
    dump_json(out / "corpus.json", {"spec": cfg.data.to_dict(), "checksum": corpus.checksum(), "sizes": {k: len(v) for k, v in corpus.splits().items()}})


def cmd_train(args, cfg):
    out = write_manifest(args, cfg, [args.data])
    corpus = _corpus(args, cfg)
    tok, model = _setup(cfg)
    res = ex.run(cfg.train, corpus, model, tok, out, evaluate_test=not args.no_eval)
    print(json.dumps(res.report(), sort_keys=True))


def cmd_score(args, cfg):
    out = write_manifest(args, cfg, [args.data])
    corpus = _corpus(args, cfg)
    tok, model = _setup(cfg)
    s1 = stage1(cfg.train, ex.task_data(corpus, tok, max_len=model.config.max_seq), model)
    s1.ledger.save(out / "scores.json")
    write_allocation(out / "allocation.json", s1.allocation, cfg.train.rank, cfg.train.seed, s1.scores)
    lines = ["step,stage,train_loss,eval_loss"] + [f"{s},1,{t!r},{'' if e is None else repr(e)}" for s, t, e in s1.curve.rows]
    (out / "curves.csv").write_text("\n".join(lines) + "\n")


def cmd_prune(args, cfg):
    scores_path = _need(args.scores, "--scores file")
    out = write_manifest(args, cfg, [scores_path])
    doc = read_scores(scores_path)
    n = resolve_n_lora(cfg.train, len(doc["scores"]))
    write_allocation(out / "allocation.json", top_sites(doc["scores"], n), cfg.train.rank, cfg.train.seed, doc["scores"])


def cmd_retrain(args, cfg):
    alloc_path = _need(args.allocation, "--allocation file")
    out = write_manifest(args, cfg, [args.data, alloc_path])
    corpus = _corpus(args, cfg)
    alloc = read_allocation(alloc_path)
    tok, model = _setup(cfg)
    s2 = stage2(cfg.train, alloc["sites_kept"], ex.task_data(corpus, tok, max_len=model.config.max_seq), model)
    dump_json(out / "best.ckpt.json", {"best_step": s2.best_step, "dev_loss": s2.best_dev_loss, "adapters": s2.best_state})
    lines = ["step,stage,train_loss,eval_loss"] + [f"{s},2,{t!r},{'' if e is None else repr(e)}" for s, t, e in s2.curve.rows]
    (out / "curves.csv").write_text("\n".join(lines) + "\n")
    report = {"dev_loss": s2.best_dev_loss, "final_dev_loss": s2.final_dev_loss, "best_step": s2.best_step, "seed": cfg.train.seed, "scorer": cfg.train.scorer}
    if not args.no_eval:
        report.update(ex.evaluate(model, s2.best_adapters(), tok, corpus.test).as_dict())
    dump_json(out / "report.json", report)


def cmd_evaluate(args, cfg):
    ckpt_path = _need(args.ckpt, "--ckpt file")
    out = write_manifest(args, cfg, [args.data, ckpt_path])
    corpus = _corpus(args, cfg)
    tok, model = _setup(cfg)
    state = json.loads(ckpt_path.read_text())["adapters"]
    adapters = attach(model, [parse_site_key(k) for k in state], rank=cfg.train.rank)
    adapters.load_state_dict(state)
    split = getattr(corpus, args.split)
    report = ex.evaluate(model, adapters, tok, split).as_dict()
    dump_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))


def _compare_one(payload):
    cfg_doc, data_dir, scorer, seed, out = payload
    cfg = RunConfig.from_dict(cfg_doc)
    corpus = Corpus.load(data_dir)
    tok, model = _setup(cfg)
    return ex.run(cfg.train.replace(scorer=scorer, seed=seed), corpus, model, tok, out).report()


def cmd_compare(args, cfg):
    out = write_manifest(args, cfg, [args.data])
    _corpus(args, cfg)
    scorers = [s.strip() for s in args.scorers.split(",") if s.strip()]
    bad = [s for s in scorers if s not in SCORERS]
    if bad:
        raise ConfigError(f"--scorers: unknown scorer(s) {bad}")
    base = cfg.train.seed
    jobs = [(cfg.to_dict(), args.data, sc, base + i, str(out / f"{sc}-seed{base + i}")) for sc in scorers for i in range(args.seeds)]
    workers = max(1, int(os.environ.get("PILORA_THREADS", "1")))
    if workers == 1:
        rows = [_compare_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_compare_one, jobs))
    dump_json(out / "report.json", {"runs": rows})
    (out / "report.csv").write_text(ex.report_table(rows))


def cmd_shapley(args, cfg):
    out = write_manifest(args, cfg, [args.data])
    corpus = _corpus(args, cfg)
    tok, model = _setup(cfg)
    sites = [(l, n) for l in range(model.config.n_layers) for n in args.site_names.split(",")]
    if len(sites) > 16:
        raise ConfigError(f"{len(sites)} modules exceeds the exact-enumeration limit of 16")
    data = ex.task_data(corpus, tok, max_len=model.config.max_seq)
    s1 = stage1(cfg.train.replace(n_lora=len(sites)), data, model, sites=sites)
    batches = fixed_batches(data.dev)
    values = {mode: exact_values(model, s1.adapters, batches, mode) for mode in ("uniform-subset", "shapley")}
    corr = correlation(values["uniform-subset"], s1.scores)
    write_report(out, values, corr)
    s1.ledger.save(out / "scores.json")
    print(json.dumps(corr, sort_keys=True))


def cmd_report(args, cfg):
    out = write_manifest(args, cfg, args.runs)
    rows = []
    for r in args.runs:
        p = Path(r)
        rows.extend(ex.read_report(p / "report.json" if p.is_dir() else p))
    (out / "report.csv").write_text(ex.report_table(rows))
    dump_json(out / "report.json", {"runs": rows})
    sys.stdout.write(ex.report_table(rows))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "prune": cmd_prune,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "shapley": cmd_shapley,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilora", description=__doc__.splitlines()[0])
    parser.add_argument("--print-config", action="store_true", help="print the fully resolved configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def common(p, data=True):
        p.add_argument("--config", help="JSON file with data/train/backbone_preset sections")
        p.add_argument("--out", help="output directory")
        p.add_argument("--print-config", action="store_true", help="print the fully resolved configuration and exit")
        p.add_argument("--seed", type=int)
        p.add_argument("--k", type=int, help="alpha grid size")
        p.add_argument("--n-lora", type=int, help="modules kept after pruning")
        p.add_argument("--scorer", choices=SCORERS)
        p.add_argument("--backbone-preset")
        p.add_argument("--single-pass", action="store_true", help="reuse the scaled pass for the optimizer update")
        if data:
            p.add_argument("--data", help="directory written by gen-data")

    common(sub.add_parser("gen-data", help="write train/dev/test jsonl"), data=False)
    p = sub.add_parser("train", help="stage 1, prune, stage 2, evaluate")
    common(p)
    p.add_argument("--no-eval", action="store_true")
    common(sub.add_parser("score", help="stage 1 only: scores.json and allocation.json"))
    p = sub.add_parser("prune", help="allocation.json from an existing scores.json")
    common(p, data=False)
    p.add_argument("--scores")
    p = sub.add_parser("retrain", help="stage 2 on an allocation")
    common(p)
    p.add_argument("--allocation")
    p.add_argument("--no-eval", action="store_true")
    p = sub.add_parser("evaluate", help="greedy tree generation metrics for a checkpoint")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p = sub.add_parser("compare", help="full runs per scorer and seed")
    common(p)
    p.add_argument("--scorers", default="pi,random")
    p.add_argument("--seeds", type=int, default=5)
    p = sub.add_parser("shapley", help="exact values over a reduced module set")
    common(p)
    p.add_argument("--site-names", default="q,v", help="site names per layer forming the module set")
    p = sub.add_parser("report", help="aggregate report.json files into one CSV table")
    common(p, data=False)
    p.add_argument("runs", nargs="+")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config or args.command is None:
            if args.command is None and not args.print_config:
                parser.print_help()
                return EXIT_CONFIG
            cfg = load_config(args) if args.command else RunConfig()
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        cfg = load_config(args)
        if not args.out:
            raise ConfigError("--out is required")
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
