"""End-to-end runs: data, backbone preset, both training stages, evaluation, artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from pilora.backbone import BACKBONE_PRESETS, Backbone, init_backbone
from pilora.datagen import Corpus, Example
from pilora.decoding import LMGenerator
from pilora.exceptions import ConfigError, DataError
from pilora.lora import AdapterSet, site_key, write_allocation
from pilora.mdt import MetricReport, evaluate_trees, grouping_of
from pilora.pretrain import load_shipped
from pilora.prompts import TruncationError, end2end_run, prompt_for, render_response
from pilora.tokenizer import Tokenizer, build_example
from pilora.training import Stage1Result, Stage2Result, TaskData, TrainConfig, dump_json, stage1, stage2

log = logging.getLogger(__name__)

PRESETS = tuple(BACKBONE_PRESETS) + ("desk-pretrained",)
ARTIFACTS = ("scores.json", "allocation.json", "best.ckpt.json", "curves.csv", "report.json")


def load_backbone(preset: str, vocab_size: int) -> Backbone:
    """Backbone for a preset name; ``desk-pretrained`` is the shipped warm-started checkpoint."""
    if preset == "desk-pretrained":
        model = load_shipped()
        if model.config.vocab_size != vocab_size:
            raise ConfigError(f"desk-pretrained expects vocab {model.config.vocab_size}, tokenizer has {vocab_size}")
        return model
    if preset not in BACKBONE_PRESETS:
        raise ConfigError(f"unknown backbone preset {preset!r}; choose from {PRESETS}")
    return init_backbone(replace(BACKBONE_PRESETS[preset], vocab_size=vocab_size))


def pairs_for(example: Example, subtask: str) -> tuple[str, str]:
    tree = example.tree
    if subtask == "cot-gen-3":
        return prompt_for(subtask, example.text), render_response(subtask, tree)
    trip = tree.triplets()
    grouping = grouping_of(tree)
    if subtask == "triplets":
        return prompt_for(subtask, example.text), render_response(subtask, trip)
    if subtask == "grouping":
        return prompt_for(subtask, example.text, triplets=trip), render_response(subtask, grouping)
    if subtask == "assembling":
        return prompt_for(subtask, example.text, grouping=grouping), render_response(subtask, tree)
    raise ConfigError(f"unknown subtask {subtask!r}")


def encode_split(examples: Sequence[Example], tok: Tokenizer, subtasks=("cot-gen-3",), max_len: int = 256):
    out = []
    for ex in examples:
        for sub in subtasks:
            x, y = build_example(tok, *pairs_for(ex, sub))
            if len(x) > max_len:
                raise DataError(f"encoded {sub} example has {len(x)} tokens, limit {max_len}")
            out.append((x, y))
    return out


def task_data(corpus: Corpus, tok: Tokenizer, subtasks=("cot-gen-3",), max_len: int = 256) -> TaskData:
    return TaskData(encode_split(corpus.train, tok, subtasks, max_len), encode_split(corpus.dev, tok, subtasks, max_len))


def evaluate(model: Backbone, adapters: AdapterSet | None, tok: Tokenizer, examples: Sequence[Example]) -> MetricReport:
    """Greedy single-pass tree generation on ``examples``; failures count as invalid."""
    gen = LMGenerator(model, tok, adapters)
    gen.prefetch([prompt_for("cot-gen-3", ex.text) for ex in examples])
    preds = []
    for ex in examples:
        try:
            res = end2end_run(gen, ex.text, truncation="diagnose")
        except TruncationError:
            res = None
        preds.append(res if res else None)
    return evaluate_trees(preds, [ex.tree for ex in examples])


@dataclass
class RunResult:
    config: TrainConfig
    s1: Stage1Result
    s2: Stage2Result
    metrics: MetricReport | None
    extra: dict = field(default_factory=dict)

    @property
    def dev_loss(self) -> float:
        return self.s2.best_dev_loss

    def report(self) -> dict:
        doc = {
            "scorer": self.config.scorer,
            "seed": self.config.seed,
            "K": self.config.K,
            "dev_loss": self.s2.best_dev_loss,
            "final_dev_loss": self.s2.final_dev_loss,
            "best_step": self.s2.best_step,
            "stage1_steps": self.s1.steps,
            "stage2_steps": self.s2.steps,
            "allocation": [site_key(s) for s in self.s1.allocation],
        }
        if self.metrics is not None:
            doc.update(self.metrics.as_dict())
        doc.update(self.extra)
        return doc


def curves_csv(s1: Stage1Result, s2: Stage2Result) -> str:
    """One row per optimizer step across both stages; ``step`` keeps counting into stage 2."""
    lines = ["step,stage,train_loss,eval_loss"]
    fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
    for s, t, e in s1.curve.rows:
        lines.append(f"{s},1,{fmt(t)},{fmt(e)}")
    for s, t, e in s2.curve.rows:
        lines.append(f"{s + s1.steps},2,{fmt(t)},{fmt(e)}")
    return "\n".join(lines) + "\n"


def write_run(out_dir, res: RunResult) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.s1.ledger.save(out / "scores.json")
    write_allocation(out / "allocation.json", res.s1.allocation, res.config.rank, res.config.seed, res.s1.scores)
    dump_json(out / "best.ckpt.json", {"best_step": res.s2.best_step, "dev_loss": res.s2.best_dev_loss, "adapters": res.s2.best_state})
    (out / "curves.csv").write_text(curves_csv(res.s1, res.s2))
    dump_json(out / "report.json", res.report())


def run(
    config: TrainConfig,
    corpus: Corpus,
    model: Backbone,
    tok: Tokenizer,
    out_dir=None,
    evaluate_test: bool = True,
) -> RunResult:
    """Stage 1, prune, stage 2, then greedy evaluation of the best checkpoint on the test split."""
    data = task_data(corpus, tok, max_len=model.config.max_seq)
    s1 = stage1(config, data, model)
    s2 = stage2(config, s1.allocation, data, model)
    metrics = evaluate(model, s2.best_adapters(), tok, corpus.test) if evaluate_test else None
    res = RunResult(config, s1, s2, metrics)
    if out_dir is not None:
        write_run(out_dir, res)
    return res


def compare_scorers(
    config: TrainConfig,
    corpus: Corpus,
    model: Backbone,
    tok: Tokenizer,
    scorers: Sequence[str] = ("pi", "random"),
    seeds: Sequence[int] = (0,),
    out_dir=None,
    evaluate_test: bool = True,
) -> list[dict]:
    """One full run per ``(scorer, seed)``; rows in that order."""
    rows = []
    for scorer in scorers:
        for seed in seeds:
            cfg = config.replace(scorer=scorer, seed=seed)
            sub = None if out_dir is None else Path(out_dir) / f"{scorer}-seed{seed}"
            log.info("compare: scorer=%s seed=%d", scorer, seed)
            rows.append(run(cfg, corpus, model, tok, sub, evaluate_test).report())
    if out_dir is not None:
        dump_json(Path(out_dir) / "report.json", {"runs": rows})
    return rows


REPORT_COLUMNS = ("scorer", "seed", "dev_loss", "Tree_Acc", "DP_F1", "Tree_LR", "Prec", "Rec", "F1", "NG_LR")


def report_table(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in REPORT_COLUMNS})
    return buf.getvalue()


def read_report(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"report not found: {p}")
    doc = json.loads(p.read_text())
    return doc["runs"] if "runs" in doc else [doc]
