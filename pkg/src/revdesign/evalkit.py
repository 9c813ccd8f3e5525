"""Decode-output parsing, accuracy / zero-fill MSE, and report rendering.

Accuracy is |predicted op names ∩ ground-truth names| / |ground truth|;
over-prediction is not penalized. The parameter error is the mean squared
error over ground-truth ops where operations missing from the prediction
count as value 0. Reports carry the six-column with/without-command layout
plus command-length buckets.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .dataset import Manifest, TripletRecord
from .imgedit import EditSpec, OP_NAMES, stable_hash
from .prompting import TokenVocab, assemble_prompt, select_and_render

_VALUE = r"-?[0-9]\.[0-9]{2}"
_FULL_RE = re.compile(rf"\b({'|'.join(OP_NAMES)}) with value ({_VALUE})(?![0-9])")
_NAME_RE = re.compile(rf"\b({'|'.join(OP_NAMES)})\b")
_STRAY_VALUE_RE = re.compile(rf"(?<![0-9.])({_VALUE})(?![0-9])")


@dataclass(frozen=True)
class ParsedPrediction:
    """(name, value) pairs extracted from decoded text.

    Duplicate names keep their first occurrence; malformed is set when the
    text contains an op name without a well-formed value, or a value with
    no preceding op name.
    """

    ops: tuple[tuple[str, float], ...]
    malformed: bool
    raw: str

    @property
    def names(self) -> set[str]:
        return {n for n, _ in self.ops}

    def value(self, name: str, default: float = 0.0) -> float:
        for n, v in self.ops:
            if n == name:
                return v
        return default


def parse_output(text: str) -> ParsedPrediction:
    """Regex scan for `<op> with value <v>` clauses; total on arbitrary text."""
    full = list(_FULL_RE.finditer(text))
    name_spans = {m.span(1) for m in full}
    value_spans = {m.span(2) for m in full}
    malformed = any(m.span(1) not in name_spans for m in _NAME_RE.finditer(text))
    malformed = malformed or any(
        m.span(1) not in value_spans for m in _STRAY_VALUE_RE.finditer(text)
    )
    ops: list[tuple[str, float]] = []
    seen: set[str] = set()
    for m in full:
        if m.group(1) not in seen:
            seen.add(m.group(1))
            ops.append((m.group(1), float(m.group(2))))
    return ParsedPrediction(tuple(ops), malformed, text)


def accuracy(pred: ParsedPrediction, gt: EditSpec) -> float:
    """Intersection of predicted names with ground truth over |ground truth|."""
    return len(pred.names & set(gt.names)) / len(gt.ops)


def param_mse(pred: ParsedPrediction, gt: EditSpec) -> float:
    """Zero-fill MSE: ops absent from the prediction score as value 0;
    spurious predicted ops contribute nothing."""
    errs = [(pred.value(op.name) - op.value) ** 2 for op in gt.ops]
    return float(np.mean(errs))


def spurious_count(pred: ParsedPrediction, gt: EditSpec) -> int:
    """Diagnostic only: predicted ops that are not in the ground truth."""
    return len(pred.names - set(gt.names))


# ------------------------------------------------------------------ report ---

PARTITIONS = (
    "all",
    "with_command",
    "without_command",
    "cmd_len_0",
    "cmd_len_1_4",
    "cmd_len_5_8",
    "cmd_len_9plus",
)

_COLUMNS = (
    ("Accuracy (Average)↑", "all", "accuracy"),
    ("MSE (Average)↓", "all", "mse"),
    ("Accuracy (With Command)↑", "with_command", "accuracy"),
    ("MSE (With Command)↓", "with_command", "mse"),
    ("Accuracy (Without Command)↑", "without_command", "accuracy"),
    ("MSE (Without Command)↓", "without_command", "mse"),
)


@dataclass
class PartitionStats:
    n: int = 0
    accuracy_sum: float = 0.0
    mse_sum: float = 0.0
    malformed: int = 0
    spurious_sum: int = 0

    def add(self, acc: float, mse: float, malformed: bool, spurious: int) -> None:
        self.n += 1
        self.accuracy_sum += acc
        self.mse_sum += mse
        self.malformed += int(malformed)
        self.spurious_sum += spurious

    @property
    def accuracy(self) -> float:
        return self.accuracy_sum / self.n if self.n else 0.0

    @property
    def mse(self) -> float:
        return self.mse_sum / self.n if self.n else 0.0

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "mse": self.mse,
            "malformed": self.malformed,
            "spurious_mean": self.spurious_sum / self.n if self.n else 0.0,
        }


@dataclass
class MetricsReport:
    partitions: dict[str, PartitionStats] = field(
        default_factory=lambda: {p: PartitionStats() for p in PARTITIONS}
    )
    metadata: dict = field(default_factory=dict)

    @property
    def malformed_rate(self) -> float:
        stats = self.partitions["all"]
        return stats.malformed / stats.n if stats.n else 0.0

    def as_dict(self) -> dict:
        return {
            "partitions": {k: v.as_dict() for k, v in self.partitions.items()},
            "metadata": self.metadata,
        }


def _bucket(n_words: int) -> str:
    if n_words == 0:
        return "cmd_len_0"
    if n_words <= 4:
        return "cmd_len_1_4"
    if n_words <= 8:
        return "cmd_len_5_8"
    return "cmd_len_9plus"


def evaluate(params: dict, config: mdl.ModelConfig, vocab: TokenVocab,
             manifest: Manifest, records: list[TripletRecord],
             eval_seed: int = 0, max_new: int = 64, break_style: bool = False,
             chunk: int = 96) -> tuple[MetricsReport, list[dict]]:
    """Score a checkpoint on `records`.

    Every record is evaluated twice, once with and once without its command
    (paired scheme: same records in both partitions, deterministic template
    choice seeded by the record id). Decoding is greedy, batched in chunks,
    and merged back in record order.
    """
    jobs = []
    for rec in sorted(records, key=lambda r: r.id):
        for use_cmd in (True, False):
            rng = np.random.Generator(
                np.random.PCG64(stable_hash(eval_seed, rec.id, int(use_cmd)))
            )
            text, tpl_id = select_and_render(rec, use_cmd, rng, break_style=break_style)
            sample = assemble_prompt(
                vocab, vocab.tokenize(text), config.k_img,
                uses_command=use_cmd, template_id=tpl_id,
            )
            jobs.append((rec, use_cmd, sample))

    report = MetricsReport()
    report.metadata = {
        "eval_seed": eval_seed,
        "n_records": len(records),
        "scheme": "paired: each record scored once with and once without its command",
        "break_style": break_style,
    }
    rows: list[dict] = []
    for start in range(0, len(jobs), chunk):
        part = jobs[start : start + chunk]
        samples = [s for _, _, s in part]
        images = np.stack([np.stack(manifest.load_images(rec)) for rec, _, _ in part])
        decoded, truncated = mdl.greedy_decode_batch(
            params, config, vocab, samples, images, max_new=max_new
        )
        for (rec, use_cmd, sample), ids, trunc in zip(part, decoded, truncated):
            text = vocab.detokenize(ids)
            pred = parse_output(text)
            acc = accuracy(pred, rec.spec)
            mse = param_mse(pred, rec.spec)
            spur = spurious_count(pred, rec.spec)
            n_words = len(rec.command.split()) if use_cmd else 0
            for key in ("all", "with_command" if use_cmd else "without_command", _bucket(n_words)):
                report.partitions[key].add(acc, mse, pred.malformed, spur)
            rows.append(
                {
                    "record_id": rec.id,
                    "template_id": sample.template_id,
                    "with_command": use_cmd,
                    "decoded": text,
                    "parsed_ops": [[n, v] for n, v in pred.ops],
                    "malformed": pred.malformed,
                    "truncated": trunc,
                    "accuracy": acc,
                    "mse": mse,
                }
            )
    return report, rows


def _format_cell(kind: str, value: float) -> str:
    return f"{100.0 * value:.2f}" if kind == "accuracy" else f"{value:.4f}"


def render_table(rows: list[tuple[str, dict]], mark_best: bool = False) -> str:
    """Six-column table; with mark_best, exactly one `*` per column (the
    first-best on ties)."""
    headers = ["Experiments/Metrics"] + [c[0] for c in _COLUMNS]
    body = []
    values = np.zeros((len(rows), len(_COLUMNS)))
    for i, (label, rep) in enumerate(rows):
        for j, (_, part, kind) in enumerate(_COLUMNS):
            values[i, j] = rep["partitions"][part][kind]
    best = np.zeros(values.shape, dtype=bool)
    if mark_best and len(rows):
        for j, (_, _, kind) in enumerate(_COLUMNS):
            pick = int(np.argmax(values[:, j]) if kind == "accuracy" else np.argmin(values[:, j]))
            best[pick, j] = True
    for i, (label, rep) in enumerate(rows):
        cells = [label]
        for j, (_, part, kind) in enumerate(_COLUMNS):
            cell = _format_cell(kind, values[i, j])
            cells.append("*" + cell if best[i, j] else cell)
        body.append(cells)
    widths = [max(len(r[c]) for r in [headers] + body) for c in range(len(headers))]
    lines = []
    for r in [headers] + body:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        if r is headers:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def render_report(report: MetricsReport, rows: list[dict], out_dir: str,
                  label: str = "run") -> str:
    """Write report.txt (Table-1 shape), report.json, predictions.jsonl."""
    os.makedirs(out_dir, exist_ok=True)
    table = render_table([(label, report.as_dict())])
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "predictions.jsonl"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return table


def render_compare(runs: list[tuple[str, dict]]) -> str:
    """Cross-run comparison matrix with best-per-column marking."""
    return render_table(runs, mark_best=True)
