"""QA evaluation: answer normalization, token-level F1, and mode comparison."""

import json
import re
import string
import time
from collections import Counter
from dataclasses import dataclass, field

from .pipeline import Mode, Pipeline

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    s = s.lower().translate(_PUNCT_TABLE)
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def f1(prediction: str, gold_answers) -> float:
    """Token-multiset F1 against the best-matching gold answer."""
    gold_answers = list(gold_answers)
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for gold in gold_answers:
        gold_tokens = normalize_answer(gold).split()
        if not pred_tokens or not gold_tokens:
            score = 1.0 if pred_tokens == gold_tokens else 0.0
        else:
            common = Counter(pred_tokens) & Counter(gold_tokens)
            overlap = sum(common.values())
            if overlap == 0:
                score = 0.0
            else:
                precision = overlap / len(pred_tokens)
                recall = overlap / len(gold_tokens)
                score = 2 * precision * recall / (precision + recall)
        best = max(best, score)
    return best


def exact_match(prediction: str, gold_answers) -> bool:
    normalized = normalize_answer(prediction)
    return any(normalized == normalize_answer(g) for g in gold_answers)


@dataclass(frozen=True)
class QAItem:
    question: str
    gold_answers: tuple
    source_doc_id: int | None = None

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError("gold_answers must be non-empty")


def load_qa_jsonl(path) -> list:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            doc_id = rec.get("doc_id")
            items.append(QAItem(
                question=rec["question"],
                gold_answers=tuple(rec["answers"]),
                source_doc_id=int(doc_id, 16) if doc_id is not None else None,
            ))
    return items


@dataclass
class ModeStats:
    mean_f1: float = 0.0
    exact_match_rate: float = 0.0
    mean_prompt_tokens: float = 0.0
    mean_ms: dict = field(default_factory=dict)
    errors: int = 0


@dataclass
class EvalReport:
    per_mode: dict = field(default_factory=dict)   # mode name -> ModeStats
    rows: list = field(default_factory=list)        # per (item, mode) dicts

    def to_dict(self) -> dict:
        return {
            "per_mode": {name: vars(stats) for name, stats in self.per_mode.items()},
            "rows": self.rows,
        }

    def summary_table(self) -> str:
        lines = [f"{'mode':<22}{'mean_f1':>9}{'em':>7}{'prompt_toks':>13}{'ms/query':>10}"]
        for name, stats in self.per_mode.items():
            total_ms = sum(stats.mean_ms.values())
            lines.append(f"{name:<22}{stats.mean_f1:>9.4f}{stats.exact_match_rate:>7.3f}"
                         f"{stats.mean_prompt_tokens:>13.1f}{total_ms:>10.1f}")
        return "\n".join(lines)


def run_benchmark(items, modes, pipeline: Pipeline, k: int | None = None,
                  oracle_retrieval: bool = False) -> EvalReport:
    """Answer every item under every mode with identical retrieval settings.

    Per-item failures are recorded as rows with an "error" field and score 0;
    they do not abort the run. ``oracle_retrieval`` forces each item's
    source_doc_id as the retrieved set (where present).
    """
    report = EvalReport()
    for mode in modes:
        mode = Mode.parse(mode) if isinstance(mode, str) else mode
        f1_total, em_total, prompt_total = 0.0, 0, 0.0
        ms_total: dict = {}
        errors = 0
        for item in items:
            forced = None
            if oracle_retrieval and item.source_doc_id is not None:
                forced = [item.source_doc_id]
            row = {"mode": mode.value, "question": item.question,
                   "gold": list(item.gold_answers)}
            try:
                result = pipeline.answer(item.question, mode, k=k, forced_doc_ids=forced)
                score = f1(result.answer, item.gold_answers)
                row.update(answer=result.answer, f1=score,
                           exact_match=exact_match(result.answer, item.gold_answers),
                           prompt_tokens=result.prompt_token_count,
                           timing=result.timing,
                           fell_back=result.fell_back_closed_book)
                f1_total += score
                em_total += int(row["exact_match"])
                prompt_total += result.prompt_token_count
                for key, value in result.timing.items():
                    ms_total[key] = ms_total.get(key, 0.0) + value
            except Exception as exc:  # recorded, not fatal
                row.update(error=f"{type(exc).__name__}: {exc}", f1=0.0, exact_match=False)
                errors += 1
            report.rows.append(row)
        n = max(len(items), 1)
        report.per_mode[mode.value] = ModeStats(
            mean_f1=f1_total / n,
            exact_match_rate=em_total / n,
            mean_prompt_tokens=prompt_total / n,
            mean_ms={key: value / n for key, value in ms_total.items()},
            errors=errors,
        )
    return report


def write_report(report: EvalReport, json_path, text_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, ensure_ascii=False)
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(report.summary_table() + "\n")
