"""Retrieval and answer-quality metrics plus the dataset harness.

Token metrics use :func:`treerag.text.eval_tokenize`, the same tokenizer that feeds the
keyword index. A metric whose denominator is zero reports 0.0 with an ``undefined``
flag instead of NaN.
"""

from __future__ import annotations

import json
import logging
import statistics
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .errors import JudgeError, TreeRagError
from .llm import TextGenerator, generate_answer
from .text import eval_tokenize

logger = logging.getLogger(__name__)

CRITERIA = ("comprehensiveness", "diversity", "empowerment")
CRITERIA_DESCRIPTIONS = {
    "comprehensiveness": "Which answer covers more of what the question asks, in more detail?",
    "diversity": "Which answer offers a wider range of distinct viewpoints and facts?",
    "empowerment": "Which answer leaves the reader better able to reason about the topic on their own?",
}


@dataclass(frozen=True)
class GroundTruth:
    question: str
    reference_answer: str | None = None
    evidence_strings: tuple[str, ...] = ()
    evidence_entities: tuple[str, ...] = ()

    def __post_init__(self):
        if not (self.reference_answer or self.evidence_strings or self.evidence_entities):
            raise ValueError("ground truth needs an answer, evidence strings, or entities")


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    precision_num: int
    precision_den: int
    recall_num: int
    recall_den: int

    @property
    def precision_undefined(self) -> bool:
        return self.precision_den == 0

    @property
    def recall_undefined(self) -> bool:
        return self.recall_den == 0

    @property
    def undefined(self) -> bool:
        return self.precision_undefined or self.recall_undefined

    @classmethod
    def from_counts(cls, p_num: int, p_den: int, r_num: int, r_den: int) -> "PrecisionRecall":
        return cls(
            p_num / p_den if p_den else 0.0, r_num / r_den if r_den else 0.0, p_num, p_den, r_num, r_den
        )

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "precision_undefined": self.precision_undefined,
            "recall_undefined": self.recall_undefined,
        }


def substring_precision_recall(contexts: Sequence[str], evidence_strings: Sequence[str]) -> PrecisionRecall:
    """Recall: share of evidence strings found (case-insensitively) in the contexts.
    Precision: share of contexts that contain at least one evidence string."""
    evidence = [e.lower() for e in evidence_strings]
    lowered = [c.lower() for c in contexts]
    joined = "\n".join(lowered)
    found = sum(1 for e in evidence if e in joined)
    hits = sum(1 for c in lowered if any(e in c for e in evidence))
    return PrecisionRecall.from_counts(hits, len(lowered), found, len(evidence))


def token_precision_recall(
    contexts: Sequence[str] | str, ground_truth_text: str, multiset: bool = False
) -> PrecisionRecall:
    """Overlap of eval tokens between retrieved contexts and ground truth.

    Set semantics by default (each distinct token counts once); ``multiset=True``
    counts repeated tokens up to their multiplicity on both sides.
    """
    if isinstance(contexts, str):
        contexts = [contexts]
    retrieved = [t for c in contexts for t in eval_tokenize(c)]
    truth = eval_tokenize(ground_truth_text)
    if multiset:
        rc, gt = Counter(retrieved), Counter(truth)
        common = sum((rc & gt).values())
        return PrecisionRecall.from_counts(common, sum(rc.values()), common, sum(gt.values()))
    rc_set, gt_set = set(retrieved), set(truth)
    common = len(rc_set & gt_set)
    return PrecisionRecall.from_counts(common, len(rc_set), common, len(gt_set))


# --- judges -------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    verdict: str  # "YES" | "NO"
    raw: str


class OltpJudge(Protocol):
    def judge(self, question: str, candidate: str, reference: str) -> str:
        """Return a raw response that should normalize to YES or NO."""
        ...


class PairwiseJudge(Protocol):
    def compare(self, question: str, first: str, second: str, criterion: str) -> str:
        """Return a raw response that should normalize to 1, 2 or TIE."""
        ...


_STRIP = string.whitespace + string.punctuation


def normalize_verdict(raw: str) -> str | None:
    token = raw.strip(_STRIP).upper()
    return token if token in ("YES", "NO") else None


def normalize_choice(raw: str) -> str | None:
    token = raw.strip(_STRIP).upper()
    if token.startswith("ANSWER"):
        token = token[len("ANSWER") :].strip(_STRIP)
    return token if token in ("1", "2", "TIE") else None


class ContainmentJudge:
    """Offline OLTP judge: YES iff every reference token occurs in the candidate at
    least as many times as in the reference."""

    def judge(self, question: str, candidate: str, reference: str) -> str:
        ref = Counter(eval_tokenize(reference))
        cand = Counter(eval_tokenize(candidate))
        return "YES" if ref and not (ref - cand) else "NO"


class HeuristicPairwiseJudge:
    """Offline pairwise judge with simple, position-independent proxies.

    comprehensiveness: token count; diversity: distinct tokens; empowerment: distinct
    tokens shared with the question. Larger wins, equal is a tie.
    """

    def compare(self, question: str, first: str, second: str, criterion: str) -> str:
        a, b = self._score(question, first, criterion), self._score(question, second, criterion)
        return "1" if a > b else "2" if b > a else "TIE"

    @staticmethod
    def _score(question: str, answer: str, criterion: str) -> int:
        toks = eval_tokenize(answer)
        if criterion == "comprehensiveness":
            return len(toks)
        if criterion == "diversity":
            return len(set(toks))
        if criterion == "empowerment":
            return len(set(toks) & set(eval_tokenize(question)))
        raise ValueError(f"unknown criterion {criterion!r}")


OLTP_PROMPT = (
    "Question: {question}\nReference answer: {reference}\nCandidate answer: {candidate}\n\n"
    "Is the candidate answer correct according to the reference? Reply with YES or NO only."
)

PAIRWISE_PROMPT = (
    "Question: {question}\n\nAnswer 1:\n{first}\n\nAnswer 2:\n{second}\n\n"
    "Criterion - {criterion}: {description}\n"
    "Which answer is better on this criterion? Reply with 1, 2, or TIE only."
)


class LlmOltpJudge:
    def __init__(self, client: TextGenerator, logit_bias: dict[str, float] | None = None):
        self.client = client
        self.logit_bias = logit_bias

    def judge(self, question: str, candidate: str, reference: str) -> str:
        extra = {"logit_bias": self.logit_bias} if self.logit_bias else {}
        prompt = OLTP_PROMPT.format(question=question, reference=reference, candidate=candidate)
        return self.client.complete(prompt, max_tokens=2, **extra)


class LlmPairwiseJudge:
    def __init__(self, client: TextGenerator):
        self.client = client

    def compare(self, question: str, first: str, second: str, criterion: str) -> str:
        prompt = PAIRWISE_PROMPT.format(
            question=question,
            first=first,
            second=second,
            criterion=criterion,
            description=CRITERIA_DESCRIPTIONS[criterion],
        )
        return self.client.complete(prompt, max_tokens=4)


def _parse_with_retries(call: Callable[[], str], parse: Callable[[str], str | None], retries: int) -> tuple[str, str]:
    raw = ""
    for _ in range(retries + 1):
        raw = call()
        parsed = parse(raw)
        if parsed is not None:
            return parsed, raw
    raise JudgeError(f"judge output {raw!r} could not be parsed after {retries} retries")


def judge_oltp(
    question: str, candidate_answer: str, reference_answer: str, judge: OltpJudge | None = None, retries: int = 3
) -> JudgeVerdict:
    if not reference_answer or not reference_answer.strip():
        raise ValueError("judge_oltp requires a reference answer")
    judge = judge or ContainmentJudge()
    verdict, raw = _parse_with_retries(
        lambda: judge.judge(question, candidate_answer, reference_answer), normalize_verdict, retries
    )
    return JudgeVerdict(verdict, raw)


@dataclass
class WinRateReport:
    rates: dict[str, float]
    repeats: int
    completed_repeats: int
    verdicts: list[dict[str, str]]  # per repeat: criterion -> "A" | "B" | "TIE"
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "rates": self.rates,
            "repeats": self.repeats,
            "completed_repeats": self.completed_repeats,
            "complete": self.complete,
            "error": self.error,
            "verdicts": self.verdicts,
        }


def pairwise_win_rate(
    question: str,
    answer_a: str,
    answer_b: str,
    judge: PairwiseJudge | None = None,
    repeats: int = 6,
    criteria: Sequence[str] = CRITERIA,
    retries: int = 3,
) -> WinRateReport:
    """Mean win rate of ``answer_a`` over ``answer_b`` per criterion.

    Presentation order alternates between repeats (A first on even repeats, B first on
    odd ones). Ties score 0.5. A judge failure stops the run; rates then cover only the
    repeats that finished and ``error`` is set.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    judge = judge or HeuristicPairwiseJudge()
    verdicts: list[dict[str, str]] = []
    error = None
    for r in range(repeats):
        swapped = r % 2 == 1
        first, second = (answer_b, answer_a) if swapped else (answer_a, answer_b)
        row: dict[str, str] = {}
        try:
            for criterion in criteria:
                choice, _ = _parse_with_retries(
                    lambda: judge.compare(question, first, second, criterion), normalize_choice, retries
                )
                if choice == "TIE":
                    row[criterion] = "TIE"
                else:
                    picked_first = choice == "1"
                    row[criterion] = "A" if picked_first != swapped else "B"
        except (JudgeError, TreeRagError) as exc:
            error = f"repeat {r}: {exc}"
            break
        verdicts.append(row)
    points = {"A": 1.0, "TIE": 0.5, "B": 0.0}
    done = len(verdicts)
    rates = {c: (sum(points[v[c]] for v in verdicts) / done if done else 0.0) for c in criteria}
    return WinRateReport(rates, repeats, done, verdicts, error)


# --- dataset harness ----------------------------------------------------------------


def load_dataset(path: str | Path) -> tuple[list[GroundTruth], list[dict]]:
    """Parse a JSONL dataset; malformed lines are returned as skip records, not raised."""
    items: list[GroundTruth] = []
    skipped: list[dict] = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or not isinstance(rec.get("question"), str):
                    raise ValueError("record needs a string 'question'")
                answer = rec.get("answer")
                if answer is not None and not isinstance(answer, str):
                    raise ValueError("'answer' must be a string")
                lists = {}
                for key in ("evidence", "entities"):
                    val = rec.get(key) or []
                    if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
                        raise ValueError(f"'{key}' must be a list of strings")
                    lists[key] = tuple(val)
                items.append(GroundTruth(rec["question"], answer, lists["evidence"], lists["entities"]))
            except (ValueError, json.JSONDecodeError) as exc:
                skipped.append({"line": lineno, "error": str(exc)})
    return items, skipped


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregate: dict[str, dict] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> int:
        return sum(1 for r in self.rows if "error" in r)

    def to_dict(self) -> dict:
        return {
            "questions": len(self.rows),
            "failed": self.failed,
            "skipped": self.skipped,
            "aggregate": self.aggregate,
            "rows": self.rows,
        }


def aggregate_metrics(rows: Sequence[dict]) -> dict[str, dict]:
    """Mean and population standard deviation per metric, over rows that report it."""
    values: dict[str, list[float]] = {}
    for row in rows:
        for name, value in row.get("metrics", {}).items():
            values.setdefault(name, []).append(value)
    return {
        name: {"mean": statistics.fmean(v), "stdev": statistics.pstdev(v), "count": len(v)}
        for name, v in sorted(values.items())
    }


def evaluate_question(
    gt: GroundTruth,
    retrieve: Callable[[str], Sequence[str]],
    generator: TextGenerator | None = None,
    judge: OltpJudge | None = None,
) -> dict:
    contexts = list(retrieve(gt.question))
    row: dict = {"question": gt.question, "n_contexts": len(contexts)}
    metrics: dict[str, float] = {}
    flags: dict[str, bool] = {}
    if gt.evidence_strings:
        sub = substring_precision_recall(contexts, gt.evidence_strings)
        metrics.update(substring_precision=sub.precision, substring_recall=sub.recall)
        flags.update(substring_precision=sub.precision_undefined, substring_recall=sub.recall_undefined)
    truth_text = " ".join(gt.evidence_strings) if gt.evidence_strings else gt.reference_answer
    if truth_text:
        tok = token_precision_recall(contexts, truth_text)
        metrics.update(token_precision=tok.precision, token_recall=tok.recall)
        flags.update(token_precision=tok.precision_undefined, token_recall=tok.recall_undefined)
    if gt.evidence_entities:
        ent = substring_precision_recall(contexts, gt.evidence_entities)
        metrics["entity_recall"] = ent.recall
    if generator is not None and gt.reference_answer:
        answer = generate_answer(generator, gt.question, contexts)
        verdict = judge_oltp(gt.question, answer, gt.reference_answer, judge)
        row.update(answer=answer, verdict=verdict.verdict)
        metrics["judge_accuracy"] = 1.0 if verdict.verdict == "YES" else 0.0
    row["metrics"] = metrics
    row["undefined"] = sorted(k for k, v in flags.items() if v)
    return row


def run_eval(
    dataset: Sequence[GroundTruth],
    retrieve: Callable[[str], Sequence[str]],
    generator: TextGenerator | None = None,
    judge: OltpJudge | None = None,
) -> EvalReport:
    """Evaluate every question; a failing question is recorded and the run continues.

    ``retrieve`` maps a question to its context texts (see
    :func:`treerag.retrieval.retrieve`).
    """
    report = EvalReport()
    for i, gt in enumerate(dataset):
        try:
            row = evaluate_question(gt, retrieve, generator, judge)
        except Exception as exc:  # noqa: BLE001 - one bad question must not end the run
            logger.warning("question %d failed: %s", i, exc)
            row = {"question": gt.question, "error": f"{type(exc).__name__}: {exc}"}
        row["id"] = i
        report.rows.append(row)
    report.aggregate = aggregate_metrics(report.rows)
    return report
