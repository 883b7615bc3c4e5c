"""Dataset-quality statistics: session counts, turn averages, context-dependent
query density and within-session query overlap (Self-Rouge)."""

from __future__ import annotations

import dataclasses
import enum
import itertools
import json
import math
import re
import string
from collections import Counter
from typing import Iterable, Mapping, Sequence

from .conversation import Conversation, Role
from .errors import MissingLabels

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence, O(len(a)*len(b)) time, O(len(b)) memory."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


@dataclasses.dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float
    empty: bool = False  # both inputs tokenized to nothing

    @classmethod
    def from_counts(cls, overlap: int, n_ref: int, n_cand: int) -> RougeScore:
        p = overlap / n_cand if n_cand else 0.0
        r = overlap / n_ref if n_ref else 0.0
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        return cls(p, r, f, empty=(n_ref == 0 and n_cand == 0))


def rouge_l_tokens(ref: Sequence[str], cand: Sequence[str]) -> RougeScore:
    return RougeScore.from_counts(lcs_length(ref, cand), len(ref), len(cand))


def rouge_l(a: str, b: str) -> RougeScore:
    """ROUGE-L with ``a`` as reference: recall = LCS/|a|, precision = LCS/|b|."""
    return rouge_l_tokens(tokenize(a), tokenize(b))


def rouge_n(a: str, b: str, n: int = 1) -> RougeScore:
    ta, tb = tokenize(a), tokenize(b)
    grams_a = Counter(zip(*(ta[i:] for i in range(n))))
    grams_b = Counter(zip(*(tb[i:] for i in range(n))))
    overlap = sum((grams_a & grams_b).values())
    return RougeScore.from_counts(overlap, sum(grams_a.values()), sum(grams_b.values()))


class RougeVariant(str, enum.Enum):
    ROUGE_L = "rougeL"
    ROUGE_1 = "rouge1"
    ROUGE_2 = "rouge2"


class Aggregation(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"


def _score(variant: RougeVariant, a: str, b: str) -> float:
    if variant is RougeVariant.ROUGE_L:
        return rouge_l(a, b).f1
    return rouge_n(a, b, 1 if variant is RougeVariant.ROUGE_1 else 2).f1


def self_rouge(
    session: Conversation | Sequence[str],
    variant: RougeVariant | str = RougeVariant.ROUGE_L,
    aggregation: Aggregation | str = Aggregation.MEAN,
) -> float | None:
    """Pairwise query overlap within a session, scaled to [0, 100].

    Returns ``None`` when the session has fewer than two user queries.
    """
    variant, aggregation = RougeVariant(variant), Aggregation(aggregation)
    if isinstance(session, Conversation):
        queries = [t.content for t in session.user_turns]
    else:
        queries = list(session)
    if len(queries) < 2:
        return None
    scores = [_score(variant, a, b) for a, b in itertools.combinations(queries, 2)]
    agg = max(scores) if aggregation is Aggregation.MAX else math.fsum(scores) / len(scores)
    return 100.0 * agg


@dataclasses.dataclass(frozen=True)
class DatasetStats:
    n_sessions: int
    avg_pairs: float
    avg_utterances: float
    avg_ctx_queries: float
    avg_self_rouge: float | None
    n_self_rouge_sessions: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def table_row(self, name: str = "dataset") -> str:
        """One row in the layout ``name | #Session | Avg. #Turns | Avg. #Ctx. Queries | Avg. Self-Rouge``."""
        rouge = "NA" if self.avg_self_rouge is None else f"{self.avg_self_rouge:.1f}"
        return " | ".join([name, format_count(self.n_sessions), f"{self.avg_pairs:.2f}", f"{self.avg_ctx_queries:.2f}", rouge])


TABLE_HEADER = "Dataset | #Session | Avg. #Turns | Avg. #Ctx. Queries | Avg. Self-Rouge"


def format_count(n: int) -> str:
    """Compact count as in dataset tables: 40000 -> '40K', 1500000 -> '1.5M'."""
    for div, suffix in ((1_000_000, "M"), (1_000, "K")):
        if n >= div:
            v = n / div
            return f"{v:.0f}{suffix}" if v == int(v) else f"{v:.1f}{suffix}"
    return str(n)


def compute_stats(
    dataset: Iterable[Conversation],
    ctx_labels: Iterable[Mapping] | None = None,
    *,
    heuristic_fallback: bool = False,
    variant: RougeVariant | str = RougeVariant.ROUGE_L,
    aggregation: Aggregation | str = Aggregation.MEAN,
) -> DatasetStats:
    """Aggregate statistics for a dataset.

    ``ctx_labels`` are label records (``session_id``, ``turn_index``,
    ``dependent``); a session with no label records is an error unless
    ``heuristic_fallback`` is set, in which case its user turns are labelled
    with the pronoun heuristic.
    """
    from .curation import detect_ctx_pronoun

    dependent: dict[str, set[int]] = {}
    labelled: set[str] = set()
    for rec in ctx_labels or ():
        sid = rec["session_id"]
        labelled.add(sid)
        if rec["dependent"]:
            dependent.setdefault(sid, set()).add(int(rec["turn_index"]))

    sessions = sorted(dataset, key=lambda c: c.session_id)
    if not sessions:
        return DatasetStats(0, 0.0, 0.0, 0.0, None, 0)
    pairs, utterances, ctx, rouges = [], [], [], []
    for conv in sessions:
        pairs.append(conv.n_pairs)
        utterances.append(len(conv.turns))
        if conv.session_id in labelled:
            user_idx = {t.index for t in conv.turns if t.role is Role.USER}
            ctx.append(len(dependent.get(conv.session_id, set()) & user_idx))
        elif heuristic_fallback:
            ctx.append(sum(1 for t in conv.user_turns[1:] if detect_ctx_pronoun(t.content)))
        else:
            raise MissingLabels(f"no context labels for session {conv.session_id!r}")
        sr = self_rouge(conv, variant, aggregation)
        if sr is not None:
            rouges.append(sr)
    n = len(sessions)
    return DatasetStats(
        n_sessions=n,
        avg_pairs=math.fsum(pairs) / n,
        avg_utterances=math.fsum(utterances) / n,
        avg_ctx_queries=math.fsum(ctx) / n,
        avg_self_rouge=(math.fsum(rouges) / len(rouges)) if rouges else None,
        n_self_rouge_sessions=len(rouges),
    )


def stats_json(stats: DatasetStats) -> str:
    return json.dumps(stats.to_dict(), indent=2)
