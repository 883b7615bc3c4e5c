"""Trainer-ready SFT and DPO files with length budgeting.

Lengths are measured on the rendered text in characters or approximate
tokens (``ceil(utf8_bytes / 4)``); trainers re-truncate with their own
tokenizer. The first line of every export is a ``{"meta": ...}`` header
recording the export config and inert trainer hyperparameters.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

from .capo import PreferencePair, read_pairs
from .conversation import (
    BRACKET_TEMPLATE,
    Conversation,
    Direction,
    RenderTemplate,
    Role,
    build_mask,
    get_template,
    render_transcript,
    require_valid,
)

SFT_TRAINER_DEFAULTS = {
    "epochs": 3,
    "optimizer": "AdamW",
    "learning_rate": 3e-5,
    "lr_schedule": "cosine",
    "warmup_epochs": 0.1,
    "batch_size": 32,
    "gradient_accumulation_steps": 8,
    "max_length_tokens": 4096,
}
DPO_TRAINER_DEFAULTS = {
    "algorithm": "DPO",
    "batch_size": 32,
    "learning_rate": 1e-5,
    "max_length_tokens": 4096,
}


class Unit(str, enum.Enum):
    CHARACTERS = "characters"
    APPROX_TOKENS = "approx_tokens"


def approx_token_count(text: str) -> int:
    """``ceil(len(utf8_bytes) / 4)``."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def measure(text: str, unit: Unit | str) -> int:
    return len(text) if Unit(unit) is Unit.CHARACTERS else approx_token_count(text)


@dataclasses.dataclass(frozen=True)
class ExportConfig:
    direction: Direction = Direction.CHAT
    max_units: int = 4096
    unit: Unit = Unit.APPROX_TOKENS
    template: RenderTemplate = BRACKET_TEMPLATE
    trainer_defaults: Mapping[str, Any] = dataclasses.field(default_factory=lambda: dict(SFT_TRAINER_DEFAULTS))

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "unit", Unit(self.unit))
        object.__setattr__(self, "template", get_template(self.template))
        if self.max_units <= 0:
            raise ValueError("max_units must be > 0")

    def header(self, kind: str) -> dict[str, Any]:
        return {
            "meta": {
                "kind": kind,
                "direction": self.direction.value,
                "max_units": self.max_units,
                "unit": self.unit.value,
                "template": self.template.to_dict(),
                "trainer_defaults": dict(self.trainer_defaults),
            }
        }


@dataclasses.dataclass(frozen=True)
class ExportSummary:
    """Disjoint outcome counts: every input lands in exactly one."""

    written: int = 0  # written whole
    truncated: int = 0  # written after dropping pairs
    skipped: int = 0

    @property
    def records(self) -> int:
        return self.written + self.truncated


def fit_session(conv: Conversation, cfg: ExportConfig) -> Conversation | None:
    """Longest whole-pair prefix of ``conv`` whose rendering fits the budget."""
    for n_pairs in range(conv.n_pairs, 0, -1):
        candidate = conv.prefix(2 * n_pairs)
        if measure(render_transcript(candidate, cfg.template), cfg.unit) <= cfg.max_units:
            return candidate
    return None


def sft_record(conv: Conversation, cfg: ExportConfig) -> dict[str, Any]:
    masked = build_mask(conv, cfg.direction, cfg.template)
    return {"session_id": conv.session_id, "segments": [s.to_dict() for s in masked.segments]}


def export_sft(dataset: Iterable[Conversation], cfg: ExportConfig, out_path: str | Path) -> ExportSummary:
    written = truncated = skipped = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(cfg.header("sft")) + "\n")
        for conv in dataset:
            require_valid(conv)
            fitted = fit_session(conv, cfg)
            if fitted is None:
                skipped += 1
                continue
            if len(fitted.turns) < len(conv.turns):
                truncated += 1
            else:
                written += 1
            fh.write(json.dumps(sft_record(fitted, cfg), ensure_ascii=False) + "\n")
    return ExportSummary(written, truncated, skipped)


def dpo_prompt(pair: PreferencePair, cfg: ExportConfig) -> tuple[str, int] | None:
    """Render context + query, dropping the oldest context pairs to fit.

    Returns (prompt, dropped_pairs), or None when the query alone does not fit.
    """
    context = Conversation(pair.session_id, pair.context)
    for drop in range(context.n_pairs + 1):
        kept = context.turns[2 * drop :]
        conv = Conversation.from_messages(
            pair.session_id, [(t.role, t.content) for t in kept] + [(Role.USER, pair.query)]
        )
        prompt = render_transcript(conv, cfg.template, allow_in_progress=True)
        if measure(prompt, cfg.unit) <= cfg.max_units:
            return prompt, drop
    return None


def export_dpo(
    pairs: str | Path | Iterable[PreferencePair],
    cfg: ExportConfig,
    out_path: str | Path,
) -> ExportSummary:
    if isinstance(pairs, (str, Path)):
        pairs = read_pairs(pairs)
    written = truncated = skipped = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(cfg.header("dpo")) + "\n")
        for pair in pairs:
            fitted = dpo_prompt(pair, cfg)
            if fitted is None:
                skipped += 1
                continue
            prompt, dropped = fitted
            if dropped:
                truncated += 1
            else:
                written += 1
            rec = {"prompt": prompt, "chosen": pair.chosen, "rejected": pair.rejected}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return ExportSummary(written, truncated, skipped)


def read_export(path: str | Path) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Split an export file into its meta header and records."""
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or "meta" not in rows[0]:
        raise ValueError(f"{path}: missing meta header line")
    return rows[0]["meta"], rows[1:]
