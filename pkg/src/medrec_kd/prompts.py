"""Natural-language rendering of samples for a language-model teacher."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .ehr import CodeVocab, Sample, Vocabs

_PLACEHOLDER = re.compile(r"<[A-Z_]+>")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptText:
    sample_id: str
    text: str


def _names(ids: Sequence[int], vocab: CodeVocab) -> str:
    if not ids:
        return "none"
    try:
        return ", ".join(vocab.name(i) for i in sorted(ids))
    except KeyError as exc:
        raise PromptError(f"cannot render code: {exc}") from exc


def render_prompt(sample: Sample, vocabs: Vocabs) -> PromptText:
    """Render ``sample`` as the teacher's input prompt.

    Three paragraphs separated by newlines: the visit count, the history
    (omitted for single-visit samples), and the current visit. Code names
    are listed in ascending code-id order; an empty set reads "none".
    """
    lines = [f"The patient has {len(sample.history) + 1} times ICU visits."]
    if sample.history:
        lines.append(" ".join(
            f"In the {k} visit, the patient had diagnosis: {_names(v.diagnoses, vocabs.diagnosis)}; "
            f"procedures: {_names(v.procedures, vocabs.procedure)}; "
            f"The patient was prescribed drugs: {_names(v.medications, vocabs.medication)}."
            for k, v in enumerate(sample.history, 1)))
    lines.append(
        f"In this visit, the patient has diagnosis: {_names(sample.diagnoses, vocabs.diagnosis)}; "
        f"procedures: {_names(sample.procedures, vocabs.procedure)}. "
        "Then, the patient should be prescribed:")
    text = "\n".join(lines)
    if _PLACEHOLDER.search(text):
        raise PromptError(f"unresolved placeholder in prompt for {sample.sample_id}")
    return PromptText(sample.sample_id, text)


def export_lines(samples: Iterable[Sample], vocabs: Vocabs) -> list[str]:
    """``sample_id<TAB>json-escaped prompt`` lines, ordered by sample id."""
    rendered = [render_prompt(s, vocabs) for s in samples]
    rendered.sort(key=lambda p: p.sample_id)
    return [f"{p.sample_id}\t{json.dumps(p.text, ensure_ascii=False)}" for p in rendered]
