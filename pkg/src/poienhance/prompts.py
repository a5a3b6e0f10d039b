"""Prompt rendering for the three per-POI feature extraction queries.

Every prompt has three parts, in order: a role-playing preamble, a headed
"POI Information:" block (one ``Header: value`` line per attribute), and a
closing question. The basic attribute lines (name, coordinates, category) are
identical across the three kinds; only the extra-attribute lines and the
question differ. Wording is versioned via :data:`TEMPLATE_VERSION`, which is
folded into the feature cache key so that template edits invalidate caches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .attributes import DaySlot, PoiAttributes
from .corpus import Poi
from .errors import UserError

TEMPLATE_VERSION = "v1"

_ROLE = (
    "You are a geography expert who knows the points of interest of every "
    "city in detail."
)

_SLOT_PHRASE = {
    DaySlot.EARLY_MORNING: "Between 6 am and 9 am",
    DaySlot.MORNING: "Between 9 am and 11 am",
    DaySlot.NOON: "Between 11 am and 1 pm",
    DaySlot.AFTERNOON: "Between 1 pm and 5 pm",
    DaySlot.EVENING: "Between 5 pm and 7 pm",
    DaySlot.NIGHT: "Between 7 pm and 12 am",
    DaySlot.MIDNIGHT: "Between 12 am and 6 am",
}

_QUESTION = {
    "visit_pattern": "What are the visiting habits of this POI?",
    "address": "What is the precise location of this POI?",
    "surrounding": "What is the surrounding environment of this POI like?",
}


class PromptKind(Enum):
    VISIT_PATTERN = "visit_pattern"
    ADDRESS = "address"
    SURROUNDING = "surrounding"


@dataclass(frozen=True)
class Prompt:
    poi_id: int
    kind: PromptKind
    text: str
    template_version: str = TEMPLATE_VERSION


def _clean(value: str) -> str:
    # Attribute values must never inject structure into the template.
    return " ".join(str(value).split())


def _basic_lines(poi: Poi) -> list[str]:
    return [
        f"Name: {_clean(poi.name)}",
        f"Latitude: {poi.lat:.6f}",
        f"Longitude: {poi.lon:.6f}",
        f"Category: {_clean(poi.category)}",
    ]


def _extra_lines(attrs: PoiAttributes, kind: PromptKind) -> list[str]:
    if kind is PromptKind.VISIT_PATTERN:
        vp = attrs.visit_pattern
        return [
            f"Visit Time: {_SLOT_PHRASE[vp.daily]}",
            f"Visit Days: {vp.weekly.value}",
        ]
    if kind is PromptKind.ADDRESS:
        a = attrs.address
        return [
            f"Street: {_clean(a.street) if a.street else 'unknown'}",
            f"House Number: {_clean(a.house_number) if a.house_number else 'unknown'}",
            f"Postal Code: {_clean(a.postal_code) if a.postal_code else 'unknown'}",
        ]
    if kind is PromptKind.SURROUNDING:
        cats = attrs.surrounding.top_categories
        if not cats:
            rendered = "unknown"
        elif len(cats) == 1:
            rendered = _clean(cats[0])
        else:
            cleaned = [_clean(c) for c in cats]
            rendered = ", ".join(cleaned[:-1]) + " and " + cleaned[-1]
        return [f"Surrounding: {rendered}"]
    raise UserError(f"unknown prompt kind: {kind!r}")


def generate_prompt(poi: Poi, attrs: PoiAttributes, kind: PromptKind) -> Prompt:
    """Render the prompt of the given kind for one POI (deterministic)."""
    if not isinstance(kind, PromptKind):
        raise UserError(f"unknown prompt kind: {kind!r}")
    lines = [_ROLE, "POI Information:"]
    lines.extend(_basic_lines(poi))
    lines.extend(_extra_lines(attrs, kind))
    lines.append(_QUESTION[kind.value])
    return Prompt(poi_id=poi.id, kind=kind, text="\n".join(lines))


def generate_prompts(
    poi: Poi, attrs: PoiAttributes, kinds: tuple[PromptKind, ...] = tuple(PromptKind)
) -> list[Prompt]:
    return [generate_prompt(poi, attrs, k) for k in kinds]


def generate_corpus_prompts(
    dataset, attrs_by_poi, kinds: tuple[PromptKind, ...] = tuple(PromptKind)
) -> list[Prompt]:
    """Prompts of the requested kinds for every POI, in ascending id order."""
    out: list[Prompt] = []
    for pid in dataset.poi_ids():
        attrs = attrs_by_poi.get(pid)
        if attrs is None:
            raise UserError(f"attributes missing for poi {pid}; derive them first")
        out.extend(generate_prompts(dataset.pois[pid], attrs, kinds))
    return out


def save_prompts(prompts: list[Prompt], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(
                json.dumps(
                    {
                        "poi_id": p.poi_id,
                        "kind": p.kind.value,
                        "template_version": p.template_version,
                        "text": p.text,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_prompts(path) -> list[Prompt]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(
                Prompt(
                    poi_id=row["poi_id"],
                    kind=PromptKind(row["kind"]),
                    text=row["text"],
                    template_version=row["template_version"],
                )
            )
    return out
