"""Five task families unified into single-turn QA instances.

Each raw task (grounding, dense captioning, plain and situated QA)
becomes a (system, user, target) triple. The system message carries the
scene region "[<OBJ001> <object> ...]" with one identifier + placeholder
unit per object; placeholders are later spliced with continuous object
embeddings. Targets reference objects through the same "<OBJ%03d>" text,
so response parsing is a single strict scan.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import DataError
from .scene import Scene, identifier_text

__all__ = [
    "GROUND1",
    "GROUND_MULTI",
    "DENSE_CAPTION",
    "VQA",
    "SITUATED_VQA",
    "TASK_FAMILIES",
    "RawTask",
    "QAInstance",
    "ParseResult",
    "system_message",
    "to_qa",
    "parse_identifiers",
    "qa_to_dict",
    "qa_from_dict",
    "save_tasks",
    "load_tasks",
]

GROUND1 = "ground1"
GROUND_MULTI = "ground_multi"
DENSE_CAPTION = "dense_caption"
VQA = "vqa"
SITUATED_VQA = "situated_vqa"

TASK_FAMILIES = (GROUND1, GROUND_MULTI, DENSE_CAPTION, VQA, SITUATED_VQA)

_PREAMBLE = (
    "A chat between a curious user and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the user's "
    "questions. The conversation centers around an indoor scene: "
)

_ANSWER_SUFFIX = " The answer should be a phrase or a single word."


@dataclass(frozen=True)
class RawTask:
    """Generator-side task record, before templating."""

    task: str
    scene_ref: str
    description: str = ""
    question: str = ""
    answer: str = ""
    situation: str = ""
    caption: str = ""
    object_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.task not in TASK_FAMILIES:
            raise ValueError(f"unknown task tag {self.task!r}")
        object.__setattr__(self, "object_indices", tuple(int(i) for i in self.object_indices))


@dataclass(frozen=True)
class QAInstance:
    task: str
    system: str
    user: str
    target: str
    gt_object_indices: tuple[int, ...] = ()
    scene_ref: str = ""

    def __post_init__(self):
        if self.task not in TASK_FAMILIES:
            raise ValueError(f"unknown task tag {self.task!r}")
        if "<object>" in self.target:
            raise ValueError("placeholder token must not appear in targets")
        object.__setattr__(
            self, "gt_object_indices", tuple(int(i) for i in self.gt_object_indices)
        )


def system_message(n_objects: int) -> str:
    """Preamble plus the bracketed object region, one unit per object."""
    if n_objects < 1:
        raise ValueError("system message needs at least one object")
    units = " ".join(f"{identifier_text(i)} <object>" for i in range(1, n_objects + 1))
    return f"{_PREAMBLE}[{units}]."


def _identifier_list(indices) -> str:
    texts = [identifier_text(i) for i in indices]
    if len(texts) == 1:
        return texts[0]
    return ", ".join(texts[:-1]) + " and " + texts[-1]


def to_qa(raw: RawTask, scene: Scene) -> QAInstance:
    """Template a raw task against its scene."""
    if raw.scene_ref and scene.scene_id and raw.scene_ref != scene.scene_id:
        raise ValueError(
            f"task references scene {raw.scene_ref!r}, got {scene.scene_id!r}"
        )
    for i in raw.object_indices:
        if not 1 <= i <= scene.n_objects:
            raise ValueError(f"object index {i} outside scene of {scene.n_objects}")
    system = system_message(scene.n_objects)
    ref = raw.scene_ref or scene.scene_id

    if raw.task == GROUND1:
        if len(raw.object_indices) != 1:
            raise ValueError("single-object grounding needs exactly one target index")
        user = (
            "What is the ID of the object that matches the description "
            f'"{raw.description}"?'
        )
        target = f"{identifier_text(raw.object_indices[0])}."
    elif raw.task == GROUND_MULTI:
        user = (
            f'Are there objects described as "{raw.description}"? '
            "If there are, please provide the IDs for those objects."
        )
        if raw.object_indices:
            target = f"Yes. {_identifier_list(raw.object_indices)}."
        else:
            target = "No."
    elif raw.task == DENSE_CAPTION:
        if len(raw.object_indices) != 1:
            raise ValueError("dense captioning needs exactly one target index")
        user = (
            "Provide a detailed description of the appearance of "
            f"{identifier_text(raw.object_indices[0])} before analyzing its "
            "spatial connections with other elements in the scene."
        )
        target = raw.caption
    elif raw.task == VQA:
        user = f"{raw.question}{_ANSWER_SUFFIX}"
        target = raw.answer
    elif raw.task == SITUATED_VQA:
        user = f"{raw.situation} {raw.question}{_ANSWER_SUFFIX}"
        target = raw.answer
    else:  # pragma: no cover - RawTask already validates
        raise ValueError(f"unknown task tag {raw.task!r}")

    return QAInstance(
        task=raw.task,
        system=system,
        user=user,
        target=target,
        gt_object_indices=raw.object_indices,
        scene_ref=ref,
    )


@dataclass(frozen=True)
class ParseResult:
    indices: tuple[int, ...]
    out_of_range: int = 0
    malformed: int = 0


_IDENT_SCAN = re.compile(r"<OBJ(\d+)>")


def parse_identifiers(response: str, n: int) -> ParseResult:
    """Scan a response for identifier tokens.

    Returns indices in order of first appearance, de-duplicated; tokens
    with the wrong digit count are counted malformed, well-formed tokens
    outside 1..n are counted out-of-range.
    """
    indices: list[int] = []
    seen: set[int] = set()
    out_of_range = 0
    malformed = 0
    for m in _IDENT_SCAN.finditer(response):
        if len(m.group(1)) != 3:
            malformed += 1
            continue
        idx = int(m.group(1))
        if not 1 <= idx <= n:
            out_of_range += 1
            continue
        if idx not in seen:
            seen.add(idx)
            indices.append(idx)
    return ParseResult(indices=tuple(indices), out_of_range=out_of_range, malformed=malformed)


# -- JSONL interchange -------------------------------------------------------


def qa_to_dict(qa: QAInstance) -> dict:
    return {
        "task": qa.task,
        "scene_ref": qa.scene_ref,
        "system": qa.system,
        "user": qa.user,
        "target": qa.target,
        "gt_object_indices": list(qa.gt_object_indices),
    }


def qa_from_dict(doc: dict) -> QAInstance:
    try:
        return QAInstance(
            task=doc["task"],
            system=doc["system"],
            user=doc["user"],
            target=doc["target"],
            gt_object_indices=tuple(doc.get("gt_object_indices", ())),
            scene_ref=doc.get("scene_ref", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed task record: {exc}") from exc


def save_tasks(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qa in instances:
            fh.write(json.dumps(qa_to_dict(qa), separators=(",", ":")))
            fh.write("\n")


def load_tasks(path) -> list[QAInstance]:
    out: list[QAInstance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            out.append(qa_from_dict(doc))
    return out
