"""Shared fixtures: action generators, mutations, and scripted runs."""

from __future__ import annotations

import json
import random
from pathlib import Path

from dagsearch.backend import ScriptedBackend
from dagsearch.engine import PromptPack, RunConfig, RunResult, run
from dagsearch.protocol import (
    Action,
    ActionKind,
    MalformedPayload,
    MultipleActionBlocks,
    NoActionBlock,
    SchemaViolation,
    UnknownActionKind,
)
from dagsearch.tools import Document, ScriptedTool, ToolRegistry, ToolResult, search_spec

DATA_DIR = Path(__file__).parent / "data"

WORDS = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
    "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
    "xray yankee zulu café münchen 北京 2024"
).split()


def words(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n))


def fixed_clock():
    """A deterministic clock: 0.0, 1.0, 2.0, ... per call."""
    state = {"t": -1.0}

    def clock() -> float:
        state["t"] += 1.0
        return state["t"]

    return clock


# ---------------------------------------------------------------------------
# Random valid actions
# ---------------------------------------------------------------------------


def _random_dag_fields(rng: random.Random) -> dict:
    n = rng.randint(1, 6)
    ids = [f"t{i + 1}" for i in range(n)]
    tasks = [{"task_id": tid, "description": words(rng, rng.randint(2, 8))} for tid in ids]
    edges = [
        [ids[i], ids[j]]
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < 0.35
    ]
    return {"tasks": tasks, "edges": edges}


def random_payload(rng: random.Random, kind: ActionKind) -> dict:
    if kind is ActionKind.INTENT_REFINEMENT:
        return {
            "refined_goal": words(rng, rng.randint(1, 12)),
            "constraints": [words(rng, rng.randint(1, 6)) for _ in range(rng.randint(0, 4))],
        }
    if kind in (ActionKind.PROBLEM_FRAMING, ActionKind.REPLANNING):
        payload = _random_dag_fields(rng)
        if kind is ActionKind.REPLANNING:
            payload["reason"] = words(rng, rng.randint(1, 8))
        return payload
    if kind is ActionKind.TOOL_CALL:
        arguments: dict = {"query": words(rng, rng.randint(1, 8))}
        if rng.random() < 0.3:
            arguments["filters"] = {"year": rng.randint(1900, 2024), "exact": rng.random() < 0.5}
        return {
            "task_id": f"t{rng.randint(1, 6)}",
            "tool_name": rng.choice(["search", "wiki", "dense_retriever"]),
            "arguments": arguments,
        }
    if kind is ActionKind.DOC_EXTRACTION:
        return {
            "task_id": f"t{rng.randint(1, 6)}",
            "facts": [words(rng, rng.randint(2, 10)) for _ in range(rng.randint(0, 4))],
            "source_ids": [f"search:{rng.randrange(16**8):08x}" for _ in range(rng.randint(0, 3))],
        }
    if kind is ActionKind.TASK_ANSWER:
        n = rng.randint(1, 3)
        ids = rng.sample([f"t{i + 1}" for i in range(6)], n)
        return {"answers": [{"task_id": tid, "answer": words(rng, rng.randint(1, 6))} for tid in ids]}
    if kind is ActionKind.FINAL_ANSWER:
        return {"answer": words(rng, rng.randint(0, 10))}
    if kind is ActionKind.REVISIT_TASK:
        return {"task_id": f"t{rng.randint(1, 6)}", "reason": words(rng, rng.randint(1, 8))}
    raise AssertionError(kind)


def random_action(rng: random.Random, kind: ActionKind | None = None) -> Action:
    kind = kind or rng.choice(list(ActionKind))
    return Action.create(kind, random_payload(rng, kind))


# ---------------------------------------------------------------------------
# Guaranteed-invalid mutations
# ---------------------------------------------------------------------------

MUTATION_MODES = (
    "truncate",
    "unknown_tag",
    "extra_field",
    "duplicate",
    "strip_tags",
    "array_payload",
)


def mutate_action(rng: random.Random, action: Action, mode: str | None = None):
    """Return (text, expected error class) for a corrupted action block."""
    mode = mode or rng.choice(MUTATION_MODES)
    text = action.raw_text
    tag = action.kind.value
    if mode == "truncate":
        first = text.index("{")
        last = text.rindex("}")
        cut = rng.randrange(first + 1, last + 1)
        return text[:cut], MalformedPayload
    if mode == "unknown_tag":
        mutated = text.replace(f"<{tag}>", "<conjecture>").replace(f"</{tag}>", "</conjecture>")
        return mutated, UnknownActionKind
    if mode == "extra_field":
        payload = dict(action.payload)
        payload["unexpected_extra"] = True
        body = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return f"<{tag}>{body}</{tag}>", SchemaViolation
    if mode == "duplicate":
        return f"{text}\n{text}", MultipleActionBlocks
    if mode == "strip_tags":
        first = text.index("{")
        last = text.rindex("}")
        return text[first : last + 1], NoActionBlock
    if mode == "array_payload":
        return f"<{tag}>[1,2,3]</{tag}>", MalformedPayload
    raise AssertionError(mode)


# ---------------------------------------------------------------------------
# Random DAGs for the plan oracle
# ---------------------------------------------------------------------------


def random_dag(rng: random.Random, n: int, p: float):
    """Acyclic by construction: edges only point from lower to higher index."""
    ids = [f"n{i}" for i in range(n)]
    edges = [
        (ids[i], ids[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < p
    ]
    return ids, edges


# ---------------------------------------------------------------------------
# Scripted two-hop fixture (mirrors the shipped data files)
# ---------------------------------------------------------------------------

TWO_HOP_QUESTION = (
    "In which year was the university founded where the inventor of the "
    "World Wide Web earned his degree?"
)
TWO_HOP_GOLD = ["1096"]


def two_hop_responses() -> list[str]:
    with open(DATA_DIR / "two_hop_responses.json", "r", encoding="utf-8") as handle:
        return json.load(handle)["responses"]


def fixture_registry(top_k: int = 3) -> ToolRegistry:
    from dagsearch.tools import FixtureSearchTool, load_corpus

    registry = ToolRegistry()
    registry.register(
        search_spec("search", "Keyword search over the offline fixture corpus."),
        FixtureSearchTool(corpus=load_corpus(DATA_DIR / "corpus.jsonl"), top_k=top_k),
    )
    return registry


def run_two_hop(config: RunConfig | None = None) -> RunResult:
    return run(
        TWO_HOP_QUESTION,
        backend=ScriptedBackend(responses=two_hop_responses()),
        tools=fixture_registry(),
        config=config or RunConfig(),
        prompts=PromptPack.load_default(),
        question_id="two-hop-www",
        clock=fixed_clock(),
    )


# ---------------------------------------------------------------------------
# Synthetic 20-turn fixture: 500-token raw tool outputs, 50-token facts
# ---------------------------------------------------------------------------

TWENTY_TURN_QUESTION = (
    "Which year was the archive founded that preserves the journals of the "
    "expedition that first charted the strait named after its navigator?"
)
TWENTY_TURN_GOLD = ["1877"]

_CALL_TURNS = {1: "t1", 3: "t1", 6: "t2", 8: "t2", 11: "t3", 13: "t3", 15: "t3", 17: "t3"}
_EXTRACT_TURNS = {2: "t1", 4: "t1", 7: "t2", 9: "t2", 12: "t3", 14: "t3", 16: "t3", 18: "t3"}
_ANSWER_TURNS = {
    5: ("t1", "the navigator was Ezra Hollin, honoured by the Hollin Strait"),
    10: ("t2", "the strait was charted by the Meridian expedition of 1843"),
    19: ("t3", "1877"),
}


def _synthetic_document(rng: random.Random, source: str, n_tokens: int) -> Document:
    return Document(
        source_id=source,
        title=f"Synthetic record {source.split(':')[1]}",
        text=words(rng, n_tokens),
    )


def twenty_turn_script():
    """Scripted responses plus canned tool results for the 20-turn run.

    Every tool call returns three documents whose texts total exactly 500
    tokens; every extraction condenses them into exactly 50 tokens of facts.
    """
    rng = random.Random(20_24)
    responses = [
        "Chained lookups: navigator, expedition, archive.\n"
        '<intent_refinement>{"refined_goal": "Find the founding year of the archive '
        "preserving the journals of the expedition that first charted the strait named "
        'after its navigator.", "constraints": ["the answer is a year", '
        '"the archive must hold the expedition journals"]}</intent_refinement>',
        "Three dependent hops.\n"
        '<problem_framing>{"tasks": [{"task_id": "t1", "description": "Identify the '
        'navigator the strait is named after"}, {"task_id": "t2", "description": '
        '"Identify the expedition that first charted the strait"}, {"task_id": "t3", '
        '"description": "Find the founding year of the archive holding the expedition '
        'journals"}], "edges": [["t1", "t2"], ["t2", "t3"]]}</problem_framing>',
    ]
    tool_results = []
    for turn in range(1, 21):
        if turn in _CALL_TURNS:
            task = _CALL_TURNS[turn]
            call_no = len(tool_results) + 1
            docs = (
                _synthetic_document(rng, f"syn:{call_no:02d}a", 167),
                _synthetic_document(rng, f"syn:{call_no:02d}b", 167),
                _synthetic_document(rng, f"syn:{call_no:02d}c", 166),
            )
            tool_results.append(ToolResult(documents=docs))
            responses.append(
                f"Searching for {task}.\n"
                f'<tool_call>{{"task_id": "{task}", "tool_name": "search", '
                f'"arguments": {{"query": "{words(rng, 6)}"}}}}</tool_call>'
            )
        elif turn in _EXTRACT_TURNS:
            task = _EXTRACT_TURNS[turn]
            call_no = len(tool_results)
            fact = words(rng, 50)
            responses.append(
                "Condensing the useful part.\n"
                f'<doc_extraction>{{"task_id": "{task}", "facts": ["{fact}"], '
                f'"source_ids": ["syn:{call_no:02d}a", "syn:{call_no:02d}b"]}}</doc_extraction>'
            )
        elif turn in _ANSWER_TURNS:
            task, answer = _ANSWER_TURNS[turn]
            responses.append(
                f'<task_answer>{{"answers": [{{"task_id": "{task}", "answer": "{answer}"}}]}}</task_answer>'
            )
        else:
            responses.append('All sub-tasks are answered.\n<final_answer>{"answer": "1877"}</final_answer>')
    return responses, tool_results


# ---------------------------------------------------------------------------
# Synthetic trajectories for filter tests
# ---------------------------------------------------------------------------

_KIND_PAYLOADS = {
    ActionKind.INTENT_REFINEMENT: {"refined_goal": "g", "constraints": []},
    ActionKind.PROBLEM_FRAMING: {
        "tasks": [{"task_id": "t1", "description": "d"}],
        "edges": [],
    },
    ActionKind.TOOL_CALL: {"task_id": "t1", "tool_name": "search", "arguments": {"query": "q"}},
    ActionKind.DOC_EXTRACTION: {"task_id": "t1", "facts": ["f"], "source_ids": []},
    ActionKind.TASK_ANSWER: {"answers": [{"task_id": "t1", "answer": "x"}]},
    ActionKind.FINAL_ANSWER: {"answer": "x"},
    ActionKind.REVISIT_TASK: {"task_id": "t1", "reason": "doubt"},
    ActionKind.REPLANNING: {
        "reason": "redo",
        "tasks": [{"task_id": "r1", "description": "d"}],
        "edges": [],
    },
}


def make_trajectory(kinds, *, answer="x", outcome="answered", retries_at=()):
    """Synthetic trajectory whose steps carry the given action kinds."""
    from dagsearch.trajectory import StepRecord, Trajectory

    steps = []
    for i, kind in enumerate(kinds, start=1):
        action = Action.create(kind, _KIND_PAYLOADS[kind])
        steps.append(
            StepRecord(
                index=i,
                stage="planning" if i <= 2 and kind.value.startswith(("intent", "problem")) else "solving",
                state=f"state for step {i}",
                kind=kind.value,
                payload=action.payload,
                raw_text=action.raw_text,
                model_text=action.raw_text,
                token_count=100 + i,
                retries=1 if i in retries_at else 0,
            )
        )
    return Trajectory(
        question="synthetic?",
        question_id="synthetic",
        steps=steps,
        outcome=outcome,
        answer=answer if outcome == "answered" else None,
    )


COMPLIANT_KINDS = [
    ActionKind.INTENT_REFINEMENT,
    ActionKind.PROBLEM_FRAMING,
    ActionKind.TOOL_CALL,
    ActionKind.DOC_EXTRACTION,
    ActionKind.TASK_ANSWER,
    ActionKind.FINAL_ANSWER,
]


def run_twenty_turn() -> RunResult:
    responses, tool_results = twenty_turn_script()
    registry = ToolRegistry()
    registry.register(
        search_spec("search", "Synthetic scripted retrieval."),
        ScriptedTool(results=list(tool_results)),
    )
    return run(
        TWENTY_TURN_QUESTION,
        backend=ScriptedBackend(responses=responses),
        tools=registry,
        config=RunConfig(max_turns=40),
        prompts=PromptPack.load_default(),
        question_id="twenty-turn-synthetic",
        clock=fixed_clock(),
    )
