"""DAG plan: sub-tasks, dependency edges, statuses, and dependency-safe updates.

Plans are values: every operation returns a new plan and never mutates its
input, so a run can snapshot them freely and replays stay bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

from .protocol import find_cycle

PENDING = "pending"
ACTIVE = "active"
ANSWERED = "answered"


class PlanError(Exception):
    """Base for plan failures; ``str(err)`` is a re-prompt-ready diagnostic."""

    @property
    def diagnostic(self) -> str:
        return str(self)


class EmptyPlan(PlanError):
    pass


class DuplicateTaskId(PlanError):
    pass


class UnknownEdgeEndpoint(PlanError):
    pass


class CyclicPlan(PlanError):
    pass


class UnknownTask(PlanError):
    pass


class DependencyUnmet(PlanError):
    pass


class AlreadyAnswered(PlanError):
    pass


class NotAnswered(PlanError):
    pass


@dataclass(frozen=True)
class TaskNode:
    """One sub-task: answered nodes always carry their answer text."""

    task_id: str
    description: str
    status: str = PENDING
    answer: str | None = None
    evidence: tuple[str, ...] = ()


@dataclass(frozen=True)
class DagPlan:
    plan_id: int
    nodes: Mapping[str, TaskNode]
    edges: tuple[tuple[str, str], ...]

    def predecessors(self, task_id: str) -> list[str]:
        return sorted(src for src, dst in self.edges if dst == task_id)

    def successors(self, task_id: str) -> list[str]:
        return sorted(dst for src, dst in self.edges if src == task_id)

    def descendants(self, task_id: str) -> set[str]:
        """All tasks reachable from ``task_id`` along dependency edges."""
        seen: set[str] = set()
        stack = [task_id]
        while stack:
            for nxt in self.successors(stack.pop()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    def task_ids(self) -> list[str]:
        return sorted(self.nodes)


def build_plan(
    tasks: Sequence[tuple[str, str]] | Sequence[dict],
    edges: Iterable[Sequence[str]],
    plan_id: int = 0,
) -> DagPlan:
    """Validate and build a fresh plan with every node pending.

    ``tasks`` may be ``(task_id, description)`` pairs or framing-payload
    ``{"task_id", "description"}`` objects; edges are (from, to) pairs
    meaning "to depends on from".
    """
    pairs: list[tuple[str, str]] = []
    for task in tasks:
        if isinstance(task, dict):
            pairs.append((task["task_id"], task["description"]))
        else:
            tid, description = task
            pairs.append((tid, description))
    if not pairs:
        raise EmptyPlan("a plan needs at least one task")
    nodes: dict[str, TaskNode] = {}
    for tid, description in pairs:
        if tid in nodes:
            raise DuplicateTaskId(f'task "{tid}" is declared more than once')
        nodes[tid] = TaskNode(task_id=tid, description=description)
    edge_set: set[tuple[str, str]] = set()
    for edge in edges:
        src, dst = edge[0], edge[1]
        for endpoint in (src, dst):
            if endpoint not in nodes:
                raise UnknownEdgeEndpoint(f'edge endpoint "{endpoint}" is not a declared task')
        edge_set.add((src, dst))
    cyclic = find_cycle(nodes, edge_set)
    if cyclic:
        raise CyclicPlan(f"dependency edges form a cycle through: {', '.join(cyclic)}")
    return DagPlan(plan_id=plan_id, nodes=nodes, edges=tuple(sorted(edge_set)))


def frontier(plan: DagPlan) -> list[str]:
    """Unanswered tasks whose predecessors are all answered, in task-id order.

    Tasks marked active stay in the frontier: active is a rendering hint,
    not a scheduling state.
    """
    ready = []
    for tid in sorted(plan.nodes):
        node = plan.nodes[tid]
        if node.status == ANSWERED:
            continue
        if all(plan.nodes[p].status == ANSWERED for p in plan.predecessors(tid)):
            ready.append(tid)
    return ready


def apply_task_answer(plan: DagPlan, answers: Sequence[tuple[str, str]]) -> DagPlan:
    """Mark tasks answered, in the given order.

    Entries are applied sequentially, so earlier answers in the same batch
    may satisfy later entries' dependencies.
    """
    nodes = dict(plan.nodes)
    for task_id, answer in answers:
        node = nodes.get(task_id)
        if node is None:
            raise UnknownTask(f'task "{task_id}" is not in the current plan')
        if node.status == ANSWERED:
            raise AlreadyAnswered(f'task "{task_id}" is already answered; use revisit_task to redo it')
        unmet = [p for p in plan.predecessors(task_id) if nodes[p].status != ANSWERED]
        if unmet:
            raise DependencyUnmet(
                f'task "{task_id}" depends on unanswered task(s): {", ".join(unmet)}'
            )
        nodes[task_id] = replace(node, status=ANSWERED, answer=answer)
    return replace(plan, nodes=nodes)


def mark_active(plan: DagPlan, task_id: str) -> DagPlan:
    """Flag the task targeted by the latest tool call (rendering only)."""
    node = plan.nodes.get(task_id)
    if node is None:
        raise UnknownTask(f'task "{task_id}" is not in the current plan')
    if node.status != PENDING:
        return plan
    nodes = dict(plan.nodes)
    nodes[task_id] = replace(node, status=ACTIVE)
    return replace(plan, nodes=nodes)


def attach_evidence(plan: DagPlan, task_id: str, facts: Sequence[str]) -> DagPlan:
    node = plan.nodes.get(task_id)
    if node is None:
        raise UnknownTask(f'task "{task_id}" is not in the current plan')
    nodes = dict(plan.nodes)
    nodes[task_id] = replace(node, evidence=node.evidence + tuple(facts))
    return replace(plan, nodes=nodes)


def reset_for_revisit(plan: DagPlan, task_id: str) -> tuple[DagPlan, list[dict]]:
    """Revert an answered task and every answered descendant to pending.

    Returns the new plan plus ``{"task_id", "old_answer"}`` records for the
    discarded answers (target first, then descendants in task-id order) so
    the register can archive them. Evidence is cleared on the revisited task
    only: descendants keep their facts, which may still be valid.
    """
    node = plan.nodes.get(task_id)
    if node is None:
        raise UnknownTask(f'task "{task_id}" is not in the current plan')
    if node.status != ANSWERED:
        raise NotAnswered(f'task "{task_id}" has no answer to revisit')
    to_reset = [task_id] + sorted(
        tid for tid in plan.descendants(task_id) if plan.nodes[tid].status == ANSWERED
    )
    nodes = dict(plan.nodes)
    discarded = []
    for tid in to_reset:
        old = nodes[tid]
        discarded.append({"task_id": tid, "old_answer": old.answer})
        evidence = () if tid == task_id else old.evidence
        nodes[tid] = replace(old, status=PENDING, answer=None, evidence=evidence)
    return replace(plan, nodes=nodes), discarded


def is_complete(plan: DagPlan) -> bool:
    return all(node.status == ANSWERED for node in plan.nodes.values())


# ---------------------------------------------------------------------------
# Serialization (framing-payload shape plus status/answer annotations)
# ---------------------------------------------------------------------------


def plan_to_dict(plan: DagPlan) -> dict:
    return {
        "plan_id": plan.plan_id,
        "tasks": [
            {
                "task_id": node.task_id,
                "description": node.description,
                "status": node.status,
                "answer": node.answer,
                "evidence": list(node.evidence),
            }
            for node in (plan.nodes[tid] for tid in sorted(plan.nodes))
        ],
        "edges": [list(edge) for edge in plan.edges],
    }


def plan_from_dict(data: dict) -> DagPlan:
    nodes = {
        task["task_id"]: TaskNode(
            task_id=task["task_id"],
            description=task["description"],
            status=task["status"],
            answer=task["answer"],
            evidence=tuple(task["evidence"]),
        )
        for task in data["tasks"]
    }
    return DagPlan(
        plan_id=data["plan_id"],
        nodes=nodes,
        edges=tuple((edge[0], edge[1]) for edge in data["edges"]),
    )
