"""Synthetic instruction-following tasks with exact scoring oracles.

Token space layout (ids):
  0           end-of-response marker
  1..3        instruction tokens (copy / reverse / sort)
  4           prompt/response separator
  5..         benign payload tokens, then forbidden tokens (see VocabPolicy)

A task prompt is ``[instruction] payload... [sep]``; the correct response is
a deterministic transform of the payload followed by the end marker. The
helpfulness oracle is positional match against the target; the harmlessness
oracle is the absence of forbidden tokens. Both are pure functions, so every
RLHF outcome in the simulator is checkable without human labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegeneratePolicyError
from . import model as M

EOS = 0
SEP = 4
KIND_TOKENS = {"copy": 1, "reverse": 2, "sort": 3}
KINDS = tuple(KIND_TOKENS)
FIRST_PAYLOAD_TOKEN = 5


@dataclass(frozen=True)
class VocabPolicy:
    """Benign/forbidden split of the payload token range."""
    vocab_size: int
    benign: frozenset[int]
    forbidden: frozenset[int]

    def __post_init__(self):
        if self.benign & self.forbidden:
            raise ConfigError("benign and forbidden token sets overlap")
        if not self.forbidden:
            raise ConfigError("forbidden token set must be non-empty")
        ids = self.benign | self.forbidden
        if ids and (min(ids) < 0 or max(ids) >= self.vocab_size):
            raise ConfigError("policy token ids exceed the vocabulary")


def default_policy(vocab_size: int, n_forbidden: int = 8) -> VocabPolicy:
    """Benign tokens first, the last ``n_forbidden`` payload ids forbidden."""
    n_payload = vocab_size - FIRST_PAYLOAD_TOKEN
    if n_forbidden < 1 or n_forbidden >= n_payload:
        raise ConfigError(f"n_forbidden must be in [1, {n_payload - 1}]")
    split = vocab_size - n_forbidden
    return VocabPolicy(
        vocab_size=vocab_size,
        benign=frozenset(range(FIRST_PAYLOAD_TOKEN, split)),
        forbidden=frozenset(range(split, vocab_size)),
    )


@dataclass(frozen=True)
class InstructionTask:
    kind: str
    prompt: tuple[int, ...]
    target: tuple[int, ...]

    @property
    def payload(self) -> tuple[int, ...]:
        return self.prompt[1:-1]


def make_task(kind: str, payload) -> InstructionTask:
    payload = tuple(int(t) for t in payload)
    if kind == "copy":
        target = payload
    elif kind == "reverse":
        target = tuple(reversed(payload))
    elif kind == "sort":
        target = tuple(sorted(payload))
    else:
        raise ConfigError(f"unknown task kind {kind!r}")
    return InstructionTask(kind, (KIND_TOKENS[kind], *payload, SEP), target)


def gen_dataset(seed: int, n_samples: int, task_mix: dict[str, float],
                policy: VocabPolicy, payload_len: tuple[int, int] = (4, 4)) -> list[InstructionTask]:
    """Reproducible task sample; payload tokens drawn from the benign set."""
    if not task_mix:
        raise ConfigError("task_mix must be non-empty")
    for kind in task_mix:
        if kind not in KIND_TOKENS:
            raise ConfigError(f"unknown task kind {kind!r}")
    total = sum(task_mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"task_mix must sum to 1, got {total}")
    lo, hi = payload_len
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad payload length bounds {payload_len}")
    rng = np.random.default_rng(seed)
    kinds = sorted(task_mix)
    probs = np.asarray([task_mix[k] for k in kinds])
    benign = np.asarray(sorted(policy.benign))
    out = []
    for _ in range(n_samples):
        kind = kinds[int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, len(kinds) - 1))]
        n = int(rng.integers(lo, hi + 1))
        payload = benign[rng.integers(0, len(benign), size=n)]
        out.append(make_task(kind, payload))
    return out


def dirichlet_proportions(n_clients: int, alpha: float, seed: int) -> dict[str, np.ndarray]:
    """Per-kind client proportions drawn from Dirichlet(alpha)."""
    if n_clients < 2:
        raise ConfigError("n_clients must be >= 2")
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    return {kind: rng.dirichlet([alpha] * n_clients) for kind in KINDS}


def partition_by_proportions(dataset: list[InstructionTask],
                             proportions: dict[str, np.ndarray],
                             seed: int) -> list[list[InstructionTask]]:
    """Split per kind according to the given client proportions (disjoint, exhaustive)."""
    n_clients = len(next(iter(proportions.values())))
    rng = np.random.default_rng(seed)
    shards: list[list[InstructionTask]] = [[] for _ in range(n_clients)]
    for kind in KINDS:
        idx = [i for i, t in enumerate(dataset) if t.kind == kind]
        if not idx:
            continue
        idx = list(rng.permutation(idx))
        bounds = np.floor(np.cumsum(proportions[kind]) * len(idx) + 0.5).astype(int)
        bounds[-1] = len(idx)
        start = 0
        for c, stop in enumerate(bounds):
            for i in idx[start:stop]:
                shards[c].append(dataset[i])
            start = stop
    return shards


def dirichlet_partition(dataset: list[InstructionTask], n_clients: int,
                        alpha: float, seed: int) -> list[list[InstructionTask]]:
    """Disjoint shards whose per-kind proportions follow Dirichlet(alpha)."""
    if len(dataset) < n_clients:
        raise ConfigError(f"dataset of {len(dataset)} tasks cannot cover {n_clients} clients")
    props = dirichlet_proportions(n_clients, alpha, seed)
    return partition_by_proportions(dataset, props, seed)


def oracle_helpful(task: InstructionTask, response) -> float:
    """Positional match with the target, normalized by the longer length."""
    response = list(response)
    target = task.target
    if not target and not response:
        return 1.0
    if not response or not target:
        return 0.0
    hits = sum(1 for a, b in zip(response, target) if a == b)
    return hits / max(len(response), len(target))


def oracle_harmless(response, policy: VocabPolicy) -> float:
    """1 minus the forbidden-token fraction; an empty response is harmless."""
    response = list(response)
    if not response:
        return 1.0
    bad = sum(1 for t in response if t in policy.forbidden)
    return 1.0 - bad / len(response)


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]
    objective: str  # helpful | harmless
    gap: float      # oracle score difference (chosen - rejected)


def _oracle_for(objective: str, task: InstructionTask, policy: VocabPolicy):
    if objective == "helpful":
        return lambda resp: oracle_helpful(task, resp)
    if objective == "harmless":
        return lambda resp: oracle_harmless(resp, policy)
    raise ConfigError(f"unknown objective {objective!r}")


def gen_preferences(model, tasks: list[InstructionTask], n_pairs: int, objective: str,
                    sampler: M.Sampler, seed: int, policy: VocabPolicy,
                    max_new: int = 8, min_gap: float = 1e-9,
                    retry_budget: int = 8) -> list[PreferencePair]:
    """Sampled response pairs ordered by the objective's oracle.

    Two responses are drawn per prompt; ties (oracle gap below ``min_gap``)
    are resampled up to ``retry_budget`` times and then the prompt is
    skipped. Pair slots are processed in waves of batched generations, which
    keeps the output deterministic for a fixed seed.
    """
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    if not tasks:
        raise ConfigError("no tasks to generate preferences from")
    rng = np.random.default_rng(seed)
    slot_tasks = [tasks[i % len(tasks)] for i in range(n_pairs)]
    slots: list[PreferencePair | None] = [None] * n_pairs
    tries = [retry_budget] * n_pairs
    attempts = 0
    wave = 32
    while True:
        todo = [i for i in range(n_pairs) if slots[i] is None and tries[i] > 0][:wave]
        if not todo:
            break
        prompts = []
        for i in todo:
            prompts.extend([list(slot_tasks[i].prompt)] * 2)
        gens = M.generate_batch(model, prompts, max_new, sampler, rng, stop_token=EOS)
        for j, i in enumerate(todo):
            attempts += 1
            tries[i] -= 1
            task = slot_tasks[i]
            score = _oracle_for(objective, task, policy)
            ra, rb = gens[2 * j].response, gens[2 * j + 1].response
            sa, sb = score(ra), score(rb)
            if abs(sa - sb) < min_gap or ra == rb:
                continue
            if sa < sb:
                ra, rb, sa, sb = rb, ra, sb, sa
            slots[i] = PreferencePair(task.prompt, tuple(ra), tuple(rb), objective, sa - sb)
    pairs = [p for p in slots if p is not None]
    if not pairs:
        raise DegeneratePolicyError(
            f"no non-tied {objective} pairs after {attempts} attempts; policy may be degenerate")
    return pairs


# ---------------------------------------------------------------------------
# dataset audit dump/load (line-delimited records)
# ---------------------------------------------------------------------------


def dump_dataset(tasks: list[InstructionTask], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps({"kind": t.kind, "prompt": list(t.prompt),
                                "target": list(t.target)}) + "\n")


def load_dataset(path) -> list[InstructionTask]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            out.append(InstructionTask(rec["kind"], tuple(rec["prompt"]), tuple(rec["target"])))
    return out


def kind_histogram(tasks: list[InstructionTask]) -> dict[str, float]:
    if not tasks:
        return {k: 0.0 for k in KINDS}
    return {k: sum(1 for t in tasks if t.kind == k) / len(tasks) for k in KINDS}
