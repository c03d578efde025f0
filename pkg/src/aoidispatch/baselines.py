"""Non-learning query policies and the shared least-loaded dispatch rule.

Three query strategies: never query, query each server independently with a
fixed probability, or query every server every slot. All of them dispatch to
the least-loaded server according to the dispatcher's knowledge, overlaid
with whatever query responses came back this slot (queries return within the
slot, so a dispatcher that just paid for fresh state gets to use it).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import DispatchEnv, JointAction, KnowledgeSnapshot, QueryResponse
from .errors import ConfigError

NEVER = "never"
RANDOM = "random"
ALWAYS = "always"


@dataclass(frozen=True)
class BaselineKind:
    """Query strategy tag: never, random (with probability p), or always."""

    variant: str
    p: float = 0.5

    def __post_init__(self) -> None:
        if self.variant not in (NEVER, RANDOM, ALWAYS):
            raise ConfigError(f"unknown baseline variant {self.variant!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("query probability must lie in [0, 1]")

    @property
    def name(self) -> str:
        if self.variant == RANDOM:
            return f"random:{self.p:g}"
        return self.variant


def baseline_queries(
    kind: BaselineKind, n_servers: int, rng: np.random.Generator
) -> list[bool]:
    """Query bits for one dispatcher for one slot."""
    if kind.variant == NEVER:
        return [False] * n_servers
    if kind.variant == ALWAYS:
        return [True] * n_servers
    return [rng.random() < kind.p for _ in range(n_servers)]


def least_loaded_dispatch(snapshot: KnowledgeSnapshot) -> int:
    """Server with the smallest believed queue.

    Ties prefer believed-available servers, then the lowest index. Pure
    function of the snapshot.
    """
    return min(
        range(len(snapshot.seen_queue)),
        key=lambda k: (snapshot.seen_queue[k], not snapshot.seen_available[k], k),
    )


def baseline_step(
    kind: BaselineKind,
    snapshot: KnowledgeSnapshot,
    arrival: bool,
    fresh_query_results: Sequence[QueryResponse],
    rng: np.random.Generator,
    queries: Optional[Sequence[bool]] = None,
) -> tuple[list[bool], Optional[int]]:
    """One dispatcher's action for one slot.

    ``fresh_query_results`` are this slot's responses for this dispatcher;
    they overlay the stale snapshot before the least-loaded choice. Pass
    ``queries`` when the bits were already drawn (the caller needs them up
    front to fetch the responses); otherwise they are drawn here.
    """
    bits = list(queries) if queries is not None else baseline_queries(kind, len(snapshot.seen_queue), rng)
    if not arrival:
        return bits, None
    view = snapshot.copy()
    for resp in fresh_query_results:
        view.seen_available[resp.server] = resp.available
        view.seen_queue[resp.server] = resp.queue_length
    return bits, least_loaded_dispatch(view)


class BaselinePolicy:
    """Decentralized baseline controller usable by the episode runner.

    Each slot it draws query bits per dispatcher, reads the same-slot
    responses from the environment, and dispatches least-loaded on the
    overlaid view.
    """

    def __init__(self, kind: BaselineKind):
        self.kind = kind
        self._rng: Optional[np.random.Generator] = None

    @property
    def name(self) -> str:
        return self.kind.name

    def begin_episode(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def act(self, env: DispatchEnv) -> JointAction:
        if self._rng is None:
            self._rng = np.random.default_rng(0)
        n = env.config.n_dispatchers
        k = env.config.n_servers
        all_bits = [baseline_queries(self.kind, k, self._rng) for _ in range(n)]
        responses = env.process_queries(all_bits)
        by_dispatcher: list[list[QueryResponse]] = [[] for _ in range(n)]
        for resp in responses:
            by_dispatcher[resp.dispatcher].append(resp)
        queries = []
        dispatch = []
        for i in range(n):
            bits, target = baseline_step(
                self.kind,
                env.observe(i),
                env.arrivals[i],
                by_dispatcher[i],
                self._rng,
                queries=all_bits[i],
            )
            queries.append(tuple(bits))
            dispatch.append(target)
        return JointAction(queries=tuple(queries), dispatch=tuple(dispatch))


def parse_policy_spec(spec: str) -> BaselineKind | str:
    """Parse a policy CLI spec.

    ``never`` / ``always`` / ``random:<p>`` give a :class:`BaselineKind`;
    ``mappo:<checkpoint-path-or-'train'>`` returns the raw argument string
    for the caller to resolve.
    """
    spec = spec.strip()
    if spec == NEVER:
        return BaselineKind(NEVER)
    if spec == ALWAYS:
        return BaselineKind(ALWAYS)
    if spec == RANDOM:
        return BaselineKind(RANDOM, 0.5)
    if spec.startswith("random:"):
        try:
            p = float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad query probability in {spec!r}") from exc
        return BaselineKind(RANDOM, p)
    if spec.startswith("mappo:"):
        arg = spec.split(":", 1)[1]
        if not arg:
            raise ConfigError("mappo policy needs a checkpoint path or 'train'")
        return arg
    raise ConfigError(
        f"unknown policy {spec!r}; expected never | random:<p> | always | mappo:<checkpoint>"
    )
