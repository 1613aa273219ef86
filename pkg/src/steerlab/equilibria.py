"""Exact brute-force equilibrium solver for game specs.

Backward induction runs over (stage state, time) nodes in reverse time order;
inside each node a depth-n recursion over the priority-ordered action tree
finds the leader-optimal outcome under the documented tie convention.  All
arithmetic is on fractions, so equality comparisons are exact.

Besides the canonical solution the solver enumerates every outcome reachable
under *some* tie-breaking; the resulting path set is what training runs are
matched against (symmetric games can carry several equally-optimal paths).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

from .games import (
    TERMINAL,
    GameSpec,
    format_joint,
    is_fully_cooperative,
)

TIE_CONVENTION = (
    "followers break exact ties in favor of higher-priority agents "
    "(lexicographically), then by lowest action index"
)

MAX_TREE_LEAVES = 10**6


class OracleError(RuntimeError):
    """Game too large for enumeration, or inconsistent query."""


Node = tuple[int, int]  # (stage-state index, time step)


@dataclass(frozen=True)
class StageOutcome:
    joint: tuple[int, ...]
    values: tuple[Fraction, ...]


@dataclass
class EquilibriumReport:
    game: str
    priority: tuple[int, ...]
    tie_convention: str
    nodes: list[Node]
    # per node: pure Nash joints of the stage game (with equilibrium continuations)
    pure_ne: dict[Node, frozenset]
    # per node: canonical equilibrium joint and per-agent values
    stage_joint: dict[Node, tuple[int, ...]]
    stage_values: dict[Node, tuple[Fraction, ...]]
    # per node: canonical follower sub-policy, keyed by position-ordered prefix
    sub_policy: dict[tuple[Node, tuple[int, ...]], int]
    # canonical equilibrium trajectory from the initial state
    se_path: list[tuple[int, tuple[int, ...]]]  # (state index, joint)
    se_values: tuple[Fraction, ...]
    # every trajectory realizable under some admissible tie-breaking
    se_paths: tuple[tuple[tuple[int, ...], ...], ...]
    values_ambiguous: bool
    fully_cooperative: bool
    spec: GameSpec = field(repr=False, default=None)

    @property
    def se_joint_sequence(self) -> tuple[tuple[int, ...], ...]:
        return tuple(joint for _, joint in self.se_path)


@dataclass(frozen=True)
class ClaimResult:
    kind: str
    stage: str | None
    passed: bool
    detail: str


# ---------------------------------------------------------------------------
# Node graph


def reachable_nodes(spec: GameSpec) -> list[Node]:
    """(state, t) pairs reachable from the initial state, in BFS order."""
    seen = {(spec.initial_state, 0)}
    frontier = [(spec.initial_state, 0)]
    order = [(spec.initial_state, 0)]
    while frontier:
        nxt = []
        for s, t in frontier:
            if t + 1 >= spec.horizon:
                continue
            for joint in spec.joint_actions():
                succ = spec.transitions[(s, joint)]
                if succ == TERMINAL:
                    continue
                node = (succ, t + 1)
                if node not in seen:
                    seen.add(node)
                    order.append(node)
                    nxt.append(node)
        frontier = nxt
    return order


def _check_size(spec: GameSpec, nodes: list[Node]) -> None:
    leaves = 1
    for k in spec.actions:
        leaves *= k
    if leaves * max(len(nodes), 1) > MAX_TREE_LEAVES:
        raise OracleError(
            f"game {spec.name!r} has {leaves * len(nodes)} stage-action-tree "
            f"leaves, beyond the enumeration guard of {MAX_TREE_LEAVES}"
        )


def _q_table(spec: GameSpec, s: int, t: int, node_values) -> dict:
    """Per joint action: exact reward-plus-discounted-continuation vector."""
    q = {}
    zero = tuple(Fraction(0) for _ in range(spec.n_agents))
    for joint in spec.joint_actions():
        r = spec.rewards_exact[(s, joint)]
        succ = spec.transitions[(s, joint)]
        if succ == TERMINAL or t + 1 >= spec.horizon:
            cont = zero
        else:
            cont = node_values[(succ, t + 1)]
        q[joint] = tuple(
            ri + spec.gamma_exact * ci for ri, ci in zip(r, cont)
        )
    return q


# ---------------------------------------------------------------------------
# Single-stage solution


def _solve_prefix(q, priority, actions, prefix, policy_out=None):
    """Canonical stage solution below a position-ordered action prefix.

    The agent at position len(prefix) maximizes its own value assuming all
    deeper agents respond per this same rule; exact ties prefer higher-
    priority agents' values lexicographically, then the lowest action index.
    Returns (position-ordered action tuple, per-agent value vector).
    """
    n = len(priority)
    pos = len(prefix)
    if pos == n:
        joint = [0] * n
        for p, a in enumerate(prefix):
            joint[priority[p]] = a
        return prefix, q[tuple(joint)]
    agent = priority[pos]
    leaders = [priority[p] for p in range(pos)]
    best_key, best = None, None
    for a in range(actions[agent]):
        sub, values = _solve_prefix(q, priority, actions, prefix + (a,), policy_out)
        key = (values[agent],) + tuple(values[l] for l in leaders)
        if best_key is None or key > best_key:
            best_key, best = key, (sub, values)
    if policy_out is not None:
        policy_out[prefix] = best[0][pos]
    return best


def _outcome_set(q, priority, actions, prefix) -> list[StageOutcome]:
    """Every outcome reachable below ``prefix`` under some tie-breaking.

    An outcome of action a is realizable if its deciding-agent value is at
    least the *minimum* deciding-agent value of every rival action (rival
    ties may then be broken away from that rival).
    """
    n = len(priority)
    pos = len(prefix)
    if pos == n:
        joint = [0] * n
        for p, a in enumerate(prefix):
            joint[priority[p]] = a
        return [StageOutcome(tuple(joint), q[tuple(joint)])]
    agent = priority[pos]
    per_action = {
        a: _outcome_set(q, priority, actions, prefix + (a,))
        for a in range(actions[agent])
    }
    floors = {a: min(o.values[agent] for o in outs) for a, outs in per_action.items()}
    out: list[StageOutcome] = []
    seen = set()
    for a, outs in per_action.items():
        rival_floor = max(
            (f for b, f in floors.items() if b != a), default=None
        )
        for o in outs:
            if rival_floor is not None and o.values[agent] < rival_floor:
                continue
            key = (o.joint, o.values)
            if key not in seen:
                seen.add(key)
                out.append(o)
    return out


def stackelberg_stage(spec: GameSpec, state, priority, continuation=None):
    """Leader-optimal joint action and values for one stage state.

    ``continuation`` maps successor state name or index to a per-agent value
    sequence; missing or TERMINAL successors contribute zero.
    """
    s = spec.state_index(state) if isinstance(state, str) else state
    priority = _normalize_priority(spec, priority)
    cont = {}
    if continuation:
        for k, v in continuation.items():
            idx = spec.state_index(k) if isinstance(k, str) else k
            cont[idx] = tuple(x if isinstance(x, Fraction) else Fraction(x) for x in v)
    zero = tuple(Fraction(0) for _ in range(spec.n_agents))
    q = {}
    for joint in spec.joint_actions():
        succ = spec.transitions[(s, joint)]
        c = cont.get(succ, zero) if succ != TERMINAL else zero
        q[joint] = tuple(
            ri + spec.gamma_exact * ci
            for ri, ci in zip(spec.rewards_exact[(s, joint)], c)
        )
    prefix, values = _solve_prefix(q, priority, spec.actions, ())
    joint = [0] * spec.n_agents
    for p, a in enumerate(prefix):
        joint[priority[p]] = a
    return tuple(joint), values


def _pure_ne(spec: GameSpec, q) -> frozenset:
    """Joint actions with no profitable unilateral deviation (ties included)."""
    ne = []
    for joint in spec.joint_actions():
        ok = True
        for i in range(spec.n_agents):
            vi = q[joint][i]
            for a in range(spec.actions[i]):
                if a == joint[i]:
                    continue
                dev = joint[:i] + (a,) + joint[i + 1 :]
                if q[dev][i] > vi:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            ne.append(joint)
    return frozenset(ne)


def enumerate_pure_ne(spec: GameSpec, state, t: int | None = None, priority=None) -> frozenset:
    """Pure Nash set of a stage game, using equilibrium continuation values."""
    s = spec.state_index(state) if isinstance(state, str) else state
    report = solve_stages(spec, priority)
    times = [tt for (ss, tt) in report.nodes if ss == s]
    if not times:
        raise OracleError(f"state {state!r} is not reachable")
    if t is None:
        t = min(times)
    elif t not in times:
        raise OracleError(f"state {state!r} is not reachable at time {t}")
    return report.pure_ne[(s, t)]


def _normalize_priority(spec: GameSpec, priority) -> tuple[int, ...]:
    if priority is None:
        return tuple(range(spec.n_agents))
    priority = tuple(int(p) for p in priority)
    if sorted(priority) != list(range(spec.n_agents)):
        raise OracleError(
            f"priority {priority} is not a permutation of 0..{spec.n_agents - 1}"
        )
    return priority


# ---------------------------------------------------------------------------
# Whole-game solution


def solve_stages(spec: GameSpec, priority=None) -> EquilibriumReport:
    priority = _normalize_priority(spec, priority)
    nodes = reachable_nodes(spec)
    _check_size(spec, nodes)

    node_values: dict[Node, tuple[Fraction, ...]] = {}
    stage_joint: dict[Node, tuple[int, ...]] = {}
    pure_ne: dict[Node, frozenset] = {}
    sub_policy: dict = {}
    outcomes: dict[Node, list[StageOutcome]] = {}

    for node in sorted(nodes, key=lambda n: -n[1]):
        s, t = node
        q = _q_table(spec, s, t, node_values)
        policy: dict = {}
        prefix, values = _solve_prefix(q, priority, spec.actions, (), policy)
        joint = [0] * spec.n_agents
        for p, a in enumerate(prefix):
            joint[priority[p]] = a
        stage_joint[node] = tuple(joint)
        node_values[node] = values
        pure_ne[node] = _pure_ne(spec, q)
        for pfx, act in policy.items():
            sub_policy[(node, pfx)] = act
        outcomes[node] = _outcome_set(q, priority, spec.actions, ())

    values_ambiguous = any(
        len({o.values for o in outs}) > 1 for outs in outcomes.values()
    )

    # Canonical trajectory.
    se_path = []
    node = (spec.initial_state, 0)
    while True:
        s, t = node
        joint = stage_joint[node]
        se_path.append((s, joint))
        succ = spec.transitions[(s, joint)]
        if succ == TERMINAL or t + 1 >= spec.horizon:
            break
        node = (succ, t + 1)

    # Every tie-equivalent trajectory.
    def paths_from(node: Node):
        s, t = node
        acc = []
        for o in outcomes[node]:
            succ = spec.transitions[(s, o.joint)]
            if succ == TERMINAL or t + 1 >= spec.horizon:
                acc.append((o.joint,))
            else:
                for tail in paths_from((succ, t + 1)):
                    acc.append((o.joint,) + tail)
        return acc

    se_paths = tuple(sorted(paths_from((spec.initial_state, 0))))

    return EquilibriumReport(
        game=spec.name,
        priority=priority,
        tie_convention=TIE_CONVENTION,
        nodes=sorted(nodes, key=lambda n: (n[1], n[0])),
        pure_ne=pure_ne,
        stage_joint=stage_joint,
        stage_values=node_values,
        sub_policy=sub_policy,
        se_path=se_path,
        se_values=node_values[(spec.initial_state, 0)],
        se_paths=se_paths,
        values_ambiguous=values_ambiguous,
        fully_cooperative=is_fully_cooperative(spec),
        spec=spec,
    )


# ---------------------------------------------------------------------------
# Claim validation


def validate_claims(spec: GameSpec, claims=None, priority=None) -> list[ClaimResult]:
    """Certify each claim against the exact solution; claims default to the
    ones embedded in the game document."""
    if claims is None:
        claims = spec.claims
    report = solve_stages(spec, priority)
    results = []
    for claim in claims:
        if claim.kind == "unique_se":
            passed = len(report.se_paths) == 1 and not report.values_ambiguous
            detail = f"{len(report.se_paths)} tie-equivalent path(s)"
        else:
            s = spec.state_index(claim.stage)
            times = [t for (ss, t) in report.nodes if ss == s]
            if not times:
                results.append(ClaimResult(claim.kind, claim.stage, False,
                                           "stage unreachable"))
                continue
            node = (s, min(times))
            q = _q_table(spec, s, node[1],
                         {n: report.stage_values[n] for n in report.nodes})
            se_vals = report.stage_values[node]
            se_joint = report.stage_joint[node]
            if claim.kind == "ne_set":
                got = report.pure_ne[node]
                want = frozenset(claim.joints)
                passed = got == want
                detail = "NE = {" + " ".join(
                    format_joint(j) for j in sorted(got)) + "}"
            elif claim.kind == "se_pareto_dominates_ne":
                dominated = [
                    ne for ne in report.pure_ne[node]
                    if ne != se_joint
                    and all(sv > qv for sv, qv in zip(se_vals, q[ne]))
                ]
                passed = bool(dominated)
                detail = ("dominates " + " ".join(format_joint(j) for j in sorted(dominated))
                          if dominated else "dominates no pure NE")
            elif claim.kind == "se_highest_avg":
                se_sum = sum(se_vals)
                passed = all(se_sum >= sum(q[j]) for j in q)
                detail = f"stage value sum {se_sum}"
            else:  # unreachable given parser checks
                passed, detail = False, f"unknown claim {claim.kind!r}"
        results.append(ClaimResult(claim.kind, claim.stage, passed, detail))
    return results


# ---------------------------------------------------------------------------
# Rendering


def _fmt_value(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    return f"{v} (~{float(v):.6f})"


def render_report(spec: GameSpec, report: EquilibriumReport, claim_results=None) -> str:
    lines = [
        f"game: {report.game}",
        f"agents: {spec.n_agents}  actions: {' '.join(map(str, spec.actions))}",
        f"priority: {' '.join(str(p + 1) for p in report.priority)}",
        f"tie convention: {report.tie_convention}",
        f"fully cooperative: {'yes' if report.fully_cooperative else 'no'}",
    ]
    for node in report.nodes:
        s, t = node
        lines.append(f"node {spec.states[s]} t={t}:")
        ne = " ".join(format_joint(j) for j in sorted(report.pure_ne[node]))
        lines.append(f"  pure NE: {ne if ne else '(none)'}")
        vals = ", ".join(_fmt_value(v) for v in report.stage_values[node])
        lines.append(
            f"  SE joint: {format_joint(report.stage_joint[node])}  values: {vals}"
        )
    path = " -> ".join(
        f"{spec.states[s]}:{format_joint(j)}" for s, j in report.se_path
    )
    lines.append(f"SE path: {path}")
    lines.append(
        "SE values: " + ", ".join(_fmt_value(v) for v in report.se_values)
    )
    lines.append(f"SE tie-equivalent paths: {len(report.se_paths)}")
    if claim_results is not None:
        lines.append("claims:")
        for r in claim_results:
            stage = f" {r.stage}" if r.stage else ""
            lines.append(
                f"  {r.kind}{stage}: {'PASS' if r.passed else 'FAIL'} ({r.detail})"
            )
    return "\n".join(lines) + "\n"
