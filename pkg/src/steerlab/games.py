"""Sequential Markov matrix games driven by declarative text documents.

A game document is key/value lines plus one reward/transition table per stage
state.  Payoffs are parsed exactly (as fractions) so the equilibrium oracle
can compare them without floating-point tolerance; the environment itself
emits plain floats.

Dynamics are deterministic: one transition and one reward vector per
(state, joint action), with an optional ``default`` fallback row.  Episodes
end on a TERMINAL transition or when the step counter reaches the horizon.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

TERMINAL = -1  # pseudo state index

GLOBAL_STATE = "global"
LOCAL_ONLY = "local"

CLAIM_KINDS = frozenset(
    {"unique_se", "ne_set", "se_pareto_dominates_ne", "se_highest_avg"}
)


class GameError(Exception):
    """Base class for game-document problems."""


class ParseError(GameError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ValidationError(GameError):
    pass


class ContractError(GameError):
    """Runtime misuse of the environment (bad action, step after done)."""


@dataclass(frozen=True)
class Claim:
    """A property the equilibrium oracle must certify for this game."""

    kind: str
    stage: str | None = None
    joints: tuple[tuple[int, ...], ...] | None = None


@dataclass(frozen=True)
class GameSpec:
    name: str
    n_agents: int
    actions: tuple[int, ...]
    states: tuple[str, ...]
    initial_state: int
    transitions: dict  # (state, joint) -> next state index or TERMINAL
    rewards: dict  # (state, joint) -> tuple of floats
    rewards_exact: dict  # (state, joint) -> tuple of Fractions
    horizon: int
    obs_mode: str
    gamma: float
    gamma_exact: Fraction
    claims: tuple[Claim, ...] = ()
    description: str = ""
    source_path: str | None = None
    # per-state observation encodings, precomputed at load
    obs_per_agent: np.ndarray = field(repr=False, default=None)
    obs_global: np.ndarray = field(repr=False, default=None)

    @property
    def obs_width(self) -> int:
        return len(self.states) + self.n_agents

    @property
    def state_width(self) -> int:
        return len(self.states)

    def state_index(self, name: str) -> int:
        return self.states.index(name)

    def joint_actions(self):
        return itertools.product(*(range(k) for k in self.actions))


@dataclass
class EnvState:
    state: int  # stage-state index, TERMINAL after a terminal transition
    step: int
    done: bool


@dataclass(frozen=True)
class Observation:
    per_agent: np.ndarray  # (n_agents, obs_width)
    global_state: np.ndarray | None  # (state_width,) in global mode


def format_joint(joint) -> str:
    return "(" + ",".join(f"a{a + 1}" for a in joint) + ")"


# ---------------------------------------------------------------------------
# Document parsing


def _parse_action_label(tok: str, line: int) -> int:
    if not tok.startswith("a"):
        raise ParseError(f"expected action label like 'a1', got {tok!r}", line)
    try:
        v = int(tok[1:])
    except ValueError:
        raise ParseError(f"expected action label like 'a1', got {tok!r}", line) from None
    if v < 1:
        raise ParseError(f"action labels are 1-based, got {tok!r}", line)
    return v - 1


def _parse_joint(tokens, n_agents: int, line: int) -> tuple[int, ...]:
    if len(tokens) != n_agents:
        raise ParseError(
            f"joint action needs {n_agents} labels, got {len(tokens)}", line
        )
    return tuple(_parse_action_label(t, line) for t in tokens)


def _parse_fraction(tok: str, line: int) -> Fraction:
    try:
        return Fraction(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", line) from None


def parse_document(text: str, source_path: str | None = None) -> GameSpec:
    """Parse and eagerly validate a game document."""
    header: dict[str, tuple[str, int]] = {}
    tables: dict[str, dict] = {}
    claims: list[Claim] = []
    description_lines: list[str] = []
    current_stage: str | None = None
    seen_header_end = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if not seen_header_end:
                description_lines.append(line.lstrip("# "))
            continue
        seen_header_end = True
        tokens = line.split()
        key = tokens[0]

        if current_stage is not None:
            if key == "end":
                current_stage = None
                continue
            if ":" not in tokens or "->" not in tokens:
                raise ParseError("table row must look like 'a1 a2 : r1 r2 -> next'", lineno)
            ci, ai = tokens.index(":"), tokens.index("->")
            lhs, rew, nxt = tokens[:ci], tokens[ci + 1 : ai], tokens[ai + 1 :]
            if len(nxt) != 1:
                raise ParseError("expected exactly one successor state", lineno)
            tables[current_stage]["rows"].append((lhs, rew, nxt[0], lineno))
            continue

        if key == "stage":
            if len(tokens) != 2:
                raise ParseError("stage needs exactly one state name", lineno)
            if tokens[1] in tables:
                raise ParseError(f"duplicate table for state {tokens[1]!r}", lineno)
            tables[tokens[1]] = {"rows": [], "line": lineno}
            current_stage = tokens[1]
        elif key == "claim":
            claims.append((tokens[1:], lineno))
        elif key in {"name", "agents", "actions", "states", "initial", "horizon",
                     "gamma", "obs_mode"}:
            if key in header:
                raise ParseError(f"duplicate field {key!r}", lineno)
            header[key] = (" ".join(tokens[1:]), lineno)
        else:
            raise ParseError(f"unknown directive {key!r}", lineno)

    if current_stage is not None:
        raise ParseError(f"table for state {current_stage!r} is missing its 'end'",
                         tables[current_stage]["line"])

    def need(key: str) -> tuple[str, int]:
        if key not in header:
            raise ParseError(f"missing required field {key!r}")
        return header[key]

    name = need("name")[0]
    val, ln = need("agents")
    try:
        n_agents = int(val)
    except ValueError:
        raise ParseError(f"agents must be an integer, got {val!r}", ln) from None
    if n_agents < 1:
        raise ParseError("agents must be >= 1", ln)

    val, ln = need("actions")
    toks = val.split()
    if len(toks) != n_agents:
        raise ParseError(f"actions must list {n_agents} counts, got {len(toks)}", ln)
    try:
        actions = tuple(int(t) for t in toks)
    except ValueError:
        raise ParseError(f"actions must be integers, got {val!r}", ln) from None
    if any(a < 1 for a in actions):
        raise ParseError("every action count must be >= 1", ln)

    val, ln = need("states")
    states = tuple(val.split())
    if len(set(states)) != len(states):
        raise ParseError("duplicate state names", ln)

    val, ln = need("initial")
    if val not in states:
        raise ParseError(f"initial state {val!r} not among states", ln)
    initial = states.index(val)

    val, ln = need("horizon")
    try:
        horizon = int(val)
    except ValueError:
        raise ParseError(f"horizon must be an integer, got {val!r}", ln) from None
    if horizon < 1:
        raise ParseError("horizon must be >= 1", ln)

    val, ln = need("gamma")
    gamma_exact = _parse_fraction(val, ln)
    if not (0 <= gamma_exact <= 1):
        raise ParseError("gamma must lie in [0, 1]", ln)

    val, ln = need("obs_mode")
    if val not in {GLOBAL_STATE, LOCAL_ONLY}:
        raise ParseError(f"obs_mode must be '{GLOBAL_STATE}' or '{LOCAL_ONLY}'", ln)
    obs_mode = val

    # Assemble transition/reward maps.
    transitions: dict = {}
    rewards: dict = {}
    rewards_exact: dict = {}
    for state_name in tables:
        if state_name not in states:
            raise ParseError(f"table references unknown state {state_name!r}",
                             tables[state_name]["line"])
    for state_name, tbl in tables.items():
        s = states.index(state_name)
        default = None
        explicit = {}
        for lhs, rew, nxt, lineno in tbl["rows"]:
            if len(rew) != n_agents:
                raise ParseError(
                    f"reward vector needs {n_agents} entries, got {len(rew)}", lineno
                )
            exact = tuple(_parse_fraction(r, lineno) for r in rew)
            if nxt == "TERMINAL":
                succ = TERMINAL
            elif nxt in states:
                succ = states.index(nxt)
            else:
                raise ParseError(f"unknown successor state {nxt!r}", lineno)
            if lhs == ["default"]:
                if default is not None:
                    raise ParseError(f"duplicate default row for state {state_name!r}",
                                     lineno)
                default = (exact, succ)
                continue
            joint = _parse_joint(lhs, n_agents, lineno)
            for i, a in enumerate(joint):
                if a >= actions[i]:
                    raise ParseError(
                        f"action {format_joint(joint)} out of range for agent {i + 1}",
                        lineno,
                    )
            if joint in explicit:
                raise ParseError(
                    f"duplicate row for {state_name!r} {format_joint(joint)}", lineno
                )
            explicit[joint] = (exact, succ)
        for joint in itertools.product(*(range(k) for k in actions)):
            if joint in explicit:
                exact, succ = explicit[joint]
            elif default is not None:
                exact, succ = default
            else:
                raise ValidationError(
                    f"state {state_name!r} has no transition/reward for "
                    f"{format_joint(joint)} and no default row"
                )
            transitions[(s, joint)] = succ
            rewards_exact[(s, joint)] = exact
            rewards[(s, joint)] = tuple(float(x) for x in exact)

    for s, state_name in enumerate(states):
        if state_name not in tables:
            raise ValidationError(f"state {state_name!r} has no table")

    parsed_claims = tuple(_parse_claim(c, n_agents, states, lineno)
                          for c, lineno in claims)

    obs_pa, obs_g = _build_observations(len(states), n_agents)
    return GameSpec(
        name=name,
        n_agents=n_agents,
        actions=actions,
        states=states,
        initial_state=initial,
        transitions=transitions,
        rewards=rewards,
        rewards_exact=rewards_exact,
        horizon=horizon,
        obs_mode=obs_mode,
        gamma=float(gamma_exact),
        gamma_exact=gamma_exact,
        claims=parsed_claims,
        description="\n".join(description_lines),
        source_path=source_path,
        obs_per_agent=obs_pa,
        obs_global=obs_g,
    )


def _parse_claim(tokens, n_agents, states, lineno) -> Claim:
    if not tokens:
        raise ParseError("empty claim", lineno)
    kind = tokens[0]
    if kind not in CLAIM_KINDS:
        raise ParseError(f"unknown claim kind {kind!r}", lineno)
    rest = tokens[1:]
    if kind == "unique_se":
        if rest:
            raise ParseError("unique_se takes no arguments", lineno)
        return Claim(kind="unique_se")
    if not rest or rest[0] not in states:
        raise ParseError(f"claim {kind!r} needs a stage state", lineno)
    stage = rest[0]
    rest = rest[1:]
    if kind == "ne_set":
        if not rest or rest[0] != ":":
            raise ParseError("ne_set needs ': a.. a.. | ...'", lineno)
        groups, cur = [], []
        for tok in rest[1:]:
            if tok == "|":
                groups.append(cur)
                cur = []
            else:
                cur.append(tok)
        groups.append(cur)
        joints = tuple(_parse_joint(g, n_agents, lineno) for g in groups)
        return Claim(kind="ne_set", stage=stage, joints=joints)
    if rest:
        raise ParseError(f"claim {kind!r} takes only a stage state", lineno)
    return Claim(kind=kind, stage=stage)


def _build_observations(n_states: int, n_agents: int):
    width = n_states + n_agents
    per_agent = np.zeros((n_states, n_agents, width))
    for s in range(n_states):
        for i in range(n_agents):
            per_agent[s, i, s] = 1.0
            per_agent[s, i, n_states + i] = 1.0
    global_ = np.eye(n_states)
    return per_agent, global_


def load_spec(path: str) -> GameSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_document(fh.read(), source_path=path)


# ---------------------------------------------------------------------------
# Dynamics


def observation(spec: GameSpec, state: int) -> Observation:
    g = spec.obs_global[state] if spec.obs_mode == GLOBAL_STATE else None
    return Observation(per_agent=spec.obs_per_agent[state], global_state=g)


def reset(spec: GameSpec) -> tuple[EnvState, Observation]:
    return EnvState(state=spec.initial_state, step=0, done=False), observation(
        spec, spec.initial_state
    )


def step(spec: GameSpec, state: EnvState, joint) -> tuple[EnvState, Observation | None, tuple[float, ...], bool]:
    """Advance one step. Returns (state, next observation or None, rewards, done)."""
    if state.done:
        raise ContractError("step called on a finished episode")
    joint = tuple(int(a) for a in joint)
    if len(joint) != spec.n_agents:
        raise ContractError(
            f"joint action needs {spec.n_agents} entries, got {len(joint)}"
        )
    for i, a in enumerate(joint):
        if not 0 <= a < spec.actions[i]:
            raise ContractError(
                f"action {a} out of range for agent {i + 1} (max {spec.actions[i] - 1})"
            )
    key = (state.state, joint)
    rewards = spec.rewards[key]
    succ = spec.transitions[key]
    nstep = state.step + 1
    done = succ == TERMINAL or nstep >= spec.horizon
    nstate = EnvState(state=succ, step=nstep, done=done)
    obs = observation(spec, succ) if succ != TERMINAL else None
    return nstate, obs, rewards, done


def is_fully_cooperative(spec: GameSpec) -> bool:
    for vec in spec.rewards.values():
        first = vec[0]
        if any(v != first for v in vec[1:]):
            return False
    return True
