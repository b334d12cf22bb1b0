"""Exact dynamic programming on the estimated MDP.

Iterative policy evaluation (synchronous Jacobi sweeps from v_0 = 0), greedy
improvement with lowest-index tie-breaks, and full policy iteration.  The
sparse transition structure is compiled once into flat arrays so each sweep
is a handful of vectorized operations; results are bit-deterministic.

Rewards sit on transitions into the terminal states, so every value is
bounded by 100 in magnitude and evaluation contracts at rate gamma.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ArtifactError, ConvergenceError
from .mdp import FALLBACK_ACTION, MDPModel

DEFAULT_EPSILON = 1e-4
MAX_EVAL_SWEEPS = 1_000_000
MAX_IMPROVEMENTS = 1000

SOLUTION_FORMAT = "glyrl-solution"
SOLUTION_FORMAT_VERSION = 1


@dataclass
class PolicySolution:
    policy: np.ndarray  # (k,) action per non-terminal state
    V: np.ndarray  # (n_states,), terminals exactly 0
    Q: np.ndarray  # (k, n_actions), NaN where the action is unavailable
    eval_sweeps: int
    improvements: int
    converged: bool


@dataclass
class _Compiled:
    """Flat view of the MDP: one row per available (state, action) pair."""

    k: int
    n_states: int
    gamma: float
    pair_state: np.ndarray
    pair_action: np.ndarray
    pair_reward: np.ndarray  # expected immediate reward of the pair
    t_target: np.ndarray  # transition targets, flattened per pair
    t_prob: np.ndarray
    pair_ptr: np.ndarray  # start offset of each pair's transitions
    pair_index: np.ndarray  # (k, n_actions) -> pair row or -1

    def expected_next(self, v: np.ndarray) -> np.ndarray:
        """Sum_s' P(s,a,s') v(s') for every pair, in one reduceat pass."""
        return np.add.reduceat(self.t_prob * v[self.t_target], self.pair_ptr)


def _compile(mdp: MDPModel) -> _Compiled:
    k = mdp.k
    n_actions = mdp.n_actions
    pair_index = np.full((k, n_actions), -1, dtype=np.int64)

    pair_state, pair_action, pair_reward = [], [], []
    targets, probs, ptr = [], [], []
    kept = mdp.trans_p > 0.0
    by_pair = {}
    for s, a, sp, p in zip(mdp.trans_s[kept], mdp.trans_a[kept],
                           mdp.trans_sp[kept], mdp.trans_p[kept]):
        by_pair.setdefault((int(s), int(a)), []).append((int(sp), float(p)))

    offset = 0
    for s in range(k):
        for a in range(n_actions):
            if not mdp.available[s, a]:
                continue
            pair_index[s, a] = len(pair_state)
            pair_state.append(s)
            pair_action.append(a)
            if s in mdp.fallback_states and a == FALLBACK_ACTION and (s, a) not in by_pair:
                rows = [(s, 1.0)]  # flagged self-loop, zero reward
            else:
                rows = by_pair[(s, a)]
            reward = sum(p * mdp.reward_into(sp) for sp, p in rows)
            pair_reward.append(reward)
            ptr.append(offset)
            for sp, p in rows:
                targets.append(sp)
                probs.append(p)
            offset += len(rows)

    return _Compiled(
        k=k,
        n_states=mdp.n_states,
        gamma=mdp.gamma,
        pair_state=np.array(pair_state, dtype=np.int64),
        pair_action=np.array(pair_action, dtype=np.int64),
        pair_reward=np.array(pair_reward, dtype=float),
        t_target=np.array(targets, dtype=np.int64),
        t_prob=np.array(probs, dtype=float),
        pair_ptr=np.array(ptr, dtype=np.int64),
        pair_index=pair_index,
    )


def _check_policy(mdp: MDPModel, policy, compiled: _Compiled) -> np.ndarray:
    pol = np.asarray(policy, dtype=np.int64)
    if pol.shape != (mdp.k,):
        raise ValueError("policy must assign one action to each of %d states" % mdp.k)
    if np.any(pol < 0) or np.any(pol >= mdp.n_actions):
        raise ValueError("policy contains an action outside the action space")
    rows = compiled.pair_index[np.arange(mdp.k), pol]
    if np.any(rows < 0):
        bad = int(np.flatnonzero(rows < 0)[0])
        raise ValueError("policy picks unavailable action %d at state %d"
                         % (int(pol[bad]), bad))
    return pol


def _evaluate(compiled: _Compiled, rows: np.ndarray, epsilon: float,
              v0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int]:
    v = np.zeros(compiled.n_states) if v0 is None else v0.copy()
    sweeps = 0
    while True:
        q = compiled.pair_reward + compiled.gamma * compiled.expected_next(v)
        v_new = np.zeros(compiled.n_states)
        v_new[:compiled.k] = q[rows]
        sweeps += 1
        delta = float(np.max(np.abs(v_new - v))) if compiled.n_states else 0.0
        v = v_new
        if delta < epsilon:
            return v, sweeps
        if sweeps >= MAX_EVAL_SWEEPS:
            raise ConvergenceError(
                "policy evaluation still moving %r after %d sweeps" % (delta, sweeps))


def policy_evaluation(mdp: MDPModel, policy, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Iterate the Bellman expectation update until the sup-norm step < epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    compiled = _compile(mdp)
    pol = _check_policy(mdp, policy, compiled)
    rows = compiled.pair_index[np.arange(mdp.k), pol]
    v, _ = _evaluate(compiled, rows, epsilon)
    return v


def q_from_v(mdp: MDPModel, V) -> np.ndarray:
    """Q(s,a) = R_s^a + gamma * sum_s' P(s,a,s') V(s') on available pairs."""
    v = np.asarray(V, dtype=float)
    if v.shape != (mdp.n_states,):
        raise ValueError("V must cover all %d states" % mdp.n_states)
    compiled = _compile(mdp)
    return _q_table(compiled, v)


def _q_table(compiled: _Compiled, v: np.ndarray) -> np.ndarray:
    q_pairs = compiled.pair_reward + compiled.gamma * compiled.expected_next(v)
    Q = np.full(compiled.pair_index.shape, np.nan)
    Q[compiled.pair_state, compiled.pair_action] = q_pairs
    return Q


def greedy_improve(mdp: MDPModel, Q) -> np.ndarray:
    """Argmax over available actions per state; ties go to the lowest index."""
    q = np.asarray(Q, dtype=float)
    if q.shape != (mdp.k, mdp.n_actions):
        raise ValueError("Q must be shaped (%d, %d)" % (mdp.k, mdp.n_actions))
    masked = np.where(mdp.available & np.isfinite(q), q, -np.inf)
    if np.any(~np.isfinite(masked).any(axis=1)):
        raise ValueError("some state has no finite Q value over available actions")
    return np.argmax(masked, axis=1).astype(np.int64)


def policy_iteration(mdp: MDPModel, epsilon: float = DEFAULT_EPSILON,
                     initial_policy=None,
                     max_improvements: int = MAX_IMPROVEMENTS) -> PolicySolution:
    """Alternate full evaluation and greedy improvement until the policy is stable.

    Evaluation warm-starts from the previous value function (same fixed point,
    fewer sweeps).  Starts from the lowest-index available action in each
    state unless an initial policy (e.g. the behavioral one) is supplied.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    compiled = _compile(mdp)
    if initial_policy is None:
        policy = np.argmax(mdp.available, axis=1).astype(np.int64)
    else:
        policy = _check_policy(mdp, initial_policy, compiled)

    v = None
    total_sweeps = 0
    for round_no in range(1, max_improvements + 1):
        rows = compiled.pair_index[np.arange(mdp.k), policy]
        v, sweeps = _evaluate(compiled, rows, epsilon, v0=v)
        total_sweeps += sweeps
        improved = greedy_improve(mdp, _q_table(compiled, v))
        if np.array_equal(improved, policy):
            return PolicySolution(policy=policy, V=v, Q=_q_table(compiled, v),
                                  eval_sweeps=total_sweeps,
                                  improvements=round_no, converged=True)
        policy = improved
    raise ConvergenceError(
        "policy iteration did not stabilize within %d improvements" % max_improvements)


def evaluate_policy_return(mdp: MDPModel, policy, initial_state_weights,
                           epsilon: float = DEFAULT_EPSILON) -> float:
    """Weighted mean of V^policy over non-terminal states."""
    w = np.asarray(initial_state_weights, dtype=float)
    if w.shape != (mdp.k,):
        raise ValueError("weights must cover exactly the %d non-terminal states" % mdp.k)
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1, got %r" % float(w.sum()))
    v = policy_evaluation(mdp, policy, epsilon)
    return float(w @ v[:mdp.k])


def write_solution(path: str, solution: PolicySolution, label: str) -> None:
    """Header JSON line, then `state_id,policy_action,V` per non-terminal state."""
    header = {
        "format": SOLUTION_FORMAT,
        "version": SOLUTION_FORMAT_VERSION,
        "label": label,
        "k": int(len(solution.policy)),
        "eval_sweeps": int(solution.eval_sweeps),
        "improvements": int(solution.improvements),
        "converged": bool(solution.converged),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write("state_id,policy_action,V\n")
        for s, (a, v) in enumerate(zip(solution.policy, solution.V)):
            fh.write("%d,%d,%s\n" % (s, int(a), repr(float(v))))
    os.replace(tmp, path)


def read_solution(path: str) -> Tuple[np.ndarray, np.ndarray, str]:
    """Returns (policy, V over non-terminal states, label)."""
    try:
        with open(path) as fh:
            try:
                header = json.loads(fh.readline())
            except json.JSONDecodeError:
                raise ArtifactError("%s does not start with a solution header" % path)
            if not isinstance(header, dict) or header.get("format") != SOLUTION_FORMAT:
                raise ArtifactError("%s is not a solution file" % path)
            if header.get("version") != SOLUTION_FORMAT_VERSION:
                raise ArtifactError("unsupported solution version %r"
                                    % (header.get("version"),))
            if fh.readline().strip() != "state_id,policy_action,V":
                raise ArtifactError("unexpected solution column header in %s" % path)
            states, actions, values = [], [], []
            for line in fh:
                s, a, v = line.rstrip("\n").split(",")
                states.append(int(s))
                actions.append(int(a))
                values.append(float(v))
    except OSError as exc:
        raise ArtifactError("cannot read solution %s: %s" % (path, exc))
    except ValueError as exc:
        raise ArtifactError("malformed solution file %s: %s" % (path, exc))
    k = int(header.get("k", len(states)))
    if states != list(range(k)):
        raise ArtifactError("solution rows in %s are not the contiguous states" % path)
    return (np.array(actions, dtype=np.int64), np.array(values, dtype=float),
            str(header.get("label", "")))


def write_q_table(path: str, solution: PolicySolution) -> None:
    """`state_id,action,Q` triplets for every available pair."""
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("state_id,action,Q\n")
        k, n_actions = solution.Q.shape
        for s in range(k):
            for a in range(n_actions):
                q = solution.Q[s, a]
                if np.isfinite(q):
                    fh.write("%d,%d,%s\n" % (s, a, repr(float(q))))
    os.replace(tmp, path)
