"""Mortality calibration: map expected returns to estimated mortality rates.

Every state visit in the training trajectories contributes one sample
(V_real(state), died).  Samples are grouped into equal-width bins over the
observed return range, low-support bins merge into their nearest neighbor,
and a visit-weighted isotonic (non-increasing) regression produces the
calibration curve.  Scoring a policy maps its per-state values through the
curve and averages under a state-visit distribution, yielding the real
versus optimal mortality comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import CalibrationError
from .mdp import MDPModel, Trajectory
from .solver import DEFAULT_EPSILON, policy_evaluation

DEFAULT_N_BINS = 20
DEFAULT_MIN_BIN_SUPPORT = 50

MORTALITY_MAPPINGS = ("per_state", "mean_return")


@dataclass(frozen=True)
class CalibrationCurve:
    """Non-increasing piecewise-linear mortality as a function of return."""

    bin_centers: np.ndarray
    mortality: np.ndarray
    support: np.ndarray
    domain: Tuple[float, float]

    def validate(self) -> None:
        if len(self.bin_centers) < 2:
            raise ValueError("curve needs at least two bins")
        if np.any(np.diff(self.bin_centers) <= 0):
            raise ValueError("bin centers must be strictly increasing")
        if np.any(self.mortality < 0) or np.any(self.mortality > 1):
            raise ValueError("mortality rates must lie in [0, 1]")
        if np.any(np.diff(self.mortality) > 1e-12):
            raise ValueError("mortality must be non-increasing in return")


@dataclass(frozen=True)
class PolicyScore:
    mean_return: float
    estimated_mortality: float


@dataclass(frozen=True)
class EvaluationReport:
    representation: str
    real: PolicyScore
    optimal: PolicyScore
    cohort_mortality: float
    config_digest: str
    seed: int


def collect_samples(V_real, trajectories: Sequence[Trajectory]):
    """Per-visit (return, died) pairs; died is the whole patient's outcome."""
    values = np.asarray(V_real, dtype=float)
    k = len(values)
    death_state = k + 1
    returns: List[float] = []
    died: List[int] = []
    for traj in trajectories:
        if not traj.steps:
            continue
        outcome = 1 if traj.steps[-1][2] == death_state else 0
        for s, _, _ in traj.steps:
            if not 0 <= s < k:
                raise ValueError("visit to state %d outside the %d value entries"
                                 % (s, k))
            returns.append(float(values[s]))
            died.append(outcome)
    return np.array(returns), np.array(died, dtype=float)


def _pav_non_increasing(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted pool-adjacent-violators under a non-increasing constraint."""
    means: List[float] = []
    wts: List[float] = []
    sizes: List[int] = []
    for v, w in zip(values, weights):
        means.append(float(v))
        wts.append(float(w))
        sizes.append(1)
        while len(means) > 1 and means[-2] < means[-1]:
            total = wts[-1] + wts[-2]
            pooled = (means[-1] * wts[-1] + means[-2] * wts[-2]) / total
            means[-2:] = [pooled]
            wts[-2:] = [total]
            sizes[-2:] = [sizes[-1] + sizes[-2]]
    out = np.empty(len(values))
    pos = 0
    for m, n in zip(means, sizes):
        out[pos:pos + n] = m
        pos += n
    return out


def fit_curve(V_real, trajectories: Sequence[Trajectory],
              n_bins: int = DEFAULT_N_BINS,
              min_bin_support: int = DEFAULT_MIN_BIN_SUPPORT) -> CalibrationCurve:
    """Bin per-visit samples, merge thin bins, and isotonize the mortalities.

    V_real holds the evaluated values of the k non-terminal states, indexed
    by state id; a trajectory counts as died when it ends in state k + 1.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    if min_bin_support < 1:
        raise ValueError("min_bin_support must be at least 1")
    returns, died = collect_samples(V_real, trajectories)
    if len(returns) == 0:
        raise CalibrationError("no state visits to calibrate on")
    lo, hi = float(returns.min()), float(returns.max())
    if hi <= lo:
        raise CalibrationError("all visits share one expected return, "
                               "cannot form a curve")

    width = (hi - lo) / n_bins
    idx = np.minimum(((returns - lo) / width).astype(int), n_bins - 1)

    bins = []  # (support, sum_return, sum_died) in return order
    for b in range(n_bins):
        mask = idx == b
        n = int(mask.sum())
        if n:
            bins.append([n, float(returns[mask].sum()), float(died[mask].sum())])

    # merge the thinnest bin into its nearest-center neighbor until all
    # surviving bins carry enough visits
    while len(bins) > 1 and min(b[0] for b in bins) < min_bin_support:
        supports = [b[0] for b in bins]
        i = supports.index(min(supports))
        centers = [b[1] / b[0] for b in bins]
        if i == 0:
            j = 1
        elif i == len(bins) - 1:
            j = i - 1
        else:
            left_gap = centers[i] - centers[i - 1]
            right_gap = centers[i + 1] - centers[i]
            j = i - 1 if left_gap <= right_gap else i + 1
        lo_i, hi_i = min(i, j), max(i, j)
        merged = [bins[lo_i][0] + bins[hi_i][0],
                  bins[lo_i][1] + bins[hi_i][1],
                  bins[lo_i][2] + bins[hi_i][2]]
        bins[lo_i:hi_i + 1] = [merged]
    if len(bins) < 2 or any(b[0] < min_bin_support for b in bins):
        raise CalibrationError(
            "only %d bin(s) reach min_bin_support=%d, cohort too small"
            % (sum(b[0] >= min_bin_support for b in bins), min_bin_support))

    support = np.array([b[0] for b in bins], dtype=np.int64)
    centers = np.array([b[1] / b[0] for b in bins])
    raw = np.array([b[2] / b[0] for b in bins])
    mortality = _pav_non_increasing(raw, support.astype(float))
    curve = CalibrationCurve(centers, np.clip(mortality, 0.0, 1.0),
                             support, (lo, hi))
    curve.validate()
    return curve


def estimate_mortality(curve: CalibrationCurve, expected_return):
    """Piecewise-linear lookup, flat beyond the outermost bin centers."""
    result = np.interp(expected_return, curve.bin_centers, curve.mortality)
    if np.ndim(expected_return) == 0:
        return float(result)
    return result


def visitation_from_trajectories(trajectories: Sequence[Trajectory],
                                 k: int) -> np.ndarray:
    """Empirical distribution of visited source states."""
    counts = np.zeros(k, dtype=float)
    for traj in trajectories:
        for s, _, _ in traj.steps:
            if not 0 <= s < k:
                raise ValueError("visit to state %d outside [0, %d)" % (s, k))
            counts[s] += 1.0
    total = counts.sum()
    if total == 0:
        raise ValueError("no state visits in the trajectories")
    return counts / total


def empirical_mortality(trajectories: Sequence[Trajectory], k: int) -> float:
    """Fraction of patients whose trajectory ends in DEATH (= state k + 1)."""
    if not trajectories:
        raise ValueError("no trajectories")
    deaths = sum(1 for t in trajectories if t.steps and t.steps[-1][2] == k + 1)
    return deaths / len(trajectories)


def _score_policy(mdp: MDPModel, policy, curve: CalibrationCurve,
                  weights: np.ndarray, epsilon: float,
                  mortality_mapping: str) -> PolicyScore:
    v = policy_evaluation(mdp, policy, epsilon)[:mdp.k]
    mean_return = float(weights @ v)
    if mortality_mapping == "per_state":
        mortality = float(weights @ estimate_mortality(curve, v))
    else:
        mortality = estimate_mortality(curve, mean_return)
    return PolicyScore(mean_return, mortality)


def evaluate(mdp: MDPModel, pi_real, pi_opt, curve: CalibrationCurve,
             test_visitation, cohort_mortality: float,
             representation: str = "raw", config_digest: str = "",
             seed: int = 0, epsilon: float = DEFAULT_EPSILON,
             mortality_mapping: str = "per_state") -> EvaluationReport:
    """Score both policies under the test visitation and assemble the report.

    Estimated mortality maps each state's value through the curve and then
    averages (per_state); mortality_mapping="mean_return" instead maps the
    single weighted-mean return.
    """
    if mortality_mapping not in MORTALITY_MAPPINGS:
        raise ValueError("mortality_mapping must be one of %r" % (MORTALITY_MAPPINGS,))
    w = np.asarray(test_visitation, dtype=float)
    if w.shape != (mdp.k,):
        raise ValueError("test visitation must cover the %d non-terminal states" % mdp.k)
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("test visitation must be finite and non-negative")
    total = float(w.sum())
    if total <= 0:
        raise ValueError("test visitation is empty")
    if abs(total - 1.0) > 1e-9:
        raise ValueError("test visitation must sum to 1, got %r" % total)
    if not 0.0 <= cohort_mortality <= 1.0:
        raise ValueError("cohort mortality must lie in [0, 1]")

    real = _score_policy(mdp, pi_real, curve, w, epsilon, mortality_mapping)
    optimal = _score_policy(mdp, pi_opt, curve, w, epsilon, mortality_mapping)
    return EvaluationReport(
        representation=representation,
        real=real,
        optimal=optimal,
        cohort_mortality=float(cohort_mortality),
        config_digest=config_digest,
        seed=int(seed),
    )


def report_to_dict(report: EvaluationReport) -> dict:
    return {
        "representation": report.representation,
        "real": {
            "mean_expected_return": report.real.mean_return,
            "estimated_mortality": report.real.estimated_mortality,
        },
        "optimal": {
            "mean_expected_return": report.optimal.mean_return,
            "estimated_mortality": report.optimal.estimated_mortality,
        },
        "cohort_mortality": report.cohort_mortality,
        "config_digest": report.config_digest,
        "seed": report.seed,
    }


def emit_curve_csv(curve: CalibrationCurve) -> str:
    lines = ["expected_return,estimated_mortality,support"]
    for c, m, s in zip(curve.bin_centers, curve.mortality, curve.support):
        lines.append("%s,%s,%d" % (repr(float(c)), repr(float(m)), int(s)))
    return "\n".join(lines) + "\n"


def parse_curve_csv(text: str) -> CalibrationCurve:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != "expected_return,estimated_mortality,support":
        raise ValueError("not a calibration curve CSV")
    centers, mortality, support = [], [], []
    for ln in lines[1:]:
        c, m, s = ln.split(",")
        centers.append(float(c))
        mortality.append(float(m))
        support.append(int(s))
    curve = CalibrationCurve(np.array(centers), np.array(mortality),
                             np.array(support, dtype=np.int64),
                             (centers[0], centers[-1]))
    curve.validate()
    return curve
