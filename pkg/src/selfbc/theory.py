"""Exact tabular checks of the conservative-policy-iteration machinery.

Conventions
-----------
``visitation`` returns the unnormalized discounted occupancy
``rho = (I - gamma P_pi^T)^-1 rho0`` (total mass ``1/(1-gamma)``); the
normalized distribution is ``d = (1-gamma) rho``.

Expectations over states are taken under normalized distributions and each
bound term carries its ``1/(1-gamma)`` factors explicitly. Under this
reading the surrogate ``j_delta_hat`` is ``sum_s d_D(s) sum_a pi A / (1-gamma)``,
so it is on the same scale as the exact ``J(pi) - J(pi_k)`` and coincides
with the performance-difference sum when ``d_D`` is the visitation of the
policy being compared against. The bound coefficients are

    term_prime_ref       2 gamma kappa^2 / (1-gamma)^2 * AA * E_{d_pik}[TV(pi'||pi_k)]
    term_ref_behavior    2 gamma kappa   / (1-gamma)^2 * AA * E_{d_pib}[TV(pi_k||pi_b)]
    term_behavior_approx   gamma kappa   / (1-gamma)^2 * AA * sum_{s,a} d_D(s) pi_bD(a|s) (1 - pi_b(a|s))

with ``AA = 2 max|A_pik| max_s TV(pi'||pi_k)``. ``verify_theory`` confirms
numerically that this convention satisfies both inequalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import FiniteMdp, random_finite_mdp
from .numerics import InvalidInputError

BOUND_SLACK = 1e-9
KAPPA_GRID = (5e-5, 1e-3, 0.1, 0.5, 1.0)
SMALL_KAPPAS = (5e-5, 5e-6)


@dataclass(eq=False)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise InvalidInputError("policy must be an [n_states, n_actions] matrix")
        if np.any(self.probs < 0) or np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-12:
            raise InvalidInputError("policy rows must be probability vectors")

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(eq=False)
class EvalResult:
    Q: np.ndarray
    V: np.ndarray
    A: np.ndarray
    J: float


@dataclass(eq=False)
class BoundTerms:
    j_delta: float
    j_delta_hat: float
    term_prime_ref: float
    term_ref_behavior: float
    term_behavior_approx: float
    A_sup: float
    kappa: float

    @property
    def rhs(self) -> float:
        return (
            self.j_delta_hat
            - self.term_prime_ref
            - self.term_ref_behavior
            - self.term_behavior_approx
        )

    @property
    def margin(self) -> float:
        return self.j_delta - self.rhs

    @property
    def holds(self) -> bool:
        return self.j_delta >= self.rhs - BOUND_SLACK


@dataclass(eq=False)
class WeightedBehaviorSpec:
    """Per-state action weights ``w`` over the data distribution ``pi_b_D``.

    ``C[s] = sum_a pi_b_D(a|s) w(s,a)`` and ``q_w = pi_b_D w / C``.
    """

    weights: np.ndarray
    pi_b_D: TabularPolicy

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != self.pi_b_D.probs.shape:
            raise InvalidInputError("weights must match the behavior policy's shape")
        if np.any(self.weights < 0):
            raise InvalidInputError("weights must be nonnegative")

    @property
    def normalizer(self) -> np.ndarray:
        return np.sum(self.pi_b_D.probs * self.weights, axis=1)

    def q_w(self) -> np.ndarray:
        C = self.normalizer
        if np.any(C <= 0):
            raise InvalidInputError(f"weight normalizer is zero at states {np.flatnonzero(C <= 0).tolist()}")
        return self.pi_b_D.probs * self.weights / C[:, None]


def _check_pair(mdp: FiniteMdp, *policies: TabularPolicy) -> None:
    for pi in policies:
        if pi.probs.shape != mdp.r.shape:
            raise InvalidInputError(f"policy shape {pi.probs.shape} does not match MDP {mdp.r.shape}")


def policy_transition(mdp: FiniteMdp, pi: TabularPolicy) -> np.ndarray:
    """``P_pi[s, s'] = sum_a pi(a|s) P(s, a, s')``."""
    return np.einsum("sa,sat->st", pi.probs, mdp.P)


def exact_eval(mdp: FiniteMdp, pi: TabularPolicy) -> EvalResult:
    _check_pair(mdp, pi)
    n = mdp.n_states
    P_pi = policy_transition(mdp, pi)
    r_pi = np.sum(pi.probs * mdp.r, axis=1)
    V = np.linalg.solve(np.eye(n) - mdp.gamma * P_pi, r_pi)
    Q = mdp.r + mdp.gamma * mdp.P @ V
    return EvalResult(Q, V, Q - V[:, None], float(mdp.rho0 @ V))


def visitation(mdp: FiniteMdp, pi: TabularPolicy) -> np.ndarray:
    """Unnormalized discounted state occupancy of ``pi``."""
    _check_pair(mdp, pi)
    P_pi = policy_transition(mdp, pi)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi.T, mdp.rho0)


def normalized_visitation(mdp: FiniteMdp, pi: TabularPolicy) -> np.ndarray:
    return (1.0 - mdp.gamma) * visitation(mdp, pi)


def perf_diff_identity(mdp: FiniteMdp, pi_prime: TabularPolicy, pi: TabularPolicy):
    """Both sides of ``J(pi') - J(pi) = sum_s rho_pi'(s) sum_a pi'(a|s) A_pi(s,a)``."""
    lhs = exact_eval(mdp, pi_prime).J - exact_eval(mdp, pi).J
    rho = visitation(mdp, pi_prime)
    rhs = float(rho @ np.sum(pi_prime.probs * exact_eval(mdp, pi).A, axis=1))
    return lhs, rhs


def tv_divergence(p, q) -> np.ndarray | float:
    """Half the L1 distance along the last axis; a scalar for 1-D inputs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError("distributions must have the same shape")
    tv = 0.5 * np.sum(np.abs(p - q), axis=-1)
    return float(tv) if tv.ndim == 0 else tv


def cpi_mixture(pi_k: TabularPolicy, pi_prime: TabularPolicy, kappa: float) -> TabularPolicy:
    if not 0.0 <= kappa <= 1.0:
        raise InvalidInputError(f"kappa must lie in [0, 1], got {kappa}")
    if pi_k.probs.shape != pi_prime.probs.shape:
        raise InvalidInputError("policies must have the same shape")
    mix = (1.0 - kappa) * pi_k.probs + kappa * pi_prime.probs
    # clean up rounding so rows stay stochastic at 1e-12
    return TabularPolicy(mix / mix.sum(axis=1, keepdims=True))


def _validate_state_dist(mdp: FiniteMdp, rho_D) -> np.ndarray:
    rho_D = np.asarray(rho_D, dtype=np.float64)
    if rho_D.shape != (mdp.n_states,) or np.any(rho_D < 0) or abs(rho_D.sum() - 1.0) > 1e-9:
        raise InvalidInputError("rho_D must be a probability vector over states")
    return rho_D


def j_delta_hat(mdp: FiniteMdp, rho_D, pi: TabularPolicy, pi_k: TabularPolicy, A_k=None) -> float:
    """Dataset-distribution surrogate of ``J(pi) - J(pi_k)`` (see module docstring for scale)."""
    rho_D = _validate_state_dist(mdp, rho_D)
    if A_k is None:
        A_k = exact_eval(mdp, pi_k).A
    return float(rho_D @ np.sum(pi.probs * A_k, axis=1)) / (1.0 - mdp.gamma)


def a_sup(A_k: np.ndarray, pi_prime: TabularPolicy, pi_k: TabularPolicy) -> float:
    """``2 max|A_pik| max_s TV(pi'||pi_k)[s]``."""
    return 2.0 * float(np.max(np.abs(A_k))) * float(np.max(tv_divergence(pi_prime.probs, pi_k.probs)))


def theorem1_check(
    mdp: FiniteMdp,
    pi_b: TabularPolicy,
    pi_k: TabularPolicy,
    pi_prime: TabularPolicy,
    kappa: float,
    rho_D=None,
    pi_b_data: TabularPolicy | None = None,
) -> BoundTerms:
    """Exact LHS and every RHS term of the CPI lower bound for the kappa-mixture.

    ``rho_D`` defaults to the behavior policy's normalized visitation and
    ``pi_b_data`` (the data-collecting policy) defaults to ``pi_b``.
    """
    _check_pair(mdp, pi_b, pi_k, pi_prime)
    g = mdp.gamma
    pi = cpi_mixture(pi_k, pi_prime, kappa)
    ev_k = exact_eval(mdp, pi_k)
    lhs = exact_eval(mdp, pi).J - ev_k.J
    d_b = normalized_visitation(mdp, pi_b)
    rho_D = d_b if rho_D is None else _validate_state_dist(mdp, rho_D)
    pi_b_data = pi_b if pi_b_data is None else pi_b_data
    d_k = normalized_visitation(mdp, pi_k)
    AA = a_sup(ev_k.A, pi_prime, pi_k)
    c = g / (1.0 - g) ** 2
    t1 = 2.0 * c * kappa**2 * AA * float(d_k @ tv_divergence(pi_prime.probs, pi_k.probs))
    t2 = 2.0 * c * kappa * AA * float(d_b @ tv_divergence(pi_k.probs, pi_b.probs))
    mismatch = float(rho_D @ np.sum(pi_b_data.probs * (1.0 - pi_b.probs), axis=1))
    t3 = c * kappa * AA * mismatch
    return BoundTerms(
        j_delta=lhs,
        j_delta_hat=j_delta_hat(mdp, rho_D, pi, pi_k, ev_k.A),
        term_prime_ref=t1,
        term_ref_behavior=t2,
        term_behavior_approx=t3,
        A_sup=AA,
        kappa=kappa,
    )


def lemma4_check(mdp: FiniteMdp, pi: TabularPolicy, pi_k: TabularPolicy):
    """``(||rho_pi - rho_pik||_1, 2 gamma/(1-gamma)^2 E_{d_pik}[TV(pi||pi_k)])``."""
    g = mdp.gamma
    lhs = float(np.sum(np.abs(visitation(mdp, pi) - visitation(mdp, pi_k))))
    d_k = normalized_visitation(mdp, pi_k)
    rhs = 2.0 * g / (1.0 - g) ** 2 * float(d_k @ tv_divergence(pi.probs, pi_k.probs))
    return lhs, rhs


def wbc_equivalence_check(spec: WeightedBehaviorSpec, policy_actions, action_values):
    """Per-state gradients of the weighted BC loss and of its expected-action form.

    ``action_values`` gives the real action for each action index, shape
    ``[n_actions]`` or ``[n_actions, d]``; ``policy_actions`` is the policy
    output per state, ``[n_states]`` or ``[n_states, d]``.
    Returns ``(grad_wbc, grad_ewbc)`` shaped like ``policy_actions``.
    """
    q = spec.q_w()
    a = np.asarray(action_values, dtype=np.float64)
    pol = np.asarray(policy_actions, dtype=np.float64)
    scalar = a.ndim == 1
    a2 = a[:, None] if scalar else a
    p2 = pol[:, None] if pol.ndim == 1 else pol
    if a2.shape[0] != q.shape[1] or p2.shape != (q.shape[0], a2.shape[1]):
        raise InvalidInputError("action values and policy outputs do not match the weights")
    C = spec.normalizer
    wb = spec.pi_b_D.probs * spec.weights
    # gradient of the weighted loss, accumulated action by action
    grad_wbc = np.zeros_like(p2)
    for j in range(a2.shape[0]):
        grad_wbc += wb[:, j:j + 1] * 2.0 * (p2 - a2[j])
    grad_wbc /= C[:, None]
    grad_ewbc = 2.0 * (p2 - q @ a2)
    if scalar or pol.ndim == 1:
        return grad_wbc[:, 0], grad_ewbc[:, 0]
    return grad_wbc, grad_ewbc


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int,
                  concentration: float = 1.0) -> TabularPolicy:
    """Rows drawn from a symmetric Dirichlet."""
    x = rng.dirichlet(np.full(n_actions, concentration), size=n_states)
    x = np.maximum(x, 0.0)
    return TabularPolicy(x / x.sum(axis=1, keepdims=True))


def greedy_policy(A: np.ndarray) -> TabularPolicy:
    """Deterministic argmax policy (first maximizer on ties)."""
    probs = np.zeros_like(A)
    probs[np.arange(A.shape[0]), np.argmax(A, axis=1)] = 1.0
    return TabularPolicy(probs)


@dataclass(eq=False)
class TheoryInstance:
    seed: int
    mdp: FiniteMdp
    pi_b: TabularPolicy
    pi_k: TabularPolicy
    pi_prime: TabularPolicy


def random_instance(seed: int) -> TheoryInstance:
    """A random MDP with a behavior policy, a reference near it and a candidate.

    Odd seeds use the greedy improvement step as the candidate; seeds equal
    to 3 mod 4 also make the behavior policy deterministic and the reference
    equal to it, which zeroes the behavior terms so the bound is often
    positive. Even seeds use an arbitrary random candidate.
    """
    rng = np.random.Generator(np.random.Philox(key=(1 << 64) | int(seed)))
    n_s = int(rng.integers(2, 13))
    n_a = int(rng.integers(2, 7))
    gamma = float(rng.uniform(0.5, 0.99))
    mdp = random_finite_mdp(seed, n_s, n_a, gamma)
    pi_b = random_policy(rng, n_s, n_a, concentration=float(rng.choice([0.1, 1.0])))
    drift = random_policy(rng, n_s, n_a)
    pi_k = cpi_mixture(pi_b, drift, float(rng.uniform(0.0, 0.3)))
    if seed % 4 == 3:
        pi_b = greedy_policy(rng.uniform(size=(n_s, n_a)))
        pi_k = pi_b
    if seed % 2:
        pi_prime = greedy_policy(exact_eval(mdp, pi_k).A)
    else:
        pi_prime = random_policy(rng, n_s, n_a)
    return TheoryInstance(seed, mdp, pi_b, pi_k, pi_prime)


def verify_theory(n_instances: int, kappa: float | None = None, seed: int = 0) -> dict:
    """Run every exact check on ``n_instances`` random configurations.

    With ``kappa=None`` the instances cycle through ``KAPPA_GRID``. Returns a
    JSON-ready report with per-instance rows and aggregate pass counts.
    """
    if n_instances < 1:
        raise InvalidInputError("n_instances must be positive")
    rows = []
    counts = {"theorem1": 0, "lemma4": 0, "perf_diff": 0, "linearity": 0,
              "tv_mixture": 0, "corollary_probes": 0, "corollary": 0}
    for i in range(n_instances):
        inst = random_instance(seed + i)
        k = KAPPA_GRID[i % len(KAPPA_GRID)] if kappa is None else float(kappa)
        bt = theorem1_check(inst.mdp, inst.pi_b, inst.pi_k, inst.pi_prime, k)
        mix = cpi_mixture(inst.pi_k, inst.pi_prime, k)
        l_lhs, l_rhs = lemma4_check(inst.mdp, mix, inst.pi_k)
        p_lhs, p_rhs = perf_diff_identity(inst.mdp, mix, inst.pi_k)
        d_b = normalized_visitation(inst.mdp, inst.pi_b)
        full = j_delta_hat(inst.mdp, d_b, inst.pi_prime, inst.pi_k)
        lin_err = abs(bt.j_delta_hat - k * full)
        tv_err = float(np.max(np.abs(
            tv_divergence(mix.probs, inst.pi_k.probs)
            - k * tv_divergence(inst.pi_prime.probs, inst.pi_k.probs)
        )))
        corollary = None
        if bt.rhs > 0:
            corollary = bt.j_delta > 0
            counts["corollary_probes"] += 1
            counts["corollary"] += int(corollary)
        checks = {
            "theorem1": bt.holds,
            "lemma4": l_lhs <= l_rhs + BOUND_SLACK,
            "perf_diff": abs(p_lhs - p_rhs) < 1e-9,
            "linearity": lin_err <= 1e-12 * max(1.0, abs(full)),
            "tv_mixture": tv_err <= 1e-12,
        }
        for name, ok in checks.items():
            counts[name] += int(ok)
        rows.append({
            "seed": inst.seed,
            "n_states": inst.mdp.n_states,
            "n_actions": inst.mdp.n_actions,
            "gamma": inst.mdp.gamma,
            "kappa": k,
            "small_kappa_regime": k <= max(SMALL_KAPPAS),
            "lhs": bt.j_delta,
            "rhs": bt.rhs,
            "margin": bt.margin,
            "j_delta_hat": bt.j_delta_hat,
            "A_sup": bt.A_sup,
            "terms": [bt.term_prime_ref, bt.term_ref_behavior, bt.term_behavior_approx],
            "lemma4_lhs": l_lhs,
            "lemma4_rhs": l_rhs,
            "perf_diff_error": abs(p_lhs - p_rhs),
            "corollary": corollary,
            "pass": bool(all(checks.values()) and corollary is not False),
        })
    n_pass = sum(r["pass"] for r in rows)
    return {
        "convention": "normalized visitation expectations with explicit 1/(1-gamma) factors",
        "n_instances": n_instances,
        "kappa": kappa,
        "pass_counts": counts,
        "n_pass": n_pass,
        "all_pass": n_pass == n_instances,
        "min_margin": min(r["margin"] for r in rows),
        "instances": rows,
    }
