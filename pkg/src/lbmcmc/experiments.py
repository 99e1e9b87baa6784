"""Experiment drivers shared by the command line and the acceptance suite.

Two families live here: the exact verification battery (small enumerable
targets, dense matrices) and the desk-scale simulation studies (permutation
sweep, Ising comparison, record-linkage efficiency table).

Simulation studies start every scheme from a common state produced by an
informed pilot run, then give each scheme the same wall-clock budget, so
acceptance rates and ESS describe the stationary regime rather than the
transient from a random start.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import exact as ex
from .balance import BalancingFunction, balanced_transform
from .diagnostics import efficiency_table, ess_report
from .kernels import KernelSpec, Trace, run_chain
from .targets import (
    BinaryTarget,
    DiscreteTarget,
    IsingTarget,
    PermutationTarget,
    lognormal_weights,
    target_from_config,
)

__all__ = [
    "Assertion",
    "VerifyReport",
    "battery_targets",
    "battery_schemes",
    "unbalanced_test_functions",
    "verify_stationarity",
    "verify_flow_symmetry",
    "verify_two_state",
    "verify_peskun",
    "smoothness_sequences",
    "verify_smoothness",
    "verify_limit_rates",
    "verify_two_state_variance",
    "run_verify",
    "budget_iterations",
    "pilot_state",
    "compare_schemes",
    "permutation_sweep",
    "ising_comparison",
    "synthetic_rl_dataset",
    "rl_efficiency",
]


# --------------------------------------------------------------------------
# exact verification battery


@dataclass
class Assertion:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), **self.measured}


@dataclass
class VerifyReport:
    assertions: list = field(default_factory=list)
    constants: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def add(self, a: Assertion):
        self.assertions.append(a)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_assertions": len(self.assertions),
            "n_failed": sum(not a.passed for a in self.assertions),
            "seconds": self.seconds,
            "assertions": [a.as_dict() for a in self.assertions],
            "constants": self.constants,
        }


def battery_targets(seed: int = 0, binary_sizes=(3, 4, 5, 6), ising_side: int = 3,
                    perm_sizes=(3, 4, 5)) -> dict:
    """Named small targets: binary with p ~ U(0.2, 0.8), an Ising grid, log-normal permutations."""
    rng = np.random.default_rng(seed)
    out = {}
    for n in binary_sizes:
        out[f"binary{n}"] = BinaryTarget(rng.uniform(0.2, 0.8, n))
    if ising_side:
        k = ising_side
        out[f"ising{k}x{k}"] = IsingTarget(k, rng.uniform(-1, 1, k * k), 0.5)
    for n in perm_sizes:
        out[f"perm{n}"] = PermutationTarget(log_w=lognormal_weights(n, 1.0, rng))
    return out


def battery_schemes(block_size: int = 2) -> list:
    return [
        KernelSpec.rw(),
        KernelSpec.from_name("gb"),
        KernelSpec.from_name("sqrt"),
        KernelSpec.from_name("barker"),
        KernelSpec.hamming_ball(),
        KernelSpec.blockwise(BalancingFunction.barker(), block_size, "blockwise-barker"),
    ]


def unbalanced_test_functions() -> list:
    """g(t) = t^2, g(t) = t and a perturbed max: none satisfies g(t) = t g(1/t)."""
    return [
        BalancingFunction.custom(log_func=lambda lt: 2.0 * lt, label="t^2", check_bound=False),
        BalancingFunction.linear(),
        BalancingFunction.custom(
            log_func=lambda lt: max(0.0, lt) + math.log1p(0.25 * math.tanh(lt)),
            label="max-tanh", check_bound=False),
    ]


def _indices(targets: dict, cap: int) -> dict:
    return {name: ex.StateIndex(t, cap) for name, t in targets.items()}


def verify_stationarity(targets: dict, schemes: Sequence[KernelSpec], tol: float = 1e-12,
                        cap: int = ex.DEFAULT_CAP, indices: Optional[dict] = None) -> list:
    indices = indices or _indices(targets, cap)
    out = []
    for name, t in targets.items():
        idx = indices[name]
        for spec in schemes:
            P = ex.build_exact_kernel(spec, t, index=idx).P
            err = ex.stationarity_error(P, idx.pi)
            out.append(Assertion(f"stationary/{name}/{spec.label}", err <= tol,
                                 {"error": err, "tol": tol}))
    return out


def verify_flow_symmetry(targets: dict, gs: Sequence[BalancingFunction], tol: float = 1e-12,
                         cap: int = ex.DEFAULT_CAP, indices: Optional[dict] = None) -> list:
    """pi Z_g Q_g symmetric for each g (holds exactly when g is balanced)."""
    indices = indices or _indices(targets, cap)
    out = []
    for name, t in targets.items():
        for g in gs:
            F = ex.flow_matrix(t, g, index=indices[name])
            asym = ex.flow_asymmetry(F) / max(1.0, float(np.max(F)))
            out.append(Assertion(f"flow-symmetric/{name}/{g.label}", asym <= tol,
                                 {"asymmetry": asym, "tol": tol}))
    return out


def verify_two_state(t0: float = 3.0, threshold: float = 0.1) -> Assertion:
    r = ex.two_state_globally_balanced(t0)
    ok = r["flow_asymmetry"] > threshold
    return Assertion("two-state/g=t-not-balanced", ok,
                     {"flow_asymmetry": r["flow_asymmetry"], "threshold": threshold,
                      "stationary": r["stationary"].tolist(),
                      "pi_sq_times_z": r["pi_sq_times_z"].tolist()})


def peskun_targets(n_targets: int = 20, seed: int = 0) -> list:
    """Random small targets cycling through binary, permutation and Ising families."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_targets):
        fam = k % 3
        if fam == 0:
            n = int(rng.integers(3, 7))
            out.append((f"binary{n}#{k}", BinaryTarget(rng.uniform(0.1, 0.9, n))))
        elif fam == 1:
            n = int(rng.integers(3, 5))
            out.append((f"perm{n}#{k}", PermutationTarget(
                log_w=lognormal_weights(n, float(rng.uniform(0.3, 1.5)), rng))))
        else:
            out.append((f"ising2x2#{k}", IsingTarget(2, rng.uniform(-1, 1, 4),
                                                    float(rng.uniform(0.2, 1.0)))))
    return out


def verify_peskun(n_targets: int = 20, n_h: int = 10, seed: int = 0,
                  gs: Optional[Sequence[BalancingFunction]] = None) -> tuple[list, list]:
    """P_gtilde against P_g with c = 1/(c_g c_gtilde), gtilde = min{g(t), t g(1/t)}."""
    gs = list(gs) if gs is not None else unbalanced_test_functions()
    rng = np.random.default_rng(seed + 1)
    out, rows = [], []
    for name, t in peskun_targets(n_targets, seed):
        idx = ex.StateIndex(t)
        for g in gs:
            gt = balanced_transform(g)
            c_g = ex.smoothness_constant(t, g, index=idx)
            c_gt = ex.smoothness_constant(t, gt, index=idx)
            c = 1.0 / (c_g * c_gt)
            P_g = ex.build_exact_kernel(KernelSpec.informed(g), t, index=idx).P
            P_gt = ex.build_exact_kernel(KernelSpec.informed(gt), t, index=idx).P
            rep = ex.peskun_check(P_gt, P_g, idx.pi, c, n_h=n_h, rng=rng)
            d = rep.as_dict()
            d.update(c_g=c_g, c_gtilde=c_gt)
            rows.append({"target": name, "g": g.label, **d})
            out.append(Assertion(f"peskun/{name}/{g.label}", rep.passed, d))
    return out, rows


def _nested_perm_weights(n_max: int = 5) -> np.ndarray:
    """Log-weights 1 on the diagonal and 0 elsewhere; leading blocks give the nested family.

    With only three to five indices a random bounded matrix lets the maximum
    over neighbouring pairs jump around from one n to the next, so the
    family is deterministic.
    """
    return np.eye(n_max)


def smoothness_sequences(gs: Sequence[str] = ("sqrt", "barker"), binary_sizes=range(4, 13),
                         perm_sizes=range(3, 6)) -> dict:
    """c_g^(n) along growing binary and permutation targets.

    Binary targets use p = linspace(0.2, 0.8, n), a deterministic spread
    over the allowed range; permutation targets use the leading n x n block
    of one fixed bounded weight matrix.
    """
    out = {}
    W = _nested_perm_weights(max(perm_sizes))
    for name in gs:
        g = BalancingFunction(name) if name != "lb" else BalancingFunction.barker()
        out[f"binary/{name}"] = {
            int(n): ex.smoothness_constant(BinaryTarget(np.linspace(0.2, 0.8, n)), g)
            for n in binary_sizes}
        out[f"permutation/{name}"] = {
            int(n): ex.smoothness_constant(PermutationTarget(log_w=W[:n, :n]), g)
            for n in perm_sizes}
    return out


def verify_smoothness(seqs: dict) -> list:
    out = []
    for key, seq in seqs.items():
        ns = sorted(seq)
        dev = [abs(seq[n] - 1.0) for n in ns]
        ok = all(b < a for a, b in zip(dev, dev[1:]))
        out.append(Assertion(f"smoothness-decreasing/{key}", ok,
                             {"n": ns, "c_g": [seq[n] for n in ns]}))
    return out


def verify_limit_rates(n_bits: int = 50, seed: int = 0) -> list:
    """e_i as a function of c_i peaks at c_i = 1/2; Barker gives c_i = 1/2."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.2, 0.8, n_bits)
    v = rng.uniform(0.5, 2.0, n_bits)
    grid = np.round(np.arange(1, 100) / 100.0, 2)
    best = []
    for i in range(n_bits):
        e = [ex.limit_rates(p, v, np.where(np.arange(n_bits) == i, c, 0.5)).e[i] for c in grid]
        best.append(float(grid[int(np.argmax(e))]))
    _, c_barker = ex.binary_chain_parameters(p, BalancingFunction.barker())
    return [
        Assertion("limit-rates/argmax-c", all(b == 0.5 for b in best),
                  {"argmax": sorted(set(best))}),
        Assertion("limit-rates/barker-c-half", bool(np.allclose(c_barker, 0.5, atol=1e-12)),
                  {"max_dev": float(np.max(np.abs(c_barker - 0.5)))}),
    ]


def verify_two_state_variance(tol: float = 1e-10) -> list:
    """Spectral gap and asymptotic variance against the 2x2 closed form.

    For P = [[1-a, a], [b, 1-b]] the second eigenvalue is 1 - a - b and the
    indicator of state 1 has variance ab/(a+b)^2 * (2 - a - b)/(a + b).
    """
    out = []
    for a, b in [(1.0, 0.5), (0.3, 0.7), (0.05, 0.2), (0.9, 0.9)]:
        P = np.array([[1 - a, a], [b, 1 - b]])
        pi = np.array([b, a]) / (a + b)
        lam = 1 - a - b
        gap = ex.spectral_gap(P, pi)
        var = ex.asymptotic_variance(P, pi, [0.0, 1.0])
        v0 = a * b / (a + b) ** 2 * (1 + lam) / (1 - lam)
        ok = abs(gap - (1 - lam)) <= tol and abs(var - v0) <= tol * max(1.0, v0)
        out.append(Assertion(f"two-state-closed-form/a={a},b={b}", ok,
                             {"gap": gap, "gap_expected": 1 - lam, "variance": var,
                              "variance_expected": v0}))
    return out


def run_verify(seed: int = 0, cap: int = ex.DEFAULT_CAP, balanced: Sequence[str] = ("sqrt", "barker", "min", "max"),
               peskun_targets_n: int = 20, quick: bool = False) -> VerifyReport:
    """Full exact-mode battery.  ``balanced`` lists the g asserted to give symmetric flows."""
    t0 = time.perf_counter()
    rep = VerifyReport()
    targets = battery_targets(seed)
    idx = _indices(targets, cap)
    for a in verify_stationarity(targets, battery_schemes(), cap=cap, indices=idx):
        rep.add(a)
    gs = [BalancingFunction(name) if name in ("sqrt", "barker", "min", "max", "linear", "constant")
          else _named_g(name) for name in balanced]
    for a in verify_flow_symmetry(targets, gs, cap=cap, indices=idx):
        rep.add(a)
    rep.add(verify_two_state())
    pk, rows = verify_peskun(5 if quick else peskun_targets_n, seed=seed)
    for a in pk:
        rep.add(a)
    seqs = smoothness_sequences(binary_sizes=range(4, 11 if quick else 13))
    for a in verify_smoothness(seqs):
        rep.add(a)
    for a in verify_limit_rates(seed=seed):
        rep.add(a)
    for a in verify_two_state_variance():
        rep.add(a)
    rep.constants = {
        "c_g": {k: {str(n): c for n, c in v.items()} for k, v in seqs.items()},
        "peskun": rows,
        "spectral_gaps": {
            f"{name}/{spec.label}": ex.spectral_gap(ex.build_exact_kernel(spec, targets[name], index=idx[name]).P,
                                                     idx[name].pi)
            for name in targets for spec in battery_schemes()[:4]},
    }
    rep.seconds = time.perf_counter() - t0
    return rep


def _named_g(name: str) -> BalancingFunction:
    from .balance import from_name
    return from_name(name)


# --------------------------------------------------------------------------
# simulation studies


def budget_iterations(spec: KernelSpec, target: DiscreteTarget, init, seconds: float,
                      seed: int = 0, probe: int = 20000, minimum: int = 2000,
                      maximum: int = 10 ** 9) -> int:
    """Iterations that fill ``seconds`` of sampling, from a timed probe run."""
    tr = run_chain(spec, target, init=init, iterations=probe, seed=seed, chain=10 ** 6,
                   record_level=False)
    rate = probe / max(tr.wall_clock, 1e-9)
    return int(min(maximum, max(minimum, rate * seconds)))


def pilot_state(target: DiscreteTarget, iterations: int, seed: int = 0, scheme: str = "barker",
                init=None):
    """Final state of an informed pilot chain, used as a common warm start."""
    tr = run_chain(KernelSpec.from_name(scheme), target, init=init, iterations=iterations,
                   seed=seed, chain=10 ** 6 + 1, record_level=False)
    return tr.final_state


def compare_schemes(target: DiscreteTarget, schemes: Sequence[str], init, seconds: float,
                    seed: int = 0, references: Sequence = (), max_records: int = 50000) -> dict:
    """Run each named scheme for about ``seconds`` from ``init``; returns name -> Trace."""
    out = {}
    for k, name in enumerate(schemes):
        spec = KernelSpec.from_name(name)
        it = budget_iterations(spec, target, init, seconds, seed)
        thin = max(1, it // max_records)
        out[name] = run_chain(spec, target, init=init, iterations=it, thin=thin,
                              references=references, record_level=False, seed=seed, chain=k)
    return out


def permutation_sweep(ns: Sequence[int] = (100, 200), lams: Sequence[float] = (1, 3, 5),
                      schemes: Sequence[str] = ("rw", "gb", "lb1", "lb2"), seconds: float = 1.0,
                      pilot_sweeps: float = 2.0, seed: int = 0) -> list:
    """Acceptance rate and flips per second on log-normal permutation targets.

    The pilot runs ``pilot_sweeps * n^2 / 2`` informed iterations (each index
    pair touched about ``pilot_sweeps`` times) before the timed runs.
    """
    rows = []
    for n in ns:
        for lam in lams:
            rng = np.random.default_rng([seed, n, int(round(lam * 1000))])
            t = PermutationTarget(log_w=lognormal_weights(n, lam, rng))
            x0 = pilot_state(t, int(pilot_sweeps * n * n / 2), seed)
            traces = compare_schemes(t, schemes, x0, seconds, seed)
            ref = traces[schemes[0]].flips_per_sec
            for name, tr in traces.items():
                rows.append({
                    "n": n, "lambda": lam, "scheme": name, "iterations": tr.iterations,
                    "acceptance_rate": tr.acceptance_rate, "flips_per_sec": tr.flips_per_sec,
                    "relative_flips_per_sec": tr.flips_per_sec / ref if ref > 0 else float("inf"),
                    "wall_clock": tr.wall_clock,
                })
    return rows


def ising_comparison(ns: Sequence[int] = (50, 100), presets: Sequence[int] = (1, 3),
                     schemes: Sequence[str] = ("rw", "gb", "lb", "hb"), seconds: float = 2.0,
                     pilot_sweeps: float = 30.0, seed: int = 0) -> list:
    """Acceptance, flips/sec and ESS/sec on the image-analysis Ising targets.

    Summaries are Hamming distances to the all-background state and to an
    independent draw from a second pilot run.
    """
    rows = []
    for n in ns:
        for preset in presets:
            rng = np.random.default_rng([seed, n, preset])
            t = target_from_config({"kind": "ising", "n": n, "preset": preset}, rng)
            x0 = pilot_state(t, int(pilot_sweeps * n * n), seed)
            x1 = pilot_state(t, int(pilot_sweeps * n * n), seed + 1, init=x0)
            refs = [-np.ones(n * n, dtype=x0.dtype), x1]
            traces = compare_schemes(t, schemes, x0, seconds, seed, references=refs)
            ref_eff = None
            for name, tr in traces.items():
                rep = ess_report(tr)
                if ref_eff is None:
                    ref_eff = rep.mean_ess_per_sec
                rows.append({
                    "n": n, "target": preset, "scheme": name, "iterations": tr.iterations,
                    "acceptance_rate": tr.acceptance_rate, "acceptance_kind": tr.acceptance_kind,
                    "flips_per_sec": tr.flips_per_sec, "ess": float(np.mean(rep.ess)),
                    "ess_per_sec": rep.mean_ess_per_sec,
                    "relative_ess_per_sec": rep.mean_ess_per_sec / ref_eff,
                    "wall_clock": tr.wall_clock,
                })
    return rows


def synthetic_rl_dataset(n_records: int = 300, p_match: float = 0.5,
                         field_levels: Sequence[int] = (20, 12, 30, 8, 50), beta: float = 0.02,
                         seed: int = 0):
    """Synthetic pair of databases with about ``n_records`` rows each.

    The entity count is Poisson with mean ``n_records / (p + (1 - p) / 2)``.
    """
    from .recordlinkage import default_field_theta, generate_synthetic

    rng = np.random.default_rng(seed)
    theta = default_field_theta(list(field_levels), rng)
    lam = n_records / (p_match + 0.5 * (1.0 - p_match))
    return generate_synthetic(lam, p_match, theta, beta=beta, rng=rng)


def rl_efficiency(dataset, schemes: Sequence[str] = ("rw", "gb", "lb", "hb"), seconds: float = 10.0,
                  pilot_iterations: int = 100000, hyper_every: int = 1000, n_refs: int = 5,
                  ref_spacing: int = 20000, beta: Optional[float] = None, seed: int = 0,
                  reference: str = "rw"):
    """Relative ESS/time of matching updates, as in the record-linkage table.

    A pilot LB run gives the common warm start and ``n_refs`` posterior
    draws ``ref_spacing`` iterations apart; the summaries are Hamming
    distances to those draws.  Returns (efficiency rows, traces).
    """
    from .recordlinkage import RLConfig, run_rl_sampler
    from .recordlinkage.model import DEFAULT_BETA

    beta = DEFAULT_BETA if beta is None else beta

    def cfg(scheme, iterations, thin=1):
        return RLConfig(scheme=scheme, iterations=iterations, hyper_every=hyper_every, thin=thin,
                        beta=beta)

    cur = run_rl_sampler(dataset, cfg("lb", pilot_iterations), seed=seed, chain=1000).final
    refs = []
    for k in range(n_refs):
        cur = run_rl_sampler(dataset, cfg("lb", ref_spacing), seed=seed, chain=1001 + k,
                             init=cur).final
        refs.append(cur)
    names = [f"hamming_{k}" for k in range(n_refs)]
    traces = {}
    for k, s in enumerate(schemes):
        probe = run_rl_sampler(dataset, cfg(s, 5 * hyper_every), seed=seed, chain=2000 + k, init=cur)
        rate = probe.trace.iterations / max(probe.trace.wall_clock, 1e-9)
        it = max(10 * hyper_every, int(rate * seconds))
        res = run_rl_sampler(dataset, cfg(s, it, max(1, it // 50000)), seed=seed, chain=k,
                             init=cur, references=refs)
        traces[s] = res.trace
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = efficiency_table(traces, reference, names=names)
    return rows, traces
