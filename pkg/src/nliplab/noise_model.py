"""Per-sample loss ledger, two-component GMM and smoothing rates.

After each full epoch the ledger holds one combined contrastive loss per
training pair. EM fits a two-component Gaussian mixture to those losses;
the posterior of the higher-mean component at a pair's loss is its noise
probability epsilon, and the smoothing rate is w = lambda * epsilon.

Initialization is a deterministic median split (no random restarts); when
the two fitted means are indistinguishable the model declares "no
detectable noise" and every epsilon is 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InsufficientDataError

VARIANCE_FLOOR = 1e-8
_LL_SLACK = 1e-9


@dataclass
class LossLedger:
    """Most-recent-epoch combined contrastive loss per pair."""

    losses: dict[int, float] = field(default_factory=dict)
    epoch: int = -1

    def start_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def record(self, pair_id: int, loss: float) -> None:
        self.losses[pair_id] = float(loss)

    def items(self) -> list[tuple[int, float]]:
        return sorted(self.losses.items())

    def __len__(self) -> int:
        return len(self.losses)


@dataclass(frozen=True)
class GmmFit:
    gamma: np.ndarray  # (2,) mixing weights, sum 1
    mu: np.ndarray  # (2,) component means
    var: np.ndarray  # (2,) variances >= VARIANCE_FLOOR
    higher_mean_index: int
    log_likelihood: float
    iterations_run: int
    unimodal: bool  # means indistinguishable: posterior collapses to 0
    ll_history: tuple[float, ...] = ()

    @property
    def theta(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "mu": self.mu, "var": self.var}


@dataclass(frozen=True)
class NoiseEstimates:
    epsilon: dict[int, float]
    w: dict[int, float]
    lam: float

    def mean_epsilon(self) -> float:
        if not self.epsilon:
            return 0.0
        return float(np.mean(list(self.epsilon.values())))


def _log_normal_pdf(x: np.ndarray, mu: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var)


def _component_log_joint(fit_gamma, fit_mu, fit_var, x: np.ndarray) -> np.ndarray:
    """(n, 2) log(gamma_m) + log phi(x | m)."""
    out = np.empty((x.shape[0], 2))
    for m in range(2):
        out[:, m] = np.log(fit_gamma[m]) + _log_normal_pdf(x, fit_mu[m], fit_var[m])
    return out


def fit_gmm(losses, max_iters: int = 100, tol: float = 1e-8,
            seed: int = 0) -> GmmFit:
    """EM fit of a two-component 1-D Gaussian mixture.

    ``seed`` is accepted for interface stability but unused: the
    initialization is a deterministic median split.
    """
    del seed
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 4:
        raise InsufficientDataError("GMM fit needs at least 4 samples")
    if not np.all(np.isfinite(x)):
        raise ContractError("losses contain non-finite values")

    order = np.argsort(x, kind="stable")
    half = x.shape[0] // 2
    lower, upper = x[order[:half]], x[order[half:]]
    gamma = np.array([lower.size / x.size, upper.size / x.size])
    mu = np.array([lower.mean(), upper.mean()])
    var = np.maximum(np.array([lower.var(), upper.var()]), VARIANCE_FLOOR)

    prev_ll = -np.inf
    ll = prev_ll
    iters = 0
    history: list[float] = []
    for iters in range(1, max_iters + 1):
        log_joint = _component_log_joint(gamma, mu, var, x)
        rowmax = log_joint.max(axis=1, keepdims=True)
        log_norm = rowmax[:, 0] + np.log(np.exp(log_joint - rowmax).sum(axis=1))
        ll = float(log_norm.sum())
        history.append(ll)
        if ll + _LL_SLACK < prev_ll:
            raise ContractError("EM log-likelihood decreased")
        resp = np.exp(log_joint - log_norm[:, None])
        counts = resp.sum(axis=0)
        counts = np.maximum(counts, 1e-12)
        gamma = counts / x.size
        mu = (resp * x[:, None]).sum(axis=0) / counts
        var = (resp * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / counts
        var = np.maximum(var, VARIANCE_FLOOR)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    spread = float(np.std(x))
    unimodal = abs(mu[1] - mu[0]) < max(1e-6, 0.05 * spread)
    return GmmFit(
        gamma=gamma,
        mu=mu,
        var=var,
        higher_mean_index=int(np.argmax(mu)),
        log_likelihood=ll,
        iterations_run=iters,
        unimodal=unimodal,
        ll_history=tuple(history),
    )


def posterior_noise_prob(fit: GmmFit, loss: float) -> float:
    """Posterior of the higher-mean component at ``loss`` (the noise
    probability); 0 when the fit is unimodal."""
    if fit.unimodal:
        return 0.0
    x = np.asarray([loss], dtype=np.float64)
    log_joint = _component_log_joint(fit.gamma, fit.mu, fit.var, x)[0]
    rowmax = log_joint.max()
    log_norm = rowmax + np.log(np.exp(log_joint - rowmax).sum())
    return float(np.exp(log_joint[fit.higher_mean_index] - log_norm))


def smoothing_rates(epsilons: dict[int, float], lam: float) -> NoiseEstimates:
    """w_i = lam * epsilon_i for every pair."""
    if not (0.0 <= lam < 1.0):
        raise ContractError("lambda must be in [0, 1)")
    for pid, eps in epsilons.items():
        if not (0.0 <= eps <= 1.0):
            raise ContractError(f"epsilon for pair {pid} outside [0, 1]")
    w = {pid: lam * eps for pid, eps in epsilons.items()}
    return NoiseEstimates(epsilon=dict(epsilons), w=w, lam=lam)


def refresh_epoch(ledger: LossLedger, lam: float, max_iters: int = 100,
                  tol: float = 1e-8) -> NoiseEstimates:
    """Fit the GMM on the ledger and derive epsilon/w for every pair."""
    items = ledger.items()
    fit = fit_gmm([loss for _, loss in items], max_iters=max_iters, tol=tol)
    epsilons = {pid: posterior_noise_prob(fit, loss) for pid, loss in items}
    return smoothing_rates(epsilons, lam)


def zero_estimates(pair_ids, lam: float) -> NoiseEstimates:
    """All-zero estimates (warmup-only runs, smoothing disabled)."""
    return NoiseEstimates(epsilon={pid: 0.0 for pid in pair_ids},
                          w={pid: 0.0 for pid in pair_ids}, lam=lam)


def write_diagnostics(path: str, ledger: LossLedger,
                      estimates: NoiseEstimates,
                      flags: dict[int, str]) -> None:
    """CSV dump: pair_id, loss, epsilon, w, true_noise_flag (eval-only)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair_id", "loss", "epsilon", "w", "true_noise_flag"])
        for pid, loss in ledger.items():
            writer.writerow([
                pid,
                f"{loss:.10g}",
                f"{estimates.epsilon.get(pid, 0.0):.10g}",
                f"{estimates.w.get(pid, 0.0):.10g}",
                flags.get(pid, ""),
            ])
