"""Per-sample Dirichlet evidence store, its discounted update, and the strategy layer.

The store keeps each sample's soft target as a normalized row ``y`` together
with the total evidence mass ``A`` (the sum of the underlying concentration
parameters). One observation of a prediction ``p`` performs

    w = gamma * A / (gamma * A + 1)
    y <- w * y + (1 - w) * p
    A <- gamma * A + 1

which is the normalized form of discounting the concentration vector by
``gamma`` and adding ``p`` as fractional evidence. ``conjugate_update_oracle``
implements that raw concentration-space update and exists only so tests can
check the factorization against it.

The strategy layer realizes the related target-construction schemes as special
cases or variants of the same recursion: plain one-hot training, label
smoothing, progressive self-distillation with a linear ramp (ps-kd),
last-pass distillation at mini-batch granularity (dlb), and a bias-corrected
zero-initialized exponential moving average (te).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import one_hot

SIMPLEX_RENORM_TOL = 1e-6

STRATEGY_MODES = ("bsd", "baseline", "label-smoothing", "ps-kd", "dlb", "te")

__all__ = [
    "EvidenceStore",
    "init_prior",
    "update_weight",
    "bsd_update",
    "conjugate_update_oracle",
    "evidence_mass_closed_form",
    "fixed_point",
    "sharpen",
    "StrategyConfig",
    "TargetStrategy",
    "STRATEGY_MODES",
]


def _check_pred(pred):
    """Validate a prediction row; renormalize tiny drift, reject real deviations.

    Sums within 1e-12 of 1 are left untouched (dividing by a 1-ulp-off sum
    would perturb every entry); larger drift up to the tolerance is
    renormalized; beyond that is treated as a caller bug.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if np.any(pred < 0.0):
        raise ValueError("prediction has negative entries")
    s = pred.sum(axis=-1, keepdims=True)
    err = np.abs(s - 1.0)
    if np.any(err > SIMPLEX_RENORM_TOL):
        raise ValueError(
            f"prediction off the simplex by {err.max():.3e} (> {SIMPLEX_RENORM_TOL})"
        )
    if np.all(err <= 1e-12):
        return pred
    return pred / s


@dataclass
class EvidenceStore:
    """Soft targets ``y`` (n rows on the simplex) and evidence masses ``A`` (n positives)."""

    y: np.ndarray
    A: np.ndarray
    gamma: float
    c: float
    epsilon: float

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.y.shape[1]

    def copy(self):
        return EvidenceStore(self.y.copy(), self.A.copy(), self.gamma, self.c, self.epsilon)

    def update_rows(self, indices, preds):
        """Discounted Bayesian update of the selected rows from their predictions."""
        preds = _check_pred(preds)
        gA = self.gamma * self.A[indices]
        w = update_weight(self.gamma, self.A[indices])
        self.y[indices] = w[:, None] * self.y[indices] + (1.0 - w)[:, None] * preds
        self.A[indices] = gA + 1.0

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "A"] + [f"y_{j}" for j in range(self.k)])
            for i in range(self.n):
                writer.writerow([i, repr(float(self.A[i]))] + [repr(float(v)) for v in self.y[i]])

    @classmethod
    def load_csv(cls, path, gamma, c, epsilon):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        k = len(header) - 2
        y = np.empty((len(body), k))
        A = np.empty(len(body))
        for row in body:
            i = int(row[0])
            A[i] = float(row[1])
            y[i] = [float(v) for v in row[2:]]
        return cls(y=y, A=A, gamma=gamma, c=c, epsilon=epsilon)


def update_weight(gamma, A):
    """Trust placed on the stored target in one update: gamma*A / (gamma*A + 1).

    Strictly increasing in A for fixed gamma; exactly gamma when A sits at the
    stationary mass 1 / (1 - gamma).
    """
    gA = gamma * np.asarray(A, dtype=np.float64)
    return gA / (gA + 1.0)


def init_prior(labels, k, c, epsilon=0.0, gamma=0.95) -> EvidenceStore:
    """Concentration ``c`` on the labeled class, ``epsilon`` elsewhere, normalized.

    The stored row is the prior mean ``alpha0 / A0`` with ``A0 = c + (k-1)*epsilon``.
    """
    labels = np.asarray(labels)
    if c <= 0.0:
        raise ValueError("prior strength c must be > 0")
    if epsilon < 0.0:
        raise ValueError("off-class prior epsilon must be >= 0")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must be in [0, 1]")
    n = labels.shape[0]
    a0 = c + (k - 1) * epsilon
    y = np.full((n, k), epsilon / a0, dtype=np.float64)
    y[np.arange(n), labels] = c / a0
    A = np.full(n, a0, dtype=np.float64)
    return EvidenceStore(y=y, A=A, gamma=gamma, c=c, epsilon=epsilon)


def bsd_update(store: EvidenceStore, i, pred):
    """Single-row discounted update; returns the new (y_i, A_i)."""
    store.update_rows(np.asarray([i]), np.asarray(pred, dtype=np.float64)[None, :])
    return store.y[i], store.A[i]


def conjugate_update_oracle(alpha, pred, gamma):
    """Raw concentration-space reference: alpha' = gamma * alpha + pred.

    Test oracle for the (y, A) factorization; not used by training. An
    all-zero ``alpha`` is permitted only for the improper-prior (te-style)
    path, where the first observation defines the state.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if np.any(alpha < 0.0):
        raise ValueError("concentration entries must be nonnegative")
    return gamma * alpha + pred


def evidence_mass_closed_form(A0, gamma, t):
    """Evidence mass after t updates: gamma^t * A0 + (1 - gamma^t) / (1 - gamma).

    At gamma = 1 the limit form A0 + t applies.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if gamma == 1.0:
        return A0 + float(t)
    gt = gamma ** t
    return gt * A0 + (1.0 - gt) / (1.0 - gamma)


def fixed_point(gamma):
    """Stationary evidence mass 1 / (1 - gamma); undefined at gamma = 1."""
    if not (0.0 <= gamma < 1.0):
        raise ValueError("fixed point requires gamma in [0, 1)")
    return 1.0 / (1.0 - gamma)


def sharpen(target, tau):
    """Power transform target^(1/tau) renormalized to the simplex.

    tau = 1 is the identity; tau < 1 concentrates mass on the dominant class;
    one-hot rows are fixed points for every tau. Operates on the last axis.
    """
    if tau <= 0.0:
        raise ValueError("sharpening tau must be > 0")
    t = np.asarray(target, dtype=np.float64)
    if tau == 1.0:
        return t.copy()
    powered = t ** (1.0 / tau)
    return powered / powered.sum(axis=-1, keepdims=True)


@dataclass
class StrategyConfig:
    """Which target-construction scheme to run, with its mode-specific knobs."""

    mode: str = "bsd"
    gamma: float = 0.95
    c: float = 1000.0
    epsilon: float = 0.0
    ls_alpha: float = 0.1      # label-smoothing mass spread over all classes
    pskd_alpha: float = 0.8    # terminal mixing weight, ramped linearly over epochs
    te_momentum: float = 0.6
    granularity: str = "epoch"  # "epoch" | "mini-batch"

    def __post_init__(self):
        if self.mode not in STRATEGY_MODES:
            raise ValueError(f"unknown strategy mode {self.mode!r}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must be in [0, 1]")
        if self.c <= 0.0:
            raise ValueError("c must be > 0")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        if not (0.0 <= self.ls_alpha < 1.0):
            raise ValueError("ls_alpha must be in [0, 1)")
        if not (0.0 <= self.pskd_alpha <= 1.0):
            raise ValueError("pskd_alpha must be in [0, 1]")
        if not (0.0 < self.te_momentum < 1.0):
            raise ValueError("te_momentum must be in (0, 1)")
        if self.granularity not in ("epoch", "mini-batch"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.mode == "dlb" and self.granularity != "mini-batch":
            raise ValueError("dlb requires mini-batch granularity")


class TargetStrategy:
    """Stateful target provider for one training run.

    Owns whatever per-sample state the mode needs (an EvidenceStore for bsd,
    a last-prediction buffer for ps-kd/dlb, a zero-initialized accumulator
    for te) and hides it behind two calls used by the training loop:
    ``targets(indices, epoch)`` for the rows consumed by the loss, and
    ``update(indices, preds)`` applied after the optimizer step. Targets read
    before the update are the stored values at that moment, matching the
    in-place ordering of the training recursion.
    """

    def __init__(self, cfg: StrategyConfig, labels, k, total_epochs):
        self.cfg = cfg
        self.labels = np.asarray(labels)
        self.k = k
        self.total_epochs = total_epochs
        self.onehot = one_hot(self.labels, k)
        n = self.labels.shape[0]
        self.store = None
        self.last_pred = None
        self.te_accum = None
        self.te_count = None
        if cfg.mode == "bsd":
            self.store = init_prior(self.labels, k, cfg.c, cfg.epsilon, cfg.gamma)
        elif cfg.mode in ("ps-kd", "dlb"):
            self.last_pred = self.onehot.copy()
        elif cfg.mode == "te":
            self.te_accum = np.zeros((n, k), dtype=np.float64)
            self.te_count = np.zeros(n, dtype=np.int64)

    def _pskd_mix(self, epoch):
        if self.total_epochs <= 0:
            return 0.0
        return self.cfg.pskd_alpha * min(epoch, self.total_epochs) / self.total_epochs

    def targets(self, indices, epoch):
        """Target rows for the given sample indices at the given 1-based epoch."""
        mode = self.cfg.mode
        if mode == "baseline":
            return self.onehot[indices].copy()
        if mode == "label-smoothing":
            a = self.cfg.ls_alpha
            return (1.0 - a) * self.onehot[indices] + a / self.k
        if mode == "ps-kd":
            a_t = self._pskd_mix(epoch)
            return (1.0 - a_t) * self.onehot[indices] + a_t * self.last_pred[indices]
        if mode == "dlb":
            return self.last_pred[indices].copy()
        if mode == "te":
            out = self.onehot[indices].copy()
            seen = self.te_count[indices] > 0
            if np.any(seen):
                idx = np.asarray(indices)[seen]
                corr = 1.0 - self.cfg.te_momentum ** self.te_count[idx]
                out[seen] = self.te_accum[idx] / corr[:, None]
            return out
        return self.store.y[indices].copy()

    def target(self, i, epoch):
        return self.targets(np.asarray([i]), epoch)[0]

    def update(self, indices, preds):
        """Fold the batch predictions into the per-sample state (post-step)."""
        mode = self.cfg.mode
        if mode in ("baseline", "label-smoothing"):
            return
        preds = np.asarray(preds, dtype=np.float64)
        if mode in ("ps-kd", "dlb"):
            self.last_pred[indices] = preds
        elif mode == "te":
            m = self.cfg.te_momentum
            self.te_accum[indices] = m * self.te_accum[indices] + (1.0 - m) * preds
            self.te_count[indices] += 1
        else:
            self.store.update_rows(indices, preds)

    def mean_evidence(self):
        if self.store is None:
            return None
        return float(self.store.A.mean())

    def current_targets(self, epoch):
        """Snapshot of every sample's target row as it would be served at ``epoch``."""
        return self.targets(np.arange(self.labels.shape[0]), epoch)
