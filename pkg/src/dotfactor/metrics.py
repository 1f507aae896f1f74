"""Disentanglement scores: FactorVAE, DCI, MIG, BetaVAE, Modularity, Explicitness.

All scores take a code matrix ``[N, D]`` (posterior means for every
dataset item, in dataset order) and the integer factor levels ``[N, F]``.
The vote-based scores additionally need the :class:`FactorGrid` to draw
batches with one factor fixed. Information quantities are in nats and are
computed in float64.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from . import kernels
from .rng import CounterRNG
from .synthdata import sample_fixed_factor_indices

METRIC_NAMES = ("factorvae", "dci_d", "dci_c", "dci_i", "mig", "betavae", "modularity",
                "explicitness")
DEFAULT_BINS = 20
COLLAPSED_VAR = 0.05


class MetricError(ValueError):
    pass


@dataclass
class ProtocolSizes:
    L: int = 64
    M: int = 800
    train_frac: float = 0.8
    bins: int = DEFAULT_BINS


def _rng(seed):
    return seed if isinstance(seed, CounterRNG) else CounterRNG(int(seed))


def _split(n, train_frac):
    n_train = int(round(n * train_frac))
    if not 0 < n_train < n:
        raise MetricError("train/eval split leaves an empty side")
    return n_train


# ---- mutual information ----

def discretize(codes, bins=DEFAULT_BINS):
    """Equal-frequency bin ids per column.

    Bin ``i`` holds values in ``(e[i-1], e[i]]`` where ``e`` are order
    statistics of the column, so any strictly increasing map of a column
    leaves its bins unchanged and tied values never straddle two bins.
    """
    if bins < 2:
        raise MetricError("bins must be >= 2")
    codes = np.asarray(codes, dtype=np.float64)
    n = len(codes)
    # integer ceil(i * n / bins) avoids float rounding in the quantile index
    ranks = (np.arange(1, bins) * n + bins - 1) // bins - 1
    out = np.empty(codes.shape, dtype=np.int64)
    for j in range(codes.shape[1]):
        edges = np.sort(codes[:, j])[ranks]
        out[:, j] = np.searchsorted(edges, codes[:, j], side="left")
    return out


def entropy(labels):
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_mi(a, b):
    a, b = np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)
    na, nb = int(a.max()) + 1, int(b.max()) + 1
    joint = kernels.joint_counts(a, b, na, nb).astype(np.float64) / len(a)
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    ratio = joint[nz] / (pa[:, None] * pb[None, :])[nz]
    return max(0.0, float((joint[nz] * np.log(ratio)).sum()))


def mi_matrix(codes, factors, bins=DEFAULT_BINS):
    """``(mi [D, F], factor entropies [F])`` from plug-in counts on binned codes."""
    binned = discretize(codes, bins)
    factors = np.asarray(factors, dtype=np.int64)
    mi = np.array([[discrete_mi(binned[:, j], factors[:, k]) for k in range(factors.shape[1])]
                   for j in range(binned.shape[1])])
    return mi, np.array([entropy(factors[:, k]) for k in range(factors.shape[1])])


def mig(mi, entropies):
    mi = np.asarray(mi, dtype=np.float64)
    if mi.shape[0] < 2:
        raise MetricError("MIG needs at least two code dimensions")
    keep = np.asarray(entropies) > 0
    if not keep.all():
        warnings.warn("factors with zero entropy excluded from MIG", RuntimeWarning)
    if not keep.any():
        raise MetricError("every factor has zero entropy")
    top = np.sort(mi[:, keep], axis=0)[::-1]
    gaps = (top[0] - top[1]) / np.asarray(entropies)[keep]
    return float(np.clip(gaps.mean(), 0.0, 1.0))


def modularity(mi, dead_tol=1e-12):
    """Mean per-dim modularity; dims with no information score 1."""
    mi = np.asarray(mi, dtype=np.float64)
    F = mi.shape[1]
    if F < 2:
        raise MetricError("modularity needs at least two factors")
    theta = mi.max(axis=1)
    scores = np.ones(mi.shape[0])
    live = theta > dead_tol
    sq = mi[live] ** 2
    off = sq.sum(axis=1) - theta[live] ** 2
    scores[live] = 1.0 - off / (theta[live] ** 2 * (F - 1))
    return float(np.clip(scores.mean(), 0.0, 1.0))


# ---- vote-based scores ----

def _fit_multinomial(X, y, **kw):
    clf = LogisticRegression(max_iter=2000, random_state=0, **kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(X, y)
    return clf


def betavae_score(codes, factors, grid, L=64, M=800, seed=0, train_frac=0.8):
    """Accuracy of a linear classifier predicting the fixed factor from the
    mean absolute code difference over ``L`` pairs that share it."""
    codes = np.asarray(codes, dtype=np.float64)
    F = len(grid.factors)
    if F < 2:
        raise MetricError("BetaVAE score needs at least two factors")
    rng = _rng(seed).child("betavae")
    feats, labels = np.empty((M, codes.shape[1])), np.empty(M, dtype=np.int64)
    for v in range(M):
        k = rng.integers(F)
        a, level = sample_fixed_factor_indices(grid, k, L, rng)
        b, _ = sample_fixed_factor_indices(grid, k, L, rng, level=level)
        feats[v] = np.abs(codes[a] - codes[b]).mean(axis=0)
        labels[v] = k
    n_train = _split(M, train_frac)
    if len(np.unique(labels[:n_train])) < 2:
        raise MetricError("too few votes: one class in the training split")
    clf = _fit_multinomial(feats[:n_train], labels[:n_train])
    return float((clf.predict(feats[n_train:]) == labels[n_train:]).mean())


def active_dims(codes, min_var=COLLAPSED_VAR):
    return np.nonzero(np.asarray(codes).var(axis=0) >= min_var)[0]


def factorvae_score(codes, factors, grid, L=64, M=800, seed=0, train_frac=0.8):
    """Majority-vote accuracy of (argmin normalised variance dim -> fixed factor)."""
    codes = np.asarray(codes, dtype=np.float64)
    keep = active_dims(codes)
    if keep.size == 0:
        raise MetricError("all code dimensions collapsed")
    scaled = codes[:, keep] / codes[:, keep].std(axis=0)
    F = len(grid.factors)
    rng = _rng(seed).child("factorvae")
    votes = np.empty((M, 2), dtype=np.int64)
    for v in range(M):
        k = rng.integers(F)
        idx, _ = sample_fixed_factor_indices(grid, k, L, rng)
        votes[v] = np.argmin(scaled[idx].var(axis=0, ddof=1)), k
    n_train = _split(M, train_frac)
    table = np.zeros((keep.size, F), dtype=np.int64)
    np.add.at(table, (votes[:n_train, 0], votes[:n_train, 1]), 1)
    predict = table.argmax(axis=1)
    test = votes[n_train:]
    return float((predict[test[:, 0]] == test[:, 1]).mean())


# ---- DCI ----

def _entropy_base(p, base):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / np.log(base))


def dci_from_importance(R):
    """(disentanglement, completeness) of a nonnegative importance matrix ``[D, F]``."""
    R = np.abs(np.asarray(R, dtype=np.float64))
    n_codes, F = R.shape
    total = R.sum()
    if total == 0 or F < 2 or n_codes < 2:
        raise MetricError("importance matrix is empty or too small")
    row, col = R.sum(axis=1), R.sum(axis=0)
    d_per = np.array([1 - _entropy_base(R[j] / row[j], F) if row[j] > 0 else 0.0
                      for j in range(n_codes)])
    c_per = np.array([1 - _entropy_base(R[:, k] / col[k], n_codes) if col[k] > 0 else 0.0
                      for k in range(F)])
    D = float((row / total * d_per).sum())
    C = float((col / total * c_per).sum())
    return float(np.clip(D, 0, 1)), float(np.clip(C, 0, 1))


def importance_matrix(codes, factors, seed=0, train_frac=0.8, C=1.0):
    """L1-penalised multinomial logistic model per factor on standardised codes.

    Returns ``(R [D, F], per-factor held-out accuracy [F])``. Importance is
    the mean absolute coefficient over classes; constant dims get zero rows.
    """
    codes = np.asarray(codes, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.int64)
    n = len(codes)
    order = _rng(seed).child("dci").permutation(n)
    n_train = _split(n, train_frac)
    tr, te = order[:n_train], order[n_train:]
    mu, sd = codes[tr].mean(axis=0), codes[tr].std(axis=0)
    live = sd > 1e-12
    if live.sum() < 2:
        raise MetricError("DCI needs at least two code dims with nonzero variance")
    X = (codes[:, live] - mu[live]) / sd[live]
    R = np.zeros((codes.shape[1], factors.shape[1]))
    acc = np.empty(factors.shape[1])
    for k in range(factors.shape[1]):
        clf = _fit_multinomial(X[tr], factors[tr, k], penalty="l1", solver="saga", C=C, tol=1e-3)
        R[live, k] = np.abs(clf.coef_).mean(axis=0)
        acc[k] = (clf.predict(X[te]) == factors[te, k]).mean()
    return R, acc


def dci(codes, factors, seed=0, train_frac=0.8):
    R, acc = importance_matrix(codes, factors, seed, train_frac)
    D, C = dci_from_importance(R)
    return D, C, float(acc.mean())


# ---- explicitness ----

def explicitness(codes, factors, seed=0, train_frac=0.8):
    """Mean one-vs-rest ROC-AUC of a multinomial logistic model on the full
    code, rescaled from [0.5, 1] to [0, 1]."""
    codes = np.asarray(codes, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.int64)
    order = _rng(seed).child("explicitness").permutation(len(codes))
    n_train = _split(len(codes), train_frac)
    tr, te = order[:n_train], order[n_train:]
    mu, sd = codes[tr].mean(axis=0), codes[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    X = (codes - mu) / sd
    per_factor = []
    for k in range(factors.shape[1]):
        y_tr, y_te = factors[tr, k], factors[te, k]
        clf = _fit_multinomial(X[tr], y_tr, C=100.0)
        proba = clf.predict_proba(X[te])
        aucs = []
        for col, cls in enumerate(clf.classes_):
            pos = y_te == cls
            if pos.all() or not pos.any():
                warnings.warn(f"factor {k} class {cls} absent from a split; skipped",
                              RuntimeWarning)
                continue
            aucs.append(roc_auc_score(pos, proba[:, col]))
        if aucs:
            per_factor.append(np.mean(aucs))
    if not per_factor:
        raise MetricError("no factor had both classes present in the evaluation split")
    return float(np.clip((np.mean(per_factor) - 0.5) / 0.5, 0.0, 1.0))


# ---- report ----

@dataclass
class MetricReport:
    scores: dict
    mi: list
    factor_entropies: list
    factor_names: list
    protocol: dict
    label: str = ""
    extra: dict = field(default_factory=dict)

    def mean(self, name):
        return self.scores[name]["mean"]

    def to_json(self):
        out = {name: self.scores[name] for name in METRIC_NAMES}
        out.update(label=self.label, mi=self.mi, factor_entropies=self.factor_entropies,
                   factor_names=self.factor_names, protocol=self.protocol, extra=self.extra)
        return out

    @classmethod
    def from_json(cls, obj):
        missing = [n for n in METRIC_NAMES if n not in obj]
        if missing:
            raise MetricError(f"report is missing fields {missing}")
        return cls({n: obj[n] for n in METRIC_NAMES}, obj.get("mi", []),
                   obj.get("factor_entropies", []), obj.get("factor_names", []),
                   obj.get("protocol", {}), obj.get("label", ""), obj.get("extra", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def scores_for_seed(codes, factors, grid, seed, sizes, mi=None, entropies=None):
    if mi is None:
        mi, entropies = mi_matrix(codes, factors, sizes.bins)
    d, c, i = dci(codes, factors, seed, sizes.train_frac)
    return {
        "factorvae": factorvae_score(codes, factors, grid, sizes.L, sizes.M, seed, sizes.train_frac),
        "dci_d": d, "dci_c": c, "dci_i": i,
        "mig": mig(mi, entropies),
        "betavae": betavae_score(codes, factors, grid, sizes.L, sizes.M, seed, sizes.train_frac),
        "modularity": modularity(mi),
        "explicitness": explicitness(codes, factors, seed, sizes.train_frac),
    }


def evaluate_codes(codes, dataset, sizes=None, seeds=(0,), workers=1, label=""):
    """All scores of a code matrix over ``seeds``, as mean/std/per-seed values."""
    sizes = sizes or ProtocolSizes()
    codes = np.asarray(codes, dtype=np.float64)
    if not np.isfinite(codes).all():
        raise MetricError("codes contain non-finite values")
    if len(codes) != len(dataset):
        raise MetricError("codes and dataset have different lengths")
    factors = dataset.factor_indices
    mi, ent = mi_matrix(codes, factors, sizes.bins)
    run = lambda s: scores_for_seed(codes, factors, dataset.grid, s, sizes, mi, ent)  # noqa: E731
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(run, seeds))
    else:
        per_seed = [run(s) for s in seeds]
    scores = {}
    for name in METRIC_NAMES:
        vals = [float(r[name]) for r in per_seed]
        scores[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                        "seeds": [int(s) for s in seeds], "values": vals}
    return MetricReport(scores, mi.tolist(), ent.tolist(), list(dataset.grid.names),
                        asdict(sizes), label)


def evaluate(model, dataset, sizes=None, seeds=(0,), workers=1, label=""):
    """Scores of a trained model (or a checkpoint path) on ``dataset``."""
    if not hasattr(model, "encode_means"):
        from .dotvae import load_checkpoint

        model, _ = load_checkpoint(model)
    if model.config.n_pixels != dataset.n_pixels:
        raise MetricError("dataset images do not match the encoder input size")
    codes = model.encode_means(dataset.flat_images())
    report = evaluate_codes(codes, dataset, sizes, seeds, workers, label)
    report.extra["K"] = model.config.K
    return report
