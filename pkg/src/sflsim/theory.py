"""Closed-form classifier-update checks under orthogonal class features.

With every sample of class y carrying the same unit one-hot feature e_y,
one full-batch descent step on the classifier has an exact closed form for
the logit movement of each class, both for plain softmax cross-entropy and
for its prior-adjusted variant. This module evaluates those closed forms,
reproduces them empirically by actually taking the gradient step, and
sweeps the focus-class prior to expose the crossover: the adjusted loss
moves rare-class logits more than the plain loss, and frequent-class
logits less, with equality at the uniform point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LabelDistribution, log_prior, per_sample_ce

Array = np.ndarray


@dataclass
class OrthogonalFeatureSet:
    """Dataset whose per-class features are exactly orthogonal unit vectors."""

    num_classes: int
    dim: int
    prior: LabelDistribution
    class_features: Array  # (M, d), row y = feature shared by class y
    class_counts: Array  # (M,)
    features: Array  # (n, d)
    labels: Array  # (n,)


def build_orthogonal_dataset(
    num_classes: int,
    dim: int,
    prior: LabelDistribution,
    n_total: int,
    seed: int = 0,
) -> OrthogonalFeatureSet:
    """Realize a target prior with identical one-hot features per class.

    Class y receives round(n_total * P(y)) copies of the unit basis vector
    e_y; every positive-prior class must round to at least one sample.
    Row order is shuffled under the seed (the per-class averages the
    closed forms use are order independent).
    """
    if dim < num_classes:
        raise ValueError("need dim >= num_classes for orthogonal class features")
    if prior.num_classes != num_classes:
        raise ValueError("prior size must match num_classes")
    counts = np.array([round(n_total * p) for p in prior.probs], dtype=np.int64)
    for y, (count, p) in enumerate(zip(counts, prior.probs)):
        if p > 0 and count < 1:
            raise ValueError(
                f"class {y} has prior {p} but rounds to zero samples at "
                f"n_total={n_total}; increase n_total"
            )
        if p == 0:
            counts[y] = 0
    class_features = np.zeros((num_classes, dim))
    class_features[np.arange(num_classes), np.arange(num_classes)] = 1.0
    labels = np.repeat(np.arange(num_classes), counts)
    features = class_features[labels]
    order = np.random.default_rng(seed).permutation(labels.size)
    return OrthogonalFeatureSet(
        num_classes=num_classes,
        dim=dim,
        prior=prior,
        class_features=class_features,
        class_counts=counts,
        features=features[order],
        labels=labels[order],
    )


def _logits(fs: OrthogonalFeatureSet, zeta: Array) -> Array:
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.shape != (fs.num_classes, fs.dim):
        raise ValueError(f"classifier must have shape ({fs.num_classes}, {fs.dim})")
    return fs.features @ zeta.T


def analytic_logit_update_plain(
    fs: OrthogonalFeatureSet, zeta: Array, eta: float
) -> Array:
    """Closed-form logit movement per class under plain cross-entropy.

    For class y: eta * P(y) * avg over its samples of
    E / (1 + E) with E = sum_{y' != y} exp(s_{y'} - s_y), times |pi_y|^2.
    """
    logits = _logits(fs, zeta)
    out = np.zeros(fs.num_classes)
    norms = (fs.class_features**2).sum(axis=1)
    for y in range(fs.num_classes):
        if fs.class_counts[y] == 0:
            continue
        rows = logits[fs.labels == y]
        tail = np.exp(rows - rows[:, y : y + 1]).sum(axis=1) - 1.0
        out[y] = eta * fs.prior.probs[y] * np.mean(tail / (1.0 + tail)) * norms[y]
    return out


def analytic_logit_update_adjusted(
    fs: OrthogonalFeatureSet, zeta: Array, eta: float
) -> Array:
    """Closed-form logit movement per class under the adjusted loss.

    For class y: eta * avg of P(y) * T / (P(y) + T) with
    T = sum_{y' != y} P(y') exp(s_{y'} - s_y), times |pi_y|^2.
    """
    logits = _logits(fs, zeta)
    p = fs.prior.probs
    out = np.zeros(fs.num_classes)
    norms = (fs.class_features**2).sum(axis=1)
    for y in range(fs.num_classes):
        if fs.class_counts[y] == 0:
            continue
        rows = logits[fs.labels == y]
        weighted = (p[None, :] * np.exp(rows - rows[:, y : y + 1])).sum(axis=1)
        tail = weighted - p[y]
        out[y] = eta * np.mean(p[y] * tail / (p[y] + tail)) * norms[y]
    return out


def empirical_logit_update(
    fs: OrthogonalFeatureSet, zeta: Array, eta: float, adjusted: bool
) -> Array:
    """Logit movement from actually taking one classifier gradient step.

    The full-dataset loss weights each class's sample-average term by its
    prior probability; the step is zeta - eta * grad, and the reported
    quantity is (zeta_new - zeta)_y . pi_y per class.
    """
    zeta = np.asarray(zeta, dtype=np.float64)
    logits = _logits(fs, zeta)
    offsets = log_prior(fs.prior) if adjusted else None
    _, row_grads = per_sample_ce(logits, fs.labels, offsets)
    weights = fs.prior.probs[fs.labels] / fs.class_counts[fs.labels]
    grad = (weights[:, None] * row_grads).T @ fs.features
    delta = -eta * grad
    return (delta * fs.class_features).sum(axis=1)


@dataclass(frozen=True)
class SweepPoint:
    p_focus: float
    plain_analytic: float
    plain_empirical: float
    adjusted_analytic: float
    adjusted_empirical: float
    ordering: str  # adjusted_gt | adjusted_lt | equal


@dataclass
class ClassifierUpdateReport:
    num_classes: int
    eta: float
    points: list[SweepPoint]

    def to_csv(self) -> str:
        lines = ["P_y,plain_analytic,plain_empirical,adj_analytic,adj_empirical,ordering_flag"]
        for pt in self.points:
            lines.append(
                ",".join(
                    [
                        repr(pt.p_focus),
                        repr(pt.plain_analytic),
                        repr(pt.plain_empirical),
                        repr(pt.adjusted_analytic),
                        repr(pt.adjusted_empirical),
                        pt.ordering,
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def with_swapped_losses(self) -> ClassifierUpdateReport:
        """Exchange the plain and adjusted columns (negative control)."""
        swapped = [
            SweepPoint(
                p_focus=pt.p_focus,
                plain_analytic=pt.adjusted_analytic,
                plain_empirical=pt.adjusted_empirical,
                adjusted_analytic=pt.plain_analytic,
                adjusted_empirical=pt.plain_empirical,
                ordering=_ordering(pt.adjusted_analytic, pt.plain_analytic),
            )
            for pt in self.points
        ]
        return ClassifierUpdateReport(self.num_classes, self.eta, swapped)


def default_prior_grid(num_classes: int) -> list[float]:
    return sorted({0.001, 0.01, 0.1, 1.0 / num_classes, 0.5, 0.9, 0.99, 0.999})


def _ordering(plain: float, adjusted: float, atol: float = 1e-12) -> str:
    if abs(adjusted - plain) <= atol:
        return "equal"
    return "adjusted_gt" if adjusted > plain else "adjusted_lt"


def crossover_sweep(
    num_classes: int,
    dim: int,
    eta: float,
    prior_grid: list[float] | None = None,
    n_total: int = 5000,
    seed: int = 0,
) -> ClassifierUpdateReport:
    """Sweep the focus class's prior with all other classes kept uniform.

    At every grid point the focus class (class 0) holds prior p and each
    other class holds (1 - p) / (M - 1); the classifier starts at zero.
    """
    grid = default_prior_grid(num_classes) if prior_grid is None else list(prior_grid)
    points = []
    for p in grid:
        if not 0.0 < p < 1.0:
            raise ValueError("grid values must lie strictly inside (0, 1)")
        probs = np.full(num_classes, (1.0 - p) / (num_classes - 1))
        probs[0] = p
        probs /= probs.sum()
        fs = build_orthogonal_dataset(
            num_classes, dim, LabelDistribution(probs=probs), n_total, seed
        )
        zeta = np.zeros((num_classes, dim))
        plain_a = analytic_logit_update_plain(fs, zeta, eta)[0]
        adj_a = analytic_logit_update_adjusted(fs, zeta, eta)[0]
        plain_e = empirical_logit_update(fs, zeta, eta, adjusted=False)[0]
        adj_e = empirical_logit_update(fs, zeta, eta, adjusted=True)[0]
        points.append(
            SweepPoint(
                p_focus=p,
                plain_analytic=float(plain_a),
                plain_empirical=float(plain_e),
                adjusted_analytic=float(adj_a),
                adjusted_empirical=float(adj_e),
                ordering=_ordering(plain_a, adj_a),
            )
        )
    return ClassifierUpdateReport(num_classes=num_classes, eta=eta, points=points)


def verify_report(
    report: ClassifierUpdateReport,
    agreement_rtol: float = 1e-6,
    equality_atol: float = 1e-12,
) -> list[str]:
    """Check analytic/empirical agreement and the crossover ordering.

    Returns a list of human-readable failures (empty = all assertions hold).
    Below the uniform prior the adjusted update must exceed the plain one,
    above it the plain update must exceed the adjusted one, and at the
    uniform point the two must coincide.
    """
    failures = []
    uniform = 1.0 / report.num_classes
    for pt in report.points:
        for name, analytic, empirical in (
            ("plain", pt.plain_analytic, pt.plain_empirical),
            ("adjusted", pt.adjusted_analytic, pt.adjusted_empirical),
        ):
            scale = max(abs(analytic), abs(empirical), 1e-300)
            if abs(analytic - empirical) > agreement_rtol * scale:
                failures.append(
                    f"P(y)={pt.p_focus}: {name} analytic {analytic} vs "
                    f"empirical {empirical} disagree"
                )
        if abs(pt.p_focus - uniform) <= 1e-15:
            if abs(pt.adjusted_analytic - pt.plain_analytic) > equality_atol:
                failures.append(
                    f"P(y)={pt.p_focus}: expected equality at the uniform prior, "
                    f"got plain {pt.plain_analytic} vs adjusted {pt.adjusted_analytic}"
                )
        elif pt.p_focus < uniform:
            if not pt.adjusted_analytic > pt.plain_analytic:
                failures.append(
                    f"P(y)={pt.p_focus}: adjusted update {pt.adjusted_analytic} "
                    f"should exceed plain {pt.plain_analytic} below the uniform prior"
                )
        else:
            if not pt.adjusted_analytic < pt.plain_analytic:
                failures.append(
                    f"P(y)={pt.p_focus}: adjusted update {pt.adjusted_analytic} "
                    f"should trail plain {pt.plain_analytic} above the uniform prior"
                )
    return failures
