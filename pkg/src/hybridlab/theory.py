"""Why averaging two anomaly scores can beat both of them.

Scores are standardized, decomposed into the ideal labelling f(x) in
{-1, +1} plus an error term, and the averaged score's expected squared
error is split into component errors, their correlation, and two
constants. All expectations are plain sample means (no Bessel
correction) so the decomposition is exact algebra over the empirical
moments, not an approximation.
"""

import csv
from dataclasses import dataclass

import numpy as np


def standardize(scores):
    """Zero-mean unit-variance rescaling; preserves the ranking."""
    s = np.asarray(scores, dtype=np.float64)
    std = s.std()
    if std == 0.0:
        raise ValueError("cannot standardize a constant score vector")
    return (s - s.mean()) / std


def error_decomposition(scores, labels):
    """Per-sample error eps = s - f and the expected squared error.

    `labels` must be +1 for anomalies and -1 for inliers.
    """
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(labels, dtype=np.float64)
    if not np.all(np.abs(f) == 1.0):
        raise ValueError("labels must be in {-1, +1}")
    eps = s - f
    return eps, float(np.mean(eps * eps))


@dataclass
class EnsembleStats:
    rho: float       # correlation of the two error terms
    alpha: float     # ratio of the larger to the smaller expected error
    e: float         # the smaller expected error
    c1: float        # 0.5 * std(eps_d) * std(eps_g)
    c2: float        # 0.5 * mean(eps_d) * mean(eps_g)
    err_disc: float
    err_gen: float
    err_hybrid: float


def ensemble_stats(s_disc, s_gen, labels):
    """Statistics of the half-half score average against each component.

    Inputs are expected standardized; the averaged score is
    (s_disc + s_gen) / 2.
    """
    eps_d, err_d = error_decomposition(s_disc, labels)
    eps_g, err_g = error_decomposition(s_gen, labels)
    s_h = 0.5 * (np.asarray(s_disc, dtype=np.float64)
                 + np.asarray(s_gen, dtype=np.float64))
    _, err_h = error_decomposition(s_h, labels)

    std_d, std_g = float(eps_d.std()), float(eps_g.std())
    if std_d == 0.0 or std_g == 0.0:
        raise ValueError("error correlation undefined for zero-variance errors")
    cov = float(np.mean((eps_d - eps_d.mean()) * (eps_g - eps_g.mean())))
    rho = cov / (std_d * std_g)
    hi, lo = max(err_d, err_g), min(err_d, err_g)
    alpha = 1.0 if hi == lo else hi / lo
    return EnsembleStats(rho=rho, alpha=alpha, e=lo,
                         c1=0.5 * std_d * std_g,
                         c2=0.5 * float(eps_d.mean()) * float(eps_g.mean()),
                         err_disc=err_d, err_gen=err_g, err_hybrid=err_h)


def condition_lhs(stats):
    """(alpha - 3)/4 * e + C1*rho + C2; negative means the average is
    guaranteed to beat the better component."""
    return (stats.alpha - 3.0) / 4.0 * stats.e + stats.c1 * stats.rho + stats.c2


def verify_identity(s_disc, s_gen, labels):
    """Residual of E(s_h) = E(s_d)/4 + E(s_g)/4 + C1*rho + C2 on the
    empirical sample; exact algebra, so the residual sits at float
    precision."""
    stats = ensemble_stats(s_disc, s_gen, labels)
    rhs = (0.25 * stats.err_disc + 0.25 * stats.err_gen
           + stats.c1 * stats.rho + stats.c2)
    return abs(stats.err_hybrid - rhs)


@dataclass
class SufficiencyReport:
    lhs: float
    err_hybrid: float
    err_best_component: float
    condition_holds: bool
    improved: bool
    implication_ok: bool


def verify_sufficiency(s_disc, s_gen, labels):
    """Checks 'condition negative implies the average beats both
    components' on the empirical sample."""
    stats = ensemble_stats(s_disc, s_gen, labels)
    lhs = condition_lhs(stats)
    best = min(stats.err_disc, stats.err_gen)
    holds = lhs < 0.0
    improved = stats.err_hybrid < best
    return SufficiencyReport(lhs=lhs, err_hybrid=stats.err_hybrid,
                             err_best_component=best, condition_holds=holds,
                             improved=improved,
                             implication_ok=(not holds) or improved)


def score_correlation(s_a, s_b):
    """Pearson correlation of two raw score vectors."""
    a = np.asarray(s_a, dtype=np.float64)
    b = np.asarray(s_b, dtype=np.float64)
    if a.std() == 0.0 or b.std() == 0.0:
        raise ValueError("correlation undefined for constant scores")
    return float(np.mean((a - a.mean()) * (b - b.mean())) / (a.std() * b.std()))


def rank_correlation(s_a, s_b):
    """Spearman correlation (Pearson on midranks)."""
    return score_correlation(_midranks(s_a), _midranks(s_b))


def _midranks(values):
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    i = 0
    sorted_v = v[order]
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


THEORY_COLUMNS = ("rho", "alpha", "e", "c1", "c2", "lhs",
                  "err_disc", "err_gen", "err_hybrid", "improved")


def write_theory_csv(path, stats_rows):
    """One row per evaluated score pair: the ensemble statistics, the
    condition value, and whether the average beat both components."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(THEORY_COLUMNS)
        for stats in stats_rows:
            lhs = condition_lhs(stats)
            improved = stats.err_hybrid < min(stats.err_disc, stats.err_gen)
            writer.writerow([repr(stats.rho), repr(stats.alpha), repr(stats.e),
                             repr(stats.c1), repr(stats.c2), repr(lhs),
                             repr(stats.err_disc), repr(stats.err_gen),
                             repr(stats.err_hybrid), improved])
    return path
