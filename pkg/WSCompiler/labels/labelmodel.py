"""
Label model: estimate one accuracy per supervision source by EM and turn
conflicting, incomplete votes into probabilistic training labels.

Generative model per unit with K classes:
    y ~ Categorical(prior)
    a non-abstaining source s votes y with probability alpha_s,
    otherwise uniformly over the other K - 1 classes.
Abstention carries no information about y.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import logsumexp

from WSCompiler.labels.matrix import ABSTAIN, LabelMatrix, UnitRef
from WSCompiler.schema.schema import TaskKind
from WSCompiler.utils.errors import DegenerateMatrix, UnknownSource
from WSCompiler.utils.logger import get_logger

logger = get_logger(__name__)

EPSILON = 1e-4
INIT_ACCURACY = 0.7


@dataclass
class SourceModel:
    task: str
    accuracies: Dict[str, float]
    class_prior: List[float]  # Select 任务为空：候选上均匀
    log_likelihood: float
    history: List[float] = field(default_factory=list)
    iterations: int = 0
    seed: int = 0

    @property
    def sources(self) -> List[str]:
        return sorted(self.accuracies)

    @property
    def uniform_prior(self) -> bool:
        return not self.class_prior


@dataclass
class ProbLabels:
    task: str
    units: List[UnitRef]
    probs: List[Optional[np.ndarray]]  # None 表示 ABSTAINED

    def __len__(self) -> int:
        return len(self.units)

    def abstained(self) -> np.ndarray:
        return np.array([p is None for p in self.probs], dtype=bool)

    def hard(self) -> np.ndarray:
        return np.array([-1 if p is None else int(np.argmax(p)) for p in self.probs], dtype=np.int64)

    def subset(self, rows) -> "ProbLabels":
        keep = set(rows)
        pairs = [(u, p) for u, p in zip(self.units, self.probs) if u.row in keep]
        return ProbLabels(self.task, [u for u, _ in pairs], [p for _, p in pairs])


def _accuracy_bounds(matrix: LabelMatrix) -> tuple:
    informative = matrix.cardinality[matrix.cardinality > 1]
    k_min = int(informative.min()) if informative.size else 2
    return 1.0 / k_min + EPSILON, 1.0 - EPSILON


def _log_prior(matrix: LabelMatrix, prior: Optional[np.ndarray]) -> np.ndarray:
    n, k_max = matrix.n_units, matrix.max_cardinality
    valid = np.arange(k_max)[None, :] < matrix.cardinality[:, None]
    with np.errstate(divide="ignore"):
        if prior is None:
            base = -np.log(np.maximum(matrix.cardinality, 1)).astype(np.float64)[:, None]
            base = np.broadcast_to(base, (n, k_max))
        else:
            base = np.broadcast_to(np.log(prior)[None, :], (n, k_max))
    return np.where(valid, base, -np.inf)


def _log_joint(matrix: LabelMatrix, accuracy: np.ndarray, prior: Optional[np.ndarray]) -> np.ndarray:
    """log P(y, votes) per unit and class; invalid classes are -inf."""
    out = _log_prior(matrix, prior).copy()
    k = matrix.cardinality
    log_other = np.log(np.maximum(k - 1, 1)).astype(np.float64)
    # 按来源顺序逐个累加，保证求和顺序固定
    for s in range(len(matrix.sources)):
        v = matrix.votes[:, s]
        rows = np.nonzero((v != ABSTAIN) & (k > 1))[0]
        if rows.size == 0:
            continue
        log_err = np.log1p(-accuracy[s]) - log_other[rows]
        out[rows] += log_err[:, None]
        out[rows, v[rows]] += np.log(accuracy[s]) - log_err
    return out


def _posterior(log_joint: np.ndarray) -> tuple:
    log_z = logsumexp(log_joint, axis=1)
    return np.exp(log_joint - log_z[:, None]), log_z


def fit_em(matrix: LabelMatrix, max_iters: int = 500, tol: float = 1e-10, seed: int = 0) -> SourceModel:
    voted = matrix.voted_mask()
    if not voted.any():
        raise DegenerateMatrix(f"task '{matrix.task}': every unit abstains")

    lo, hi = _accuracy_bounds(matrix)
    n_sources = len(matrix.sources)
    accuracy = np.clip(np.full(n_sources, INIT_ACCURACY), lo, hi)
    learn_prior = matrix.kind != TaskKind.SELECT
    prior = np.full(matrix.max_cardinality, 1.0 / matrix.max_cardinality) if learn_prior else None

    history: List[float] = []
    iterations = 0
    while True:
        # E-step
        post, log_z = _posterior(_log_joint(matrix, accuracy, prior))
        ll = float(np.sum(log_z[voted]))
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)
        if iterations >= max_iters:
            break

        # M-step：截断后的精确最大化，对数似然不减
        for s in range(n_sources):
            v = matrix.votes[:, s]
            rows = np.nonzero((v != ABSTAIN) & (matrix.cardinality > 1))[0]
            if rows.size:
                accuracy[s] = np.clip(np.sum(post[rows, v[rows]]) / rows.size, lo, hi)
        if learn_prior:
            prior = np.sum(post[voted], axis=0) / voted.sum()
            prior = prior / prior.sum()
        iterations += 1

    model = SourceModel(
        task=matrix.task,
        accuracies={s: float(a) for s, a in zip(matrix.sources, accuracy)},
        class_prior=[float(p) for p in prior] if learn_prior else [],
        log_likelihood=history[-1],
        history=history,
        iterations=iterations,
        seed=seed
    )
    logger.info("task %s: EM stopped after %d iterations, log-likelihood %.6f", matrix.task, iterations,
                model.log_likelihood)
    return model


def posterior_labels(model: SourceModel, matrix: LabelMatrix) -> ProbLabels:
    for s in matrix.sources:
        if s not in model.accuracies:
            raise UnknownSource(s)
    accuracy = np.array([model.accuracies[s] for s in matrix.sources], dtype=np.float64)
    prior = None if model.uniform_prior else np.asarray(model.class_prior, dtype=np.float64)
    if prior is not None and matrix.n_units and prior.size != matrix.max_cardinality:
        raise DegenerateMatrix(f"task '{matrix.task}': prior has {prior.size} classes, units have {matrix.max_cardinality}")

    probs: List[Optional[np.ndarray]] = []
    if matrix.n_units:
        post, _ = _posterior(_log_joint(matrix, accuracy, prior))
        voted = matrix.voted_mask()
        for i in range(matrix.n_units):
            probs.append(post[i, :matrix.cardinality[i]].copy() if voted[i] else None)
    return ProbLabels(matrix.task, list(matrix.units), probs)


def majority_vote(matrix: LabelMatrix) -> ProbLabels:
    probs: List[Optional[np.ndarray]] = []
    for i in range(matrix.n_units):
        row = matrix.votes[i]
        cast = row[row != ABSTAIN]
        if cast.size == 0:
            probs.append(None)
            continue
        k = int(matrix.cardinality[i])
        counts = np.bincount(cast, minlength=k)
        one_hot = np.zeros(k)
        one_hot[int(np.argmax(counts))] = 1.0  # 平票取最小类别下标
        probs.append(one_hot)
    return ProbLabels(matrix.task, list(matrix.units), probs)


def rebalance_weights(labels: ProbLabels) -> np.ndarray:
    weights = np.zeros(len(labels))
    present = [p for p in labels.probs if p is not None]
    if not present:
        return weights
    k = max(p.size for p in present)
    mass = np.zeros(k)
    for p in present:
        mass[:p.size] += p
    n_eff = len(present)
    for i, p in enumerate(labels.probs):
        if p is not None:
            weights[i] = (n_eff / k) / mass[int(np.argmax(p))]
    return weights


def source_coverage(matrix: LabelMatrix) -> Dict[str, float]:
    if matrix.n_units == 0:
        return {s: 0.0 for s in matrix.sources}
    return {s: float(np.mean(matrix.votes[:, j] != ABSTAIN)) for j, s in enumerate(matrix.sources)}
