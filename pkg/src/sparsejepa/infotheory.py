"""Exact multiinformation computations on small discrete joint distributions.

Everything here is brute-force enumeration over explicit probability tables,
in nats. Two verification drivers check the grouping claims:

* grouping a joint distribution through deterministic per-subset functions
  never increases multiinformation (strictly decreases it when inter-group
  dependence is discarded);
* for latent variables Z with observed X and any deterministic G = f(X),
  I(Z; G) <= I(Z; X) (data processing), with equality exactly when G is a
  sufficient statistic for Z. The second driver records where the reverse
  claim would fail.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_VARS = 8
MAX_TABLE = 2**20


@dataclass(frozen=True)
class JointDistribution:
    """Explicit pmf over n discrete variables, stored as an ndarray whose
    axis k indexes variable k (row-major table)."""

    pmf: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=np.float64)
        object.__setattr__(self, "pmf", p)
        if p.ndim > MAX_VARS:
            raise ValueError(f"at most {MAX_VARS} variables supported")
        if p.size > MAX_TABLE:
            raise ValueError(f"table size {p.size} exceeds enumeration bound {MAX_TABLE}")
        if (p < 0).any():
            raise ValueError("negative probability")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {p.sum()}, not 1")

    @property
    def n(self) -> int:
        return self.pmf.ndim

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return self.pmf.shape

    def marginal(self, axes: tuple[int, ...]) -> np.ndarray:
        """Marginal pmf over the given variables, axes in ascending order."""
        drop = tuple(i for i in range(self.n) if i not in axes)
        return self.pmf.sum(axis=drop) if drop else self.pmf

    @classmethod
    def random(cls, cardinalities, rng: np.random.Generator) -> "JointDistribution":
        """Symmetric Dirichlet(1) over the full table: full support, seedable."""
        shape = tuple(cardinalities)
        flat = rng.dirichlet(np.ones(int(np.prod(shape))))
        return cls(pmf=flat.reshape(shape))

    @classmethod
    def product(cls, marginals) -> "JointDistribution":
        p = np.array(1.0)
        for m in marginals:
            p = np.multiply.outer(p, np.asarray(m, dtype=np.float64))
        return cls(pmf=p.reshape(p.shape[1:]) if p.shape[:1] == (1,) else p)


@dataclass(frozen=True)
class GroupingMap:
    """Partition of variables 0..n-1 plus one deterministic lookup table per
    subset, mapping that subset's configurations to an output alphabet."""

    partition: tuple[tuple[int, ...], ...]
    tables: tuple[np.ndarray, ...]  # tables[j] shaped by the subset's cardinalities

    def __post_init__(self):
        seen: set[int] = set()
        for subset in self.partition:
            if not subset:
                raise ValueError("empty subset in partition")
            if seen & set(subset):
                raise ValueError("partition subsets overlap")
            seen |= set(subset)
        if len(self.partition) != len(self.tables):
            raise ValueError("one lookup table per subset required")

    def validate_for(self, dist: JointDistribution) -> None:
        covered = sorted(i for s in self.partition for i in s)
        if covered != list(range(dist.n)):
            raise ValueError("partition does not cover the distribution's variables")
        for subset, table in zip(self.partition, self.tables):
            expect = tuple(dist.cardinalities[i] for i in subset)
            if np.asarray(table).shape != expect:
                raise ValueError(f"lookup table shape {np.asarray(table).shape} != {expect}")

    @classmethod
    def identity(cls, dist: JointDistribution) -> "GroupingMap":
        return cls(partition=tuple((i,) for i in range(dist.n)),
                   tables=tuple(np.arange(c) for c in dist.cardinalities))

    @classmethod
    def random(cls, dist: JointDistribution, rng: np.random.Generator) -> "GroupingMap":
        """Random partition and random surjective-ish lookup tables."""
        n = dist.n
        m = int(rng.integers(1, n + 1))
        labels = rng.integers(0, m, size=n)
        # ensure no empty subset by assigning each subset id at least once
        labels[rng.permutation(n)[:m]] = np.arange(m)
        partition = tuple(tuple(np.flatnonzero(labels == j).tolist()) for j in range(m))
        tables = []
        for subset in partition:
            shape = tuple(dist.cardinalities[i] for i in subset)
            out_card = int(rng.integers(1, int(np.prod(shape)) + 1))
            tables.append(rng.integers(0, out_card, size=shape))
        if m == n and all(_is_injective(t) for t in tables):
            # a pure per-variable relabeling groups nothing; force one map to
            # actually merge configurations
            j = int(rng.integers(0, m))
            card = dist.cardinalities[partition[j][0]]
            out_card = int(rng.integers(1, card))
            tables[j] = rng.integers(0, out_card, size=(card,))
        return cls(partition=partition, tables=tuple(tables))


def _is_injective(table: np.ndarray) -> bool:
    flat = np.asarray(table).reshape(-1)
    return len(np.unique(flat)) == flat.size


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Sum p ln(p/q) in nats, with 0 ln(0/q) = 0.

    Returns +inf (flagged, not raised) when q(x) = 0 < p(x).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if (q[support] == 0).any():
        return float("inf")
    ps, qs = p[support], q[support]
    return float(np.sum(ps * np.log(ps / qs)))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    support = p > 0
    return float(-np.sum(p[support] * np.log(p[support])))


def multiinformation(dist: JointDistribution) -> float:
    """KL from the joint to the product of its marginals, in nats."""
    product = np.array(1.0)
    for i in range(dist.n):
        product = np.multiply.outer(product, dist.marginal((i,)))
    return kl_divergence(dist.pmf, product.reshape(dist.cardinalities))


def multiinformation_entropy_sum(dist: JointDistribution) -> float:
    """Independent oracle: sum of marginal entropies minus joint entropy."""
    return sum(entropy(dist.marginal((i,))) for i in range(dist.n)) - entropy(dist.pmf)


def mutual_information(dist: JointDistribution, left: tuple[int, ...],
                       right: tuple[int, ...]) -> float:
    """I(block_left ; block_right) via H(L) + H(R) - H(L, R)."""
    return (entropy(dist.marginal(tuple(sorted(left))))
            + entropy(dist.marginal(tuple(sorted(right))))
            - entropy(dist.marginal(tuple(sorted(left + right)))))


def apply_grouping(dist: JointDistribution, grouping: GroupingMap) -> JointDistribution:
    """Pushforward of the joint under the deterministic per-subset maps."""
    grouping.validate_for(dist)
    out_cards = tuple(int(np.asarray(t).max()) + 1 for t in grouping.tables)
    out = np.zeros(out_cards)
    for config in itertools.product(*(range(c) for c in dist.cardinalities)):
        g = tuple(int(np.asarray(table)[tuple(config[i] for i in subset)])
                  for subset, table in zip(grouping.partition, grouping.tables))
        out[g] += dist.pmf[config]
    return JointDistribution(pmf=out / out.sum())


def apply_grouping_to_block(dist: JointDistribution, grouping: GroupingMap,
                            block_offset: int) -> JointDistribution:
    """Pushforward that maps only variables >= block_offset (the X block),
    leaving the leading variables (the Z block) untouched."""
    shifted = GroupingMap(
        partition=tuple(tuple(i + block_offset for i in s) for s in grouping.partition),
        tables=grouping.tables)
    full = GroupingMap(
        partition=tuple((i,) for i in range(block_offset)) + shifted.partition,
        tables=tuple(np.arange(c) for c in dist.cardinalities[:block_offset])
        + shifted.tables)
    return apply_grouping(dist, full)


# ---------------------------------------------------------------------------
# verification drivers


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Per-trial generator derived from (root seed, trial index); trials are
    independent of execution order and may run in parallel."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(trial,)))


def _lemma_trial(seed: int, trial: int, min_vars: int, max_vars: int, max_card: int,
                 tol: float, strict_margin: float) -> dict:
    trial_rng = _trial_rng(seed, trial)
    n = int(trial_rng.integers(min_vars, max_vars + 1))
    cards = trial_rng.integers(2, max_card + 1, size=n)
    dist = JointDistribution.random(tuple(int(c) for c in cards), trial_rng)
    grouping = GroupingMap.random(dist, trial_rng)
    ix = multiinformation(dist)
    ig = multiinformation(apply_grouping(dist, grouping))
    margin = ix - ig
    inter_group = ix - sum(
        multiinformation(JointDistribution(pmf=_renorm(dist.marginal(tuple(sorted(s))))))
        for s in grouping.partition if len(s) > 1)
    out = {"trial": trial, "margin": margin,
           "strict_expected": inter_group > strict_margin,
           "strict": margin > tol}
    if margin < -tol:
        out["violation"] = {
            "trial": trial, "margin": margin,
            "pmf": dist.pmf.tolist(),
            "partition": [list(s) for s in grouping.partition],
            "tables": [np.asarray(tb).tolist() for tb in grouping.tables],
        }
    return out


def _lemma_chunk(args) -> list[dict]:
    seed, trials, kwargs = args
    return [_lemma_trial(seed, t, **kwargs) for t in trials]


def verify_grouping_inequality(trials: int, seed: int,
                               min_vars: int = 3, max_vars: int = 5,
                               max_card: int = 3, tol: float = 1e-9,
                               strict_margin: float = 1e-6,
                               workers: int = 1) -> dict:
    """Random-trial check that grouping never increases multiinformation.

    Each trial draws a Dirichlet(1) table, a random partition, and random
    per-subset lookup tables. Records the slack I(X) - I(G) per trial and,
    for trials where the grouping discards inter-group dependence (I(X) minus
    the within-group multiinformation sum exceeds ``strict_margin``), whether
    the inequality was strict.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kwargs = dict(min_vars=min_vars, max_vars=max_vars, max_card=max_card,
                  tol=tol, strict_margin=strict_margin)
    results = _run_trials(_lemma_chunk, seed, trials, kwargs, workers)
    violations = [r["violation"] for r in results if "violation" in r]
    margins_arr = np.asarray([r["margin"] for r in results])
    strict_expected = sum(r["strict_expected"] for r in results)
    strict_observed = sum(r["strict_expected"] and r["strict"] for r in results)
    return {
        "trials": trials,
        "violations": violations,
        "margin_min": float(margins_arr.min()),
        "margin_mean": float(margins_arr.mean()),
        "margin_max": float(margins_arr.max()),
        "strict_expected": strict_expected,
        "strict_observed": strict_observed,
        "passed": not violations and strict_observed == strict_expected,
    }


def _renorm(p: np.ndarray) -> np.ndarray:
    return p / p.sum()


@dataclass(frozen=True)
class LatentModel:
    """Joint distribution over (Z_1..Z_k, X_1..X_n) with the first
    ``num_latent`` axes designated as the latent block."""

    joint: JointDistribution
    num_latent: int

    def __post_init__(self):
        if not (1 <= self.num_latent < self.joint.n):
            raise ValueError("num_latent must leave at least one observed variable")

    @property
    def z_axes(self) -> tuple[int, ...]:
        return tuple(range(self.num_latent))

    @property
    def x_axes(self) -> tuple[int, ...]:
        return tuple(range(self.num_latent, self.joint.n))


def latent_grouping_report(model: LatentModel, grouping: GroupingMap,
                           tol: float = 1e-9) -> dict:
    """Exact audit of one (model, grouping) pair.

    Computes I(Z;X), I(Z;G), I(X multiinformation), I(G multiinformation) and
    classifies the trial: deterministic G = f(X) forces I(Z;G) <= I(Z;X)
    (data processing), so the trial is either ``equality`` (G sufficient for
    Z) or ``strict-dpi`` (the increase claim fails as literally stated).
    """
    x_dist = JointDistribution(pmf=_renorm(model.joint.marginal(model.x_axes)))
    grouping.validate_for(x_dist)
    grouped = apply_grouping_to_block(model.joint, grouping, model.num_latent)
    k = model.num_latent
    izx = mutual_information(model.joint, model.z_axes, model.x_axes)
    izg = mutual_information(grouped, tuple(range(k)), tuple(range(k, grouped.n)))
    ix = multiinformation(x_dist)
    ig = multiinformation(JointDistribution(pmf=_renorm(grouped.marginal(
        tuple(range(k, grouped.n))))))
    dpi_gap = izx - izg
    if dpi_gap < -tol:
        status = "dpi-violation"
    elif dpi_gap <= tol:
        status = "equality"
    else:
        status = "strict-dpi"
    return {
        "I_ZX": izx,
        "I_ZG": izg,
        "I_X": ix,
        "I_G": ig,
        "dpi_gap": dpi_gap,
        "grouping_gap": ix - ig,
        "status": status,
        "dpi_holds": dpi_gap >= -tol,
        "increase_claim_holds": izg >= izx - tol,
    }


def _latent_trial(seed: int, trial: int, min_vars: int, max_vars: int, max_card: int,
                  tol: float) -> dict:
    trial_rng = _trial_rng(seed, trial)
    kz = int(trial_rng.integers(1, 3))
    nx = int(trial_rng.integers(min_vars, max_vars + 1))
    cards = tuple(int(c) for c in trial_rng.integers(2, max_card + 1, size=kz + nx))
    model = LatentModel(joint=JointDistribution.random(cards, trial_rng), num_latent=kz)
    x_dist = JointDistribution(pmf=_renorm(model.joint.marginal(model.x_axes)))
    grouping = GroupingMap.random(x_dist, trial_rng)
    report = latent_grouping_report(model, grouping, tol=tol)
    report["trial"] = trial
    return report


def _latent_chunk(args) -> list[dict]:
    seed, trials, kwargs = args
    return [_latent_trial(seed, t, **kwargs) for t in trials]


def _run_trials(chunk_fn, seed: int, trials: int, kwargs: dict, workers: int) -> list[dict]:
    indices = list(range(trials))
    if workers <= 1 or trials < 64:
        return chunk_fn((seed, indices, kwargs))
    import multiprocessing

    chunks = [(seed, indices[i::workers], kwargs) for i in range(workers)]
    with multiprocessing.Pool(workers) as pool:
        parts = pool.map(chunk_fn, chunks)
    merged = [r for part in parts for r in part]
    merged.sort(key=lambda r: r["trial"])
    return merged


def verify_latent_claims(trials: int, seed: int,
                         min_vars: int = 2, max_vars: int = 3,
                         max_card: int = 3, tol: float = 1e-9,
                         workers: int = 1) -> dict:
    """Random-trial audit of the latent-grouping claims.

    Reports how many trials give equality (sufficient statistic) versus a
    strict data-processing drop, and flags any impossible DPI violation.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    kwargs = dict(min_vars=min_vars, max_vars=max_vars, max_card=max_card, tol=tol)
    results = _run_trials(_latent_chunk, seed, trials, kwargs, workers)
    counts = {"equality": 0, "strict-dpi": 0, "dpi-violation": 0}
    violations = []
    worst_gap = 0.0
    for report in results:
        counts[report["status"]] += 1
        worst_gap = min(worst_gap, report["dpi_gap"])
        if report["status"] == "dpi-violation":
            violations.append({"trial": report["trial"],
                               "I_ZX": report["I_ZX"], "I_ZG": report["I_ZG"]})
    return {
        "trials": trials,
        "counts": counts,
        "violations": violations,
        "worst_dpi_gap": worst_gap,
        "passed": not violations,
    }
