"""Joint reconstruction, interventions, effect ratios, and sampling.

The fitted joint distribution factorizes into per-node conditional
tables.  Interventions use the truncated factorization: drop the
factors of intervened nodes and evaluate the remaining factors at the
fixed categories.  Effects on ordered outcomes are reported as ratios
of survival probabilities ``P(Y >= k | do(x1)) / P(Y >= k | do(x0))``,
and natural direct effects average the mediator set over its
distribution under the reference intervention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .em import Dataset, _beta_values
from .errors import DataError, NumericalError
from .links import node_probs
from .model import ModelSpec, NodeSpec, param_layout
from .tables import LexTable, marginalize


def _covariate_values(model: ModelSpec, node: NodeSpec, covariates) -> np.ndarray | None:
    if not node.covariates:
        return None
    if covariates is None:
        raise ValueError(
            f"node {node.name!r} depends on covariates; pass their values"
        )
    return np.array([float(covariates[name]) for name in node.covariates])


def node_cpt(model: ModelSpec, beta, node: int, covariates=None) -> LexTable:
    """Conditional table of one node over (parents..., node)."""
    values = _beta_values(model, beta)
    spec = model.node(node)
    block = values[param_layout(model).block(node)]
    probs = node_probs(model, spec, block, _covariate_values(model, spec, covariates))
    vars_ = tuple(spec.parents) + (spec.index,)
    levels = tuple(model.node(j).n_categories for j in spec.parents) + (spec.n_categories,)
    return LexTable(vars_, levels, probs.reshape(-1))


def _factor_tensor(model: ModelSpec, spec: NodeSpec, probs: np.ndarray) -> np.ndarray:
    """Reshape a (G, c) conditional table for broadcasting over the full joint."""
    shape = [1] * model.n_nodes
    for j in spec.parents:
        shape[j - 1] = model.node(j).n_categories
    shape[spec.index - 1] = spec.n_categories
    return probs.reshape(shape)


def _product_distribution(model: ModelSpec, beta_values: np.ndarray, covariates,
                          skip: dict | None = None) -> np.ndarray:
    """Product of conditional factors over the full node grid.

    ``skip`` maps intervened node indices to fixed categories; their
    factors are dropped and their axes sliced at the fixed value.
    """
    layout = param_layout(model)
    joint = np.ones(model.levels)
    for spec in model.nodes:
        if skip and spec.index in skip:
            continue
        block = beta_values[layout.block(spec.index)]
        probs = node_probs(model, spec, block, _covariate_values(model, spec, covariates))
        joint = joint * _factor_tensor(model, spec, probs)
    if skip:
        selector = tuple(
            skip[i] if i in skip else slice(None) for i in range(1, model.n_nodes + 1)
        )
        joint = joint[selector]
    return joint


def joint_distribution(model: ModelSpec, beta, covariates=None) -> LexTable:
    """Joint distribution over all nodes (observed and latent)."""
    values = _beta_values(model, beta)
    joint = _product_distribution(model, values, covariates)
    return LexTable(
        tuple(range(1, model.n_nodes + 1)), model.levels, joint.reshape(-1)
    )


def observed_table(model: ModelSpec, beta, covariates=None) -> LexTable:
    """Observed-node distribution with latent nodes marginalized out."""
    return marginalize(joint_distribution(model, beta, covariates), model.observed_indices)


@dataclass(frozen=True)
class Intervention:
    """Fixed categories for a set of intervened nodes (1-based indices)."""

    assignments: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(
            self,
            "assignments",
            tuple(sorted((int(n), int(z)) for n, z in dict(self.assignments).items())),
        )

    @classmethod
    def of(cls, mapping: dict) -> "Intervention":
        return cls(tuple(mapping.items()))

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(n for n, _ in self.assignments)

    def as_dict(self) -> dict[int, int]:
        return dict(self.assignments)

    def check(self, model: ModelSpec) -> None:
        for n, z in self.assignments:
            if not 1 <= n <= model.n_nodes:
                raise ValueError(f"intervened node index {n} out of range")
            if not 0 <= z < model.node(n).n_categories:
                raise ValueError(
                    f"category {z} out of range for node {model.node(n).name!r}"
                )


def intervene(model: ModelSpec, beta, iv: Intervention, covariates=None) -> LexTable:
    """Truncated-factorization distribution over the non-intervened nodes."""
    iv.check(model)
    values = _beta_values(model, beta)
    fixed = iv.as_dict()
    joint = _product_distribution(model, values, covariates, skip=fixed)
    remaining = tuple(i for i in range(1, model.n_nodes + 1) if i not in fixed)
    levels = tuple(model.node(i).n_categories for i in remaining)
    return LexTable(remaining, levels, joint.reshape(-1))


def _survival(dist: LexTable, outcome: int, thresholds) -> np.ndarray:
    marg = marginalize(dist, (outcome,))
    tail = np.cumsum(marg.values[::-1])[::-1]  # tail[k] = P(Y >= k)
    return np.array([float(tail[k]) for k in thresholds])


@dataclass(frozen=True)
class EffectQuery:
    """Outcome, treatment contrast, optional mediator set, and thresholds."""

    outcome: int
    x1: Intervention
    x0: Intervention
    mediators: tuple[int, ...] = ()
    thresholds: tuple[int, ...] = ()
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mediators", tuple(int(m) for m in self.mediators))
        object.__setattr__(self, "thresholds", tuple(int(k) for k in self.thresholds))

    def check(self, model: ModelSpec) -> None:
        self.x1.check(model)
        self.x0.check(model)
        if self.x1.nodes != self.x0.nodes:
            raise ValueError("x1 and x0 must assign the same treatment nodes")
        treat = set(self.x1.nodes)
        if not treat:
            raise ValueError("treatment set is empty")
        if self.outcome in treat:
            raise ValueError("outcome cannot be part of the treatment set")
        med = set(self.mediators)
        if med & treat or self.outcome in med:
            raise ValueError("treatment, outcome and mediator sets must be disjoint")
        c = model.node(self.outcome).n_categories
        for k in self.thresholds:
            if not 1 <= k <= c - 1:
                raise ValueError(f"threshold {k} out of range 1..{c - 1}")

    def effective_thresholds(self, model: ModelSpec) -> tuple[int, ...]:
        if self.thresholds:
            return self.thresholds
        return tuple(range(1, model.node(self.outcome).n_categories))


@dataclass
class EffectEstimate:
    label: str
    outcome: str
    thresholds: tuple[int, ...]
    survival_x1: np.ndarray
    survival_x0: np.ndarray
    ratios: np.ndarray
    mediators: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "outcome": self.outcome,
            "mediators": list(self.mediators),
            "thresholds": list(self.thresholds),
            "survival_x1": [float(v) for v in self.survival_x1],
            "survival_x0": [float(v) for v in self.survival_x0],
            "ratios": [float(v) for v in self.ratios],
        }


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    if np.any(den < 1e-300):
        raise NumericalError("reference survival probability is zero")
    return num / den


def causal_effect(model: ModelSpec, beta, query: EffectQuery, covariates=None) -> EffectEstimate:
    """Total effect: survival-probability ratios between two interventions."""
    query.check(model)
    if query.mediators:
        raise ValueError("causal_effect expects an empty mediator set; use natural_direct_effect")
    thresholds = query.effective_thresholds(model)
    s1 = _survival(intervene(model, beta, query.x1, covariates), query.outcome, thresholds)
    s0 = _survival(intervene(model, beta, query.x0, covariates), query.outcome, thresholds)
    return EffectEstimate(
        label=query.label or _default_label(model, query),
        outcome=model.node(query.outcome).name,
        thresholds=thresholds,
        survival_x1=s1,
        survival_x0=s0,
        ratios=_ratio(s1, s0),
    )


def natural_direct_effect(model: ModelSpec, beta, query: EffectQuery, covariates=None) -> EffectEstimate:
    """Direct effect with mediators held at their distribution under the
    reference intervention (mediator weights are interventional)."""
    query.check(model)
    if not query.mediators:
        raise ValueError("natural_direct_effect requires a non-empty mediator set")
    thresholds = query.effective_thresholds(model)
    ref = intervene(model, beta, query.x0, covariates)
    weights_table = marginalize(ref, query.mediators)
    med_vars = weights_table.vars
    med_levels = weights_table.levels
    grid = np.indices(med_levels).reshape(len(med_levels), -1).T
    num = np.zeros(len(thresholds))
    den = np.zeros(len(thresholds))
    for row, weight in zip(grid, weights_table.values):
        m_fix = {int(v): int(z) for v, z in zip(med_vars, row)}
        iv1 = Intervention.of({**query.x1.as_dict(), **m_fix})
        iv0 = Intervention.of({**query.x0.as_dict(), **m_fix})
        num += weight * _survival(intervene(model, beta, iv1, covariates), query.outcome, thresholds)
        den += weight * _survival(intervene(model, beta, iv0, covariates), query.outcome, thresholds)
    return EffectEstimate(
        label=query.label or _default_label(model, query),
        outcome=model.node(query.outcome).name,
        thresholds=thresholds,
        survival_x1=num,
        survival_x0=den,
        ratios=_ratio(num, den),
        mediators=tuple(model.node(m).name for m in query.mediators),
    )


def evaluate_effect(model: ModelSpec, beta, query: EffectQuery, covariates=None) -> EffectEstimate:
    if query.mediators:
        return natural_direct_effect(model, beta, query, covariates)
    return causal_effect(model, beta, query, covariates)


def _default_label(model: ModelSpec, query: EffectQuery) -> str:
    x1 = query.x1.as_dict()
    x0 = query.x0.as_dict()
    parts = [f"{model.node(n).name} {x0[n]}->{x1[n]}" for n in query.x1.nodes]
    return ", ".join(parts)


def parse_effect_queries(doc: dict | list, model: ModelSpec) -> list[EffectQuery]:
    """Build effect queries from their JSON form (node names, not indices)."""
    if isinstance(doc, dict) and "queries" in doc:
        raw_queries = doc["queries"]
    elif isinstance(doc, list):
        raw_queries = doc
    else:
        raw_queries = [doc]
    name_to_index = {n.name: n.index for n in model.nodes}

    def resolve(name):
        if name not in name_to_index:
            raise DataError(f"unknown node name {name!r} in effect query")
        return name_to_index[name]

    queries = []
    for raw in raw_queries:
        if not isinstance(raw, dict) or "outcome" not in raw or "treatment" not in raw:
            raise DataError("effect query must carry 'outcome' and 'treatment'")
        treatment = raw["treatment"]
        if not isinstance(treatment, dict) or "x1" not in treatment or "x0" not in treatment:
            raise DataError("'treatment' must hold 'x1' and 'x0' node:level maps")
        x1 = Intervention.of({resolve(n): int(z) for n, z in treatment["x1"].items()})
        x0 = Intervention.of({resolve(n): int(z) for n, z in treatment["x0"].items()})
        query = EffectQuery(
            outcome=resolve(raw["outcome"]),
            x1=x1,
            x0=x0,
            mediators=tuple(resolve(n) for n in raw.get("mediators", [])),
            thresholds=tuple(int(k) for k in raw.get("thresholds", [])),
            label=str(raw.get("label", "")),
        )
        query.check(model)
        queries.append(query)
    return queries


def format_effect_table(estimates: list[EffectEstimate]) -> str:
    """Aligned text table: one row per transition, one column per threshold."""
    if not estimates:
        return ""
    thresholds = estimates[0].thresholds
    outcome = estimates[0].outcome
    header = ["effect"] + [f"{outcome}>={k}" for k in thresholds]
    rows = [header]
    for est in estimates:
        cells = [est.label]
        if est.thresholds != thresholds:
            cells = [est.label] + [""] * len(thresholds)
            rows.append(cells)
            continue
        cells += [f"{v:.4f}" for v in est.ratios]
        rows.append(cells)
    widths = [max(len(r[k]) for r in rows) for k in range(len(header))]
    lines = []
    for r in rows:
        lines.append(
            "  ".join(
                r[0].ljust(widths[0]) if k == 0 else r[k].rjust(widths[k])
                for k in range(len(header))
            )
        )
    return "\n".join(lines)


def sample_data(model: ModelSpec, beta, n: int, seed: int, covariates=None,
                return_latent: bool = False):
    """Ancestral sampling in causal order; latent columns are dropped from
    the returned dataset (set ``return_latent`` to also get them)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    values = _beta_values(model, beta)
    layout = param_layout(model)
    rng = np.random.default_rng(int(seed))

    cov_matrix = None
    if model.covariate_names:
        if covariates is None:
            raise ValueError("model declares covariates; pass values to sample with")
        if isinstance(covariates, dict):
            row = np.array([float(covariates[name]) for name in model.covariate_names])
            cov_matrix = np.tile(row, (n, 1))
        else:
            cov_matrix = np.asarray(covariates, dtype=float)
            if cov_matrix.shape != (n, len(model.covariate_names)):
                raise ValueError("per-unit covariates must have shape (n, n_covariates)")

    draws = np.zeros((n, model.n_nodes), dtype=np.int64)
    for spec in model.nodes:
        block = values[layout.block(spec.index)]
        if spec.covariates and cov_matrix is not None and not isinstance(covariates, dict):
            # per-unit covariates: evaluate each unit's conditional row
            probs_rows = np.zeros((n, spec.n_categories))
            parent_levels = [model.node(j).n_categories for j in spec.parents]
            cfg = np.zeros(n, dtype=np.int64)
            for j, lv in zip(spec.parents, parent_levels):
                cfg = cfg * lv + draws[:, j - 1]
            cov_cols = [model.covariate_names.index(nm) for nm in spec.covariates]
            for u in range(n):
                table = node_probs(model, spec, block, cov_matrix[u, cov_cols])
                probs_rows[u] = table[cfg[u]]
        else:
            xs = None
            if spec.covariates:
                xs = np.array([float(covariates[name]) for name in spec.covariates])
            table = node_probs(model, spec, block, xs)  # (G, c)
            parent_levels = [model.node(j).n_categories for j in spec.parents]
            cfg = np.zeros(n, dtype=np.int64)
            for j, lv in zip(spec.parents, parent_levels):
                cfg = cfg * lv + draws[:, j - 1]
            probs_rows = table[cfg]
        cum = np.cumsum(probs_rows, axis=1)
        u = rng.random(n)
        draws[:, spec.index - 1] = np.sum(u[:, None] > cum[:, :-1], axis=1)

    obs_cols = [i - 1 for i in model.observed_indices]
    data = Dataset(
        obs=draws[:, obs_cols],
        columns=tuple(model.node(i).name for i in model.observed_indices),
        covariates=cov_matrix,
        covariate_names=model.covariate_names,
    )
    if return_latent:
        lat_cols = [i - 1 for i in model.latent_indices]
        return data, draws[:, lat_cols]
    return data
