"""Maximum-likelihood estimation by EM.

The E-step completes the latent frequency table: each observed cell's
frequency is split across latent configurations proportionally to their
posterior probability under the current coefficients.  The M-step
refits every node's conditional model on the completed table by Fisher
scoring with step halving; node blocks are independent given the
completed table, which is what makes the recursion tractable.

Data with identical covariate rows are grouped into strata and, within
a stratum, identical observed cells are merged with summed weights, so
all inner loops run over distinct cells times latent configurations.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError, NumericalError
from .links import (
    LAMBDA_BOUND,
    covariate_design,
    dprobs_dlogits,
    logits_to_probs,
    node_probs,
    probs_to_logits,
    structural_design,
    valid_logits,
)
from .model import ModelSpec, ParamVector, param_layout, validate
from .tables import LexTable


# ---------------------------------------------------------------------------
# Data handling
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Unit-level or grouped categorical observations.

    ``obs`` holds integer category codes, one column per observed node
    in causal order.  ``weights`` default to 1; repeated cells may be
    merged into a single row with summed weight (grouped form).
    """

    obs: np.ndarray
    columns: tuple[str, ...]
    covariates: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.int64)
        if self.obs.ndim != 2:
            raise DataError("observation matrix must be 2-dimensional")
        self.columns = tuple(self.columns)
        if len(self.columns) != self.obs.shape[1]:
            raise DataError("column names do not match the observation matrix")
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float)
            if self.covariates.shape[0] != self.obs.shape[0]:
                raise DataError("covariate rows do not match observation rows")
            if self.covariates.shape[1] == 0:
                self.covariates = None
        self.covariate_names = tuple(self.covariate_names)
        if self.weights is None:
            self.weights = np.ones(self.obs.shape[0])
        else:
            self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.obs.shape[0],):
            raise DataError("weights do not match observation rows")
        if np.any(self.weights < 0):
            raise DataError("weights must be nonnegative")

    @property
    def n_records(self) -> int:
        return self.obs.shape[0]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def from_csv(cls, path, model: ModelSpec) -> "Dataset":
        frame = pd.read_csv(path)
        return cls.from_frame(frame, model)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, model: ModelSpec) -> "Dataset":
        observed = [model.node(i).name for i in model.observed_indices]
        missing = [name for name in observed if name not in frame.columns]
        if missing:
            raise DataError(f"data is missing observed node columns: {missing}")
        missing_cov = [name for name in model.covariate_names if name not in frame.columns]
        if missing_cov:
            raise DataError(f"data is missing covariate columns: {missing_cov}")
        known = set(observed) | set(model.covariate_names) | {"weight"}
        extra = [c for c in frame.columns if c not in known]
        if extra:
            raise DataError(f"unrecognized data columns: {extra}")
        obs_part = frame[observed]
        float_obs = obs_part.to_numpy(dtype=float)
        if not np.all(np.isfinite(float_obs)) or np.any(float_obs != np.round(float_obs)):
            raise DataError("observed node columns must hold integer category codes")
        obs = float_obs.astype(np.int64)
        cov = (
            frame[list(model.covariate_names)].to_numpy(dtype=float)
            if model.covariate_names
            else None
        )
        weights = frame["weight"].to_numpy(dtype=float) if "weight" in frame.columns else None
        data = cls(
            obs=obs,
            columns=tuple(observed),
            covariates=cov,
            covariate_names=model.covariate_names,
            weights=weights,
        )
        data.validate_against(model)
        return data

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.obs, columns=list(self.columns))
        if self.covariates is not None:
            for k, name in enumerate(self.covariate_names):
                frame[name] = self.covariates[:, k]
        if not np.all(self.weights == 1.0):
            frame["weight"] = self.weights
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def validate_against(self, model: ModelSpec) -> None:
        observed = tuple(model.node(i).name for i in model.observed_indices)
        if self.columns != observed:
            raise DataError(
                f"data columns {self.columns} do not match observed nodes {observed}"
            )
        levels = [model.node(i).n_categories for i in model.observed_indices]
        for k, (name, lv) in enumerate(zip(observed, levels)):
            col = self.obs[:, k]
            if col.size and (col.min() < 0 or col.max() >= lv):
                raise DataError(
                    f"column {name!r} holds codes outside 0..{lv - 1}"
                )
        if model.covariate_names:
            if self.covariates is None:
                raise DataError("model declares covariates but the data has none")
            if not np.all(np.isfinite(self.covariates)):
                raise DataError("covariate values must be finite")

    def grouped(self) -> "Dataset":
        """Merge identical (covariate, observed-cell) rows, summing weights."""
        key = self.obs.astype(float)
        if self.covariates is not None:
            key = np.column_stack([self.covariates, key])
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        weights = np.bincount(inverse, weights=self.weights, minlength=uniq.shape[0])
        n_cov = self.covariates.shape[1] if self.covariates is not None else 0
        cov = uniq[:, :n_cov] if n_cov else None
        obs = uniq[:, n_cov:].astype(np.int64)
        return Dataset(obs, self.columns, cov, self.covariate_names, weights)

    def ungrouped(self) -> "Dataset":
        """Expand integer weights back into unit records."""
        if not np.all(self.weights == np.round(self.weights)):
            raise DataError("cannot ungroup records with non-integer weights")
        reps = self.weights.astype(np.int64)
        obs = np.repeat(self.obs, reps, axis=0)
        cov = np.repeat(self.covariates, reps, axis=0) if self.covariates is not None else None
        return Dataset(obs, self.columns, cov, self.covariate_names, None)


# ---------------------------------------------------------------------------
# Precomputed fitting workspace
# ---------------------------------------------------------------------------

@dataclass
class _Stratum:
    covariates: np.ndarray | None
    cells: np.ndarray      # (D, n_obs) distinct observed cells
    weights: np.ndarray    # (D,) summed observed frequencies


class _Workspace:
    """Index maps and design matrices shared by every EM iteration."""

    def __init__(self, model: ModelSpec, strata: list[_Stratum], row_map=None):
        report = validate(model)
        if not report.ok:
            raise DataError("model is invalid: " + "; ".join(report.violations))
        self.model = model
        self.layout = param_layout(model)
        self.strata = strata
        self.row_map = row_map
        self.obs_vars = model.observed_indices
        self.lat_vars = model.latent_indices
        self.lat_levels = tuple(model.node(i).n_categories for i in self.lat_vars)
        self.n_latent_configs = int(np.prod(self.lat_levels)) if self.lat_vars else 1
        if self.lat_vars:
            self.lat_grid = np.indices(self.lat_levels).reshape(len(self.lat_vars), -1).T
        else:
            self.lat_grid = np.zeros((1, 0), dtype=np.int64)
        obs_pos = {v: k for k, v in enumerate(self.obs_vars)}
        lat_pos = {v: k for k, v in enumerate(self.lat_vars)}

        self.struct_designs = {n.index: structural_design(model, n) for n in model.nodes}
        self.designs: list[dict[int, np.ndarray]] = []
        for stratum in strata:
            per_node = {}
            for node in model.nodes:
                struct = self.struct_designs[node.index]
                if node.covariates:
                    xs = np.array(
                        [stratum.covariates[model.covariate_names.index(nm)] for nm in node.covariates]
                    )
                    n_configs = struct.shape[0] // (node.n_categories - 1)
                    per_node[node.index] = np.concatenate(
                        [struct, covariate_design(node, xs, n_configs)], axis=1
                    )
                else:
                    per_node[node.index] = struct
            self.designs.append(per_node)

        H = self.n_latent_configs

        def value_grid(cells, var):
            D = cells.shape[0]
            if var in obs_pos:
                return np.broadcast_to(cells[:, obs_pos[var]][:, None], (D, H))
            return np.broadcast_to(self.lat_grid[:, lat_pos[var]][None, :], (D, H))

        # nodes whose family holds no latent variable: their completed
        # counts equal the observed counts, so one fit serves every
        # iteration and every restart
        latent = set(self.lat_vars)
        self.static_nodes = {
            n.index for n in model.nodes
            if n.index not in latent and not (set(n.parents) & latent)
        }
        self.static_cache: dict[int, tuple[np.ndarray, bool]] = {}

        # per stratum, per node: flat index of each completed cell into the
        # node's (parent-config, category) probability table
        self.family_index: list[dict[int, np.ndarray]] = []
        for stratum in strata:
            per_node = {}
            for node in model.nodes:
                idx = np.zeros((stratum.cells.shape[0], H), dtype=np.int64)
                for j in node.parents:
                    idx = idx * model.node(j).n_categories + value_grid(stratum.cells, j)
                idx = idx * node.n_categories + value_grid(stratum.cells, node.index)
                per_node[node.index] = np.ascontiguousarray(idx.reshape(-1), dtype=np.int32)
            self.family_index.append(per_node)

    @classmethod
    def from_dataset(cls, model: ModelSpec, data: Dataset) -> "_Workspace":
        data.validate_against(model)
        if data.covariates is not None:
            cov_uniq, cov_inv = np.unique(data.covariates, axis=0, return_inverse=True)
        else:
            cov_uniq, cov_inv = None, np.zeros(data.n_records, dtype=np.int64)
        strata: list[_Stratum] = []
        row_map = np.zeros((data.n_records, 2), dtype=np.int64)
        n_strata = 1 if cov_uniq is None else cov_uniq.shape[0]
        for s in range(n_strata):
            rows = np.flatnonzero(cov_inv == s)
            cells, cell_inv = np.unique(data.obs[rows], axis=0, return_inverse=True)
            weights = np.bincount(cell_inv, weights=data.weights[rows], minlength=cells.shape[0])
            strata.append(
                _Stratum(
                    covariates=None if cov_uniq is None else cov_uniq[s],
                    cells=cells,
                    weights=weights,
                )
            )
            row_map[rows, 0] = s
            row_map[rows, 1] = cell_inv
        return cls(model, strata, row_map)

    @classmethod
    def from_completed(cls, model: ModelSpec, completed: "CompletedTable") -> "_Workspace":
        strata = [
            _Stratum(cs.covariates, cs.cells, cs.observed_weights) for cs in completed.strata
        ]
        return cls(model, strata)

    def node_tables(self, beta_values: np.ndarray, stratum: int) -> dict[int, np.ndarray]:
        """Flattened conditional probability tables for one stratum."""
        out = {}
        for node in self.model.nodes:
            block = beta_values[self.layout.block(node.index)]
            design = self.designs[stratum][node.index]
            lam = (design @ block).reshape(-1, node.n_categories - 1)
            out[node.index] = logits_to_probs(node.link, lam).reshape(-1)
        return out

    def cell_latent_probs(self, beta_values: np.ndarray, stratum: int) -> np.ndarray:
        """Joint probability of (observed cell, latent configuration), shape (D, H)."""
        cells = self.strata[stratum].cells
        prob = np.ones(cells.shape[0] * self.n_latent_configs)
        tables = self.node_tables(beta_values, stratum)
        findex = self.family_index[stratum]
        for node in self.model.nodes:
            prob *= tables[node.index][findex[node.index]]
        return prob.reshape(cells.shape[0], self.n_latent_configs)


# ---------------------------------------------------------------------------
# Completed tables and fit results
# ---------------------------------------------------------------------------

@dataclass
class CompletedStratum:
    covariates: np.ndarray | None
    cells: np.ndarray
    observed_weights: np.ndarray
    freq: np.ndarray  # (D, H) reconstructed frequencies


@dataclass
class CompletedTable:
    """Posterior-completed frequencies over observed cells x latent configs."""

    model: ModelSpec
    lat_vars: tuple[int, ...]
    lat_levels: tuple[int, ...]
    strata: list[CompletedStratum]

    def to_table(self, stratum: int = 0) -> LexTable:
        """Materialize one stratum as a dense table over all nodes."""
        model = self.model
        levels = model.levels
        cs = self.strata[stratum]
        H = cs.freq.shape[1]
        if self.lat_vars:
            lat_grid = np.indices(self.lat_levels).reshape(len(self.lat_vars), -1).T
        else:
            lat_grid = np.zeros((1, 0), dtype=np.int64)
        obs_pos = {v: k for k, v in enumerate(model.observed_indices)}
        lat_pos = {v: k for k, v in enumerate(self.lat_vars)}
        D = cs.cells.shape[0]
        flat = np.zeros((D, H), dtype=np.int64)
        for node in model.nodes:
            if node.index in obs_pos:
                vals = np.broadcast_to(cs.cells[:, obs_pos[node.index]][:, None], (D, H))
            else:
                vals = np.broadcast_to(lat_grid[:, lat_pos[node.index]][None, :], (D, H))
            flat = flat * node.n_categories + vals
        values = np.zeros(int(np.prod(levels, dtype=np.int64)))
        np.add.at(values, flat.reshape(-1), cs.freq.reshape(-1))
        return LexTable(tuple(range(1, model.n_nodes + 1)), levels, values)


@dataclass
class RestartRecord:
    seed: int
    loglik: float
    converged: bool
    n_iter: int
    trace: list[float]


@dataclass
class FitResult:
    """Estimates plus the bookkeeping needed to audit a fit."""

    params: ParamVector
    std_errors: np.ndarray | None
    loglik: float
    trace: list[float]
    n_iter: int
    converged: bool
    restarts: list[RestartRecord]
    aic: float
    bic: float
    n_params: int
    total_weight: float
    diagnostics: list[str]
    seed: int
    options: dict

    def to_json_dict(self, model: ModelSpec) -> dict:
        labels = self.params.layout.labels
        se = self.std_errors
        estimates = []
        for k, slot in enumerate(self.params.layout.slots):
            estimates.append(
                {
                    "label": labels[k],
                    "index": k,
                    "node": model.node(slot.node).name,
                    "source": slot.source if isinstance(slot.source, str)
                    else (model.node(slot.source).name if slot.source else "intercept"),
                    "level": slot.level,
                    "estimate": float(self.params.values[k]),
                    "se": None if se is None else float(se[k]),
                }
            )
        return {
            "estimates": estimates,
            "beta": [float(v) for v in self.params.values],
            "loglik": self.loglik,
            "trace": [float(v) for v in self.trace],
            "n_iter": self.n_iter,
            "converged": self.converged,
            "aic": self.aic,
            "bic": self.bic,
            "n_params": self.n_params,
            "total_weight": self.total_weight,
            "restarts": [
                {
                    "seed": r.seed,
                    "loglik": r.loglik,
                    "converged": r.converged,
                    "n_iter": r.n_iter,
                }
                for r in self.restarts
            ],
            "diagnostics": self.diagnostics,
            "seed": self.seed,
            "options": self.options,
        }


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def _beta_values(model: ModelSpec, beta) -> np.ndarray:
    if isinstance(beta, ParamVector):
        values = beta.values
    else:
        values = np.asarray(beta, dtype=float)
    expected = param_layout(model).size
    if values.shape != (expected,):
        raise ValueError(f"expected {expected} coefficients, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("coefficients must be finite")
    return values


def _e_step_ws(ws: _Workspace, beta_values: np.ndarray):
    freqs = []
    total = 0.0
    for s, stratum in enumerate(ws.strata):
        joint = ws.cell_latent_probs(beta_values, s)
        pj = joint.sum(axis=1)
        bad = np.flatnonzero(~(pj > 0.0))
        if bad.size:
            cell = tuple(int(z) for z in stratum.cells[bad[0]])
            raise NumericalError(
                f"observed cell {cell} in stratum {s} has zero model probability"
            )
        freqs.append(stratum.weights[:, None] * joint / pj[:, None])
        total += float(stratum.weights @ np.log(pj))
    return freqs, total


def _loglik_ws(ws: _Workspace, beta_values: np.ndarray) -> float:
    total = 0.0
    for s, stratum in enumerate(ws.strata):
        pj = ws.cell_latent_probs(beta_values, s).sum(axis=1)
        bad = np.flatnonzero(~(pj > 0.0))
        if bad.size:
            cell = tuple(int(z) for z in stratum.cells[bad[0]])
            raise NumericalError(
                f"observed cell {cell} in stratum {s} has zero model probability"
            )
        total += float(stratum.weights @ np.log(pj))
    return total


def _wrap_completed(ws: _Workspace, freqs) -> CompletedTable:
    strata = [
        CompletedStratum(st.covariates, st.cells, st.weights, freq)
        for st, freq in zip(ws.strata, freqs)
    ]
    return CompletedTable(ws.model, ws.lat_vars, ws.lat_levels, strata)


def e_step(model: ModelSpec, beta, data: Dataset):
    """Complete the latent table and return it with the observed log-likelihood."""
    ws = _Workspace.from_dataset(model, data)
    values = _beta_values(model, beta)
    freqs, ll = _e_step_ws(ws, values)
    return _wrap_completed(ws, freqs), ll


def loglik(model: ModelSpec, beta, data: Dataset) -> float:
    """Observed-data log-likelihood with latent nodes marginalized out."""
    ws = _Workspace.from_dataset(model, data)
    return _loglik_ws(ws, _beta_values(model, beta))


# ---------------------------------------------------------------------------
# M-step: per-node Fisher scoring
# ---------------------------------------------------------------------------

def _node_loglik(counts: np.ndarray, p: np.ndarray) -> float:
    mask = counts > 0
    if not np.all(p[mask] > 0):
        return -np.inf
    return float(np.sum(counts[mask] * np.log(p[mask])))


LAMBDA_GUARD = 500.0  # representability guard inside the M-step line search


def _cold_start(link: str, design3: np.ndarray, counts: np.ndarray, node_name: str) -> np.ndarray:
    # Intercept-style start: match every row's logits to the pooled marginal.
    pbar = counts.sum(axis=0)
    pbar = np.clip(pbar / max(pbar.sum(), 1e-300), 1e-6, None)
    pbar /= pbar.sum()
    lam_target = probs_to_logits(link, pbar)
    flat = design3.reshape(-1, design3.shape[2])
    target = np.tile(lam_target, design3.shape[0])
    beta0, *_ = np.linalg.lstsq(flat, target, rcond=None)
    lam0 = design3 @ beta0
    if not valid_logits(link, lam0) or np.max(np.abs(lam0)) > LAMBDA_GUARD:
        raise NumericalError(
            f"cannot construct a valid starting point for node {node_name!r}; "
            "a custom design with a global link must span row-constant logits"
        )
    return beta0


def _fit_node(
    link: str,
    design3: np.ndarray,
    counts: np.ndarray,
    node_name: str,
    init: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 200,
    max_halvings: int = 20,
):
    """Maximize a weighted multinomial likelihood in one node's coefficients.

    ``design3`` has shape (rows, c-1, width); ``counts`` (rows, c).
    Returns (beta, loglik, separated_flag).  Steps are rejected when
    they leave the link's valid logit region or the representability
    guard; a fit stalled against that boundary keeps the current point
    (the completed-data likelihood never decreases) and is flagged.
    """
    keep = counts.sum(axis=1) > 0
    design3 = design3[keep]
    counts = counts[keep]
    if design3.shape[0] == 0:
        raise NumericalError(f"node {node_name!r} has no completed frequency mass")
    n_r = counts.sum(axis=1)
    pos = counts > 0
    counts_pos = counts[pos]

    def node_ll(p):
        pm = p[pos]
        if np.any(pm <= 0):
            return -np.inf
        return float(counts_pos @ np.log(pm))

    if init is not None:
        beta = np.asarray(init, dtype=float).copy()
        lam = design3 @ beta
        if not valid_logits(link, lam):
            beta = _cold_start(link, design3, counts, node_name)
            lam = design3 @ beta
    else:
        beta = _cold_start(link, design3, counts, node_name)
        lam = design3 @ beta
    p = logits_to_probs(link, lam, validate=False)
    ll = node_ll(p)

    for _ in range(max_iter):
        psafe = np.maximum(p, 1e-300)
        jac = dprobs_dlogits(link, lam)                       # (r, c, c-1)
        grad_lam = np.einsum("rck,rc->rk", jac, counts / psafe)
        grad = np.einsum("rkw,rk->w", design3, grad_lam)
        jd = np.einsum("rck,rkw->rcw", jac, design3)          # (r, c, w)
        fim = np.einsum("rcw,rc,rcv->wv", jd, n_r[:, None] / psafe, jd)
        try:
            delta = np.linalg.solve(fim, grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(fim, grad, rcond=None)[0]
        if 0.5 * abs(float(grad @ delta)) < tol:
            break  # predicted improvement below tolerance: converged
        step = 1.0
        accepted = False
        hit_boundary = False
        for _half in range(max_halvings + 1):
            cand = beta + step * delta
            lam_c = design3 @ cand
            if valid_logits(link, lam_c) and np.max(np.abs(lam_c)) <= LAMBDA_GUARD:
                p_c = logits_to_probs(link, lam_c, validate=False)
                ll_c = node_ll(p_c)
                if ll_c > ll:
                    beta, lam, p = cand, lam_c, p_c
                    improvement = ll_c - ll
                    ll = ll_c
                    accepted = True
                    break
            else:
                hit_boundary = True
            step *= 0.5
        if not accepted:
            if hit_boundary:
                break  # pinned against the boundary: keep the current point
            # At an interior maximum the scoring direction cannot improve;
            # only a large remaining gradient indicates real divergence.
            scale = max(1.0, float(np.abs(counts).sum()))
            if np.max(np.abs(grad)) > 1e-4 * scale:
                raise NumericalError(
                    f"M-step scoring failed to improve the likelihood for node {node_name!r}"
                )
            break
        if improvement < tol:
            break
    separated = bool(np.max(np.abs(lam)) > LAMBDA_BOUND)
    return beta, ll, separated


def _m_step_ws(ws: _Workspace, freqs, init: np.ndarray | None = None):
    model = ws.model
    layout = ws.layout
    out = np.zeros(layout.size)
    diagnostics: list[str] = []
    for node in model.nodes:
        if node.index in ws.static_cache:
            # latent-free family: completed counts equal observed counts,
            # so the node's fit never changes across iterations or restarts
            block, separated = ws.static_cache[node.index]
            out[layout.block(node.index)] = block
            if separated:
                diagnostics.append(
                    f"node {node.name!r}: fitted logits exceed |lambda| = {LAMBDA_BOUND:g} "
                    f"(possible separation)"
                )
            continue
        c = node.n_categories
        blocks_design = []
        blocks_counts = []
        for s in range(len(ws.strata)):
            design = ws.designs[s][node.index]
            gc = design.shape[0] // (c - 1) * c
            fam = np.bincount(
                ws.family_index[s][node.index], weights=freqs[s].reshape(-1), minlength=gc
            ).reshape(-1, c)
            blocks_counts.append(fam)
            blocks_design.append(design.reshape(-1, c - 1, design.shape[1]))
        if len(blocks_counts) == 1:
            design3 = blocks_design[0]
            counts = blocks_counts[0]
        elif not node.covariates:
            # covariate-free nodes share one design across strata
            design3 = blocks_design[0]
            counts = np.sum(blocks_counts, axis=0)
        else:
            design3 = np.concatenate(blocks_design, axis=0)
            counts = np.concatenate(blocks_counts, axis=0)
        init_block = None if init is None else init[layout.block(node.index)]
        beta, _, separated = _fit_node(
            node.link, design3, counts, node.name, init=init_block
        )
        if separated:
            diagnostics.append(
                f"node {node.name!r}: fitted logits exceed |lambda| = {LAMBDA_BOUND:g} "
                f"(possible separation)"
            )
        out[layout.block(node.index)] = beta
        if node.index in ws.static_nodes:
            ws.static_cache[node.index] = (beta.copy(), separated)
    return out, diagnostics


def m_step(model: ModelSpec, completed: CompletedTable, init=None) -> ParamVector:
    """Refit every node on the completed table; returns the new coefficients."""
    ws = _Workspace.from_completed(model, completed)
    init_values = None if init is None else _beta_values(model, init)
    values, _ = _m_step_ws(ws, [cs.freq for cs in completed.strata], init=init_values)
    return ParamVector(ws.layout, values)


# ---------------------------------------------------------------------------
# Initialization, fitting
# ---------------------------------------------------------------------------

INIT_PERTURBATION = 0.05
INIT_CLAMP = 3.0


def _initialize_ws(ws: _Workspace, seed: int, perturbation: float = INIT_PERTURBATION,
                   clamp: float = INIT_CLAMP) -> np.ndarray:
    rng = np.random.default_rng(int(seed))
    freqs = []
    H = ws.n_latent_configs
    for stratum in ws.strata:
        u = rng.uniform(-1.0, 1.0, size=(stratum.cells.shape[0], H))
        post = np.clip(1.0 / H + perturbation * u, 1e-12, None)
        post /= post.sum(axis=1, keepdims=True)
        freqs.append(stratum.weights[:, None] * post)
    values, _ = _m_step_ws(ws, freqs, init=None)
    return np.clip(values, -clamp, clamp)


def initialize(model: ModelSpec, data: Dataset, seed: int) -> ParamVector:
    """Starting point: one E-step with uniform-plus-noise posteriors, one
    M-step, and a clamp on large coefficients."""
    ws = _Workspace.from_dataset(model, data)
    return ParamVector(ws.layout, _initialize_ws(ws, seed))


def _run_restart(ws: _Workspace, seed: int, max_iter: int, tol_loglik: float,
                 tol_param: float, perturbation: float):
    beta = _initialize_ws(ws, seed, perturbation=perturbation)
    trace: list[float] = []
    diagnostics: list[str] = []
    ll_prev = None
    converged = False
    n_iter = 0
    for _ in range(max_iter):
        freqs, ll = _e_step_ws(ws, beta)
        trace.append(ll)
        new_beta, diag = _m_step_ws(ws, freqs, init=beta)
        diagnostics = diag
        n_iter += 1
        delta_beta = float(np.max(np.abs(new_beta - beta)))
        delta_ll = np.inf if ll_prev is None else abs(ll - ll_prev)
        beta = new_beta
        ll_prev = ll
        if delta_ll < tol_loglik and delta_beta < tol_param:
            converged = True
            break
    final_ll = _loglik_ws(ws, beta)
    trace.append(final_ll)
    return {
        "beta": beta,
        "trace": trace,
        "loglik": final_ll,
        "converged": converged,
        "n_iter": n_iter,
        "diagnostics": diagnostics,
        "seed": int(seed),
    }


def fit(
    model: ModelSpec,
    data: Dataset,
    *,
    n_restarts: int = 10,
    max_iter: int = 5000,
    tol_loglik: float = 1e-8,
    tol_param: float = 1e-6,
    seed: int = 0,
    init_perturbation: float = INIT_PERTURBATION,
    threads: int = 1,
    canonicalize: bool = False,
) -> FitResult:
    """Best-of-``n_restarts`` EM fit.

    Each restart uses an independently seeded initialization; the
    restart with the highest final log-likelihood wins.  Standard
    errors are not computed here (see the inference module).
    """
    ws = _Workspace.from_dataset(model, data)
    seeds = [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n_restarts)]

    def runner(sd):
        return _run_restart(ws, sd, max_iter, tol_loglik, tol_param, init_perturbation)

    if threads > 1 and n_restarts > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(runner, seeds))
    else:
        runs = [runner(sd) for sd in seeds]

    best = max(range(len(runs)), key=lambda k: (runs[k]["loglik"], -k))
    chosen = runs[best]
    values = chosen["beta"]
    diagnostics = list(chosen["diagnostics"])
    if canonicalize:
        pv, notes = canonicalize_latent_labels(model, ParamVector(ws.layout, values))
        values = pv.values
        diagnostics.extend(notes)

    k = ws.layout.size
    n = sum(float(st.weights.sum()) for st in ws.strata)
    ll = chosen["loglik"]
    if canonicalize:
        ll = _loglik_ws(ws, values)
    restarts = [
        RestartRecord(r["seed"], r["loglik"], r["converged"], r["n_iter"], r["trace"])
        for r in runs
    ]
    return FitResult(
        params=ParamVector(ws.layout, values),
        std_errors=None,
        loglik=ll,
        trace=chosen["trace"],
        n_iter=chosen["n_iter"],
        converged=chosen["converged"],
        restarts=restarts,
        aic=-2.0 * ll + 2.0 * k,
        bic=-2.0 * ll + k * np.log(max(n, 1.0)),
        n_params=k,
        total_weight=n,
        diagnostics=diagnostics,
        seed=int(seed),
        options={
            "n_restarts": n_restarts,
            "max_iter": max_iter,
            "tol_loglik": tol_loglik,
            "tol_param": tol_param,
            "init_perturbation": init_perturbation,
            "threads": threads,
            "canonicalize": canonicalize,
        },
    )


# ---------------------------------------------------------------------------
# Latent label permutation
# ---------------------------------------------------------------------------

def permute_latent_categories(model: ModelSpec, beta, node_index: int, perm) -> ParamVector:
    """Relabel a latent node's categories, re-expressing the coefficients.

    ``perm[m]`` gives the old category that new category ``m`` refers
    to.  The relabeled model must stay inside the node's regression
    design; arbitrary permutations are representable for parentless
    latents, while latents with parents generally admit only the
    identity and the full reversal.  Raises ``NumericalError`` when the
    permuted distribution leaves the design span.
    """
    layout = param_layout(model)
    values = _beta_values(model, beta).copy()
    node = model.node(node_index)
    if not node.is_latent:
        raise ValueError(f"node {node.name!r} is not latent")
    perm = tuple(int(m) for m in perm)
    if sorted(perm) != list(range(node.n_categories)):
        raise ValueError(f"perm must be a permutation of 0..{node.n_categories - 1}")
    affected = [node_index] + [k for k in model.children(node_index)]
    for k in affected:
        spec = model.node(k)
        if spec.covariates:
            raise NumericalError(
                f"relabeling latent {node.name!r} is not supported when affected "
                f"node {spec.name!r} has covariates"
            )
        block = values[layout.block(k)]
        probs = node_probs(model, spec, block)  # (G, c)
        parent_levels = [model.node(j).n_categories for j in spec.parents]
        if k == node_index:
            new_probs = probs[:, perm]
        else:
            # permute the rows whose latent-parent coordinate is relabeled
            grids = np.indices(parent_levels).reshape(len(parent_levels), -1).T
            pos = spec.parents.index(node_index)
            remapped = grids.copy()
            remapped[:, pos] = np.asarray(perm)[grids[:, pos]]
            flat = np.zeros(grids.shape[0], dtype=np.int64)
            for col, lv in enumerate(parent_levels):
                flat = flat * lv + remapped[:, col]
            new_probs = probs[flat]
        lam_target = probs_to_logits(spec.link, new_probs)
        design = structural_design(model, spec)
        new_block, *_ = np.linalg.lstsq(design, lam_target.reshape(-1), rcond=None)
        residual = design @ new_block - lam_target.reshape(-1)
        if np.max(np.abs(residual)) > 1e-8:
            raise NumericalError(
                f"relabeling latent {node.name!r} with permutation {perm} is not "
                f"representable in the regression design of node {spec.name!r}"
            )
        values[layout.block(k)] = new_block
    return ParamVector(layout, values)


def canonicalize_latent_labels(model: ModelSpec, beta) -> tuple[ParamVector, list[str]]:
    """Reorder each latent node's categories by ascending effect on its
    first child, where the relabeling is representable."""
    layout = param_layout(model)
    pv = ParamVector(layout, _beta_values(model, beta).copy())
    notes: list[str] = []
    for node in model.nodes:
        if not node.is_latent:
            continue
        children = model.children(node.index)
        if not children:
            continue
        child = model.node(children[0])
        if child.design is not None:
            notes.append(
                f"latent {node.name!r}: first child has a custom design; labels left as fitted"
            )
            continue
        c = node.n_categories
        slopes = np.zeros(c)
        for level in range(1, c):
            idx = layout.index_of.get((child.index, node.index, level))
            if idx is None:
                break
            slopes[level] = pv.values[idx]
        effect = np.cumsum(slopes)
        order = tuple(int(m) for m in np.argsort(effect, kind="stable"))
        if order == tuple(range(c)):
            continue
        candidates = [order]
        reversal = tuple(range(c - 1, -1, -1))
        if order != reversal:
            candidates.append(reversal if effect[-1] < effect[0] else tuple(range(c)))
        applied = False
        for cand in candidates:
            if cand == tuple(range(c)):
                applied = True
                break
            try:
                pv = permute_latent_categories(model, pv, node.index, cand)
                notes.append(f"latent {node.name!r}: categories reordered by {cand}")
                applied = True
                break
            except NumericalError:
                continue
        if not applied:
            notes.append(
                f"latent {node.name!r}: desired relabeling {order} is not representable; "
                f"labels left as fitted"
            )
    return pv, notes


def align_to_reference(model: ModelSpec, beta, reference) -> ParamVector:
    """Relabel latent categories to best match a reference coefficient
    vector (used to compare fits up to label switching)."""
    from itertools import permutations, product

    layout = param_layout(model)
    pv = ParamVector(layout, _beta_values(model, beta).copy())
    ref = _beta_values(model, reference)
    latents = [n for n in model.nodes if n.is_latent]
    if not latents:
        return pv
    options = []
    for node in latents:
        options.append([tuple(p) for p in permutations(range(node.n_categories))])
    best = pv
    best_dist = float(np.sum((pv.values - ref) ** 2))
    for combo in product(*options):
        cand = pv
        try:
            for node, perm in zip(latents, combo):
                if perm != tuple(range(node.n_categories)):
                    cand = permute_latent_categories(model, cand, node.index, perm)
        except NumericalError:
            continue
        dist = float(np.sum((cand.values - ref) ** 2))
        if dist < best_dist:
            best, best_dist = cand, dist
    return best
