"""Standard errors and the numerical local-identifiability check.

Per-unit score vectors are obtained by central finite differences of
the observed-data log-likelihood; the expected information matrix is
estimated by the outer product of scores, and standard errors are the
square roots of the diagonal of its inverse.  Local identifiability is
probed by sampling coefficient vectors and checking that the Jacobian
of the observed cell probabilities has full column rank.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .causal import observed_table
from .em import Dataset, FitResult, _beta_values, _loglik_ws, _Workspace
from .errors import LinkError, NumericalError
from .links import valid_logits
from .model import ModelSpec, param_layout, validate

FD_STEP = 1e-5
SV_RATIO_TOL = 1e-7


def _fd_steps(values: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    return step * np.maximum(1.0, np.abs(values))


@dataclass
class ScoreMatrix:
    """Per-unit score vectors with the record weights alongside.

    Row ``u`` is the gradient of record ``u``'s observed-data
    log-likelihood for a single unit; grouped records keep their weight
    in ``weights`` so that information sums count every unit once.
    """

    scores: np.ndarray   # (n_records, n_params)
    weights: np.ndarray  # (n_records,)

    @property
    def total_score(self) -> np.ndarray:
        return self.weights @ self.scores


def _cell_logprobs(ws: _Workspace, beta_values: np.ndarray) -> list[np.ndarray]:
    out = []
    for s in range(len(ws.strata)):
        pj = ws.cell_latent_probs(beta_values, s).sum(axis=1)
        if np.any(~(pj > 0.0)):
            raise NumericalError("zero model probability at a finite-difference point")
        out.append(np.log(pj))
    return out


def unit_scores(model: ModelSpec, beta, data: Dataset, step: float = FD_STEP) -> ScoreMatrix:
    """Central finite-difference score of every record's log-likelihood."""
    ws = _Workspace.from_dataset(model, data)
    values = _beta_values(model, beta)
    steps = _fd_steps(values, step)
    n_params = values.size
    per_cell = [np.zeros((st.cells.shape[0], n_params)) for st in ws.strata]
    for k in range(n_params):
        bump = np.zeros_like(values)
        bump[k] = steps[k]
        up = _cell_logprobs(ws, values + bump)
        dn = _cell_logprobs(ws, values - bump)
        for s in range(len(ws.strata)):
            per_cell[s][:, k] = (up[s] - dn[s]) / (2.0 * steps[k])
    rows = np.zeros((data.n_records, n_params))
    for u in range(data.n_records):
        s, cell = ws.row_map[u]
        rows[u] = per_cell[s][cell]
    return ScoreMatrix(rows, data.weights.copy())


def expected_information(scores: ScoreMatrix) -> np.ndarray:
    """Outer-product estimate of the (total) expected information matrix."""
    f = np.einsum("up,u,uq->pq", scores.scores, scores.weights, scores.scores)
    return (f + f.T) / 2.0


def model_based_information(model: ModelSpec, beta, data: Dataset,
                            step: float = FD_STEP) -> np.ndarray:
    """Expectation of the score outer product over the fitted observed
    distribution (grouped, categorical-only alternative to the plug-in)."""
    values = _beta_values(model, beta)
    steps = _fd_steps(values, step)
    ws = _Workspace.from_dataset(model, data)
    n_params = values.size
    f = np.zeros((n_params, n_params))
    for s, stratum in enumerate(ws.strata):
        cov = None
        if stratum.covariates is not None:
            cov = dict(zip(model.covariate_names, stratum.covariates))
        table = observed_table(model, values, cov)
        grads = np.zeros((table.size, n_params))
        for k in range(n_params):
            bump = np.zeros_like(values)
            bump[k] = steps[k]
            up = np.log(observed_table(model, values + bump, cov).values)
            dn = np.log(observed_table(model, values - bump, cov).values)
            grads[:, k] = (up - dn) / (2.0 * steps[k])
        total = float(stratum.weights.sum())
        f += total * np.einsum("jp,j,jq->pq", grads, table.values, grads)
    return (f + f.T) / 2.0


def standard_errors(information: np.ndarray) -> np.ndarray:
    """Square roots of the diagonal of the inverse information matrix."""
    information = np.asarray(information, dtype=float)
    sv = np.linalg.svd(information, compute_uv=False)
    if sv[0] <= 0 or sv[-1] <= 0 or sv[0] / sv[-1] > 1e12:
        raise NumericalError(
            "information matrix singular - model may be unidentified"
        )
    inv = np.linalg.inv(information)
    diag = np.diag(inv)
    if np.any(diag <= 0):
        raise NumericalError(
            "information matrix singular - model may be unidentified"
        )
    return np.sqrt(diag)


def attach_standard_errors(result: FitResult, model: ModelSpec, data: Dataset,
                           method: str = "opg") -> FitResult:
    """Fill ``result.std_errors`` in place and return the result."""
    if method == "opg":
        info = expected_information(unit_scores(model, result.params, data))
    elif method == "expected":
        info = model_based_information(model, result.params, data)
    else:
        raise ValueError(f"unknown standard-error method {method!r}")
    result.std_errors = standard_errors(info)
    return result


@dataclass
class IdentifiabilityPoint:
    sigma_min: float
    sigma_max: float
    rank: int
    passed: bool


@dataclass
class IdentifiabilityReport:
    """Per-point singular-value summaries plus the overall verdict."""

    identified: bool
    n_params: int
    observed_df: int
    points: list[IdentifiabilityPoint]
    seed: int
    sv_ratio_tol: float = SV_RATIO_TOL

    @property
    def verdict(self) -> str:
        return "identified" if self.identified else "not identified"

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "n_params": self.n_params,
            "observed_df": self.observed_df,
            "n_points": len(self.points),
            "seed": self.seed,
            "sv_ratio_tol": self.sv_ratio_tol,
            "points": [
                {
                    "sigma_min": p.sigma_min,
                    "sigma_max": p.sigma_max,
                    "rank": p.rank,
                    "passed": p.passed,
                }
                for p in self.points
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def _sample_valid_beta(model: ModelSpec, rng: np.random.Generator, size: int,
                       low: float = -2.0, high: float = 2.0, max_tries: int = 10000) -> np.ndarray:
    from .links import structural_design  # local import to avoid cycle at module load

    layout = param_layout(model)
    designs = {n.index: structural_design(model, n) for n in model.nodes}
    for _ in range(max_tries):
        values = rng.uniform(low, high, size=size)
        ok = True
        for node in model.nodes:
            if node.link != "global" or node.n_categories == 2:
                continue
            block = values[layout.block(node.index)]
            struct_width = designs[node.index].shape[1]
            lam = (designs[node.index] @ block[:struct_width]).reshape(-1, node.n_categories - 1)
            if not valid_logits("global", lam):
                ok = False
                break
        if ok:
            return values
    raise NumericalError("could not sample a valid coefficient vector")


def identifiability_check(model: ModelSpec, n_points: int = 20, seed: int = 0,
                          covariate_profiles=None) -> IdentifiabilityReport:
    """Sample coefficient vectors and test the rank of the map from
    coefficients to observed cell probabilities.

    A point passes when the numerical rank equals the parameter count
    at relative tolerance ``sigma_min / sigma_max > 1e-7``; the model
    additionally needs no more parameters than observed degrees of
    freedom.  Models with covariates are probed at several sampled
    covariate profiles jointly.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    report = validate(model)
    if not report.ok:
        raise ValueError("model is invalid: " + "; ".join(report.violations))
    rng = np.random.default_rng(int(seed))
    n_params = report.n_params
    n_profiles = 1
    profiles = [None]
    if model.covariate_names:
        if covariate_profiles is None:
            n_profiles = 3
            covariate_profiles = rng.standard_normal((n_profiles, len(model.covariate_names)))
        covariate_profiles = np.atleast_2d(np.asarray(covariate_profiles, dtype=float))
        n_profiles = covariate_profiles.shape[0]
        profiles = [dict(zip(model.covariate_names, row)) for row in covariate_profiles]
    observed_df = n_profiles * report.observed_cells - n_profiles

    points = []
    all_passed = True
    attempts = 0
    while len(points) < n_points:
        attempts += 1
        if attempts > 50 * n_points:
            raise NumericalError("could not evaluate enough identifiability points")
        values = _sample_valid_beta(model, rng, n_params)
        steps = _fd_steps(values)
        jac = np.zeros((n_profiles * report.observed_cells, n_params))
        try:
            for k in range(n_params):
                bump = np.zeros_like(values)
                bump[k] = steps[k]
                up = np.concatenate(
                    [observed_table(model, values + bump, prof).values for prof in profiles]
                )
                dn = np.concatenate(
                    [observed_table(model, values - bump, prof).values for prof in profiles]
                )
                jac[:, k] = (up - dn) / (2.0 * steps[k])
        except LinkError:
            # a finite-difference bump left the valid logit region; resample
            continue
        sv = np.linalg.svd(jac, compute_uv=False)
        sigma_max = float(sv[0])
        sigma_min = float(sv[n_params - 1]) if sv.size >= n_params else 0.0
        rank = int(np.sum(sv > SV_RATIO_TOL * sigma_max)) if sigma_max > 0 else 0
        passed = (
            rank == n_params
            and sigma_max > 0
            and sigma_min / sigma_max > SV_RATIO_TOL
            and n_params <= observed_df
        )
        all_passed &= passed
        points.append(IdentifiabilityPoint(sigma_min, sigma_max, rank, passed))
    return IdentifiabilityReport(
        identified=all_passed and n_params <= observed_df,
        n_params=n_params,
        observed_df=observed_df,
        points=points,
        seed=int(seed),
    )
