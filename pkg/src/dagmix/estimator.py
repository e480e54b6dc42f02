"""Scikit-learn style estimator wrapping the EM fitter.

``DagMixture`` follows the usual conventions: constructor arguments are
stored verbatim, ``fit`` does the work and returns ``self``, fitted
attributes carry a trailing underscore, and ``get_params`` /
``set_params`` come from ``BaseEstimator`` so the model composes with
pipelines and search utilities.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_random_state

from . import causal, em, inference
from .errors import DataError
from .model import ModelSpec, ParamVector, param_layout, parse_model, validate


def _as_model(model) -> ModelSpec:
    if isinstance(model, ModelSpec):
        report = validate(model)
        if not report.ok:
            raise ValueError("model is invalid: " + "; ".join(report.violations))
        return model
    if isinstance(model, (dict, str)):
        return parse_model(model)
    raise TypeError("model must be a ModelSpec, a JSON document string, or a dict")


class DagMixture(BaseEstimator):
    """Maximum-likelihood DAG model over categorical variables with latent nodes.

    Parameters
    ----------
    model : ModelSpec, dict or str
        Model document (parsed or JSON text).
    n_restarts, max_iter, tol_loglik, tol_param : EM controls.
    init_perturbation : float
        Size of the random perturbation of the uniform starting posteriors.
    compute_se : bool
        Fill ``se_`` from the outer-product information matrix after fitting.
    canonicalize : bool
        Reorder latent categories by ascending first-child effect.
    random_state : int, RandomState or None
        Seeds the restart sequence.
    threads : int
        Worker threads for restarts.

    Attributes (after ``fit``)
    --------------------------
    params_ : ndarray of fitted coefficients (see ``param_labels_``).
    se_ : ndarray of standard errors, or None when ``compute_se=False``.
    loglik_, aic_, bic_, n_iter_, converged_ : fit summary.
    result_ : the full :class:`dagmix.em.FitResult`.
    """

    def __init__(self, model, *, n_restarts=10, max_iter=5000, tol_loglik=1e-8,
                 tol_param=1e-6, init_perturbation=0.05, compute_se=True,
                 canonicalize=False, random_state=None, threads=1):
        self.model = model
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.tol_loglik = tol_loglik
        self.tol_param = tol_param
        self.init_perturbation = init_perturbation
        self.compute_se = compute_se
        self.canonicalize = canonicalize
        self.random_state = random_state
        self.threads = threads

    # ------------------------------------------------------------------
    def _dataset(self, X, sample_weight=None) -> em.Dataset:
        model = self.model_
        if isinstance(X, em.Dataset):
            return X
        if isinstance(X, pd.DataFrame):
            data = em.Dataset.from_frame(X, model)
            if sample_weight is not None:
                raise ValueError("pass weights through a 'weight' column with DataFrame input")
            return data
        X = np.asarray(X)
        if X.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        n_obs = len(model.observed_indices)
        n_cov = len(model.covariate_names)
        if X.shape[1] == n_obs + n_cov:
            obs = X[:, :n_obs]
            cov = X[:, n_obs:] if n_cov else None
        else:
            raise ValueError(
                f"X must have {n_obs + n_cov} columns "
                f"({n_obs} observed nodes then {n_cov} covariates), got {X.shape[1]}"
            )
        if np.any(np.asarray(obs, dtype=float) != np.round(np.asarray(obs, dtype=float))):
            raise ValueError("observed node columns must hold integer category codes")
        data = em.Dataset(
            obs=np.asarray(obs, dtype=np.int64),
            columns=tuple(model.node(i).name for i in model.observed_indices),
            covariates=cov,
            covariate_names=model.covariate_names,
            weights=sample_weight,
        )
        data.validate_against(model)
        return data

    def fit(self, X, y=None, sample_weight=None):
        """Fit by multi-restart EM.  ``y`` is ignored (density model)."""
        self.model_ = _as_model(self.model)
        data = self._dataset(X, sample_weight)
        seed = check_random_state(self.random_state).randint(0, 2**31 - 1)
        result = em.fit(
            self.model_,
            data,
            n_restarts=self.n_restarts,
            max_iter=self.max_iter,
            tol_loglik=self.tol_loglik,
            tol_param=self.tol_param,
            seed=seed,
            init_perturbation=self.init_perturbation,
            threads=self.threads,
            canonicalize=self.canonicalize,
        )
        if self.compute_se:
            inference.attach_standard_errors(result, self.model_, data)
        self.result_ = result
        self.layout_ = result.params.layout
        self.params_ = result.params.values.copy()
        self.param_labels_ = list(self.layout_.labels)
        self.se_ = None if result.std_errors is None else result.std_errors.copy()
        self.loglik_ = result.loglik
        self.aic_ = result.aic
        self.bic_ = result.bic
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        return self

    # ------------------------------------------------------------------
    def _params(self) -> ParamVector:
        check_is_fitted(self, "params_")
        return ParamVector(self.layout_, self.params_)

    def score_samples(self, X) -> np.ndarray:
        """Per-record observed-data log-likelihood."""
        check_is_fitted(self, "params_")
        data = self._dataset(X)
        ws = em._Workspace.from_dataset(self.model_, data)
        out = np.zeros(data.n_records)
        logs = []
        for s in range(len(ws.strata)):
            pj = ws.cell_latent_probs(self.params_, s).sum(axis=1)
            logs.append(np.log(pj))
        for u in range(data.n_records):
            s, cell = ws.row_map[u]
            out[u] = logs[s][cell]
        return out

    def score(self, X, y=None) -> float:
        """Mean per-unit log-likelihood (weights respected)."""
        data = self._dataset(X)
        return float(
            self.score_samples(X) @ data.weights / max(data.total_weight, 1.0)
        )

    def predict_proba(self, X) -> np.ndarray:
        """Posterior distribution over latent configurations per record.

        Columns follow :meth:`latent_configurations`; models without
        latent nodes get a single all-ones column.
        """
        check_is_fitted(self, "params_")
        data = self._dataset(X)
        ws = em._Workspace.from_dataset(self.model_, data)
        out = np.zeros((data.n_records, ws.n_latent_configs))
        posts = []
        for s in range(len(ws.strata)):
            joint = ws.cell_latent_probs(self.params_, s)
            posts.append(joint / joint.sum(axis=1, keepdims=True))
        for u in range(data.n_records):
            s, cell = ws.row_map[u]
            out[u] = posts[s][cell]
        return out

    def latent_configurations(self) -> np.ndarray:
        """Category grid matching ``predict_proba`` columns (H, n_latent)."""
        check_is_fitted(self, "params_")
        model = self.model_
        lat_levels = tuple(model.node(i).n_categories for i in model.latent_indices)
        if not lat_levels:
            return np.zeros((1, 0), dtype=np.int64)
        return np.indices(lat_levels).reshape(len(lat_levels), -1).T

    def sample(self, n_samples: int, random_state=None, covariates=None):
        """Draw ancestral samples from the fitted model (observed columns)."""
        check_is_fitted(self, "params_")
        rs = self.random_state if random_state is None else random_state
        seed = check_random_state(rs).randint(0, 2**31 - 1)
        data = causal.sample_data(self.model_, self._params(), n_samples, seed,
                                  covariates=covariates)
        return data.obs

    # ------------------------------------------------------------------
    def joint_distribution(self, covariates=None):
        return causal.joint_distribution(self.model_, self._params(), covariates)

    def intervene(self, assignments: dict, covariates=None):
        iv = causal.Intervention.of(self._resolve(assignments))
        return causal.intervene(self.model_, self._params(), iv, covariates)

    def causal_effect(self, outcome, x1: dict, x0: dict, mediators=(), thresholds=(),
                      covariates=None):
        query = causal.EffectQuery(
            outcome=self._resolve_node(outcome),
            x1=causal.Intervention.of(self._resolve(x1)),
            x0=causal.Intervention.of(self._resolve(x0)),
            mediators=tuple(self._resolve_node(m) for m in mediators),
            thresholds=tuple(thresholds),
        )
        return causal.evaluate_effect(self.model_, self._params(), query, covariates)

    def _resolve_node(self, node) -> int:
        if isinstance(node, str):
            return self.model_.by_name(node).index
        return int(node)

    def _resolve(self, assignments: dict) -> dict:
        return {self._resolve_node(k): int(v) for k, v in assignments.items()}
