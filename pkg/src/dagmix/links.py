"""Logit link families and the additive regression design.

For a node with categories ``0..c-1`` the conditional distribution
given its parents is parameterized by ``c-1`` logits.  Three families
are supported:

adjacent
    ``lam_h = log P(Z=h) - log P(Z=h-1)``; any real vector is valid.
global
    ``lam_h = logit P(Z >= h)`` (survival orientation), which demands a
    strictly decreasing vector.
continuation
    ``lam_h = log[P(Z >= h) / P(Z = h-1)]``; any real vector is valid.

Logits are linear in the coefficients: intercepts use incremental
coding (the h-th logit's intercept is the cumulative sum of the first h
increments) and each parent ``Z_j`` contributes threshold-indicator
terms ``beta_jl * I(z_j >= l)`` shared across logits, so the regressor
row for logit ``h`` is fully determined by the parent configuration and
the covariate values.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit

from .errors import LinkError
from .model import ModelSpec, NodeSpec

LAMBDA_BOUND = 30.0  # |lam| cap enforced inside M-step line searches only


def valid_logits(link: str, lam: np.ndarray) -> bool:
    """True when the logit vector(s) can be turned into a distribution."""
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if not np.all(np.isfinite(lam)):
        return False
    if link == "global" and lam.shape[-1] > 1:
        return bool(np.all(np.diff(lam, axis=-1) < 0))
    return True


def logits_to_probs(link: str, lam, validate: bool = True) -> np.ndarray:
    """Reconstruct the category distribution from a logit vector.

    Vectorized over leading axes: input ``(..., c-1)`` gives ``(..., c)``.
    ``validate=False`` skips the global-link monotonicity check (for
    callers that already checked).
    """
    lam = np.asarray(lam, dtype=float)
    scalar_input = lam.ndim == 1
    lam = np.atleast_2d(lam)
    ones = np.ones(lam.shape[:-1] + (1,))
    if link == "adjacent":
        cum = np.cumsum(lam, axis=-1)
        scores = np.concatenate([np.zeros_like(ones), cum], axis=-1)
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
    elif link == "global":
        if validate and not valid_logits(link, lam):
            raise LinkError("invalid cumulative logits: lambda must be strictly decreasing")
        surv = expit(lam)
        p = np.concatenate(
            [ones - surv[..., :1], -np.diff(surv, axis=-1), surv[..., -1:]], axis=-1
        )
    elif link == "continuation":
        surv = np.concatenate([ones, np.cumprod(expit(lam), axis=-1)], axis=-1)
        p = np.concatenate([surv[..., :-1] - surv[..., 1:], surv[..., -1:]], axis=-1)
    else:
        raise ValueError(f"unknown link {link!r}")
    return p[0] if scalar_input else p


def probs_to_logits(link: str, p) -> np.ndarray:
    """Exact inverse of :func:`logits_to_probs` on the open simplex."""
    p = np.asarray(p, dtype=float)
    scalar_input = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any(p <= 0):
        raise LinkError("probabilities must be strictly positive")
    if link == "adjacent":
        lam = np.diff(np.log(p), axis=-1)
    elif link in ("global", "continuation"):
        surv = np.cumsum(p[..., ::-1], axis=-1)[..., ::-1]  # S_h = P(Z >= h), S_0 = 1
        if link == "global":
            lam = logit(surv[..., 1:])
        else:
            lam = logit(surv[..., 1:] / surv[..., :-1])
    else:
        raise ValueError(f"unknown link {link!r}")
    return lam[0] if scalar_input else lam


def dprobs_dlogits(link: str, lam) -> np.ndarray:
    """Derivative matrix ``d P(Z=h) / d lam_k``, shape ``(..., c, c-1)``.

    Columns sum to zero since the probabilities sum to one.
    """
    lam = np.asarray(lam, dtype=float)
    scalar_input = lam.ndim == 1
    lam = np.atleast_2d(lam)
    cm1 = lam.shape[-1]
    c = cm1 + 1
    p = logits_to_probs(link, lam)
    if link == "adjacent":
        # dP(h)/dlam_k = p_h (I(h >= k) - S_k), S_k = P(Z >= k)
        surv = np.cumsum(p[..., ::-1], axis=-1)[..., ::-1]
        ind = (np.arange(c)[:, None] >= np.arange(1, c)[None, :]).astype(float)
        jac = p[..., :, None] * (ind - surv[..., None, 1:])
    elif link == "global":
        # dP(h)/dlam_k = s_k (1 - s_k) (I(h = k) - I(h = k - 1))
        sprime = expit(lam) * (1.0 - expit(lam))
        pattern = np.zeros((c, cm1))
        for k in range(1, c):
            pattern[k, k - 1] = 1.0
            pattern[k - 1, k - 1] = -1.0
        jac = sprime[..., None, :] * pattern
    elif link == "continuation":
        # dP(h)/dlam_k = p_h [(1 - s_k) I(k <= h) - s_k I(k = h + 1)]
        s = expit(lam)
        le = (np.arange(1, c)[None, :] <= np.arange(c)[:, None]).astype(float)
        eq = (np.arange(1, c)[None, :] == np.arange(c)[:, None] + 1).astype(float)
        jac = p[..., :, None] * ((1.0 - s)[..., None, :] * le - s[..., None, :] * eq)
    else:
        raise ValueError(f"unknown link {link!r}")
    return jac[0] if scalar_input else jac


def structural_design(model: ModelSpec, node: NodeSpec) -> np.ndarray:
    """Regressor matrix for the intercept-plus-parent part of one node.

    Shape ``(G * (c-1), w)`` where ``G`` is the number of parent
    configurations (lexicographic order, later parents fastest) and
    logits run fastest within a configuration.  A custom per-node
    design matrix replaces the default additive coding verbatim.
    """
    c = node.n_categories
    parent_levels = [model.node(j).n_categories for j in node.parents]
    n_configs = int(np.prod(parent_levels)) if parent_levels else 1
    if node.design is not None:
        design = node.design_matrix
        if design.shape[0] != n_configs * (c - 1):
            raise ValueError(
                f"node {node.name!r}: design has {design.shape[0]} rows, "
                f"expected {n_configs * (c - 1)}"
            )
        return design
    intercept = np.tril(np.ones((c - 1, c - 1)))  # I(l <= h)
    blocks = [np.tile(intercept, (n_configs, 1))]
    if node.parents:
        grids = np.indices(parent_levels).reshape(len(parent_levels), -1).T  # (G, n_par)
        for k, lv in enumerate(parent_levels):
            thresh = (grids[:, k][:, None] >= np.arange(1, lv)[None, :]).astype(float)
            blocks.append(np.repeat(thresh, c - 1, axis=0))
    return np.concatenate(blocks, axis=1)


def covariate_design(node: NodeSpec, covariate_values: np.ndarray, n_configs: int) -> np.ndarray:
    """Covariate columns appended after the structural design.

    Default: one column per covariate, constant across logits.  With
    ``covariates_per_logit`` each covariate spans ``c-1`` columns, one
    per logit.
    """
    c = node.n_categories
    x = np.asarray(covariate_values, dtype=float).reshape(-1)
    if x.size != len(node.covariates):
        raise ValueError(
            f"node {node.name!r} expects {len(node.covariates)} covariate values, got {x.size}"
        )
    n_rows = n_configs * (c - 1)
    if not node.covariates:
        return np.zeros((n_rows, 0))
    if node.covariates_per_logit:
        eye = np.tile(np.eye(c - 1), (n_configs, 1))
        return np.concatenate([eye * xm for xm in x], axis=1)
    return np.tile(x, (n_rows, 1))


def full_design(model: ModelSpec, node: NodeSpec, covariate_values=None) -> np.ndarray:
    """Structural design plus covariate columns for one node."""
    struct = structural_design(model, node)
    if not node.covariates:
        return struct
    if covariate_values is None:
        raise ValueError(f"node {node.name!r} requires covariate values")
    n_configs = struct.shape[0] // (node.n_categories - 1)
    return np.concatenate(
        [struct, covariate_design(node, covariate_values, n_configs)], axis=1
    )


def linear_predictor(model: ModelSpec, node: NodeSpec, parent_config, covariates, beta_block) -> np.ndarray:
    """Logit vector of one node at one parent configuration.

    ``parent_config`` lists categories of the node's parents (ascending
    parent order); ``covariates`` the node's covariate values.
    """
    parent_levels = [model.node(j).n_categories for j in node.parents]
    if len(parent_config) != len(parent_levels):
        raise ValueError(
            f"node {node.name!r} has {len(parent_levels)} parents, "
            f"got {len(parent_config)} parent categories"
        )
    config_index = 0
    for z, lv in zip(parent_config, parent_levels):
        if not 0 <= int(z) < lv:
            raise ValueError(f"parent category {z} out of range")
        config_index = config_index * lv + int(z)
    c = node.n_categories
    design = full_design(model, node, covariates)
    beta_block = np.asarray(beta_block, dtype=float)
    if beta_block.shape != (design.shape[1],):
        raise ValueError(
            f"node {node.name!r} expects {design.shape[1]} coefficients, "
            f"got {beta_block.shape}"
        )
    rows = design[config_index * (c - 1): (config_index + 1) * (c - 1)]
    return rows @ beta_block


def node_probs(model: ModelSpec, node: NodeSpec, beta_block, covariate_values=None) -> np.ndarray:
    """Conditional distribution of one node for every parent configuration.

    Returns shape ``(G, c)`` with parent configurations in lexicographic
    order (later parents fastest).
    """
    design = full_design(model, node, covariate_values)
    beta_block = np.asarray(beta_block, dtype=float)
    lam = (design @ beta_block).reshape(-1, node.n_categories - 1)
    return logits_to_probs(node.link, lam)
