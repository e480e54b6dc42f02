"""Model documents: DAG structure, links, and the coefficient layout.

A model is an ordered list of categorical nodes.  The order is causal:
parents always come before their children, so node ``i`` may only list
nodes ``1..i-1`` as parents.  Each node declares its number of
categories (codes ``0..c-1``), whether it is latent, the logit link
that parameterizes its conditional distribution given its parents
(``adjacent``, ``global`` or ``continuation``), and any numeric
exogenous covariates entering its logits.

JSON document schema::

    {
      "nodes": [
        {"name": "U", "categories": 3, "latent": true, "link": "adjacent",
         "parents": [], "covariates": []},
        {"name": "A", "categories": 2, "link": "global", "parents": ["U"]}
      ],
      "covariates": ["age"]
    }

Only ``name`` and ``categories`` are required per node; ``latent``
defaults to false, ``link`` to ``"global"``, ``parents`` and
``covariates`` to empty.  The top-level ``covariates`` key is optional
and fixes the order of covariate columns; when absent the order of
first appearance across nodes is used.

Two optional per-node keys refine the regression design:

``covariates_per_logit``
    When true, each covariate gets one slope per logit instead of a
    single slope shared across logits.

``design``
    A row-major numeric matrix replacing the default additive
    intercept-plus-parent coding with custom regressor columns.  Rows
    run over parent configurations in lexicographic order (categories
    of later parents run fastest) and, within a configuration, over
    logits ``h = 1..c-1``.  Covariate columns are appended after the
    design columns.  This is how parent interactions or non-parallel
    intercept structures are expressed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ModelSemanticError, ModelSyntaxError

LINKS = ("adjacent", "global", "continuation")


@dataclass(frozen=True)
class NodeSpec:
    """One endogenous variable in the causal ordering.

    ``index`` is the 1-based position in the causal order; ``parents``
    hold 1-based indices of earlier nodes, stored sorted ascending.
    """

    index: int
    name: str
    n_categories: int
    is_latent: bool = False
    link: str = "global"
    parents: tuple[int, ...] = ()
    covariates: tuple[str, ...] = ()
    covariates_per_logit: bool = False
    design: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(sorted(int(p) for p in self.parents)))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.design is not None:
            object.__setattr__(
                self, "design", tuple(tuple(float(v) for v in row) for row in self.design)
            )

    @property
    def design_matrix(self) -> np.ndarray | None:
        if self.design is None:
            return None
        return np.asarray(self.design, dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """An ordered node list plus the exogenous covariate labels."""

    nodes: tuple[NodeSpec, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def levels(self) -> tuple[int, ...]:
        return tuple(n.n_categories for n in self.nodes)

    @cached_property
    def observed_indices(self) -> tuple[int, ...]:
        return tuple(n.index for n in self.nodes if not n.is_latent)

    @cached_property
    def latent_indices(self) -> tuple[int, ...]:
        return tuple(n.index for n in self.nodes if n.is_latent)

    @cached_property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)

    def node(self, index: int) -> NodeSpec:
        return self.nodes[index - 1]

    def by_name(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def children(self, index: int) -> tuple[int, ...]:
        return tuple(n.index for n in self.nodes if index in n.parents)


@dataclass(frozen=True)
class LayoutSlot:
    """One coefficient: its owning node, its source, and its level.

    ``source`` is 0 for an intercept increment, a parent's node index
    for a parent slope, a covariate name for a covariate slope, or
    ``"d<k>"`` for the k-th column of a custom design matrix.
    """

    node: int
    source: int | str
    level: int
    label: str


@dataclass(frozen=True)
class ParamLayout:
    """Bijection between (node, source, level) coordinates and flat indices."""

    slots: tuple[LayoutSlot, ...]
    node_slices: tuple[tuple[int, int], ...]

    @property
    def size(self) -> int:
        return len(self.slots)

    def block(self, node: int) -> slice:
        start, stop = self.node_slices[node - 1]
        return slice(start, stop)

    @cached_property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.slots)

    @cached_property
    def index_of(self) -> dict[tuple[int, int | str, int], int]:
        return {(s.node, s.source, s.level): k for k, s in enumerate(self.slots)}


@dataclass
class ParamVector:
    """A flat coefficient vector tied to its layout."""

    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"expected {self.layout.size} coefficients, got {self.values.shape}"
            )

    def block(self, node: int) -> np.ndarray:
        return self.values[self.layout.block(node)]

    def as_dict(self) -> dict[str, float]:
        return {s.label: float(v) for s, v in zip(self.layout.slots, self.values)}

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())


@dataclass
class ValidationReport:
    """Outcome of structural validation; violations are data, not exceptions."""

    violations: list[str]
    node_param_counts: dict[int, int]
    n_params: int
    observed_cells: int
    observed_df: int

    @property
    def ok(self) -> bool:
        return not self.violations


def _subscript_label(parts: list[str]) -> str:
    # beta_{411} for single-digit parts, beta_{14.81} / beta_{12.11.1}
    # when a part needs a separator to stay unambiguous.
    out = ""
    for part in parts[:-1]:
        out += part + ("." if len(part) > 1 else "")
    return "beta_{" + out + parts[-1] + "}"


def node_param_count(model: ModelSpec, node: NodeSpec) -> int:
    """Number of free coefficients in the node's block."""
    c = node.n_categories
    if node.design is not None:
        structural = len(node.design[0]) if node.design else 0
    else:
        structural = (c - 1) + sum(model.node(j).n_categories - 1 for j in node.parents)
    per_cov = (c - 1) if node.covariates_per_logit else 1
    return structural + per_cov * len(node.covariates)


def param_layout(model: ModelSpec) -> ParamLayout:
    """Flat coefficient layout: per node, intercept increments, then one
    slope per parent threshold level, then covariate slopes."""
    slots: list[LayoutSlot] = []
    slices: list[tuple[int, int]] = []
    for node in model.nodes:
        start = len(slots)
        i = node.index
        c = node.n_categories
        if node.design is not None:
            width = len(node.design[0]) if node.design else 0
            for k in range(width):
                slots.append(LayoutSlot(i, f"d{k + 1}", 0, f"beta_{{{i}.d{k + 1}}}"))
        else:
            for level in range(1, c):
                slots.append(
                    LayoutSlot(i, 0, level, _subscript_label([str(i), "0", str(level)]))
                )
            for j in node.parents:
                for level in range(1, model.node(j).n_categories):
                    slots.append(
                        LayoutSlot(i, j, level, _subscript_label([str(i), str(j), str(level)]))
                    )
        for name in node.covariates:
            if node.covariates_per_logit:
                for level in range(1, c):
                    slots.append(LayoutSlot(i, name, level, f"beta_{{{i}.{name}.{level}}}"))
            else:
                slots.append(LayoutSlot(i, name, 0, f"beta_{{{i}.{name}}}"))
        slices.append((start, len(slots)))
    return ParamLayout(tuple(slots), tuple(slices))


def validate(model: ModelSpec) -> ValidationReport:
    """Collect every structural violation; an empty list means valid."""
    violations: list[str] = []
    names_seen: set[str] = set()
    for pos, node in enumerate(model.nodes, start=1):
        who = f"node {node.name!r}"
        if node.index != pos:
            violations.append(f"{who}: index {node.index} out of sequence (expected {pos})")
        if node.name in names_seen:
            violations.append(f"{who}: duplicate node name")
        names_seen.add(node.name)
        if node.n_categories < 2:
            violations.append(f"{who}: n_categories must be >= 2")
        if node.link not in LINKS:
            violations.append(f"{who}: unknown link keyword {node.link!r}")
        if len(set(node.parents)) != len(node.parents):
            violations.append(f"{who}: duplicate parent")
        for j in node.parents:
            if not 1 <= j < node.index:
                violations.append(f"{who}: non-recursive parent reference ({j})")
        if len(set(node.covariates)) != len(node.covariates):
            violations.append(f"{who}: duplicate covariate")
        for name in node.covariates:
            if name not in model.covariate_names:
                violations.append(f"{who}: undeclared covariate {name!r}")
        if node.design is not None:
            c = node.n_categories
            n_configs = 1
            for j in node.parents:
                if 1 <= j < node.index:
                    n_configs *= model.node(j).n_categories
            expected_rows = n_configs * (c - 1)
            widths = {len(row) for row in node.design}
            if len(node.design) != expected_rows:
                violations.append(
                    f"{who}: design matrix has {len(node.design)} rows, expected {expected_rows}"
                )
            if len(widths) > 1 or widths == {0}:
                violations.append(f"{who}: design matrix rows have inconsistent width")
    if not model.observed_indices:
        violations.append("model has no observed node")

    counts = {n.index: node_param_count(model, n) for n in model.nodes}
    observed_cells = 1
    for i in model.observed_indices:
        observed_cells *= model.node(i).n_categories
    return ValidationReport(
        violations=violations,
        node_param_counts=counts,
        n_params=sum(counts.values()),
        observed_cells=observed_cells,
        observed_df=observed_cells - 1,
    )


def _require(condition: bool, message: str, node: str | None = None):
    if not condition:
        raise ModelSemanticError(message, node=node)


def parse_model(text: str | dict) -> ModelSpec:
    """Parse and validate a model document (JSON text or parsed object)."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelSyntaxError(f"malformed model document: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise ModelSyntaxError("model document must be an object with a 'nodes' array")
    raw_nodes = doc["nodes"]
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise ModelSyntaxError("'nodes' must be a non-empty array")

    declared_cov = doc.get("covariates")
    seen_cov: list[str] = []
    name_to_index: dict[str, int] = {}
    nodes: list[NodeSpec] = []
    for pos, raw in enumerate(raw_nodes, start=1):
        if not isinstance(raw, dict):
            raise ModelSyntaxError(f"node entry {pos} is not an object")
        name = raw.get("name")
        _require(isinstance(name, str) and name != "", "missing or invalid 'name'", node=str(pos))
        _require(name not in name_to_index, "duplicate node name", node=name)
        cats = raw.get("categories")
        _require(isinstance(cats, int) and not isinstance(cats, bool), "missing integer 'categories'", node=name)
        _require(cats >= 2, f"n_categories must be >= 2, got {cats}", node=name)
        link = raw.get("link", "global")
        _require(link in LINKS, f"unknown link keyword {link!r}", node=name)
        parents = []
        for pname in raw.get("parents", []):
            _require(isinstance(pname, str), "parent references must be names", node=name)
            _require(pname != name, "node cannot be its own parent", node=name)
            _require(
                pname in name_to_index,
                f"non-recursive parent reference: {pname!r} does not precede {name!r}",
                node=name,
            )
            parents.append(name_to_index[pname])
        _require(len(set(parents)) == len(parents), "duplicate parent", node=name)
        covs = list(raw.get("covariates", []))
        for cname in covs:
            _require(isinstance(cname, str), "covariate references must be names", node=name)
            if declared_cov is not None:
                _require(cname in declared_cov, f"undeclared covariate {cname!r}", node=name)
            elif cname not in seen_cov:
                seen_cov.append(cname)
        design = raw.get("design")
        if design is not None:
            _require(
                isinstance(design, list) and all(isinstance(r, list) for r in design),
                "'design' must be a row-major numeric matrix",
                node=name,
            )
        nodes.append(
            NodeSpec(
                index=pos,
                name=name,
                n_categories=cats,
                is_latent=bool(raw.get("latent", False)),
                link=link,
                parents=tuple(sorted(parents)),
                covariates=tuple(covs),
                covariates_per_logit=bool(raw.get("covariates_per_logit", False)),
                design=design,
            )
        )
        name_to_index[name] = pos

    covariate_names = tuple(declared_cov) if declared_cov is not None else tuple(seen_cov)
    model = ModelSpec(nodes=tuple(nodes), covariate_names=covariate_names)
    report = validate(model)
    if not report.ok:
        raise ModelSemanticError("; ".join(report.violations))
    return model


def emit_model(model: ModelSpec) -> str:
    """Serialize a model back to its JSON document form (round-trips parse_model)."""
    doc: dict = {"nodes": []}
    for node in model.nodes:
        entry: dict = {
            "name": node.name,
            "categories": node.n_categories,
            "latent": node.is_latent,
            "link": node.link,
            "parents": [model.node(j).name for j in node.parents],
            "covariates": list(node.covariates),
        }
        if node.covariates_per_logit:
            entry["covariates_per_logit"] = True
        if node.design is not None:
            entry["design"] = [list(row) for row in node.design]
        doc["nodes"].append(entry)
    if model.covariate_names:
        doc["covariates"] = list(model.covariate_names)
    return json.dumps(doc, indent=2)


def load_model(path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model(fh.read())


def describe_model(model: ModelSpec) -> str:
    """Plain-text summary: one row per node with index, name, category
    count, link, and parent list."""
    rows = [("i", "name", "n.cat.", "logit", "parents")]
    for node in model.nodes:
        parents = ", ".join(model.node(j).name for j in node.parents) or "-"
        rows.append((str(node.index), node.name, str(node.n_categories), node.link, parents))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    lines = []
    for r in rows:
        lines.append(
            "  ".join(r[k].ljust(widths[k]) for k in range(4)) + "  " + r[4]
        )
    return "\n".join(lines)
