"""dagmix: categorical DAG models with latent nodes, fitted by EM.

The package fits recursive systems of ordinal-logit equations over a
directed acyclic graph whose nodes may be latent, then evaluates
interventional and natural direct effects from the fitted joint
distribution.
"""

__version__ = "0.1.0"

from .causal import (
    EffectEstimate,
    EffectQuery,
    Intervention,
    causal_effect,
    format_effect_table,
    intervene,
    joint_distribution,
    natural_direct_effect,
    node_cpt,
    observed_table,
    parse_effect_queries,
    sample_data,
)
from .em import (
    CompletedTable,
    Dataset,
    FitResult,
    align_to_reference,
    canonicalize_latent_labels,
    e_step,
    fit,
    initialize,
    loglik,
    m_step,
    permute_latent_categories,
)
from .errors import (
    DagmixError,
    DataError,
    LinkError,
    ModelSemanticError,
    ModelSyntaxError,
    NumericalError,
)
from .estimator import DagMixture
from .inference import (
    IdentifiabilityReport,
    ScoreMatrix,
    attach_standard_errors,
    expected_information,
    identifiability_check,
    model_based_information,
    standard_errors,
    unit_scores,
)
from .links import (
    dprobs_dlogits,
    linear_predictor,
    logits_to_probs,
    probs_to_logits,
    valid_logits,
)
from .model import (
    ModelSpec,
    NodeSpec,
    ParamLayout,
    ParamVector,
    ValidationReport,
    describe_model,
    emit_model,
    load_model,
    param_layout,
    parse_model,
    validate,
)
from .tables import LexTable, build_index_map, condition, expand, lex_index, marginalize

__all__ = [name for name in dir() if not name.startswith("_")]
