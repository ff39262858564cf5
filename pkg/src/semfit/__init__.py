"""semfit: structural equation modeling with fixed and random effects."""

from . import examples, utils
from .dot import emit_dot
from .effects import (
    EffectAR,
    EffectBase,
    EffectFree,
    EffectMA,
    EffectMatern,
    EffectStatic,
)
from .extras import bias_correction, create_regularization, explore_cfa_model
from .generate import generate_data, generate_description, generate_parameters
from .models import Model, ModelEffects, ModelGeneralizedEffects, ModelMeans
from .syntax import parse, serialize

__version__ = "0.1.0"

__all__ = [
    "Model", "ModelMeans", "ModelEffects", "ModelGeneralizedEffects",
    "EffectBase", "EffectStatic", "EffectFree", "EffectMA", "EffectAR",
    "EffectMatern",
    "parse", "serialize", "emit_dot",
    "bias_correction", "create_regularization", "explore_cfa_model",
    "generate_description", "generate_parameters", "generate_data",
    "examples", "utils",
]
