"""Single-generator segmentation, domain adaptation and self-distillation
switched by per-task normalization codes."""

from .codespace import (
    AdaInCodePair,
    CodeMode,
    Domain,
    HyperParams,
    PrebuiltCodes,
    StyleCode,
    TaskCode,
    TaskName,
    build_code_table,
    get_task,
    prebuild_inference_codes,
    resolve_code,
)
from .networks import (
    Discriminator,
    CodeGenerator,
    Generator,
    ModelBundle,
    NetConfig,
    StyleEncoder,
    adain_forward,
    build_models,
    count_parameters,
    instance_norm,
)

__all__ = [
    "AdaInCodePair", "CodeMode", "Domain", "HyperParams", "PrebuiltCodes",
    "StyleCode", "TaskCode", "TaskName", "build_code_table", "get_task",
    "prebuild_inference_codes", "resolve_code",
    "Discriminator", "CodeGenerator", "Generator", "ModelBundle", "NetConfig",
    "StyleEncoder", "adain_forward", "build_models", "count_parameters",
    "instance_norm",
]

__version__ = "0.1.0"
