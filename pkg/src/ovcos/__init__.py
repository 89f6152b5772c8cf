"""Open-vocabulary camouflaged object segmentation on a frozen vision-language
backbone: prompt ensembling, an iterative semantically guided decoder,
class-aware metrics and dataset tooling."""
from .backbone import (
    CONVNEXT_L_SPEC,
    STUB_SPEC,
    BackboneSpec,
    ClassEmbeddingSet,
    FeaturePyramid,
    InvalidInputError,
    NumericalFaultError,
    StubBackbone,
    build_backbone,
)
from .config import RunConfig, load_config
from .decoder import DecoderConfig, IterativeDecoder, build_decoder
from .metrics import MetricReport, evaluate as evaluate_predictions
from .prompts import CAMO_PROMPTS, PromptTemplateSet, class_embeddings, hausdorff_distance

__version__ = "0.1.0"
