"""Parameter-free multimodal coherent-field fusion for nested tumor-region segmentation."""
from .evaluation import PhantomSpec, dice, generate_phantom, hierarchy_violation_rate
from .fusion import FusionConfig, FusionDiagnostics, FusionResult, run_fusion
from .tokens import PhraseEmbedding, TokenSet, build_semantic_tokens, build_visual_tokens

__version__ = "0.1.0"
