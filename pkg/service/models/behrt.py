"""
Models for the BEHRT-style transformer parameters

HyperParams fix the shapes; ModelParams and ParamGradients are named
tensor collections over the canonical tensor names.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Mapping

import numpy as np

from .base import ConfigBase, DataValidationError
from .vocabulary import FIRST_DISEASE_ID, Vocabulary

logger = logging.getLogger("flask.app")

INIT_STD = 0.02
INIT_CLIP = 2.0
# std of a standard normal truncated at +-INIT_CLIP
TRUNCATED_UNIT_STD = 0.8796256610342398
NEXT_VISIT_PREFIX = "next_visit."
MLM_PREFIX = "mlm."


class Task(str, Enum):
    """Training objective, also selects the output head"""

    MLM = "MLM"
    NEXT_VISIT = "NEXT_VISIT"


######################################################################
#  H Y P E R   P A R A M E T E R S
######################################################################
@dataclass(frozen=True)
class HyperParams(ConfigBase):
    """Architecture and optimizer settings"""

    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64
    vocab_size: int = FIRST_DISEASE_ID + 2
    num_groups: int = 2
    age_buckets: int = 121
    year_buckets: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    mask_prob: float = 0.15
    dropout: float = 0.0

    def __post_init__(self):
        self._require(self.hidden > 0 and self.layers > 0 and self.heads > 0, "sizes must be positive")
        self._require(self.hidden % self.heads == 0, f"hidden {self.hidden} not divisible by heads {self.heads}")
        self._require(self.ffn_dim > 0, "ffn_dim must be positive")
        self._require(self.max_len >= 3, "max_len must be at least 3")
        self._require(self.num_groups >= 1, "num_groups must be positive")
        self._require(self.vocab_size == FIRST_DISEASE_ID + self.num_groups, "vocab_size must equal 5 + num_groups")
        self._require(self.age_buckets > 0 and self.year_buckets > 0, "bucket counts must be positive")
        self._require(self.learning_rate >= 0, "learning_rate must be non-negative")
        self._require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)")
        self._require(self.epsilon > 0, "epsilon must be positive")
        self._require(self.batch_size > 0, "batch_size must be positive")
        self._require(0 <= self.mask_prob < 1, "mask_prob must lie in [0, 1)")
        self._require(self.dropout == 0.0, "dropout is not supported; training is deterministic")

    @property
    def head_dim(self) -> int:
        """Width of one attention head"""
        return self.hidden // self.heads

    @classmethod
    def for_vocabulary(cls, vocab: Vocabulary, **overrides) -> "HyperParams":
        """Hyper-parameters whose token, group and bucket sizes match a vocabulary"""
        return cls(
            **{
                **overrides,
                "vocab_size": vocab.size,
                "num_groups": vocab.num_groups,
                "age_buckets": vocab.age_buckets,
                "year_buckets": vocab.year_buckets,
            }
        )


def canonical_shapes(hyper: HyperParams) -> dict[str, tuple[int, ...]]:
    """Tensor name to shape, in canonical (checkpoint) order"""
    h, f = hyper.hidden, hyper.ffn_dim
    shapes = {
        "embed.token": (hyper.vocab_size, h),
        "embed.age": (hyper.age_buckets, h),
        "embed.year": (hyper.year_buckets, h),
        "embed.segment": (2, h),
        "embed.position": (hyper.max_len, h),
        "embed.ln.gain": (h,),
        "embed.ln.bias": (h,),
    }
    for layer in range(hyper.layers):
        prefix = f"layer{layer}."
        for proj in ("query", "key", "value", "output"):
            shapes[f"{prefix}attn.{proj}.weight"] = (h, h)
            shapes[f"{prefix}attn.{proj}.bias"] = (h,)
        for norm in ("ln1", "ln2"):
            shapes[f"{prefix}{norm}.gain"] = (h,)
            shapes[f"{prefix}{norm}.bias"] = (h,)
        shapes[f"{prefix}ffn.in.weight"] = (h, f)
        shapes[f"{prefix}ffn.in.bias"] = (f,)
        shapes[f"{prefix}ffn.out.weight"] = (f, h)
        shapes[f"{prefix}ffn.out.bias"] = (h,)
    shapes["mlm.weight"] = (h, hyper.vocab_size)
    shapes["mlm.bias"] = (hyper.vocab_size,)
    shapes["next_visit.weight"] = (h, hyper.num_groups)
    shapes["next_visit.bias"] = (hyper.num_groups,)
    return shapes


######################################################################
#  N A M E D   T E N S O R S
######################################################################
class TensorBundle(Mapping):
    """Immutable-by-convention mapping from canonical names to arrays"""

    def __init__(self, hyper: HyperParams, tensors: Mapping[str, np.ndarray]):
        self.hyper = hyper
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __repr__(self):
        return f"<{type(self).__name__} tensors=[{len(self.tensors)}] H={self.hyper.hidden}>"

    def map(self, func: Callable[[np.ndarray], np.ndarray]):
        """New bundle of the same type with func applied to every tensor"""
        return type(self)(self.hyper, {name: func(value) for name, value in self.tensors.items()})

    def copy(self):
        """Deep copy"""
        return self.map(np.copy)

    def astype(self, dtype):
        """Copy with every tensor cast to dtype"""
        return self.map(lambda value: value.astype(dtype))

    @property
    def dtype(self):
        """Dtype of the tensors"""
        return next(iter(self.tensors.values())).dtype

    def validate(self) -> None:
        """Checks the name set and shapes against the hyper-parameters"""
        expected = canonical_shapes(self.hyper)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise DataValidationError(f"tensor names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DataValidationError(f"tensor '{name}' has shape {self.tensors[name].shape}, expected {shape}")


class ModelParams(TensorBundle):
    """The transformer's weights"""


class ParamGradients(TensorBundle):
    """Gradients congruent with ModelParams"""

    @classmethod
    def zeros_like(cls, params: TensorBundle) -> "ParamGradients":
        """All-zero gradients for a parameter set"""
        return cls(params.hyper, {name: np.zeros_like(value) for name, value in params.items()})


######################################################################
#  I N I T I A L I Z A T I O N
######################################################################
def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    draw = rng.standard_normal(shape)
    outside = np.abs(draw) > INIT_CLIP
    while outside.any():
        draw[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(draw) > INIT_CLIP
    return draw * (INIT_STD / TRUNCATED_UNIT_STD)


def init_params(hyper: HyperParams, seed: int) -> ModelParams:
    """Weights from a normal truncated at 2 sigma and rescaled to std 0.02, biases 0, layer-norm gains 1"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in canonical_shapes(hyper).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _truncated_normal(rng, shape).astype(np.float32)
    return ModelParams(hyper, tensors)


def transfer_for_finetune(pretrained: ModelParams, seed: int, hyper: HyperParams = None) -> ModelParams:
    """Copies every tensor of a pretrained model except the next-visit head, which is freshly initialized"""
    hyper = hyper or pretrained.hyper
    fresh = init_params(hyper, seed)
    base = ModelParams(hyper, pretrained.tensors)
    base.validate()
    tensors = {
        name: (fresh[name] if name.startswith(NEXT_VISIT_PREFIX) else np.array(value, dtype=np.float32))
        for name, value in base.items()
    }
    logger.info("Transferred %d pretrained tensors, re-initialized the next-visit head", len(tensors) - 2)
    return ModelParams(hyper, tensors)

